//! Folding: per-layer PE count P, SIMD width S and multi-vector width M.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerGeometry, LayerKind, Topology};
use crate::pipeline::count_ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFold {
    /// Index into the topology's layer list.
    pub layer: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Fn")]
    pub f_n: usize,
    #[serde(rename = "Fs")]
    pub f_s: usize,
    #[serde(rename = "Fm")]
    pub f_m: usize,
    #[serde(rename = "II")]
    pub ii: u64,
}

impl LayerFold {
    pub fn new(layer: usize, g: &LayerGeometry, p: usize, s: usize, m: usize) -> Result<Self> {
        let ii = ii_of(g, p, s, m)?;
        Ok(Self {
            layer,
            p,
            s,
            m,
            f_n: g.neurons() / p,
            f_s: g.synapses_per_neuron / s,
            f_m: g.output_pixels(),
            ii,
        })
    }

    /// Fᵐ after multi-vector execution: ⌈Fm/M⌉.
    pub fn f_m_eff(&self) -> usize {
        self.f_m.div_ceil(self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFold>,
}

impl FoldingConfig {
    pub fn ii_max(&self) -> u64 {
        self.layers.iter().map(|l| l.ii).max().unwrap_or(0)
    }

    /// Checks every fold against the topology's matrix layers.
    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.layers.len() != topology.mvu_count() {
            return Err(Error::InvalidFolding(format!(
                "{} folds for {} matrix layers",
                self.layers.len(),
                topology.mvu_count()
            )));
        }
        for (f, (index, g)) in self.layers.iter().zip(topology.mvu_layers()) {
            let expect = LayerFold::new(index, g, f.p, f.s, f.m)?;
            if *f != expect {
                return Err(Error::InvalidFolding(format!("layer {index}: stored fold is inconsistent")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub clock_hz: u64,
    pub target_fps: f64,
    /// Cycle budget per frame.
    pub budget: u64,
    pub per_layer_ii: Vec<u64>,
    pub ii_max: u64,
    pub achieved_fps: f64,
    pub gops: f64,
    /// Topology indices of layers that cannot meet the budget.
    pub infeasible: Vec<usize>,
}

/// Initiation interval (X/P)·(Y/S)·⌈Fm/M⌉ in cycles.
pub fn ii_of(g: &LayerGeometry, p: usize, s: usize, m: usize) -> Result<u64> {
    let (x, y, fm) = (g.neurons(), g.synapses_per_neuron, g.output_pixels());
    if !g.is_mvu() {
        return Err(Error::InvalidFolding("pooling layers are not folded".into()));
    }
    if p == 0 || x % p != 0 {
        return Err(Error::InvalidFolding(format!("P = {p} does not divide X = {x}")));
    }
    if s == 0 || y % s != 0 {
        return Err(Error::InvalidFolding(format!("S = {s} does not divide Y = {y}")));
    }
    if m == 0 || m > fm {
        return Err(Error::InvalidFolding(format!("M = {m} outside 1..={fm}")));
    }
    if g.kind == LayerKind::FullyConnected && m != 1 {
        return Err(Error::InvalidFolding("fully-connected layers use M = 1".into()));
    }
    Ok(((x / p) * (y / s) * fm.div_ceil(m)) as u64)
}

pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Cheapest fold with II ≤ `budget`, or `None`.
///
/// Cost is P·S·M, the number of XNOR lanes instantiated. Among equal cost the
/// larger S wins, then the larger P. M is the smallest width meeting the
/// budget for each (P, S).
pub fn cheapest_fold(index: usize, g: &LayerGeometry, budget: u64, mmv_max: usize) -> Option<LayerFold> {
    let fm = g.output_pixels();
    let m_cap = if g.kind == LayerKind::FullyConnected { 1 } else { mmv_max.clamp(1, fm) };
    let mut best: Option<(usize, usize, usize, usize)> = None;
    for &p in &divisors(g.neurons()) {
        for &s in &divisors(g.synapses_per_neuron) {
            let fold = ((g.neurons() / p) * (g.synapses_per_neuron / s)) as u64;
            if fold > budget {
                continue;
            }
            let per_lane = (budget / fold) as usize;
            let m = fm.div_ceil(per_lane.max(1)).max(1);
            if m > m_cap {
                continue;
            }
            let key = (p * s * m, usize::MAX - s, usize::MAX - p, m);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    best.map(|(cost, s_inv, p_inv, m)| {
        let (s, p) = (usize::MAX - s_inv, usize::MAX - p_inv);
        debug_assert_eq!(cost, p * s * m);
        LayerFold::new(index, g, p, s, m).expect("enumerated folds are valid")
    })
}

/// Rate-balanced folding for `target_fps` at `clock_hz`.
pub fn schedule(
    topology: &Topology,
    target_fps: f64,
    clock_hz: u64,
    mmv_allowed: bool,
    mmv_max: usize,
) -> Result<(FoldingConfig, ScheduleReport)> {
    if !(target_fps > 0.0) || !target_fps.is_finite() {
        return Err(Error::Validation(format!("target fps must be positive, got {target_fps}")));
    }
    if clock_hz == 0 {
        return Err(Error::Validation("clock must be positive".into()));
    }
    let budget = (clock_hz as f64 / target_fps).floor() as u64;
    let mmv = if mmv_allowed { mmv_max.max(1) } else { 1 };
    let mut layers = Vec::new();
    let mut infeasible = Vec::new();
    for (index, g) in topology.mvu_layers() {
        match cheapest_fold(index, g, budget, mmv) {
            Some(f) => layers.push(f),
            None => {
                let m = if g.kind == LayerKind::FullyConnected { 1 } else { mmv.min(g.output_pixels()) };
                let full = LayerFold::new(index, g, g.neurons(), g.synapses_per_neuron, m)?;
                if !mmv_allowed {
                    return Err(Error::Infeasible {
                        layer: index,
                        ii: full.ii,
                        budget,
                    });
                }
                infeasible.push(index);
                layers.push(full);
            }
        }
    }
    let config = FoldingConfig { layers };
    let report = report_for(topology, &config, target_fps, clock_hz, budget, infeasible);
    Ok((config, report))
}

fn report_for(
    topology: &Topology,
    config: &FoldingConfig,
    target_fps: f64,
    clock_hz: u64,
    budget: u64,
    infeasible: Vec<usize>,
) -> ScheduleReport {
    let ii_max = config.ii_max();
    let achieved_fps = if ii_max == 0 { 0.0 } else { clock_hz as f64 / ii_max as f64 };
    ScheduleReport {
        clock_hz,
        target_fps,
        budget,
        per_layer_ii: config.layers.iter().map(|l| l.ii).collect(),
        ii_max,
        achieved_fps,
        gops: count_ops(topology).total_ops as f64 * achieved_fps / 1e9,
        infeasible,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBalance {
    pub ii_max: u64,
    pub ii_min: u64,
    pub ratio: f64,
    /// Topology indices of layers with II < ii_max/2.
    pub over_provisioned: Vec<usize>,
}

pub fn rate_balance_check(config: &FoldingConfig) -> RateBalance {
    let ii_max = config.ii_max();
    let ii_min = config.layers.iter().map(|l| l.ii).min().unwrap_or(0);
    RateBalance {
        ii_max,
        ii_min,
        ratio: if ii_min == 0 { 0.0 } else { ii_max as f64 / ii_min as f64 },
        over_provisioned: config
            .layers
            .iter()
            .filter(|l| 2 * l.ii < ii_max)
            .map(|l| l.layer)
            .collect(),
    }
}
