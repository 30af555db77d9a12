//! Analytical device models: on-chip memory allocation, pipeline latency,
//! roofline peaks and the throughput summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Topology};
use crate::mvtu::AccumulatorSpec;
use crate::scheduler::{FoldingConfig, ScheduleReport};

pub const BRAM_WIDTH: u64 = 36;
pub const BRAM_DEPTH: u64 = 1024;
pub const BRAM_BITS: u64 = BRAM_WIDTH * BRAM_DEPTH;

/// Resource cost of one operation of a datatype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lut: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub name: String,
    pub luts: u64,
    pub brams_36k: u64,
    pub dsps: u64,
    pub utilization_factor: f64,
    pub clock_hz: u64,
    pub costs: BTreeMap<String, OpCost>,
}

const BUILTIN: [(&str, &str); 2] = [
    ("vx690t", include_str!("../devices/vx690t.json")),
    ("ku115", include_str!("../devices/ku115.json")),
];

impl DeviceModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let d: DeviceModel = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A shipped device file by short name (`vx690t`, `ku115`).
    pub fn builtin(name: &str) -> Result<Self> {
        let text = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Validation(format!("no built-in device `{name}`")))?;
        Self::from_json(text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.utilization_factor > 0.0 && self.utilization_factor <= 1.0) {
            return Err(Error::Validation(format!(
                "utilization factor {} outside (0, 1]",
                self.utilization_factor
            )));
        }
        for (dtype, c) in &self.costs {
            if c.lut.is_none() && c.dsp.is_none() {
                return Err(Error::Validation(format!("cost entry `{dtype}` is empty")));
            }
            if [c.lut, c.dsp].iter().flatten().any(|&v| !(v > 0.0)) {
                return Err(Error::Validation(format!("cost entry `{dtype}` must be positive")));
            }
        }
        Ok(())
    }

    /// Peak ops/s: min over resources of ⌊available·uf / cost⌋·clock.
    pub fn peak_ops(&self, dtype: &str) -> Result<f64> {
        let c = self.costs.get(dtype).ok_or_else(|| Error::MissingCost(dtype.into()))?;
        let units = |avail: u64, cost: f64| (avail as f64 * self.utilization_factor / cost).floor();
        let lanes = [c.lut.map(|v| units(self.luts, v)), c.dsp.map(|v| units(self.dsps, v))]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        Ok(lanes * self.clock_hz as f64)
    }
}

/// Blocks for one `width × depth` memory at the fixed 36 × 1024 aspect.
pub fn brams_for(width: u64, depth: u64) -> u64 {
    if width == 0 || depth == 0 {
        return 0;
    }
    width.div_ceil(BRAM_WIDTH) * depth.div_ceil(BRAM_DEPTH)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBram {
    /// Index into the topology's layer list.
    pub layer: usize,
    pub weight_bits: u64,
    pub threshold_bits: u64,
    pub buffer_bits: u64,
    pub brams_allocated: u64,
    pub bits_allocated: u64,
    pub utilization: f64,
}

impl LayerBram {
    pub fn used_bits(&self) -> u64 {
        self.weight_bits + self.threshold_bits + self.buffer_bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BramReport {
    pub layers: Vec<LayerBram>,
    pub total_used_bits: u64,
    pub total_brams: u64,
    pub total_bits_allocated: u64,
    /// Σ used / Σ allocated.
    pub utilization: f64,
}

struct Tally {
    brams: u64,
    used: u64,
}

impl Tally {
    fn add(&mut self, count: u64, width: u64, depth: u64) -> u64 {
        self.brams += count * brams_for(width, depth);
        let bits = count * width * depth;
        self.used += bits;
        bits
    }
}

fn finish(layer: usize, weight_bits: u64, threshold_bits: u64, buffer_bits: u64, brams: u64) -> LayerBram {
    let bits_allocated = brams * BRAM_BITS;
    let used = weight_bits + threshold_bits + buffer_bits;
    LayerBram {
        layer,
        weight_bits,
        threshold_bits,
        buffer_bits,
        brams_allocated: brams,
        bits_allocated,
        utilization: if bits_allocated == 0 { 0.0 } else { used as f64 / bits_allocated as f64 },
    }
}

/// Memory allocation of every layer under `config`.
///
/// Each of the P PEs of a matrix layer owns an S-wide, Fn·Fs-deep weight
/// memory and a T-wide, Fn-deep threshold memory (none on the raw head).
/// Multi-vector lanes share these. Conv layers add an input buffer holding
/// the padded map; pools add a two-row buffer.
pub fn bram_estimate(topology: &Topology, config: &FoldingConfig) -> Result<BramReport> {
    config.validate(topology)?;
    let mut folds = config.layers.iter();
    let n_mvu = topology.mvu_count();
    let mut ordinal = 0;
    let mut layers = Vec::new();
    let mut dim_bits = topology.input.bits as u64;
    for (index, g) in topology.layers.iter().enumerate() {
        let mut t = Tally { brams: 0, used: 0 };
        let (mut wb, mut tb, mut bb) = (0, 0, 0);
        match g.kind {
            LayerKind::Maxpool2x2 => {
                bb = t.add(1, g.in_channels as u64, 2 * g.ifm_dim as u64);
            }
            _ => {
                let f = folds.next().expect("validated fold count");
                let mode = topology.io_mode_of(ordinal);
                let (p, s) = (f.p as u64, f.s as u64);
                wb = t.add(p, s, (f.f_n * f.f_s) as u64);
                if ordinal + 1 != n_mvu {
                    let tw = AccumulatorSpec::for_layer(mode, g.synapses_per_neuron).t_bits as u64;
                    tb = t.add(p, tw, f.f_n as u64);
                }
                if g.kind == LayerKind::Conv3x3 {
                    let padded = (g.ifm_dim + 2 * g.padding.border()) as u64;
                    bb = t.add(1, g.in_channels as u64 * dim_bits, padded * padded);
                }
                ordinal += 1;
            }
        }
        dim_bits = 1;
        debug_assert_eq!(t.used, wb + tb + bb);
        layers.push(finish(index, wb, tb, bb, t.brams));
    }
    let total_used_bits = layers.iter().map(|l| l.used_bits()).sum();
    let total_brams = layers.iter().map(|l| l.brams_allocated).sum();
    let total_bits_allocated = total_brams * BRAM_BITS;
    Ok(BramReport {
        layers,
        total_used_bits,
        total_brams,
        total_bits_allocated,
        utilization: if total_bits_allocated == 0 {
            0.0
        } else {
            total_used_bits as f64 / total_bits_allocated as f64
        },
    })
}

impl BramReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>12} {:>10} {:>10} {:>7} {:>7}",
            "layer", "weight_bits", "thr_bits", "buf_bits", "brams", "util"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>12} {:>10} {:>10} {:>7} {:>6.1}%",
                l.layer,
                l.weight_bits,
                l.threshold_bits,
                l.buffer_bits,
                l.brams_allocated,
                100.0 * l.utilization
            );
        }
        let _ = writeln!(
            s,
            "total: {} BRAM36, {} of {} bits used ({:.1}%)",
            self.total_brams,
            self.total_used_bits,
            self.total_bits_allocated,
            100.0 * self.utilization
        );
        s
    }
}

/// Pipeline fill estimate: Σ II / clock, in seconds. Excludes host transfer.
pub fn latency_estimate(config: &FoldingConfig, clock_hz: u64) -> f64 {
    config.layers.iter().map(|l| l.ii).sum::<u64>() as f64 / clock_hz as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub total_ops: u64,
    pub model_bytes: u64,
    pub frame_bytes: u64,
    /// Measured or scheduled ops/s, if known.
    pub attained_ops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub name: String,
    /// Ops per byte of off-chip traffic; parameters stay on chip.
    pub intensity: f64,
    /// Binary compute roof; memory bandwidth is not modelled.
    pub roof_ops: f64,
    pub attained_ops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineReport {
    pub device: String,
    /// ops/s per datatype.
    pub peaks: BTreeMap<String, f64>,
    pub networks: Vec<RooflinePoint>,
}

impl RooflineReport {
    pub fn ratio(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.peaks.get(a)? / self.peaks.get(b)?)
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("device {}\n", self.device);
        let _ = writeln!(s, "{:<10} {:>16}", "datatype", "peak ops/s");
        for (k, v) in &self.peaks {
            let _ = writeln!(s, "{k:<10} {v:>16.4e}");
        }
        if let Some(r) = self.ratio("binary", "float32") {
            let _ = writeln!(s, "binary:float32 peak ratio {r:.1}");
        }
        for n in &self.networks {
            let attained = n.attained_ops.map_or("-".to_string(), |a| format!("{a:.4e}"));
            let _ = writeln!(
                s,
                "{:<16} intensity {:>12.1} ops/B  attained {attained}",
                n.name, n.intensity
            );
        }
        s
    }
}

/// Peaks for every datatype in the device file plus binary network points.
pub fn roofline(device: &DeviceModel, networks: &[NetworkSpec]) -> Result<RooflineReport> {
    let mut peaks = BTreeMap::new();
    for dtype in device.costs.keys() {
        peaks.insert(dtype.clone(), device.peak_ops(dtype)?);
    }
    let binary = device.peak_ops("binary")?;
    let networks = networks
        .iter()
        .map(|n| RooflinePoint {
            name: n.name.clone(),
            intensity: n.total_ops as f64 / n.frame_bytes.max(1) as f64,
            roof_ops: binary,
            attained_ops: n.attained_ops,
        })
        .collect();
    Ok(RooflineReport {
        device: device.name.clone(),
        peaks,
        networks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfpsRow {
    pub network: String,
    pub kfps: f64,
    pub gops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfpsTable {
    pub rows: Vec<KfpsRow>,
}

impl KfpsTable {
    pub fn render_text(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>10}\n", "network", "kFPS", "GOps/s");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>8.1} {:>10.0}", r.network, r.kfps, r.gops);
        }
        s
    }
}

pub fn kfps_table(rows: &[(&Topology, &ScheduleReport)]) -> KfpsTable {
    KfpsTable {
        rows: rows
            .iter()
            .map(|(t, r)| KfpsRow {
                network: t.name.clone(),
                kfps: r.achieved_fps / 1e3,
                gops: r.gops,
            })
            .collect(),
    }
}
