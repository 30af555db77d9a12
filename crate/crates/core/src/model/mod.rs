//! Domain types for binarized networks: feature maps, layer geometry,
//! compiled layers, topologies and the on-disk model container.

mod bits;
mod container;
mod random;
mod topology;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bits::{BitTensor, BitVector};
pub use container::{load_model, read_model, save_model, write_model, MAGIC, VERSION};
pub use random::{compile_reference, generate_random_model, generate_reference_model};
pub use topology::{build_topology, Scale};

/// Largest unsigned 8-bit input pixel value.
pub const PIXEL_MAX: i64 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    None,
    /// Border pixels carry the all-unset bit pattern (−1 in every channel).
    NegOne,
    /// Conventional zero padding; only the signed oracle can evaluate it.
    ZeroOracleOnly,
}

impl Padding {
    /// Border width for a 3x3 kernel.
    pub fn border(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::NegOne | Padding::ZeroOracleOnly => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    FullyConnected,
    Maxpool2x2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub kind: LayerKind,
    pub in_channels: usize,
    /// Filters for a convolution, neurons (X) for a fully-connected layer.
    pub out_channels: usize,
    /// Y: synapses per neuron. Zero for pooling.
    pub synapses_per_neuron: usize,
    pub ifm_dim: usize,
    pub ofm_dim: usize,
    pub padding: Padding,
}

impl LayerGeometry {
    pub fn conv3x3(in_channels: usize, out_channels: usize, ifm_dim: usize, padding: Padding) -> Self {
        let ofm_dim = (ifm_dim + 2 * padding.border()).saturating_sub(2);
        Self {
            kind: LayerKind::Conv3x3,
            in_channels,
            out_channels,
            synapses_per_neuron: 9 * in_channels,
            ifm_dim,
            ofm_dim,
            padding,
        }
    }

    pub fn fully_connected(inputs: usize, neurons: usize) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            in_channels: inputs,
            out_channels: neurons,
            synapses_per_neuron: inputs,
            ifm_dim: 1,
            ofm_dim: 1,
            padding: Padding::None,
        }
    }

    pub fn maxpool2x2(channels: usize, ifm_dim: usize) -> Self {
        Self {
            kind: LayerKind::Maxpool2x2,
            in_channels: channels,
            out_channels: channels,
            synapses_per_neuron: 0,
            ifm_dim,
            ofm_dim: ifm_dim / 2,
            padding: Padding::None,
        }
    }

    /// True for layers executed on a matrix-vector unit.
    pub fn is_mvu(&self) -> bool {
        self.kind != LayerKind::Maxpool2x2
    }

    /// X: rows of the weight matrix.
    pub fn neurons(&self) -> usize {
        self.out_channels
    }

    /// Fᵐ: matrix-vector products per frame.
    pub fn output_pixels(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => self.ofm_dim * self.ofm_dim,
            _ => 1,
        }
    }

    /// Elements consumed per frame.
    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.in_channels,
            _ => self.ifm_dim * self.ifm_dim * self.in_channels,
        }
    }

    /// Elements produced per frame.
    pub fn output_len(&self) -> usize {
        self.ofm_dim * self.ofm_dim * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Geometry(m));
        match self.kind {
            LayerKind::Conv3x3 => {
                if self.synapses_per_neuron != 9 * self.in_channels {
                    return fail(format!(
                        "conv Y = {} but 9·in_channels = {}",
                        self.synapses_per_neuron,
                        9 * self.in_channels
                    ));
                }
                let padded = self.ifm_dim + 2 * self.padding.border();
                if padded < 3 || self.ofm_dim != padded - 2 {
                    return fail(format!(
                        "conv ifm {} with {:?} cannot produce ofm {}",
                        self.ifm_dim, self.padding, self.ofm_dim
                    ));
                }
            }
            LayerKind::FullyConnected => {
                if self.synapses_per_neuron != self.in_channels || self.ifm_dim != 1 || self.ofm_dim != 1 {
                    return fail("fully-connected layer needs Y = inputs and 1x1 maps".into());
                }
            }
            LayerKind::Maxpool2x2 => {
                if self.ifm_dim % 2 != 0 || self.ofm_dim * 2 != self.ifm_dim {
                    return fail(format!("2x2 pool needs an even input, got {}", self.ifm_dim));
                }
                if self.in_channels != self.out_channels {
                    return fail("pooling cannot change channel count".into());
                }
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("zero-width layer".into());
        }
        Ok(())
    }
}

/// How a layer's datapath treats its inputs and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoMode {
    BinaryInBinaryOut,
    /// Unsigned 8-bit pixels in, multiply-add datapath, binary out.
    FixedpointIn,
    /// Binary in, signed dot products out (no thresholding).
    RawOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// One neuron's compiled activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ThresholdEntry {
    /// Compared against the popcount (binary layers) or the signed
    /// accumulator (fixed-point layers).
    pub tau_plus: i32,
    pub direction: Direction,
    /// Fixed output overriding the comparison; `Some(true)` is +1.
    pub constant: Option<bool>,
}

impl ThresholdEntry {
    pub fn at_least(tau_plus: i32) -> Self {
        Self {
            tau_plus,
            direction: Direction::AtLeast,
            constant: None,
        }
    }

    pub fn at_most(tau_plus: i32) -> Self {
        Self {
            tau_plus,
            direction: Direction::AtMost,
            constant: None,
        }
    }

    pub fn constant(value: bool) -> Self {
        Self {
            tau_plus: 0,
            direction: Direction::AtLeast,
            constant: Some(value),
        }
    }

    /// Output bit for a popcount or accumulator value.
    #[inline]
    pub fn decide(&self, value: i64) -> bool {
        match (self.constant, self.direction) {
            (Some(c), _) => c,
            (None, Direction::AtLeast) => value >= self.tau_plus as i64,
            (None, Direction::AtMost) => value <= self.tau_plus as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ThresholdVector {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdVector {
    pub fn new(entries: Vec<ThresholdEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every non-constant τ lies in `[lo, hi]`.
    pub fn check_range(&self, lo: i64, hi: i64) -> std::result::Result<(), String> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.constant.is_none() && !(lo..=hi).contains(&(e.tau_plus as i64)) {
                return Err(format!(
                    "neuron {i}: tau_plus {} outside [{lo}, {hi}]",
                    e.tau_plus
                ));
            }
        }
        Ok(())
    }
}

/// Per-neuron bias and batch-normalization parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BatchNormParams {
    /// Unit scale, zero shift, zero bias: the activation is `sign(a)`.
    pub fn identity(neurons: usize) -> Self {
        Self {
            gamma: vec![1.0; neurons],
            beta: vec![0.0; neurons],
            mean: vec![0.0; neurons],
            stddev: vec![1.0; neurons],
            bias: vec![0.0; neurons],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        for (name, v) in [
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("stddev", &self.stddev),
            ("bias", &self.bias),
        ] {
            if v.len() != n {
                return Err(Error::BatchNorm(format!(
                    "{name} has {} entries, gamma has {n}",
                    v.len()
                )));
            }
        }
        if let Some(i) = self.stddev.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::BatchNorm(format!(
                "neuron {i}: stddev {} is not positive",
                self.stddev[i]
            )));
        }
        Ok(())
    }
}

/// A compiled matrix-vector layer ready for the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryLayer {
    pub geometry: LayerGeometry,
    /// X rows of Y bits, in interleaved (window position, channel) order.
    pub weights: Vec<BitVector>,
    /// `None` iff `io_mode` is [`IoMode::RawOut`].
    pub thresholds: Option<ThresholdVector>,
    pub io_mode: IoMode,
}

impl BinaryLayer {
    /// Inclusive range of legal τ values for this layer's datapath.
    pub fn tau_range(&self) -> (i64, i64) {
        let y = self.geometry.synapses_per_neuron as i64;
        match self.io_mode {
            IoMode::FixedpointIn => (-PIXEL_MAX * y, PIXEL_MAX * y + 1),
            _ => (0, y + 1),
        }
    }

    /// Structural invariants. Errors carry `index` as the layer id.
    pub fn validate(&self, index: usize) -> Result<()> {
        let inv = |message: String| Error::Invariant { layer: index, message };
        self.geometry.validate().map_err(|e| inv(e.to_string()))?;
        if !self.geometry.is_mvu() {
            return Err(inv("pooling layers carry no weights".into()));
        }
        let x = self.geometry.neurons();
        let y = self.geometry.synapses_per_neuron;
        if self.weights.len() != x {
            return Err(inv(format!("{} weight rows, expected {x}", self.weights.len())));
        }
        if let Some(r) = self.weights.iter().position(|w| w.len() != y) {
            return Err(inv(format!(
                "weight row {r} has {} bits, expected {y}",
                self.weights[r].len()
            )));
        }
        if self.weights.iter().any(|w| !w.tail_is_clear()) {
            return Err(inv("weight row has set bits past its length".into()));
        }
        match (&self.thresholds, self.io_mode) {
            (None, IoMode::RawOut) => {}
            (Some(_), IoMode::RawOut) => return Err(inv("raw_out layer carries thresholds".into())),
            (None, _) => return Err(inv("thresholds missing".into())),
            (Some(t), _) => {
                if t.len() != x {
                    return Err(inv(format!("{} thresholds for {x} neurons", t.len())));
                }
                let (lo, hi) = self.tau_range();
                t.check_range(lo, hi).map_err(inv)?;
            }
        }
        Ok(())
    }
}

/// Input image description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputSpec {
    pub dim: usize,
    pub channels: usize,
    pub bits: usize,
}

impl InputSpec {
    pub const CIFAR: InputSpec = InputSpec {
        dim: 32,
        channels: 3,
        bits: 8,
    };

    pub fn frame_bytes(&self) -> usize {
        self.dim * self.dim * self.channels * self.bits / 8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub sigma: Scale,
    pub padding: Padding,
    pub layers: Vec<LayerGeometry>,
    pub input: InputSpec,
    pub classes: usize,
}

impl Topology {
    /// `(topology index, geometry)` of every matrix-vector layer.
    pub fn mvu_layers(&self) -> impl Iterator<Item = (usize, &LayerGeometry)> {
        self.layers.iter().enumerate().filter(|(_, g)| g.is_mvu())
    }

    pub fn mvu_count(&self) -> usize {
        self.mvu_layers().count()
    }

    /// Each layer valid and adjacent layers dimension-compatible.
    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input.dim;
        let mut channels = self.input.channels;
        let mut flat = false;
        for (i, g) in self.layers.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Geometry(format!("layer {i}: {e}")))?;
            let ok = match g.kind {
                LayerKind::FullyConnected => {
                    let expect = if flat { channels } else { dim * dim * channels };
                    g.in_channels == expect
                }
                _ => !flat && g.ifm_dim == dim && g.in_channels == channels,
            };
            if !ok {
                return Err(Error::Geometry(format!(
                    "layer {i} does not accept the {dim}x{dim}x{channels} output of its predecessor"
                )));
            }
            if g.kind == LayerKind::FullyConnected {
                flat = true;
            }
            dim = g.ofm_dim;
            channels = g.out_channels;
        }
        match self.layers.last() {
            Some(last) if last.is_mvu() && last.out_channels == self.classes => Ok(()),
            _ => Err(Error::Geometry(format!(
                "network must end in a {}-neuron matrix layer",
                self.classes
            ))),
        }
    }

    /// IoMode of the n-th matrix-vector layer under the partial-binarization
    /// convention: fixed-point first layer, raw last layer.
    pub fn io_mode_of(&self, mvu_ordinal: usize) -> IoMode {
        if mvu_ordinal == 0 {
            IoMode::FixedpointIn
        } else if mvu_ordinal + 1 == self.mvu_count() {
            IoMode::RawOut
        } else {
            IoMode::BinaryInBinaryOut
        }
    }
}

/// A topology paired with its compiled matrix-vector layers (pools excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub topology: Topology,
    pub layers: Vec<BinaryLayer>,
}

impl Model {
    pub fn new(topology: Topology, layers: Vec<BinaryLayer>) -> Result<Self> {
        let m = Self { topology, layers };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let n = self.topology.mvu_count();
        if self.layers.len() != n {
            return Err(Error::Validation(format!(
                "topology has {n} matrix layers but {} compiled layers were given",
                self.layers.len()
            )));
        }
        for (ordinal, ((_, g), layer)) in self.topology.mvu_layers().zip(&self.layers).enumerate() {
            if &layer.geometry != g {
                return Err(Error::Invariant {
                    layer: ordinal,
                    message: "geometry differs from topology".into(),
                });
            }
            let mode = self.topology.io_mode_of(ordinal);
            if layer.io_mode != mode {
                return Err(Error::Invariant {
                    layer: ordinal,
                    message: format!("io mode {:?}, expected {mode:?}", layer.io_mode),
                });
            }
            layer.validate(ordinal)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_decisions() {
        assert!(ThresholdEntry::at_least(2).decide(2));
        assert!(!ThresholdEntry::at_least(2).decide(1));
        assert!(ThresholdEntry::at_most(2).decide(2));
        assert!(!ThresholdEntry::at_most(2).decide(3));
        assert!(ThresholdEntry::constant(true).decide(-100));
        assert!(!ThresholdEntry::constant(false).decide(100));
    }

    #[test]
    fn conv_geometry_dims() {
        let g = LayerGeometry::conv3x3(3, 8, 32, Padding::NegOne);
        assert_eq!((g.ofm_dim, g.synapses_per_neuron), (32, 27));
        let g = LayerGeometry::conv3x3(3, 8, 32, Padding::None);
        assert_eq!(g.ofm_dim, 30);
        g.validate().unwrap();
        let mut bad = g;
        bad.ofm_dim = 31;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn odd_pool_rejected() {
        assert!(LayerGeometry::maxpool2x2(4, 5).validate().is_err());
        LayerGeometry::maxpool2x2(4, 6).validate().unwrap();
    }

    #[test]
    fn batchnorm_rejects_nonpositive_stddev() {
        let mut bn = BatchNormParams::identity(3);
        bn.validate().unwrap();
        bn.stddev[1] = 0.0;
        assert!(bn.validate().is_err());
        bn.stddev[1] = f64::NAN;
        assert!(bn.validate().is_err());
    }
}
