//! Naive signed-arithmetic reference for every engine operation.
//!
//! Tensors here are channel-planar (`[ch][row][col]`) small integers, filters
//! are `[out][in][ky][kx]`, and batchnorm is evaluated in real arithmetic.
//! Nothing in this module touches bit packing, interleaving or thresholds,
//! so agreement with the engine is meaningful.

use crate::error::{Error, Result};
use crate::model::{BatchNormParams, LayerGeometry, LayerKind, Padding, Topology};

/// Documented tolerance: random test parameters must never put a
/// pre-activation this close to the batchnorm decision boundary.
pub const TIE_EPSILON: f64 = 1e-9;

/// Planar tensor of values in {−1, 0, +1}; zeros only arise from zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<i8>,
}

impl SignedTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                context: "signed tensor",
                expected: height * width * channels,
                actual: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn vector(values: Vec<i8>) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: values.len(),
            values,
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, row: usize, col: usize) -> i8 {
        self.values[(ch * self.height + row) * self.width + col]
    }
}

/// Row-major ±1 weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
}

/// 3x3 filters, `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedFilters {
    pub out_channels: usize,
    pub in_channels: usize,
    pub values: Vec<i8>,
}

impl SignedFilters {
    #[inline]
    pub fn at(&self, o: usize, c: usize, ky: usize, kx: usize) -> i8 {
        self.values[((o * self.in_channels + c) * 3 + ky) * 3 + kx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadValue {
    None,
    NegOne,
    Zero,
}

impl PadValue {
    fn border(self) -> usize {
        match self {
            PadValue::None => 0,
            _ => 1,
        }
    }
}

/// sign(γ(a − μ)/σ + β) with sign(0) = +1, plus |argument| for tie auditing.
pub fn batchnorm_sign(bn: &BatchNormParams, neuron: usize, a: f64) -> (i8, f64) {
    let v = bn.gamma[neuron] * (a - bn.mean[neuron]) / bn.stddev[neuron] + bn.beta[neuron];
    (if v >= 0.0 { 1 } else { -1 }, v.abs())
}

fn check_bn(bn: &BatchNormParams, neurons: usize) -> Result<()> {
    bn.validate()?;
    if bn.len() != neurons {
        return Err(Error::DimensionMismatch {
            context: "batchnorm neurons",
            expected: neurons,
            actual: bn.len(),
        });
    }
    Ok(())
}

/// W·x over the flattened planar input.
pub fn oracle_dense_accumulate(weights: &SignedMatrix, input: &SignedTensor) -> Result<Vec<i64>> {
    if input.values.len() != weights.cols {
        return Err(Error::DimensionMismatch {
            context: "dense input",
            expected: weights.cols,
            actual: input.values.len(),
        });
    }
    Ok(weights
        .values
        .chunks(weights.cols)
        .map(|row| {
            row.iter()
                .zip(&input.values)
                .map(|(&w, &x)| w as i64 * x as i64)
                .sum()
        })
        .collect())
}

fn activate(acc: &[i64], bn: &BatchNormParams, margin: &mut f64) -> Vec<i8> {
    acc.iter()
        .enumerate()
        .map(|(i, &a)| {
            let (s, m) = batchnorm_sign(bn, i, a as f64 + bn.bias[i]);
            *margin = margin.min(m);
            s
        })
        .collect()
}

/// Fully-connected layer with bias, batchnorm and sign activation.
pub fn oracle_dense(weights: &SignedMatrix, input: &SignedTensor, bn: &BatchNormParams) -> Result<SignedTensor> {
    check_bn(bn, weights.rows)?;
    let acc = oracle_dense_accumulate(weights, input)?;
    let mut margin = f64::INFINITY;
    Ok(SignedTensor::vector(activate(&acc, bn, &mut margin)))
}

/// Direct 3x3 convolution over `fetch(ch, row, col)`, with `pad` outside.
fn conv_accumulate(
    filters: &SignedFilters,
    height: usize,
    width: usize,
    border: usize,
    pad: i64,
    fetch: impl Fn(usize, usize, usize) -> i64,
) -> Result<(usize, usize, Vec<i64>)> {
    let (ph, pw) = (height + 2 * border, width + 2 * border);
    if ph < 3 || pw < 3 {
        return Err(Error::Geometry(format!("{height}x{width} input too small for 3x3")));
    }
    let (oh, ow) = (ph - 2, pw - 2);
    let mut out = vec![0i64; filters.out_channels * oh * ow];
    for o in 0..filters.out_channels {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0i64;
                for ch in 0..filters.in_channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            // coordinates in the unpadded image
                            let y = (r + ky) as isize - border as isize;
                            let x = (c + kx) as isize - border as isize;
                            let v = if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                                pad
                            } else {
                                fetch(ch, y as usize, x as usize)
                            };
                            acc += filters.at(o, ch, ky, kx) as i64 * v;
                        }
                    }
                }
                out[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    Ok((oh, ow, out))
}

/// Pre-activations of a 3x3 convolution (planar `[out][row][col]`).
pub fn oracle_conv_accumulate(
    filters: &SignedFilters,
    input: &SignedTensor,
    pad: PadValue,
) -> Result<(usize, usize, Vec<i64>)> {
    if input.channels != filters.in_channels {
        return Err(Error::DimensionMismatch {
            context: "conv input channels",
            expected: filters.in_channels,
            actual: input.channels,
        });
    }
    let pad_value = match pad {
        PadValue::NegOne => -1,
        _ => 0,
    };
    conv_accumulate(filters, input.height, input.width, pad.border(), pad_value, |ch, r, c| {
        input.at(ch, r, c) as i64
    })
}

/// 3x3 convolution, then bias + batchnorm + sign.
pub fn oracle_conv(
    filters: &SignedFilters,
    input: &SignedTensor,
    pad: PadValue,
    bn: &BatchNormParams,
) -> Result<SignedTensor> {
    check_bn(bn, filters.out_channels)?;
    let (oh, ow, acc) = oracle_conv_accumulate(filters, input, pad)?;
    let n = oh * ow;
    let mut margin = f64::INFINITY;
    let values = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let o = i / n;
            let (s, m) = batchnorm_sign(bn, o, a as f64 + bn.bias[o]);
            margin = margin.min(m);
            s
        })
        .collect();
    SignedTensor::new(oh, ow, filters.out_channels, values)
}

/// 2x2 stride-2 max pooling per channel.
pub fn oracle_maxpool(input: &SignedTensor) -> Result<SignedTensor> {
    if input.height % 2 != 0 || input.width % 2 != 0 {
        return Err(Error::Geometry(format!(
            "max pooling needs even dims, got {}x{}",
            input.height, input.width
        )));
    }
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut values = Vec::with_capacity(oh * ow * input.channels);
    for ch in 0..input.channels {
        for r in 0..oh {
            for c in 0..ow {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| input.at(ch, 2 * r + dy, 2 * c + dx))
                    .max()
                    .unwrap();
                values.push(m);
            }
        }
    }
    SignedTensor::new(oh, ow, input.channels, values)
}

/// Unpacked reference layer: ±1 weights in framework (planar) order and the
/// real-valued parameters the compiled thresholds were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLayer {
    pub geometry: LayerGeometry,
    /// Conv: `[out][in][ky][kx]`. FC: `[out][input]`, the input flattened
    /// channel-planar from the previous layer's map.
    pub weights: Vec<i8>,
    /// `None` for the raw-score head.
    pub batchnorm: Option<BatchNormParams>,
}

impl ReferenceLayer {
    pub fn filters(&self) -> SignedFilters {
        SignedFilters {
            out_channels: self.geometry.out_channels,
            in_channels: self.geometry.in_channels,
            values: self.weights.clone(),
        }
    }

    pub fn matrix(&self) -> SignedMatrix {
        SignedMatrix {
            rows: self.geometry.out_channels,
            cols: self.geometry.synapses_per_neuron,
            values: self.weights.clone(),
        }
    }
}

/// Reference counterpart of a compiled model (matrix layers only).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub topology: Topology,
    pub layers: Vec<ReferenceLayer>,
}

/// Per-layer outputs of a reference forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    /// One planar ±1 tensor per topology layer except the raw head.
    pub activations: Vec<SignedTensor>,
    pub scores: Vec<i64>,
    /// Smallest |batchnorm argument| seen; ties need this above [`TIE_EPSILON`].
    pub min_margin: f64,
}

fn pixel_plane(image: &[u8], dim: usize, channels: usize) -> impl Fn(usize, usize, usize) -> i64 + '_ {
    // input bytes are channel-interleaved per pixel
    move |ch, r, c| image[(r * dim + c) * channels + ch] as i64
}

/// Full reference forward pass; the head returns raw integer scores.
pub fn oracle_network_traced(model: &ReferenceModel, image: &[u8]) -> Result<OracleTrace> {
    let topo = &model.topology;
    let input = topo.input;
    if image.len() != input.frame_bytes() {
        return Err(Error::DimensionMismatch {
            context: "image bytes",
            expected: input.frame_bytes(),
            actual: image.len(),
        });
    }
    if model.layers.len() != topo.mvu_count() {
        return Err(Error::Validation("reference layer count differs from topology".into()));
    }
    let mut margin = f64::INFINITY;
    let mut activations = Vec::new();
    let mut current: Option<SignedTensor> = None;
    let mut refs = model.layers.iter();
    let mut scores = Vec::new();
    let last = topo.layers.len() - 1;
    for (i, g) in topo.layers.iter().enumerate() {
        let out = match g.kind {
            LayerKind::Maxpool2x2 => {
                let x = current.as_ref().ok_or_else(|| Error::Geometry("pool before input".into()))?;
                oracle_maxpool(x)?
            }
            LayerKind::Conv3x3 => {
                let layer = refs.next().unwrap();
                let bn = layer.batchnorm.as_ref().ok_or_else(|| Error::Validation("conv without batchnorm".into()))?;
                check_bn(bn, g.out_channels)?;
                let filters = layer.filters();
                let (oh, ow, acc) = match &current {
                    None => {
                        // fixed-point first layer; border pixels are value 0
                        let border = g.padding.border();
                        conv_accumulate(&filters, input.dim, input.dim, border, 0, pixel_plane(image, input.dim, input.channels))?
                    }
                    Some(x) => {
                        let pad = match g.padding {
                            Padding::None => PadValue::None,
                            Padding::NegOne => PadValue::NegOne,
                            Padding::ZeroOracleOnly => PadValue::Zero,
                        };
                        oracle_conv_accumulate(&filters, x, pad)?
                    }
                };
                let n = oh * ow;
                let values = acc
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| {
                        let o = j / n;
                        let (s, m) = batchnorm_sign(bn, o, a as f64 + bn.bias[o]);
                        margin = margin.min(m);
                        s
                    })
                    .collect();
                SignedTensor::new(oh, ow, g.out_channels, values)?
            }
            LayerKind::FullyConnected => {
                let layer = refs.next().unwrap();
                let flat = match &current {
                    Some(x) => SignedTensor::vector(x.values.clone()),
                    None => return Err(Error::Validation("fixed-point dense first layer is not supported by the oracle".into())),
                };
                let acc = oracle_dense_accumulate(&layer.matrix(), &flat)?;
                if i == last {
                    scores = acc;
                    break;
                }
                let bn = layer.batchnorm.as_ref().ok_or_else(|| Error::Validation("hidden dense layer without batchnorm".into()))?;
                check_bn(bn, g.out_channels)?;
                SignedTensor::vector(activate(&acc, bn, &mut margin))
            }
        };
        activations.push(out.clone());
        current = Some(out);
    }
    Ok(OracleTrace {
        activations,
        scores,
        min_margin: margin,
    })
}

/// Class scores of a reference forward pass.
pub fn oracle_network(model: &ReferenceModel, image: &[u8]) -> Result<Vec<i64>> {
    Ok(oracle_network_traced(model, image)?.scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_bn(n: usize) -> BatchNormParams {
        BatchNormParams::identity(n)
    }

    #[test]
    fn dense_positive_sum() {
        let w = SignedMatrix { rows: 1, cols: 2, values: vec![1, 1] };
        let y = oracle_dense(&w, &SignedTensor::vector(vec![1, 1]), &identity_bn(1)).unwrap();
        assert_eq!(y.values, vec![1]);
    }

    #[test]
    fn dense_tie_is_positive() {
        let w = SignedMatrix { rows: 1, cols: 2, values: vec![1, -1] };
        let y = oracle_dense(&w, &SignedTensor::vector(vec![1, 1]), &identity_bn(1)).unwrap();
        assert_eq!(y.values, vec![1]);
    }

    #[test]
    fn negative_gamma_flips() {
        let w = SignedMatrix { rows: 1, cols: 3, values: vec![1, 1, -1] };
        let mut bn = identity_bn(1);
        for x in [vec![1, 1, 1], vec![-1, -1, 1], vec![1, -1, -1]] {
            let x = SignedTensor::vector(x);
            bn.gamma[0] = 1.0;
            let pos = oracle_dense(&w, &x, &bn).unwrap().values[0];
            bn.gamma[0] = -1.0;
            let neg = oracle_dense(&w, &x, &bn).unwrap().values[0];
            // a is odd here so never equals μ − βσ/γ = 0
            assert_eq!(pos, -neg);
        }
    }

    #[test]
    fn dense_dimension_mismatch() {
        let w = SignedMatrix { rows: 1, cols: 2, values: vec![1, 1] };
        assert!(oracle_dense(&w, &SignedTensor::vector(vec![1]), &identity_bn(1)).is_err());
    }

    fn ones_filter(c: usize) -> SignedFilters {
        SignedFilters { out_channels: 1, in_channels: c, values: vec![1; 9 * c] }
    }

    #[test]
    fn corner_preactivation_by_pad_mode() {
        let x = SignedTensor::new(4, 4, 1, vec![1; 16]).unwrap();
        let (_, _, neg) = oracle_conv_accumulate(&ones_filter(1), &x, PadValue::NegOne).unwrap();
        assert_eq!(neg[0], 4 - 5);
        let (_, _, zero) = oracle_conv_accumulate(&ones_filter(1), &x, PadValue::Zero).unwrap();
        assert_eq!(zero[0], 4);
        // interior pixel unaffected by pad value
        assert_eq!(neg[5], 9);
        assert_eq!(zero[5], 9);
    }

    #[test]
    fn unpadded_3x3_single_output() {
        let vals: Vec<i8> = (0..9).map(|i| if i % 3 == 0 { -1 } else { 1 }).collect();
        let w: Vec<i8> = (0..9).map(|i| if i < 4 { 1 } else { -1 }).collect();
        let x = SignedTensor::new(3, 3, 1, vals.clone()).unwrap();
        let f = SignedFilters { out_channels: 1, in_channels: 1, values: w.clone() };
        let (oh, ow, acc) = oracle_conv_accumulate(&f, &x, PadValue::None).unwrap();
        assert_eq!((oh, ow), (1, 1));
        let expect: i64 = vals.iter().zip(&w).map(|(&a, &b)| (a * b) as i64).sum();
        assert_eq!(acc, vec![expect]);
    }

    #[test]
    fn maxpool_windows() {
        let x = SignedTensor::new(2, 2, 1, vec![-1, -1, -1, 1]).unwrap();
        assert_eq!(oracle_maxpool(&x).unwrap().values, vec![1]);
        let x = SignedTensor::new(2, 2, 1, vec![-1; 4]).unwrap();
        assert_eq!(oracle_maxpool(&x).unwrap().values, vec![-1]);
        let x = SignedTensor::new(4, 4, 3, vec![1; 48]).unwrap();
        let y = oracle_maxpool(&x).unwrap();
        assert_eq!((y.height, y.width, y.channels), (2, 2, 3));
        let odd = SignedTensor::new(3, 3, 1, vec![1; 9]).unwrap();
        assert!(oracle_maxpool(&odd).is_err());
    }

    #[test]
    fn neg_one_pad_equals_explicit_border() {
        // 3x3 two-channel input, explicitly bordered to 5x5 with −1
        let vals: Vec<i8> = (0..18).map(|i| if (i * 7) % 5 < 2 { 1 } else { -1 }).collect();
        let x = SignedTensor::new(3, 3, 2, vals).unwrap();
        let mut big = vec![-1i8; 2 * 25];
        for ch in 0..2 {
            for r in 0..3 {
                for c in 0..3 {
                    big[(ch * 5 + r + 1) * 5 + c + 1] = x.at(ch, r, c);
                }
            }
        }
        let xb = SignedTensor::new(5, 5, 2, big).unwrap();
        let f = SignedFilters {
            out_channels: 2,
            in_channels: 2,
            values: (0..36).map(|i| if (i * 3) % 4 == 0 { 1 } else { -1 }).collect(),
        };
        let a = oracle_conv_accumulate(&f, &x, PadValue::NegOne).unwrap();
        let b = oracle_conv_accumulate(&f, &xb, PadValue::None).unwrap();
        assert_eq!(a, b);
    }
}
