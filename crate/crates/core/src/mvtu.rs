//! Matrix–vector–threshold unit.
//!
//! Binary dot products are XNOR + popcount: for rows `a`, `b` of `y` bits
//! with `c` agreeing positions the ±1 dot product is `2c − y`. Bias,
//! batchnorm and the sign activation collapse into one integer comparison
//! on `c` (or, for the fixed-point first layer, on the signed accumulator).

use crate::error::{Error, Result};
use crate::model::{BatchNormParams, BinaryLayer, BitVector, IoMode, ThresholdEntry, ThresholdVector, PIXEL_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopcountResult {
    pub popcount: u32,
    pub y: u32,
}

impl PopcountResult {
    /// Signed ±1 dot product.
    #[inline]
    pub fn dot(&self) -> i64 {
        2 * self.popcount as i64 - self.y as i64
    }
}

/// Width of the PE accumulator / adder / threshold memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorSpec {
    pub t_bits: u32,
}

fn ceil_log2(v: u64) -> u32 {
    if v <= 1 {
        0
    } else {
        64 - (v - 1).leading_zeros()
    }
}

impl AccumulatorSpec {
    /// `1 + ceil(log2 Y)` bits, enough for popcounts 0..=Y.
    pub fn for_synapses(y: usize) -> Self {
        Self {
            t_bits: 1 + ceil_log2(y as u64),
        }
    }

    /// Signed accumulator of a multiply-add layer on 8-bit pixels.
    pub fn for_fixedpoint(y: usize) -> Self {
        Self {
            t_bits: 1 + ceil_log2(PIXEL_MAX as u64 * y as u64),
        }
    }

    pub fn for_layer(layer_mode: IoMode, y: usize) -> Self {
        match layer_mode {
            IoMode::FixedpointIn => Self::for_fixedpoint(y),
            _ => Self::for_synapses(y),
        }
    }

    pub fn fits(&self, value: u64) -> bool {
        self.t_bits >= 64 || value < (1u64 << self.t_bits)
    }
}

#[inline]
fn xnor_count(a: &[u64], b: &[u64], y: usize) -> u32 {
    let full = y / 64;
    let mut c = 0u32;
    for i in 0..full {
        c += (!(a[i] ^ b[i])).count_ones();
    }
    let rem = y % 64;
    if rem != 0 {
        let mask = (1u64 << rem) - 1;
        c += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    c
}

/// XNOR-popcount over the first `y` bits; bits past `y` are masked off.
pub fn xnor_popcount(a: &BitVector, b: &BitVector, y: usize) -> Result<PopcountResult> {
    for v in [a, b] {
        if v.len() != y {
            return Err(Error::DimensionMismatch {
                context: "xnor_popcount row length",
                expected: y,
                actual: v.len(),
            });
        }
    }
    Ok(PopcountResult {
        popcount: xnor_count(a.words(), b.words(), y),
        y: y as u32,
    })
}

/// The real-valued activation the thresholds must reproduce: +1 iff
/// γ(a − μ)/σ + β ≥ 0.
#[inline]
fn bn_positive(bn: &BatchNormParams, i: usize, a: f64) -> bool {
    bn.gamma[i] * (a - bn.mean[i]) / bn.stddev[i] + bn.beta[i] >= 0.0
}

/// Compiles one neuron over the integer domain `lo..=hi` of the compared
/// quantity, where `preact(v)` maps it to the pre-activation `a` and
/// `boundary` is the real value of v at which γ(a − μ)/σ + β = 0.
fn compile_neuron(
    bn: &BatchNormParams,
    i: usize,
    lo: i64,
    hi: i64,
    boundary: f64,
    preact: impl Fn(i64) -> f64,
) -> ThresholdEntry {
    let gamma = bn.gamma[i];
    if gamma == 0.0 {
        return ThresholdEntry::constant(bn.beta[i] >= 0.0);
    }
    let pred = |v: i64| bn_positive(bn, i, preact(v));
    // keep the real boundary in a range where i64 conversion is exact
    let b = boundary.clamp((lo - 1) as f64, (hi + 1) as f64);
    if gamma > 0.0 {
        let mut t = b.ceil() as i64;
        while t <= hi && !pred(t) {
            t += 1;
        }
        while t > lo && pred(t - 1) {
            t -= 1;
        }
        ThresholdEntry::at_least(t.clamp(lo, hi + 1) as i32)
    } else {
        let mut t = b.floor() as i64;
        while t >= lo && !pred(t) {
            t -= 1;
        }
        while t < hi && pred(t + 1) {
            t += 1;
        }
        if t < lo {
            ThresholdEntry::constant(false)
        } else {
            ThresholdEntry::at_most(t.min(hi + 1) as i32)
        }
    }
}

/// Popcount thresholds for a binary layer of `y` synapses.
///
/// With `a = 2c − y + bias` and `s = γ/σ`: `s > 0` gives `c ≥ ⌈(μ − β/s − bias + y)/2⌉`,
/// `s < 0` gives `c ≤ ⌊…⌋`, `s = 0` gives the constant `sign(β)`.
pub fn compile_thresholds(bn: &BatchNormParams, y: usize) -> Result<ThresholdVector> {
    bn.validate()?;
    let yi = y as i64;
    let entries = (0..bn.len())
        .map(|i| {
            let s = bn.gamma[i] / bn.stddev[i];
            let a_star = bn.mean[i] - bn.beta[i] / s;
            let boundary = (a_star - bn.bias[i] + y as f64) / 2.0;
            compile_neuron(bn, i, 0, yi, boundary, |c| (2 * c - yi) as f64 + bn.bias[i])
        })
        .collect();
    Ok(ThresholdVector::new(entries))
}

/// Accumulator thresholds for a multiply-add layer on unsigned 8-bit inputs.
pub fn compile_fixedpoint_thresholds(bn: &BatchNormParams, y: usize) -> Result<ThresholdVector> {
    bn.validate()?;
    let span = PIXEL_MAX * y as i64;
    let entries = (0..bn.len())
        .map(|i| {
            let s = bn.gamma[i] / bn.stddev[i];
            let boundary = bn.mean[i] - bn.beta[i] / s - bn.bias[i];
            compile_neuron(bn, i, -span, span, boundary, |v| v as f64 + bn.bias[i])
        })
        .collect();
    Ok(ThresholdVector::new(entries))
}

fn expect_mode(layer: &BinaryLayer, expected: IoMode) -> Result<()> {
    if layer.io_mode != expected {
        return Err(Error::ModeMismatch {
            expected,
            actual: layer.io_mode,
        });
    }
    Ok(())
}

fn check_input(layer: &BinaryLayer, len: usize) -> Result<()> {
    let y = layer.geometry.synapses_per_neuron;
    if len != y {
        return Err(Error::DimensionMismatch {
            context: "mvtu input length",
            expected: y,
            actual: len,
        });
    }
    Ok(())
}

fn thresholds(layer: &BinaryLayer) -> Result<&ThresholdVector> {
    let t = layer
        .thresholds
        .as_ref()
        .ok_or_else(|| Error::Validation("thresholding layer has no thresholds".into()))?;
    if t.len() != layer.weights.len() {
        return Err(Error::DimensionMismatch {
            context: "threshold count",
            expected: layer.weights.len(),
            actual: t.len(),
        });
    }
    Ok(t)
}

/// One binary matrix-vector product followed by thresholding.
pub fn mvtu_execute(layer: &BinaryLayer, input: &BitVector) -> Result<BitVector> {
    Ok(mvtu_execute_multi(layer, std::slice::from_ref(input))?.pop().unwrap())
}

/// Matrix times M vectors: each weight row is fetched once and broadcast to
/// every lane. Lane results equal independent [`mvtu_execute`] calls.
pub fn mvtu_execute_multi(layer: &BinaryLayer, inputs: &[BitVector]) -> Result<Vec<BitVector>> {
    expect_mode(layer, IoMode::BinaryInBinaryOut)?;
    if inputs.is_empty() {
        return Err(Error::Validation("multi-vector execution needs at least one lane".into()));
    }
    for v in inputs {
        check_input(layer, v.len())?;
    }
    let th = thresholds(layer)?;
    let y = layer.geometry.synapses_per_neuron;
    let mut outputs = vec![BitVector::zeros(layer.weights.len()); inputs.len()];
    for (row, (w, entry)) in layer.weights.iter().zip(&th.entries).enumerate() {
        let w = w.words();
        for (lane, x) in inputs.iter().enumerate() {
            let c = xnor_count(w, x.words(), y);
            if entry.decide(c as i64) {
                outputs[lane].set(row, true);
            }
        }
    }
    Ok(outputs)
}

/// Signed accumulators Σ ±pixel of a multiply-add layer.
pub fn fixedpoint_accumulate(layer: &BinaryLayer, pixels: &[u8]) -> Result<Vec<i64>> {
    check_input(layer, pixels.len())?;
    Ok(layer
        .weights
        .iter()
        .map(|w| {
            pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| if w.get(i) { p as i64 } else { -(p as i64) })
                .sum()
        })
        .collect())
}

/// Partial-binarization input layer: add/subtract pixels by weight sign,
/// then threshold the signed accumulator.
pub fn mvtu_fixedpoint(layer: &BinaryLayer, pixels: &[u8]) -> Result<BitVector> {
    expect_mode(layer, IoMode::FixedpointIn)?;
    let th = thresholds(layer)?;
    let acc = fixedpoint_accumulate(layer, pixels)?;
    Ok(BitVector::from_bools(
        acc.iter().zip(&th.entries).map(|(&a, e)| e.decide(a)),
    ))
}

/// Partial-binarization output layer: dot products `2c − Y`, no thresholds.
pub fn mvtu_raw(layer: &BinaryLayer, input: &BitVector) -> Result<Vec<i32>> {
    expect_mode(layer, IoMode::RawOut)?;
    check_input(layer, input.len())?;
    let y = layer.geometry.synapses_per_neuron;
    Ok(layer
        .weights
        .iter()
        .map(|w| 2 * xnor_count(w.words(), input.words(), y) as i32 - y as i32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, LayerGeometry};

    fn bits(s: &str) -> BitVector {
        BitVector::from_bools(s.chars().map(|c| c == '1'))
    }

    fn bn1(gamma: f64, stddev: f64, mean: f64, beta: f64, bias: f64) -> BatchNormParams {
        BatchNormParams {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            stddev: vec![stddev],
            bias: vec![bias],
        }
    }

    fn dense(rows: Vec<BitVector>, th: Option<ThresholdVector>, mode: IoMode) -> BinaryLayer {
        let y = rows[0].len();
        BinaryLayer {
            geometry: LayerGeometry::fully_connected(y, rows.len()),
            weights: rows,
            thresholds: th,
            io_mode: mode,
        }
    }

    #[test]
    fn identical_rows_full_count() {
        for y in [1, 7, 64, 65, 200] {
            let a = BitVector::from_bools((0..y).map(|i| i % 3 == 0));
            let r = xnor_popcount(&a, &a, y).unwrap();
            assert_eq!((r.popcount as usize, r.dot()), (y, y as i64));
        }
    }

    #[test]
    fn hand_computed_xnor() {
        let r = xnor_popcount(&bits("1010"), &bits("1100"), 4).unwrap();
        assert_eq!(r.popcount, 2);
        assert_eq!(r.dot(), 0);
    }

    #[test]
    fn length_mismatch() {
        assert!(xnor_popcount(&bits("101"), &bits("1100"), 4).is_err());
    }

    #[test]
    fn garbage_tail_is_masked() {
        let a = bits("1011001");
        let b = bits("0011101");
        let clean = xnor_popcount(&a, &b, 7).unwrap();
        let (mut ga, mut gb) = (a.clone(), b.clone());
        ga.words_mut()[0] |= 0xdead_beef << 7;
        gb.words_mut()[0] |= 0x1234_5678 << 9;
        assert!(!ga.tail_is_clear());
        assert_eq!(xnor_popcount(&ga, &gb, 7).unwrap(), clean);
        // an unmasked count would see agreeing zero tails as matches
        let unmasked = (!(a.words()[0] ^ b.words()[0])).count_ones();
        assert_ne!(unmasked, clean.popcount);
    }

    #[test]
    fn accumulator_width() {
        assert_eq!(AccumulatorSpec::for_synapses(4).t_bits, 3);
        assert_eq!(AccumulatorSpec::for_synapses(27).t_bits, 6);
        assert_eq!(AccumulatorSpec::for_synapses(1024).t_bits, 11);
        for y in 1..2000usize {
            let spec = AccumulatorSpec::for_synapses(y);
            assert!(spec.fits(y as u64), "y={y}");
        }
    }

    #[test]
    fn sign_of_dot_threshold() {
        let t = compile_thresholds(&bn1(1.0, 1.0, 0.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0], ThresholdEntry::at_least(2));
    }

    #[test]
    fn scaled_mean_threshold() {
        let t = compile_thresholds(&bn1(2.0, 1.0, 1.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0], ThresholdEntry::at_least(3));
    }

    #[test]
    fn negative_gamma_threshold() {
        let bn = bn1(-1.0, 1.0, 0.0, 0.0, 0.0);
        let t = compile_thresholds(&bn, 4).unwrap();
        assert_eq!(t.entries[0].direction, Direction::AtMost);
        assert_eq!(t.entries[0].tau_plus, 2);
        for c in 0..=4i64 {
            let a = (2 * c - 4) as f64;
            assert_eq!(t.entries[0].decide(c), -a >= 0.0);
        }
    }

    #[test]
    fn zero_gamma_is_constant() {
        let t = compile_thresholds(&bn1(0.0, 1.0, 3.0, -0.5, 0.0), 4).unwrap();
        assert_eq!(t.entries[0].constant, Some(false));
        let t = compile_thresholds(&bn1(0.0, 1.0, 3.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0].constant, Some(true));
    }

    #[test]
    fn degenerate_parameters_clamp() {
        // boundary far above y: never +1
        let t = compile_thresholds(&bn1(1.0, 1.0, 100.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0], ThresholdEntry::at_least(5));
        // far below 0: always +1
        let t = compile_thresholds(&bn1(1.0, 1.0, -100.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0], ThresholdEntry::at_least(0));
        // negative gamma, boundary below 0: never +1
        let t = compile_thresholds(&bn1(-1.0, 1.0, -100.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(t.entries[0].constant, Some(false));
        // negative gamma, boundary above y: always +1
        let t = compile_thresholds(&bn1(-1.0, 1.0, 100.0, 0.0, 0.0), 4).unwrap();
        assert!((0..=4).all(|c| t.entries[0].decide(c)));
        assert!(t.check_range(0, 5).is_ok());
    }

    #[test]
    fn rejects_nonpositive_stddev() {
        assert!(compile_thresholds(&bn1(1.0, 0.0, 0.0, 0.0, 0.0), 4).is_err());
        assert!(compile_thresholds(&bn1(1.0, -2.0, 0.0, 0.0, 0.0), 4).is_err());
    }

    #[test]
    fn tiny_execute() {
        let th = ThresholdVector::new(vec![ThresholdEntry::at_least(2); 2]);
        let layer = dense(vec![bits("11"), bits("00")], Some(th), IoMode::BinaryInBinaryOut);
        let out = mvtu_execute(&layer, &bits("11")).unwrap();
        assert_eq!(out, bits("10"));
    }

    #[test]
    fn constant_thresholds_ignore_input() {
        let th = ThresholdVector::new(vec![ThresholdEntry::constant(true); 3]);
        let layer = dense(vec![bits("0110"), bits("1111"), bits("0000")], Some(th), IoMode::BinaryInBinaryOut);
        for x in ["0000", "1010", "1111"] {
            assert_eq!(mvtu_execute(&layer, &bits(x)).unwrap(), BitVector::ones(3));
        }
    }

    #[test]
    fn multi_lane_matches_single() {
        let th = ThresholdVector::new(vec![ThresholdEntry::at_least(3), ThresholdEntry::at_most(1)]);
        let layer = dense(vec![bits("10110"), bits("01100")], Some(th), IoMode::BinaryInBinaryOut);
        let xs = vec![bits("10110"), bits("00000"), bits("10110"), bits("11001")];
        let multi = mvtu_execute_multi(&layer, &xs).unwrap();
        for (x, y) in xs.iter().zip(&multi) {
            assert_eq!(&mvtu_execute(&layer, x).unwrap(), y);
        }
        assert_eq!(multi[0], multi[2]);
        assert!(mvtu_execute_multi(&layer, &[]).is_err());
    }

    #[test]
    fn mode_checks() {
        let th = ThresholdVector::new(vec![ThresholdEntry::at_least(1)]);
        let layer = dense(vec![bits("11")], Some(th), IoMode::BinaryInBinaryOut);
        assert!(matches!(mvtu_raw(&layer, &bits("11")), Err(Error::ModeMismatch { .. })));
        assert!(matches!(mvtu_fixedpoint(&layer, &[1, 2]), Err(Error::ModeMismatch { .. })));
        assert!(mvtu_execute(&layer, &bits("111")).is_err());
    }

    #[test]
    fn fixedpoint_sums() {
        let th = ThresholdVector::new(vec![ThresholdEntry::at_least(0)]);
        let ones = dense(vec![BitVector::ones(5)], Some(th.clone()), IoMode::FixedpointIn);
        assert_eq!(fixedpoint_accumulate(&ones, &[1; 5]).unwrap(), vec![5]);
        let mixed = dense(vec![bits("10")], Some(th), IoMode::FixedpointIn);
        assert_eq!(fixedpoint_accumulate(&mixed, &[2, 3]).unwrap(), vec![-1]);
        assert_eq!(mvtu_fixedpoint(&mixed, &[2, 3]).unwrap(), bits("0"));
    }

    #[test]
    fn fixedpoint_threshold_matches_batchnorm() {
        let bn = bn1(-0.7, 3.0, 12.5, 0.4, -3.0);
        let t = compile_fixedpoint_thresholds(&bn, 2).unwrap();
        for acc in -510..=510i64 {
            let v = -0.7 * ((acc as f64 - 3.0) - 12.5) / 3.0 + 0.4;
            assert_eq!(t.entries[0].decide(acc), v >= 0.0, "acc={acc}");
        }
    }

    #[test]
    fn raw_scores() {
        let rows = vec![bits("1101"), bits("0110")];
        let layer = dense(rows.clone(), None, IoMode::RawOut);
        assert_eq!(mvtu_raw(&layer, &rows[0]).unwrap()[0], 4);
        assert_eq!(mvtu_raw(&layer, &rows[1].not()).unwrap()[1], -4);
    }
}
