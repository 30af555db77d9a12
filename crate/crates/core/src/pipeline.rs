//! Layer-at-a-time network executor, op counting and the oracle harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    compile_reference, generate_reference_model, BinaryLayer, BitTensor, BitVector, Direction, IoMode, LayerKind,
    Model, ThresholdEntry, Topology,
};
use crate::mvtu::{mvtu_execute_multi, mvtu_fixedpoint, mvtu_raw};
use crate::oracle::{oracle_network_traced, ReferenceModel, TIE_EPSILON};
use crate::pool::or_pool;
use crate::swu::{build_window_plan, generate_image_matrix, pack_bytes, stream_pad_write, stream_pad_write_pixels, unpack_bytes};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub scores: Vec<i32>,
    pub label: usize,
}

impl ClassificationResult {
    /// Argmax with ties going to the lowest class index.
    pub fn from_scores(scores: Vec<i32>) -> Self {
        let mut label = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[label] {
                label = i;
            }
        }
        Self { scores, label }
    }
}

/// Engine outputs of every topology layer except the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineTrace {
    pub activations: Vec<BitTensor>,
    pub result: ClassificationResult,
}

fn conv_fixedpoint(layer: &BinaryLayer, image: &[u8]) -> Result<BitTensor> {
    let g = &layer.geometry;
    let plan = build_window_plan(g)?;
    let buffer = stream_pad_write_pixels(&pack_bytes(image), g, 8)?;
    let mut out = BitVector::with_capacity(g.output_len());
    for window in generate_image_matrix(&buffer, &plan)? {
        out.extend_from(&mvtu_fixedpoint(layer, &unpack_bytes(&window))?);
    }
    BitTensor::from_bits(g.ofm_dim, g.ofm_dim, g.out_channels, out)
}

fn conv_binary(layer: &BinaryLayer, input: &BitTensor) -> Result<BitTensor> {
    let g = &layer.geometry;
    let plan = build_window_plan(g)?;
    let buffer = stream_pad_write(input.bits(), g)?;
    let columns = generate_image_matrix(&buffer, &plan)?;
    let mut out = BitVector::with_capacity(g.output_len());
    for pixel in mvtu_execute_multi(layer, &columns)? {
        out.extend_from(&pixel);
    }
    BitTensor::from_bits(g.ofm_dim, g.ofm_dim, g.out_channels, out)
}

fn check_shape(index: usize, input: &BitTensor, expected_len: usize) -> Result<()> {
    if input.bit_len() != expected_len {
        return Err(Error::Geometry(format!(
            "layer {index} expects {expected_len} input elements, previous layer produced {}",
            input.bit_len()
        )));
    }
    Ok(())
}

/// Runs one frame and records every intermediate feature map.
pub fn run_network_traced(model: &Model, image: &[u8]) -> Result<EngineTrace> {
    let topo = &model.topology;
    if image.len() != topo.input.frame_bytes() {
        return Err(Error::DimensionMismatch {
            context: "image bytes",
            expected: topo.input.frame_bytes(),
            actual: image.len(),
        });
    }
    let mut layers = model.layers.iter();
    let mut activations: Vec<BitTensor> = Vec::with_capacity(topo.layers.len());
    for (i, g) in topo.layers.iter().enumerate() {
        let prev = activations.last();
        let out = match g.kind {
            LayerKind::Maxpool2x2 => {
                let x = prev.ok_or_else(|| Error::Geometry("network starts with a pool".into()))?;
                check_shape(i, x, g.input_len())?;
                or_pool(x)?
            }
            LayerKind::Conv3x3 => {
                let layer = layers.next().ok_or_else(|| Error::Validation("missing compiled layer".into()))?;
                match (layer.io_mode, prev) {
                    (IoMode::FixedpointIn, None) => conv_fixedpoint(layer, image)?,
                    (IoMode::BinaryInBinaryOut, Some(x)) => {
                        check_shape(i, x, g.input_len())?;
                        conv_binary(layer, x)?
                    }
                    (mode, _) => return Err(Error::Validation(format!("conv layer {i} cannot run in {mode:?}"))),
                }
            }
            LayerKind::FullyConnected => {
                let layer = layers.next().ok_or_else(|| Error::Validation("missing compiled layer".into()))?;
                let x = prev.ok_or_else(|| Error::Validation("dense input layer is not supported".into()))?;
                check_shape(i, x, g.input_len())?;
                match layer.io_mode {
                    IoMode::RawOut => {
                        let scores = mvtu_raw(layer, x.bits())?;
                        return Ok(EngineTrace {
                            activations,
                            result: ClassificationResult::from_scores(scores),
                        });
                    }
                    IoMode::BinaryInBinaryOut => {
                        let out = mvtu_execute_multi(layer, std::slice::from_ref(x.bits()))?.pop().unwrap();
                        BitTensor::vector(out)
                    }
                    IoMode::FixedpointIn => {
                        return Err(Error::Validation("dense input layer is not supported".into()))
                    }
                }
            }
        };
        activations.push(out);
    }
    Err(Error::Validation("network has no raw-output head".into()))
}

pub fn run_network(model: &Model, image: &[u8]) -> Result<ClassificationResult> {
    Ok(run_network_traced(model, image)?.result)
}

/// Classifies frames on `workers` threads; output order follows input order.
pub fn run_batch<I: AsRef<[u8]> + Sync>(model: &Model, images: &[I], workers: usize) -> Result<Vec<ClassificationResult>> {
    Ok(run_batch_timed(model, images, workers)?.0)
}

/// [`run_batch`] plus measured frames per second.
pub fn run_batch_timed<I: AsRef<[u8]> + Sync>(
    model: &Model,
    images: &[I],
    workers: usize,
) -> Result<(Vec<ClassificationResult>, f64)> {
    if workers == 0 {
        return Err(Error::Validation("worker count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
    let start = Instant::now();
    let results = pool.install(|| {
        images
            .par_iter()
            .map(|img| run_network(model, img.as_ref()))
            .collect::<Result<Vec<_>>>()
    })?;
    let secs = start.elapsed().as_secs_f64();
    let fps = if secs > 0.0 { images.len() as f64 / secs } else { f64::INFINITY };
    Ok((results, fps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    /// Index into the topology's layer list.
    pub layer: usize,
    pub macs: u64,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCountReport {
    pub per_layer: Vec<LayerOps>,
    pub total_ops: u64,
}

/// Synaptic operations per frame, two per multiply-accumulate.
pub fn count_ops(topology: &Topology) -> OpCountReport {
    let per_layer: Vec<LayerOps> = topology
        .mvu_layers()
        .map(|(layer, g)| {
            let macs = (g.output_pixels() * g.neurons() * g.synapses_per_neuron) as u64;
            LayerOps {
                layer,
                macs,
                ops: 2 * macs,
            }
        })
        .collect();
    let total_ops = per_layer.iter().map(|l| l.ops).sum();
    OpCountReport { per_layer, total_ops }
}

/// Random 8-bit frames, deterministic in `seed`.
pub fn random_images(topology: &Topology, count: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = topology.input.frame_bytes();
    (0..count).map(|_| (0..n).map(|_| rng.gen()).collect()).collect()
}

/// First disagreement between engine and oracle on one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    /// Topology layer index; the head is the last layer.
    pub layer: usize,
    pub detail: String,
}

/// Compares every intermediate map and the scores of one frame.
pub fn compare_with_oracle(reference: &ReferenceModel, model: &Model, image: &[u8]) -> Result<Option<Mismatch>> {
    let want = oracle_network_traced(reference, image)?;
    let got = run_network_traced(model, image)?;
    if want.min_margin < TIE_EPSILON {
        return Err(Error::Validation(format!(
            "pre-activation within {} of a batchnorm boundary; the comparison would be ill-posed",
            want.min_margin
        )));
    }
    for (i, (g, w)) in got.activations.iter().zip(&want.activations).enumerate() {
        if g.to_planar_signed() != w.values {
            let differing = g.to_planar_signed().iter().zip(&w.values).filter(|(a, b)| a != b).count();
            return Ok(Some(Mismatch {
                layer: i,
                detail: format!("{differing} of {} activations differ", w.values.len()),
            }));
        }
    }
    let head = model.topology.layers.len() - 1;
    let scores: Vec<i64> = got.result.scores.iter().map(|&s| s as i64).collect();
    if got.activations.len() != want.activations.len() || scores != want.scores {
        return Ok(Some(Mismatch {
            layer: head,
            detail: format!("scores {:?} vs oracle {:?}", scores, want.scores),
        }));
    }
    Ok(None)
}

/// Makes neuron 0 of matrix layer `ordinal` disagree with its reference on
/// every input: thresholded layers get the complementary threshold, the raw
/// head gets its weight row inverted.
pub fn inject_fault(model: &mut Model, ordinal: usize) -> Result<()> {
    let n = model.layers.len();
    let layer = model
        .layers
        .get_mut(ordinal)
        .ok_or_else(|| Error::Validation(format!("fault layer {ordinal} out of range (model has {n} matrix layers)")))?;
    let (lo, hi) = layer.tau_range();
    match layer.thresholds.as_mut() {
        Some(t) => {
            let e = t.entries[0];
            let flipped = match (e.constant, e.direction) {
                (Some(c), _) => ThresholdEntry::constant(!c),
                (None, Direction::AtLeast) if e.tau_plus as i64 <= lo => ThresholdEntry::constant(false),
                (None, Direction::AtLeast) => ThresholdEntry::at_most(e.tau_plus - 1),
                (None, Direction::AtMost) if e.tau_plus as i64 >= hi - 1 => ThresholdEntry::constant(false),
                (None, Direction::AtMost) => ThresholdEntry::at_least(e.tau_plus + 1),
            };
            t.entries[0] = flipped;
        }
        None => layer.weights[0] = layer.weights[0].not(),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyFailure {
    pub trial: usize,
    pub frame: usize,
    pub mismatch: Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub cases: usize,
    pub failures: Vec<VerifyFailure>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random models × random frames, each compared layer by layer against the
/// oracle. `fault` corrupts the given matrix layer of every compiled model.
pub fn verify_random_models(
    topology: &Topology,
    trials: usize,
    frames: usize,
    seed: u64,
    fault: Option<usize>,
) -> Result<VerifyReport> {
    if trials == 0 || frames == 0 {
        return Err(Error::Validation("verification needs at least one trial and one frame".into()));
    }
    let per_trial: Vec<Vec<VerifyFailure>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = seed.wrapping_add(trial as u64);
            let reference = generate_reference_model(topology, s)?;
            let mut model = compile_reference(&reference)?;
            if let Some(f) = fault {
                inject_fault(&mut model, f)?;
            }
            let images = random_images(topology, frames, s ^ 0x5eed);
            let mut failures = Vec::new();
            for (frame, img) in images.iter().enumerate() {
                if let Some(mismatch) = compare_with_oracle(&reference, &model, img)? {
                    failures.push(VerifyFailure { trial, frame, mismatch });
                }
            }
            Ok(failures)
        })
        .collect::<Result<_>>()?;
    Ok(VerifyReport {
        cases: trials * frames,
        failures: per_trial.into_iter().flatten().collect(),
    })
}
