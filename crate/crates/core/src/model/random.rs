use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormParams, BinaryLayer, IoMode, LayerKind, Model, ThresholdVector, Topology};
use crate::error::{Error, Result};
use crate::mvtu::{compile_fixedpoint_thresholds, compile_thresholds};
use crate::oracle::{ReferenceLayer, ReferenceModel, SignedMatrix};
use crate::swu::{interleave_dense, interleave_filters};

fn random_batchnorm(rng: &mut ChaCha8Rng, neurons: usize, scale: f64) -> BatchNormParams {
    let mut bn = BatchNormParams::default();
    for _ in 0..neurons {
        let magnitude = rng.gen_range(0.5..2.0);
        let gamma = match rng.gen_range(0..64) {
            0 => 0.0,
            1..=16 => -magnitude,
            _ => magnitude,
        };
        bn.gamma.push(gamma);
        bn.beta.push(rng.gen_range(-0.5..0.5));
        bn.mean.push(rng.gen_range(-scale..scale));
        bn.stddev.push(rng.gen_range(0.5..1.5) * scale);
        bn.bias.push(rng.gen_range(-2.0..2.0));
    }
    bn
}

/// Random ±1 weights and batchnorm parameters for every matrix layer.
///
/// Parameters are drawn on the scale of each layer's pre-activation spread so
/// that outputs are not constant; the result is a pure function of `seed`.
pub fn generate_reference_model(topology: &Topology, seed: u64) -> Result<ReferenceModel> {
    topology.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = topology.mvu_count();
    let layers = topology
        .mvu_layers()
        .enumerate()
        .map(|(ordinal, (_, g))| {
            let y = g.synapses_per_neuron;
            let weights: Vec<i8> = (0..g.neurons() * y)
                .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                .collect();
            let spread = (y as f64).sqrt();
            let batchnorm = if ordinal + 1 == n {
                None
            } else if ordinal == 0 {
                // accumulator of ±pixel: spread of a sum of y unsigned bytes
                Some(random_batchnorm(&mut rng, g.neurons(), 148.0 * spread))
            } else {
                Some(random_batchnorm(&mut rng, g.neurons(), spread))
            };
            ReferenceLayer {
                geometry: *g,
                weights,
                batchnorm,
            }
        })
        .collect();
    Ok(ReferenceModel {
        topology: topology.clone(),
        layers,
    })
}

/// Lowers a reference model to the engine's interleaved bits and integer
/// thresholds.
pub fn compile_reference(reference: &ReferenceModel) -> Result<Model> {
    let topo = &reference.topology;
    if reference.layers.len() != topo.mvu_count() {
        return Err(Error::Validation(format!(
            "{} reference layers for {} matrix layers",
            reference.layers.len(),
            topo.mvu_count()
        )));
    }
    // map shape feeding each topology layer
    let mut shapes = Vec::with_capacity(topo.layers.len());
    let (mut dim, mut ch) = (topo.input.dim, topo.input.channels);
    for g in &topo.layers {
        shapes.push((dim, ch));
        match g.kind {
            LayerKind::FullyConnected => (dim, ch) = (1, g.out_channels),
            _ => (dim, ch) = (g.ofm_dim, g.out_channels),
        }
    }
    let mut layers = Vec::with_capacity(reference.layers.len());
    for (ordinal, ((index, g), r)) in topo.mvu_layers().zip(&reference.layers).enumerate() {
        if &r.geometry != g {
            return Err(Error::Invariant {
                layer: ordinal,
                message: "reference geometry differs from topology".into(),
            });
        }
        let io_mode = topo.io_mode_of(ordinal);
        let weights = match g.kind {
            LayerKind::Conv3x3 => interleave_filters(&r.filters())?,
            _ => {
                let (d, c) = shapes[index];
                let m: SignedMatrix = r.matrix();
                interleave_dense(&m, d, c)?
            }
        };
        let y = g.synapses_per_neuron;
        let thresholds: Option<ThresholdVector> = match (io_mode, &r.batchnorm) {
            (IoMode::RawOut, _) => None,
            (IoMode::FixedpointIn, Some(bn)) => Some(compile_fixedpoint_thresholds(bn, y)?),
            (IoMode::BinaryInBinaryOut, Some(bn)) => Some(compile_thresholds(bn, y)?),
            (_, None) => {
                return Err(Error::Invariant {
                    layer: ordinal,
                    message: "thresholding layer has no batchnorm parameters".into(),
                })
            }
        };
        layers.push(BinaryLayer {
            geometry: *g,
            weights,
            thresholds,
            io_mode,
        });
    }
    Model::new(topo.clone(), layers)
}

/// Compiled random layers for `topology`, deterministic in `seed`.
pub fn generate_random_model(topology: &Topology, seed: u64) -> Result<Vec<BinaryLayer>> {
    Ok(compile_reference(&generate_reference_model(topology, seed)?)?.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_topology, Padding, Scale};

    fn tiny() -> Topology {
        build_topology("1/16".parse::<Scale>().unwrap(), Padding::NegOne).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let t = tiny();
        assert_eq!(generate_random_model(&t, 7).unwrap(), generate_random_model(&t, 7).unwrap());
        assert_ne!(generate_random_model(&t, 7).unwrap(), generate_random_model(&t, 8).unwrap());
    }

    #[test]
    fn compiled_model_validates() {
        let t = tiny();
        let m = Model::new(t.clone(), generate_random_model(&t, 1).unwrap()).unwrap();
        assert_eq!(m.layers.first().unwrap().io_mode, IoMode::FixedpointIn);
        assert_eq!(m.layers.last().unwrap().io_mode, IoMode::RawOut);
    }
}
