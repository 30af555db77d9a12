//! Binary model container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` descriptor length, a JSON
//! descriptor, then the blob. All integers little-endian. Per layer the blob
//! holds X weight rows of ⌈Y/64⌉ `u64` words, followed by X 8-byte threshold
//! records `(i32 tau, u8 direction, u8 is_constant, i8 constant, u8 0)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryLayer, BitVector, Direction, IoMode, LayerGeometry, Model, ThresholdEntry, ThresholdVector, Topology};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BNNMODEL";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;
const RECORD_LEN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct LayerDescriptor {
    index: usize,
    geometry: LayerGeometry,
    io_mode: IoMode,
    weight_offset: usize,
    weight_bytes: usize,
    threshold_offset: usize,
    threshold_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    topology: Topology,
    layers: Vec<LayerDescriptor>,
}

fn row_words(y: usize) -> usize {
    y.div_ceil(64)
}

pub fn write_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut descs = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        let weight_offset = blob.len();
        for row in &layer.weights {
            for w in row.words() {
                blob.extend_from_slice(&w.to_le_bytes());
            }
        }
        let weight_bytes = blob.len() - weight_offset;
        let threshold_offset = blob.len();
        let entries = layer.thresholds.as_ref().map_or(&[][..], |t| &t.entries[..]);
        for e in entries {
            blob.extend_from_slice(&e.tau_plus.to_le_bytes());
            blob.push(match e.direction {
                Direction::AtLeast => 0,
                Direction::AtMost => 1,
            });
            blob.push(e.constant.is_some() as u8);
            blob.push(match e.constant {
                Some(true) => 1,
                Some(false) => -1i8 as u8,
                None => 0,
            });
            blob.push(0);
        }
        descs.push(LayerDescriptor {
            index,
            geometry: layer.geometry,
            io_mode: layer.io_mode,
            weight_offset,
            weight_bytes,
            threshold_offset,
            threshold_count: entries.len(),
        });
    }
    let json = serde_json::to_vec(&Descriptor {
        topology: model.topology.clone(),
        layers: descs,
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take<'a>(blob: &'a [u8], layer: usize, offset: usize, len: usize) -> Result<&'a [u8]> {
    let available = blob.len().saturating_sub(offset);
    if offset > blob.len() || len > available {
        return Err(Error::Truncated {
            layer,
            needed: len,
            available,
        });
    }
    Ok(&blob[offset..offset + len])
}

fn decode_layer(d: &LayerDescriptor, blob: &[u8]) -> Result<BinaryLayer> {
    let layer = d.index;
    let x = d.geometry.neurons();
    let y = d.geometry.synapses_per_neuron;
    let words = row_words(y);
    let expect = x * words * 8;
    if d.weight_bytes != expect {
        return Err(Error::Invariant {
            layer,
            message: format!("weight_bytes {} but {x}x{y} needs {expect}", d.weight_bytes),
        });
    }
    let raw = take(blob, layer, d.weight_offset, d.weight_bytes)?;
    let weights = raw
        .chunks_exact(words * 8)
        .map(|row| {
            let w: Vec<u64> = row
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            BitVector::from_words(w, y).map_err(|e| Error::Invariant {
                layer,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let thresholds = if d.io_mode == IoMode::RawOut && d.threshold_count == 0 {
        None
    } else {
        let raw = take(blob, layer, d.threshold_offset, d.threshold_count * RECORD_LEN)?;
        let entries = raw
            .chunks_exact(RECORD_LEN)
            .map(|r| {
                let tau_plus = i32::from_le_bytes(r[0..4].try_into().unwrap());
                let direction = match r[4] {
                    0 => Direction::AtLeast,
                    1 => Direction::AtMost,
                    v => {
                        return Err(Error::Invariant {
                            layer,
                            message: format!("unknown threshold direction {v}"),
                        })
                    }
                };
                let constant = match (r[5], r[6] as i8) {
                    (0, _) => None,
                    (1, 1) => Some(true),
                    (1, -1) => Some(false),
                    (f, v) => {
                        return Err(Error::Invariant {
                            layer,
                            message: format!("bad constant record ({f}, {v})"),
                        })
                    }
                };
                Ok(ThresholdEntry {
                    tau_plus,
                    direction,
                    constant,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(ThresholdVector::new(entries))
    };
    Ok(BinaryLayer {
        geometry: d.geometry,
        weights,
        thresholds,
        io_mode: d.io_mode,
    })
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, not a model container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[HEADER_LEN..];
    if json_len > rest.len() {
        return Err(Error::Format(format!(
            "descriptor length {json_len} exceeds the {} remaining bytes",
            rest.len()
        )));
    }
    let desc: Descriptor = serde_json::from_slice(&rest[..json_len])
        .map_err(|e| Error::Format(format!("bad descriptor: {e}")))?;
    let blob = &rest[json_len..];
    let n = desc.topology.mvu_count();
    if desc.layers.len() != n {
        return Err(Error::Validation(format!(
            "descriptor lists {} layers, topology has {n} matrix layers",
            desc.layers.len()
        )));
    }
    if let Some(pos) = desc.layers.iter().enumerate().position(|(i, d)| d.index != i) {
        return Err(Error::Validation(format!("layer descriptor {pos} is out of order")));
    }
    let layers = desc
        .layers
        .iter()
        .map(|d| decode_layer(d, blob))
        .collect::<Result<Vec<_>>>()?;
    Model::new(desc.topology, layers)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_topology, generate_random_model, Padding, Scale};

    fn model() -> Model {
        let t = build_topology("1/16".parse::<Scale>().unwrap(), Padding::NegOne).unwrap();
        let layers = generate_random_model(&t, 3).unwrap();
        Model::new(t, layers).unwrap()
    }

    fn blob_start(bytes: &[u8]) -> usize {
        HEADER_LEN + u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize
    }

    #[test]
    fn round_trip_and_deterministic() {
        let m = model();
        let a = write_model(&m).unwrap();
        assert_eq!(a, write_model(&m).unwrap());
        assert_eq!(read_model(&a).unwrap(), m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut a = write_model(&model()).unwrap();
        a[0] = b'X';
        assert!(matches!(read_model(&a), Err(Error::Format(_))));
        let mut b = write_model(&model()).unwrap();
        b[8] = 9;
        assert!(matches!(read_model(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_layer() {
        let a = write_model(&model()).unwrap();
        let cut = &a[..a.len() - 1];
        match read_model(cut) {
            Err(Error::Truncated { layer, .. }) => assert_eq!(layer, model().layers.len() - 1),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_threshold_rejected() {
        let m = model();
        let mut a = write_model(&m).unwrap();
        // first threshold record of layer 1 (a binary layer)
        let start = blob_start(&a);
        let l0 = &m.layers[0];
        let l1 = &m.layers[1];
        let off = start
            + l0.weights.len() * row_words(l0.geometry.synapses_per_neuron) * 8
            + l0.weights.len() * RECORD_LEN
            + l1.weights.len() * row_words(l1.geometry.synapses_per_neuron) * 8;
        a[off..off + 4].copy_from_slice(&(l1.geometry.synapses_per_neuron as i32 + 5).to_le_bytes());
        a[off + 5] = 0;
        match read_model(&a) {
            Err(Error::Invariant { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn dirty_weight_tail_rejected() {
        let m = model();
        let mut a = write_model(&m).unwrap();
        let y = m.layers[0].geometry.synapses_per_neuron;
        assert!(y % 64 != 0);
        let start = blob_start(&a);
        a[start + 7] |= 0x80;
        assert!(matches!(read_model(&a), Err(Error::Invariant { layer: 0, .. })));
    }
}
