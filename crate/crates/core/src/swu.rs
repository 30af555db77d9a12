//! Sliding window unit: convolution lowering over one wide pixel memory.
//!
//! The incoming interleaved feature map is written into a padded buffer in
//! raster address order. A multiplexer picks the source per write address:
//! border addresses get the all-unset pattern (−1 in every channel, or pixel
//! value 0 on the 8-bit input layer), interior addresses get the next stream
//! pixel. Windows are then read out as 9 pixel addresses each, producing
//! image-matrix columns whose bit order is (window position, channel).

use crate::error::{Error, Result};
use crate::model::{BitVector, LayerGeometry, LayerKind, Padding};
use crate::oracle::{SignedFilters, SignedMatrix};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub ifm_dim: usize,
    pub padded_dim: usize,
    pub ofm_dim: usize,
    pub channels: usize,
    pub k: usize,
    pub pad: usize,
    /// Per output pixel (raster order), the 9 buffer addresses in
    /// (window row, window col) order.
    pub read_addresses: Vec<[u32; TAPS]>,
}

fn border_of(g: &LayerGeometry) -> Result<usize> {
    match g.padding {
        Padding::ZeroOracleOnly => Err(Error::UnsupportedPadding(
            "zero padding needs a ternary datapath; evaluate it with the oracle".into(),
        )),
        p => Ok(p.border()),
    }
}

pub fn build_window_plan(g: &LayerGeometry) -> Result<WindowPlan> {
    if g.kind != LayerKind::Conv3x3 {
        return Err(Error::Geometry(format!("sliding windows need a conv layer, got {:?}", g.kind)));
    }
    let pad = border_of(g)?;
    let padded_dim = g.ifm_dim + 2 * pad;
    if padded_dim < KERNEL {
        return Err(Error::Geometry(format!("padded map {padded_dim} smaller than kernel")));
    }
    let ofm_dim = padded_dim - KERNEL + 1;
    let mut read_addresses = Vec::with_capacity(ofm_dim * ofm_dim);
    for r in 0..ofm_dim {
        for c in 0..ofm_dim {
            let mut w = [0u32; TAPS];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    w[ky * KERNEL + kx] = ((r + ky) * padded_dim + c + kx) as u32;
                }
            }
            read_addresses.push(w);
        }
    }
    Ok(WindowPlan {
        ifm_dim: g.ifm_dim,
        padded_dim,
        ofm_dim,
        channels: g.in_channels,
        k: KERNEL,
        pad,
        read_addresses,
    })
}

/// The IFM memory: `padded_dim²` pixels of `pixel_bits` each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBuffer {
    pub padded_dim: usize,
    pub pixel_bits: usize,
    data: BitVector,
    writes: Vec<u8>,
}

impl PaddedBuffer {
    pub fn pixel(&self, address: usize) -> BitVector {
        let mut v = BitVector::with_capacity(self.pixel_bits);
        v.extend_from_range(&self.data, address * self.pixel_bits, self.pixel_bits);
        v
    }

    pub fn data(&self) -> &BitVector {
        &self.data
    }

    /// Write count per address; a complete single-pass fill is all ones.
    pub fn write_counts(&self) -> &[u8] {
        &self.writes
    }

    pub fn is_border(&self, address: usize, pad: usize) -> bool {
        let (r, c) = (address / self.padded_dim, address % self.padded_dim);
        let hi = self.padded_dim - pad;
        r < pad || c < pad || r >= hi || c >= hi
    }
}

/// Fills the padded buffer from a binary (1 bit per channel) stream.
pub fn stream_pad_write(stream: &BitVector, g: &LayerGeometry) -> Result<PaddedBuffer> {
    stream_pad_write_pixels(stream, g, 1)
}

/// Fills the padded buffer from a stream of `bits_per_channel`-wide elements.
pub fn stream_pad_write_pixels(stream: &BitVector, g: &LayerGeometry, bits_per_channel: usize) -> Result<PaddedBuffer> {
    let pad = border_of(g)?;
    let pixel_bits = g.in_channels * bits_per_channel;
    let expected = g.ifm_dim * g.ifm_dim * pixel_bits;
    if stream.len() != expected {
        let what = if stream.len() < expected { "underrun" } else { "overrun" };
        let (dim, ch) = (g.ifm_dim, g.in_channels);
        return Err(Error::Stream(format!(
            "stream {what}: {} bits for a {dim}x{dim}x{ch} map of {bits_per_channel}-bit elements ({expected} bits)",
            stream.len()
        )));
    }
    let padded_dim = g.ifm_dim + 2 * pad;
    let mut data = BitVector::with_capacity(padded_dim * padded_dim * pixel_bits);
    let mut writes = vec![0u8; padded_dim * padded_dim];
    let mut read = 0;
    let hi = padded_dim - pad;
    for addr in 0..padded_dim * padded_dim {
        let (r, c) = (addr / padded_dim, addr % padded_dim);
        if r < pad || c < pad || r >= hi || c >= hi {
            data.extend_from(&BitVector::zeros(pixel_bits));
        } else {
            data.extend_from_range(stream, read, pixel_bits);
            read += pixel_bits;
        }
        writes[addr] += 1;
    }
    debug_assert_eq!(read, stream.len());
    Ok(PaddedBuffer {
        padded_dim,
        pixel_bits,
        data,
        writes,
    })
}

/// Reads every window out of the buffer: one `9·pixel_bits` vector per output
/// pixel, in output raster order.
pub fn generate_image_matrix(buffer: &PaddedBuffer, plan: &WindowPlan) -> Result<Vec<BitVector>> {
    if buffer.padded_dim != plan.padded_dim || buffer.pixel_bits % plan.channels != 0 {
        return Err(Error::Geometry(format!(
            "buffer {}x{} of {}-bit pixels does not match plan for {}x{}x{}",
            buffer.padded_dim, buffer.padded_dim, buffer.pixel_bits, plan.padded_dim, plan.padded_dim, plan.channels
        )));
    }
    let pb = buffer.pixel_bits;
    Ok(plan
        .read_addresses
        .iter()
        .map(|window| {
            let mut v = BitVector::with_capacity(TAPS * pb);
            for &a in window {
                v.extend_from_range(&buffer.data, a as usize * pb, pb);
            }
            v
        })
        .collect())
}

/// Packs bytes LSB-first, 8 bits each.
pub fn pack_bytes(bytes: &[u8]) -> BitVector {
    let mut v = BitVector::with_capacity(bytes.len() * 8);
    for &b in bytes {
        v.push_bits(b as u64, 8);
    }
    v
}

pub fn unpack_bytes(bits: &BitVector) -> Vec<u8> {
    (0..bits.len() / 8).map(|i| bits.get_bits(i * 8, 8) as u8).collect()
}

/// Offline filter interleaving: row `o` holds bit `(ky·3 + kx)·C + c` =
/// `filters[o][c][ky][kx]`, matching the image-matrix bit order.
pub fn interleave_filters(filters: &SignedFilters) -> Result<Vec<BitVector>> {
    let c_in = filters.in_channels;
    (0..filters.out_channels)
        .map(|o| {
            let mut row = BitVector::with_capacity(TAPS * c_in);
            for tap in 0..TAPS {
                for c in 0..c_in {
                    let idx = ((o * c_in + c) * TAPS) + tap;
                    match filters.values[idx] {
                        1 => row.push(true),
                        -1 => row.push(false),
                        _ => return Err(Error::ZeroWeight(idx)),
                    }
                }
            }
            Ok(row)
        })
        .collect()
}

/// Inverse of [`interleave_filters`].
pub fn deinterleave_filters(rows: &[BitVector], in_channels: usize) -> SignedFilters {
    let mut values = vec![0i8; rows.len() * in_channels * TAPS];
    for (o, row) in rows.iter().enumerate() {
        for tap in 0..TAPS {
            for c in 0..in_channels {
                values[(o * in_channels + c) * TAPS + tap] = if row.get(tap * in_channels + c) { 1 } else { -1 };
            }
        }
    }
    SignedFilters {
        out_channels: rows.len(),
        in_channels,
        values,
    }
}

/// Permutes dense weights defined over a channel-planar flattening of a
/// `dim × dim × channels` map into the interleaved order the engine streams.
pub fn interleave_dense(weights: &SignedMatrix, dim: usize, channels: usize) -> Result<Vec<BitVector>> {
    if weights.cols != dim * dim * channels {
        return Err(Error::DimensionMismatch {
            context: "dense weight columns",
            expected: dim * dim * channels,
            actual: weights.cols,
        });
    }
    weights
        .values
        .chunks(weights.cols)
        .enumerate()
        .map(|(o, w)| {
            let mut row = BitVector::with_capacity(weights.cols);
            for r in 0..dim {
                for c in 0..dim {
                    for ch in 0..channels {
                        let idx = (ch * dim + r) * dim + c;
                        match w[idx] {
                            1 => row.push(true),
                            -1 => row.push(false),
                            _ => return Err(Error::ZeroWeight(o * weights.cols + idx)),
                        }
                    }
                }
            }
            Ok(row)
        })
        .collect()
}
