//! 2x2 stride-2 max pooling on binary maps.
//!
//! With −1 encoded as an unset bit, the max over a window is +1 iff any bit
//! is set, so pooling is a per-channel OR.

use crate::error::{Error, Result};
use crate::model::{BitTensor, BitVector};

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!("2x2 pool needs even dimensions, got {h}x{w}")));
    }
    Ok(())
}

/// Whole-map OR pooling.
pub fn or_pool(input: &BitTensor) -> Result<BitTensor> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    check_even(h, w)?;
    let mut out = BitTensor::zeros(h / 2, w / 2, c);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for ch in 0..c {
                let any = input.get(2 * r, 2 * col, ch)
                    || input.get(2 * r, 2 * col + 1, ch)
                    || input.get(2 * r + 1, 2 * col, ch)
                    || input.get(2 * r + 1, 2 * col + 1, ch);
                if any {
                    out.set(r, col, ch, true);
                }
            }
        }
    }
    Ok(out)
}

/// Streaming pool fed one input row at a time.
///
/// Horizontal pairs are ORed on arrival into a half-width accumulator row, so
/// residency never exceeds one input row plus one half row.
#[derive(Debug, Clone)]
pub struct LinePoolUnit {
    width: usize,
    channels: usize,
    acc: BitVector,
    rows_seen: usize,
    peak_bits: usize,
}

impl LinePoolUnit {
    pub fn new(width: usize, channels: usize) -> Result<Self> {
        check_even(2, width)?;
        Ok(Self {
            width,
            channels,
            acc: BitVector::zeros(width / 2 * channels),
            rows_seen: 0,
            peak_bits: 0,
        })
    }

    /// Consumes one interleaved row of `width·channels` bits; every second
    /// row completes and returns an output row.
    pub fn push_row(&mut self, row: &BitVector) -> Result<Option<BitVector>> {
        let c = self.channels;
        if row.len() != self.width * c {
            return Err(Error::DimensionMismatch {
                context: "pool row",
                expected: self.width * c,
                actual: row.len(),
            });
        }
        self.peak_bits = self.peak_bits.max(row.len() + self.acc.len());
        for oc in 0..self.width / 2 {
            for ch in 0..c {
                if row.get(2 * oc * c + ch) || row.get((2 * oc + 1) * c + ch) {
                    self.acc.set(oc * c + ch, true);
                }
            }
        }
        self.rows_seen += 1;
        if self.rows_seen % 2 == 0 {
            let done = std::mem::replace(&mut self.acc, BitVector::zeros(self.width / 2 * c));
            Ok(Some(done))
        } else {
            Ok(None)
        }
    }

    /// Largest number of bits held at once, input row included.
    pub fn peak_residency_bits(&self) -> usize {
        self.peak_bits
    }
}

/// Pools a map by streaming its rows through a [`LinePoolUnit`].
pub fn line_buffer_pool(input: &BitTensor) -> Result<(BitTensor, usize)> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    check_even(h, w)?;
    let mut unit = LinePoolUnit::new(w, c)?;
    let row_bits = w * c;
    let mut out = BitVector::with_capacity(h / 2 * w / 2 * c);
    for r in 0..h {
        let mut row = BitVector::with_capacity(row_bits);
        row.extend_from_range(input.bits(), r * row_bits, row_bits);
        if let Some(o) = unit.push_row(&row)? {
            out.extend_from(&o);
        }
    }
    Ok((BitTensor::from_bits(h / 2, w / 2, c, out)?, unit.peak_residency_bits()))
}
