//! Bit-packed binary vectors and channel-interleaved feature maps.
//!
//! A set bit encodes +1 and an unset bit encodes −1. Bits are stored
//! least-significant-bit first in 64-bit words; every bit past `len` in the
//! final word is kept at zero.

use crate::error::{Error, Result};

const WORD_BITS: usize = 64;

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[inline]
fn low_mask(n: usize) -> u64 {
    if n >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// A packed sequence of binary values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

impl BitVector {
    /// All-unset vector (every element −1).
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut v = Self {
            words: vec![u64::MAX; words_for(len)],
            len,
        };
        v.clear_tail();
        v
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(words_for(bits)),
            len: 0,
        }
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut v = Self::default();
        for b in bits {
            v.push(b);
        }
        v
    }

    /// Packs ±1 values. Zero has no binary encoding and is rejected.
    pub fn from_signed(values: &[i8]) -> Result<Self> {
        let mut v = Self::with_capacity(values.len());
        for (i, &x) in values.iter().enumerate() {
            match x {
                1 => v.push(true),
                -1 => v.push(false),
                _ => return Err(Error::ZeroWeight(i)),
            }
        }
        Ok(v)
    }

    /// Builds a vector from raw words, rejecting set bits past `len`.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::DimensionMismatch {
                context: "packed word count",
                expected: words_for(len),
                actual: words.len(),
            });
        }
        let v = Self { words, len };
        if !v.tail_is_clear() {
            return Err(Error::Format(format!(
                "set bits beyond bit length {len} in final word"
            )));
        }
        Ok(v)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Raw word access for tests that need to break the trailing-zero rule.
    #[cfg(test)]
    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let w = &mut self.words[i / WORD_BITS];
        let m = 1u64 << (i % WORD_BITS);
        if value {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    pub fn flip(&mut self, i: usize) {
        let b = self.get(i);
        self.set(i, !b);
    }

    #[inline]
    pub fn push(&mut self, value: bool) {
        if self.len % WORD_BITS == 0 {
            self.words.push(0);
        }
        if value {
            self.words[self.len / WORD_BITS] |= 1u64 << (self.len % WORD_BITS);
        }
        self.len += 1;
    }

    /// Reads `n ≤ 64` bits starting at `start`, bit `start` in the LSB.
    #[inline]
    pub fn get_bits(&self, start: usize, n: usize) -> u64 {
        debug_assert!(n <= WORD_BITS);
        assert!(start + n <= self.len, "bit range out of bounds");
        if n == 0 {
            return 0;
        }
        let w = start / WORD_BITS;
        let off = start % WORD_BITS;
        let mut v = self.words[w] >> off;
        if off != 0 && off + n > WORD_BITS {
            v |= self.words[w + 1] << (WORD_BITS - off);
        }
        v & low_mask(n)
    }

    /// Appends the low `n ≤ 64` bits of `value`.
    #[inline]
    pub fn push_bits(&mut self, value: u64, n: usize) {
        debug_assert!(n <= WORD_BITS);
        if n == 0 {
            return;
        }
        let value = value & low_mask(n);
        let off = self.len % WORD_BITS;
        if off == 0 {
            self.words.push(value);
        } else {
            let last = self.words.len() - 1;
            self.words[last] |= value << off;
            if off + n > WORD_BITS {
                self.words.push(value >> (WORD_BITS - off));
            }
        }
        self.len += n;
    }

    /// Appends `n` bits of `src` beginning at `start`.
    pub fn extend_from_range(&mut self, src: &BitVector, start: usize, n: usize) {
        let mut done = 0;
        while done < n {
            let take = (n - done).min(WORD_BITS);
            self.push_bits(src.get_bits(start + done, take), take);
            done += take;
        }
    }

    pub fn extend_from(&mut self, src: &BitVector) {
        self.extend_from_range(src, 0, src.len);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// ±1 view of the packed bits.
    pub fn to_signed(&self) -> Vec<i8> {
        self.iter().map(|b| if b { 1 } else { -1 }).collect()
    }

    pub fn not(&self) -> Self {
        let mut v = Self {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        v.clear_tail();
        v
    }

    pub(crate) fn tail_is_clear(&self) -> bool {
        let rem = self.len % WORD_BITS;
        rem == 0 || self.words.last().is_none_or(|w| w & !low_mask(rem) == 0)
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(w) = self.words.last_mut() {
                *w &= low_mask(rem);
            }
        }
    }
}

/// A `height × width × channels` binary feature map, channel-interleaved:
/// element `(row, col, ch)` lives at flat index `(row·width + col)·channels + ch`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    height: usize,
    width: usize,
    channels: usize,
    bits: BitVector,
}

impl BitTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            bits: BitVector::zeros(height * width * channels),
        }
    }

    pub fn from_bits(height: usize, width: usize, channels: usize, bits: BitVector) -> Result<Self> {
        let expected = height * width * channels;
        if bits.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "bit tensor length",
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            bits,
        })
    }

    /// A 1×1×len tensor, the shape fully-connected layers consume.
    pub fn vector(bits: BitVector) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: bits.len(),
            bits,
        }
    }

    /// Packs a channel-planar (`[ch][row][col]`) ±1 array into interleaved order.
    pub fn from_planar_signed(
        height: usize,
        width: usize,
        channels: usize,
        planar: &[i8],
    ) -> Result<Self> {
        let n = height * width * channels;
        if planar.len() != n {
            return Err(Error::DimensionMismatch {
                context: "planar tensor length",
                expected: n,
                actual: planar.len(),
            });
        }
        let mut bits = BitVector::with_capacity(n);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    match planar[(ch * height + r) * width + c] {
                        1 => bits.push(true),
                        -1 => bits.push(false),
                        _ => return Err(Error::ZeroWeight((ch * height + r) * width + c)),
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            bits,
        })
    }

    /// Inverse of [`BitTensor::from_planar_signed`].
    pub fn to_planar_signed(&self) -> Vec<i8> {
        let mut out = vec![0i8; self.bits.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out[(ch * self.height + r) * self.width + c] =
                        if self.get(r, c, ch) { 1 } else { -1 };
                }
            }
        }
        out
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn bit_len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        self.bits.words()
    }

    #[inline]
    pub fn bits(&self) -> &BitVector {
        &self.bits
    }

    pub fn into_bits(self) -> BitVector {
        self.bits
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> bool {
        self.bits.get(self.index(row, col, ch))
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: bool) {
        let i = self.index(row, col, ch);
        self.bits.set(i, value);
    }

    /// All channel bits of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> BitVector {
        let mut v = BitVector::with_capacity(self.channels);
        v.extend_from_range(&self.bits, self.index(row, col, 0), self.channels);
        v
    }

    /// Same data reinterpreted as a flat 1×1×N vector (the FC view).
    pub fn flatten(self) -> Self {
        Self::vector(self.bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packing_is_lsb_first() {
        let v = BitVector::from_bools([true, false, true, true]);
        assert_eq!(v.words(), &[0b1101]);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn ones_keeps_tail_clear() {
        let v = BitVector::ones(70);
        assert_eq!(v.words().len(), 2);
        assert_eq!(v.words()[1], 0b11_1111);
        assert!(v.tail_is_clear());
        assert!(v.not().words().iter().all(|&w| w == 0));
    }

    #[test]
    fn from_words_rejects_dirty_tail() {
        assert!(BitVector::from_words(vec![0b10000], 4).is_err());
        assert!(BitVector::from_words(vec![0b1000], 4).is_ok());
        assert!(BitVector::from_words(vec![0, 0], 4).is_err());
    }

    #[test]
    fn from_signed_rejects_zero() {
        assert!(matches!(
            BitVector::from_signed(&[1, -1, 0]),
            Err(Error::ZeroWeight(2))
        ));
    }

    #[test]
    fn interleaved_index() {
        let mut t = BitTensor::zeros(2, 3, 4);
        t.set(1, 2, 3, true);
        assert_eq!(t.index(1, 2, 3), (1 * 3 + 2) * 4 + 3);
        assert!(t.bits().get(23));
        assert_eq!(t.bits().count_ones(), 1);
    }

    proptest! {
        #[test]
        fn signed_readback(values in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 0..300)) {
            let v = BitVector::from_signed(&values).unwrap();
            prop_assert_eq!(v.words().len(), values.len().div_ceil(64));
            prop_assert!(v.tail_is_clear());
            prop_assert_eq!(v.to_signed(), values);
        }

        #[test]
        fn interleave_bijection(h in 1usize..6, w in 1usize..6, c in 1usize..10, seed in any::<u64>()) {
            let n = h * w * c;
            let planar: Vec<i8> = (0..n)
                .map(|i| if (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1 { 1 } else { -1 })
                .collect();
            let t = BitTensor::from_planar_signed(h, w, c, &planar).unwrap();
            prop_assert_eq!(t.to_planar_signed(), planar);
        }

        #[test]
        fn range_copy_matches_bitwise(bits in proptest::collection::vec(any::<bool>(), 1..400), a in 0usize..400, b in 0usize..400) {
            let src = BitVector::from_bools(bits.iter().copied());
            let (a, b) = (a % bits.len(), b % bits.len());
            let (lo, hi) = (a.min(b), a.max(b));
            let mut dst = BitVector::from_bools([true, false, true]);
            dst.extend_from_range(&src, lo, hi - lo);
            let expect: Vec<bool> = [true, false, true].into_iter().chain(bits[lo..hi].iter().copied()).collect();
            prop_assert_eq!(dst.iter().collect::<Vec<_>>(), expect);
            prop_assert!(dst.tail_is_clear());
        }
    }
}
