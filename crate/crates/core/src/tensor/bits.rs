use super::Tensor;
use crate::error::{Error, Result};

/// Bits per storage word.
pub const WORD_BITS: usize = 64;

/// Bit-packed ±1 tensor.
///
/// Bits are packed along the innermost axis, one row of `inner` values per
/// `ceil(inner / 64)` words, least-significant bit first. A set bit encodes +1,
/// a clear bit −1. Bits past `inner` in the final word of a row (pad bits) are
/// kept set; kernels mask them out, so their value never reaches a result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    words_per_row: usize,
}

/// Sign binarization of a float tensor; `sign(0) = +1`.
pub fn binarize(t: &Tensor) -> Result<BitTensor> {
    BitTensor::pack(t.shape().to_vec(), t.data())
}

impl BitTensor {
    /// Pack `values` (row-major for `shape`) by sign.
    pub fn pack(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let inner = inner_dim(&shape);
        let rows = row_count(&shape);
        let words_per_row = words_for(inner);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            pack_row(
                &values[r * inner..(r + 1) * inner],
                &mut words[r * words_per_row..(r + 1) * words_per_row],
            );
        }
        Ok(Self {
            shape,
            words,
            words_per_row,
        })
    }

    /// Build from `+1`/`−1` booleans (`true` is +1).
    pub fn from_signs(shape: Vec<usize>, signs: &[bool]) -> Result<Self> {
        let values: Vec<f32> = signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
        Self::pack(shape, &values)
    }

    /// Adopt raw row-padded words. Pad bits are normalized to +1.
    pub fn from_words(shape: Vec<usize>, mut words: Vec<u64>) -> Result<Self> {
        let inner = inner_dim(&shape);
        let words_per_row = words_for(inner);
        let expected = row_count(&shape) * words_per_row;
        if words.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: words.len(),
            });
        }
        let pad = pad_mask(inner);
        if pad != 0 {
            for row in words.chunks_mut(words_per_row) {
                *row.last_mut().unwrap() |= pad;
            }
        }
        Ok(Self {
            shape,
            words,
            words_per_row,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Length of the packed (innermost) axis.
    pub fn inner(&self) -> usize {
        inner_dim(&self.shape)
    }

    pub fn rows(&self) -> usize {
        row_count(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Value at a flat row-major index: `true` for +1.
    pub fn get(&self, flat: usize) -> bool {
        let inner = self.inner();
        let (r, i) = (flat / inner, flat % inner);
        self.words[r * self.words_per_row + i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    /// Unpack to a ±1 float tensor.
    pub fn unpack(&self) -> Tensor {
        let n = self.len();
        let data = (0..n).map(|i| if self.get(i) { 1.0 } else { -1.0 }).collect();
        Tensor::new(self.shape.clone(), data).expect("unpacked values are finite")
    }

    /// Values as `±1.0` in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| if self.get(i) { 1.0 } else { -1.0 })
            .collect()
    }

    /// Number of +1 entries in row `r` (pad bits excluded).
    pub fn row_popcount(&self, r: usize) -> u32 {
        let inner = self.inner();
        let row = self.row(r);
        let mut pop = 0;
        for (i, &w) in row.iter().enumerate() {
            let valid = (inner - i * WORD_BITS).min(WORD_BITS);
            pop += (w & low_mask(valid)).count_ones();
        }
        pop
    }

    /// Flip every pad bit. Exposed so tests can show pad bits never reach a
    /// kernel result; not part of the supported API.
    #[doc(hidden)]
    pub fn scramble_pad_bits(&mut self) {
        let pad = pad_mask(self.inner());
        if pad == 0 {
            return;
        }
        let wpr = self.words_per_row;
        for row in self.words.chunks_mut(wpr) {
            *row.last_mut().unwrap() ^= pad;
        }
    }
}

/// Pack one row of values by sign into `out` (which must hold
/// `ceil(values.len() / 64)` words). Pad bits are set.
pub(crate) fn pack_row(values: &[f32], out: &mut [u64]) {
    for (wi, chunk) in values.chunks(WORD_BITS).enumerate() {
        let mut word = 0u64;
        for (b, &v) in chunk.iter().enumerate() {
            if v >= 0.0 {
                word |= 1 << b;
            }
        }
        out[wi] = word;
    }
    let pad = pad_mask(values.len());
    if let Some(last) = out.last_mut() {
        *last |= pad;
    }
}

pub(crate) fn words_for(inner: usize) -> usize {
    inner.div_ceil(WORD_BITS)
}

fn inner_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn row_count(shape: &[usize]) -> usize {
    if shape.len() <= 1 {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    }
}

/// Mask of the low `n` bits (`n ≤ 64`).
#[inline]
pub(crate) fn low_mask(n: usize) -> u64 {
    if n >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Mask of the pad bits in the final word of a row of length `inner`.
fn pad_mask(inner: usize) -> u64 {
    let used = inner % WORD_BITS;
    if used == 0 {
        0
    } else {
        !low_mask(used)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule_and_signs() {
        let t = Tensor::new(vec![3], vec![0.3, -0.2, 0.0]).unwrap();
        let b = binarize(&t).unwrap();
        assert_eq!(b.unpack().data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn all_positive() {
        let t = Tensor::new(vec![2, 70], vec![0.5; 140]).unwrap();
        let b = binarize(&t).unwrap();
        assert!(b.unpack().data().iter().all(|&v| v == 1.0));
        assert_eq!(b.row_popcount(0), 70);
    }

    #[test]
    fn word_count() {
        let t = Tensor::zeros(vec![3, 5, 130]);
        let b = binarize(&t).unwrap();
        assert_eq!(b.words().len(), 15 * 3);
        let t = Tensor::zeros(vec![4, 64]);
        assert_eq!(binarize(&t).unwrap().words().len(), 4);
    }

    #[test]
    fn non_finite_names_index() {
        let t = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(binarize(&t).is_ok());
        let err = BitTensor::pack(vec![3], &[1.0, 2.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2 }));
    }

    #[test]
    fn from_words_normalizes_pad() {
        let b = BitTensor::from_words(vec![1, 3], vec![0b010]).unwrap();
        assert_eq!(b.words()[0], !0u64 << 3 | 0b010);
        assert_eq!(b.unpack().data(), &[-1.0, 1.0, -1.0]);
    }
}
