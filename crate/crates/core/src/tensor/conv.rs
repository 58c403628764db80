use serde::{Deserialize, Serialize};

use super::bits::low_mask;
use super::{BitTensor, Tensor, WORD_BITS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; the deficit is split with the smaller
    /// half before the input.
    Same,
    /// No padding; output is `(in - k) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        kernel: usize,
        stride: usize,
        padding: Padding,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let g = Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::Geometry("kernel must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial dims for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((self.output_len(h)?, self.output_len(w)?))
    }

    fn output_len(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::Geometry("empty spatial dimension".into()));
        }
        match self.padding {
            Padding::Same => Ok(n.div_ceil(self.stride)),
            Padding::Valid => {
                if n < self.kernel {
                    Err(Error::Geometry(format!(
                        "input extent {n} smaller than kernel {} in valid mode",
                        self.kernel
                    )))
                } else {
                    Ok((n - self.kernel) / self.stride + 1)
                }
            }
        }
    }

    /// Padding inserted before the first row/column for an `h × w` input.
    pub fn pad_before(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (self.same_pad(h), self.same_pad(w)),
        }
    }

    fn same_pad(&self, n: usize) -> usize {
        let out = n.div_ceil(self.stride);
        let total = ((out - 1) * self.stride + self.kernel).saturating_sub(n);
        total / 2
    }

    /// Multiply-accumulate count for one `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_dims(h, w)?;
        Ok((oh * ow * self.kernel * self.kernel * self.in_channels * self.out_channels) as u64)
    }
}

/// Σ aᵢ·bᵢ over the first `n` ±1 entries of two packed rows:
/// `2·popcount(XNOR(a, b)) − n`, with bits past `n` masked off.
#[inline]
pub fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i32 {
    debug_assert!(a.len() * WORD_BITS >= n && b.len() * WORD_BITS >= n);
    let full = n / WORD_BITS;
    let mut pop = 0u32;
    for i in 0..full {
        pop += (!(a[i] ^ b[i])).count_ones();
    }
    let rem = n % WORD_BITS;
    if rem != 0 {
        pop += (!(a[full] ^ b[full]) & low_mask(rem)).count_ones();
    }
    2 * pop as i32 - n as i32
}

/// Dot product of two packed ±1 vectors of equal length.
pub fn xnor_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.rows() != 1 || b.rows() != 1 {
        return Err(Error::Shape("xnor_dot expects vectors".into()));
    }
    Ok(xnor_dot_words(a.words(), b.words(), a.len()) as i64)
}

/// Binary 2-D convolution of `x: [h, w, c]` with `weights: [o, k, k, c]`.
///
/// Out-of-bounds taps in `Same` mode read −1. Every output is an exact integer.
pub fn binary_conv2d(x: &BitTensor, weights: &BitTensor, g: &ConvGeometry) -> Result<Tensor> {
    g.validate()?;
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::Shape(format!("conv input must be [h, w, c], got {xs:?}")));
    }
    let (h, w, c) = (xs[0], xs[1], xs[2]);
    let expected_w = [g.out_channels, g.kernel, g.kernel, g.in_channels];
    if weights.shape() != expected_w {
        return Err(Error::Shape(format!(
            "conv weights must be {expected_w:?}, got {:?}",
            weights.shape()
        )));
    }
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, geometry expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_dims(h, w)?;
    let mut out = vec![0f32; oh * ow * g.out_channels];
    binary_conv2d_raw(x, weights, g, h, w, oh, ow, &mut out);
    Tensor::new(vec![oh, ow, g.out_channels], out)
}

/// Unchecked kernel body shared with the inference path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_conv2d_raw(
    x: &BitTensor,
    weights: &BitTensor,
    g: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let k = g.kernel;
    let c = g.in_channels;
    let o_n = g.out_channels;
    let (pt, pl) = g.pad_before(h, w);
    // Contribution of one fully padded (all −1) tap: −Σ w.
    let pad_contrib: Vec<i32> = (0..o_n * k * k)
        .map(|r| -(2 * weights.row_popcount(r) as i32 - c as i32))
        .collect();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * o_n;
            for o in 0..o_n {
                let mut acc = 0i32;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - pt as isize;
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - pl as isize;
                        let wr = (o * k + ky) * k + kx;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            acc += pad_contrib[wr];
                        } else {
                            let xr = iy as usize * w + ix as usize;
                            acc += xnor_dot_words(x.row(xr), weights.row(wr), c);
                        }
                    }
                }
                out[base + o] = acc as f32;
            }
        }
    }
}

/// Binary dense layer: `x: [n]` against `weights: [u, n]`, returning `[u]`.
pub fn binary_dense(x: &BitTensor, weights: &BitTensor) -> Result<Tensor> {
    if x.rows() != 1 {
        return Err(Error::Shape(format!(
            "dense input must be a vector, got {:?}",
            x.shape()
        )));
    }
    let ws = weights.shape();
    if ws.len() != 2 {
        return Err(Error::Shape(format!("dense weights must be [u, n], got {ws:?}")));
    }
    let n = x.len();
    if ws[1] != n {
        return Err(Error::LengthMismatch {
            expected: ws[1],
            found: n,
        });
    }
    let out = (0..ws[0])
        .map(|u| xnor_dot_words(x.words(), weights.row(u), n) as f32)
        .collect();
    Tensor::new(vec![ws[0]], out)
}
