//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use eebnn::frontend::{Frontend, FrontendConfig, MelFeature};
use eebnn::net::{ArchSpec, Family, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn random_pm1(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Direct convolution of `x: [h, w, c]` (±1 floats) with `w: [o, k, k, c]`.
/// Out-of-range taps read `pad_value`. Padding follows the usual "same"
/// split: total = max((out-1)*s + k - n, 0), smaller half first.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f32],
    (h, w, c): (usize, usize, usize),
    wt: &[f32],
    o: usize,
    k: usize,
    stride: usize,
    same: bool,
    pad_value: f64,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let th = ((oh - 1) * stride + k).saturating_sub(h);
        let tw = ((ow - 1) * stride + k).saturating_sub(w);
        (oh, ow, th / 2, tw / 2)
    } else {
        ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; oh * ow * o];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..o {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as i64 - pt as i64;
                        let ix = (ox * stride + kx) as i64 - pl as i64;
                        for ci in 0..c {
                            let wv = wt[((oc * k + ky) * k + kx) * c + ci] as f64;
                            let xv = if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                pad_value
                            } else {
                                x[(iy as usize * w + ix as usize) * c + ci] as f64
                            };
                            acc += wv * xv;
                        }
                    }
                }
                out[(oy * ow + ox) * o + oc] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// `w: [u, n]` times `x: [n]`.
pub fn naive_matvec(x: &[f32], wt: &[f32], u: usize) -> Vec<f64> {
    let n = x.len();
    (0..u)
        .map(|r| (0..n).map(|i| wt[r * n + i] as f64 * x[i] as f64).sum())
        .collect()
}

pub fn toy_model(classes: usize, seed: u64) -> Model {
    Model::build(&ArchSpec::toy(Family::QuickNet, classes).unwrap(), seed).unwrap()
}

/// Small spec with a reduced input so forward passes stay cheap.
pub fn small_spec(family: Family, classes: usize) -> ArchSpec {
    ArchSpec::with_input(family, vec![8, 16], vec![3, 2], classes, 20, 16).unwrap()
}

pub fn random_feature(frames: usize, bins: usize, seed: u64) -> MelFeature {
    let mut r = rng(seed);
    let data = (0..frames * bins).map(|_| r.gen_range(-3.0f32..3.0)).collect();
    MelFeature::new(frames, bins, data).unwrap()
}

pub fn default_frontend() -> Frontend {
    Frontend::new(FrontendConfig::default()).unwrap()
}
