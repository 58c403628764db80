//! Log-compressed Mel-filterbank front-end.
//!
//! 16 kHz mono PCM is cut into 25 ms periodic-Hann windows every 10 ms,
//! zero-padded to a 512-point FFT, projected onto 64 HTK-scale triangular
//! filters spanning 60–7800 Hz and compressed with `ln(x + 1e-6)`. One second of
//! audio yields 98 frames × 64 bins.

mod wav;

pub use wav::{read_wav, write_wav};

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            fmin: 60.0,
            fmax: 7800.0,
            fft_size: 512,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for `samples` input samples (0 if shorter than a window).
    pub fn frame_count(&self, samples: usize) -> usize {
        let win = self.window_len();
        if samples < win {
            0
        } else {
            (samples - win) / self.hop_len() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return bad("window and hop must each span at least one sample".into());
        }
        if self.window_len() > self.fft_size {
            return bad(format!(
                "window of {} samples exceeds fft_size {}",
                self.window_len(),
                self.fft_size
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return bad(format!("need 0 <= fmin < fmax, got {} / {}", self.fmin, self.fmax));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return bad(format!("fmax {} above Nyquist", self.fmax));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be a positive finite constant".into());
        }
        Ok(())
    }
}

/// Windowed analysis frames, `n_frames × frame_len` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub n_frames: usize,
    pub frame_len: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len..(i + 1) * self.frame_len]
    }
}

/// `|DFT|²` per frame, `n_frames × n_bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f32>,
}

impl PowerSpectrum {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_bins..(i + 1) * self.n_bins]
    }
}

/// Log-Mel feature matrix, `frames × bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
    pub duration_ms: f64,
}

impl MelFeature {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if frames * bins != data.len() {
            return Err(Error::LengthMismatch {
                expected: frames * bins,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            frames,
            bins,
            data,
            duration_ms: 0.0,
        })
    }

    pub fn at(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * self.bins + bin]
    }
}

/// How `featurize` selects the analysed span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Whole clip, no splitting.
    Eval,
    /// A random one-second crop drawn from `seed`; shorter clips are
    /// zero-padded to one second.
    Train { seed: u64 },
}

/// Precomputed window, FFT plan and filterbank for one configuration.
#[derive(Clone)]
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    filterbank: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let window = hann_window(cfg.window_len());
        let filterbank = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Filter weights, `n_mels × n_bins` row-major.
    pub fn filterbank(&self) -> &[f32] {
        &self.filterbank
    }

    pub fn frame_and_window(&self, pcm: &[f32]) -> Result<Frames> {
        let win = self.cfg.window_len();
        let hop = self.cfg.hop_len();
        if pcm.len() < win {
            return Err(Error::InputTooShort {
                len: pcm.len(),
                window: win,
            });
        }
        let n_frames = self.cfg.frame_count(pcm.len());
        let mut data = Vec::with_capacity(n_frames * win);
        for f in 0..n_frames {
            let start = f * hop;
            data.extend(
                pcm[start..start + win]
                    .iter()
                    .zip(&self.window)
                    .map(|(s, w)| s * w),
            );
        }
        Ok(Frames {
            n_frames,
            frame_len: win,
            data,
        })
    }

    pub fn power_spectrum(&self, frames: &Frames) -> Result<PowerSpectrum> {
        let n = self.cfg.fft_size;
        if frames.frame_len > n {
            return Err(Error::Shape(format!(
                "frame length {} exceeds fft_size {n}",
                frames.frame_len
            )));
        }
        let n_bins = self.cfg.n_bins();
        let mut data = Vec::with_capacity(frames.n_frames * n_bins);
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames.n_frames {
            for (slot, &s) in buf.iter_mut().zip(frames.frame(f)) {
                *slot = Complex32::new(s, 0.0);
            }
            for slot in buf[frames.frame_len..].iter_mut() {
                *slot = Complex32::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..n_bins].iter().map(|z| z.norm_sqr()));
        }
        Ok(PowerSpectrum {
            n_frames: frames.n_frames,
            n_bins,
            data,
        })
    }

    pub fn mel_project_log(&self, spec: &PowerSpectrum) -> Result<MelFeature> {
        let n_bins = self.cfg.n_bins();
        if spec.n_bins != n_bins {
            return Err(Error::Shape(format!(
                "spectrum has {} bins, filterbank expects {n_bins}",
                spec.n_bins
            )));
        }
        let n_mels = self.cfg.n_mels;
        let floor = self.cfg.log_floor;
        let mut data = Vec::with_capacity(spec.n_frames * n_mels);
        for f in 0..spec.n_frames {
            let row = spec.row(f);
            for m in 0..n_mels {
                let filt = &self.filterbank[m * n_bins..(m + 1) * n_bins];
                let e: f64 = filt
                    .iter()
                    .zip(row)
                    .map(|(&w, &p)| w as f64 * p as f64)
                    .sum();
                data.push((e + floor).ln() as f32);
            }
        }
        let mut feat = MelFeature::new(spec.n_frames, n_mels, data)?;
        feat.duration_ms = spec.n_frames as f64 * self.cfg.hop_ms;
        Ok(feat)
    }

    pub fn featurize(&self, pcm: &[f32], mode: FeatureMode) -> Result<MelFeature> {
        let sr = self.cfg.sample_rate as usize;
        let cropped;
        let span: &[f32] = match mode {
            FeatureMode::Eval => pcm,
            FeatureMode::Train { seed } => {
                if pcm.len() <= sr {
                    let mut padded = pcm.to_vec();
                    padded.resize(sr, 0.0);
                    cropped = padded;
                    &cropped
                } else {
                    let offset = crop_offset(pcm.len(), sr, seed);
                    &pcm[offset..offset + sr]
                }
            }
        };
        let frames = self.frame_and_window(span)?;
        let spec = self.power_spectrum(&frames)?;
        let mut feat = self.mel_project_log(&spec)?;
        feat.duration_ms = span.len() as f64 * 1000.0 / sr as f64;
        Ok(feat)
    }

    /// Read a 16-bit mono WAV and featurize it; the file's rate must match.
    pub fn featurize_wav(&self, path: &Path, mode: FeatureMode) -> Result<MelFeature> {
        let (pcm, rate) = read_wav(path)?;
        if rate != self.cfg.sample_rate {
            return Err(Error::SampleRate {
                expected: self.cfg.sample_rate,
                found: rate,
            });
        }
        self.featurize(&pcm, mode)
    }
}

/// Offset of the training crop of `crop` samples within a clip of `len`.
pub fn crop_offset(len: usize, crop: usize, seed: u64) -> usize {
    if len <= crop {
        return 0;
    }
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..=len - crop)
}

pub fn frame_and_window(pcm: &[f32], cfg: &FrontendConfig) -> Result<Frames> {
    Frontend::new(cfg.clone())?.frame_and_window(pcm)
}

pub fn power_spectrum(frames: &Frames, cfg: &FrontendConfig) -> Result<PowerSpectrum> {
    Frontend::new(cfg.clone())?.power_spectrum(frames)
}

pub fn mel_project_log(spec: &PowerSpectrum, cfg: &FrontendConfig) -> Result<MelFeature> {
    Frontend::new(cfg.clone())?.mel_project_log(spec)
}

pub fn featurize(pcm: &[f32], cfg: &FrontendConfig, mode: FeatureMode) -> Result<MelFeature> {
    Frontend::new(cfg.clone())?.featurize(pcm, mode)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge and center frequencies of the filterbank: `n_mels + 2` points evenly
/// spaced on the mel scale from `fmin` to `fmax`.
pub fn mel_points_hz(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Center frequency of every filter.
pub fn mel_centers_hz(cfg: &FrontendConfig) -> Vec<f64> {
    let pts = mel_points_hz(cfg);
    pts[1..pts.len() - 1].to_vec()
}

/// Unit-peak triangular filters evaluated at each FFT bin frequency.
fn mel_filterbank(cfg: &FrontendConfig) -> Vec<f32> {
    let n_bins = cfg.n_bins();
    let pts = mel_points_hz(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = vec![0f32; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            let w = rise.min(fall);
            if w > 0.0 {
                fb[m * n_bins + k] = w as f32;
            }
        }
    }
    fb
}

/// Periodic Hann window.
fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}
