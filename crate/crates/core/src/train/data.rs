use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{write_wav, FeatureMode, Frontend, MelFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

/// Difficulty tier of a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Hard,
}

impl Tier {
    pub fn name(&self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Hard => "hard",
        }
    }
}

/// Where a sample's audio comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Pcm(Arc<Vec<f32>>),
    Wav(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source: Source,
    pub label: usize,
    pub split: Split,
    pub tier: Option<Tier>,
}

/// Labeled audio clips with a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::Label {
                    label: s.label,
                    classes: class_names.len(),
                });
            }
        }
        let mut seen = BTreeMap::new();
        for s in &samples {
            if let Source::Wav(p) = &s.source {
                if let Some(prev) = seen.insert(p.clone(), s.split) {
                    if prev != s.split {
                        return Err(Error::Dataset(format!(
                            "{} appears in both splits",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            samples,
            class_names,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn featurize(&self, index: usize, frontend: &Frontend, mode: FeatureMode) -> Result<MelFeature> {
        match &self.samples[index].source {
            Source::Pcm(pcm) => frontend.featurize(pcm, mode),
            Source::Wav(path) => frontend.featurize_wav(path, mode),
        }
    }

    /// Load a `path,label,split` manifest; relative paths resolve against
    /// the manifest's directory. Integer labels are used as class indices,
    /// anything else is mapped to indices in sorted name order.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Dataset(format!("{other:?}")),
        })?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Dataset(format!("manifest lacks a {name:?} column")))
        };
        let (pc, lc, sc) = (col("path")?, col("label")?, col("split")?);
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
            rows.push((field(pc).to_string(), field(lc).to_string(), field(sc).parse::<Split>()?));
        }
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let numeric: Option<Vec<usize>> = rows.iter().map(|r| r.1.parse::<usize>().ok()).collect();
        let (labels, class_names) = match numeric {
            Some(ids) => {
                let n = ids.iter().max().unwrap() + 1;
                (ids, (0..n).map(|i| i.to_string()).collect::<Vec<_>>())
            }
            None => {
                let names: BTreeSet<&str> = rows.iter().map(|r| r.1.as_str()).collect();
                let names: Vec<String> = names.into_iter().map(String::from).collect();
                let ids = rows
                    .iter()
                    .map(|r| names.iter().position(|n| *n == r.1).unwrap())
                    .collect();
                (ids, names)
            }
        };
        let samples = rows
            .into_iter()
            .zip(labels)
            .map(|((p, _, split), label)| {
                let p = PathBuf::from(p);
                let full = if p.is_absolute() { p } else { base.join(p) };
                Sample {
                    tier: tier_from_name(&full),
                    source: Source::Wav(full),
                    label,
                    split,
                }
            })
            .collect();
        Self::new(samples, class_names)
    }

    /// Write every sample as a WAV under `dir` plus `dir/manifest.csv`.
    /// Returns the manifest path.
    pub fn export(&self, dir: &Path, sample_rate: u32) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "split"])?;
        for (i, s) in self.samples.iter().enumerate() {
            let sub = dir.join(s.split.name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::file(&sub, e))?;
            let tier = s.tier.map(|t| format!("_{}", t.name())).unwrap_or_default();
            let rel = format!("{}/c{}_{i:05}{tier}.wav", s.split.name(), s.label);
            let pcm = match &s.source {
                Source::Pcm(pcm) => pcm.clone(),
                Source::Wav(p) => {
                    let (pcm, rate) = crate::frontend::read_wav(p)?;
                    if rate != sample_rate {
                        return Err(Error::SampleRate {
                            expected: sample_rate,
                            found: rate,
                        });
                    }
                    Arc::new(pcm)
                }
            };
            write_wav(&dir.join(&rel), &pcm, sample_rate)?;
            w.write_record([rel, s.label.to_string(), s.split.name().to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        crate::io::write_atomic(&manifest, &bytes)?;
        Ok(manifest)
    }
}

fn tier_from_name(path: &Path) -> Option<Tier> {
    let stem = path.file_stem()?.to_str()?;
    if stem.ends_with("_easy") {
        Some(Tier::Easy)
    } else if stem.ends_with("_hard") {
        Some(Tier::Hard)
    } else {
        None
    }
}

/// Difficulty composition of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyMix {
    EasyOnly,
    HardOnly,
    /// Alternating easy/hard within every class and split.
    Mixed,
}

impl std::str::FromStr for DifficultyMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "easy" | "easyonly" => Ok(DifficultyMix::EasyOnly),
            "hard" | "hardonly" => Ok(DifficultyMix::HardOnly),
            "mixed" => Ok(DifficultyMix::Mixed),
            other => Err(Error::Config(format!("unknown difficulty mix {other:?}"))),
        }
    }
}

/// Sample rate of synthetic clips.
pub const SYNTH_RATE: u32 = 16_000;
/// Signal-to-noise ratio (dB) of easy-tier clips.
pub const EASY_SNR_DB: f64 = 20.0;
/// Signal-to-noise ratio (dB) of hard-tier clips.
pub const HARD_SNR_DB: f64 = -6.0;
const F_LOW: f64 = 300.0;
const F_HIGH: f64 = 3500.0;

/// Signature centre frequency of class `c` out of `n`: log-spaced between
/// 300 Hz and 3.5 kHz.
pub fn class_frequency(c: usize, n: usize) -> f64 {
    if n < 2 {
        return F_LOW;
    }
    F_LOW * (F_HIGH / F_LOW).powf(c as f64 / (n - 1) as f64)
}

/// One-second 16 kHz clips, `per_class` per class: class `c` carries a tone
/// (`c % 3 == 0`), upward chirp (`1`) or amplitude-modulated tone (`2`)
/// around [`class_frequency`], with random onset, length, level and jitter,
/// in white noise at the tier's SNR. The first 80% of each class (rounded
/// down) is the train split. Deterministic in `seed`.
pub fn synth_dataset(n_classes: usize, per_class: usize, mix: DifficultyMix, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {n_classes}")));
    }
    let n_train = per_class * 4 / 5;
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        for j in 0..per_class {
            let tier = match mix {
                DifficultyMix::EasyOnly => Tier::Easy,
                DifficultyMix::HardOnly => Tier::Hard,
                DifficultyMix::Mixed => {
                    // Alternate within each split so both halves stay balanced.
                    let k = if j < n_train { j } else { j - n_train };
                    if k % 2 == 0 {
                        Tier::Easy
                    } else {
                        Tier::Hard
                    }
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64, j as u64));
            let pcm = synth_clip(c, n_classes, tier, &mut rng);
            samples.push(Sample {
                source: Source::Pcm(Arc::new(pcm)),
                label: c,
                split: if j < n_train { Split::Train } else { Split::Test },
                tier: Some(tier),
            });
        }
    }
    let names = (0..n_classes).map(|c| format!("class{c}")).collect();
    Dataset::new(samples, names)
}

fn synth_clip(class: usize, n_classes: usize, tier: Tier, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = SYNTH_RATE as f64;
    let n = SYNTH_RATE as usize;
    let f0 = class_frequency(class, n_classes) * rng.gen_range(0.97..1.03);
    let dur = rng.gen_range(0.5..0.8);
    let onset = rng.gen_range(0.0..(1.0 - dur));
    let amp = rng.gen_range(0.2..0.6);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let start = (onset * sr) as usize;
    let len = (dur * sr) as usize;
    let mut sig = vec![0f64; n];
    let ramp = (0.01 * sr) as usize;
    for (i, s) in sig[start..start + len].iter_mut().enumerate() {
        let t = i as f64 / sr;
        let env = ((i.min(len - 1 - i)) as f64 / ramp as f64).min(1.0);
        let v = match class % 3 {
            0 => (2.0 * PI * f0 * t + phase).sin(),
            1 => {
                // Linear sweep from f0 to 1.25·f0 over the event.
                let k = 0.25 * f0 / dur;
                (2.0 * PI * (f0 * t + 0.5 * k * t * t) + phase).sin()
            }
            _ => (1.0 + 0.8 * (2.0 * PI * 8.0 * t).sin()) / 1.8 * (2.0 * PI * f0 * t + phase).sin(),
        };
        *s = amp * env * v;
    }
    let power = sig.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let snr = match tier {
        Tier::Easy => EASY_SNR_DB,
        Tier::Hard => HARD_SNR_DB,
    };
    let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    sig.iter()
        .map(|&v| (v + noise.sample(rng)).clamp(-1.0, 1.0) as f32)
        .collect()
}

/// SplitMix64-style combination of a seed with two indices.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_split() {
        let d = synth_dataset(6, 10, DifficultyMix::Mixed, 1).unwrap();
        assert_eq!(d.len(), 60);
        assert_eq!(d.indices(Split::Train).len(), 48);
        assert_eq!(d.indices(Split::Test).len(), 12);
    }

    #[test]
    fn class_frequencies_span_range() {
        assert!((class_frequency(0, 6) - 300.0).abs() < 1e-9);
        assert!((class_frequency(5, 6) - 3500.0).abs() < 1e-9);
    }
}
