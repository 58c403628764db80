//! Threshold sweeps, accuracy/average-exit curves, per-class exit histograms,
//! per-exit latency benchmarks and per-exit accuracy tables.

use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMode, Frontend, MelFeature};
use crate::io::write_atomic;
use crate::net::Model;
use crate::par;
use crate::runtime::{infer_early_exit, infer_fixed_exit, DecisionRule, ExitRecord};
use crate::train::{Dataset, Split, Tier};

/// Default entropy thresholds.
pub const DEFAULT_DELTAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

/// One sample's outcome at one threshold, as persisted in JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(with = "lenient_f64")]
    pub delta: f64,
    /// Index into the dataset.
    pub sample: usize,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    #[serde(flatten)]
    pub record: ExitRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "lenient_f64")]
    pub delta: f64,
    pub accuracy: f64,
    pub mean_exit: f64,
    /// Fraction of samples leaving at each exit.
    pub exit_fractions: Vec<f64>,
    pub mean_macs: f64,
    pub mean_ms: f64,
}

impl SweepRow {
    /// Aggregate per-sample records of one threshold.
    pub fn from_records(delta: f64, records: &[SampleRecord], exits: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = records.len() as f64;
        let mut counts = vec![0usize; exits];
        let (mut hits, mut exit_sum, mut macs, mut ms) = (0usize, 0usize, 0u64, 0.0);
        for r in records {
            let e = r.record.exit_index;
            if e == 0 || e > exits {
                return Err(Error::ExitIndex { index: e, exits });
            }
            counts[e - 1] += 1;
            exit_sum += e;
            hits += (r.record.prediction == r.label) as usize;
            macs += r.record.macs;
            ms += r.record.wall_ms;
        }
        Ok(Self {
            delta,
            accuracy: hits as f64 / n,
            mean_exit: exit_sum as f64 / n,
            exit_fractions: counts.iter().map(|&c| c as f64 / n).collect(),
            mean_macs: macs as f64 / n,
            mean_ms: ms / n,
        })
    }
}

/// Outcome of an entropy-threshold sweep over the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model_id: String,
    pub dataset_id: String,
    pub rule_kind: String,
    /// Accuracy of the last exit evaluated unconditionally (the single-exit
    /// baseline).
    pub baseline_accuracy: f64,
    /// One row per threshold, strictly increasing in `delta`.
    pub rows: Vec<SweepRow>,
    /// Per-sample records, grouped by row.
    pub records: Vec<Vec<SampleRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub dataset_id: String,
    /// Record wall times; when false every `wall_ms` is 0 so outputs are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            dataset_id: "dataset".into(),
            timing: true,
        }
    }
}

/// Evaluated test split: features plus labels and tiers.
struct TestSet {
    idx: Vec<usize>,
    feats: Vec<MelFeature>,
}

fn test_set(data: &Dataset, frontend: &Frontend) -> Result<TestSet> {
    let idx = data.indices(Split::Test);
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feats = par::try_map_indexed(idx.len(), |k| data.featurize(idx[k], frontend, FeatureMode::Eval))?;
    Ok(TestSet { idx, feats })
}

/// Sorted, de-duplicated thresholds; each must be a valid entropy threshold.
pub fn normalize_deltas(deltas: &[f64]) -> Result<Vec<f64>> {
    for &d in deltas {
        DecisionRule::entropy(d)?;
    }
    let mut out = deltas.to_vec();
    out.sort_by(|a, b| a.partial_cmp(b).expect("validated"));
    out.dedup();
    if out.is_empty() {
        return Err(Error::Rule("no thresholds given".into()));
    }
    Ok(out)
}

/// Run adaptive inference on every test sample at every threshold.
pub fn sweep(
    model: &Model,
    data: &Dataset,
    frontend: &Frontend,
    deltas: &[f64],
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let deltas = normalize_deltas(deltas)?;
    let set = test_set(data, frontend)?;
    let exits = model.num_exits();
    let samples = data.samples();
    let baseline = par::try_map_indexed(set.feats.len(), |k| infer_fixed_exit(model, &set.feats[k], exits))?;
    let baseline_accuracy = baseline
        .iter()
        .zip(&set.idx)
        .filter(|(f, &i)| f.prediction == samples[i].label)
        .count() as f64
        / set.idx.len() as f64;
    let mut rows = Vec::with_capacity(deltas.len());
    let mut records = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let rule = DecisionRule::Entropy { delta };
        let recs = par::try_map_indexed(set.feats.len(), |k| {
            let mut record = infer_early_exit(model, &set.feats[k], &rule)?;
            if !opts.timing {
                record.wall_ms = 0.0;
            }
            let i = set.idx[k];
            Ok::<_, Error>(SampleRecord {
                delta,
                sample: i,
                label: samples[i].label,
                tier: samples[i].tier,
                record,
            })
        })?;
        rows.push(SweepRow::from_records(delta, &recs, exits)?);
        records.push(recs);
    }
    Ok(SweepResult {
        model_id: format!("{:016x}", model.fingerprint()),
        dataset_id: opts.dataset_id.clone(),
        rule_kind: "entropy".into(),
        baseline_accuracy,
        rows,
        records,
    })
}

impl SweepResult {
    pub fn exits(&self) -> usize {
        self.rows.first().map(|r| r.exit_fractions.len()).unwrap_or(0)
    }

    /// `delta,accuracy,mean_exit,frac_exit1..frac_exitE,mean_macs,mean_ms`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["delta".to_string(), "accuracy".into(), "mean_exit".into()];
        header.extend((1..=self.exits()).map(|e| format!("frac_exit{e}")));
        header.extend(["mean_macs".to_string(), "mean_ms".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![fmt(r.delta), fmt(r.accuracy), fmt(r.mean_exit)];
            rec.extend(r.exit_fractions.iter().map(|&f| fmt(f)));
            rec.extend([fmt(r.mean_macs), fmt(r.mean_ms)]);
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// One JSON object per sample and threshold.
    pub fn to_jsonl(&self) -> Result<String> {
        records_jsonl(self.records.iter().flatten())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Mean exit index per tier at threshold `delta` (tiered samples only).
    pub fn mean_exit_by_tier(&self, delta: f64) -> Vec<(Tier, f64)> {
        let Some(pos) = self.rows.iter().position(|r| r.delta == delta) else {
            return Vec::new();
        };
        [Tier::Easy, Tier::Hard]
            .into_iter()
            .filter_map(|t| {
                let e: Vec<usize> = self.records[pos]
                    .iter()
                    .filter(|r| r.tier == Some(t))
                    .map(|r| r.record.exit_index)
                    .collect();
                (!e.is_empty()).then(|| (t, e.iter().sum::<usize>() as f64 / e.len() as f64))
            })
            .collect()
    }
}

/// One JSON object per line.
pub fn records_jsonl<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Read records written by [`SweepResult::to_jsonl`].
pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Group persisted records by threshold and re-aggregate them.
pub fn rows_from_records(records: &[SampleRecord], exits: usize) -> Result<Vec<SweepRow>> {
    let mut deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    deltas.sort_by(|a, b| a.total_cmp(b));
    deltas.dedup();
    deltas
        .into_iter()
        .map(|d| {
            let group: Vec<SampleRecord> = records.iter().filter(|r| r.delta == d).cloned().collect();
            SweepRow::from_records(d, &group, exits)
        })
        .collect()
}

/// A point of the accuracy versus average-exit trade-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub series: String,
    #[serde(with = "lenient_f64")]
    pub delta: f64,
    pub mean_exit: f64,
    pub accuracy: f64,
    /// Single-exit baseline of the series (constant line).
    pub baseline_accuracy: f64,
}

/// Flatten sweeps into long-format curve points, one per threshold.
pub fn accuracy_vs_avg_exit(sweeps: &[SweepResult]) -> Vec<CurvePoint> {
    sweeps
        .iter()
        .flat_map(|s| {
            s.rows.iter().map(move |r| CurvePoint {
                series: s.model_id.clone(),
                delta: r.delta,
                mean_exit: r.mean_exit,
                accuracy: r.accuracy,
                baseline_accuracy: s.baseline_accuracy,
            })
        })
        .collect()
}

/// `series,delta,mean_exit,accuracy,baseline_accuracy`.
pub fn curve_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "delta", "mean_exit", "accuracy", "baseline_accuracy"])?;
    for p in points {
        w.write_record([
            p.series.clone(),
            fmt(p.delta),
            fmt(p.mean_exit),
            fmt(p.accuracy),
            fmt(p.baseline_accuracy),
        ])?;
    }
    finish_csv(w)
}

/// Class × exit histogram at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassExitStats {
    pub delta: f64,
    pub class_names: Vec<String>,
    /// Test samples per class.
    pub counts: Vec<usize>,
    /// Exit fractions per class; `None` for classes absent from the test split.
    pub rows: Vec<Option<Vec<f64>>>,
}

impl PerClassExitStats {
    /// Expected exit index per class.
    pub fn mean_exit(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                r.as_ref()
                    .map(|f| f.iter().enumerate().map(|(e, p)| (e + 1) as f64 * p).sum())
            })
            .collect()
    }

    /// `class,count,exit1..exitE`; absent classes have empty fraction cells.
    pub fn to_csv(&self) -> Result<String> {
        let exits = self.rows.iter().flatten().map(|r| r.len()).next().unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_string(), "count".into()];
        header.extend((1..=exits).map(|e| format!("exit{e}")));
        w.write_record(&header)?;
        for (c, row) in self.rows.iter().enumerate() {
            let mut rec = vec![self.class_names[c].clone(), self.counts[c].to_string()];
            match row {
                Some(f) => rec.extend(f.iter().map(|&v| fmt(v))),
                None => rec.extend(std::iter::repeat_n(String::new(), exits)),
            }
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

pub fn per_class_exits(model: &Model, data: &Dataset, frontend: &Frontend, delta: f64) -> Result<PerClassExitStats> {
    let rule = DecisionRule::entropy(delta)?;
    let set = test_set(data, frontend)?;
    let exits = model.num_exits();
    let recs = par::try_map_indexed(set.feats.len(), |k| infer_early_exit(model, &set.feats[k], &rule))?;
    let n = data.n_classes();
    let mut hist = vec![vec![0usize; exits]; n];
    let mut counts = vec![0usize; n];
    for (r, &i) in recs.iter().zip(&set.idx) {
        let c = data.samples()[i].label;
        hist[c][r.exit_index - 1] += 1;
        counts[c] += 1;
    }
    let rows = hist
        .into_iter()
        .zip(&counts)
        .map(|(h, &cnt)| (cnt > 0).then(|| h.iter().map(|&v| v as f64 / cnt as f64).collect()))
        .collect();
    Ok(PerClassExitStats {
        delta,
        class_names: data.class_names().to_vec(),
        counts,
        rows,
    })
}

/// Latency of one exit prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub exit_index: usize,
    pub macs: u64,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub repeats: usize,
}

pub const BENCH_WARMUP: usize = 5;

/// Time front-end plus `forward_prefix(i)` for every exit on the calling
/// thread. Rounds are interleaved across exits so slow drift affects all
/// exits alike; the first [`BENCH_WARMUP`] rounds are discarded.
pub fn bench_exits(model: &Model, frontend: &Frontend, pcm: &[f32], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let exits = model.num_exits();
    let mut times = vec![Vec::with_capacity(repeats); exits];
    let mut macs = vec![0u64; exits];
    for round in 0..BENCH_WARMUP + repeats {
        for e in 1..=exits {
            let start = Instant::now();
            let feat = frontend.featurize(pcm, FeatureMode::Eval)?;
            let (out, state) = model.forward_prefix(&feat, e)?;
            let dt = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&out);
            macs[e - 1] = state.macs();
            if round >= BENCH_WARMUP {
                times[e - 1].push(dt);
            }
        }
    }
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(e, mut t)| {
            t.sort_by(|a, b| a.total_cmp(b));
            BenchRow {
                exit_index: e + 1,
                macs: macs[e],
                median_ms: quantile(&t, 0.5),
                iqr_ms: quantile(&t, 0.75) - quantile(&t, 0.25),
                repeats,
            }
        })
        .collect())
}

/// `exit,macs,median_ms,iqr_ms,repeats`.
pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["exit", "macs", "median_ms", "iqr_ms", "repeats"])?;
    for r in rows {
        w.write_record([
            r.exit_index.to_string(),
            r.macs.to_string(),
            fmt(r.median_ms),
            fmt(r.iqr_ms),
            r.repeats.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-exit test accuracy of a multi-exit model and, optionally, matching
/// single-exit models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTable {
    /// Accuracy of each exit of the multi-exit model, evaluated unconditionally.
    pub multi_exit: Vec<f64>,
    /// Accuracy of the single-exit model supplied for each exit.
    pub single_exit: Vec<Option<f64>>,
}

impl GeneralizationTable {
    /// `exit,multi_exit,single_exit`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["exit", "multi_exit", "single_exit"])?;
        for (e, m) in self.multi_exit.iter().enumerate() {
            let s = self.single_exit[e].map(fmt).unwrap_or_default();
            w.write_record([(e + 1).to_string(), fmt(*m), s])?;
        }
        finish_csv(w)
    }
}

/// `single_exit[i]`, when present, is evaluated at exit `i + 1`; it is
/// expected to have been trained with all loss weight on that exit.
pub fn exit_generalization_table(
    model: &Model,
    data: &Dataset,
    frontend: &Frontend,
    single_exit: &[Option<&Model>],
) -> Result<GeneralizationTable> {
    let exits = model.num_exits();
    if !single_exit.is_empty() && single_exit.len() != exits {
        return Err(Error::LengthMismatch {
            expected: exits,
            found: single_exit.len(),
        });
    }
    let set = test_set(data, frontend)?;
    let labels: Vec<usize> = set.idx.iter().map(|&i| data.samples()[i].label).collect();
    let accuracy = |m: &Model, e: usize| -> Result<f64> {
        let preds = par::try_map_indexed(set.feats.len(), |k| infer_fixed_exit(m, &set.feats[k], e))?;
        Ok(preds.iter().zip(&labels).filter(|(p, l)| p.prediction == **l).count() as f64 / labels.len() as f64)
    };
    let stacks = par::try_map_indexed(set.feats.len(), |k| model.forward_all_exits(&set.feats[k]))?;
    let multi_exit = (0..exits)
        .map(|e| {
            stacks
                .iter()
                .zip(&labels)
                .filter(|(s, l)| crate::train::argmax(&s.exits[e].probs) == **l)
                .count() as f64
                / labels.len() as f64
        })
        .collect();
    let mut single = vec![None; exits];
    for (e, m) in single_exit.iter().enumerate() {
        if let Some(m) = m {
            single[e] = Some(accuracy(m, e + 1)?);
        }
    }
    Ok(GeneralizationTable {
        multi_exit,
        single_exit: single,
    })
}

/// JSON has no infinity; non-finite thresholds travel as `"inf"` strings.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
