//! `eebnn`: train, evaluate and benchmark early-exit binary audio classifiers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use eebnn::eval::{self, SweepOptions};
use eebnn::frontend::{read_wav, FeatureMode, Frontend, FrontendConfig};
use eebnn::io::{self, RunConfig, TrainingMeta};
use eebnn::net::{Family, Model};
use eebnn::runtime::{infer_early_exit, infer_fixed_exit, DecisionRule};
use eebnn::train::{self, synth_dataset, Dataset, DifficultyMix, OptimizerKind, Split, SYNTH_RATE};
use eebnn::{Error, Result};

#[derive(Parser)]
#[command(name = "eebnn", version, about = "Early-exit binary neural networks for audio classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-exit model and save it with its metric history.
    Train(TrainArgs),
    /// Evaluate a model on the test split under one decision rule.
    Eval(EvalArgs),
    /// Sweep entropy thresholds over the test split.
    Sweep(SweepArgs),
    /// Per-class exit histogram at one threshold.
    PerClass(PerClassArgs),
    /// Per-exit latency of the front-end plus network prefix.
    Bench(BenchArgs),
    /// Dump the log-mel features of a WAV file.
    Features(FeaturesArgs),
    /// Generate a synthetic dataset as WAV files plus a manifest.
    SynthData(SynthArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["manifest", "synth"])))]
struct DataArgs {
    /// Dataset manifest (`path,label,split`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Use the synthetic generator instead of a manifest.
    #[arg(long)]
    synth: bool,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic classes.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Synthetic clips per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Synthetic difficulty: easy, hard or mixed.
    #[arg(long, default_value = "mixed", value_parser = parse_mix)]
    mix: DifficultyMix,
    /// Synthetic generator seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, String)> {
        match &self.manifest {
            Some(p) => Ok((Dataset::from_manifest(p)?, p.display().to_string())),
            None => {
                let g = &self.gen;
                let id = format!(
                    "synth(classes={}, per_class={}, mix={:?}, seed={})",
                    g.classes, g.per_class, g.mix, g.data_seed
                );
                Ok((synth_dataset(g.classes, g.per_class, g.mix, g.data_seed)?, id))
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// quicknet, birealnet, binarydensenet or meliusnet.
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Stage widths, e.g. 32,64,128.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Blocks per stage, e.g. 2,2,2.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Channels added per dense block.
    #[arg(long)]
    growth: Option<usize>,
    /// Block index after each exit, e.g. 1,2,3,4,6.
    #[arg(long, value_delimiter = ',')]
    exits: Option<Vec<usize>>,
    /// bop (binary weights) + adam (reals), or adam everywhere.
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds initialization, shuffling and crops.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-exit loss weights, e.g. 1,1,1,1,1.
    #[arg(long, value_delimiter = ',')]
    exit_weights: Option<Vec<f64>>,
    /// Bop momentum rate.
    #[arg(long)]
    bop_gamma: Option<f64>,
    /// Bop flip threshold.
    #[arg(long)]
    bop_tau: Option<f64>,
    /// Print nothing per epoch.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// TOML run configuration; defaults to the one stored in the model.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("rule").args(["delta", "fixed_exit", "confidence"])))]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Entropy threshold (nats); exit when entropy < delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Always leave at this exit.
    #[arg(long)]
    fixed_exit: Option<usize>,
    /// Max-softmax threshold; exit when confidence >= this.
    #[arg(long)]
    confidence: Option<f64>,
    /// Softmax temperature for --confidence.
    #[arg(long, default_value_t = 1.0, requires = "confidence")]
    temperature: f64,
    /// Directory for per-sample records and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write zero wall times so outputs are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Entropy thresholds, e.g. 0.1,0.25,0.5,0.75,1.0.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Write zero wall times so outputs are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PerClassArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input clip; a synthetic one-second clip when absent.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    wav: PathBuf,
    /// TOML run configuration (only `[frontend]` is used).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination (frames × bins); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mix(s: &str) -> std::result::Result<DifficultyMix, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::PerClass(a) => cmd_per_class(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Features(a) => cmd_features(a),
        Command::SynthData(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for invalid arguments, 2 for data and model problems.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Rule(_) | Error::Arch(_) | Error::ExitIndex { .. } => 1,
        _ => 2,
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    cfg.write(&path)?;
    eprintln!("resolved config: {}", path.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(f) = a.family {
        cfg.arch.family = f;
    }
    if let Some(w) = a.widths {
        cfg.arch.stage_widths = w;
    }
    if let Some(b) = a.blocks {
        cfg.arch.stage_blocks = b;
    }
    if a.growth.is_some() {
        cfg.arch.growth = a.growth;
    }
    if a.exits.is_some() {
        cfg.arch.exit_placements = a.exits;
    }
    let t = &mut cfg.train;
    if let Some(o) = a.optimizer {
        t.optimizer = o;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.exit_weights {
        t.exit_weights = v;
    }
    if let Some(v) = a.bop_gamma {
        t.bop.gamma = v;
    }
    if let Some(v) = a.bop_tau {
        t.bop.tau = v;
    }
    let (data, data_id) = a.data.load()?;
    let spec = cfg.arch_spec(data.n_classes())?;
    cfg.train.validate(spec.exit_placements.len())?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let model = Model::build(&spec, cfg.train.seed)?;
    create_dir(&a.out)?;
    write_config(&cfg, &a.out)?;
    eprintln!(
        "training {} on {data_id}: {} parameters, exits after blocks {:?}",
        spec.family,
        model.param_count(),
        spec.exit_placements
    );
    let quiet = a.quiet;
    let trained = train::train_loop_with(&model, &data, &frontend, &cfg.train, |m| {
        if !quiet {
            let acc = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
            eprintln!(
                "epoch {:>3}  loss {:.4}  train [{}]  test [{}]",
                m.epoch,
                m.loss,
                acc(&m.train_accuracy),
                acc(&m.test_accuracy)
            );
        }
    })?;
    let meta = TrainingMeta::for_run(&cfg)?;
    let model_path = a.out.join("model.eebn");
    let report = io::save_model(&trained.model, &meta, &model_path)?;
    io::write_atomic(&a.out.join("history.csv"), train::history_csv(&trained.history)?.as_bytes())?;
    println!("model: {} ({} bytes)", model_path.display(), report.total_bytes);
    println!(
        "binary weights: {} bytes packed vs {} bytes as float32; real-valued: {} bytes",
        report.binary_payload_bytes, report.binary_as_f32_bytes, report.real_payload_bytes
    );
    if let Some(last) = trained.history.last() {
        println!("final test accuracy per exit: {:?}", last.test_accuracy);
    }
    Ok(())
}

/// Model plus the run configuration to evaluate it with: `--config` if
/// given, else the configuration stored at training time, else defaults.
fn load_model(a: &ModelArgs) -> Result<(Model, RunConfig)> {
    let (model, meta) = io::load_model(&a.model)?;
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => match meta.frontend() {
            Some(frontend) => RunConfig {
                frontend,
                ..RunConfig::default()
            },
            None => RunConfig::default(),
        },
    };
    Ok((model, cfg))
}

fn check_classes(model: &Model, data: &Dataset) -> Result<()> {
    if model.spec().n_classes != data.n_classes() {
        return Err(Error::Dataset(format!(
            "model predicts {} classes but the dataset has {}",
            model.spec().n_classes,
            data.n_classes()
        )));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, mut cfg) = load_model(&a.model)?;
    if let Some(d) = a.delta {
        cfg.rule = DecisionRule::Entropy { delta: d };
    }
    if let Some(s) = a.confidence {
        cfg.rule = DecisionRule::Confidence {
            threshold: s,
            temperature: a.temperature,
        };
    }
    cfg.rule.validate()?;
    let (data, _) = a.data.load()?;
    check_classes(&model, &data)?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let idx = data.indices(Split::Test);
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = idx.iter().map(|&i| data.samples()[i].label).collect();
    let n = idx.len() as f64;
    if let Some(e) = a.fixed_exit {
        let preds = eebnn::par::try_map_indexed(idx.len(), |k| {
            let f = data.featurize(idx[k], &frontend, FeatureMode::Eval)?;
            infer_fixed_exit(&model, &f, e)
        })?;
        let hits = preds.iter().zip(&labels).filter(|(p, l)| p.prediction == **l).count();
        println!("rule: fixed exit {e}");
        println!("samples: {}", idx.len());
        println!("accuracy: {}", hits as f64 / n);
        println!("mean_exit: {e}");
        println!("mean_macs: {}", preds.iter().map(|p| p.macs as f64).sum::<f64>() / n);
        return Ok(());
    }
    let rule = cfg.rule;
    let records = eebnn::par::try_map_indexed(idx.len(), |k| {
        let f = data.featurize(idx[k], &frontend, FeatureMode::Eval)?;
        let mut r = infer_early_exit(&model, &f, &rule)?;
        if a.no_timing {
            r.wall_ms = 0.0;
        }
        Ok::<_, Error>(eval::SampleRecord {
            delta: match rule {
                DecisionRule::Entropy { delta } => delta,
                DecisionRule::Confidence { threshold, .. } => threshold,
            },
            sample: idx[k],
            label: labels[k],
            tier: data.samples()[idx[k]].tier,
            record: r,
        })
    })?;
    let row = eval::SweepRow::from_records(records[0].delta, &records, model.num_exits())?;
    println!("rule: {rule:?}");
    println!("samples: {}", idx.len());
    println!("accuracy: {}", row.accuracy);
    println!("mean_exit: {}", row.mean_exit);
    println!("exit_fractions: {:?}", row.exit_fractions);
    println!("mean_macs: {}", row.mean_macs);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        io::write_atomic(&dir.join("records.jsonl"), eval::records_jsonl(&records)?.as_bytes())?;
        write_config(&cfg, dir)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (model, mut cfg) = load_model(&a.model)?;
    if let Some(d) = a.deltas {
        cfg.sweep.deltas = d;
    }
    if a.no_timing {
        cfg.sweep.timing = false;
    }
    let (data, data_id) = a.data.load()?;
    check_classes(&model, &data)?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let opts = SweepOptions {
        dataset_id: data_id,
        timing: cfg.sweep.timing,
    };
    let result = eval::sweep(&model, &data, &frontend, &cfg.sweep.deltas, &opts)?;
    create_dir(&a.out)?;
    result.write_csv(&a.out.join("sweep.csv"))?;
    result.write_jsonl(&a.out.join("records.jsonl"))?;
    let curve = eval::curve_csv(&eval::accuracy_vs_avg_exit(std::slice::from_ref(&result)))?;
    io::write_atomic(&a.out.join("curve.csv"), curve.as_bytes())?;
    write_config(&cfg, &a.out)?;
    print!("{}", result.to_csv()?);
    println!("baseline (last exit) accuracy: {}", result.baseline_accuracy);
    Ok(())
}

fn cmd_per_class(a: PerClassArgs) -> Result<()> {
    let (model, mut cfg) = load_model(&a.model)?;
    cfg.rule = DecisionRule::entropy(a.delta)?;
    let (data, _) = a.data.load()?;
    check_classes(&model, &data)?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let stats = eval::per_class_exits(&model, &data, &frontend, a.delta)?;
    create_dir(&a.out)?;
    let csv = stats.to_csv()?;
    io::write_atomic(&a.out.join("per_class.csv"), csv.as_bytes())?;
    write_config(&cfg, &a.out)?;
    print!("{csv}");
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.model)?;
    let frontend = Frontend::new(cfg.frontend.clone())?;
    let pcm = match &a.wav {
        Some(p) => {
            let (pcm, rate) = read_wav(p)?;
            if rate != cfg.frontend.sample_rate {
                return Err(Error::SampleRate {
                    expected: cfg.frontend.sample_rate,
                    found: rate,
                });
            }
            pcm
        }
        None => match &synth_dataset(2, 1, DifficultyMix::EasyOnly, 0)?.samples()[0].source {
            train::Source::Pcm(p) => p.to_vec(),
            train::Source::Wav(_) => unreachable!("synthetic samples live in memory"),
        },
    };
    let rows = eval::bench_exits(&model, &frontend, &pcm, a.repeats)?;
    let csv = eval::bench_csv(&rows)?;
    print!("{csv}");
    println!("host wall-clock timings (single thread); not comparable to on-device latency");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        io::write_atomic(&dir.join("bench.csv"), csv.as_bytes())?;
        write_config(&cfg, dir)?;
    }
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let cfg: FrontendConfig = base_config(a.config.as_deref())?.frontend;
    let frontend = Frontend::new(cfg)?;
    let feat = frontend.featurize_wav(&a.wav, FeatureMode::Eval)?;
    let mut text = String::new();
    for f in 0..feat.frames {
        let row: Vec<String> = (0..feat.bins).map(|b| feat.at(f, b).to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    eprintln!("{} frames x {} bins", feat.frames, feat.bins);
    match &a.out {
        Some(p) => io::write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let g = &a.gen;
    let data = synth_dataset(g.classes, g.per_class, g.mix, g.data_seed)?;
    let manifest = data.export(&a.out, SYNTH_RATE)?;
    println!("{} clips, manifest: {}", data.len(), manifest.display());
    Ok(())
}
