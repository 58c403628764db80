//! Joint multi-exit training with straight-through gradients, Adam and Bop.

mod data;
mod graph;
mod loss;
mod optim;

pub use data::{
    class_frequency, synth_dataset, Dataset, DifficultyMix, Sample, Source, Split, Tier, EASY_SNR_DB,
    HARD_SNR_DB, SYNTH_RATE,
};
pub use graph::{argmax, ste_mask, BatchOutcome, Graph, NormMode, Quantizer, Tape, TrainParams};
pub use loss::{cross_entropy, joint_loss, PROB_FLOOR};
pub use optim::{
    step_adam, step_bop, AdamState, BopConfig, BopState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMode, Frontend, MelFeature};
use crate::net::{Model, ParamSpec, NUM_EXITS};
use crate::par;

/// Batch-norm running statistics follow `r ← 0.9·r + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam on every parameter; latent binary weights are clipped to
    /// `[−1, 1]` after each step.
    Adam,
    /// Bop on binary weights, Adam on real-valued parameters.
    Bop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "bop" => Ok(OptimizerKind::Bop),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Per-exit loss weights.
    pub exit_weights: Vec<f64>,
    pub bop: BopConfig,
    /// Replace the running batch-norm statistics with exact averages over
    /// the training split at the end of every epoch.
    pub recalibrate_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Bop,
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            exit_weights: vec![1.0; NUM_EXITS],
            bop: BopConfig::default(),
            recalibrate_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, exits: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.exit_weights.len() != exits {
            return Err(Error::Config(format!(
                "{} exit weights given for {exits} exits",
                self.exit_weights.len()
            )));
        }
        if self.exit_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("exit weights must be finite and non-negative".into()));
        }
        if !self.exit_weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one exit weight must be positive".into()));
        }
        if self.optimizer == OptimizerKind::Bop {
            self.bop.validate()?;
        }
        Ok(())
    }
}

/// Metrics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean joint loss per training sample.
    pub loss: f64,
    /// Mean unweighted cross-entropy per exit; `loss = Σ w_j · exit_losses[j]`.
    pub exit_losses: Vec<f64>,
    /// Per-exit accuracy on the training batches as they were seen.
    pub train_accuracy: Vec<f64>,
    /// Per-exit accuracy of the end-of-epoch model on the test split (empty
    /// when there is none).
    pub test_accuracy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Train with no progress reporting.
pub fn train_loop(model: &Model, data: &Dataset, frontend: &Frontend, cfg: &TrainConfig) -> Result<Trained> {
    train_loop_with(model, data, frontend, cfg, |_| {})
}

/// Train end to end on the train split, calling `on_epoch` after every epoch.
/// No early exiting happens during training: every exit sees every sample.
pub fn train_loop_with(
    model: &Model,
    data: &Dataset,
    frontend: &Frontend,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained> {
    let exits = model.num_exits();
    cfg.validate(exits)?;
    if data.n_classes() != model.spec().n_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model {}",
            data.n_classes(),
            model.spec().n_classes
        )));
    }
    if cfg.epochs == 0 {
        return Ok(Trained {
            model: model.clone(),
            history: Vec::new(),
        });
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let test_idx = data.indices(Split::Test);
    let test_feats: Vec<MelFeature> =
        par::try_map_indexed(test_idx.len(), |k| data.featurize(test_idx[k], frontend, FeatureMode::Eval))?;

    let plan = model.plan();
    let graph = Graph::new(plan, Quantizer::Sign, NormMode::Batch);
    let mut params = TrainParams::from_model(model);
    let mut opt = Optimizers::new(plan.params.as_slice(), &mut params, cfg)?;
    let mut current = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(data::mix_seed(cfg.seed, epoch as u64, 0)));
        let mut loss_sums = vec![0.0; exits];
        let mut correct = vec![0usize; exits];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let feats = par::try_map_indexed(chunk.len(), |k| {
                let seed = data::mix_seed(cfg.seed, epoch as u64, chunk[k] as u64 + 1);
                data.featurize(chunk[k], frontend, FeatureMode::Train { seed })
            })?;
            let refs: Vec<&MelFeature> = feats.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples()[i].label).collect();
            let out = graph.loss_and_grads(&params, &refs, &labels, &cfg.exit_weights)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: out.loss,
                });
            }
            for e in 0..exits {
                loss_sums[e] += out.exit_loss_sums[e];
                correct[e] += out.predictions[e].iter().zip(&labels).filter(|(p, l)| p == l).count();
            }
            opt.step(&mut params, &out.grads)?;
            if params.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: out.loss,
                });
            }
            for (slot, mean, var) in &out.batch_stats {
                let (rm, rv) = params.running[*slot].as_mut().expect("norm slot");
                for k in 0..mean.len() {
                    rm[k] = BN_MOMENTUM * rm[k] + (1.0 - BN_MOMENTUM) * mean[k];
                    rv[k] = BN_MOMENTUM * rv[k] + (1.0 - BN_MOMENTUM) * var[k];
                }
            }
        }
        if cfg.recalibrate_norm {
            recalibrate(&graph, &mut params, data, frontend, cfg, epoch, &order)?;
        }
        current = params.to_model(model)?;
        let n = train_idx.len() as f64;
        let exit_losses: Vec<f64> = loss_sums.iter().map(|s| s / n).collect();
        let loss = exit_losses.iter().zip(&cfg.exit_weights).map(|(l, w)| w * l).sum();
        let test_accuracy = if test_feats.is_empty() {
            Vec::new()
        } else {
            let preds = par::try_map_indexed(test_feats.len(), |k| {
                let stack = current.forward_all_exits(&test_feats[k])?;
                Ok::<_, Error>(stack.exits.iter().map(|e| argmax(&e.probs)).collect::<Vec<_>>())
            })?;
            (0..exits)
                .map(|e| {
                    let hits = preds
                        .iter()
                        .zip(&test_idx)
                        .filter(|(p, &i)| p[e] == data.samples()[i].label)
                        .count();
                    hits as f64 / test_feats.len() as f64
                })
                .collect()
        };
        let metrics = EpochMetrics {
            epoch,
            loss,
            exit_losses,
            train_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            test_accuracy,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(Trained {
        model: current,
        history,
    })
}

/// Set every running mean and variance to the sample-weighted average of
/// its batch statistics over one pass of the training split with the current
/// weights.
fn recalibrate(
    graph: &Graph,
    params: &mut TrainParams,
    data: &Dataset,
    frontend: &Frontend,
    cfg: &TrainConfig,
    epoch: usize,
    order: &[usize],
) -> Result<()> {
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; params.running.len()];
    for chunk in order.chunks(cfg.batch_size) {
        let feats = par::try_map_indexed(chunk.len(), |k| {
            let seed = data::mix_seed(cfg.seed, epoch as u64, chunk[k] as u64 + 1);
            data.featurize(chunk[k], frontend, FeatureMode::Train { seed })
        })?;
        let refs: Vec<&MelFeature> = feats.iter().collect();
        let tape = graph.forward(params, &refs)?;
        let n = chunk.len() as f64;
        for (slot, mean, var) in tape.batch_stats {
            let (sm, sv) = sums[slot].get_or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; var.len()]));
            for k in 0..mean.len() {
                sm[k] += n * mean[k];
                sv[k] += n * var[k];
            }
        }
    }
    let total = order.len() as f64;
    for (slot, sum) in sums.into_iter().enumerate() {
        if let (Some((sm, sv)), Some((rm, rv))) = (sum, params.running[slot].as_mut()) {
            for k in 0..sm.len() {
                rm[k] = sm[k] / total;
                rv[k] = sv[k] / total;
            }
        }
    }
    Ok(())
}

enum SlotOpt {
    Adam { state: AdamState, clip: bool },
    Bop(BopState),
}

struct Optimizers {
    slots: Vec<SlotOpt>,
    lr: f64,
}

impl Optimizers {
    fn new(specs: &[ParamSpec], params: &mut TrainParams, cfg: &TrainConfig) -> Result<Self> {
        let mut slots = Vec::with_capacity(specs.len());
        for (spec, values) in specs.iter().zip(params.values.iter_mut()) {
            slots.push(if spec.is_binary() && cfg.optimizer == OptimizerKind::Bop {
                for v in values.iter_mut() {
                    *v = if (*v as f32) >= 0.0 { 1.0 } else { -1.0 };
                }
                SlotOpt::Bop(BopState::new(values.len(), cfg.bop)?)
            } else {
                SlotOpt::Adam {
                    state: AdamState::new(values.len()),
                    clip: spec.is_binary(),
                }
            });
        }
        Ok(Self {
            slots,
            lr: cfg.learning_rate,
        })
    }

    fn step(&mut self, params: &mut TrainParams, grads: &[Vec<f64>]) -> Result<()> {
        for ((slot, values), g) in self.slots.iter_mut().zip(params.values.iter_mut()).zip(grads) {
            match slot {
                SlotOpt::Adam { state, clip } => {
                    step_adam(values, g, state, self.lr)?;
                    if *clip {
                        values.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                    }
                }
                SlotOpt::Bop(state) => {
                    step_bop(values, g, state)?;
                }
            }
        }
        Ok(())
    }
}

/// `epoch,loss,exit_loss1..,train_acc1..,test_acc1..` (test columns empty
/// when there is no test split).
pub fn history_csv(history: &[EpochMetrics]) -> Result<String> {
    let exits = history.first().map(|m| m.exit_losses.len()).unwrap_or(NUM_EXITS);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "loss".into()];
    for prefix in ["exit_loss", "train_acc", "test_acc"] {
        header.extend((1..=exits).map(|e| format!("{prefix}{e}")));
    }
    w.write_record(&header)?;
    for m in history {
        let mut rec = vec![m.epoch.to_string(), m.loss.to_string()];
        rec.extend(m.exit_losses.iter().map(f64::to_string));
        rec.extend(m.train_accuracy.iter().map(f64::to_string));
        if m.test_accuracy.is_empty() {
            rec.extend(std::iter::repeat_n(String::new(), exits));
        } else {
            rec.extend(m.test_accuracy.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
