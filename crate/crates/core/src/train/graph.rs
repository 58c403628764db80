//! Batched `f64` forward and backward pass over a compiled [`Plan`].
//!
//! The graph mirrors the inference path in [`crate::net`] node for node; the
//! differences are the precision, batch statistics in batch-norm, and the
//! straight-through backward pass through every binarization.

use crate::error::{Error, Result};
use crate::frontend::MelFeature;
use crate::net::{softmax, ConvRef, Model, NormParams, Param, ParamSpec, Plan, Pool, Unit, BN_EPSILON};
use crate::par;
use crate::tensor::{BitTensor, ConvGeometry, Padding};

use super::loss::PROB_FLOOR;

/// Forward behaviour of every binarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    /// `sign(x)` (with `sign(0) = +1`); the training and inference setting.
    Sign,
    /// `clamp(x, −1, 1)`: a differentiable surrogate whose exact derivative
    /// is the straight-through mask, used for gradient checking.
    HardTanh,
}

impl Quantizer {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Quantizer::Sign => {
                if (v as f32) >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Quantizer::HardTanh => v.clamp(-1.0, 1.0),
        }
    }
}

/// Straight-through gradient mask: 1 where `|x| ≤ 1`, else 0.
#[inline]
pub fn ste_mask(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Current batch mean and (biased) variance; training.
    Batch,
    /// Stored running statistics; evaluation.
    Running,
}

/// `f64` master copy of a model's parameters.
///
/// `values[i]` holds the trainable scalars of plan slot `i`: conv weights,
/// latent binary weights, `[gamma…, beta…]` for batch-norm or
/// `[scale…, bias…]` for an affine head. `running[i]` holds
/// `(mean, var)` for batch-norm slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub values: Vec<Vec<f64>>,
    pub running: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl TrainParams {
    /// Binary slots start from their latent weights, or from the ±1 bits
    /// when the model carries none.
    pub fn from_model(model: &Model) -> Self {
        let mut values = Vec::with_capacity(model.params().len());
        let mut running = Vec::with_capacity(model.params().len());
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        for p in model.params() {
            match p {
                Param::Real(v) => {
                    values.push(f(v));
                    running.push(None);
                }
                Param::Binary { bits, latent } => {
                    values.push(match latent {
                        Some(l) => f(l),
                        None => bits.to_f64(),
                    });
                    running.push(None);
                }
                Param::Norm(n) => {
                    let mut v = f(&n.gamma);
                    v.extend(f(&n.beta));
                    values.push(v);
                    running.push(Some((f(&n.mean), f(&n.var))));
                }
                Param::Affine { scale, bias } => {
                    let mut v = f(scale);
                    v.extend(f(bias));
                    values.push(v);
                    running.push(None);
                }
            }
        }
        Self { values, running }
    }

    /// Round to `f32` and rebuild an inference model; binary weights become
    /// `sign(latent)`.
    pub fn to_model(&self, template: &Model) -> Result<Model> {
        let plan = template.plan();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut params = Vec::with_capacity(plan.params.len());
        for (i, spec) in plan.params.iter().enumerate() {
            let v = &self.values[i];
            params.push(match *spec {
                ParamSpec::RealConv { .. } => Param::Real(f(v)),
                ParamSpec::BinaryConv { shape } => {
                    let latent = f(v);
                    Param::Binary {
                        bits: BitTensor::pack(shape.to_vec(), &latent)?,
                        latent: Some(latent),
                    }
                }
                ParamSpec::BinaryDense { units, features } => {
                    let latent = f(v);
                    Param::Binary {
                        bits: BitTensor::pack(vec![units, features], &latent)?,
                        latent: Some(latent),
                    }
                }
                ParamSpec::Norm { channels } => {
                    let (mean, var) = self.running[i]
                        .as_ref()
                        .ok_or_else(|| Error::OptimizerState("missing running statistics".into()))?;
                    Param::Norm(NormParams {
                        gamma: f(&v[..channels]),
                        beta: f(&v[channels..]),
                        mean: f(mean),
                        var: f(var),
                    })
                }
                ParamSpec::Affine { units } => Param::Affine {
                    scale: f(&v[..units]),
                    bias: f(&v[units..]),
                },
            });
        }
        Model::from_parts(template.spec().clone(), params)
    }

    /// Zeroed gradient buffers shaped like `values`.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }
}

/// Batch of `[h, w, c]` maps stored contiguously.
#[derive(Debug, Clone)]
struct Batch {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Batch {
    fn per(&self) -> usize {
        self.h * self.w * self.c
    }

    fn sample(&self, i: usize) -> &[f64] {
        let p = self.per();
        &self.data[i * p..(i + 1) * p]
    }

    fn like(&self, c: usize, data: Vec<f64>) -> Batch {
        Batch {
            n: self.n,
            h: self.h,
            w: self.w,
            c,
            data,
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Quant {
        x: usize,
    },
    Conv {
        x: usize,
        slot: usize,
        geom: ConvGeometry,
        binary: bool,
    },
    Norm {
        x: usize,
        slot: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pool {
        x: usize,
        kind: Pool,
        /// Max: source index within the sample; avg: window size.
        arg: Vec<u32>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    AddTail {
        a: usize,
        b: usize,
    },
    Gap {
        x: usize,
    },
    Affine {
        x: usize,
        slot: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: Batch,
}

/// Recorded forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    logits: Vec<usize>,
    /// `(slot, batch mean, batch var)` for every batch-norm evaluated in
    /// [`NormMode::Batch`].
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.nodes[0].out.n
    }

    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    /// Logits of exit `e` (0-based) for sample `i`.
    pub fn logits(&self, e: usize, i: usize) -> &[f64] {
        self.nodes[self.logits[e]].out.sample(i)
    }
}

/// Loss, gradients and outputs of one batch.
#[derive(Debug)]
pub struct BatchOutcome {
    /// `(1/B) Σ_i Σ_j w_j · CE_ij`.
    pub loss: f64,
    /// Unweighted cross-entropy per exit, summed over the batch.
    pub exit_loss_sums: Vec<f64>,
    /// Argmax prediction per exit per sample.
    pub predictions: Vec<Vec<usize>>,
    pub grads: Vec<Vec<f64>>,
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Training graph for a plan.
#[derive(Debug, Clone, Copy)]
pub struct Graph<'a> {
    plan: &'a Plan,
    quant: Quantizer,
    norm: NormMode,
    exits: usize,
}

impl<'a> Graph<'a> {
    pub fn new(plan: &'a Plan, quant: Quantizer, norm: NormMode) -> Self {
        Self {
            plan,
            quant,
            norm,
            exits: plan.heads.len(),
        }
    }

    /// Stop after exit `exits` (1-based): the prefix network ending there.
    pub fn truncated(mut self, exits: usize) -> Result<Self> {
        if exits == 0 || exits > self.plan.heads.len() {
            return Err(Error::ExitIndex {
                index: exits,
                exits: self.plan.heads.len(),
            });
        }
        self.exits = exits;
        Ok(self)
    }

    pub fn num_exits(&self) -> usize {
        self.exits
    }

    pub fn forward(&self, params: &TrainParams, inputs: &[&MelFeature]) -> Result<Tape> {
        let first = inputs.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.frames, first.bins);
        if inputs.iter().any(|f| f.frames != h || f.bins != w) {
            return Err(Error::Shape("batch features differ in shape".into()));
        }
        if params.values.len() != self.plan.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.plan.params.len(),
                found: params.values.len(),
            });
        }
        let mut data = Vec::with_capacity(inputs.len() * h * w);
        for f in inputs {
            data.extend(f.data.iter().map(|&v| v as f64));
        }
        let mut b = Builder {
            params,
            quant: self.quant,
            norm: self.norm,
            nodes: vec![Node {
                op: Op::Input,
                out: Batch {
                    n: inputs.len(),
                    h,
                    w,
                    c: 1,
                    data,
                },
            }],
            batch_stats: Vec::new(),
        };
        let stem = &self.plan.stem;
        let x = b.conv(0, stem.conv, false)?;
        let x = b.norm(x, stem.norm.param);
        let mut x = b.pool(x, Pool::Max);
        let mut logits = Vec::with_capacity(self.exits);
        let mut done = 0;
        for e in 0..self.exits {
            while done < self.plan.exit_blocks[e] {
                for u in &self.plan.blocks[done] {
                    x = b.unit(x, u)?;
                }
                done += 1;
            }
            let head = &self.plan.heads[e];
            let g = b.push(Op::Gap { x }, gap(&b.nodes[x].out));
            let g = b.norm(g, head.norm.param);
            let q = b.quant(g);
            let geom = ConvGeometry::new(1, 1, Padding::Same, head.features, head.classes)?;
            let d = b.conv(
                q,
                ConvRef {
                    param: head.dense,
                    geom,
                },
                true,
            )?;
            logits.push(b.affine(d, head.affine));
        }
        Ok(Tape {
            nodes: b.nodes,
            logits,
            batch_stats: b.batch_stats,
        })
    }

    /// Gradients of `Σ_e Σ_i dlogits[e][i] · logits[e][i]` w.r.t. every
    /// trainable value. `dlogits[e]` is `batch × classes`, row-major.
    pub fn backward(&self, params: &TrainParams, tape: &Tape, dlogits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if dlogits.len() != tape.logits.len() {
            return Err(Error::LengthMismatch {
                expected: tape.logits.len(),
                found: dlogits.len(),
            });
        }
        let nodes = &tape.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (&id, d) in tape.logits.iter().zip(dlogits) {
            if d.len() != nodes[id].out.data.len() {
                return Err(Error::LengthMismatch {
                    expected: nodes[id].out.data.len(),
                    found: d.len(),
                });
            }
            accumulate(&mut grads[id], d);
        }
        let mut out = params.zeros_like();
        for id in (1..nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Quant { x } => {
                    let src = &nodes[*x].out.data;
                    let dx: Vec<f64> = dy.iter().zip(src).map(|(g, &v)| g * ste_mask(v)).collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Conv { x, slot, geom, binary } => {
                    let xin = &nodes[*x].out;
                    let latent = &params.values[*slot];
                    let wq = self.weights(latent, *binary);
                    let pad = if *binary { -1.0 } else { 0.0 };
                    let need_dx = !matches!(nodes[*x].op, Op::Input);
                    let (dx, dw) = conv_backward(xin, &node.out, &dy, &wq, geom, pad, need_dx);
                    let g = &mut out[*slot];
                    if *binary {
                        for ((gi, d), &l) in g.iter_mut().zip(&dw).zip(latent) {
                            *gi += d * ste_mask(l);
                        }
                    } else {
                        for (gi, d) in g.iter_mut().zip(&dw) {
                            *gi += d;
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads[*x], &dx);
                    }
                }
                Op::Norm { x, slot, xhat, inv_std } => {
                    let c = node.out.c;
                    let gamma = &params.values[*slot][..c];
                    let m = node.out.data.len() / c;
                    let mut sdy = vec![0.0; c];
                    let mut sdyx = vec![0.0; c];
                    for (g, xh) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for k in 0..c {
                            sdy[k] += g[k];
                            sdyx[k] += g[k] * xh[k];
                        }
                    }
                    let mut dx = vec![0.0; dy.len()];
                    match self.norm {
                        NormMode::Batch => {
                            let mf = m as f64;
                            for (i, d) in dx.iter_mut().enumerate() {
                                let k = i % c;
                                *d = gamma[k] * inv_std[k] / mf * (mf * dy[i] - sdy[k] - xhat[i] * sdyx[k]);
                            }
                        }
                        NormMode::Running => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                let k = i % c;
                                *d = dy[i] * gamma[k] * inv_std[k];
                            }
                        }
                    }
                    let g = &mut out[*slot];
                    for k in 0..c {
                        g[k] += sdyx[k];
                        g[c + k] += sdy[k];
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Pool { x, kind, arg } => {
                    let xin = &nodes[*x].out;
                    let mut dx = vec![0.0; xin.data.len()];
                    let (per_in, per_out) = (xin.per(), node.out.per());
                    for i in 0..xin.n {
                        let dxs = &mut dx[i * per_in..(i + 1) * per_in];
                        let dys = &dy[i * per_out..(i + 1) * per_out];
                        match kind {
                            Pool::Max => {
                                for (j, &g) in dys.iter().enumerate() {
                                    dxs[arg[i * per_out + j] as usize] += g;
                                }
                            }
                            Pool::Avg => pool_avg_backward(xin, &node.out, dys, dxs, arg),
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &dy);
                    accumulate(&mut grads[*b], &dy);
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (nodes[*a].out.c, nodes[*b].out.c);
                    let c = ca + cb;
                    let mut da = Vec::with_capacity(dy.len() / c * ca);
                    let mut db = Vec::with_capacity(dy.len() / c * cb);
                    for px in dy.chunks(c) {
                        da.extend_from_slice(&px[..ca]);
                        db.extend_from_slice(&px[ca..]);
                    }
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::AddTail { a, b } => {
                    let (c, cb) = (nodes[*a].out.c, nodes[*b].out.c);
                    let mut db = Vec::with_capacity(dy.len() / c * cb);
                    for px in dy.chunks(c) {
                        db.extend_from_slice(&px[c - cb..]);
                    }
                    accumulate(&mut grads[*a], &dy);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Gap { x } => {
                    let xin = &nodes[*x].out;
                    let (hw, c) = (xin.h * xin.w, xin.c);
                    let mut dx = vec![0.0; xin.data.len()];
                    for i in 0..xin.n {
                        let g = &dy[i * c..(i + 1) * c];
                        for p in 0..hw {
                            let base = (i * hw + p) * c;
                            for k in 0..c {
                                dx[base + k] = g[k] / hw as f64;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Affine { x, slot } => {
                    let c = node.out.c;
                    let v = &params.values[*slot];
                    let xin = &nodes[*x].out.data;
                    let mut dx = vec![0.0; dy.len()];
                    let g = &mut out[*slot];
                    for i in 0..dy.len() {
                        let k = i % c;
                        g[k] += dy[i] * xin[i];
                        g[c + k] += dy[i];
                        dx[i] = dy[i] * v[k];
                    }
                    accumulate(&mut grads[*x], &dx);
                }
            }
        }
        Ok(out)
    }

    /// Forward, joint loss over the first `num_exits()` exits, and backward.
    pub fn loss_and_grads(
        &self,
        params: &TrainParams,
        inputs: &[&MelFeature],
        labels: &[usize],
        weights: &[f64],
    ) -> Result<BatchOutcome> {
        let tape = self.forward(params, inputs)?;
        let (loss, exit_loss_sums, predictions, dlogits) = self.loss(&tape, labels, weights)?;
        let grads = self.backward(params, &tape, &dlogits)?;
        Ok(BatchOutcome {
            loss,
            exit_loss_sums,
            predictions,
            grads,
            batch_stats: tape.batch_stats,
        })
    }

    /// Joint loss only (used by finite-difference checks).
    pub fn loss_only(
        &self,
        params: &TrainParams,
        inputs: &[&MelFeature],
        labels: &[usize],
        weights: &[f64],
    ) -> Result<f64> {
        let tape = self.forward(params, inputs)?;
        Ok(self.loss(&tape, labels, weights)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn loss(
        &self,
        tape: &Tape,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        let n = tape.batch_size();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: labels.len(),
            });
        }
        if weights.len() != self.exits {
            return Err(Error::LengthMismatch {
                expected: self.exits,
                found: weights.len(),
            });
        }
        let mut loss = 0.0;
        let mut sums = vec![0.0; self.exits];
        let mut preds = vec![Vec::with_capacity(n); self.exits];
        let mut dlogits = Vec::with_capacity(self.exits);
        for e in 0..self.exits {
            let classes = self.plan.heads[e].classes;
            let mut d = vec![0.0; n * classes];
            for (i, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::Label { label, classes });
                }
                let p = softmax(tape.logits(e, i), 1.0);
                let ce = -p[label].max(PROB_FLOOR).ln();
                sums[e] += ce;
                preds[e].push(argmax(&p));
                if p[label] >= PROB_FLOOR {
                    let scale = weights[e] / n as f64;
                    for k in 0..classes {
                        let y = if k == label { 1.0 } else { 0.0 };
                        d[i * classes + k] = scale * (p[k] - y);
                    }
                }
            }
            loss += weights[e] * sums[e];
            dlogits.push(d);
        }
        Ok((loss / n as f64, sums, preds, dlogits))
    }

    fn weights(&self, latent: &[f64], binary: bool) -> Vec<f64> {
        if binary {
            latent.iter().map(|&v| self.quant.apply(v)).collect()
        } else {
            latent.to_vec()
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Builder<'p> {
    params: &'p TrainParams,
    quant: Quantizer,
    norm: NormMode,
    nodes: Vec<Node>,
    batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Builder<'_> {
    fn push(&mut self, op: Op, out: Batch) -> usize {
        self.nodes.push(Node { op, out });
        self.nodes.len() - 1
    }

    fn quant(&mut self, x: usize) -> usize {
        let src = &self.nodes[x].out;
        let data = src.data.iter().map(|&v| self.quant.apply(v)).collect();
        let out = src.like(src.c, data);
        self.push(Op::Quant { x }, out)
    }

    fn conv(&mut self, x: usize, conv: ConvRef, binary: bool) -> Result<usize> {
        let g = conv.geom;
        let xin = &self.nodes[x].out;
        if xin.c != g.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {}",
                g.in_channels, xin.c
            )));
        }
        let latent = &self.params.values[conv.param];
        let w: Vec<f64> = if binary {
            latent.iter().map(|&v| self.quant.apply(v)).collect()
        } else {
            latent.clone()
        };
        let pad = if binary { -1.0 } else { 0.0 };
        let out = conv_forward(xin, &w, &g, pad)?;
        Ok(self.push(
            Op::Conv {
                x,
                slot: conv.param,
                geom: g,
                binary,
            },
            out,
        ))
    }

    fn norm(&mut self, x: usize, slot: usize) -> usize {
        let xin = &self.nodes[x].out;
        let c = xin.c;
        let v = &self.params.values[slot];
        let (gamma, beta) = (&v[..c], &v[c..]);
        let (mean, var) = match self.norm {
            NormMode::Batch => {
                let m = (xin.data.len() / c) as f64;
                let mut mean = vec![0.0; c];
                for px in xin.data.chunks(c) {
                    for k in 0..c {
                        mean[k] += px[k];
                    }
                }
                mean.iter_mut().for_each(|s| *s /= m);
                let mut var = vec![0.0; c];
                for px in xin.data.chunks(c) {
                    for k in 0..c {
                        let d = px[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= m);
                self.batch_stats.push((slot, mean.clone(), var.clone()));
                (mean, var)
            }
            NormMode::Running => {
                let (m, v) = self.params.running[slot].clone().expect("norm slot has running stats");
                (m, v)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xin.data.len());
        let mut out = Vec::with_capacity(xin.data.len());
        for px in xin.data.chunks(c) {
            for k in 0..c {
                let xh = (px[k] - mean[k]) * inv_std[k];
                xhat.push(xh);
                out.push(gamma[k] * xh + beta[k]);
            }
        }
        let out = xin.like(c, out);
        self.push(
            Op::Norm {
                x,
                slot,
                xhat,
                inv_std,
            },
            out,
        )
    }

    fn pool(&mut self, x: usize, kind: Pool) -> usize {
        let xin = &self.nodes[x].out;
        let (h, w, c) = (xin.h, xin.w, xin.c);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let per_out = oh * ow * c;
        let mut data = vec![0.0; xin.n * per_out];
        let mut arg = vec![0u32; if kind == Pool::Max { xin.n * per_out } else { oh * ow }];
        for i in 0..xin.n {
            let src = xin.sample(i);
            let dst = &mut data[i * per_out..(i + 1) * per_out];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oy * ow + ox) * c;
                    let mut count = 0;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            let s = (iy * w + ix) * c;
                            for k in 0..c {
                                let v = src[s + k];
                                match kind {
                                    Pool::Max => {
                                        if count == 0 || v > dst[o + k] {
                                            dst[o + k] = v;
                                            arg[i * per_out + o + k] = (s + k) as u32;
                                        }
                                    }
                                    Pool::Avg => dst[o + k] += v,
                                }
                            }
                            count += 1;
                        }
                    }
                    if kind == Pool::Avg {
                        arg[oy * ow + ox] = count;
                        for k in 0..c {
                            dst[o + k] /= count as f64;
                        }
                    }
                }
            }
        }
        let out = Batch {
            n: xin.n,
            h: oh,
            w: ow,
            c,
            data,
        };
        self.push(Op::Pool { x, kind, arg }, out)
    }

    fn unit(&mut self, x: usize, u: &Unit) -> Result<usize> {
        Ok(match *u {
            Unit::Residual {
                conv,
                norm,
                shortcut,
            } => {
                let q = self.quant(x);
                let y = self.conv(q, conv, true)?;
                let y = self.norm(y, norm.param);
                let skip = match shortcut {
                    None => x,
                    Some(sc) => {
                        let p = self.pool(x, sc.pool);
                        let s = self.conv(p, sc.conv, false)?;
                        self.norm(s, sc.norm.param)
                    }
                };
                let (a, b) = (&self.nodes[y].out, &self.nodes[skip].out);
                if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
                    return Err(Error::Shape("residual branch shapes differ".into()));
                }
                let data = a.data.iter().zip(&b.data).map(|(p, q)| p + q).collect();
                let out = a.like(a.c, data);
                self.push(Op::Add { a: y, b: skip }, out)
            }
            Unit::Dense { conv, norm } => {
                let q = self.quant(x);
                let y = self.conv(q, conv, true)?;
                let y = self.norm(y, norm.param);
                let (a, b) = (&self.nodes[x].out, &self.nodes[y].out);
                let c = a.c + b.c;
                let mut data = Vec::with_capacity(a.data.len() / a.c * c);
                for (pa, pb) in a.data.chunks(a.c).zip(b.data.chunks(b.c)) {
                    data.extend_from_slice(pa);
                    data.extend_from_slice(pb);
                }
                let out = a.like(c, data);
                self.push(Op::Concat { a: x, b: y }, out)
            }
            Unit::Improve { conv, norm } => {
                let q = self.quant(x);
                let y = self.conv(q, conv, true)?;
                let y = self.norm(y, norm.param);
                let (a, b) = (&self.nodes[x].out, &self.nodes[y].out);
                let mut data = a.data.clone();
                let off = a.c - b.c;
                for (pa, pb) in data.chunks_mut(a.c).zip(b.data.chunks(b.c)) {
                    for (d, s) in pa[off..].iter_mut().zip(pb) {
                        *d += s;
                    }
                }
                let out = a.like(a.c, data);
                self.push(Op::AddTail { a: x, b: y }, out)
            }
            Unit::Transition { conv, norm } => {
                let p = self.pool(x, Pool::Max);
                let y = self.conv(p, conv, false)?;
                self.norm(y, norm.param)
            }
        })
    }

    fn affine(&mut self, x: usize, slot: usize) -> usize {
        let xin = &self.nodes[x].out;
        let c = xin.c;
        let v = &self.params.values[slot];
        let data = xin
            .data
            .iter()
            .enumerate()
            .map(|(i, &d)| v[i % c] * d + v[c + i % c])
            .collect();
        let out = xin.like(c, data);
        self.push(Op::Affine { x, slot }, out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, d: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        None => *slot = Some(d.to_vec()),
    }
}

fn gap(x: &Batch) -> Batch {
    let hw = x.h * x.w;
    let mut data = vec![0.0; x.n * x.c];
    for i in 0..x.n {
        for px in x.sample(i).chunks(x.c) {
            for (d, v) in data[i * x.c..(i + 1) * x.c].iter_mut().zip(px) {
                *d += v;
            }
        }
    }
    data.iter_mut().for_each(|d| *d /= hw as f64);
    Batch {
        n: x.n,
        h: 1,
        w: 1,
        c: x.c,
        data,
    }
}

fn pool_avg_backward(xin: &Batch, out: &Batch, dy: &[f64], dx: &mut [f64], counts: &[u32]) {
    let (w, c) = (xin.w, xin.c);
    for oy in 0..out.h {
        for ox in 0..out.w {
            let cnt = counts[oy * out.w + ox] as f64;
            let o = (oy * out.w + ox) * c;
            for iy in 2 * oy..(2 * oy + 2).min(xin.h) {
                for ix in 2 * ox..(2 * ox + 2).min(w) {
                    let s = (iy * w + ix) * c;
                    for k in 0..c {
                        dx[s + k] += dy[o + k] / cnt;
                    }
                }
            }
        }
    }
}

/// Patch matrix `[oh·ow, k·k·c]` with out-of-bounds taps set to `pad`.
fn im2col(x: &[f64], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, pad: f64) -> Vec<f64> {
    let (k, c) = (g.kernel, g.in_channels);
    let (pt, pl) = g.pad_before(h, w);
    let kc = k * k * c;
    let mut col = vec![pad; oh * ow * kc];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * kc..][..kc];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    row[(ky * k + kx) * c..][..c].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto the input, dropping padding.
fn col2im(dcol: &[f64], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let (k, c) = (g.kernel, g.in_channels);
    let (pt, pl) = g.pad_before(h, w);
    let kc = k * k * c;
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcol[(oy * ow + ox) * kc..][..kc];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = &mut dx[(iy as usize * w + ix as usize) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

/// `C = A·B` (or `C += A·B` with `accumulate`) for row-major `A: m×k`
/// given by strides, `B: k×n` given by strides, `C: m×n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(x: &Batch, w: &[f64], g: &ConvGeometry, pad: f64) -> Result<Batch> {
    let (oh, ow) = g.output_dims(x.h, x.w)?;
    let kc = g.kernel * g.kernel * g.in_channels;
    let o = g.out_channels;
    let p = oh * ow;
    let outs = par::map_indexed(x.n, |i| {
        let col = im2col(x.sample(i), x.h, x.w, g, oh, ow, pad);
        let mut y = vec![0.0; p * o];
        gemm(p, kc, o, &col, (kc, 1), w, (1, kc), &mut y);
        y
    });
    Ok(Batch {
        n: x.n,
        h: oh,
        w: ow,
        c: o,
        data: outs.concat(),
    })
}

#[allow(clippy::type_complexity)]
fn conv_backward(
    x: &Batch,
    y: &Batch,
    dy: &[f64],
    w: &[f64],
    g: &ConvGeometry,
    pad: f64,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = (y.h, y.w);
    let kc = g.kernel * g.kernel * g.in_channels;
    let o = g.out_channels;
    let p = oh * ow;
    let parts = par::map_indexed(x.n, |i| {
        let col = im2col(x.sample(i), x.h, x.w, g, oh, ow, pad);
        let dys = &dy[i * p * o..(i + 1) * p * o];
        let mut dw = vec![0.0; o * kc];
        gemm(o, p, kc, dys, (1, o), &col, (kc, 1), &mut dw);
        let dx = need_dx.then(|| {
            let mut dcol = vec![0.0; p * kc];
            gemm(p, o, kc, dys, (o, 1), w, (kc, 1), &mut dcol);
            col2im(&dcol, x.h, x.w, g, oh, ow)
        });
        (dx, dw)
    });
    let mut dw = vec![0.0; o * kc];
    let mut dx = need_dx.then(|| Vec::with_capacity(x.data.len()));
    for (dxi, dwi) in parts {
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a += b;
        }
        if let (Some(acc), Some(d)) = (dx.as_mut(), dxi) {
            acc.extend(d);
        }
    }
    (dx, dw)
}
