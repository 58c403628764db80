//! Inference: real-valued stem and shortcuts in `f32`, binary convolutions and
//! exit heads through the XNOR/popcount kernels.

use super::model::{Model, NormParams, Param};
use super::plan::{ConvRef, HeadRef, NormRef, Pool, Unit};
use crate::error::{Error, Result};
use crate::frontend::MelFeature;
use crate::tensor::conv::binary_conv2d_raw;
use crate::tensor::{bits::pack_row, BitTensor, ConvGeometry};

/// `[h, w, c]` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

/// One exit's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Outputs of every exit for one input, with the cumulative MACs needed to
/// reach each exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitStack {
    pub exits: Vec<ExitOutput>,
    pub cumulative_macs: Vec<u64>,
}

impl ExitStack {
    pub fn len(&self) -> usize {
        self.exits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exits.is_empty()
    }

    pub fn distributions(&self) -> Vec<&[f64]> {
        self.exits.iter().map(|e| e.probs.as_slice()).collect()
    }
}

/// Where a partial forward pass stopped; feed it back to
/// [`Model::resume_prefix`] to continue to a later exit.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    fingerprint: u64,
    exits_done: usize,
    blocks_done: usize,
    activation: FeatureMap,
    macs: u64,
}

impl PrefixState {
    /// Number of exits evaluated so far.
    pub fn exits_done(&self) -> usize {
        self.exits_done
    }

    pub fn blocks_done(&self) -> usize {
        self.blocks_done
    }

    /// MACs spent so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }
}

impl Model {
    /// Run the whole network once, evaluating every exit.
    pub fn forward_all_exits(&self, feature: &MelFeature) -> Result<ExitStack> {
        let mut state = self.start(feature)?;
        let mut exits = Vec::with_capacity(self.num_exits());
        let mut cumulative_macs = Vec::with_capacity(self.num_exits());
        for e in 1..=self.num_exits() {
            let (out, next) = self.advance(state, e)?;
            cumulative_macs.push(next.macs);
            exits.push(out);
            state = next;
        }
        Ok(ExitStack {
            exits,
            cumulative_macs,
        })
    }

    /// Execute the network up to exit `upto` (1-based), evaluating every exit
    /// head on the way, and return that exit's output.
    pub fn forward_prefix(
        &self,
        feature: &MelFeature,
        upto: usize,
    ) -> Result<(ExitOutput, PrefixState)> {
        self.check_exit(upto)?;
        let state = self.start(feature)?;
        self.advance(state, upto)
    }

    /// Continue a partial pass from `state` to exit `upto`.
    pub fn resume_prefix(
        &self,
        state: PrefixState,
        upto: usize,
    ) -> Result<(ExitOutput, PrefixState)> {
        self.check_exit(upto)?;
        if state.fingerprint != self.fingerprint() {
            return Err(Error::PrefixState(
                "state was produced by a different model".into(),
            ));
        }
        if state.exits_done >= upto {
            return Err(Error::PrefixState(format!(
                "state already past exit {} (requested {upto})",
                state.exits_done
            )));
        }
        self.advance(state, upto)
    }

    fn check_exit(&self, upto: usize) -> Result<()> {
        if upto == 0 || upto > self.num_exits() {
            return Err(Error::ExitIndex {
                index: upto,
                exits: self.num_exits(),
            });
        }
        Ok(())
    }

    /// Validate the input and run the stem.
    pub(crate) fn start(&self, feature: &MelFeature) -> Result<PrefixState> {
        let spec = self.spec();
        if feature.bins != spec.input_bins {
            return Err(Error::Shape(format!(
                "feature has {} bins, model expects {}",
                feature.bins, spec.input_bins
            )));
        }
        if feature.frames == 0 || feature.data.len() != feature.frames * feature.bins {
            return Err(Error::Shape("empty or inconsistent feature matrix".into()));
        }
        let x = FeatureMap {
            h: feature.frames,
            w: feature.bins,
            c: 1,
            data: feature.data.clone(),
        };
        let stem = &self.plan().stem;
        let macs = stem.conv.geom.macs(x.h, x.w)?;
        let mut y = real_conv(&x, self.real(stem.conv.param), &stem.conv.geom)?;
        self.norm_inplace(&mut y, stem.norm);
        let y = pool2(&y, Pool::Max);
        Ok(PrefixState {
            fingerprint: self.fingerprint(),
            exits_done: 0,
            blocks_done: 0,
            activation: y,
            macs,
        })
    }

    pub(crate) fn advance(
        &self,
        mut state: PrefixState,
        upto: usize,
    ) -> Result<(ExitOutput, PrefixState)> {
        let plan = self.plan();
        let mut last = None;
        for e in state.exits_done..upto {
            let target = plan.exit_blocks[e];
            while state.blocks_done < target {
                let units = &plan.blocks[state.blocks_done];
                for u in units {
                    let (y, macs) = self.unit(&state.activation, u)?;
                    state.activation = y;
                    state.macs += macs;
                }
                state.blocks_done += 1;
            }
            let head = &plan.heads[e];
            last = Some(self.head(&state.activation, head)?);
            state.macs += (head.features * head.classes) as u64;
            state.exits_done = e + 1;
        }
        let out = last.ok_or_else(|| Error::PrefixState("nothing to evaluate".into()))?;
        Ok((out, state))
    }

    fn unit(&self, x: &FeatureMap, u: &Unit) -> Result<(FeatureMap, u64)> {
        match *u {
            Unit::Residual {
                conv,
                norm,
                shortcut,
            } => {
                let mut macs = conv.geom.macs(x.h, x.w)?;
                let mut y = self.binary_conv(x, conv)?;
                self.norm_inplace(&mut y, norm);
                let skip = match shortcut {
                    None => x.clone(),
                    Some(sc) => {
                        let p = pool2(x, sc.pool);
                        macs += sc.conv.geom.macs(p.h, p.w)?;
                        let mut s = real_conv(&p, self.real(sc.conv.param), &sc.conv.geom)?;
                        self.norm_inplace(&mut s, sc.norm);
                        s
                    }
                };
                if (skip.h, skip.w, skip.c) != (y.h, y.w, y.c) {
                    return Err(Error::Shape("residual branch shapes differ".into()));
                }
                for (a, b) in y.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
                Ok((y, macs))
            }
            Unit::Dense { conv, norm } => {
                let macs = conv.geom.macs(x.h, x.w)?;
                let mut y = self.binary_conv(x, conv)?;
                self.norm_inplace(&mut y, norm);
                Ok((concat_channels(x, &y), macs))
            }
            Unit::Improve { conv, norm } => {
                let macs = conv.geom.macs(x.h, x.w)?;
                let mut y = self.binary_conv(x, conv)?;
                self.norm_inplace(&mut y, norm);
                let mut out = x.clone();
                let off = x.c - y.c;
                for p in 0..x.h * x.w {
                    for k in 0..y.c {
                        out.data[p * x.c + off + k] += y.data[p * y.c + k];
                    }
                }
                Ok((out, macs))
            }
            Unit::Transition { conv, norm } => {
                let p = pool2(x, Pool::Max);
                let macs = conv.geom.macs(p.h, p.w)?;
                let mut y = real_conv(&p, self.real(conv.param), &conv.geom)?;
                self.norm_inplace(&mut y, norm);
                Ok((y, macs))
            }
        }
    }

    fn head(&self, x: &FeatureMap, head: &HeadRef) -> Result<ExitOutput> {
        let mut pooled = global_avg_pool(x);
        let (scale, shift) = self.norm_params(head.norm).folded();
        for (i, v) in pooled.iter_mut().enumerate() {
            *v = *v * scale[i] + shift[i];
        }
        let mut words = vec![0u64; crate::tensor::bits::words_for(pooled.len())];
        pack_row(&pooled, &mut words);
        let weights = self.bits(head.dense);
        let (a_scale, a_bias) = match &self.params()[head.affine] {
            Param::Affine { scale, bias } => (scale, bias),
            _ => unreachable!("plan slot is affine"),
        };
        let logits: Vec<f64> = (0..head.classes)
            .map(|u| {
                let dot = crate::tensor::xnor_dot_words(&words, weights.row(u), head.features);
                (a_scale[u] * dot as f32 + a_bias[u]) as f64
            })
            .collect();
        let probs = softmax(&logits, 1.0);
        Ok(ExitOutput { logits, probs })
    }

    fn binary_conv(&self, x: &FeatureMap, conv: ConvRef) -> Result<FeatureMap> {
        let g = conv.geom;
        if x.c != g.in_channels {
            return Err(Error::Shape(format!(
                "binary conv expects {} channels, got {}",
                g.in_channels, x.c
            )));
        }
        let packed = BitTensor::pack(vec![x.h, x.w, x.c], &x.data)?;
        let (oh, ow) = g.output_dims(x.h, x.w)?;
        let mut out = vec![0f32; oh * ow * g.out_channels];
        binary_conv2d_raw(&packed, self.bits(conv.param), &g, x.h, x.w, oh, ow, &mut out);
        Ok(FeatureMap {
            h: oh,
            w: ow,
            c: g.out_channels,
            data: out,
        })
    }

    fn norm_inplace(&self, x: &mut FeatureMap, norm: NormRef) {
        let (scale, shift) = self.norm_params(norm).folded();
        for px in x.data.chunks_mut(x.c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = *v * scale[k] + shift[k];
            }
        }
    }

    fn real(&self, slot: usize) -> &[f32] {
        match &self.params()[slot] {
            Param::Real(v) => v,
            _ => unreachable!("plan slot {slot} is a real conv"),
        }
    }

    fn bits(&self, slot: usize) -> &BitTensor {
        match &self.params()[slot] {
            Param::Binary { bits, .. } => bits,
            _ => unreachable!("plan slot {slot} is binary"),
        }
    }

    fn norm_params(&self, norm: NormRef) -> &NormParams {
        match &self.params()[norm.param] {
            Param::Norm(n) => n,
            _ => unreachable!("plan slot is batch-norm"),
        }
    }
}

/// Temperature-scaled softmax, evaluated in `f64`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Real-valued convolution with zero padding; weights `[o, k, k, c]`.
pub(crate) fn real_conv(x: &FeatureMap, weights: &[f32], g: &ConvGeometry) -> Result<FeatureMap> {
    if x.c != g.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} channels, got {}",
            g.in_channels, x.c
        )));
    }
    let (oh, ow) = g.output_dims(x.h, x.w)?;
    let (pt, pl) = g.pad_before(x.h, x.w);
    let (k, c, o_n) = (g.kernel, g.in_channels, g.out_channels);
    let mut out = vec![0f32; oh * ow * o_n];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * o_n..(oy * ow + ox + 1) * o_n];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let src = &x.data[(iy as usize * x.w + ix as usize) * c..][..c];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let wrow = &weights[((o * k + ky) * k + kx) * c..][..c];
                        *d += src.iter().zip(wrow).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
            }
        }
    }
    Ok(FeatureMap {
        h: oh,
        w: ow,
        c: o_n,
        data: out,
    })
}

/// 2×2 stride-2 pooling; trailing odd rows/columns form partial windows.
pub(crate) fn pool2(x: &FeatureMap, pool: Pool) -> FeatureMap {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = vec![0f32; oh * ow * x.c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * x.c..][..x.c];
            let mut count = 0;
            for iy in 2 * oy..(2 * oy + 2).min(x.h) {
                for ix in 2 * ox..(2 * ox + 2).min(x.w) {
                    let src = &x.data[(iy * x.w + ix) * x.c..][..x.c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        match pool {
                            Pool::Max => {
                                if count == 0 || s > *d {
                                    *d = s;
                                }
                            }
                            Pool::Avg => *d += s,
                        }
                    }
                    count += 1;
                }
            }
            if pool == Pool::Avg {
                for d in dst.iter_mut() {
                    *d /= count as f32;
                }
            }
        }
    }
    FeatureMap {
        h: oh,
        w: ow,
        c: x.c,
        data: out,
    }
}

fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.h * a.w * c);
    for p in 0..a.h * a.w {
        data.extend_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        data.extend_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    FeatureMap {
        h: a.h,
        w: a.w,
        c,
        data,
    }
}

fn global_avg_pool(x: &FeatureMap) -> Vec<f32> {
    let mut acc = vec![0f64; x.c];
    for px in x.data.chunks(x.c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    let n = (x.h * x.w) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}
