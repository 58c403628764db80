use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::ArchSpec;
use super::plan::{ParamSpec, Plan};
use crate::error::{Error, Result};
use crate::tensor::BitTensor;

/// Batch-norm epsilon used in training and inference.
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Fold into a per-channel `scale * x + shift`.
    pub fn folded(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.gamma.len());
        let mut shift = Vec::with_capacity(self.gamma.len());
        for i in 0..self.gamma.len() {
            let inv = 1.0 / (self.var[i] as f64 + BN_EPSILON).sqrt();
            let s = self.gamma[i] as f64 * inv;
            scale.push(s as f32);
            shift.push((self.beta[i] as f64 - self.mean[i] as f64 * s) as f32);
        }
        (scale, shift)
    }
}

/// Parameter values for one plan slot.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Real(Vec<f32>),
    /// Binary weights; `latent` holds the real-valued shadow weights used by
    /// latent-weight training (absent after loading a model file).
    Binary {
        bits: BitTensor,
        latent: Option<Vec<f32>>,
    },
    Norm(NormParams),
    Affine {
        scale: Vec<f32>,
        bias: Vec<f32>,
    },
}

/// Byte sizes of the stored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeReport {
    pub binary_weights: usize,
    pub real_values: usize,
    /// Bit-packed binary weights plus 4 bytes per real value.
    pub binary_bytes: usize,
    /// Everything stored as `f32`.
    pub float32_bytes: usize,
}

/// A multi-exit binary network: spec, compiled plan and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    plan: Plan,
    params: Vec<Param>,
    fingerprint: u64,
}

impl Model {
    /// Build a freshly initialized model; deterministic in `seed`.
    ///
    /// Real convs use He-uniform weights, latent binary weights Glorot-uniform,
    /// batch-norms start at identity and exit heads at scale `1/sqrt(features)`,
    /// bias 0.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let plan = Plan::compile(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(plan.params.len());
        for (idx, p) in plan.params.iter().enumerate() {
            params.push(match *p {
                ParamSpec::RealConv { shape } => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let a = (6.0 / fan_in).sqrt();
                    Param::Real(uniform(&mut rng, shape.iter().product(), a))
                }
                ParamSpec::BinaryConv { shape } => {
                    let kk = shape[1] * shape[2];
                    let a = (6.0 / (kk * (shape[0] + shape[3])) as f64).sqrt();
                    binary_from_latent(shape.to_vec(), uniform(&mut rng, shape.iter().product(), a))?
                }
                ParamSpec::BinaryDense { units, features } => {
                    let a = (6.0 / (units + features) as f64).sqrt();
                    binary_from_latent(vec![units, features], uniform(&mut rng, units * features, a))?
                }
                ParamSpec::Norm { channels } => Param::Norm(NormParams::identity(channels)),
                ParamSpec::Affine { units } => {
                    let features = plan
                        .heads
                        .iter()
                        .find(|h| h.affine == idx)
                        .map(|h| h.features)
                        .unwrap_or(1);
                    Param::Affine {
                        scale: vec![(1.0 / (features as f64).sqrt()) as f32; units],
                        bias: vec![0.0; units],
                    }
                }
            });
        }
        Self::from_parts(spec.clone(), params)
    }

    /// Assemble a model from explicit parameter values, checking every slot
    /// against the plan.
    pub fn from_parts(spec: ArchSpec, params: Vec<Param>) -> Result<Self> {
        let plan = Plan::compile(&spec)?;
        if params.len() != plan.params.len() {
            return Err(Error::LengthMismatch {
                expected: plan.params.len(),
                found: params.len(),
            });
        }
        for (i, (p, s)) in params.iter().zip(&plan.params).enumerate() {
            check_param(p, s).map_err(|m| Error::Shape(format!("{}: {m}", plan.names[i])))?;
        }
        let fingerprint = fingerprint(&spec, &params);
        Ok(Self {
            spec,
            plan,
            params,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Param> {
        self.params
    }

    /// Content hash of spec and parameters; identifies the model in resumable
    /// prefix states.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn num_exits(&self) -> usize {
        self.plan.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.plan.param_count()
    }

    /// Cumulative MACs to reach each exit at the nominal input size.
    pub fn exit_costs(&self) -> Vec<u64> {
        self.plan
            .trace(self.spec.input_frames, self.spec.input_bins)
            .expect("nominal input traces")
            .exit_costs(&self.plan.exit_blocks)
    }

    pub fn size_report(&self) -> SizeReport {
        let mut binary_weights = 0;
        let mut real_values = 0;
        for p in &self.params {
            match p {
                Param::Real(v) => real_values += v.len(),
                Param::Binary { bits, .. } => binary_weights += bits.len(),
                Param::Norm(n) => real_values += 4 * n.gamma.len(),
                Param::Affine { scale, .. } => real_values += 2 * scale.len(),
            }
        }
        SizeReport {
            binary_weights,
            real_values,
            binary_bytes: binary_weights.div_ceil(8) + 4 * real_values,
            float32_bytes: 4 * (binary_weights + real_values),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-a..a) as f32).collect()
}

fn binary_from_latent(shape: Vec<usize>, latent: Vec<f32>) -> Result<Param> {
    Ok(Param::Binary {
        bits: BitTensor::pack(shape, &latent)?,
        latent: Some(latent),
    })
}

fn check_param(p: &Param, s: &ParamSpec) -> std::result::Result<(), String> {
    let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
    match (p, s) {
        (Param::Real(v), ParamSpec::RealConv { shape }) => {
            if v.len() != shape.iter().product::<usize>() {
                return Err(format!("expected {} values, got {}", shape.iter().product::<usize>(), v.len()));
            }
            if !finite(v) {
                return Err("non-finite weight".into());
            }
        }
        (Param::Binary { bits, latent }, ParamSpec::BinaryConv { shape }) => {
            if bits.shape() != shape {
                return Err(format!("expected shape {shape:?}, got {:?}", bits.shape()));
            }
            check_latent(bits, latent.as_deref())?;
        }
        (Param::Binary { bits, latent }, ParamSpec::BinaryDense { units, features }) => {
            if bits.shape() != [*units, *features] {
                return Err(format!("expected shape [{units}, {features}], got {:?}", bits.shape()));
            }
            check_latent(bits, latent.as_deref())?;
        }
        (Param::Norm(n), ParamSpec::Norm { channels }) => {
            let c = *channels;
            if n.gamma.len() != c || n.beta.len() != c || n.mean.len() != c || n.var.len() != c {
                return Err(format!("expected {c} channels"));
            }
            if !(finite(&n.gamma) && finite(&n.beta) && finite(&n.mean) && finite(&n.var)) {
                return Err("non-finite batch-norm value".into());
            }
            if n.var.iter().any(|&v| v < 0.0) {
                return Err("negative running variance".into());
            }
        }
        (Param::Affine { scale, bias }, ParamSpec::Affine { units }) => {
            if scale.len() != *units || bias.len() != *units {
                return Err(format!("expected {units} units"));
            }
            if !(finite(scale) && finite(bias)) {
                return Err("non-finite affine value".into());
            }
        }
        _ => return Err(format!("parameter kind does not match slot {s:?}")),
    }
    Ok(())
}

fn check_latent(bits: &BitTensor, latent: Option<&[f32]>) -> std::result::Result<(), String> {
    if let Some(l) = latent {
        if l.len() != bits.len() {
            return Err("latent length does not match binary weights".into());
        }
        if l.iter().enumerate().any(|(i, &v)| !v.is_finite() || (v >= 0.0) != bits.get(i)) {
            return Err("binary weights differ from sign(latent)".into());
        }
    }
    Ok(())
}

/// FNV-1a over the canonical spec and every parameter bit pattern.
fn fingerprint(spec: &ArchSpec, params: &[Param]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(spec.canonical_text().as_bytes());
    let floats = |v: &[f32], eat: &mut dyn FnMut(&[u8])| {
        for x in v {
            eat(&x.to_le_bytes());
        }
    };
    for p in params {
        match p {
            Param::Real(v) => floats(v, &mut eat),
            Param::Binary { bits, .. } => {
                for w in bits.words() {
                    eat(&w.to_le_bytes());
                }
            }
            Param::Norm(n) => {
                for v in [&n.gamma, &n.beta, &n.mean, &n.var] {
                    floats(v, &mut eat);
                }
            }
            Param::Affine { scale, bias } => {
                floats(scale, &mut eat);
                floats(bias, &mut eat);
            }
        }
    }
    h
}
