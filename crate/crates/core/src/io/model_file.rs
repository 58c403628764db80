//! Single-file model container.
//!
//! ```text
//! "EEBN"  u16 version  u32 header_len  header (JSON)  u32 crc32(magic..header)
//! u32 blob_count
//! per blob:
//!   u8 kind  u16 name_len  name  u8 ndim  u32 dims[ndim]  u64 payload_len  payload
//!   u32 crc32(kind..payload)
//! ```
//!
//! All integers and floats are little-endian. Binary weights are stored as a
//! dense bitstream (bit `i` of the flattened tensor is bit `i % 64` of word
//! `i / 64`, set = +1), so a binary blob is 1/32 the size of the same weights
//! in `f32`. Latent training weights are not stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchSpec, Model, NormParams, Param};
use crate::tensor::{BitTensor, WORD_BITS};

pub const MAGIC: [u8; 4] = *b"EEBN";
pub const FORMAT_VERSION: u16 = 1;

const KIND_REAL: u8 = 0;
const KIND_BINARY: u8 = 1;
const KIND_NORM: u8 = 2;
const KIND_AFFINE: u8 = 3;

/// Free-form training provenance stored with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: Option<u64>,
    pub epochs: usize,
    /// Resolved training configuration, if the model was trained.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: String,
    meta: TrainingMeta,
}

/// Byte counts of a saved model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveReport {
    pub total_bytes: usize,
    /// Payload bytes of all binary blobs.
    pub binary_payload_bytes: usize,
    /// What those weights would take as `f32`.
    pub binary_as_f32_bytes: usize,
    /// Payload bytes of all real-valued blobs.
    pub real_payload_bytes: usize,
}

pub fn save_model(model: &Model, meta: &TrainingMeta, path: &Path) -> Result<SaveReport> {
    let (bytes, report) = encode_model(model, meta)?;
    super::write_atomic(path, &bytes)?;
    Ok(report)
}

pub fn load_model(path: &Path) -> Result<(Model, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_model(&bytes)
}

pub fn encode_model(model: &Model, meta: &TrainingMeta) -> Result<(Vec<u8>, SaveReport)> {
    let header = serde_json::to_vec(&Header {
        arch: model.spec().canonical_text(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    let names = &model.plan().names;
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut report = SaveReport {
        total_bytes: 0,
        binary_payload_bytes: 0,
        binary_as_f32_bytes: 0,
        real_payload_bytes: 0,
    };
    for (p, name) in model.params().iter().zip(names) {
        let (kind, dims, payload) = match p {
            Param::Real(v) => (KIND_REAL, vec![v.len()], floats(&[v])),
            Param::Binary { bits, .. } => (KIND_BINARY, bits.shape().to_vec(), pack_stream(bits)),
            Param::Norm(n) => (
                KIND_NORM,
                vec![n.gamma.len()],
                floats(&[&n.gamma, &n.beta, &n.mean, &n.var]),
            ),
            Param::Affine { scale, bias } => (KIND_AFFINE, vec![scale.len()], floats(&[scale, bias])),
        };
        if kind == KIND_BINARY {
            report.binary_payload_bytes += payload.len();
            report.binary_as_f32_bytes += 4 * dims.iter().product::<usize>();
        } else {
            report.real_payload_bytes += payload.len();
        }
        let start = out.len();
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    report.total_bytes = out.len();
    Ok((out, report))
}

pub fn decode_model(bytes: &[u8]) -> Result<(Model, TrainingMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.pos = 4;
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header_end = r.pos;
    let crc = r.u32("header checksum")?;
    if crc32fast::hash(&bytes[..header_end]) != crc {
        return Err(Error::Checksum {
            section: "header".into(),
        });
    }
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Malformed(format!("header: {e}")))?;
    let spec = ArchSpec::from_canonical_text(&header.arch)?;
    let plan = crate::net::Plan::compile(&spec)?;
    let count = r.u32("blob count")? as usize;
    if count != plan.params.len() {
        return Err(Error::Malformed(format!(
            "{count} blobs for an architecture with {} parameter slots",
            plan.params.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (i, expected_name) in plan.names.iter().enumerate() {
        let section = format!("blob {i} ({expected_name})");
        let start = r.pos;
        let kind = r.take(1, &section)?[0];
        let name_len = u16::from_le_bytes(r.take(2, &section)?.try_into().unwrap()) as usize;
        let name = r.take(name_len, &section)?;
        let ndim = r.take(1, &section)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32(&section)? as usize);
        }
        let len = u64::from_le_bytes(r.take(8, &section)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Malformed(format!("{section}: payload too large")))?;
        let payload = r.take(len, &section)?;
        let end = r.pos;
        let crc = r.u32(&section)?;
        if crc32fast::hash(&bytes[start..end]) != crc {
            return Err(Error::Checksum { section });
        }
        if name != expected_name.as_bytes() {
            return Err(Error::Malformed(format!(
                "{section}: found blob named {:?}",
                String::from_utf8_lossy(name)
            )));
        }
        params.push(decode_blob(kind, dims, payload).map_err(|m| Error::Malformed(format!("{section}: {m}")))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }
    let model = Model::from_parts(spec, params)?;
    Ok((model, header.meta))
}

fn decode_blob(kind: u8, dims: Vec<usize>, payload: &[u8]) -> std::result::Result<Param, String> {
    let n: usize = dims.iter().product();
    match kind {
        KIND_REAL => Ok(Param::Real(read_floats(payload, n, 1)?.remove(0))),
        KIND_BINARY => {
            let words = n.div_ceil(WORD_BITS);
            if payload.len() != words * 8 {
                return Err(format!("expected {} payload bytes, found {}", words * 8, payload.len()));
            }
            let stream: Vec<u64> = payload
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let signs: Vec<bool> = (0..n).map(|i| stream[i / 64] >> (i % 64) & 1 == 1).collect();
            let bits = BitTensor::from_signs(dims, &signs).map_err(|e| e.to_string())?;
            Ok(Param::Binary { bits, latent: None })
        }
        KIND_NORM => {
            let mut v = read_floats(payload, n, 4)?.into_iter();
            Ok(Param::Norm(NormParams {
                gamma: v.next().unwrap(),
                beta: v.next().unwrap(),
                mean: v.next().unwrap(),
                var: v.next().unwrap(),
            }))
        }
        KIND_AFFINE => {
            let mut v = read_floats(payload, n, 2)?.into_iter();
            Ok(Param::Affine {
                scale: v.next().unwrap(),
                bias: v.next().unwrap(),
            })
        }
        other => Err(format!("unknown blob kind {other}")),
    }
}

fn floats(parts: &[&Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len() * 4).sum());
    for p in parts {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_floats(payload: &[u8], n: usize, arrays: usize) -> std::result::Result<Vec<Vec<f32>>, String> {
    if payload.len() != n * arrays * 4 {
        return Err(format!(
            "expected {} payload bytes, found {}",
            n * arrays * 4,
            payload.len()
        ));
    }
    let all: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((0..arrays).map(|a| all[a * n..(a + 1) * n].to_vec()).collect())
}

fn pack_stream(bits: &BitTensor) -> Vec<u8> {
    let n = bits.len();
    let mut stream = vec![0u64; n.div_ceil(WORD_BITS)];
    for i in 0..n {
        if bits.get(i) {
            stream[i / 64] |= 1 << (i % 64);
        }
    }
    stream.iter().flat_map(|w| w.to_le_bytes()).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                section: section.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}
