mod common;

use common::*;
use eebnn::io::*;
use eebnn::net::{ArchSpec, Family, Model, Param};
use eebnn::Error;

fn trained_like(seed: u64) -> Model {
    // Randomize norm and head values so the round trip covers non-default floats.
    let m = Model::build(&ArchSpec::toy(Family::QuickNet, 6).unwrap(), seed).unwrap();
    let spec = m.spec().clone();
    let mut r = 0.37f32;
    let mut next = || {
        r = (r * 3.71 + 0.13).fract();
        r
    };
    let params = m
        .into_params()
        .into_iter()
        .map(|p| match p {
            Param::Norm(mut n) => {
                n.gamma.iter_mut().for_each(|v| *v = 0.5 + next());
                n.beta.iter_mut().for_each(|v| *v = next() - 0.5);
                n.mean.iter_mut().for_each(|v| *v = next() - 0.5);
                n.var.iter_mut().for_each(|v| *v = 0.1 + next());
                Param::Norm(n)
            }
            Param::Affine { scale, bias } => Param::Affine {
                scale: scale.iter().map(|_| next()).collect(),
                bias: bias.iter().map(|_| next() - 0.5).collect(),
            },
            other => other,
        })
        .collect();
    Model::from_parts(spec, params).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let m = trained_like(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eebn");
    let meta = TrainingMeta::for_run(&RunConfig::default()).unwrap();
    save_model(&m, &meta, &path).unwrap();
    let (back, meta_back) = load_model(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.spec(), m.spec());
    assert_eq!(back.fingerprint(), m.fingerprint());
    for (a, b) in m.params().iter().zip(back.params()) {
        match (a, b) {
            (Param::Binary { bits: x, .. }, Param::Binary { bits: y, latent }) => {
                assert_eq!(x, y);
                assert!(latent.is_none());
            }
            _ => assert_eq!(a, b),
        }
    }
    for seed in 0..3 {
        let f = random_feature(98, 64, seed);
        let (s1, s2) = (m.forward_all_exits(&f).unwrap(), back.forward_all_exits(&f).unwrap());
        assert_eq!(s1, s2);
        for (e1, e2) in s1.exits.iter().zip(&s2.exits) {
            assert!(e1.probs.iter().zip(&e2.probs).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn corruption_is_rejected() {
    let m = Model::build(&small_spec(Family::QuickNet, 4), 1).unwrap();
    let (bytes, _) = encode_model(&m, &TrainingMeta::default()).unwrap();
    assert!(decode_model(&bytes).is_ok());

    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(decode_model(&b), Err(Error::BadMagic)));

    let mut b = bytes.clone();
    b[4] = 9;
    assert!(matches!(decode_model(&b), Err(Error::Version { found: 9, .. })));

    // Header bit flip, then single-bit flips sampled across the blobs.
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut b = bytes.clone();
    b[12] ^= 0x20;
    assert!(matches!(decode_model(&b), Err(Error::Checksum { .. })));
    let body = 10 + header_len + 4 + 4;
    for pos in (body..bytes.len()).step_by(97) {
        let mut b = bytes.clone();
        b[pos] ^= 0x01;
        assert!(decode_model(&b).is_err(), "flip at {pos} accepted");
    }

    for cut in [2, 8, body - 2, body + 3, bytes.len() - 1] {
        assert!(
            matches!(decode_model(&bytes[..cut]), Err(Error::Truncated { .. } | Error::BadMagic)),
            "cut {cut}"
        );
    }

    let mut b = bytes.clone();
    b.push(0);
    assert!(matches!(decode_model(&b), Err(Error::Malformed(_))));

    // Valid checksums over an unparseable header.
    let mut b = Vec::new();
    b.extend_from_slice(&MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&3u32.to_le_bytes());
    b.extend_from_slice(b"{x}");
    let crc = crc32(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode_model(&b), Err(Error::Malformed(_))));
}

// Bitwise CRC-32 (reflected, poly 0xEDB88320).
fn crc32(data: &[u8]) -> u32 {
    let mut c = !0u32;
    for &byte in data {
        c ^= byte as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { (c >> 1) ^ 0xEDB8_8320 } else { c >> 1 };
        }
    }
    !c
}

#[test]
fn crc_matches_check_value() {
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
}

#[test]
fn binary_payload_is_a_thirtysecond() {
    let m = Model::build(&ArchSpec::toy(Family::QuickNet, 12).unwrap(), 0).unwrap();
    let (bytes, rep) = encode_model(&m, &TrainingMeta::default()).unwrap();
    assert_eq!(rep.total_bytes, bytes.len());
    let words: usize = m
        .params()
        .iter()
        .filter_map(|p| match p {
            Param::Binary { bits, .. } => Some(bits.len().div_ceil(64) * 8),
            _ => None,
        })
        .sum();
    assert_eq!(rep.binary_payload_bytes, words);
    let ratio = rep.binary_payload_bytes as f64 / rep.binary_as_f32_bytes as f64;
    assert!((ratio - 1.0 / 32.0).abs() < 1e-3, "{ratio}");
    assert!(rep.binary_payload_bytes * 32 >= rep.binary_as_f32_bytes);
}

#[test]
fn run_config_round_trip() {
    let mut cfg = RunConfig::default();
    cfg.arch.stage_widths = vec![8, 16];
    cfg.arch.stage_blocks = vec![3, 2];
    cfg.train.epochs = 4;
    cfg.sweep.timing = false;
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml("[arch]\nwidths = [1]\n"), Err(Error::TomlDe(_))));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    cfg.write(&p).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    let spec = cfg.arch_spec(5).unwrap();
    assert_eq!(spec.stage_widths, vec![8, 16]);

    let meta = TrainingMeta::for_run(&cfg).unwrap();
    assert_eq!(meta.epochs, 4);
    assert_eq!(meta.frontend().unwrap(), cfg.frontend);
    assert!(TrainingMeta::default().frontend().is_none());
}
