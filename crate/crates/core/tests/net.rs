mod common;

use common::*;
use eebnn::net::{ArchSpec, Family, Model, Param, NUM_EXITS};
use eebnn::train::{Graph, NormMode, Quantizer, TrainParams};
use eebnn::Error;
use proptest::prelude::*;

fn conv(k: usize, c: usize, o: usize) -> usize {
    k * k * c * o
}

#[test]
fn toy_parameter_count_closed_form() {
    let classes = 6;
    let spec = ArchSpec::toy(Family::QuickNet, classes).unwrap();
    assert_eq!(spec.exit_placements, vec![1, 3, 4, 5, 6]);
    let bn = |c: usize| 2 * c;
    let trunk = conv(3, 1, 32) + bn(32)
        + 2 * (conv(3, 32, 32) + bn(32))
        + conv(1, 32, 64) + bn(64) + conv(3, 32, 64) + bn(64)
        + conv(3, 64, 64) + bn(64)
        + conv(1, 64, 128) + bn(128) + conv(3, 64, 128) + bn(128)
        + conv(3, 128, 128) + bn(128);
    let heads: usize = [32, 64, 64, 128, 128]
        .iter()
        .map(|&f| bn(f) + f * classes + 2 * classes)
        .sum();
    let model = Model::build(&spec, 0).unwrap();
    assert_eq!(model.param_count(), trunk + heads);
}

#[test]
fn toy_exit_costs_closed_form() {
    let spec = ArchSpec::toy(Family::QuickNet, 6).unwrap();
    let model = Model::build(&spec, 0).unwrap();
    // 98×64 → stride-2 stem 49×32 → pool 25×16 → 13×8 → 7×4.
    let stem = 49 * 32 * conv(3, 1, 32);
    let b1 = 25 * 16 * conv(3, 32, 32);
    let b3 = 13 * 8 * conv(1, 32, 64) + 13 * 8 * conv(3, 32, 64);
    let b4 = 13 * 8 * conv(3, 64, 64);
    let b5 = 7 * 4 * conv(1, 64, 128) + 7 * 4 * conv(3, 64, 128);
    let b6 = 7 * 4 * conv(3, 128, 128);
    let head = |f: usize| f * 6;
    let e1 = stem + b1 + head(32);
    let e2 = e1 + b1 + b3 + head(64);
    let e3 = e2 + b4 + head(64);
    let e4 = e3 + b5 + head(128);
    let e5 = e4 + b6 + head(128);
    let expected: Vec<u64> = [e1, e2, e3, e4, e5].iter().map(|&v| v as u64).collect();
    assert_eq!(model.exit_costs(), expected);
    let stack = model.forward_all_exits(&random_feature(98, 64, 1)).unwrap();
    assert_eq!(stack.cumulative_macs, expected);
}

#[test]
fn build_is_seeded() {
    let spec = small_spec(Family::QuickNet, 4);
    assert_eq!(Model::build(&spec, 9).unwrap(), Model::build(&spec, 9).unwrap());
    assert_ne!(Model::build(&spec, 9).unwrap(), Model::build(&spec, 10).unwrap());
}

#[test]
fn binary_weights_are_sign_of_latent() {
    let model = Model::build(&small_spec(Family::MeliusNet, 3), 2).unwrap();
    for p in model.params() {
        if let Param::Binary { bits, latent } = p {
            let latent = latent.as_ref().unwrap();
            for (i, &v) in latent.iter().enumerate() {
                assert_eq!(bits.get(i), v >= 0.0);
            }
        }
        if let Param::Norm(n) = p {
            assert!(n.var.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn invalid_specs_rejected() {
    assert!(matches!(
        ArchSpec::new(Family::QuickNet, vec![0, 8], vec![2, 3], 4),
        Err(Error::Arch(_))
    ));
    assert!(ArchSpec::new(Family::QuickNet, vec![8], vec![4], 4).is_err());
    let mut spec = small_spec(Family::QuickNet, 4);
    spec.exit_placements = vec![1, 2, 2, 4, 5];
    assert!(Model::build(&spec, 0).is_err());
    spec.exit_placements = vec![1, 2, 3, 4, 4];
    assert!(Model::build(&spec, 0).is_err());
    spec.exit_placements = vec![1, 2, 3, 4];
    assert!(Model::build(&spec, 0).is_err());
}

#[test]
fn shape_mismatch_rejected() {
    let model = Model::build(&small_spec(Family::QuickNet, 4), 0).unwrap();
    assert!(matches!(model.forward_all_exits(&random_feature(20, 15, 0)), Err(Error::Shape(_))));
    // Longer clips are accepted: pooling removes the time extent.
    assert!(model.forward_all_exits(&random_feature(41, 16, 0)).is_ok());
}

#[test]
fn every_family_emits_five_distributions() {
    for family in Family::ALL {
        let spec = small_spec(family, 5);
        let model = Model::build(&spec, 4).unwrap();
        let stack = model.forward_all_exits(&random_feature(20, 16, 7)).unwrap();
        assert_eq!(stack.len(), NUM_EXITS);
        for p in stack.distributions() {
            assert_eq!(p.len(), 5);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(stack.cumulative_macs.windows(2).all(|w| w[0] < w[1]), "{family:?}");
    }
}

/// The f64 training graph with frozen statistics, truncated at each exit, is
/// an independent implementation of the same network.
#[test]
fn truncated_graph_matches_each_exit() {
    for family in Family::ALL {
        let spec = small_spec(family, 4);
        let model = Model::build(&spec, 12).unwrap();
        let feat = random_feature(20, 16, 3);
        let stack = model.forward_all_exits(&feat).unwrap();
        let params = TrainParams::from_model(&model);
        for k in 1..=NUM_EXITS {
            let g = Graph::new(model.plan(), Quantizer::Sign, NormMode::Running).truncated(k).unwrap();
            let tape = g.forward(&params, &[&feat]).unwrap();
            assert_eq!(tape.num_exits(), k);
            let logits = tape.logits(k - 1, 0);
            let expected = &stack.exits[k - 1].logits;
            for (a, b) in logits.iter().zip(expected) {
                assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0), "{family:?} exit {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn prefix_and_resume_agree_with_full_pass() {
    let model = Model::build(&small_spec(Family::BiRealNet, 4), 5).unwrap();
    let feat = random_feature(20, 16, 8);
    let full = model.forward_all_exits(&feat).unwrap();
    let (last, st) = model.forward_prefix(&feat, NUM_EXITS).unwrap();
    assert_eq!(last, full.exits[NUM_EXITS - 1]);
    assert_eq!(st.macs(), *full.cumulative_macs.last().unwrap());

    let (_, s1) = model.forward_prefix(&feat, 1).unwrap();
    let (r2, s2) = model.resume_prefix(s1, 2).unwrap();
    let (d2, ds2) = model.forward_prefix(&feat, 2).unwrap();
    assert_eq!(r2, d2);
    assert_eq!(s2.macs(), ds2.macs());

    let (mut out, mut st) = model.forward_prefix(&feat, 1).unwrap();
    assert_eq!(out, full.exits[0]);
    for e in 2..=NUM_EXITS {
        (out, st) = model.resume_prefix(st, e).unwrap();
        assert_eq!(out, full.exits[e - 1]);
        assert_eq!(st.macs(), full.cumulative_macs[e - 1]);
    }
}

#[test]
fn resume_rejects_foreign_or_stale_state() {
    let a = Model::build(&small_spec(Family::QuickNet, 4), 1).unwrap();
    let b = Model::build(&small_spec(Family::QuickNet, 4), 2).unwrap();
    let feat = random_feature(20, 16, 0);
    let (_, s) = a.forward_prefix(&feat, 2).unwrap();
    assert!(matches!(b.resume_prefix(s.clone(), 3), Err(Error::PrefixState(_))));
    assert!(matches!(a.resume_prefix(s.clone(), 2), Err(Error::PrefixState(_))));
    assert!(a.resume_prefix(s, 3).is_ok());
    assert!(matches!(a.forward_prefix(&feat, 0), Err(Error::ExitIndex { .. })));
    assert!(matches!(a.forward_prefix(&feat, 6), Err(Error::ExitIndex { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn distributions_valid_and_costs_increasing(
        fam in 0usize..4, classes in 2usize..8, seed in any::<u64>(), scale in 0.01f32..50.0
    ) {
        let family = Family::ALL[fam];
        let model = Model::build(&small_spec(family, classes), seed).unwrap();
        let mut feat = random_feature(20, 16, seed ^ 1);
        feat.data.iter_mut().for_each(|v| *v *= scale);
        let stack = model.forward_all_exits(&feat).unwrap();
        for p in stack.distributions() {
            prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(stack.cumulative_macs.windows(2).all(|w| w[0] < w[1]));
    }
}
