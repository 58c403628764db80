mod common;

use common::*;
use eebnn::net::{Family, Model, NUM_EXITS};
use eebnn::runtime::{entropy, infer_early_exit, infer_fixed_exit, DecisionRule};
use eebnn::train::argmax;
use eebnn::Error;
use proptest::prelude::*;

fn model(family: Family, classes: usize, seed: u64) -> Model {
    Model::build(&small_spec(family, classes), seed).unwrap()
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.25; 4]).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
    assert_eq!(entropy(&[0.0, 0.0, 1.0]).unwrap(), 0.0);
    assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(entropy(&[0.5, 0.4]), Err(Error::Distribution(_))));
    assert!(matches!(entropy(&[1.2, -0.2]), Err(Error::Distribution(_))));
}

#[test]
fn delta_zero_always_runs_to_the_end() {
    let m = model(Family::QuickNet, 4, 1);
    let full = m.exit_costs();
    for s in 0..20 {
        let r = infer_early_exit(&m, &random_feature(20, 16, s), &DecisionRule::entropy(0.0).unwrap()).unwrap();
        assert_eq!(r.exit_index, NUM_EXITS);
        assert_eq!(r.trail.len(), NUM_EXITS);
        assert_eq!(r.macs, full[NUM_EXITS - 1]);
    }
}

#[test]
fn delta_above_log_c_always_leaves_first() {
    let classes = 4;
    let m = model(Family::BinaryDenseNet, classes, 2);
    let rule = DecisionRule::entropy((classes as f64).ln() + 0.01).unwrap();
    for s in 0..20 {
        let r = infer_early_exit(&m, &random_feature(20, 16, s), &rule).unwrap();
        assert_eq!(r.exit_index, 1);
        assert_eq!(r.trail.len(), 1);
        assert_eq!(r.macs, m.exit_costs()[0]);
    }
    let inf = infer_early_exit(&m, &random_feature(20, 16, 0), &DecisionRule::entropy(f64::INFINITY).unwrap()).unwrap();
    assert_eq!(inf.exit_index, 1);
}

#[test]
fn fixed_exit_agrees_with_extreme_thresholds() {
    let m = model(Family::MeliusNet, 5, 3);
    for s in 0..10 {
        let f = random_feature(20, 16, s);
        let last = infer_fixed_exit(&m, &f, NUM_EXITS).unwrap();
        let zero = infer_early_exit(&m, &f, &DecisionRule::entropy(0.0).unwrap()).unwrap();
        assert_eq!(last.prediction, zero.prediction);
        let first = infer_fixed_exit(&m, &f, 1).unwrap();
        let inf = infer_early_exit(&m, &f, &DecisionRule::entropy(f64::INFINITY).unwrap()).unwrap();
        assert_eq!(first.prediction, inf.prediction);
        for k in 1..=NUM_EXITS {
            assert_eq!(infer_fixed_exit(&m, &f, k).unwrap().macs, m.exit_costs()[k - 1]);
        }
    }
    let f = random_feature(20, 16, 0);
    assert!(matches!(infer_fixed_exit(&m, &f, 0), Err(Error::ExitIndex { .. })));
    assert!(matches!(infer_fixed_exit(&m, &f, 6), Err(Error::ExitIndex { .. })));
}

#[test]
fn invalid_rules_and_shapes() {
    let m = model(Family::QuickNet, 3, 0);
    let f = random_feature(20, 16, 0);
    assert!(matches!(
        infer_early_exit(&m, &f, &DecisionRule::Entropy { delta: -1.0 }),
        Err(Error::Rule(_))
    ));
    let bad = DecisionRule::Confidence {
        threshold: 1.5,
        temperature: 1.0,
    };
    assert!(matches!(infer_early_exit(&m, &f, &bad), Err(Error::Rule(_))));
    assert!(infer_early_exit(&m, &random_feature(20, 12, 0), &DecisionRule::entropy(0.5).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exit_index_non_increasing_in_delta(fam in 0usize..4, seed in any::<u64>(), classes in 2usize..7) {
        let m = model(Family::ALL[fam], classes, seed);
        let f = random_feature(20, 16, seed ^ 5);
        let stack = m.forward_all_exits(&f).unwrap();
        let mut prev = usize::MAX;
        for d in [0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0] {
            let r = infer_early_exit(&m, &f, &DecisionRule::entropy(d).unwrap()).unwrap();
            prop_assert!(r.exit_index <= prev);
            prev = r.exit_index;
            // Chosen exit is the first accepted one, its prediction the
            // argmax of that exit's full-pass distribution.
            let e = r.exit_index;
            prop_assert_eq!(r.trail.len(), e);
            for (i, &h) in r.trail.iter().enumerate() {
                prop_assert_eq!(h, entropy(&stack.exits[i].probs).unwrap());
                prop_assert!(h >= 0.0 && h <= (classes as f64).ln());
                if i + 1 < e {
                    prop_assert!(h >= d);
                }
            }
            prop_assert!(e == NUM_EXITS || r.confidence < d);
            prop_assert_eq!(r.prediction, argmax(&stack.exits[e - 1].probs));
            prop_assert_eq!(r.macs, stack.cumulative_macs[e - 1]);
        }
    }

    #[test]
    fn confidence_rule_is_monotone_in_threshold(seed in any::<u64>(), t in 0.2f64..5.0) {
        let m = model(Family::BiRealNet, 4, seed);
        let f = random_feature(20, 16, seed ^ 9);
        let stack = m.forward_all_exits(&f).unwrap();
        let mut prev = 0;
        for s in [0.3, 0.5, 0.7, 0.9, 0.99, 1.0] {
            let rule = DecisionRule::Confidence { threshold: s, temperature: t };
            let r = infer_early_exit(&m, &f, &rule).unwrap();
            prop_assert!(r.exit_index >= prev);
            prev = r.exit_index;
            let mu = eebnn::net::softmax(&stack.exits[r.exit_index - 1].logits, t)
                .into_iter()
                .fold(0.0, f64::max);
            prop_assert_eq!(r.confidence, mu);
            prop_assert!(r.exit_index == NUM_EXITS || mu >= s);
            prop_assert_eq!(r.prediction, argmax(&stack.exits[r.exit_index - 1].probs));
        }
    }
}
