mod common;

use common::*;
use eebnn::tensor::{binarize, binary_conv2d, binary_dense, xnor_dot, BitTensor, ConvGeometry, Padding, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn binarize_matches_sign_loop() {
    let mut r = rng(11);
    let vals: Vec<f32> = (0..1000).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let t = Tensor::new(vec![1000], vals.clone()).unwrap();
    let back = binarize(&t).unwrap().unpack();
    let expected: Vec<f32> = vals.iter().map(|&v| sign(v)).collect();
    assert_eq!(back.data(), expected.as_slice());
}

#[test]
fn binarize_tie_and_error() {
    let t = Tensor::new(vec![3], vec![0.3, -0.2, 0.0]).unwrap();
    assert_eq!(binarize(&t).unwrap().unpack().data(), &[1.0, -1.0, 1.0]);
    let bad = BitTensor::pack(vec![3], &[1.0, f32::NAN, 2.0]);
    assert!(matches!(bad, Err(eebnn::Error::NonFinite { index: 1 })));
}

#[test]
fn dot_across_word_boundary() {
    let mut r = rng(5);
    let a = random_pm1(&mut r, 67);
    let b = random_pm1(&mut r, 67);
    let oracle: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let pa = BitTensor::pack(vec![67], &a).unwrap();
    let pb = BitTensor::pack(vec![67], &b).unwrap();
    assert_eq!(xnor_dot(&pa, &pb).unwrap() as f64, oracle);
}

#[test]
fn conv_8x8x16_matches_oracle() {
    let mut r = rng(21);
    let x = random_pm1(&mut r, 8 * 8 * 16);
    let w = random_pm1(&mut r, 8 * 3 * 3 * 16);
    for (pad, same) in [(Padding::Same, true), (Padding::Valid, false)] {
        let g = ConvGeometry::new(3, 1, pad, 16, 8).unwrap();
        let got = binary_conv2d(
            &BitTensor::pack(vec![8, 8, 16], &x).unwrap(),
            &BitTensor::pack(vec![8, 3, 3, 16], &w).unwrap(),
            &g,
        )
        .unwrap();
        let (oracle, oh, ow) = naive_conv(&x, (8, 8, 16), &w, 8, 3, 1, same, -1.0);
        assert_eq!(got.shape(), &[oh, ow, 8]);
        let got64: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
        assert_eq!(got64, oracle);
    }
}

#[test]
fn dense_130_by_10_matches_oracle() {
    let mut r = rng(3);
    let x = random_pm1(&mut r, 130);
    let w = random_pm1(&mut r, 10 * 130);
    let got = binary_dense(
        &BitTensor::pack(vec![130], &x).unwrap(),
        &BitTensor::pack(vec![10, 130], &w).unwrap(),
    )
    .unwrap();
    let got64: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
    assert_eq!(got64, naive_matvec(&x, &w, 10));
}

#[test]
fn pad_bits_never_reach_results() {
    let mut r = rng(8);
    let (h, w, c, o) = (5, 6, 70, 3);
    let x = random_pm1(&mut r, h * w * c);
    let wt = random_pm1(&mut r, o * 9 * c);
    let g = ConvGeometry::new(3, 2, Padding::Same, c, o).unwrap();
    let px = BitTensor::pack(vec![h, w, c], &x).unwrap();
    let pw = BitTensor::pack(vec![o, 3, 3, c], &wt).unwrap();
    let clean = binary_conv2d(&px, &pw, &g).unwrap();
    let (mut sx, mut sw) = (px.clone(), pw.clone());
    sx.scramble_pad_bits();
    sw.scramble_pad_bits();
    assert_ne!(sx.words(), px.words());
    assert_eq!(binary_conv2d(&sx, &sw, &g).unwrap(), clean);
    assert_eq!(binary_conv2d(&sx, &pw, &g).unwrap(), clean);

    let v = random_pm1(&mut r, 100);
    let dw = random_pm1(&mut r, 4 * 100);
    let pv = BitTensor::pack(vec![100], &v).unwrap();
    let pd = BitTensor::pack(vec![4, 100], &dw).unwrap();
    let (mut sv, mut sd) = (pv.clone(), pd.clone());
    sv.scramble_pad_bits();
    sd.scramble_pad_bits();
    assert_eq!(binary_dense(&sv, &sd).unwrap(), binary_dense(&pv, &pd).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_roundtrip_is_sign(rows in 1usize..4, inner in 1usize..140, seed in any::<u64>()) {
        let mut r = rng(seed);
        let vals: Vec<f32> = (0..rows * inner).map(|_| r.gen_range(-2.0f32..2.0)).collect();
        let p = BitTensor::pack(vec![rows, inner], &vals).unwrap();
        prop_assert_eq!(p.words().len(), rows * inner.div_ceil(64));
        let expected: Vec<f32> = vals.iter().map(|&v| sign(v)).collect();
        let back = p.unpack();
        prop_assert_eq!(back.data(), expected.as_slice());
    }

    #[test]
    fn dot_parity_and_range(n in 1usize..300, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = BitTensor::pack(vec![n], &random_pm1(&mut r, n)).unwrap();
        let b = BitTensor::pack(vec![n], &random_pm1(&mut r, n)).unwrap();
        let d = xnor_dot(&a, &b).unwrap();
        prop_assert!(d.abs() <= n as i64);
        prop_assert_eq!((d - n as i64).rem_euclid(2), 0);
    }

    #[test]
    fn conv_matches_oracle(
        h in 1usize..7, w in 1usize..7, c in 1usize..140, o in 1usize..4,
        k in 1usize..4, stride in 1usize..3, same in any::<bool>(), seed in any::<u64>()
    ) {
        prop_assume!(same || (h >= k && w >= k));
        let mut r = rng(seed);
        let x = random_pm1(&mut r, h * w * c);
        let wt = random_pm1(&mut r, o * k * k * c);
        let pad = if same { Padding::Same } else { Padding::Valid };
        let g = ConvGeometry::new(k, stride, pad, c, o).unwrap();
        let got = binary_conv2d(
            &BitTensor::pack(vec![h, w, c], &x).unwrap(),
            &BitTensor::pack(vec![o, k, k, c], &wt).unwrap(),
            &g,
        ).unwrap();
        let (oracle, oh, ow) = naive_conv(&x, (h, w, c), &wt, o, k, stride, same, -1.0);
        prop_assert_eq!(got.shape(), &[oh, ow, o][..]);
        let got64: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(got64, oracle);
    }

    #[test]
    fn dense_matches_oracle(n in 1usize..200, u in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_pm1(&mut r, n);
        let wt = random_pm1(&mut r, u * n);
        let got = binary_dense(
            &BitTensor::pack(vec![n], &x).unwrap(),
            &BitTensor::pack(vec![u, n], &wt).unwrap(),
        ).unwrap();
        let got64: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(got64, naive_matvec(&x, &wt, u));
    }
}
