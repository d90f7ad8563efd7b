mod oracles;

use camcls::tensor::conv2d;
use camcls::Tensor;
use oracles::{max_rel_err, naive_conv2d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_naive_reference_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..5);
        let o = rng.gen_range(1..5);
        let k = rng.gen_range(1..4) * 2 - 1;
        let h = rng.gen_range(k..k + 9);
        let w = rng.gen_range(k..k + 9);
        let stride = rng.gen_range(1..4);
        let pad = rng.gen_range(0..=k / 2 + 1);
        let input: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let kernel: Vec<f64> = (0..o * c * k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let (expected, shape) = naive_conv2d(&input, [n, c, h, w], &kernel, [o, c, k, k], stride, pad);
        let got = conv2d(
            &Tensor::new(vec![n, c, h, w], input).unwrap(),
            &Tensor::new(vec![o, c, k, k], kernel).unwrap(),
            stride,
            pad,
        )
        .unwrap();
        assert_eq!(got.shape(), shape, "case {case}");
        let err = max_rel_err(got.data(), &expected, 1e-12);
        assert!(err < 1e-5, "case {case}: relative error {err:e}");
    }
}

#[test]
fn mismatched_channels_are_rejected() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let k = Tensor::zeros(&[1, 3, 3, 3]);
    assert!(conv2d(&x, &k, 1, 1).is_err());
}
