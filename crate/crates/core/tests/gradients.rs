use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxelnext::gradcheck::{grad_check, Reduction};
use voxelnext::ops::{ConvSpec, GrnDivisor, GRN_EPS, INSTANCE_NORM_EPS};
use voxelnext::training::deep_supervision_loss;
use voxelnext::Tensor;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, shape: &[usize], k: usize) -> Tensor<u16> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(0..k) as u16).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Reduction {
    Reduction::Weighted(random(rng, shape, 1.0))
}

fn assert_pass(name: &str, r: voxelnext::gradcheck::GradCheckReport) {
    assert!(r.passed(), "{name}: worst relative error {:.3e} ({r:?})", r.worst());
    assert!(r.checked > 0, "{name}: nothing checked");
}

fn check_conv(specs: &[(ConvSpec, [usize; 5])], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (spec, xs) in specs {
        let x = random(&mut rng, xs, 1.0);
        let w = random(&mut rng, &spec.weight_shape(), 0.5);
        let b = random(&mut rng, &[spec.out_channels], 0.5);
        let ext = spec.output_extents([xs[2], xs[3], xs[4]]).unwrap();
        let red = weights(&mut rng, &[xs[0], spec.out_channels, ext[0], ext[1], ext[2]]);
        let s = *spec;
        let r = grad_check(|_, v| v[0].conv3d(v[1], Some(v[2]), &s), &[x, w, b], Some(&red), TOL).unwrap();
        assert_pass(&format!("{spec:?}"), r);
    }
}

#[test]
fn dense_convolution() {
    check_conv(
        &[
            (ConvSpec::new(1, 2, 3), [1, 1, 3, 3, 3]),
            (ConvSpec::new(2, 3, 3), [2, 2, 4, 3, 2]),
            (ConvSpec::new(3, 2, 1), [1, 3, 2, 2, 5]),
            (ConvSpec::new(2, 2, 3).with_padding(0), [1, 2, 4, 4, 3]),
            (ConvSpec::new(4, 2, 3).with_groups(2), [1, 4, 3, 3, 3]),
        ],
        1,
    );
}

#[test]
fn depthwise_convolution() {
    check_conv(
        &[
            (ConvSpec::depthwise(1, 3), [1, 1, 3, 3, 3]),
            (ConvSpec::depthwise(2, 3), [2, 2, 3, 2, 4]),
            (ConvSpec::depthwise(3, 5), [1, 3, 4, 4, 3]),
            (ConvSpec::depthwise(2, 1), [1, 2, 3, 3, 3]),
            (ConvSpec::depthwise(4, 3), [1, 4, 2, 3, 2]),
        ],
        2,
    );
}

#[test]
fn strided_convolution() {
    check_conv(
        &[
            (ConvSpec::new(1, 2, 3).with_stride(2), [1, 1, 4, 4, 4]),
            (ConvSpec::new(2, 2, 2).with_stride(2).with_padding(0), [1, 2, 4, 4, 2]),
            (ConvSpec::new(2, 3, 3).with_stride(2), [2, 2, 5, 3, 4]),
            (ConvSpec::depthwise(2, 3).with_stride(2), [1, 2, 4, 4, 4]),
            (ConvSpec::new(1, 1, 1).with_stride(2).with_padding(0), [1, 1, 4, 2, 4]),
        ],
        3,
    );
}

#[test]
fn transposed_convolution() {
    check_conv(
        &[
            (ConvSpec::new(2, 1, 3).with_stride(2).transposed(), [1, 2, 2, 2, 2]),
            (ConvSpec::new(1, 2, 2).with_stride(2).with_padding(0).transposed(), [1, 1, 2, 3, 2]),
            (ConvSpec::new(2, 2, 3).transposed(), [2, 2, 3, 2, 2]),
            (ConvSpec::new(3, 2, 3).with_stride(2).transposed(), [1, 3, 2, 1, 2]),
            (ConvSpec::depthwise(2, 3).with_stride(2).transposed(), [1, 2, 2, 2, 2]),
        ],
        4,
    );
}

const SHAPES: [[usize; 5]; 5] = [
    [1, 1, 2, 2, 2],
    [1, 3, 2, 3, 2],
    [2, 2, 3, 2, 2],
    [2, 4, 2, 2, 1],
    [1, 2, 4, 3, 3],
];

#[test]
fn instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in SHAPES {
        let x = random(&mut rng, &s, 2.0);
        let g = random(&mut rng, &[s[1]], 1.5);
        let b = random(&mut rng, &[s[1]], 1.0);
        let red = weights(&mut rng, &s);
        let r = grad_check(|_, v| v[0].instance_norm(v[1], v[2], INSTANCE_NORM_EPS), &[x, g, b], Some(&red), TOL).unwrap();
        assert_pass(&format!("instance_norm {s:?}"), r);
    }
}

#[test]
fn gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in SHAPES {
        let x = random(&mut rng, &s, 4.0);
        let red = weights(&mut rng, &s);
        let r = grad_check(|_, v| Ok(v[0].gelu()), &[x], Some(&red), TOL).unwrap();
        assert_pass(&format!("gelu {s:?}"), r);
    }
}

#[test]
fn grn_both_divisors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for mode in [GrnDivisor::Sum, GrnDivisor::Mean] {
        for s in SHAPES {
            let x = random(&mut rng, &s, 2.0);
            let g = random(&mut rng, &[s[1]], 1.0);
            let b = random(&mut rng, &[s[1]], 1.0);
            let red = weights(&mut rng, &s);
            let r = grad_check(|_, v| v[0].grn(v[1], v[2], mode, GRN_EPS), &[x, g, b], Some(&red), TOL).unwrap();
            assert_pass(&format!("grn {mode} {s:?}"), r);
        }
    }
}

#[test]
fn softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for s in [[1, 2, 2, 2, 2], [1, 3, 2, 3, 2], [2, 2, 3, 2, 2], [2, 4, 2, 2, 1], [1, 5, 3, 2, 2]] {
        let x = random(&mut rng, &s, 3.0);
        let red = weights(&mut rng, &s);
        let r = grad_check(|_, v| v[0].softmax_channels(), &[x], Some(&red), TOL).unwrap();
        assert_pass(&format!("softmax {s:?}"), r);
    }
}

#[test]
fn dice_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in [[1, 2, 2, 2, 2], [2, 3, 2, 2, 1], [1, 4, 3, 2, 2], [2, 2, 3, 3, 1], [1, 5, 2, 2, 2]] {
        let x = random(&mut rng, &s, 3.0);
        let y = labels(&mut rng, &[s[0], s[2], s[3], s[4]], s[1]);
        let r = grad_check(|_, v| v[0].dice_ce(&y), &[x], None, TOL).unwrap();
        assert_pass(&format!("dice_ce {s:?}"), r);
    }
}

#[test]
fn deep_supervision() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (b, k, e, levels) in [(1, 2, 4, 2), (2, 3, 4, 3), (1, 2, 8, 3), (1, 4, 4, 1), (2, 2, 8, 2)] {
        let y = labels(&mut rng, &[b, e, e, e], k);
        let xs: Vec<_> = (0..levels)
            .map(|l| random(&mut rng, &[b, k, e >> l, e >> l, e >> l], 3.0))
            .collect();
        let r = grad_check(|_, v| deep_supervision_loss(v, &y), &xs, None, TOL).unwrap();
        assert_pass(&format!("deep supervision b={b} k={k} e={e} levels={levels}"), r);
    }
}

#[test]
fn elementwise_helpers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in SHAPES {
        let a = random(&mut rng, &s, 2.0);
        let b = random(&mut rng, &s, 2.0);
        let r = grad_check(|_, v| Ok(v[0].mul(v[1])?.add(v[0])?.scale(0.7).sum()), &[a, b], None, TOL).unwrap();
        assert_pass(&format!("add/mul/scale {s:?}"), r);
    }
}
