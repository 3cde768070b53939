//! Exact GELU and channel softmax.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{contract, Result};
use crate::tensor::{dims5, Element, Tensor};

/// Standard normal CDF.
#[inline]
pub fn phi_cdf<T: Element>(x: T) -> T {
    T::cst(0.5) * (T::one() + (x * T::cst(FRAC_1_SQRT_2)).erf())
}

/// `x · Φ(x)` using the erf form, not the tanh approximation.
pub fn gelu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * phi_cdf(v))
}

/// Forward pass that also returns `Φ(x)` for reuse in the backward pass.
pub fn gelu_forward_with_cdf<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let cdf = x.map(phi_cdf);
    let out = Tensor::from_vec(
        x.shape().to_vec(),
        x.data().iter().zip(cdf.data()).map(|(&v, &c)| v * c).collect(),
    )
    .expect("same shape");
    (out, cdf)
}

/// `dout · (Φ(x) + x·φ(x))` given the cached `Φ(x)`.
pub fn gelu_backward<T: Element>(x: &Tensor<T>, cdf: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let inv_sqrt_2pi = T::cst(1.0 / (2.0 * PI).sqrt());
    let half = T::cst(0.5);
    let data = x
        .data()
        .iter()
        .zip(cdf.data())
        .zip(dout.data())
        .map(|((&v, &c), &g)| {
            let pdf = inv_sqrt_2pi * (-half * v * v).exp_fast();
            g * (c + v * pdf)
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

/// Softmax over the channel axis of a `[B, C, ...]` tensor, max-subtracted.
pub fn softmax_channels_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(
        x.ndim() >= 2 && x.shape()[1] >= 1,
        "softmax needs a [B, C, ...] tensor, got {:?}",
        x.shape()
    );
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let vol: usize = x.shape()[2..].iter().product();
    let mut out = x.data().to_vec();
    let mut scratch = vec![T::zero(); vol];
    for s in 0..b {
        let block = &mut out[s * c * vol..(s + 1) * c * vol];
        scratch.iter_mut().for_each(|m| *m = T::neg_infinity());
        for ch in block.chunks(vol) {
            for (m, &v) in scratch.iter_mut().zip(ch) {
                *m = m.max(v);
            }
        }
        for ch in block.chunks_mut(vol) {
            for (v, &m) in ch.iter_mut().zip(&scratch) {
                *v = (*v - m).exp();
            }
        }
        scratch.iter_mut().for_each(|m| *m = T::zero());
        for ch in block.chunks(vol) {
            for (s, &v) in scratch.iter_mut().zip(ch) {
                *s += v;
            }
        }
        for ch in block.chunks_mut(vol) {
            for (v, &s) in ch.iter_mut().zip(&scratch) {
                *v = *v / s;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// `dx_c = y_c (dy_c − Σ_k y_k dy_k)` per voxel.
pub fn softmax_channels_backward<T: Element>(y: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (y.shape()[0], y.shape()[1]);
    let vol: usize = y.shape()[2..].iter().product();
    let mut dx = vec![T::zero(); y.len()];
    let mut dotp = vec![T::zero(); vol];
    for s in 0..b {
        let range = s * c * vol..(s + 1) * c * vol;
        let (ys, gs) = (&y.data()[range.clone()], &dout.data()[range.clone()]);
        dotp.iter_mut().for_each(|v| *v = T::zero());
        for (yc, gc) in ys.chunks(vol).zip(gs.chunks(vol)) {
            for ((d, &a), &g) in dotp.iter_mut().zip(yc).zip(gc) {
                *d += a * g;
            }
        }
        for ((dc, yc), gc) in dx[range].chunks_mut(vol).zip(ys.chunks(vol)).zip(gs.chunks(vol)) {
            for (((o, &a), &g), &d) in dc.iter_mut().zip(yc).zip(gc).zip(&dotp) {
                *o = a * (g - d);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx).expect("same shape")
}

/// Softmax restricted to 5-D feature maps.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    dims5(x)?;
    softmax_channels_forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::from_vec(vec![3], vec![0.0f64, 10.0, 1.0]).unwrap();
        let y = gelu_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // Φ(1) = 0.5 (1 + erf(1/√2)) = 0.841344746068543.
        assert!((y.data()[2] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let one = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![3.0f64, -7.0]).unwrap();
        assert!(softmax_channels(&one).unwrap().data().iter().all(|&v| v == 1.0));

        let even = Tensor::from_vec(vec![1, 2, 1, 1, 1], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_channels(&even).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::from_vec(vec![1, 3, 1, 1, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for k in 0..3 {
            assert!((y.data()[k] - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let x = Tensor::from_vec(vec![2, 3, 1, 2, 2], data.clone()).unwrap();
        let shifted: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, v)| v + (i % 4) as f64 * 100.0)
            .collect();
        let xs = Tensor::from_vec(vec![2, 3, 1, 2, 2], shifted).unwrap();
        let (y, ys) = (softmax_channels(&x).unwrap(), softmax_channels(&xs).unwrap());
        for b in 0..2 {
            for v in 0..4 {
                let s: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 4 + v]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    let i = (b * 3 + c) * 4 + v;
                    assert!((y.data()[i] - ys.data()[i]).abs() < 1e-9);
                }
            }
        }
    }
}
