//! Global Response Normalization for volumetric feature maps.
//!
//! For each sample `b` and channel `i`, with `n_i = ‖x_{b,i}‖₂` taken over
//! all voxels:
//!
//! ```text
//! N_i = n_i / (divisor + eps),   divisor = Σ_j n_j        (Sum)
//!                                divisor = (1/C) Σ_j n_j  (Mean)
//! out = γ_i · x · N_i + β_i + x
//! ```
//!
//! With `γ = β = 0` the layer is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{dims5, Element, Tensor};

pub const GRN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrnDivisor {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for GrnDivisor {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown GRN divisor `{other}` (expected sum|mean)")),
        }
    }
}

impl std::fmt::Display for GrnDivisor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GrnCache<T> {
    /// `n_{b,i}`, row-major over `[B, C]`.
    pub norms: Vec<T>,
    /// `N_{b,i}`.
    pub factors: Vec<T>,
    /// `divisor_b + eps`.
    pub denominators: Vec<T>,
}

fn divisor_scale<T: Element>(mode: GrnDivisor, channels: usize) -> T {
    match mode {
        GrnDivisor::Sum => T::one(),
        GrnDivisor::Mean => T::one() / T::cst(channels as f64),
    }
}

/// Normalization factors `N_{b,i}` alone.
pub fn grn_factors<T: Element>(x: &Tensor<T>, mode: GrnDivisor, eps: f64) -> Result<GrnCache<T>> {
    contract!(eps > 0.0, "GRN eps must be positive");
    let [b, c, d, h, w] = dims5(x)?;
    contract!(c >= 1, "GRN needs at least one channel");
    let vol = d * h * w;
    let norms: Vec<T> = x
        .data()
        .chunks(vol)
        .map(|p| T::cst(p.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()))
        .collect();
    let scale = divisor_scale::<T>(mode, c);
    let mut factors = Vec::with_capacity(b * c);
    let mut denominators = Vec::with_capacity(b);
    for s in 0..b {
        let row = &norms[s * c..(s + 1) * c];
        let total: T = row.iter().copied().sum();
        let den = scale * total + T::cst(eps);
        denominators.push(den);
        factors.extend(row.iter().map(|&n| n / den));
    }
    Ok(GrnCache {
        norms,
        factors,
        denominators,
    })
}

pub fn grn_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: GrnDivisor,
    eps: f64,
) -> Result<(Tensor<T>, GrnCache<T>)> {
    let [_, c, d, h, w] = dims5(x)?;
    contract!(
        gamma.shape() == [c] && beta.shape() == [c],
        "GRN γ/β shapes {:?}/{:?} do not match {} channels",
        gamma.shape(),
        beta.shape(),
        c
    );
    let cache = grn_factors(x, mode, eps)?;
    let vol = d * h * w;
    let mut out = x.data().to_vec();
    for (idx, plane) in out.chunks_mut(vol).enumerate() {
        let ch = idx % c;
        let scale = gamma.data()[ch] * cache.factors[idx] + T::one();
        let shift = beta.data()[ch];
        for v in plane.iter_mut() {
            *v = *v * scale + shift;
        }
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, cache))
}

/// Returns `(dx, dγ, dβ)`.
pub fn grn_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &GrnCache<T>,
    mode: GrnDivisor,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, d, h, w] = dims5(x)?;
    contract!(dout.shape() == x.shape(), "upstream gradient shape mismatch");
    let vol = d * h * w;
    let scale = divisor_scale::<T>(mode, c);

    // S_{b,i} = Σ_v g·x and Σ_v g per plane.
    let mut gx = vec![T::zero(); b * c];
    let mut gsum = vec![0.0f64; b * c];
    for (idx, (xp, gp)) in x.data().chunks(vol).zip(dout.data().chunks(vol)).enumerate() {
        let mut s = 0.0f64;
        let mut t = 0.0f64;
        for (&xv, &gv) in xp.iter().zip(gp) {
            s += xv.as_f64() * gv.as_f64();
            t += gv.as_f64();
        }
        gx[idx] = T::cst(s);
        gsum[idx] = t;
    }

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dnorm = vec![T::zero(); b * c];
    for s in 0..b {
        let den = cache.denominators[s];
        let mut coupling = T::zero();
        for i in 0..c {
            let idx = s * c + i;
            let dfac = gamma.data()[i] * gx[idx];
            dgamma[i] += (gx[idx] * cache.factors[idx]).as_f64();
            dbeta[i] += gsum[idx];
            coupling += dfac * cache.norms[idx];
        }
        let coupling = coupling * scale / (den * den);
        for i in 0..c {
            let idx = s * c + i;
            dnorm[idx] = gamma.data()[i] * gx[idx] / den - coupling;
        }
    }

    let mut dx = vec![T::zero(); x.len()];
    for (idx, ((o, xp), gp)) in dx
        .chunks_mut(vol)
        .zip(x.data().chunks(vol))
        .zip(dout.data().chunks(vol))
        .enumerate()
    {
        let ch = idx % c;
        let direct = gamma.data()[ch] * cache.factors[idx] + T::one();
        let n = cache.norms[idx];
        let through_norm = if n > T::zero() {
            dnorm[idx] / n
        } else {
            T::zero()
        };
        for ((ov, &xv), &gv) in o.iter_mut().zip(xp).zip(gp) {
            *ov = gv * direct + through_norm * xv;
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dgamma.into_iter().map(T::cst).collect())?,
        Tensor::from_vec(vec![c], dbeta.into_iter().map(T::cst).collect())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(g: &[f64], b: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_vec(vec![g.len()], g.to_vec()).unwrap(),
            Tensor::from_vec(vec![b.len()], b.to_vec()).unwrap(),
        )
    }

    #[test]
    fn zero_params_are_identity() {
        let x = Tensor::from_vec(
            vec![2, 3, 1, 2, 2],
            (0..24).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let (g, b) = params(&[0.0; 3], &[0.0; 3]);
        for mode in [GrnDivisor::Sum, GrnDivisor::Mean] {
            let (y, _) = grn_forward(&x, &g, &b, mode, GRN_EPS).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn single_channel_roughly_doubles() {
        let x = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let (g, b) = params(&[1.0], &[0.0]);
        let (y, cache) = grn_forward(&x, &g, &b, GrnDivisor::Sum, GRN_EPS).unwrap();
        let n = (1.0f64 + 4.0 + 0.25).sqrt();
        assert!((cache.factors[0] - n / (n + GRN_EPS)).abs() < 1e-15);
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - 2.0 * i).abs() < 1e-5);
        }
    }

    #[test]
    fn hand_computed_two_channel_case() {
        // Channel 0 = (3, 4), channel 1 = (0, 0): n = (5, 0).
        let x = Tensor::from_vec(vec![1, 2, 1, 1, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (g, b) = params(&[0.5, 2.0], &[0.1, -0.3]);
        let (y, cache) = grn_forward(&x, &g, &b, GrnDivisor::Sum, GRN_EPS).unwrap();
        let n0 = 5.0 / (5.0 + GRN_EPS);
        assert_eq!(cache.norms, vec![5.0, 0.0]);
        assert!((cache.factors[0] - n0).abs() < 1e-15);
        assert_eq!(cache.factors[1], 0.0);
        let want = [
            0.5 * 3.0 * n0 + 0.1 + 3.0,
            0.5 * 4.0 * n0 + 0.1 + 4.0,
            -0.3,
            -0.3,
        ];
        for (o, w) in y.data().iter().zip(want) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_input_gives_beta() {
        let x = Tensor::zeros(vec![1, 2, 1, 2, 1]);
        let (g, b) = params(&[1.0, 1.0], &[0.5, -0.5]);
        let (y, cache) = grn_forward(&x, &g, &b, GrnDivisor::Sum, GRN_EPS).unwrap();
        assert!(cache.factors.iter().all(|&f| f == 0.0));
        assert_eq!(y.data(), &[0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn mean_divisor_is_c_times_sum_factor() {
        let x = Tensor::from_vec(vec![1, 4, 1, 1, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let s = grn_factors(&x, GrnDivisor::Sum, GRN_EPS).unwrap();
        let m = grn_factors(&x, GrnDivisor::Mean, GRN_EPS).unwrap();
        for (a, b) in s.factors.iter().zip(&m.factors) {
            assert!((b - 4.0 * a).abs() < 1e-6);
        }
    }
}
