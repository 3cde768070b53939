//! Instance normalization over the spatial axes of each (sample, channel).

use crate::error::{contract, Result};
use crate::tensor::{dims5, Element, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_affine<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 5]> {
    let dims = dims5(x)?;
    contract!(
        gamma.shape() == [dims[1]] && beta.shape() == [dims[1]],
        "norm affine shapes {:?}/{:?} do not match {} channels",
        gamma.shape(),
        beta.shape(),
        dims[1]
    );
    contract!(dims[2] * dims[3] * dims[4] >= 1, "empty spatial extent");
    Ok(dims)
}

/// `γ · (x − μ) / sqrt(σ² + eps) + β` with the biased variance per plane.
pub fn instance_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, InstanceNormCache<T>)> {
    contract!(eps > 0.0, "instance norm eps must be positive");
    let dims = check_affine(x, gamma, beta)?;
    let c = dims[1];
    let vol = dims[2] * dims[3] * dims[4];
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(dims[0] * c);
    for (idx, plane) in x.data().chunks(vol).enumerate() {
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / vol as f64;
        let var = plane
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / vol as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[idx % c], beta.data()[idx % c]);
        let (m, s) = (T::cst(mean), T::cst(istd));
        let base = idx * vol;
        for (i, &v) in plane.iter().enumerate() {
            let xhat = (v - m) * s;
            normalized[base + i] = xhat;
            out[base + i] = g * xhat + b;
        }
        inv_std.push(s);
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), out)?,
        InstanceNormCache {
            normalized: Tensor::from_vec(shape, normalized)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dγ, dβ)`.
pub fn instance_norm_backward<T: Element>(
    cache: &InstanceNormCache<T>,
    gamma: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dims = dims5(dout)?;
    contract!(
        dout.shape() == cache.normalized.shape(),
        "upstream gradient shape mismatch"
    );
    let c = dims[1];
    let vol = dims[2] * dims[3] * dims[4];
    let n = vol as f64;
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (idx, (dy, xh)) in dout
        .data()
        .chunks(vol)
        .zip(cache.normalized.data().chunks(vol))
        .enumerate()
    {
        let ch = idx % c;
        let g = gamma.data()[ch].as_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for (&a, &b) in dy.iter().zip(xh) {
            sum_dy += a.as_f64();
            sum_dy_xh += a.as_f64() * b.as_f64();
        }
        dgamma[ch] += sum_dy_xh;
        dbeta[ch] += sum_dy;
        let istd = cache.inv_std[idx];
        let mean_dxh = T::cst(g * sum_dy / n);
        let mean_dxh_xh = T::cst(g * sum_dy_xh / n);
        let gt = T::cst(g);
        let out = &mut dx[idx * vol..(idx + 1) * vol];
        for ((o, &a), &b) in out.iter_mut().zip(dy).zip(xh) {
            *o = istd * (gt * a - mean_dxh - b * mean_dxh_xh);
        }
    }
    Ok((
        Tensor::from_vec(dout.shape().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dgamma.into_iter().map(T::cst).collect())?,
        Tensor::from_vec(vec![c], dbeta.into_iter().map(T::cst).collect())?,
    ))
}
