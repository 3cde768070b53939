//! Fused soft-Dice + cross-entropy on channel logits.
//!
//! `loss = 0.5 · (1 − mean_k dice_k) + 0.5 · CE`, where Dice is computed
//! per class over the whole batch with the background class included and
//! CE is the voxel mean of `−log softmax(z)_y`.

use crate::error::{contract, Result};
use crate::tensor::{dims5, Element, Tensor};

use super::activation::softmax_channels_forward;

pub const DICE_SMOOTH: f64 = 1e-5;
const DICE_WEIGHT: f64 = 0.5;
const CE_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct DiceCeCache<T> {
    pub probs: Tensor<T>,
    /// `Σ p_k [y = k]` per class.
    pub intersection: Vec<f64>,
    /// `Σ p_k` per class.
    pub predicted: Vec<f64>,
    /// `Σ [y = k]` per class.
    pub target: Vec<f64>,
}

/// Per-term breakdown, exposed for logging and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceCeTerms {
    pub dice_loss: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

pub fn check_labels<T: Element>(logits: &Tensor<T>, labels: &Tensor<u16>) -> Result<[usize; 5]> {
    let dims = dims5(logits)?;
    let expected = [dims[0], dims[2], dims[3], dims[4]];
    contract!(
        labels.shape() == expected,
        "label shape {:?} does not match logits spatial shape {:?}",
        labels.shape(),
        expected
    );
    let k = dims[1];
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= k) {
        return Err(crate::Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(dims)
}

pub fn dice_ce_forward<T: Element>(
    logits: &Tensor<T>,
    labels: &Tensor<u16>,
) -> Result<(DiceCeTerms, DiceCeCache<T>)> {
    let [b, k, d, h, w] = check_labels(logits, labels)?;
    let vol = d * h * w;
    let probs = softmax_channels_forward(logits)?;
    let mut intersection = vec![0.0f64; k];
    let mut predicted = vec![0.0f64; k];
    let mut target = vec![0.0f64; k];
    let mut ce = 0.0f64;
    for s in 0..b {
        let lab = &labels.data()[s * vol..(s + 1) * vol];
        for c in 0..k {
            let plane = &probs.data()[(s * k + c) * vol..][..vol];
            predicted[c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let zs = &logits.data()[s * k * vol..(s + 1) * k * vol];
        for (v, &y) in lab.iter().enumerate() {
            let y = y as usize;
            intersection[y] += probs.data()[(s * k + y) * vol + v].as_f64();
            target[y] += 1.0;
            // log-softmax via log-sum-exp for the CE term.
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(zs[c * vol + v].as_f64());
            }
            let lse = m + (0..k)
                .map(|c| (zs[c * vol + v].as_f64() - m).exp())
                .sum::<f64>()
                .ln();
            ce += lse - zs[y * vol + v].as_f64();
        }
    }
    let n = (b * vol) as f64;
    let ce = ce / n;
    let mean_dice = (0..k)
        .map(|c| {
            (2.0 * intersection[c] + DICE_SMOOTH) / (predicted[c] + target[c] + DICE_SMOOTH)
        })
        .sum::<f64>()
        / k as f64;
    let dice_loss = 1.0 - mean_dice;
    let terms = DiceCeTerms {
        dice_loss,
        cross_entropy: ce,
        total: DICE_WEIGHT * dice_loss + CE_WEIGHT * ce,
    };
    Ok((
        terms,
        DiceCeCache {
            probs,
            intersection,
            predicted,
            target,
        },
    ))
}

/// Gradient of the loss with respect to the logits, scaled by `upstream`.
pub fn dice_ce_backward<T: Element>(
    cache: &DiceCeCache<T>,
    labels: &Tensor<u16>,
    upstream: T,
) -> Tensor<T> {
    let s = cache.probs.shape();
    let (b, k) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let n = (b * vol) as f64;
    // dL/dp_k(v) = a_k [y=k] + c_k
    let mut a = vec![0.0f64; k];
    let mut c0 = vec![0.0f64; k];
    for c in 0..k {
        let den = cache.predicted[c] + cache.target[c] + DICE_SMOOTH;
        let num = 2.0 * cache.intersection[c] + DICE_SMOOTH;
        let scale = -DICE_WEIGHT / k as f64 / (den * den);
        a[c] = scale * 2.0 * den;
        c0[c] = -scale * num;
    }
    let up = upstream.as_f64();
    let p = cache.probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut dp = vec![0.0f64; k];
    for sb in 0..b {
        for v in 0..vol {
            let y = labels.data()[sb * vol + v] as usize;
            let mut inner = 0.0f64;
            for c in 0..k {
                let pc = p[(sb * k + c) * vol + v].as_f64();
                dp[c] = c0[c] + if c == y { a[c] } else { 0.0 };
                inner += pc * dp[c];
            }
            for c in 0..k {
                let idx = (sb * k + c) * vol + v;
                let pc = p[idx].as_f64();
                let onehot = if c == y { 1.0 } else { 0.0 };
                let g = pc * (dp[c] - inner) + CE_WEIGHT * (pc - onehot) / n;
                grad[idx] = T::cst(up * g);
            }
        }
    }
    Tensor::from_vec(s.to_vec(), grad).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_correct_prediction_has_tiny_loss() {
        let labels = Tensor::from_vec(vec![1, 1, 2, 2], vec![0u16, 1, 1, 0]).unwrap();
        let mut logits = Tensor::zeros(vec![1, 2, 1, 2, 2]);
        for v in 0..4 {
            let y = labels.data()[v] as usize;
            logits.data_mut()[y * 4 + v] = 100.0f64;
        }
        let (terms, _) = dice_ce_forward(&logits, &labels).unwrap();
        assert!(terms.total <= 1e-3, "{terms:?}");
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let labels = Tensor::from_vec(vec![1, 1, 2, 2], vec![0u16, 1, 1, 0]).unwrap();
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 2, 2]);
        let (terms, _) = dice_ce_forward(&logits, &labels).unwrap();
        assert!((terms.cross_entropy - std::f64::consts::LN_2).abs() < 1e-15);
        // Each class: I = 2·0.5, P = 2, G = 2.
        let dice = (2.0 * 1.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        assert!((terms.dice_loss - (1.0 - dice)).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let labels = Tensor::from_vec(vec![1, 1, 1, 2], vec![0u16, 2]).unwrap();
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 1, 2]);
        assert!(dice_ce_forward(&logits, &labels).is_err());
    }
}
