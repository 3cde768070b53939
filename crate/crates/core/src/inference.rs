//! Gaussian-weighted sliding-window prediction over whole volumes.

use crate::data::crop_reflect;
use crate::error::{contract, Result};
use crate::network::{Network, SPATIAL_MULTIPLE};
use crate::ops::softmax_channels;
use crate::tensor::Tensor;

pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_SIGMA_SCALE: f64 = 0.125;
const WEIGHT_FLOOR: f64 = 1e-3;

/// Separable Gaussian over a patch, centred at `(n-1)/2` with
/// `σ = n·sigma_scale` per axis, peak 1, floored at `1e-3`. Shape `[D, H, W]`.
pub fn gaussian_weight_map(patch: [usize; 3], sigma_scale: f64) -> Result<Tensor<f32>> {
    contract!(
        sigma_scale > 0.0 && sigma_scale.is_finite(),
        "sigma_scale must be positive, got {sigma_scale}"
    );
    contract!(!patch.contains(&0), "empty patch {patch:?}");
    let axes: Vec<Vec<f64>> = patch
        .iter()
        .map(|&n| {
            let c = (n as f64 - 1.0) / 2.0;
            let sigma = n as f64 * sigma_scale;
            let g: Vec<f64> = (0..n)
                .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect();
            let peak = g.iter().cloned().fold(0.0, f64::max);
            g.into_iter().map(|v| v / peak).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(patch.iter().product());
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                out.push((a * b * c).max(WEIGHT_FLOOR) as f32);
            }
        }
    }
    Tensor::from_vec(patch.to_vec(), out)
}

/// Window layout for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub patch_size: [usize; 3],
    /// Nominal step, `max(1, floor(patch·(1 − overlap)))`.
    pub step: [usize; 3],
    /// Extents after reflective padding up to the patch size.
    pub padded: [usize; 3],
    /// Padding added before the volume on each axis.
    pub pad_before: [usize; 3],
    /// Window origins in padded coordinates.
    pub origins: Vec<[usize; 3]>,
    pub weight_map: Tensor<f32>,
}

impl WindowPlan {
    /// Windows are spread evenly so the first starts at 0 and the last ends
    /// at the padded extent; neighbours are at most `step` apart.
    pub fn new(extents: [usize; 3], patch: [usize; 3], overlap: f64, sigma_scale: f64) -> Result<Self> {
        contract!(
            (0.0..1.0).contains(&overlap),
            "overlap must lie in [0, 1), got {overlap}"
        );
        contract!(!extents.contains(&0), "empty volume {extents:?}");
        let mut step = [0; 3];
        let mut padded = [0; 3];
        let mut pad_before = [0; 3];
        let mut starts: Vec<Vec<usize>> = Vec::with_capacity(3);
        for a in 0..3 {
            contract!(
                patch[a] > 0 && patch[a] % SPATIAL_MULTIPLE == 0,
                "patch extent {} is not a positive multiple of {SPATIAL_MULTIPLE}",
                patch[a]
            );
            step[a] = ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
            padded[a] = extents[a].max(patch[a]);
            pad_before[a] = (padded[a] - extents[a]) / 2;
            let span = padded[a] - patch[a];
            let n = span.div_ceil(step[a]) + 1;
            starts.push(if n == 1 {
                vec![0]
            } else {
                let actual = span as f64 / (n - 1) as f64;
                (0..n).map(|i| (i as f64 * actual).round() as usize).collect()
            });
        }
        let mut origins = Vec::new();
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &x in &starts[2] {
                    origins.push([z, y, x]);
                }
            }
        }
        Ok(Self {
            patch_size: patch,
            step,
            padded,
            pad_before,
            origins,
            weight_map: gaussian_weight_map(patch, sigma_scale)?,
        })
    }

    /// Number of windows covering each padded voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [d, h, w] = self.padded;
        let p = self.patch_size;
        let mut cov = vec![0u32; d * h * w];
        for o in &self.origins {
            for z in o[0]..o[0] + p[0] {
                for y in o[1]..o[1] + p[1] {
                    let row = (z * h + y) * w;
                    for c in &mut cov[row + o[2]..row + o[2] + p[2]] {
                        *c += 1;
                    }
                }
            }
        }
        cov
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub patch_size: [usize; 3],
    pub overlap: f64,
    pub sigma_scale: f64,
    /// Accumulate in f64 instead of f32.
    pub wide_accumulator: bool,
}

impl InferenceConfig {
    pub fn new(patch_size: [usize; 3]) -> Self {
        Self {
            patch_size,
            overlap: DEFAULT_OVERLAP,
            sigma_scale: DEFAULT_SIGMA_SCALE,
            wide_accumulator: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per-voxel argmax, `[D, H, W]`.
    pub labels: Tensor<u16>,
    /// Softmax probabilities, `[K, D, H, W]`.
    pub probs: Tensor<f32>,
}

fn accumulate<A: Copy + std::ops::AddAssign + From<f32>>(
    net: &Network<f32>,
    image: &Tensor<f32>,
    plan: &WindowPlan,
) -> Result<(Vec<A>, Vec<A>, usize)> {
    let k = net.config().num_classes;
    let [pd, ph, pw] = plan.padded;
    let p = plan.patch_size;
    let pvol: usize = p.iter().product();
    let mut num = vec![A::from(0.0); k * pd * ph * pw];
    let mut den = vec![A::from(0.0); pd * ph * pw];
    let wmap = plan.weight_map.data();
    for o in &plan.origins {
        let origin = [0, 1, 2].map(|a| o[a] as isize - plan.pad_before[a] as isize);
        let patch = crop_reflect(image, origin, p);
        let input = patch.reshape([1, 1, p[0], p[1], p[2]])?;
        let probs = softmax_channels(&net.predict_full(&input)?)?;
        let pr = probs.data();
        for z in 0..p[0] {
            for y in 0..p[1] {
                let row = ((o[0] + z) * ph + o[1] + y) * pw + o[2];
                let prow = (z * p[1] + y) * p[2];
                for x in 0..p[2] {
                    den[row + x] += A::from(wmap[prow + x]);
                }
                for c in 0..k {
                    let dst = &mut num[c * pd * ph * pw + row..][..p[2]];
                    let src = &pr[c * pvol + prow..][..p[2]];
                    for x in 0..p[2] {
                        dst[x] += A::from(src[x] * wmap[prow + x]);
                    }
                }
            }
        }
    }
    Ok((num, den, k))
}

fn finish<A: Copy + Into<f64>>(
    num: &[A],
    den: &[A],
    k: usize,
    plan: &WindowPlan,
    extents: [usize; 3],
) -> Result<Prediction> {
    let [_, ph, pw] = plan.padded;
    let [d, h, w] = extents;
    let pb = plan.pad_before;
    let pvol: usize = plan.padded.iter().product();
    let vol = d * h * w;
    let mut probs = vec![0f32; k * vol];
    let mut labels = vec![0u16; vol];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let src = ((z + pb[0]) * ph + y + pb[1]) * pw + x + pb[2];
                let dst = (z * h + y) * w + x;
                let total: f64 = den[src].into();
                let mut best = (0usize, f64::NEG_INFINITY);
                for c in 0..k {
                    let v = num[c * pvol + src].into() / total;
                    probs[c * vol + dst] = v as f32;
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                labels[dst] = best.0 as u16;
            }
        }
    }
    Ok(Prediction {
        labels: Tensor::from_vec(extents.to_vec(), labels)?,
        probs: Tensor::from_vec(vec![k, d, h, w], probs)?,
    })
}

/// Predicts a `[D, H, W]` image: each window's full-resolution softmax is
/// weighted by the Gaussian map and accumulated; the result is the
/// normalized sum, cropped back to the input extents.
pub fn sliding_window_predict(
    net: &Network<f32>,
    image: &Tensor<f32>,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    contract!(
        image.ndim() == 3,
        "image must be [D, H, W], got {:?}",
        image.shape()
    );
    let s = image.shape();
    let extents = [s[0], s[1], s[2]];
    let plan = WindowPlan::new(extents, cfg.patch_size, cfg.overlap, cfg.sigma_scale)?;
    if cfg.wide_accumulator {
        let (num, den, k) = accumulate::<f64>(net, image, &plan)?;
        finish(&num, &den, k, &plan, extents)
    } else {
        let (num, den, k) = accumulate::<f32>(net, image, &plan)?;
        finish(&num, &den, k, &plan, extents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_patch_weight() {
        let m = gaussian_weight_map([1, 1, 1], 0.125).unwrap();
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn plan_covers_volume() {
        let plan = WindowPlan::new([40, 20, 16], [16, 16, 16], 0.5, 0.125).unwrap();
        assert_eq!(plan.padded, [40, 20, 16]);
        assert!(plan.coverage().iter().all(|&c| c >= 1));
        assert_eq!(plan.origins.first(), Some(&[0, 0, 0]));
        assert_eq!(plan.origins.last(), Some(&[24, 4, 0]));
    }

    #[test]
    fn small_volume_is_padded() {
        let plan = WindowPlan::new([10, 16, 16], [16, 16, 16], 0.5, 0.125).unwrap();
        assert_eq!(plan.padded, [16, 16, 16]);
        assert_eq!(plan.pad_before, [3, 0, 0]);
        assert_eq!(plan.origins.len(), 1);
    }

    #[test]
    fn bad_arguments() {
        assert!(WindowPlan::new([16; 3], [16; 3], 1.0, 0.125).is_err());
        assert!(WindowPlan::new([16; 3], [12, 16, 16], 0.5, 0.125).is_err());
        assert!(gaussian_weight_map([4; 3], 0.0).is_err());
    }
}
