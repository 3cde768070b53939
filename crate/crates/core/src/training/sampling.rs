//! Foreground-aware patch sampling and geometric/intensity augmentation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{crop_reflect, VolumeSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub labels: Tensor<u16>,
    /// Chosen centre voxel in volume coordinates.
    pub center: [usize; 3],
    /// Patch origin in volume coordinates; negative or overhanging when the
    /// volume is smaller than the patch and reflection fills the gap.
    pub origin: [isize; 3],
}

/// Draws one patch. With probability `fg_prob` the centre is a uniformly
/// chosen foreground voxel, otherwise a uniformly chosen voxel. The window
/// is centred there and shifted to stay inside the volume; volumes smaller
/// than the patch are reflect-padded symmetrically first.
pub fn sample_patch<R: Rng>(
    sample: &VolumeSample,
    patch: [usize; 3],
    fg_prob: f64,
    rng: &mut R,
) -> Patch {
    let ext = sample.extents();
    let want_fg = rng.random_bool(fg_prob.clamp(0.0, 1.0));
    let flat = |i: usize| [i / (ext[1] * ext[2]), i / ext[2] % ext[1], i % ext[2]];
    let fg_count = if want_fg {
        sample.labels.data().iter().filter(|&&l| l != 0).count()
    } else {
        0
    };
    let center = if fg_count > 0 {
        let k = rng.random_range(0..fg_count);
        let idx = sample
            .labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .nth(k)
            .map(|(i, _)| i)
            .expect("k-th foreground voxel");
        flat(idx)
    } else {
        [0, 1, 2].map(|a| rng.random_range(0..ext[a]))
    };
    let origin = [0, 1, 2].map(|a| {
        let padded = ext[a].max(patch[a]);
        let before = ((padded - ext[a]) / 2) as isize;
        let c = center[a] as isize + before;
        let o = (c - (patch[a] / 2) as isize).clamp(0, (padded - patch[a]) as isize);
        o - before
    });
    Patch {
        image: crop_reflect(&sample.image, origin, patch),
        labels: crop_reflect(&sample.labels, origin, patch),
        center,
        origin,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Per-axis mirror probability.
    pub mirror_prob: f64,
    /// Probability of a 90° rotation in a random axis plane.
    pub rotate_prob: f64,
    pub noise_prob: f64,
    /// Noise standard deviation is drawn from `U[0, noise_sd_max]`.
    pub noise_sd_max: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mirror_prob: 0.5,
            rotate_prob: 0.5,
            noise_prob: 1.0,
            noise_sd_max: 0.1,
            scale_prob: 1.0,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            mirror_prob: 0.0,
            rotate_prob: 0.0,
            noise_prob: 0.0,
            noise_sd_max: 0.0,
            scale_prob: 0.0,
            scale_range: [1.0, 1.0],
        }
    }
}

/// Reverses one axis of a `[D, H, W]` volume.
pub fn flip<T: Copy>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    permute_flip(t, [0, 1, 2], [axis == 0, axis == 1, axis == 2])
}

/// Output axis `k` reads input axis `perm[k]`, reversed where `rev[k]`.
fn permute_flip<T: Copy>(t: &Tensor<T>, perm: [usize; 3], rev: [bool; 3]) -> Tensor<T> {
    let s = t.shape();
    let strides = [s[1] * s[2], s[2], 1];
    let os = perm.map(|p| s[p]);
    let data = t.data();
    let mut out = Vec::with_capacity(data.len());
    let src = |k: usize, i: usize| {
        let i = if rev[k] { os[k] - 1 - i } else { i };
        i * strides[perm[k]]
    };
    for z in 0..os[0] {
        let bz = src(0, z);
        for y in 0..os[1] {
            let by = bz + src(1, y);
            out.extend((0..os[2]).map(|x| data[by + src(2, x)]));
        }
    }
    Tensor::from_vec(os.to_vec(), out).expect("permuted shape")
}

/// Rotates by `k·90°` in the plane of axes `(a, b)`.
pub fn rot90<T: Copy>(t: &Tensor<T>, a: usize, b: usize, k: usize) -> Tensor<T> {
    let mut perm = [0, 1, 2];
    match k % 4 {
        0 => t.clone(),
        2 => {
            let mut rev = [false; 3];
            rev[a] = true;
            rev[b] = true;
            permute_flip(t, perm, rev)
        }
        r => {
            perm.swap(a, b);
            let mut rev = [false; 3];
            rev[if r == 1 { b } else { a }] = true;
            permute_flip(t, perm, rev)
        }
    }
}

/// Applies the configured transforms. Labels only receive the geometric
/// ones. Quarter turns are restricted to square planes so the patch shape
/// is preserved; other planes use a half turn.
pub fn augment<R: Rng>(
    mut image: Tensor<f32>,
    mut labels: Tensor<u16>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Tensor<f32>, Tensor<u16>) {
    for axis in 0..3 {
        if cfg.mirror_prob > 0.0 && rng.random_bool(cfg.mirror_prob) {
            image = flip(&image, axis);
            labels = flip(&labels, axis);
        }
    }
    if cfg.rotate_prob > 0.0 && rng.random_bool(cfg.rotate_prob) {
        let (a, b) = [(0, 1), (0, 2), (1, 2)][rng.random_range(0..3)];
        let s = image.shape();
        let k = if s[a] == s[b] { rng.random_range(1..4) } else { 2 };
        image = rot90(&image, a, b, k);
        labels = rot90(&labels, a, b, k);
    }
    if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob) {
        let sd = rng.random_range(0.0..=cfg.noise_sd_max) as f32;
        for v in image.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    if cfg.scale_prob > 0.0 && rng.random_bool(cfg.scale_prob) {
        let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]) as f32;
        for v in image.data_mut() {
            *v *= s;
        }
    }
    (image, labels)
}
