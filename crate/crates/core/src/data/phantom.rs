//! Synthetic phantoms: ellipsoidal organs with spherical lesions, and a
//! context task whose target class depends on a distant anchor.
//!
//! Class layout, regular mode: `0` background, `1..=m` organ classes, and
//! the last class for lesions when lesions are requested. Context mode uses
//! exactly four classes: `0` background, `1` anchor, `2` target with the
//! anchor present, `3` target with the anchor absent. Anchor and target are
//! flat discs touching opposite depth faces. Targets of classes 2 and 3
//! share the intensity model of class 2, so only the anchor tells them
//! apart.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    /// Inclusive range of organ counts.
    pub organ_count: [usize; 2],
    /// Range of organ semi-axes in voxels (anchor semi-axes in context mode).
    pub organ_radius: [f64; 2],
    pub lesion_count: [usize; 2],
    /// Range of lesion radii in voxels (target depth semi-axes in context
    /// mode).
    pub lesion_radius: [f64; 2],
    pub context_pair: bool,
    /// Context mode: range of the in-plane (H, W) semi-axes of anchor and
    /// target, which are flat discs along the depth axis.
    pub disc_radius: [f64; 2],
    pub class_means: Vec<f32>,
    pub class_sds: Vec<f32>,
    pub noise_sd: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// 32³, background + one organ.
    pub fn organ(seed: u64) -> Self {
        Self {
            extents: [32; 3],
            spacing: [1.0; 3],
            num_classes: 2,
            organ_count: [1, 1],
            organ_radius: [7.0, 12.0],
            lesion_count: [0, 0],
            lesion_radius: [1.5, 3.0],
            context_pair: false,
            disc_radius: [0.0, 0.0],
            class_means: vec![0.0, 1.0],
            class_sds: vec![0.1, 0.1],
            noise_sd: 0.4,
            seed,
        }
    }

    /// 32³, background + three organ classes + lesions.
    pub fn multi_organ(seed: u64) -> Self {
        Self {
            extents: [32; 3],
            spacing: [1.0; 3],
            num_classes: 5,
            organ_count: [3, 3],
            organ_radius: [5.0, 9.0],
            lesion_count: [1, 3],
            lesion_radius: [1.5, 3.0],
            context_pair: false,
            disc_radius: [0.0, 0.0],
            class_means: vec![0.0, 1.0, 1.8, 2.6, 0.3],
            class_sds: vec![0.1; 5],
            noise_sd: 0.35,
            seed,
        }
    }

    /// 32³, background + one organ + lesions.
    pub fn lesion(seed: u64) -> Self {
        Self {
            extents: [32; 3],
            spacing: [1.0; 3],
            num_classes: 3,
            organ_count: [1, 1],
            organ_radius: [8.0, 12.0],
            lesion_count: [1, 3],
            lesion_radius: [1.5, 3.0],
            context_pair: false,
            disc_radius: [0.0, 0.0],
            class_means: vec![0.0, 1.4, 0.3],
            class_sds: vec![0.1; 3],
            noise_sd: 0.35,
            seed,
        }
    }

    /// 48³ context-pair task.
    pub fn context(seed: u64) -> Self {
        Self {
            extents: [48; 3],
            spacing: [1.0; 3],
            num_classes: 4,
            organ_count: [1, 1],
            organ_radius: [3.0, 4.0],
            lesion_count: [1, 1],
            lesion_radius: [2.0, 3.0],
            context_pair: true,
            disc_radius: [6.0, 10.0],
            class_means: vec![0.0, 1.5, 1.0, 1.0],
            class_sds: vec![0.1; 4],
            noise_sd: 0.3,
            seed,
        }
    }

    /// Looks up a preset by name: `organ`, `multi`, `lesion`, `context`.
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "organ" => Some(Self::organ(seed)),
            "multi" => Some(Self::multi_organ(seed)),
            "lesion" => Some(Self::lesion(seed)),
            "context" => Some(Self::context(seed)),
            _ => None,
        }
    }

    pub fn has_lesions(&self) -> bool {
        !self.context_pair && self.lesion_count[1] > 0
    }

    pub fn lesion_class(&self) -> Option<u16> {
        self.has_lesions().then(|| (self.num_classes - 1) as u16)
    }

    pub fn organ_classes(&self) -> usize {
        self.num_classes - 1 - usize::from(self.has_lesions())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if self.extents.contains(&0) {
            return bad("extents", format!("{:?} has a zero extent", self.extents));
        }
        if !self.spacing.iter().all(|&s| s > 0.0) {
            return bad("spacing", "must be positive".into());
        }
        if self.class_means.len() != self.num_classes || self.class_sds.len() != self.num_classes {
            return bad(
                "class_means",
                format!("need one mean and sd per class ({})", self.num_classes),
            );
        }
        for (name, r) in [
            ("organ_radius", self.organ_radius),
            ("lesion_radius", self.lesion_radius),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(name, format!("{r:?} is not a positive range"));
            }
        }
        if self.organ_count[0] > self.organ_count[1] || self.lesion_count[0] > self.lesion_count[1]
        {
            return bad("organ_count", "ranges must be ordered".into());
        }
        let min_ext = *self.extents.iter().min().expect("three extents") as f64;
        if 2.0 * self.organ_radius[1] + 1.0 > min_ext {
            return bad(
                "organ_radius",
                format!("organs of semi-axis {} do not fit", self.organ_radius[1]),
            );
        }
        if self.context_pair {
            if self.num_classes != 4 {
                return bad("num_classes", "context mode uses exactly 4 classes".into());
            }
            let r = self.disc_radius;
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad("disc_radius", format!("{r:?} is not a positive range"));
            }
            if 2.0 * r[1] + 1.0 > self.extents[1].min(self.extents[2]) as f64 {
                return bad("disc_radius", format!("discs of semi-axis {} do not fit", r[1]));
            }
            let d = self.extents[0] as f64;
            let gap = (d - 1.0 - 2.0 * self.organ_radius[1]) - 2.0 * self.lesion_radius[1] - 1.0;
            if gap < d / 2.0 {
                return bad(
                    "extents",
                    "context mode needs the anchor at least half the volume away".into(),
                );
            }
        } else {
            if self.lesion_radius[1] >= self.organ_radius[0] {
                return bad(
                    "lesion_radius",
                    "lesion radius must stay below the smallest organ semi-axis".into(),
                );
            }
            if self.num_classes < 2 || self.organ_classes() == 0 {
                return bad("num_classes", "need at least one organ class".into());
            }
            if self.organ_count[0] < self.organ_classes() {
                return bad(
                    "organ_count",
                    format!("at least {} organs needed, one per class", self.organ_classes()),
                );
            }
        }
        Ok(())
    }
}

struct Canvas {
    ext: [usize; 3],
    labels: Vec<u16>,
}

impl Canvas {
    /// Paints an axis-aligned ellipsoid; returns the voxel count painted.
    fn ellipsoid(&mut self, center: [f64; 3], axes: [f64; 3], label: u16) -> usize {
        let [d, h, w] = self.ext;
        let range = |a: usize, n: usize| {
            let lo = (center[a] - axes[a]).floor().max(0.0) as usize;
            let hi = ((center[a] + axes[a]).ceil() as usize).min(n - 1);
            lo..=hi
        };
        let mut painted = 0;
        for z in range(0, d) {
            for y in range(1, h) {
                for x in range(2, w) {
                    let q = ((z as f64 - center[0]) / axes[0]).powi(2)
                        + ((y as f64 - center[1]) / axes[1]).powi(2)
                        + ((x as f64 - center[2]) / axes[2]).powi(2);
                    if q <= 1.0 {
                        self.labels[(z * h + y) * w + x] = label;
                        painted += 1;
                    }
                }
            }
        }
        painted
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Centre coordinate keeping a half-width `r` inside `[0, n-1]`.
fn centre(rng: &mut ChaCha8Rng, r: f64, n: usize) -> f64 {
    let hi = n as f64 - 1.0 - r;
    if hi <= r {
        (n as f64 - 1.0) / 2.0
    } else {
        uniform(rng, r, hi)
    }
}

/// Draws the labels; returns `Err(reason)` when a declared class ended up
/// empty.
fn draw_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> std::result::Result<Canvas, String> {
    let ext = spec.extents;
    let mut canvas = Canvas {
        ext,
        labels: vec![0; ext.iter().product()],
    };
    let mut required = Vec::new();
    if spec.context_pair {
        let (a, disc) = (spec.organ_radius, spec.disc_radius);
        let axes = [
            uniform(rng, a[0], a[1]),
            uniform(rng, disc[0], disc[1]),
            uniform(rng, disc[0], disc[1]),
        ];
        let anchor_present = rng.random_bool(0.5);
        if anchor_present {
            let c = [
                ext[0] as f64 - 1.0 - axes[0],
                centre(rng, axes[1], ext[1]),
                centre(rng, axes[2], ext[2]),
            ];
            canvas.ellipsoid(c, axes, 1);
            required.push(1);
        }
        let t = [
            uniform(rng, spec.lesion_radius[0], spec.lesion_radius[1]),
            uniform(rng, disc[0], disc[1]),
            uniform(rng, disc[0], disc[1]),
        ];
        let c = [t[0], centre(rng, t[1], ext[1]), centre(rng, t[2], ext[2])];
        let target = if anchor_present { 2 } else { 3 };
        canvas.ellipsoid(c, t, target);
        required.push(target);
    } else {
        let m = spec.organ_classes();
        let n = rng.random_range(spec.organ_count[0]..=spec.organ_count[1]);
        let mut organs = Vec::with_capacity(n);
        for i in 0..n {
            let r = spec.organ_radius;
            let axes = [uniform(rng, r[0], r[1]), uniform(rng, r[0], r[1]), uniform(rng, r[0], r[1])];
            let c = [
                centre(rng, axes[0], ext[0]),
                centre(rng, axes[1], ext[1]),
                centre(rng, axes[2], ext[2]),
            ];
            canvas.ellipsoid(c, axes, (i % m + 1) as u16);
            organs.push((c, axes));
        }
        required.extend(1..=m as u16);
        if let Some(lesion) = spec.lesion_class() {
            let k = rng.random_range(spec.lesion_count[0]..=spec.lesion_count[1]);
            for _ in 0..k {
                let (c, axes) = organs[rng.random_range(0..organs.len())];
                let r = uniform(rng, spec.lesion_radius[0], spec.lesion_radius[1]);
                let u = loop {
                    let u: [f64; 3] = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ];
                    if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break u;
                    }
                };
                let lc = [0, 1, 2].map(|a| c[a] + u[a] * (axes[a] - r).max(0.0));
                canvas.ellipsoid(lc, [r; 3], lesion);
            }
            if k > 0 {
                required.push(lesion);
            }
        }
    }
    let mut present = vec![false; spec.num_classes];
    for &l in &canvas.labels {
        present[l as usize] = true;
    }
    match required.iter().find(|&&c| !present[c as usize]) {
        Some(c) => Err(format!("class {c} has no voxels")),
        None => Ok(canvas),
    }
}

/// Deterministic phantom for `spec.seed` and the given case id. Placement
/// that leaves a declared class empty is retried with derived seeds.
pub fn generate_phantom(spec: &PhantomSpec, case_id: &str) -> Result<VolumeSample> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        let seed = if attempt == 0 {
            spec.seed
        } else {
            derive_seed(spec.seed, &format!("retry/{attempt}"))
        };
        let mut rng = rng_for(seed, "phantom");
        match draw_labels(spec, &mut rng) {
            Ok(canvas) => {
                let image = canvas
                    .labels
                    .iter()
                    .map(|&l| {
                        let k = if spec.context_pair && l == 3 { 2 } else { l as usize };
                        let z: f32 = rng.sample(StandardNormal);
                        let e: f32 = rng.sample(StandardNormal);
                        spec.class_means[k] + spec.class_sds[k] * z + spec.noise_sd * e
                    })
                    .collect();
                let shape = spec.extents.to_vec();
                return VolumeSample::new(
                    Tensor::from_vec(shape.clone(), image)?,
                    Tensor::from_vec(shape, canvas.labels)?,
                    spec.spacing,
                    case_id,
                );
            }
            Err(reason) => last = reason,
        }
    }
    Err(Error::Placement {
        attempts: MAX_PLACEMENT_ATTEMPTS,
        reason: last,
    })
}
