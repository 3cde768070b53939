//! Volumes, preprocessing and synthetic phantoms.

mod io;
mod phantom;

pub use io::{
    read_manifest, read_volume, write_manifest, write_volume, ManifestEntry, VolumeHeader,
    VOLUME_FORMAT,
};
pub use phantom::{generate_phantom, PhantomSpec, MAX_PLACEMENT_ATTEMPTS};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Image and label volume (`[D, H, W]`) with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub image: Tensor<f32>,
    pub labels: Tensor<u16>,
    pub spacing: [f64; 3],
    pub case_id: String,
}

impl VolumeSample {
    pub fn new(
        image: Tensor<f32>,
        labels: Tensor<u16>,
        spacing: [f64; 3],
        case_id: impl Into<String>,
    ) -> Result<Self> {
        contract!(
            image.ndim() == 3,
            "image must be [D, H, W], got {:?}",
            image.shape()
        );
        contract!(
            image.shape() == labels.shape(),
            "image {:?} and labels {:?} differ in extent",
            image.shape(),
            labels.shape()
        );
        contract!(
            spacing.iter().all(|&s| s > 0.0 && s.is_finite()),
            "spacing must be positive, got {:?}",
            spacing
        );
        Ok(Self {
            image,
            labels,
            spacing,
            case_id: case_id.into(),
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.data().iter().copied().max().unwrap_or(0)
    }

    /// Voxel count of every class `0..num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in self.labels.data() {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

/// Standardizes to zero mean and unit population standard deviation.
/// Constant (or single-voxel) images become zeros with a warning.
pub fn zscore_normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let n = image.len();
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64;
    let var = image
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n.max(1) as f64;
    let sd = var.sqrt();
    if n < 2 || sd <= 0.0 || !sd.is_finite() {
        log::warn!("z-score normalization of a constant image ({n} voxels); returning zeros");
        return Tensor::zeros(image.shape().to_vec());
    }
    image.map(|v| ((v as f64 - mean) / sd) as f32)
}

/// Index-space position of output voxel `j` when resampling an axis from
/// spacing `from` to spacing `to` with voxel centres aligned at half-voxel
/// offsets, clamped to the input range.
fn source_coordinate(j: usize, from: f64, to: f64, n_in: usize) -> f64 {
    let x = (j as f64 + 0.5) * to / from - 0.5;
    x.clamp(0.0, (n_in - 1) as f64)
}

/// Resamples to isotropic `target_mm` spacing: trilinear for the image,
/// nearest-neighbour for the labels.
pub fn resample_isotropic(sample: &VolumeSample, target_mm: f64) -> Result<VolumeSample> {
    contract!(
        target_mm > 0.0 && target_mm.is_finite(),
        "target spacing must be positive, got {target_mm}"
    );
    let ext = sample.extents();
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        let n = (ext[a] as f64 * sample.spacing[a] / target_mm).round();
        contract!(
            n >= 1.0,
            "resampling axis {a} from {} voxels at {} mm to {target_mm} mm leaves no voxels",
            ext[a],
            sample.spacing[a]
        );
        out_ext[a] = n as usize;
    }
    // Per-axis interpolation tables: lower index, upper index, weight, nearest.
    let tables: Vec<Vec<(usize, usize, f64, usize)>> = (0..3)
        .map(|a| {
            (0..out_ext[a])
                .map(|j| {
                    let x = source_coordinate(j, sample.spacing[a], target_mm, ext[a]);
                    let lo = x.floor() as usize;
                    let hi = (lo + 1).min(ext[a] - 1);
                    let nearest = (x.round() as usize).min(ext[a] - 1);
                    (lo, hi, x - lo as f64, nearest)
                })
                .collect()
        })
        .collect();
    let [_, h, w] = ext;
    let src = sample.image.data();
    let lab = sample.labels.data();
    let at = |d: usize, y: usize, x: usize| src[(d * h + y) * w + x] as f64;
    let mut image = Vec::with_capacity(out_ext.iter().product());
    let mut labels = Vec::with_capacity(image.capacity());
    for &(d0, d1, fd, dn) in &tables[0] {
        for &(h0, h1, fh, hn) in &tables[1] {
            for &(w0, w1, fw, wn) in &tables[2] {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
                let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
                let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
                let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
                let v = lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd);
                image.push(v as f32);
                labels.push(lab[(dn * h + hn) * w + wn]);
            }
        }
    }
    let shape = out_ext.to_vec();
    VolumeSample::new(
        Tensor::from_vec(shape.clone(), image)?,
        Tensor::from_vec(shape, labels)?,
        [target_mm; 3],
        sample.case_id.clone(),
    )
}

/// Mirror index into `0..n` without repeating the edge voxel
/// (`-1 → 1`, `n → n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Crops a `size` block at `origin` from a `[D, H, W]` volume; voxels
/// outside the volume are filled by reflection.
pub fn crop_reflect<T: Copy>(src: &Tensor<T>, origin: [isize; 3], size: [usize; 3]) -> Tensor<T> {
    let s = src.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let data = src.data();
    let inside = (0..3).all(|a| origin[a] >= 0 && origin[a] as usize + size[a] <= s[a]);
    let mut out = Vec::with_capacity(size.iter().product());
    let xs: Vec<usize> = (0..size[2])
        .map(|x| reflect_index(origin[2] + x as isize, w))
        .collect();
    for z in 0..size[0] {
        let zz = reflect_index(origin[0] + z as isize, d);
        for y in 0..size[1] {
            let yy = reflect_index(origin[1] + y as isize, h);
            let row = &data[(zz * h + yy) * w..][..w];
            if inside {
                out.extend_from_slice(&row[origin[2] as usize..][..size[2]]);
            } else {
                out.extend(xs.iter().map(|&x| row[x]));
            }
        }
    }
    Tensor::from_vec(size.to_vec(), out).expect("crop shape")
}

/// Resampling to 1 mm followed by z-scoring: the preprocessing applied to
/// every volume before training or inference.
pub fn preprocess(sample: &VolumeSample) -> Result<VolumeSample> {
    let mut out = if sample.spacing == [1.0; 3] {
        sample.clone()
    } else {
        resample_isotropic(sample, 1.0)?
    };
    out.image = zscore_normalize(&out.image);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ext: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> VolumeSample {
        let mut img = Vec::new();
        let mut lab = Vec::new();
        for d in 0..ext[0] {
            for h in 0..ext[1] {
                for w in 0..ext[2] {
                    img.push(f(d, h, w));
                    lab.push(((d + h + w) % 3) as u16);
                }
            }
        }
        VolumeSample::new(
            Tensor::from_vec(ext.to_vec(), img).unwrap(),
            Tensor::from_vec(ext.to_vec(), lab).unwrap(),
            spacing,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn crop_inside_and_padded() {
        let t = Tensor::from_vec(vec![1, 1, 3], vec![1u16, 2, 3]).unwrap();
        assert_eq!(crop_reflect(&t, [0, 0, 0], [1, 1, 3]), t);
        let c = crop_reflect(&t, [0, 0, -2], [1, 1, 7]);
        assert_eq!(c.data(), &[3, 2, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn constant_image_becomes_zeros() {
        let t = Tensor::filled(vec![2, 2, 2], 3.5f32);
        assert!(zscore_normalize(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_resample() {
        let s = sample([3, 4, 5], [1.0; 3], |d, h, w| (d * 20 + h * 5 + w) as f32 * 0.1);
        let r = resample_isotropic(&s, 1.0).unwrap();
        assert_eq!(r.extents(), [3, 4, 5]);
        assert!(r.image.max_abs_diff(&s.image) <= 1e-6);
        assert_eq!(r.labels, s.labels);
    }

    #[test]
    fn degenerate_extent_rejected() {
        let s = sample([1, 2, 2], [0.2, 1.0, 1.0], |_, _, _| 0.0);
        assert!(resample_isotropic(&s, 1.0).is_err());
    }

    #[test]
    fn mismatched_extents_rejected() {
        let img = Tensor::filled(vec![2, 2, 2], 0.0f32);
        let lab = Tensor::filled(vec![2, 2, 3], 0u16);
        assert!(VolumeSample::new(img, lab, [1.0; 3], "x").is_err());
    }
}
