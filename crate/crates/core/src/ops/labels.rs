use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Nearest-neighbour label subsampling for deep-supervision targets: keeps
/// the corner voxel `(f·d, f·h, f·w)` of every `f³` cell of a `[B, D, H, W]`
/// volume.
pub fn downsample_labels(labels: &Tensor<u16>, factor: usize) -> Result<Tensor<u16>> {
    contract!(factor >= 1, "downsampling factor must be positive");
    contract!(
        labels.ndim() == 4,
        "labels must be [B, D, H, W], got {:?}",
        labels.shape()
    );
    let s = labels.shape();
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    for (axis, n) in [("D", d), ("H", h), ("W", w)] {
        contract!(
            n % factor == 0,
            "label extent {n} along {axis} is not divisible by {factor}"
        );
    }
    if factor == 1 {
        return Ok(labels.clone());
    }
    let (nd, nh, nw) = (d / factor, h / factor, w / factor);
    let mut out = Vec::with_capacity(b * nd * nh * nw);
    for bi in 0..b {
        for z in 0..nd {
            for y in 0..nh {
                let row = ((bi * d + z * factor) * h + y * factor) * w;
                out.extend((0..nw).map(|x| labels.data()[row + x * factor]));
            }
        }
    }
    Tensor::from_vec(vec![b, nd, nh, nw], out)
}
