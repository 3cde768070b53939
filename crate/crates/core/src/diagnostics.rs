//! Dead/saturated channel probes and activation grids.
//!
//! A channel is dead when its mean absolute activation is below
//! `dead_threshold`; it is saturated when more than `saturated_fraction`
//! of its voxels exceed `saturation_level` times the channel's maximum
//! absolute activation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::network::Network;
use crate::tensor::{dims5, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub dead_threshold: f64,
    pub saturation_level: f64,
    pub saturated_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            dead_threshold: 1e-4,
            saturation_level: 0.99,
            saturated_fraction: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean_abs: f64,
    pub variance: f64,
    pub dead: bool,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub layer: String,
    pub channels: Vec<ChannelStats>,
    pub dead_fraction: f64,
    pub saturated_fraction: f64,
    /// Mean cosine similarity over all channel pairs; channels with zero
    /// norm contribute 0. Single-channel maps report 0.
    pub mean_cosine: f64,
}

/// Gathers channel `c` of a `[B, C, D, H, W]` map across the batch.
fn channel_values(map: &Tensor<f32>, c: usize) -> Vec<f64> {
    let s = map.shape();
    let (b, k) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * vol);
    for i in 0..b {
        out.extend(map.data()[(i * k + c) * vol..][..vol].iter().map(|&v| v as f64));
    }
    out
}

/// Statistics of a `[B, C, D, H, W]` feature map.
pub fn stats_from_map(layer: &str, map: &Tensor<f32>, th: &Thresholds) -> Result<ActivationStats> {
    let [_, k, ..] = dims5(map)?;
    let values: Vec<Vec<f64>> = (0..k).map(|c| channel_values(map, c)).collect();
    let channels: Vec<ChannelStats> = values
        .iter()
        .map(|v| {
            let n = v.len() as f64;
            let mean_abs = v.iter().map(|x| x.abs()).sum::<f64>() / n;
            let mean = v.iter().sum::<f64>() / n;
            let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let level = th.saturation_level * max;
            let above = v.iter().filter(|x| x.abs() > level).count() as f64 / n;
            ChannelStats {
                mean_abs,
                variance,
                dead: mean_abs < th.dead_threshold,
                saturated: max > 0.0 && above > th.saturated_fraction,
            }
        })
        .collect();
    let norms: Vec<f64> = values
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut cos_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            pairs += 1;
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = values[i].iter().zip(&values[j]).map(|(a, b)| a * b).sum();
                cos_sum += (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            }
        }
    }
    let frac = |f: fn(&ChannelStats) -> bool| channels.iter().filter(|c| f(c)).count() as f64 / k as f64;
    Ok(ActivationStats {
        layer: layer.to_string(),
        dead_fraction: frac(|c| c.dead),
        saturated_fraction: frac(|c| c.saturated),
        mean_cosine: if pairs == 0 { 0.0 } else { cos_sum / pairs as f64 },
        channels,
    })
}

/// Probes `layer` (see [`Network::layer_names`]) on `input` and summarizes it.
pub fn activation_stats(
    net: &Network<f32>,
    input: &Tensor<f32>,
    layer: &str,
    th: &Thresholds,
) -> Result<ActivationStats> {
    let map = net.probe(input, layer)?;
    stats_from_map(layer, &map, th)
}

pub const STATS_HEADER: &str = "layer,channel,mean_abs,variance,dead,saturated";

/// Per-channel rows; layer summaries go to [`summary_csv`].
pub fn stats_csv(stats: &[ActivationStats]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for s in stats {
        for (c, ch) in s.channels.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{c},{},{},{},{}",
                s.layer, ch.mean_abs, ch.variance, ch.dead as u8, ch.saturated as u8
            );
        }
    }
    out
}

pub const SUMMARY_HEADER: &str = "layer,channels,dead_fraction,saturated_fraction,mean_cosine";

pub fn summary_csv(stats: &[ActivationStats]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.layer,
            s.channels.len(),
            s.dead_fraction,
            s.saturated_fraction,
            s.mean_cosine
        );
    }
    out
}

/// Grey value of a constant channel.
pub const MID_GREY: u8 = 128;

/// Renders the central axial slice of every channel of the first sample
/// as a tile in a `ceil(sqrt(C))`-column grid (binary PGM bytes).
pub fn activation_grid(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, k, d, h, w] = dims5(map)?;
    contract!(k > 0 && h > 0 && w > 0, "empty feature map {:?}", map.shape());
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    let z = d / 2;
    for c in 0..k {
        let slice = &map.data()[(c * d + z) * h * w..][..h * w];
        let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let (ty, tx) = (c / cols, c % cols);
        for y in 0..h {
            for x in 0..w {
                let v = slice[y * w + x];
                let g = if hi > lo {
                    (((v - lo) / (hi - lo)) * 255.0).round() as u8
                } else {
                    MID_GREY
                };
                pixels[(ty * h + y) * width + tx * w + x] = g;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn export_activation_grid(
    net: &Network<f32>,
    input: &Tensor<f32>,
    layer: &str,
    path: &Path,
) -> Result<()> {
    let map = net.probe(input, layer)?;
    let bytes = activation_grid(&map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_channel_is_dead() {
        let mut data = vec![0.5f32; 4 * 8];
        data[8..16].fill(0.0);
        for (i, v) in data.iter_mut().enumerate().skip(16) {
            *v = (i as f32 * 0.37).sin();
        }
        let map = Tensor::from_vec(vec![1, 4, 2, 2, 2], data).unwrap();
        let s = stats_from_map("x", &map, &Thresholds::default()).unwrap();
        assert_eq!(s.dead_fraction, 0.25);
        assert!(s.channels[0].saturated);
        assert!(!s.channels[1].saturated);
    }

    #[test]
    fn duplicated_channels_are_parallel() {
        let ch: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let data = [ch.clone(), ch].concat();
        let map = Tensor::from_vec(vec![1, 2, 2, 2, 2], data).unwrap();
        let s = stats_from_map("x", &map, &Thresholds::default()).unwrap();
        assert!((s.mean_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_layout() {
        let map = Tensor::filled(vec![1, 4, 3, 2, 5], 1.0f32);
        let pgm = activation_grid(&map).unwrap();
        let header = b"P5\n10 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&g| g == MID_GREY));
    }
}
