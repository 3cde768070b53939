mod support;

use rand::Rng;

use support::*;
use voxelnext::diagnostics::{
    activation_grid, activation_stats, stats_csv, stats_from_map, summary_csv, Thresholds,
    MID_GREY,
};
use voxelnext::inference::{gaussian_weight_map, sliding_window_predict, InferenceConfig, WindowPlan};
use voxelnext::metrics::{
    aggregate, evaluate, read_records_csv, write_records_csv, MetricRecord,
};
use voxelnext::network::{build_network, NetworkConfig};
use voxelnext::ops::softmax_channels;
use voxelnext::Tensor;

#[test]
fn single_window_equals_direct_forward() {
    let net = build_network::<f32>(&NetworkConfig::tiny(1, 3), 5).unwrap();
    let x = random_tensor(&mut rng(1), &[16, 32, 16], 1.5).cast::<f32>();
    let pred = sliding_window_predict(&net, &x, &InferenceConfig::new([16, 32, 16])).unwrap();
    let direct = softmax_channels(&net.predict_full(&x.reshape([1, 1, 16, 32, 16]).unwrap()).unwrap()).unwrap();
    let direct = direct.reshape([3, 16, 32, 16]).unwrap();
    assert!(pred.probs.max_abs_diff(&direct) < 1e-5);
}

#[test]
fn window_plans_cover_every_voxel() {
    let mut r = rng(2);
    for _ in 0..20 {
        let ext = [0; 3].map(|_| r.random_range(1..70));
        let patch = [0; 3].map(|_| 16 * r.random_range(1..4));
        let overlap = r.random_range(0.0..0.9);
        let plan = WindowPlan::new(ext, patch, overlap, 0.125).unwrap();
        for a in 0..3 {
            assert_eq!(plan.padded[a], ext[a].max(patch[a]));
        }
        assert!(plan.coverage().iter().all(|&c| c >= 1), "{ext:?} {patch:?} {overlap}");
        assert!(plan.weight_map.data().iter().all(|&w| w > 0.0 && w <= 1.0));
    }
}

#[test]
fn weight_map_is_separable_and_peaked() {
    let m = gaussian_weight_map([16, 16, 32], 0.125).unwrap();
    let at = |z: usize, y: usize, x: usize| m.data()[(z * 16 + y) * 32 + x];
    assert_eq!(at(7, 7, 15), at(8, 8, 16));
    assert!(at(7, 7, 15) > 0.9);
    assert_eq!(at(0, 0, 0), 1e-3);
    assert!(at(5, 5, 12) > at(4, 4, 11));
    let g = |i: f64, n: f64| (-(i - (n - 1.0) / 2.0).powi(2) / (2.0 * (n / 8.0).powi(2))).exp();
    let want = g(3.0, 16.0) * g(10.0, 16.0) * g(20.0, 32.0) / (g(7.0, 16.0) * g(7.0, 16.0) * g(15.0, 32.0));
    assert!((at(3, 10, 20) as f64 - want).abs() < 1e-6);
}

#[test]
fn probabilities_are_normalized_on_padded_volumes() {
    let net = build_network::<f32>(&NetworkConfig::tiny(1, 2), 6).unwrap();
    let x = random_tensor(&mut rng(3), &[10, 40, 17], 1.0).cast::<f32>();
    for wide in [false, true] {
        let cfg = InferenceConfig { wide_accumulator: wide, ..InferenceConfig::new([16; 3]) };
        let pred = sliding_window_predict(&net, &x, &cfg).unwrap();
        assert_eq!(pred.labels.shape(), [10, 40, 17]);
        let vol = 10 * 40 * 17;
        for i in 0..vol {
            let (p0, p1) = (pred.probs.data()[i], pred.probs.data()[vol + i]);
            assert!((p0 + p1 - 1.0).abs() < 1e-5);
            assert_eq!(pred.labels.data()[i], u16::from(p1 > p0));
        }
    }
}

#[test]
fn probe_statistics_and_grid() {
    let net = build_network::<f32>(&NetworkConfig::tiny(1, 2), 7).unwrap();
    let x = random_tensor(&mut rng(4), &[1, 1, 16, 16, 16], 1.0).cast::<f32>();
    let th = Thresholds::default();
    let s = activation_stats(&net, &x, "enc0.block0.mlp", &th).unwrap();
    assert_eq!(s.channels.len(), 16);
    assert!(s.dead_fraction <= 1.0 && (-1.0..=1.0).contains(&s.mean_cosine));
    assert!(activation_stats(&net, &x, "enc9.block0", &th).is_err());
    assert_eq!(stats_csv(&[s.clone()]).lines().count(), 17);
    assert_eq!(summary_csv(&[s]).lines().count(), 2);

    // Hand-built map: one dead channel, one constant channel, two equal ones.
    let mut data = vec![0.0f32; 4 * 8];
    data[8..16].fill(3.0);
    for i in 0..8 {
        data[16 + i] = i as f32;
        data[24 + i] = i as f32;
    }
    let map = Tensor::from_vec(vec![1, 4, 2, 2, 2], data).unwrap();
    let s = stats_from_map("hand", &map, &th).unwrap();
    assert_eq!(s.dead_fraction, 0.25);
    assert_eq!(s.saturated_fraction, 0.25);
    assert!(s.channels[1].saturated && s.channels[1].variance == 0.0);
    let grid = activation_grid(&map).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&grid[..header.len()], header);
    let px = &grid[header.len()..];
    assert_eq!(px.len(), 16);
    // Tile 0 (dead) and tile 1 (constant) are mid-grey.
    assert_eq!([px[0], px[1], px[4], px[5]], [MID_GREY; 4]);
    assert_eq!([px[2], px[3], px[6], px[7]], [MID_GREY; 4]);
    // Tile 2 shows the central slice z=1 of a ramp 4..7, scaled to 0..255.
    assert_eq!([px[8], px[9], px[12], px[13]], [0, 85, 170, 255]);
}

#[test]
fn metric_records_round_trip_through_csv() {
    let mut r = rng(5);
    let gt = Tensor::from_vec(vec![6, 6, 6], (0..216).map(|_| r.random_range(0..3u16)).collect()).unwrap();
    let pred = Tensor::from_vec(vec![6, 6, 6], (0..216).map(|_| r.random_range(0..3u16)).collect()).unwrap();
    let mut records = evaluate("a", &pred, &gt, 3, 1.0, [1.0; 3]).unwrap();
    records.extend(evaluate("b", &gt, &gt, 3, 1.0, [1.0; 3]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_records_csv(&records, &path).unwrap();
    let back: Vec<MetricRecord> = read_records_csv(&path).unwrap();
    assert_eq!(back, records);
    let rows = aggregate(&records);
    assert!(rows.iter().any(|row| row.n == 2));
    assert!(records[2..].iter().all(|m| m.dsc == 1.0 && m.nsd == 1.0));
    assert!(evaluate("c", &pred, &gt, 2, 1.0, [1.0; 3]).is_err());
}
