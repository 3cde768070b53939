//! Dice similarity, normalized surface distance and cross-validation
//! aggregation.
//!
//! Surfaces are the 6-connected border voxels of a mask; distances are
//! Euclidean between voxel centres scaled by the voxel spacing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{contract, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Binary mask over `[D, H, W]`.
pub type Mask = Tensor<bool>;

fn check_pair(pred: &Mask, gt: &Mask) -> Result<[usize; 3]> {
    contract!(
        pred.ndim() == 3,
        "masks must be [D, H, W], got {:?}",
        pred.shape()
    );
    contract!(
        pred.shape() == gt.shape(),
        "mask shapes differ: {:?} vs {:?}",
        pred.shape(),
        gt.shape()
    );
    let s = pred.shape();
    Ok([s[0], s[1], s[2]])
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Foreground voxels with a background or out-of-volume 6-neighbour.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let s = mask.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let m = mask.data();
    let at = |z: usize, y: usize, x: usize| m[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let border = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if border {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Distance between voxel centres in millimetres.
pub fn voxel_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * spacing[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Counts the points of `from` lying within `tol` of some point of `to`,
/// searching only the spacing-aware neighbourhood box around each point.
fn count_within(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    ext: [usize; 3],
    tol: f64,
    spacing: [f64; 3],
) -> usize {
    let mut grid = vec![false; ext.iter().product()];
    for p in to {
        grid[(p[0] * ext[1] + p[1]) * ext[2] + p[2]] = true;
    }
    // One extra voxel guards against rounding in the quotient.
    let reach: [usize; 3] = [0, 1, 2].map(|a| (tol / spacing[a]).floor() as usize + 1);
    let span = |c: usize, a: usize| c.saturating_sub(reach[a])..=(c + reach[a]).min(ext[a] - 1);
    from.iter()
        .filter(|&&p| {
            span(p[0], 0).any(|z| {
                span(p[1], 1).any(|y| {
                    span(p[2], 2).any(|x| {
                        grid[(z * ext[1] + y) * ext[2] + x]
                            && voxel_distance(p, [z, y, x], spacing) <= tol
                    })
                })
            })
        })
        .count()
}

/// Normalized surface distance at `tolerance_mm`: the fraction of both
/// surfaces lying within tolerance of the other. 1 when both masks are
/// empty, 0 when exactly one is.
pub fn nsd(pred: &Mask, gt: &Mask, tolerance_mm: f64, spacing_mm: [f64; 3]) -> Result<f64> {
    let ext = check_pair(pred, gt)?;
    contract!(tolerance_mm > 0.0, "tolerance must be positive, got {tolerance_mm}");
    contract!(
        spacing_mm.iter().all(|&s| s > 0.0 && s.is_finite()),
        "spacing must be positive, got {spacing_mm:?}"
    );
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let hits = count_within(&sp, &sg, ext, tolerance_mm, spacing_mm)
        + count_within(&sg, &sp, ext, tolerance_mm, spacing_mm);
    Ok(hits as f64 / (sp.len() + sg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub case_id: String,
    pub class_id: usize,
    pub dsc: f64,
    pub nsd: f64,
    pub tolerance_mm: f64,
    pub spacing_mm: [f64; 3],
}

/// Binary mask of one class.
pub fn class_mask(labels: &Tensor<u16>, class: usize) -> Mask {
    labels.map(|l| l as usize == class)
}

/// One record per foreground class `1..num_classes`.
pub fn evaluate(
    case_id: &str,
    pred: &Tensor<u16>,
    gt: &Tensor<u16>,
    num_classes: usize,
    tolerance_mm: f64,
    spacing_mm: [f64; 3],
) -> Result<Vec<MetricRecord>> {
    contract!(
        pred.shape() == gt.shape(),
        "prediction {:?} and ground truth {:?} differ in extent",
        pred.shape(),
        gt.shape()
    );
    for (name, t) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(&l) = t.data().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Contract(format!(
                "{name} label {l} out of range for {num_classes} classes"
            )));
        }
    }
    (1..num_classes)
        .map(|c| {
            let (p, g) = (class_mask(pred, c), class_mask(gt, c));
            Ok(MetricRecord {
                case_id: case_id.to_string(),
                class_id: c,
                dsc: dsc(&p, &g)?,
                nsd: nsd(&p, &g, tolerance_mm, spacing_mm)?,
                tolerance_mm,
                spacing_mm,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of one class (or of all records when
/// `class_id` is `None`).
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub class_id: Option<usize>,
    pub n: usize,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub nsd_mean: f64,
    pub nsd_sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-class rows in ascending class order followed by an overall row.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let mut classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let row = |class_id: Option<usize>| {
        let sel: Vec<&MetricRecord> = records
            .iter()
            .filter(|r| class_id.is_none_or(|c| r.class_id == c))
            .collect();
        let (dsc_mean, dsc_sd) = mean_sd(&sel.iter().map(|r| r.dsc).collect::<Vec<_>>());
        let (nsd_mean, nsd_sd) = mean_sd(&sel.iter().map(|r| r.nsd).collect::<Vec<_>>());
        AggregateRow {
            class_id,
            n: sel.len(),
            dsc_mean,
            dsc_sd,
            nsd_mean,
            nsd_sd,
        }
    };
    let mut rows: Vec<AggregateRow> = classes.into_iter().map(|c| row(Some(c))).collect();
    rows.push(row(None));
    rows
}

pub const RECORDS_HEADER: &str = "case_id,class_id,dsc,nsd,tolerance_mm";
pub const AGGREGATE_HEADER: &str = "class_id,n,dsc_mean,dsc_sd,nsd_mean,nsd_sd";

pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut out = format!("{RECORDS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.case_id, r.class_id, r.dsc, r.nsd, r.tolerance_mm
        );
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for r in rows {
        let class = r.class_id.map_or("all".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{class},{},{},{},{},{}",
            r.n, r.dsc_mean, r.dsc_sd, r.nsd_mean, r.nsd_sd
        );
    }
    out
}

pub fn write_records_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    fs::write(path, records_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    fs::write(path, aggregate_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_records_csv`]. Spacing is not stored in
/// the CSV and comes back as 1 mm.
pub fn read_records_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(Error::format(
            path,
            format!("metrics CSV must start with `{RECORDS_HEADER}`"),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: malformed record `{line}`", i + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(MetricRecord {
            case_id: f[0].to_string(),
            class_id: f[1].parse().map_err(|_| bad())?,
            dsc: f[2].parse().map_err(|_| bad())?,
            nsd: f[3].parse().map_err(|_| bad())?,
            tolerance_mm: f[4].parse().map_err(|_| bad())?,
            spacing_mm: [1.0; 3],
        });
    }
    Ok(out)
}

/// Seeded fold assignment: ids are sorted, shuffled with the `folds`
/// stream of `seed`, then dealt round-robin. Returns `(case_id, fold)`
/// pairs in sorted id order.
pub fn assign_folds(case_ids: &[String], folds: usize, seed: u64) -> Result<Vec<(String, usize)>> {
    contract!(folds >= 1, "need at least one fold");
    contract!(
        case_ids.len() >= folds,
        "{} cases cannot fill {folds} folds",
        case_ids.len()
    );
    let mut ids = case_ids.to_vec();
    ids.sort();
    let before = ids.len();
    ids.dedup();
    contract!(ids.len() == before, "duplicate case ids");
    let mut order = ids.clone();
    order.shuffle(&mut rng_for(seed, "folds"));
    let mut out: Vec<(String, usize)> = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % folds))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<(String, usize)>,
    pub records: Vec<MetricRecord>,
    pub summary: Vec<AggregateRow>,
    /// Set when `folds == 1`: every case was both trained on and evaluated.
    pub train_equals_val: bool,
}

/// Runs `trainer(fold, train_ids, val_ids)` per fold; the trainer returns
/// the metric records of its validation cases.
pub fn cross_validate<F>(case_ids: &[String], folds: usize, seed: u64, mut trainer: F) -> Result<CvReport>
where
    F: FnMut(usize, &[String], &[String]) -> Result<Vec<MetricRecord>>,
{
    let assignment = assign_folds(case_ids, folds, seed)?;
    let mut records = Vec::new();
    for f in 0..folds {
        let val: Vec<String> = assignment
            .iter()
            .filter(|(_, k)| *k == f)
            .map(|(id, _)| id.clone())
            .collect();
        let train: Vec<String> = if folds == 1 {
            val.clone()
        } else {
            assignment
                .iter()
                .filter(|(_, k)| *k != f)
                .map(|(id, _)| id.clone())
                .collect()
        };
        records.extend(trainer(f, &train, &val)?);
    }
    let summary = aggregate(&records);
    Ok(CvReport {
        folds: assignment,
        records,
        summary,
        train_equals_val: folds == 1,
    })
}
