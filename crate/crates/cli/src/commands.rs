use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use voxelnext::data::{
    crop_reflect, generate_phantom, preprocess, read_manifest, read_volume, write_manifest,
    write_volume, ManifestEntry, VolumeSample,
};
use voxelnext::diagnostics::{activation_stats, export_activation_grid, stats_csv, summary_csv};
use voxelnext::inference::sliding_window_predict;
use voxelnext::metrics::{
    aggregate, aggregate_csv, assign_folds, cross_validate, evaluate, read_records_csv,
    write_aggregate_csv, write_records_csv, MetricRecord,
};
use voxelnext::network::{build_network, load_checkpoint, save_checkpoint, Checkpoint, Network};
use voxelnext::seed::derive_seed;
use voxelnext::training::{self, init_seed, Phase, TrainOutcome};
use voxelnext::Tensor;

use crate::config::{ConfigError, Settings};
use crate::Run;

const SNAPSHOT: &str = "config.resolved";
const MANIFEST: &str = "manifest.csv";
const CHECKPOINT: &str = "model.ckpt";

/// Creates the output directory, refusing a non-empty one without `force`.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("cannot list {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(ConfigError(format!(
                "output directory {} exists and is not empty; pass --force to write into it",
                out.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

/// Applies the thread setting, prepares the output directory and writes the
/// snapshot. Called after all settings are resolved.
fn start(run: &Run, force: bool) -> Result<()> {
    let threads: usize = run.settings.parse("threads")?;
    if threads > 0 {
        // The global pool can only be built once per process; a second
        // build fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    prepare_out(&run.out, force)?;
    let snap = run.out.join(SNAPSHOT);
    fs::write(&snap, run.settings.snapshot())
        .with_context(|| format!("cannot write {}", snap.display()))
}

fn required(s: &Settings, key: &str, flag: &str) -> Result<PathBuf> {
    let v = s.get(key);
    if v.is_empty() {
        return Err(ConfigError(format!("missing {flag} (config key `{key}`)")).into());
    }
    Ok(PathBuf::from(v))
}

struct Dataset {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    fn open(dir: &Path) -> Result<Self> {
        let entries = read_manifest(&dir.join(MANIFEST))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    fn select(&self, split: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| split == "all" || e.split == split)
            .collect()
    }

    fn load(&self, entry: &ManifestEntry) -> Result<VolumeSample> {
        Ok(preprocess(&read_volume(&self.dir.join(&entry.path))?)?)
    }

    fn load_split(&self, split: &str) -> Result<Vec<VolumeSample>> {
        self.select(split).into_iter().map(|e| self.load(e)).collect()
    }
}

fn num_classes(s: &Settings, cases: &[VolumeSample]) -> Result<usize> {
    let k: usize = s.parse("model.num_classes")?;
    if k > 0 {
        return Ok(k);
    }
    let max = cases.iter().map(|c| c.max_label()).max().unwrap_or(0) as usize;
    Ok((max + 1).max(2))
}

pub fn gen_data(mut run: Run, force: bool) -> Result<()> {
    let s = &mut run.settings;
    let seed = s.seed()?;
    let task = s.get("data.task").to_string();
    s.phantom(0)?;
    let cases: usize = s.parse("data.cases")?;
    let test_cases: usize = s.parse("data.test_cases")?;
    let folds: usize = s.parse("data.folds")?;
    start(&run, force)?;
    let cases_dir = run.out.join("cases");
    fs::create_dir_all(&cases_dir)?;
    let train_ids: Vec<String> = (0..cases).map(|i| format!("{task}-{i:03}")).collect();
    let test_ids: Vec<String> = (0..test_cases).map(|i| format!("{task}-t{i:03}")).collect();
    let fold_of = if folds >= 1 && train_ids.len() >= folds {
        assign_folds(&train_ids, folds, seed)?
    } else {
        Vec::new()
    };
    let mut entries = Vec::new();
    for (id, split) in train_ids
        .iter()
        .map(|id| (id, "train"))
        .chain(test_ids.iter().map(|id| (id, "test")))
    {
        let spec = run.settings.phantom(derive_seed(seed, &format!("case/{id}")))?;
        let sample = generate_phantom(&spec, id)?;
        let rel = format!("cases/{id}.json");
        write_volume(&sample, &run.out.join(&rel))?;
        entries.push(ManifestEntry {
            case_id: id.clone(),
            path: rel,
            split: split.to_string(),
            fold: fold_of.iter().find(|(c, _)| c == id).map(|(_, f)| *f),
        });
    }
    write_manifest(&entries, &run.out.join(MANIFEST))?;
    info!("wrote {} cases to {}", entries.len(), run.out.display());
    Ok(())
}

fn save_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT))?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    Ok(())
}

pub fn pretrain(mut run: Run, force: bool) -> Result<()> {
    let seed = run.settings.seed()?;
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let tcfg = run.settings.train(Phase::Pretrain, seed)?;
    let ds = Dataset::open(&data_dir)?;
    let train_set = ds.load_split("train")?;
    if train_set.is_empty() {
        bail!("dataset {} has no `train` cases", data_dir.display());
    }
    let k = num_classes(&run.settings, &train_set)?;
    let ncfg = run.settings.network(k)?;
    run.settings.set("model.num_classes", &k.to_string())?;
    start(&run, force)?;
    let val = ds.load_split("test")?;
    let net = build_network::<f32>(&ncfg, init_seed(seed))?;
    info!(
        "pretraining {} parameters on {} cases",
        net.num_parameters(),
        train_set.len()
    );
    let outcome = training::train(net, &train_set, &val, &tcfg)?;
    save_outcome(&run.out, &outcome)
}

pub fn finetune(mut run: Run, force: bool) -> Result<()> {
    let seed = run.settings.seed()?;
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let ckpt_path = required(&run.settings, "run.checkpoint", "--checkpoint")?;
    let tcfg = run.settings.train(Phase::Finetune, seed)?;
    let ds = Dataset::open(&data_dir)?;
    let train_set = ds.load_split("train")?;
    if train_set.is_empty() {
        bail!("dataset {} has no `train` cases", data_dir.display());
    }
    let ckpt = load_checkpoint(&ckpt_path, None)?;
    let k = num_classes(&run.settings, &train_set)?;
    run.settings.set("model.num_classes", &k.to_string())?;
    let mut target = ckpt.config.clone();
    target.num_classes = k;
    start(&run, force)?;
    let val = ds.load_split("test")?;
    let outcome = training::finetune(&ckpt, &target, &train_set, &val, &tcfg)?;
    save_outcome(&run.out, &outcome)
}

fn load_network(s: &Settings) -> Result<(Checkpoint, Network<f32>)> {
    let path = required(s, "run.checkpoint", "--checkpoint")?;
    let ckpt = load_checkpoint(&path, None)?;
    let net = ckpt.to_network()?;
    Ok((ckpt, net))
}

pub fn infer(mut run: Run, force: bool) -> Result<()> {
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let (_, net) = load_network(&run.settings)?;
    let icfg = run.settings.inference()?;
    start(&run, force)?;
    let ds = Dataset::open(&data_dir)?;
    let split = run.settings.get("run.split").to_string();
    let pred_dir = run.out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let mut entries = Vec::new();
    for e in ds.select(&split) {
        let case = ds.load(e)?;
        let pred = sliding_window_predict(&net, &case.image, &icfg)?;
        let k = net.config().num_classes;
        let vol = case.image.len();
        let confidence: Vec<f32> = (0..vol)
            .map(|v| pred.probs.data()[pred.labels.data()[v] as usize * vol + v])
            .collect();
        debug_assert!(pred.labels.data().iter().all(|&l| (l as usize) < k));
        let sample = VolumeSample::new(
            Tensor::from_vec(case.image.shape().to_vec(), confidence)?,
            pred.labels,
            case.spacing,
            case.case_id.clone(),
        )?;
        let rel = format!("predictions/{}.json", case.case_id);
        write_volume(&sample, &run.out.join(&rel))?;
        entries.push(ManifestEntry {
            case_id: case.case_id,
            path: rel,
            split: e.split.clone(),
            fold: e.fold,
        });
    }
    write_manifest(&entries, &run.out.join(MANIFEST))?;
    info!("predicted {} cases", entries.len());
    Ok(())
}

pub fn eval(mut run: Run, force: bool) -> Result<()> {
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let pred_dir = required(&run.settings, "run.pred", "--pred")?;
    let tol: f64 = run.settings.parse("eval.tolerance_mm")?;
    let gt = Dataset::open(&data_dir)?;
    let preds = Dataset::open(&pred_dir)?;
    let mut pairs = Vec::new();
    for p in &preds.entries {
        let Some(g) = gt.entries.iter().find(|g| g.case_id == p.case_id) else {
            bail!("prediction `{}` has no ground truth in {}", p.case_id, data_dir.display());
        };
        let pred = read_volume(&preds.dir.join(&p.path))?;
        pairs.push((pred, gt.load(g)?));
    }
    let all: Vec<VolumeSample> = pairs
        .iter()
        .flat_map(|(p, g)| [p.clone(), g.clone()])
        .collect();
    let k = num_classes(&run.settings, &all)?;
    run.settings.set("model.num_classes", &k.to_string())?;
    start(&run, force)?;
    let mut records = Vec::new();
    for (pred, gt) in &pairs {
        records.extend(evaluate(
            &gt.case_id,
            &pred.labels,
            &gt.labels,
            k,
            tol,
            gt.spacing,
        )?);
    }
    write_records_csv(&records, &run.out.join("metrics.csv"))?;
    write_aggregate_csv(&aggregate(&records), &run.out.join("aggregate.csv"))?;
    info!("evaluated {} cases", pairs.len());
    Ok(())
}

pub fn cv(mut run: Run, force: bool) -> Result<()> {
    let seed = run.settings.seed()?;
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let tcfg = run.settings.train(Phase::Pretrain, seed)?;
    let icfg = run.settings.inference()?;
    let folds: usize = run.settings.parse("data.folds")?;
    let tol: f64 = run.settings.parse("eval.tolerance_mm")?;
    let ds = Dataset::open(&data_dir)?;
    let cases = ds.load_split("train")?;
    if folds == 0 || folds > cases.len() {
        return Err(ConfigError(format!(
            "data.folds={folds} needs between 1 and {} training cases",
            cases.len()
        ))
        .into());
    }
    let k = num_classes(&run.settings, &cases)?;
    let ncfg = run.settings.network(k)?;
    run.settings.set("model.num_classes", &k.to_string())?;
    start(&run, force)?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let pick = |wanted: &[String]| -> Vec<VolumeSample> {
        cases
            .iter()
            .filter(|c| wanted.contains(&c.case_id))
            .cloned()
            .collect()
    };
    let report = cross_validate(&ids, folds, seed, |fold, train_ids, val_ids| {
        info!("fold {fold}: {} train / {} validation cases", train_ids.len(), val_ids.len());
        let net = build_network::<f32>(&ncfg, init_seed(seed))?;
        let outcome = training::train(net, &pick(train_ids), &[], &tcfg)?;
        let mut records: Vec<MetricRecord> = Vec::new();
        for case in pick(val_ids) {
            let pred = sliding_window_predict(&outcome.network, &case.image, &icfg)?;
            records.extend(evaluate(&case.case_id, &pred.labels, &case.labels, k, tol, case.spacing)?);
        }
        Ok(records)
    })?;
    if report.train_equals_val {
        warn!("folds=1: training and validation sets are identical");
    }
    let mut folds_csv = String::from("case_id,fold\n");
    for (id, f) in &report.folds {
        folds_csv.push_str(&format!("{id},{f}\n"));
    }
    fs::write(run.out.join("folds.csv"), folds_csv)?;
    fs::write(
        run.out.join("cv_flags.txt"),
        format!("train_equals_val={}\n", report.train_equals_val),
    )?;
    write_records_csv(&report.records, &run.out.join("cv_metrics.csv"))?;
    write_aggregate_csv(&report.summary, &run.out.join("cv_aggregate.csv"))?;
    Ok(())
}

pub fn probe(mut run: Run, force: bool) -> Result<()> {
    let data_dir = required(&run.settings, "run.data", "--data")?;
    let (_, net) = load_network(&run.settings)?;
    let icfg = run.settings.inference()?;
    let th = run.settings.thresholds()?;
    start(&run, force)?;
    let ds = Dataset::open(&data_dir)?;
    let split = run.settings.get("run.split").to_string();
    let Some(entry) = ds.select(&split).into_iter().next() else {
        bail!("no `{split}` cases in {}", data_dir.display());
    };
    let case = ds.load(entry)?;
    let p = icfg.patch_size;
    let ext = case.extents();
    let origin = [0, 1, 2].map(|a| (ext[a] as isize - p[a] as isize) / 2);
    let input = crop_reflect(&case.image, origin, p).reshape([1, 1, p[0], p[1], p[2]])?;
    let layers: Vec<String> = match run.settings.get("probe.layer") {
        "all" => net.layer_names(),
        list => list.split(',').map(|l| l.trim().to_string()).collect(),
    };
    let mut stats = Vec::new();
    for layer in &layers {
        stats.push(activation_stats(&net, &input, layer, &th)?);
        let file = format!("grid_{}.pgm", layer.replace('.', "_"));
        export_activation_grid(&net, &input, layer, &run.out.join(file))?;
    }
    fs::write(run.out.join("stats.csv"), stats_csv(&stats))?;
    fs::write(run.out.join("summary.csv"), summary_csv(&stats))?;
    for s in &stats {
        info!(
            "{}: dead {:.3} saturated {:.3} cosine {:.3}",
            s.layer, s.dead_fraction, s.saturated_fraction, s.mean_cosine
        );
    }
    Ok(())
}

pub fn report(run: Run, force: bool) -> Result<()> {
    let inputs = run.settings.get("run.inputs").to_string();
    if inputs.is_empty() {
        return Err(ConfigError("report needs at least one --input NAME=CSV".into()).into());
    }
    let mut models = Vec::new();
    for item in inputs.split(';') {
        let Some((name, path)) = item.split_once('=') else {
            return Err(ConfigError(format!("--input expects NAME=CSV, got `{item}`")).into());
        };
        models.push((name.to_string(), read_records_csv(Path::new(path))?));
    }
    start(&run, force)?;
    let mut csv = String::from("model,");
    csv.push_str(voxelnext::metrics::AGGREGATE_HEADER);
    csv.push('\n');
    let mut table = String::from("| model | class | n | DSC | NSD |\n|---|---|---|---|---|\n");
    for (name, records) in &models {
        let rows = aggregate(records);
        for line in aggregate_csv(&rows).lines().skip(1) {
            csv.push_str(&format!("{name},{line}\n"));
        }
        for r in &rows {
            table.push_str(&format!(
                "| {name} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.class_id.map_or("all".to_string(), |c| c.to_string()),
                r.n,
                r.dsc_mean,
                r.dsc_sd,
                r.nsd_mean,
                r.nsd_sd
            ));
        }
    }
    fs::write(run.out.join("report.csv"), csv)?;
    fs::write(run.out.join("report.md"), &table)?;
    print!("{table}");
    Ok(())
}
