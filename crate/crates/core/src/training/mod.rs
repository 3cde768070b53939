//! Deep-supervised Dice + cross-entropy training with AdamW, linear warmup
//! and linear decay.

mod log;
mod sampling;

pub use self::log::{EpochRow, TrainLog};
pub use sampling::{augment, flip, rot90, sample_patch, AugmentConfig, Patch};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::VolumeSample;
use crate::error::{contract, Error, Result};
use crate::inference::{sliding_window_predict, InferenceConfig};
use crate::metrics::{class_mask, dsc};
use crate::network::{load_backbone, Checkpoint, Network, NetworkConfig, SPATIAL_MULTIPLE};
use crate::ops::downsample_labels;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config {
                field: "phase".into(),
                reason: format!("`{s}` is not one of pretrain, finetune"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub fg_oversample_prob: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Validate every `val_interval` epochs (and always after the last).
    pub val_interval: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 1500,
            batches_per_epoch: 250,
            batch_size: 8,
            patch_size: [32; 3],
            lr_max: 1e-3,
            warmup_epochs: 0,
            weight_decay: 0.01,
            fg_oversample_prob: 0.33,
            seed: 0,
            augment: AugmentConfig::default(),
            val_interval: 1,
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 300,
            batch_size: 2,
            warmup_epochs: 50,
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        if self.epochs == 0 && self.phase == Phase::Pretrain {
            return bad("epochs", "pretraining needs at least one epoch".into());
        }
        if self.batches_per_epoch == 0 {
            return bad("batches_per_epoch", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if let Some(p) = self
            .patch_size
            .iter()
            .find(|&&p| p == 0 || p % SPATIAL_MULTIPLE != 0)
        {
            return bad(
                "patch_size",
                format!("extent {p} is not a positive multiple of {SPATIAL_MULTIPLE}"),
            );
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max", format!("{} must be positive", self.lr_max));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.fg_oversample_prob) {
            return bad("fg_oversample_prob", "must lie in [0, 1]".into());
        }
        if self.val_interval == 0 {
            return bad("val_interval", "must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate of `epoch`: a linear ramp from 0 to `lr_max` over the
/// warmup epochs, then a linear decay reaching 0 at `epochs`. The end point
/// `epoch == epochs` is accepted and yields 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    contract!(
        epoch <= cfg.epochs,
        "epoch {epoch} outside 0..={}",
        cfg.epochs
    );
    let (e, w, n) = (epoch as f64, cfg.warmup_epochs as f64, cfg.epochs as f64);
    Ok(if epoch == cfg.epochs {
        0.0
    } else if epoch < cfg.warmup_epochs {
        cfg.lr_max * e / w
    } else {
        cfg.lr_max * (n - e) / (n - w)
    })
}

/// Deep-supervision weights `2^-k`, normalized to sum to 1.
pub fn ds_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|k| 0.5f64.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `0.5 · (1 − batch soft Dice) + 0.5 · cross-entropy` on `[B, K, D, H, W]`
/// logits against `[B, D, H, W]` labels.
pub fn dice_ce_loss<'g, T: Element>(logits: Var<'g, T>, labels: &Tensor<u16>) -> Result<Var<'g, T>> {
    logits.dice_ce(labels)
}

/// `Σ_k w_k · dice_ce(outputs[k], labels ↓ 2^k)` with [`ds_weights`].
pub fn deep_supervision_loss<'g, T: Element>(
    outputs: &[Var<'g, T>],
    labels: &Tensor<u16>,
) -> Result<Var<'g, T>> {
    contract!(!outputs.is_empty(), "no outputs to supervise");
    contract!(
        labels.ndim() == 4,
        "labels must be [B, D, H, W], got {:?}",
        labels.shape()
    );
    let weights = ds_weights(outputs.len());
    let mut total: Option<Var<'g, T>> = None;
    for (k, (out, &w)) in outputs.iter().zip(&weights).enumerate() {
        let shape = out.shape();
        let factor = 1usize << k;
        let expected: Vec<usize> = labels.shape()[1..].iter().map(|&n| n / factor).collect();
        contract!(
            shape.len() == 5
                && shape[2..] == expected[..]
                && labels.shape()[1..].iter().all(|n| n % factor == 0),
            "output {k} has shape {shape:?}; expected spatial {expected:?} for labels {:?}",
            labels.shape()
        );
        let target = downsample_labels(labels, factor)?;
        let term = out.dice_ce(&target)?.scale(T::cst(w));
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Stacks sampled, augmented patches into `[B, 1, D, H, W]` images and
/// `[B, D, H, W]` labels. The RNG stream depends only on `(seed, epoch,
/// batch)`.
pub fn make_batch(
    data: &[VolumeSample],
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<(Tensor<f32>, Tensor<u16>)> {
    contract!(!data.is_empty(), "empty training set");
    let mut rng = rng_for(cfg.seed, &format!("batch/{epoch}/{batch}"));
    let mut images = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let case = &data[rng.random_range(0..data.len())];
        let p = sample_patch(case, cfg.patch_size, cfg.fg_oversample_prob, &mut rng);
        let (img, lab) = augment(p.image, p.labels, &cfg.augment, &mut rng);
        images.push(img);
        labels.push(lab);
    }
    let [d, h, w] = cfg.patch_size;
    let images = Tensor::stack(&images)?.reshape([cfg.batch_size, 1, d, h, w])?;
    Ok((images, Tensor::stack(&labels)?))
}

/// Mean per-class DSC (classes `1..K`) over the validation cases, using
/// sliding-window inference at the training patch size.
pub fn validation_dsc(net: &Network<f32>, val: &[VolumeSample], patch: [usize; 3]) -> Result<Vec<f64>> {
    let k = net.config().num_classes;
    let mut sums = vec![0.0; k - 1];
    for case in val {
        let pred = sliding_window_predict(net, &case.image, &InferenceConfig::new(patch))?;
        for (c, s) in (1..k).zip(sums.iter_mut()) {
            *s += dsc(&class_mask(&pred.labels, c), &class_mask(&case.labels, c))?;
        }
    }
    Ok(sums.into_iter().map(|s| s / val.len().max(1) as f64).collect())
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// One optimization step; returns the loss.
pub fn train_step(
    net: &mut Network<f32>,
    state: &mut AdamWState<f32>,
    images: Tensor<f32>,
    labels: &Tensor<u16>,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let g = Graph::new();
    let params = net.bind(&g, true);
    let x = g.constant(images);
    let outputs = net.forward(&params, x)?;
    let loss = deep_supervision_loss(&outputs, labels)?;
    let value = loss.value().data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = params.iter().map(|&p| grads.take_or_zeros(p)).collect();
    drop(params);
    drop(g);
    adamw_step(net.params_mut(), &grads, state, lr)?;
    Ok(value)
}

/// Runs `epochs × batches_per_epoch` steps of sample → augment → forward →
/// deep-supervision loss → backward → AdamW. Validation DSC is logged per
/// `val_interval` epochs when `val` is non-empty.
pub fn train(
    mut net: Network<f32>,
    data: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    contract!(!data.is_empty(), "empty training set");
    let k = net.config().num_classes;
    for case in data.iter().chain(val) {
        let max = case.max_label() as usize;
        contract!(
            max < k,
            "case `{}` has label {max} but the network predicts {k} classes",
            case.case_id
        );
    }
    let mut state = AdamWState::new(
        net.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut log = TrainLog::new(k);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let mut loss_sum = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let (images, labels) = make_batch(data, cfg, epoch, batch)?;
            let step = epoch * cfg.batches_per_epoch + batch;
            loss_sum += train_step(&mut net, &mut state, images, &labels, lr, step)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let val_dsc = if !val.is_empty() && ((epoch + 1) % cfg.val_interval == 0 || last) {
            Some(validation_dsc(&net, val, cfg.patch_size)?)
        } else {
            None
        };
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / cfg.batches_per_epoch as f64,
            val_dsc,
            seconds: start.elapsed().as_secs_f64(),
        };
        ::log::info!(
            "{} epoch {}/{} lr {:.3e} loss {:.4}{}",
            cfg.phase,
            epoch + 1,
            cfg.epochs,
            lr,
            row.train_loss,
            row.val_dsc
                .as_ref()
                .map(|d| format!(" val dsc {d:.3?}"))
                .unwrap_or_default()
        );
        log.push(row)?;
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("phase".to_string(), cfg.phase.to_string());
    metadata.insert("seed".to_string(), cfg.seed.to_string());
    metadata.insert("epochs".to_string(), cfg.epochs.to_string());
    metadata.insert("batches_per_epoch".to_string(), cfg.batches_per_epoch.to_string());
    metadata.insert("batch_size".to_string(), cfg.batch_size.to_string());
    metadata.insert(
        "patch_size".to_string(),
        format!("{}x{}x{}", cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]),
    );
    let checkpoint = Checkpoint::from_network(&net, metadata);
    Ok(TrainOutcome {
        network: net,
        checkpoint,
        log,
    })
}

/// Seed used for freshly initialized parameters of a run.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, "init")
}

/// Loads the backbone of `ckpt` into a network built for `target`
/// (heads re-initialize when the class count differs) and trains it.
pub fn finetune(
    ckpt: &Checkpoint,
    target: &NetworkConfig,
    data: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    contract!(
        cfg.phase == Phase::Finetune,
        "finetune needs a finetune-phase config"
    );
    let net = load_backbone(ckpt, target, init_seed(cfg.seed))?;
    train(net, data, val, cfg)
}
