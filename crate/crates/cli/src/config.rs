//! Flat `key=value` run configuration.
//!
//! Every key has a built-in default; files and `--set` may only assign
//! known keys. An empty value for a `train.*` key means "use the phase
//! default". The resolved map is written back verbatim as the run's
//! snapshot, so the snapshot can be passed to `--config` to repeat a run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use voxelnext::data::PhantomSpec;
use voxelnext::diagnostics::Thresholds;
use voxelnext::inference::{InferenceConfig, DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE};
use voxelnext::network::{scale_config, NetworkConfig, ScaleVariant, LAYOUT_LEN};
use voxelnext::ops::GrnDivisor;
use voxelnext::training::{AugmentConfig, Phase, TrainConfig};

/// Problems with the configuration itself (exit status 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

const DEFAULTS: &[(&str, &str)] = &[
    ("run.command", ""),
    ("run.data", ""),
    ("run.checkpoint", ""),
    ("run.pred", ""),
    ("run.split", "test"),
    ("run.inputs", ""),
    ("seed", "0"),
    ("threads", "0"),
    ("data.task", "organ"),
    ("data.cases", "40"),
    ("data.test_cases", "10"),
    ("data.folds", "5"),
    ("model.base_channels", "8"),
    ("model.stage_blocks", "1"),
    ("model.expansion_ratios", "2"),
    ("model.kernel", "3"),
    ("model.ds_levels", "3"),
    ("model.grn", "on"),
    ("model.grn_divisor", "sum"),
    ("model.variant", "base"),
    ("model.in_channels", "1"),
    ("model.num_classes", "0"),
    ("train.epochs", ""),
    ("train.batches_per_epoch", ""),
    ("train.batch_size", ""),
    ("train.patch", ""),
    ("train.lr_max", ""),
    ("train.warmup_epochs", ""),
    ("train.weight_decay", ""),
    ("train.fg_oversample_prob", ""),
    ("train.val_interval", ""),
    ("train.augment.mirror_prob", ""),
    ("train.augment.rotate_prob", ""),
    ("train.augment.noise_prob", ""),
    ("train.augment.noise_sd_max", ""),
    ("train.augment.scale_prob", ""),
    ("train.augment.scale_min", ""),
    ("train.augment.scale_max", ""),
    ("infer.patch", ""),
    ("infer.overlap", ""),
    ("infer.sigma_scale", ""),
    ("infer.wide_accumulator", "false"),
    ("eval.tolerance_mm", "1"),
    ("probe.layer", "enc0.block0.mlp"),
    ("probe.dead_threshold", "1e-4"),
    ("probe.saturation_level", "0.99"),
    ("probe.saturated_fraction", "0.99"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn defaults() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> ConfigResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => err(format!("unknown config key `{key}`")),
        }
    }

    /// Parses `key=value` text. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> ConfigResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("{origin}:{}: expected key=value, got `{line}`", i + 1));
            };
            self.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> ConfigResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_assignment(&mut self, kv: &str) -> ConfigResult<()> {
        match kv.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v),
            None => err(format!("--set expects key=value, got `{kv}`")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` has no default"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> ConfigResult<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| ConfigError(format!("`{key}`: cannot parse `{v}`: {e}")))
    }

    /// `None` for an empty value.
    fn parse_opt<T: FromStr>(&self, key: &str) -> ConfigResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn seed(&self) -> ConfigResult<u64> {
        self.parse("seed")
    }

    pub fn on_off(&self, key: &str) -> ConfigResult<bool> {
        match self.get(key) {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            v => err(format!("`{key}`: expected on/off, got `{v}`")),
        }
    }

    pub fn phantom(&self, seed: u64) -> ConfigResult<PhantomSpec> {
        let task = self.get("data.task");
        PhantomSpec::preset(task, seed).ok_or_else(|| {
            ConfigError(format!(
                "`data.task`: unknown task `{task}` (expected organ|multi|lesion|context)"
            ))
        })
    }

    fn layout(&self, key: &str) -> ConfigResult<[usize; LAYOUT_LEN]> {
        let parts: Vec<&str> = self.get(key).split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| ConfigError(format!("`{key}`: cannot parse `{s}`: {e}")))
        };
        match parts.len() {
            1 => Ok([parse(parts[0])?; LAYOUT_LEN]),
            LAYOUT_LEN => {
                let mut out = [0; LAYOUT_LEN];
                for (o, p) in out.iter_mut().zip(&parts) {
                    *o = parse(p)?;
                }
                Ok(out)
            }
            n => err(format!("`{key}`: expected 1 or {LAYOUT_LEN} values, got {n}")),
        }
    }

    /// Network for `num_classes` classes, after the width variant.
    pub fn network(&self, num_classes: usize) -> ConfigResult<NetworkConfig> {
        let grn_divisor = match self.get("model.grn_divisor") {
            "sum" => GrnDivisor::Sum,
            "mean" => GrnDivisor::Mean,
            v => return err(format!("`model.grn_divisor`: expected sum|mean, got `{v}`")),
        };
        let variant: ScaleVariant = self
            .get("model.variant")
            .parse()
            .map_err(|e: String| ConfigError(format!("`model.variant`: {e}")))?;
        let cfg = NetworkConfig {
            base_channels: self.parse("model.base_channels")?,
            stage_blocks: self.layout("model.stage_blocks")?,
            expansion_ratios: self.layout("model.expansion_ratios")?,
            kernel: self.parse("model.kernel")?,
            num_classes,
            in_channels: self.parse("model.in_channels")?,
            deep_supervision_levels: self.parse("model.ds_levels")?,
            grn: self.on_off("model.grn")?,
            grn_divisor,
        };
        let cfg = scale_config(&cfg, variant);
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// Training config for `phase`; unset keys keep the phase defaults and
    /// are filled into the snapshot.
    pub fn train(&mut self, phase: Phase, seed: u64) -> ConfigResult<TrainConfig> {
        let mut t = TrainConfig::for_phase(phase);
        t.seed = seed;
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        take!("train.epochs", t.epochs);
        take!("train.batches_per_epoch", t.batches_per_epoch);
        take!("train.batch_size", t.batch_size);
        take!("train.lr_max", t.lr_max);
        take!("train.warmup_epochs", t.warmup_epochs);
        take!("train.weight_decay", t.weight_decay);
        take!("train.fg_oversample_prob", t.fg_oversample_prob);
        take!("train.val_interval", t.val_interval);
        take!("train.augment.mirror_prob", t.augment.mirror_prob);
        take!("train.augment.rotate_prob", t.augment.rotate_prob);
        take!("train.augment.noise_prob", t.augment.noise_prob);
        take!("train.augment.noise_sd_max", t.augment.noise_sd_max);
        take!("train.augment.scale_prob", t.augment.scale_prob);
        take!("train.augment.scale_min", t.augment.scale_range[0]);
        take!("train.augment.scale_max", t.augment.scale_range[1]);
        if !self.get("train.patch").is_empty() {
            t.patch_size = parse_patch(self.get("train.patch"))
                .map_err(|e| ConfigError(format!("`train.patch`: {e}")))?;
        }
        t.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.record_train(&t);
        Ok(t)
    }

    fn record_train(&mut self, t: &TrainConfig) {
        let a: &AugmentConfig = &t.augment;
        let pairs = [
            ("train.epochs", t.epochs.to_string()),
            ("train.batches_per_epoch", t.batches_per_epoch.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.patch", format_patch(t.patch_size)),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.fg_oversample_prob", t.fg_oversample_prob.to_string()),
            ("train.val_interval", t.val_interval.to_string()),
            ("train.augment.mirror_prob", a.mirror_prob.to_string()),
            ("train.augment.rotate_prob", a.rotate_prob.to_string()),
            ("train.augment.noise_prob", a.noise_prob.to_string()),
            ("train.augment.noise_sd_max", a.noise_sd_max.to_string()),
            ("train.augment.scale_prob", a.scale_prob.to_string()),
            ("train.augment.scale_min", a.scale_range[0].to_string()),
            ("train.augment.scale_max", a.scale_range[1].to_string()),
        ];
        for (k, v) in pairs {
            self.values.insert(k.to_string(), v);
        }
    }

    /// Inference settings; the patch falls back to `train.patch`, then 32³.
    pub fn inference(&mut self) -> ConfigResult<InferenceConfig> {
        let patch_text = match (self.get("infer.patch"), self.get("train.patch")) {
            ("", "") => "32".to_string(),
            ("", t) => t.to_string(),
            (p, _) => p.to_string(),
        };
        let patch =
            parse_patch(&patch_text).map_err(|e| ConfigError(format!("`infer.patch`: {e}")))?;
        let mut cfg = InferenceConfig::new(patch);
        cfg.overlap = self.parse_opt("infer.overlap")?.unwrap_or(DEFAULT_OVERLAP);
        cfg.sigma_scale = self
            .parse_opt("infer.sigma_scale")?
            .unwrap_or(DEFAULT_SIGMA_SCALE);
        cfg.wide_accumulator = self.parse("infer.wide_accumulator")?;
        if !(0.0..1.0).contains(&cfg.overlap) {
            return err(format!("`infer.overlap`: {} is outside [0, 1)", cfg.overlap));
        }
        if !(cfg.sigma_scale > 0.0) {
            return err("`infer.sigma_scale` must be positive");
        }
        self.values
            .insert("infer.patch".into(), format_patch(patch));
        self.values
            .insert("infer.overlap".into(), cfg.overlap.to_string());
        self.values
            .insert("infer.sigma_scale".into(), cfg.sigma_scale.to_string());
        Ok(cfg)
    }

    pub fn thresholds(&self) -> ConfigResult<Thresholds> {
        Ok(Thresholds {
            dead_threshold: self.parse("probe.dead_threshold")?,
            saturation_level: self.parse("probe.saturation_level")?,
            saturated_fraction: self.parse("probe.saturated_fraction")?,
        })
    }
}

/// `32` or `32x32x48`.
pub fn parse_patch(text: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = text.split('x').map(str::trim).collect();
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    let nums = nums.map_err(|e| format!("cannot parse `{text}`: {e}"))?;
    match nums[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("`{text}` is neither N nor DxHxW")),
    }
}

pub fn format_patch(p: [usize; 3]) -> String {
    format!("{}x{}x{}", p[0], p[1], p[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = Settings::defaults();
        assert!(s.apply_text("train.lr=1", "x").is_err());
        assert!(s.apply_text("# comment\n\ntrain.lr_max = 2e-3\n", "x").is_ok());
        assert_eq!(s.get("train.lr_max"), "2e-3");
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = Settings::defaults();
        s.set("seed", "9").unwrap();
        s.train(Phase::Finetune, 9).unwrap();
        let mut t = Settings::defaults();
        t.apply_text(&s.snapshot(), "snap").unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn patch_syntax() {
        assert_eq!(parse_patch("32").unwrap(), [32; 3]);
        assert_eq!(parse_patch("16x32x48").unwrap(), [16, 32, 48]);
        assert!(parse_patch("16x32").is_err());
    }
}
