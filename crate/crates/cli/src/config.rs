//! Run configuration: a plain-text file of flat dotted keys, one
//! `key = value` per line, with `#` comments. The same keys are accepted as
//! `--set key=value` overrides, and the fully materialized map is echoed
//! into every run directory so a run can be reproduced from its own record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use clozefit_core::masking::{MaskKind, MaskScheme};
use clozefit_core::metrics::MetricKind;
use clozefit_core::model::ModelConfig;
use clozefit_core::synthetic::{SyntheticKind, SyntheticSpec};
use clozefit_core::task::TaskId;
use clozefit_core::trainer::{Objective, TrainConfig};

/// The raw key-value settings, always fully materialized over defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "ablate.arms",
    "data.dev",
    "data.test",
    "data.train",
    "mask.kind",
    "mask.ratio",
    "metric",
    "model.d_ff",
    "model.d_model",
    "model.max_len",
    "model.n_heads",
    "model.n_layers",
    "model.seed",
    "objective",
    "pvp.custom",
    "pvp.index",
    "pvp.mtmp",
    "synthetic.kind",
    "synthetic.n_dev",
    "synthetic.n_test",
    "synthetic.n_train",
    "synthetic.noise",
    "synthetic.vocab_seed",
    "task",
    "train.batch_size",
    "train.eval_every",
    "train.lr",
    "train.seed",
    "train.total_batches",
    "train.warmup_frac",
    "train.weight_decay",
    "vocab.min_count",
];

impl Default for Settings {
    fn default() -> Self {
        let defaults = [
            ("ablate.arms", "objectives"),
            ("mask.kind", "variable"),
            ("mask.ratio", "0.105"),
            ("metric", "auto"),
            ("model.d_ff", "256"),
            ("model.d_model", "64"),
            ("model.max_len", "128"),
            ("model.n_heads", "2"),
            ("model.n_layers", "2"),
            ("model.seed", "42"),
            ("objective", "adapet"),
            ("pvp.index", "1"),
            ("pvp.mtmp", "false"),
            ("synthetic.kind", "keyword-entailment"),
            ("synthetic.n_dev", "64"),
            ("synthetic.n_test", "128"),
            ("synthetic.n_train", "32"),
            ("synthetic.noise", "0.0"),
            ("synthetic.vocab_seed", "42"),
            ("task", "rte"),
            ("train.batch_size", "16"),
            ("train.eval_every", "50"),
            ("train.lr", "1e-5"),
            ("train.seed", "42"),
            ("train.total_batches", "1000"),
            ("train.warmup_frac", "0.10"),
            ("train.weight_decay", "1e-2"),
            ("vocab.min_count", "1"),
        ];
        Settings {
            map: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Loads a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut settings = Settings::default();
        settings.apply_text(&text)?;
        Ok(settings)
    }

    /// Parses `key = value` lines over the current settings.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", idx + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key, rejecting unknown names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            bail!("unknown config key {key:?}");
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Applies repeated `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for pair in overrides {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, found {pair:?}"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Overrides both seeds at once (the `--seed` flag).
    pub fn set_master_seed(&mut self, seed: u64) {
        self.map.insert("train.seed".into(), seed.to_string());
        self.map.insert("model.seed".into(), seed.to_string());
    }

    /// The echo format: every key, sorted, one per line.
    pub fn to_echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .map
            .get(key)
            .ok_or_else(|| anyhow!("missing config key {key:?}"))?;
        raw.parse::<T>().map_err(|e| anyhow!("config key {key} = {raw:?}: {e}"))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.map.get(key).map(PathBuf::from)
    }
}

/// Which arm set an ablation sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateArms {
    /// adapet, adapet_no_lc, adapet_lc_pos_only, pet.
    Objectives,
    /// {15, 10.5, 10, 7.5}% x {fixed, variable}.
    MaskGrid,
}

/// Typed view over [`Settings`], validated up front.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskId,
    pub train: TrainConfig,
    /// Model shape; `vocab_size` is a placeholder until the vocabulary is
    /// built from the data.
    pub model: ModelConfig,
    pub data_train: Option<PathBuf>,
    pub data_dev: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub pvp_index: usize,
    pub pvp_custom: Option<PathBuf>,
    pub vocab_min_count: usize,
    pub metric: Option<MetricKind>,
    pub synthetic: SyntheticSpec,
    pub ablate_arms: AblateArms,
}

impl RunConfig {
    pub fn resolve(settings: &Settings) -> Result<Self> {
        let task = TaskId::parse(settings.get("task").unwrap_or_default())
            .map_err(|e| anyhow!("{e}"))?;
        let objective = Objective::parse(settings.get("objective").unwrap_or_default())
            .ok_or_else(|| anyhow!("unknown objective {:?}", settings.get("objective")))?;
        let mask_kind = MaskKind::parse(settings.get("mask.kind").unwrap_or_default())
            .map_err(|e| anyhow!("{e}"))?;
        let mask = MaskScheme::new(mask_kind, settings.parse("mask.ratio")?)
            .map_err(|e| anyhow!("{e}"))?;
        let train = TrainConfig {
            objective,
            lr: settings.parse("train.lr")?,
            weight_decay: settings.parse("train.weight_decay")?,
            warmup_frac: settings.parse("train.warmup_frac")?,
            total_batches: settings.parse("train.total_batches")?,
            batch_size: settings.parse("train.batch_size")?,
            seed: settings.parse("train.seed")?,
            eval_every: settings.parse("train.eval_every")?,
            mask,
            mtmp: settings.parse("pvp.mtmp")?,
        };
        train.validate().map_err(|e| anyhow!("{e}"))?;

        let model = ModelConfig {
            vocab_size: 0,
            d_model: settings.parse("model.d_model")?,
            n_layers: settings.parse("model.n_layers")?,
            n_heads: settings.parse("model.n_heads")?,
            d_ff: settings.parse("model.d_ff")?,
            max_len: settings.parse("model.max_len")?,
            seed: settings.parse("model.seed")?,
        };
        ModelConfig { vocab_size: 1, ..model }
            .validate()
            .map_err(|e| anyhow!("{e}"))?;

        let metric = match settings.get("metric").unwrap_or("auto") {
            "auto" => None,
            other => Some(
                MetricKind::parse(other).ok_or_else(|| anyhow!("unknown metric {other:?}"))?,
            ),
        };

        let synthetic_kind =
            SyntheticKind::parse(settings.get("synthetic.kind").unwrap_or_default())
                .map_err(|e| anyhow!("{e}"))?;
        let synthetic = SyntheticSpec {
            kind: synthetic_kind,
            vocab_seed: settings.parse("synthetic.vocab_seed")?,
            n_train: settings.parse("synthetic.n_train")?,
            n_dev: settings.parse("synthetic.n_dev")?,
            n_test: settings.parse("synthetic.n_test")?,
            noise: settings.parse("synthetic.noise")?,
        };
        synthetic.validate().map_err(|e| anyhow!("{e}"))?;

        let ablate_arms = match settings.get("ablate.arms").unwrap_or("objectives") {
            "objectives" => AblateArms::Objectives,
            "mask_grid" => AblateArms::MaskGrid,
            other => bail!("unknown ablate.arms {other:?}"),
        };

        let pvp_index: usize = settings.parse("pvp.index")?;
        if pvp_index == 0 {
            bail!("pvp.index is 1-based");
        }

        Ok(RunConfig {
            task,
            train,
            model,
            data_train: settings.path("data.train"),
            data_dev: settings.path("data.dev"),
            data_test: settings.path("data.test"),
            pvp_index,
            pvp_custom: settings.path("pvp.custom"),
            vocab_min_count: settings.parse("vocab.min_count")?,
            metric,
            synthetic,
            ablate_arms,
        })
    }
}
