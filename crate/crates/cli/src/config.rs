//! Run settings from a TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use xdwaf_core::detect::ScoreKind;
use xdwaf_core::pipeline::{Preset, RunConfig, ARTIFACT_ENV};

/// Settings that may come from the config file or from flags. Flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Artifact root directory.
    #[arg(long, global = true, env = ARTIFACT_ENV)]
    pub artifacts: Option<PathBuf>,

    /// Hyperparameter preset: desk or paper-512.
    #[arg(long, global = true, value_parser = parse_enum::<Preset>)]
    pub preset: Option<Preset>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Auxiliary-domain training file. Repeat once per domain.
    #[arg(long = "aux", global = true)]
    #[serde(rename = "auxiliary")]
    pub aux: Vec<PathBuf>,

    #[arg(long, global = true)]
    pub target_train: Option<PathBuf>,

    #[arg(long, global = true)]
    pub target_test: Option<PathBuf>,

    #[arg(long, global = true)]
    pub meta_iters: Option<usize>,

    #[arg(long, global = true)]
    pub inner_steps: Option<usize>,

    #[arg(long, global = true)]
    pub inner_lr: Option<f64>,

    #[arg(long, global = true)]
    pub outer_lr: Option<f64>,

    /// Token budget of one meta-learning batch.
    #[arg(long, global = true)]
    pub token_batch: Option<usize>,

    #[arg(long, global = true)]
    pub adapt_steps: Option<usize>,

    #[arg(long, global = true)]
    pub adapt_lr: Option<f64>,

    /// Training-score quantile used as the detection threshold.
    #[arg(long, global = true)]
    pub quantile: Option<f64>,

    /// Request score: mean_nll or mismatch_rate.
    #[arg(long, global = true, value_parser = parse_enum::<ScoreKind>)]
    pub score: Option<ScoreKind>,

    #[arg(long, global = true)]
    pub cache_capacity: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

impl Settings {
    pub fn load(path: &Path) -> anyhow::Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut s: Settings = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        s.artifacts.iter_mut().for_each(rebase);
        s.aux.iter_mut().for_each(rebase);
        s.target_train.iter_mut().for_each(rebase);
        s.target_test.iter_mut().for_each(rebase);
        Ok(s)
    }

    /// `self` overrides `base` field by field.
    pub fn over(self, base: Settings) -> Settings {
        Settings {
            artifacts: self.artifacts.or(base.artifacts),
            preset: self.preset.or(base.preset),
            seed: self.seed.or(base.seed),
            aux: if self.aux.is_empty() { base.aux } else { self.aux },
            target_train: self.target_train.or(base.target_train),
            target_test: self.target_test.or(base.target_test),
            meta_iters: self.meta_iters.or(base.meta_iters),
            inner_steps: self.inner_steps.or(base.inner_steps),
            inner_lr: self.inner_lr.or(base.inner_lr),
            outer_lr: self.outer_lr.or(base.outer_lr),
            token_batch: self.token_batch.or(base.token_batch),
            adapt_steps: self.adapt_steps.or(base.adapt_steps),
            adapt_lr: self.adapt_lr.or(base.adapt_lr),
            quantile: self.quantile.or(base.quantile),
            score: self.score.or(base.score),
            cache_capacity: self.cache_capacity.or(base.cache_capacity),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        let preset = self.preset.unwrap_or(Preset::Desk);
        let artifacts = self.artifacts.clone().unwrap_or_else(|| PathBuf::from("artifacts"));
        let mut cfg = RunConfig::new(preset, artifacts);
        cfg.auxiliary = self.aux.clone();
        cfg.target_train = self.target_train.clone().unwrap_or_default();
        cfg.target_test = self.target_test.clone().unwrap_or_default();
        cfg.seed = self.seed.unwrap_or(0);
        let h = &mut cfg.hyper;
        set(&mut h.meta.max_meta_iters, self.meta_iters);
        set(&mut h.meta.inner_steps, self.inner_steps);
        set(&mut h.meta.inner_lr, self.inner_lr);
        set(&mut h.meta.outer_lr, self.outer_lr);
        set(&mut h.meta.token_batch, self.token_batch);
        set(&mut h.adapt.steps, self.adapt_steps);
        set(&mut h.adapt.adam.lr, self.adapt_lr);
        set(&mut h.quantile, self.quantile);
        set(&mut h.score_kind, self.score);
        set(&mut h.cache_capacity, self.cache_capacity);
        cfg
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
