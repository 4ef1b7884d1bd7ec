//! Run configuration: a strict key=value format with range validation.
//!
//! Every key can come from a `--config` file or be overridden by the
//! mirroring CLI flag. Unknown keys are rejected; numeric keys are
//! range-checked at parse time.

use std::fmt;
use std::path::{Path, PathBuf};

use ultraclean::attacks::Norm;
use ultraclean::cleanse::{Scope, ScoreMode};
use ultraclean::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Ucds,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackName {
    None,
    BadNets,
    Blended,
    Trojan,
    Sig,
    Lcbd,
    Htbd,
}

impl fmt::Display for AttackName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackName::None => "none",
            AttackName::BadNets => "badnets",
            AttackName::Blended => "blended",
            AttackName::Trojan => "trojan",
            AttackName::Sig => "sig",
            AttackName::Lcbd => "lcbd",
            AttackName::Htbd => "htbd",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    Checkerboard,
    Solid,
    Noise,
    Ppm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementKind {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// The full run configuration with every tunable of the pipeline.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,

    pub dataset_source: DataSource,
    pub dataset_path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub test_path: Option<PathBuf>,
    pub test_per_class: usize,

    pub attack: AttackName,
    pub target: usize,
    pub fraction: f64,
    pub count: Option<usize>,
    pub trigger: TriggerKind,
    pub trigger_size: usize,
    pub trigger_value: f64,
    pub trigger_seed: u64,
    pub trigger_ppm: Option<PathBuf>,
    pub placement: PlacementKind,
    pub alpha: f64,
    pub sig_delta: f64,
    pub sig_freq: usize,
    pub sig_test_delta: f64,
    pub epsilon: f64,
    pub norm: Norm,
    /// Defaults are attack-specific when unset (40 LCBD, 100 Trojan, 200 HTBD).
    pub steps: Option<usize>,
    /// Defaults are attack-specific when unset.
    pub step_size: Option<f64>,
    pub transparency: f64,

    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,

    pub beta: f64,
    pub scope: Scope,
    pub score_mode: ScoreMode,
    pub nlm_patch: usize,
    pub nlm_search: usize,
    pub nlm_sigma: f64,
    pub nlm_h: f64,
    pub median_radius: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: None,
            dataset_source: DataSource::Synthetic,
            dataset_path: None,
            classes: 10,
            per_class: 500,
            size: 16,
            test_path: None,
            test_per_class: 100,
            attack: AttackName::None,
            target: 0,
            fraction: 0.05,
            count: None,
            trigger: TriggerKind::Checkerboard,
            trigger_size: 4,
            trigger_value: 1.0,
            trigger_seed: 1,
            trigger_ppm: None,
            placement: PlacementKind::BottomRight,
            alpha: 0.2,
            sig_delta: 20.0,
            sig_freq: 6,
            sig_test_delta: 80.0,
            epsilon: 16.0,
            norm: Norm::LInf,
            steps: None,
            step_size: None,
            transparency: 0.5,
            epochs: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            beta: 0.3,
            scope: Scope::WholeDataset,
            score_mode: ScoreMode::Both,
            nlm_patch: 3,
            nlm_search: 10,
            nlm_sigma: 10.0,
            nlm_h: 10.0,
            median_radius: 1,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("key {key}={value}: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

impl RunConfig {
    /// Applies one key=value pair, rejecting unknown keys and out-of-range
    /// values.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "out.dir" => self.out_dir = Some(PathBuf::from(value)),
            "dataset.source" => {
                self.dataset_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "ucds" => DataSource::Ucds,
                    "cifar10" => DataSource::Cifar10,
                    _ => return Err(bad(key, value, "expected synthetic|ucds|cifar10")),
                }
            }
            "dataset.path" => self.dataset_path = Some(PathBuf::from(value)),
            "dataset.classes" => {
                self.classes = parse_num(key, value)?;
                if self.classes < 2 {
                    return Err(bad(key, value, "must be >= 2"));
                }
            }
            "dataset.per_class" => {
                self.per_class = parse_num(key, value)?;
                if self.per_class == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "dataset.size" => {
                self.size = parse_num(key, value)?;
                if self.size < 16 || self.size % 4 != 0 {
                    return Err(bad(key, value, "must be >= 16 and a multiple of 4"));
                }
            }
            "test.path" => self.test_path = Some(PathBuf::from(value)),
            "test.per_class" => {
                self.test_per_class = parse_num(key, value)?;
                if self.test_per_class == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "attack.name" => {
                self.attack = match value {
                    "none" => AttackName::None,
                    "badnets" => AttackName::BadNets,
                    "blended" => AttackName::Blended,
                    "trojan" => AttackName::Trojan,
                    "sig" => AttackName::Sig,
                    "lcbd" => AttackName::Lcbd,
                    "htbd" => AttackName::Htbd,
                    _ => {
                        return Err(bad(
                            key,
                            value,
                            "expected none|badnets|blended|trojan|sig|lcbd|htbd",
                        ))
                    }
                }
            }
            "attack.target" => self.target = parse_num(key, value)?,
            "attack.fraction" => {
                self.fraction = parse_num(key, value)?;
                if !(self.fraction > 0.0 && self.fraction <= 1.0) {
                    return Err(bad(key, value, "must be in (0,1]"));
                }
            }
            "attack.count" => self.count = Some(parse_num(key, value)?),
            "attack.trigger" => {
                self.trigger = match value {
                    "checkerboard" => TriggerKind::Checkerboard,
                    "solid" => TriggerKind::Solid,
                    "noise" => TriggerKind::Noise,
                    "ppm" => TriggerKind::Ppm,
                    _ => return Err(bad(key, value, "expected checkerboard|solid|noise|ppm")),
                }
            }
            "attack.trigger_size" => {
                self.trigger_size = parse_num(key, value)?;
                if self.trigger_size == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "attack.trigger_value" => {
                self.trigger_value = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&self.trigger_value) {
                    return Err(bad(key, value, "must be in [0,1]"));
                }
            }
            "attack.trigger_seed" => self.trigger_seed = parse_num(key, value)?,
            "attack.trigger_ppm" => self.trigger_ppm = Some(PathBuf::from(value)),
            "attack.placement" => {
                self.placement = match value {
                    "tl" => PlacementKind::TopLeft,
                    "tr" => PlacementKind::TopRight,
                    "bl" => PlacementKind::BottomLeft,
                    "br" => PlacementKind::BottomRight,
                    _ => return Err(bad(key, value, "expected tl|tr|bl|br")),
                }
            }
            "attack.alpha" => {
                self.alpha = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&self.alpha) {
                    return Err(bad(key, value, "must be in [0,1]"));
                }
            }
            "attack.sig_delta" => {
                self.sig_delta = parse_num(key, value)?;
                if self.sig_delta < 0.0 {
                    return Err(bad(key, value, "must be >= 0"));
                }
            }
            "attack.sig_freq" => {
                self.sig_freq = parse_num(key, value)?;
                if self.sig_freq == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "attack.sig_test_delta" => {
                self.sig_test_delta = parse_num(key, value)?;
                if self.sig_test_delta < 0.0 {
                    return Err(bad(key, value, "must be >= 0"));
                }
            }
            "attack.epsilon" => {
                self.epsilon = parse_num(key, value)?;
                if self.epsilon < 0.0 {
                    return Err(bad(key, value, "must be >= 0"));
                }
            }
            "attack.norm" => {
                self.norm = match value {
                    "linf" => Norm::LInf,
                    "l2" => Norm::L2,
                    _ => return Err(bad(key, value, "expected linf|l2")),
                }
            }
            "attack.steps" => {
                let v: usize = parse_num(key, value)?;
                if v == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
                self.steps = Some(v);
            }
            "attack.step_size" => {
                let v: f64 = parse_num(key, value)?;
                if !(v > 0.0) {
                    return Err(bad(key, value, "must be > 0"));
                }
                self.step_size = Some(v);
            }
            "attack.transparency" => {
                self.transparency = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&self.transparency) {
                    return Err(bad(key, value, "must be in [0,1]"));
                }
            }
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.lr" => {
                self.lr = parse_num(key, value)?;
                if !(self.lr > 0.0) {
                    return Err(bad(key, value, "must be > 0"));
                }
            }
            "train.momentum" => {
                self.momentum = parse_num(key, value)?;
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(bad(key, value, "must be in [0,1)"));
                }
            }
            "train.weight_decay" => {
                self.weight_decay = parse_num(key, value)?;
                if self.weight_decay < 0.0 {
                    return Err(bad(key, value, "must be >= 0"));
                }
            }
            "train.batch_size" => {
                self.batch_size = parse_num(key, value)?;
                if self.batch_size == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "cleanse.beta" => {
                self.beta = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&self.beta) {
                    return Err(bad(key, value, "must be in [0,1]"));
                }
            }
            "cleanse.scope" => {
                self.scope = match value {
                    "whole" => Scope::WholeDataset,
                    "class" => Scope::SingleClass(self.target),
                    _ => return Err(bad(key, value, "expected whole|class")),
                }
            }
            "cleanse.score_mode" => {
                self.score_mode = match value {
                    "both" => ScoreMode::Both,
                    "median-only" => ScoreMode::MedianOnly,
                    "mean-only" => ScoreMode::MeanOnly,
                    _ => return Err(bad(key, value, "expected both|median-only|mean-only")),
                }
            }
            "cleanse.nlm_patch" => {
                self.nlm_patch = parse_num(key, value)?;
                if self.nlm_patch == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            "cleanse.nlm_search" => self.nlm_search = parse_num(key, value)?,
            "cleanse.nlm_sigma" => {
                self.nlm_sigma = parse_num(key, value)?;
                if self.nlm_sigma < 0.0 {
                    return Err(bad(key, value, "must be >= 0"));
                }
            }
            "cleanse.nlm_h" => {
                self.nlm_h = parse_num(key, value)?;
                if !(self.nlm_h > 0.0) {
                    return Err(bad(key, value, "must be > 0"));
                }
            }
            "cleanse.median_radius" => {
                self.median_radius = parse_num(key, value)?;
                if self.median_radius == 0 {
                    return Err(bad(key, value, "must be >= 1"));
                }
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Loads a key=value file ('#' starts a comment, blank lines ignored).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Cross-field checks that only make sense once everything is set.
    pub fn finish(&mut self) -> Result<()> {
        if matches!(self.scope, Scope::SingleClass(_)) {
            // Single-class scope always tracks the attack's target class.
            self.scope = Scope::SingleClass(self.target);
        }
        if self.dataset_source != DataSource::Synthetic && self.dataset_path.is_none() {
            return Err(Error::Config(
                "dataset.path is required when dataset.source is not synthetic".into(),
            ));
        }
        if self.target >= self.classes && self.dataset_source == DataSource::Synthetic {
            return Err(Error::Config(format!(
                "attack.target {} >= dataset.classes {}",
                self.target, self.classes
            )));
        }
        Ok(())
    }

    /// Derived per-phase seeds so phases can be reproduced in isolation.
    pub fn seed_data(&self) -> u64 {
        self.seed
    }
    pub fn seed_test(&self) -> u64 {
        self.seed + 1
    }
    pub fn seed_poison(&self) -> u64 {
        self.seed + 2
    }
    pub fn seed_model(&self) -> u64 {
        self.seed + 3
    }
    pub fn seed_shuffle(&self) -> u64 {
        self.seed + 4
    }
    pub fn seed_attacker(&self) -> u64 {
        self.seed + 5
    }
}
