//! Training configuration and its `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo cannot silently fall back to a default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::eval::Policy;
use crate::fixation::SampleMode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the reconstruction term in the task loss.
    pub alpha: f32,
    pub learning_rate: f32,
    pub fpg_learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub batch_size: usize,
    pub fpg_batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub max_fixations: usize,
    pub seed: u64,
    /// Use only the first `train_limit` training images (0 = all).
    pub train_limit: usize,
    /// Same, for the fixation-policy phase.
    pub fpg_train_limit: usize,
    /// Constant subtracted from every reward in the policy update.
    pub reward_baseline: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            learning_rate: 1e-3,
            fpg_learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            fpg_batch_size: 64,
            epochs_phase1: 10,
            epochs_phase2: 1,
            max_fixations: 16,
            seed: 0,
            train_limit: 0,
            fpg_train_limit: 0,
            reward_baseline: 0.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "alpha",
    "learning_rate",
    "fpg_learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "fpg_batch_size",
    "epochs_phase1",
    "epochs_phase2",
    "max_fixations",
    "seed",
    "train_limit",
    "fpg_train_limit",
    "reward_baseline",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "alpha" => self.alpha = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "fpg_learning_rate" => self.fpg_learning_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "fpg_batch_size" => self.fpg_batch_size = parse_num(key, value)?,
            "epochs_phase1" => self.epochs_phase1 = parse_num(key, value)?,
            "epochs_phase2" => self.epochs_phase2 = parse_num(key, value)?,
            "max_fixations" => self.max_fixations = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "fpg_train_limit" => self.fpg_train_limit = parse_num(key, value)?,
            "reward_baseline" => self.reward_baseline = parse_num(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for_each_assignment(text, |key, value| self.set(key, value))?;
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha.to_string(), "must lie in [0, 1]");
        }
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("fpg_learning_rate", self.fpg_learning_rate),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, v.to_string(), "must be positive");
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, v.to_string(), "must lie in [0, 1)");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "must be positive");
        }
        if self.fpg_batch_size == 0 {
            return bad("fpg_batch_size", "0".into(), "must be positive");
        }
        if self.max_fixations == 0 || self.max_fixations > 64 {
            return bad("max_fixations", self.max_fixations.to_string(), "must lie in 1..=64");
        }
        if !self.reward_baseline.is_finite() {
            return bad("reward_baseline", self.reward_baseline.to_string(), "must be finite");
        }
        Ok(())
    }

    /// Renders every key; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "alpha" => self.alpha.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "fpg_learning_rate" => self.fpg_learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "fpg_batch_size" => self.fpg_batch_size.to_string(),
            "epochs_phase1" => self.epochs_phase1.to_string(),
            "epochs_phase2" => self.epochs_phase2.to_string(),
            "max_fixations" => self.max_fixations.to_string(),
            "seed" => self.seed.to_string(),
            "train_limit" => self.train_limit.to_string(),
            "fpg_train_limit" => self.fpg_train_limit.to_string(),
            "reward_baseline" => self.reward_baseline.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }
}

/// Everything a command line run can be configured with: the training
/// settings plus paths and evaluation selections.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub from: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub policy: Policy,
    /// `None` picks the command's own default.
    pub mode: Option<SampleMode>,
    pub budget: usize,
    pub threshold: Option<f32>,
    /// Evaluate only the first `limit` samples (0 = all).
    pub limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_dir: None,
            from: None,
            out: None,
            policy: Policy::Fpg,
            mode: None,
            budget: 16,
            threshold: None,
            limit: 0,
        }
    }
}

pub const RUN_KEYS: &[&str] = &["data_dir", "from", "out", "policy", "mode", "n", "threshold", "limit"];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason,
        };
        match key {
            "data_dir" => self.data_dir = Some(value.into()),
            "from" => self.from = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "policy" => self.policy = value.parse().map_err(|e: crate::Error| invalid(e.to_string()))?,
            "mode" => self.mode = Some(value.parse().map_err(|e: crate::Error| invalid(e.to_string()))?),
            "n" => self.budget = parse_num(key, value)?,
            "threshold" => self.threshold = Some(parse_num(key, value)?),
            "limit" => self.limit = parse_num(key, value)?,
            _ => return self.train.set(key, value),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for_each_assignment(text, |key, value| self.set(key, value))?;
        self.train.validate()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders the set keys; paths and selections left unset are omitted.
    pub fn render(&self) -> String {
        let mut s = self.train.render();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (key, value) in [
            ("data_dir", path(&self.data_dir)),
            ("from", path(&self.from)),
            ("out", path(&self.out)),
            ("policy", Some(self.policy.as_str().to_string())),
            ("mode", self.mode.map(|m| m.as_str().to_string())),
            ("n", Some(self.budget.to_string())),
            ("threshold", self.threshold.map(|t| t.to_string())),
            ("limit", Some(self.limit.to_string())),
        ] {
            if let Some(v) = value {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }
}

fn for_each_assignment(text: &str, mut f: impl FnMut(&str, &str) -> Result<(), ConfigError>) -> Result<(), ConfigError> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = || ConfigError::Syntax {
            line: i + 1,
            text: raw.into(),
        };
        let (key, value) = line.split_once('=').ok_or_else(syntax)?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(syntax());
        }
        f(key, value).map_err(|e| match e {
            ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
            other => other,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = TrainConfig::parse("# header\nalpha = 0.25  # trailing\n\nseed=9\n").unwrap();
        assert_eq!(c.alpha, 0.25);
        assert_eq!(c.seed, 9);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert_eq!(
            TrainConfig::parse("alpha = 0.5\nalhpa = 0.1\n").unwrap_err(),
            ConfigError::UnknownKey {
                line: 2,
                key: "alhpa".into()
            }
        );
    }

    #[test]
    fn syntax_and_value_errors() {
        assert!(matches!(
            TrainConfig::parse("alpha 0.5").unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
        assert!(matches!(
            TrainConfig::parse("batch_size = -3").unwrap_err(),
            ConfigError::Value { .. }
        ));
        assert!(matches!(
            TrainConfig::parse("alpha = 1.5").unwrap_err(),
            ConfigError::Value { .. }
        ));
    }

    #[test]
    fn run_config_paths_and_selections() {
        let c = RunConfig::parse("data_dir = /tmp/m\npolicy = random\nmode = argmax\nn = 4\nalpha = 0.1\n").unwrap();
        assert_eq!(c.data_dir, Some(PathBuf::from("/tmp/m")));
        assert_eq!(c.policy, Policy::Random);
        assert_eq!(c.mode, Some(SampleMode::Argmax));
        assert_eq!(c.budget, 4);
        assert_eq!(c.train.alpha, 0.1);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        assert!(matches!(RunConfig::parse("policy = greedy").unwrap_err(), ConfigError::Value { .. }));
        assert!(matches!(RunConfig::parse("\ncolour = red").unwrap_err(), ConfigError::UnknownKey { line: 2, .. }));
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::default();
        c.alpha = 0.3;
        c.fpg_learning_rate = 3e-5;
        c.seed = u64::MAX;
        assert_eq!(TrainConfig::parse(&c.render()).unwrap(), c);
    }
}
