//! Run configuration: a flat TOML document. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use snp_core::gp::Task;
use snp_core::shapes2d::Regime;

use crate::error::{HarnessError, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTask {
    A,
    B,
    C,
    Prediction,
    Tracking,
}

impl DataTask {
    pub fn gp(self) -> Option<Task> {
        match self {
            DataTask::A => Some(Task::A),
            DataTask::B => Some(Task::B),
            DataTask::C => Some(Task::C),
            _ => None,
        }
    }

    pub fn regime(self) -> Option<Regime> {
        match self {
            DataTask::Prediction => Some(Regime::Prediction),
            DataTask::Tracking => Some(Regime::Tracking),
            _ => None,
        }
    }
}

impl FromStr for DataTask {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(DataTask::A),
            "b" => Ok(DataTask::B),
            "c" => Ok(DataTask::C),
            "prediction" => Ok(DataTask::Prediction),
            "tracking" => Ok(DataTask::Tracking),
            _ => Err(HarnessError::Config(format!(
                "unknown task {s:?}; expected a, b, c, prediction or tracking"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Snp,
    Np,
    Tgqn,
    Gqn,
}

impl ModelChoice {
    pub fn is_scene(self) -> bool {
        matches!(self, ModelChoice::Tgqn | ModelChoice::Gqn)
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelChoice::Snp => "snp",
            ModelChoice::Np => "np",
            ModelChoice::Tgqn => "tgqn",
            ModelChoice::Gqn => "gqn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Paper,
    Desk,
    Micro,
}

/// When the dropout term switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlphaSchedule {
    Never,
    Always,
    /// Switches on at this iteration.
    At(u64),
    /// Switches on once the smoothed reconstruction loss stops improving.
    Auto,
}

impl TryFrom<String> for AlphaSchedule {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "never" => Ok(AlphaSchedule::Never),
            "always" => Ok(AlphaSchedule::Always),
            "auto" => Ok(AlphaSchedule::Auto),
            _ => s
                .strip_prefix("at:")
                .and_then(|n| n.parse().ok())
                .map(AlphaSchedule::At)
                .ok_or_else(|| format!("bad alpha schedule {s:?}; expected never, always, auto or at:<iteration>")),
        }
    }
}

impl From<AlphaSchedule> for String {
    fn from(a: AlphaSchedule) -> String {
        match a {
            AlphaSchedule::Never => "never".into(),
            AlphaSchedule::Always => "always".into(),
            AlphaSchedule::Auto => "auto".into(),
            AlphaSchedule::At(n) => format!("at:{n}"),
        }
    }
}

fn default_size() -> SizePreset {
    SizePreset::Desk
}
fn default_alpha() -> AlphaSchedule {
    AlphaSchedule::Auto
}
fn default_alpha_window() -> usize {
    500
}
fn default_alpha_tolerance() -> f64 {
    0.01
}
fn default_pd_prob() -> f64 {
    0.3
}
fn default_train_episodes() -> usize {
    2000
}
fn default_eval_episodes() -> usize {
    200
}
fn default_log_every() -> u64 {
    1
}
fn default_target_nll_samples() -> usize {
    20
}
fn default_mse_samples() -> usize {
    40
}
fn default_nll_k() -> usize {
    40
}
fn default_scene_steps() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: DataTask,
    pub model: ModelChoice,
    #[serde(default = "default_size")]
    pub size: SizePreset,
    /// Episode length for scene tasks; GP tasks fix their own.
    #[serde(default = "default_scene_steps")]
    pub steps: usize,
    /// Defaults to 1e-4 for GP tasks and 1e-5 for scenes.
    pub lr: Option<f64>,
    /// Defaults to 16 for GP tasks and 4 for scenes.
    pub batch: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: AlphaSchedule,
    #[serde(default = "default_alpha_window")]
    pub alpha_window: usize,
    #[serde(default = "default_alpha_tolerance")]
    pub alpha_tolerance: f64,
    /// Probability that a step is posterior-sampled in the dropout ELBO.
    #[serde(default = "default_pd_prob")]
    pub pd_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_train_episodes")]
    pub train_episodes: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub iterations: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub out_dir: PathBuf,
    /// Directory of episode records; episodes are generated from seeds when absent.
    pub data_dir: Option<PathBuf>,
    /// Scene targets kept per step during training.
    pub max_targets: Option<usize>,
    #[serde(default = "default_target_nll_samples")]
    pub target_nll_samples: usize,
    #[serde(default = "default_mse_samples")]
    pub mse_samples: usize,
    #[serde(default = "default_nll_k")]
    pub nll_k: usize,
}

impl RunConfig {
    /// Minimal config with every default applied.
    pub fn new(task: DataTask, model: ModelChoice, iterations: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            task,
            model,
            size: default_size(),
            steps: default_scene_steps(),
            lr: None,
            batch: None,
            alpha: default_alpha(),
            alpha_window: default_alpha_window(),
            alpha_tolerance: default_alpha_tolerance(),
            pd_prob: default_pd_prob(),
            seed: 0,
            data_seed: 0,
            train_episodes: default_train_episodes(),
            eval_episodes: default_eval_episodes(),
            iterations,
            checkpoint_every: 0,
            log_every: default_log_every(),
            out_dir: out_dir.into(),
            data_dir: None,
            max_targets: None,
            target_nll_samples: default_target_nll_samples(),
            mse_samples: default_mse_samples(),
            nll_k: default_nll_k(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let scene_task = self.task.regime().is_some();
        if self.model.is_scene() != scene_task {
            return Err(HarnessError::Config(format!(
                "model {} cannot be trained on task {:?}",
                self.model, self.task
            )));
        }
        if !(0.0..=1.0).contains(&self.pd_prob) {
            return Err(HarnessError::Config("pd_prob must lie in [0, 1]".into()));
        }
        if self.batch() == 0 || self.train_episodes == 0 {
            return Err(HarnessError::Config("batch and train_episodes must be positive".into()));
        }
        if !(self.lr() > 0.0) {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        if self.steps == 0 || self.alpha_window == 0 || self.log_every == 0 {
            return Err(HarnessError::Config("steps, alpha_window and log_every must be positive".into()));
        }
        if self.mse_samples == 0 || self.nll_k == 0 || self.target_nll_samples == 0 {
            return Err(HarnessError::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.model.is_scene() { 1e-5 } else { 1e-4 })
    }

    pub fn batch(&self) -> usize {
        self.batch.unwrap_or(if self.model.is_scene() { 4 } else { 16 })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.snpc")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        # comments are allowed
        task = "b"
        model = "snp"
        iterations = 10
        out_dir = "runs/x"
    "#;

    #[test]
    fn defaults_follow_the_model_family() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!((c.lr(), c.batch(), c.pd_prob), (1e-4, 16, 0.3));
        assert_eq!(c.alpha, AlphaSchedule::Auto);
        let s = RunConfig::new(DataTask::Prediction, ModelChoice::Tgqn, 1, "o");
        assert_eq!((s.lr(), s.batch()), (1e-5, 4));
    }

    #[test]
    fn unknown_keys_and_mismatches_are_errors() {
        let typo = format!("{MINIMAL}\nlearning_rate = 0.1\n");
        let err = RunConfig::parse(&typo).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let wrong = MINIMAL.replace("\"snp\"", "\"tgqn\"");
        assert!(RunConfig::parse(&wrong).is_err());
        let bad_alpha = format!("{MINIMAL}\nalpha = \"at:x\"\n");
        assert!(RunConfig::parse(&bad_alpha).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.alpha = AlphaSchedule::At(300);
        c.max_targets = Some(3);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
