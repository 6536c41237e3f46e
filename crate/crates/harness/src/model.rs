//! The four trainable models behind one interface, and their datasets.

use snp_core::gp::{sample_episodes, Episode1D};
use snp_core::nn::ParamStore;
use snp_core::objective::CombinedReport;
use snp_core::shapes2d::{sample_episode2d, Episode2D, Regime};
use snp_core::snp1d::{ModelKind, Snp1d, Snp1dConfig};
use snp_core::tgqn::{PreparedScene, SceneModelKind, TgqnConfig, TgqnModel};
use snp_core::autodiff::Gradients;

use crate::config::{DataTask, ModelChoice, RunConfig, SizePreset};
use crate::error::{HarnessError, Result};
use crate::record::{load_dir, AnyEpisode};

pub enum Model {
    Seq(Snp1d),
    Scene(TgqnModel),
}

impl Model {
    /// Builds the model described by `cfg` with freshly initialized parameters.
    pub fn build(cfg: &RunConfig) -> Result<(Self, ParamStore<f64>)> {
        Ok(match cfg.model {
            ModelChoice::Snp | ModelChoice::Np => {
                let kind = if cfg.model == ModelChoice::Snp { ModelKind::Snp } else { ModelKind::Np };
                let mc = match cfg.size {
                    SizePreset::Paper => Snp1dConfig::paper(kind),
                    SizePreset::Desk => Snp1dConfig::desk(kind),
                    SizePreset::Micro => Snp1dConfig::micro(kind),
                };
                let (m, s) = Snp1d::new(mc, cfg.seed);
                (Model::Seq(m), s)
            }
            ModelChoice::Tgqn | ModelChoice::Gqn => {
                let kind = if cfg.model == ModelChoice::Tgqn {
                    SceneModelKind::Tgqn
                } else {
                    SceneModelKind::Gqn
                };
                let mc = match cfg.size {
                    SizePreset::Paper => TgqnConfig::paper(kind),
                    SizePreset::Desk => TgqnConfig::desk(kind),
                    SizePreset::Micro => TgqnConfig::micro(kind),
                };
                let (m, s) = TgqnModel::new(mc, cfg.seed)?;
                (Model::Scene(m), s)
            }
        })
    }

    pub fn seq(&self) -> Option<&Snp1d> {
        match self {
            Model::Seq(m) => Some(m),
            Model::Scene(_) => None,
        }
    }

    pub fn scene(&self) -> Option<&TgqnModel> {
        match self {
            Model::Scene(m) => Some(m),
            Model::Seq(_) => None,
        }
    }
}

/// Seeds of the training and evaluation splits; disjoint for any `data_seed`.
pub fn split_seeds(data_seed: u64, eval: bool, count: usize) -> Vec<u64> {
    let base = (data_seed << 32) | if eval { 1 << 31 } else { 0 };
    (0..count as u64).map(|i| base + i).collect()
}

/// Episodes of one split. Scene episodes are large and are regenerated from
/// their seeds on demand unless they were loaded from records.
pub enum Dataset {
    Gp(Vec<Episode1D>),
    ShapeSeeds { regime: Regime, steps: usize, seeds: Vec<u64> },
    Shapes(Vec<Episode2D>),
}

impl Dataset {
    pub fn for_config(cfg: &RunConfig, eval: bool) -> Result<Self> {
        if let Some(dir) = cfg.data_dir.as_ref().filter(|_| !eval) {
            return Self::from_records(load_dir(dir)?, cfg.task);
        }
        let count = if eval { cfg.eval_episodes } else { cfg.train_episodes };
        Self::generate(cfg.task, cfg.steps, &split_seeds(cfg.data_seed, eval, count))
    }

    pub fn generate(task: DataTask, steps: usize, seeds: &[u64]) -> Result<Self> {
        if let Some(t) = task.gp() {
            return Ok(Dataset::Gp(sample_episodes(t, seeds)?));
        }
        let regime = task.regime().expect("scene task");
        Ok(Dataset::ShapeSeeds {
            regime,
            steps,
            seeds: seeds.to_vec(),
        })
    }

    pub fn from_records(episodes: Vec<AnyEpisode>, task: DataTask) -> Result<Self> {
        if episodes.is_empty() {
            return Err(HarnessError::Config("dataset directory holds no episode records".into()));
        }
        let mismatch = || HarnessError::Config(format!("records do not match task {task:?}"));
        if let Some(t) = task.gp() {
            episodes
                .into_iter()
                .map(|e| match e {
                    AnyEpisode::Gp(g) if g.task == t => Ok(g),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()
                .map(Dataset::Gp)
        } else {
            let regime = task.regime();
            episodes
                .into_iter()
                .map(|e| match e {
                    AnyEpisode::Shapes(s) if Some(s.regime) == regime => Ok(s),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_>>()
                .map(Dataset::Shapes)
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Gp(v) => v.len(),
            Dataset::ShapeSeeds { seeds, .. } => seeds.len(),
            Dataset::Shapes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gp(&self) -> Option<&[Episode1D]> {
        match self {
            Dataset::Gp(v) => Some(v),
            _ => None,
        }
    }

    pub fn shape_episode(&self, i: usize) -> Result<Episode2D> {
        match self {
            Dataset::ShapeSeeds { regime, steps, seeds } => Ok(sample_episode2d(*regime, *steps, seeds[i])?),
            Dataset::Shapes(v) => Ok(v[i].clone()),
            Dataset::Gp(_) => Err(HarnessError::Config("not a scene dataset".into())),
        }
    }
}

/// Minibatch loss and mean gradients for any model.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    alpha: f64,
    masks: &[Vec<bool>],
    seeds: &[u64],
    max_targets: Option<usize>,
) -> Result<(Vec<CombinedReport>, Gradients<f32>)> {
    match model {
        Model::Seq(m) => {
            let eps = data.gp().ok_or_else(|| HarnessError::Config("sequence model needs GP data".into()))?;
            let batch: Vec<&Episode1D> = indices.iter().map(|&i| &eps[i]).collect();
            Ok(m.batch_loss_and_grads(params, &batch, alpha, masks, seeds)?)
        }
        Model::Scene(m) => {
            let prepared: Vec<PreparedScene> = indices
                .iter()
                .map(|&i| Ok(m.prepare(&data.shape_episode(i)?, max_targets)))
                .collect::<Result<_>>()?;
            let refs: Vec<&PreparedScene> = prepared.iter().collect();
            Ok(m.batch_loss_and_grads(params, &refs, alpha, masks, seeds)?)
        }
    }
}

/// Number of steps of episode `i`, needed to size dropout masks.
pub fn episode_steps(data: &Dataset, i: usize) -> usize {
    match data {
        Dataset::Gp(v) => v[i].len(),
        Dataset::ShapeSeeds { steps, .. } => *steps,
        Dataset::Shapes(v) => v[i].len(),
    }
}
