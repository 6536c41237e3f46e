//! Minibatch training with the alpha schedule, checkpoints and resume.

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snp_core::nn::{Adam, ParamStore};
use snp_core::objective::{pd_mask, CombinedReport};

use crate::checkpoint::{check_compatible, Checkpoint};
use crate::config::{AlphaSchedule, RunConfig};
use crate::error::{HarnessError, IoContext, Result};
use crate::metrics::{MetricRow, MetricsLog};
use crate::model::{batch_gradients, episode_steps, Dataset, Model};

/// Tracks when the dropout term switches on.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaState {
    pub schedule: AlphaSchedule,
    pub window: usize,
    pub tolerance: f64,
    pub on: bool,
    /// Reconstruction losses of the last `2 * window` iterations.
    pub history: Vec<f64>,
}

impl AlphaState {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            schedule: cfg.alpha,
            window: cfg.alpha_window,
            tolerance: cfg.alpha_tolerance,
            on: cfg.alpha == AlphaSchedule::Always,
            history: Vec::new(),
        }
    }

    pub fn alpha(&self, iteration: u64) -> f64 {
        let on = match self.schedule {
            AlphaSchedule::Never => false,
            AlphaSchedule::Always => true,
            AlphaSchedule::At(n) => iteration >= n,
            AlphaSchedule::Auto => self.on,
        };
        if on {
            1.0
        } else {
            0.0
        }
    }

    /// Records one iteration's reconstruction loss. Under `Auto`, alpha
    /// switches on once the mean loss of the latest window improves on the
    /// previous window by less than `tolerance` (relative).
    pub fn observe(&mut self, recon_loss: f64) {
        if self.schedule != AlphaSchedule::Auto || self.on {
            return;
        }
        self.history.push(recon_loss);
        let w = self.window;
        if self.history.len() > 2 * w {
            self.history.remove(0);
        }
        if self.history.len() == 2 * w {
            let prev = self.history[..w].iter().sum::<f64>() / w as f64;
            let cur = self.history[w..].iter().sum::<f64>() / w as f64;
            if (prev - cur) < self.tolerance * prev.abs() {
                self.on = true;
                self.history.clear();
            }
        }
    }
}

/// Batch means of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub iteration: u64,
    pub alpha: f64,
    pub loss: f64,
    pub elbo_snp: f64,
    pub recon: f64,
    pub kl: f64,
    pub elbo_pd: Option<f64>,
}

impl StepSummary {
    fn from_reports(iteration: u64, alpha: f64, reports: &[CombinedReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&CombinedReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let pd = reports.iter().all(|r| r.pd.is_some()) && !reports.is_empty();
        Self {
            iteration,
            alpha,
            loss: -mean(&|r| r.combined),
            elbo_snp: mean(&|r| r.snp.total),
            recon: mean(&|r| r.snp.recon()),
            kl: mean(&|r| r.snp.kl()),
            elbo_pd: pd.then(|| mean(&|r| r.pd.as_ref().map_or(0.0, |p| p.total))),
        }
    }

    fn rows(&self, seed: u64) -> Vec<MetricRow> {
        let it = self.iteration;
        let mut rows = vec![
            MetricRow::new(it, "train", "loss", self.loss, seed),
            MetricRow::new(it, "train", "elbo_snp", self.elbo_snp, seed),
            MetricRow::new(it, "train", "recon", self.recon, seed),
            MetricRow::new(it, "train", "kl", self.kl, seed),
            MetricRow::new(it, "train", "alpha", self.alpha, seed),
        ];
        if let Some(pd) = self.elbo_pd {
            rows.push(MetricRow::new(it, "train", "elbo_pd", pd, seed));
        }
        rows
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Completed iterations.
    pub iteration: u64,
    pub alpha: AlphaState,
    pub data: Dataset,
    log: MetricsLog,
}

impl Trainer {
    /// Fresh run; replaces any metrics log in `out_dir`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir).at(&cfg.out_dir)?;
        fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).at(&cfg.out_dir)?;
        let (model, params) = Model::build(&cfg)?;
        let params = params.cast::<f32>();
        let adam = Adam::new(&params, cfg.lr());
        let data = Dataset::for_config(&cfg, false)?;
        let log = MetricsLog::create(&cfg.metrics_path())?;
        Ok(Self {
            alpha: AlphaState::new(&cfg),
            cfg,
            model,
            params,
            adam,
            iteration: 0,
            data,
            log,
        })
    }

    /// Continues from the checkpoint in `cfg.out_dir`; the iteration counter
    /// and optimizer state carry over. `cfg.iterations` may extend the budget.
    pub fn resume(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ck = Checkpoint::load(&cfg.checkpoint_path())?;
        let mut saved = ck.config.clone();
        saved.iterations = cfg.iterations;
        saved.checkpoint_every = cfg.checkpoint_every;
        if saved != cfg {
            return Err(HarnessError::Config(
                "resume config differs from the checkpointed one beyond iterations/checkpoint_every".into(),
            ));
        }
        let (model, fresh) = Model::build(&cfg)?;
        check_compatible(&fresh, &ck.params)?;
        let data = Dataset::for_config(&cfg, false)?;
        let log = MetricsLog::resume(&cfg.metrics_path(), ck.iteration)?;
        let mut alpha = AlphaState::new(&cfg);
        alpha.on = ck.alpha_on;
        alpha.history = ck.alpha_history;
        Ok(Self {
            cfg,
            model,
            params: ck.params,
            adam: ck.adam,
            iteration: ck.iteration,
            alpha,
            data,
            log,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            iteration: self.iteration,
            alpha_on: self.alpha.on,
            alpha_history: self.alpha.history.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn save(&self) -> Result<()> {
        self.checkpoint().save(&self.cfg.checkpoint_path())
    }

    /// One optimizer update. The minibatch, dropout masks and noise seeds
    /// depend only on `(seed, iteration)`.
    pub fn step(&mut self) -> Result<StepSummary> {
        let it = self.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(it);
        let n = self.data.len();
        let batch = self.cfg.batch();
        let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let masks: Vec<Vec<bool>> = indices
            .iter()
            .map(|&i| pd_mask(episode_steps(&self.data, i), self.cfg.pd_prob, &mut rng))
            .collect();
        let seeds: Vec<u64> = (0..batch).map(|_| rng.random()).collect();
        let alpha = self.alpha.alpha(it);
        let result = batch_gradients(
            &self.model,
            &self.params,
            &self.data,
            &indices,
            alpha,
            &masks,
            &seeds,
            self.cfg.max_targets,
        );
        let (reports, grads) = match result {
            Ok(r) => r,
            Err(HarnessError::Core(snp_core::CoreError::NonFinite { .. })) => return Err(self.non_finite()),
            Err(e) => return Err(e),
        };
        let summary = StepSummary::from_reports(it, alpha, &reports);
        if !summary.loss.is_finite() {
            return Err(self.non_finite());
        }
        self.adam.update(&mut self.params, &grads);
        if !self.params.is_finite() {
            return Err(self.non_finite());
        }
        self.alpha.observe(-summary.recon);
        if it % self.cfg.log_every == 0 {
            for row in summary.rows(self.cfg.seed) {
                self.log.append(&row)?;
            }
        }
        self.iteration += 1;
        if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0 {
            self.log.flush()?;
            self.save()?;
        }
        Ok(summary)
    }

    fn non_finite(&self) -> HarnessError {
        let path = self.cfg.checkpoint_path();
        HarnessError::NonFinite {
            iteration: self.iteration,
            checkpoint: if path.exists() {
                path.display().to_string()
            } else {
                "none".into()
            },
        }
    }

    /// Trains until `cfg.iterations` and writes the final checkpoint.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        self.log.flush()?;
        self.save()
    }

    pub fn metrics_path(&self) -> &std::path::Path {
        self.log.path()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataTask, ModelChoice, SizePreset};

    fn tiny(dir: &std::path::Path) -> RunConfig {
        let mut c = RunConfig::new(DataTask::A, ModelChoice::Snp, 6, dir);
        c.size = SizePreset::Micro;
        c.train_episodes = 8;
        c.batch = Some(2);
        c.alpha = AlphaSchedule::At(3);
        c
    }

    #[test]
    fn alpha_auto_flips_on_plateau() {
        let mut c = RunConfig::new(DataTask::A, ModelChoice::Snp, 1, "x");
        c.alpha_window = 3;
        let mut a = AlphaState::new(&c);
        for v in [10.0, 9.0, 8.0, 7.0, 6.0, 5.0] {
            a.observe(v);
        }
        assert!(!a.on);
        for _ in 0..6 {
            a.observe(5.0);
        }
        assert!(a.on);
        assert_eq!(a.alpha(0), 1.0);
    }

    #[test]
    fn loss_before_trigger_is_plain_elbo() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny(dir.path())).unwrap();
        for i in 0..6 {
            let s = t.step().unwrap();
            if i < 3 {
                assert_eq!(s.alpha, 0.0);
                assert_eq!(s.loss, -s.elbo_snp);
                assert!(s.elbo_pd.is_none());
            } else {
                assert!(s.elbo_pd.is_some());
            }
        }
    }

    #[test]
    fn resume_continues_the_counter_and_matches_a_straight_run() {
        let a = tempfile::tempdir().unwrap();
        let mut straight = Trainer::new(tiny(a.path())).unwrap();
        straight.run().unwrap();

        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(b.path());
        cfg.iterations = 4;
        Trainer::new(cfg.clone()).unwrap().run().unwrap();
        cfg.iterations = 6;
        let mut resumed = Trainer::resume(cfg).unwrap();
        assert_eq!(resumed.iteration, 4);
        resumed.run().unwrap();
        assert_eq!(resumed.iteration, 6);

        let la = MetricsLog::read(&a.path().join("metrics.csv")).unwrap();
        let lb = MetricsLog::read(&b.path().join("metrics.csv")).unwrap();
        assert_eq!(la, lb);
    }
}
