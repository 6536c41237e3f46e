//! Sequences of 1D regression tasks drawn from Gaussian processes whose
//! squared-exponential kernel hyperparameters drift over time.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::parallel;

/// Kernel hyperparameters and their per-step drift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelState {
    pub l: f64,
    pub sigma: f64,
    pub dl: f64,
    pub dsigma: f64,
}

/// Generator knobs not fixed by the task definitions.
#[derive(Clone, Debug, PartialEq)]
pub struct GpConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Std of the Gaussian noise added to `l` at each transition.
    pub noise_l: f64,
    /// Std of the Gaussian noise added to `sigma` at each transition.
    pub noise_sigma: f64,
    pub floor_l: f64,
    pub floor_sigma: f64,
    /// Initial Cholesky jitter, relative to `sigma^2`.
    pub jitter_start: f64,
    /// Largest jitter tried before giving up, relative to `sigma^2`.
    pub jitter_max: f64,
    pub drift_l: f64,
    pub drift_sigma: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            x_min: -2.0,
            x_max: 2.0,
            noise_l: 0.01,
            noise_sigma: 0.02,
            floor_l: 0.1,
            floor_sigma: 0.1,
            jitter_start: 1e-6,
            jitter_max: 1e-2,
            drift_l: 0.03,
            drift_sigma: 0.05,
        }
    }
}

impl GpConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_l: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// The three 1D context regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Context only in the first 10 of 20 steps.
    A,
    /// Context on 10 random steps out of 20.
    B,
    /// One context point on 45 random steps out of 50.
    C,
}

impl Task {
    pub fn steps(self) -> usize {
        match self {
            Task::A | Task::B => 20,
            Task::C => 50,
        }
    }

    pub fn present_steps(self) -> usize {
        match self {
            Task::A | Task::B => 10,
            Task::C => 45,
        }
    }

    /// Upper bound on `n_t + m_t`.
    pub fn max_points(self) -> usize {
        match self {
            Task::A | Task::B => 50,
            Task::C => 10,
        }
    }

    pub fn l_range(self) -> (f64, f64) {
        match self {
            Task::A | Task::B => (0.7, 1.2),
            Task::C => (1.2, 1.9),
        }
    }

    pub fn sigma_range(self) -> (f64, f64) {
        match self {
            Task::A | Task::B => (1.0, 1.6),
            Task::C => (1.6, 3.1),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Task::A => 0,
            Task::B => 1,
            Task::C => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Task::A),
            1 => Ok(Task::B),
            2 => Ok(Task::C),
            _ => Err(CoreError::Unknown {
                kind: "task id",
                name: id.to_string(),
            }),
        }
    }
}

impl FromStr for Task {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Task::A),
            "b" => Ok(Task::B),
            "c" => Ok(Task::C),
            _ => Err(CoreError::Unknown {
                kind: "task",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::A => "a",
            Task::B => "b",
            Task::C => "c",
        })
    }
}

/// Which steps reveal context, and how many context/target points each has.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSchedule {
    pub present: Vec<bool>,
    pub n: Vec<usize>,
    pub m: Vec<usize>,
}

/// One step's observations; context and target points are disjoint.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Step1D {
    pub context_x: Vec<f32>,
    pub context_y: Vec<f32>,
    pub target_x: Vec<f32>,
    pub target_y: Vec<f32>,
}

impl Step1D {
    pub fn n_context(&self) -> usize {
        self.context_x.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode1D {
    pub task: Task,
    pub seed: u64,
    pub steps: Vec<Step1D>,
    /// Ground-truth hyperparameters per step, for diagnostics only.
    pub kernel_trace: Vec<KernelState>,
}

impl Episode1D {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `sigma^2 * exp(-(x1 - x2)^2 / (2 l^2))`.
pub fn se_kernel(x1: f64, x2: f64, state: &KernelState) -> Result<f64> {
    if !(state.l > 0.0) {
        return Err(CoreError::Domain(format!("length-scale {} is not positive", state.l)));
    }
    let d = x1 - x2;
    Ok(state.sigma * state.sigma * (-d * d / (2.0 * state.l * state.l)).exp())
}

/// One joint draw from `N(0, K + jitter I)` over `xgrid`.
pub fn gp_draw(xgrid: &[f64], state: &KernelState, seed: u64) -> Result<Vec<f64>> {
    gp_draw_with(xgrid, state, &GpConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn gp_draw_with<R: Rng + ?Sized>(
    xgrid: &[f64],
    state: &KernelState,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if xgrid.is_empty() {
        return Err(CoreError::Domain("empty query grid".into()));
    }
    if xgrid.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Domain("non-finite query".into()));
    }
    let n = xgrid.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = se_kernel(xgrid[i], xgrid[j], state)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let scale = state.sigma * state.sigma;
    let mut rel = cfg.jitter_start;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += rel * scale;
        }
        if let Some(c) = kj.cholesky() {
            break c;
        }
        if rel >= cfg.jitter_max {
            return Err(CoreError::Cholesky { jitter: rel * scale });
        }
        rel = (rel * 10.0).min(cfg.jitter_max);
    };
    let eps = DVector::<f64>::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol.l() * eps).iter().copied().collect())
}

/// Applies the drift plus transition noise, clamping at the floors.
pub fn transition_state(state: &KernelState, seed: u64) -> KernelState {
    transition_with(state, &GpConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn transition_with<R: Rng + ?Sized>(state: &KernelState, cfg: &GpConfig, rng: &mut R) -> KernelState {
    let eta_l = gaussian(rng, cfg.noise_l);
    let eta_s = gaussian(rng, cfg.noise_sigma);
    KernelState {
        l: (state.l + state.dl + eta_l).max(cfg.floor_l),
        sigma: (state.sigma + state.dsigma + eta_s).max(cfg.floor_sigma),
        ..*state
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    // always consume a draw so noiseless and noisy configs share one random stream
    let e: f64 = rng.sample(StandardNormal);
    e * std
}

pub fn sample_schedule(task: Task, seed: u64) -> ContextSchedule {
    schedule_with(task, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn schedule_with<R: Rng + ?Sized>(task: Task, rng: &mut R) -> ContextSchedule {
    let steps = task.steps();
    let mut present = vec![false; steps];
    match task {
        Task::A => present[..10].fill(true),
        Task::B | Task::C => {
            for i in index::sample(rng, steps, task.present_steps()) {
                present[i] = true;
            }
        }
    }
    let max = task.max_points();
    let mut n = Vec::with_capacity(steps);
    let mut m = Vec::with_capacity(steps);
    for &p in &present {
        let nt = match (p, task) {
            (false, _) => 0,
            (true, Task::C) => 1,
            (true, _) => rng.random_range(5..=50),
        };
        n.push(nt);
        m.push(rng.random_range(0..=max - nt));
    }
    ContextSchedule { present, n, m }
}

pub fn sample_episode(task: Task, seed: u64) -> Result<Episode1D> {
    sample_episode_with(task, seed, &GpConfig::default())
}

pub fn sample_episode_with(task: Task, seed: u64, cfg: &GpConfig) -> Result<Episode1D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l_lo, l_hi) = task.l_range();
    let (s_lo, s_hi) = task.sigma_range();
    let mut state = KernelState {
        l: rng.random_range(l_lo..=l_hi),
        sigma: rng.random_range(s_lo..=s_hi),
        dl: rng.random_range(-cfg.drift_l..=cfg.drift_l),
        dsigma: rng.random_range(-cfg.drift_sigma..=cfg.drift_sigma),
    };
    let schedule = schedule_with(task, &mut rng);
    let mut steps = Vec::with_capacity(task.steps());
    let mut trace = Vec::with_capacity(task.steps());
    for t in 0..task.steps() {
        if t > 0 {
            state = transition_with(&state, cfg, &mut rng);
        }
        trace.push(state);
        let (n, m) = (schedule.n[t], schedule.m[t]);
        let xs: Vec<f64> = (0..n + m).map(|_| rng.random_range(cfg.x_min..cfg.x_max)).collect();
        let ys = if xs.is_empty() {
            Vec::new()
        } else {
            gp_draw_with(&xs, &state, cfg, &mut rng)?
        };
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        steps.push(Step1D {
            context_x: to32(&xs[..n]),
            context_y: to32(&ys[..n]),
            target_x: to32(&xs[n..]),
            target_y: to32(&ys[n..]),
        });
    }
    Ok(Episode1D {
        task,
        seed,
        steps,
        kernel_trace: trace,
    })
}

/// Generates one episode per seed, in parallel when enabled.
pub fn sample_episodes(task: Task, seeds: &[u64]) -> Result<Vec<Episode1D>> {
    parallel::map_range(seeds.len(), |i| sample_episode(task, seeds[i]))
        .into_iter()
        .collect()
}
