//! Importance-sampled NLL, per-step target NLL, pixel MSE and the
//! context-sensitivity probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snp_core::gp::Episode1D;
use snp_core::nn::ParamStore;
use snp_core::objective::Noise;
use snp_core::parallel;
use snp_core::snp1d::Snp1d;
use snp_core::tgqn::{pixel_mse, PreparedScene, TgqnModel};
use snp_core::Scalar;

use crate::error::Result;

/// `log((1/K) sum exp(w_k))` with the max-shift; `-inf` when every weight is.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if w.is_empty() || max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = w.iter().map(|&x| (x - max).exp()).sum();
    max + (s / w.len() as f64).ln()
}

/// `-log` of the K-sample importance estimate; `+inf` when all weights are `-inf`.
pub fn importance_nll(k: usize, mut log_weight: impl FnMut(usize) -> Result<f64>) -> Result<f64> {
    let w = (0..k).map(&mut log_weight).collect::<Result<Vec<_>>>()?;
    Ok(-log_mean_exp(&w))
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Importance-sampled NLL of one 1D episode with `k` posterior samples.
pub fn nll_is_seq<T: Scalar>(model: &Snp1d, s: &ParamStore<T>, ep: &Episode1D, k: usize, seed: u64) -> Result<f64> {
    let data = model.prepare(ep);
    let mut rng = noise_rng(seed, ep.seed);
    importance_nll(k, |_| {
        let noise = Noise::draw(data.len(), model.cfg.latent, &mut rng);
        Ok(model.log_weight(s, &data, &noise)?)
    })
}

/// Importance-sampled NLL of one scene episode.
pub fn nll_is_scene<T: Scalar>(
    model: &TgqnModel,
    s: &ParamStore<T>,
    data: &PreparedScene,
    k: usize,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    let mut rng = noise_rng(seed, stream);
    importance_nll(k, |_| {
        let noise = Noise::draw(data.len(), model.cfg.noise_len(), &mut rng);
        Ok(model.log_weight(s, data, &noise)?)
    })
}

/// Running per-step means that skip missing entries.
#[derive(Clone, Debug, Default)]
pub struct StepMeans {
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl StepMeans {
    pub fn add(&mut self, per_step: &[Option<f64>]) {
        if self.sum.len() < per_step.len() {
            self.sum.resize(per_step.len(), 0.0);
            self.count.resize(per_step.len(), 0);
        }
        for (t, v) in per_step.iter().enumerate() {
            if let Some(v) = v {
                self.sum[t] += v;
                self.count[t] += 1;
            }
        }
    }

    pub fn means(&self) -> Vec<Option<f64>> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }
}

/// Mean over the steps `from..=to` (1-based) that have a value.
pub fn window_mean(curve: &[Option<f64>], from: usize, to: usize) -> Option<f64> {
    let vals: Vec<f64> = curve
        .iter()
        .enumerate()
        .filter(|(i, _)| (from..=to).contains(&(i + 1)))
        .filter_map(|(_, v)| *v)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-step target NLL of one episode averaged over `samples` prior-chain draws.
pub fn target_nll_episode<T: Scalar>(
    model: &Snp1d,
    s: &ParamStore<T>,
    ep: &Episode1D,
    samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let data = model.prepare(ep);
    let mut rng = noise_rng(seed, ep.seed);
    let mut acc = StepMeans::default();
    for _ in 0..samples {
        let noise = Noise::draw(data.len(), model.cfg.latent, &mut rng);
        acc.add(&model.prior_target_nll(s, &data, &noise)?);
    }
    Ok(acc.means())
}

/// Per-step target NLL averaged over episodes; steps without targets are skipped.
pub fn target_nll_curve<T: Scalar>(
    model: &Snp1d,
    s: &ParamStore<T>,
    episodes: &[Episode1D],
    samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let per = parallel::map_range(episodes.len(), |i| target_nll_episode(model, s, &episodes[i], samples, seed));
    let mut acc = StepMeans::default();
    for p in per {
        acc.add(&p?);
    }
    Ok(acc.means())
}

/// Per-step pixel MSE of one scene, averaged over its targets and `samples`
/// prior-chain generations. Images are compared at model resolution.
pub fn pixel_mse_episode<T: Scalar>(
    model: &TgqnModel,
    s: &ParamStore<T>,
    data: &PreparedScene,
    samples: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<Option<f64>>> {
    let mut rng = noise_rng(seed, stream);
    let mut acc = StepMeans::default();
    for _ in 0..samples {
        let noise = Noise::draw(data.len(), model.cfg.noise_len(), &mut rng);
        let generated = model.generate(s, data, &noise)?;
        let per_step: Vec<Option<f64>> = generated
            .iter()
            .zip(&data.tgt)
            .map(|(gen, tgt)| {
                (!tgt.is_empty()).then(|| {
                    gen.iter().zip(tgt).map(|(g, o)| pixel_mse(g, &o.image)).sum::<f64>() / tgt.len() as f64
                })
            })
            .collect();
        acc.add(&per_step);
    }
    Ok(acc.means())
}

pub fn pixel_mse_curve<T: Scalar>(
    model: &TgqnModel,
    s: &ParamStore<T>,
    scenes: &[PreparedScene],
    samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let per = parallel::map_range(scenes.len(), |i| pixel_mse_episode(model, s, &scenes[i], samples, seed, i as u64));
    let mut acc = StepMeans::default();
    for p in per {
        acc.add(&p?);
    }
    Ok(acc.means())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// 1-based step at which one observation is revealed.
    pub reveal_step: usize,
    /// Context-free steps immediately before the reveal.
    pub blind_steps: usize,
    /// Context observations kept per step before the blind stretch.
    pub max_context: usize,
    pub samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reveal_step: 10,
            blind_steps: 5,
            max_context: 2,
            samples: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub mse_blind: f64,
    pub mse_revealed: f64,
}

impl ProbeResult {
    /// How much revealing one observation lowers the error at the reveal step.
    pub fn drop(&self) -> f64 {
        self.mse_blind - self.mse_revealed
    }
}

/// The two probe variants of a scene, cut to `reveal_step` steps: identical
/// up to the reveal step, where one has a single context observation and the
/// other none. Both score the same remaining targets.
pub fn probe_variants(full: &PreparedScene, cfg: &ProbeConfig) -> Option<(PreparedScene, PreparedScene)> {
    let t_reveal = cfg.reveal_step;
    if t_reveal > full.len() || cfg.blind_steps >= t_reveal {
        return None;
    }
    let sighted = t_reveal - 1 - cfg.blind_steps;
    let mut base = PreparedScene {
        ctx: Vec::with_capacity(t_reveal),
        tgt: Vec::with_capacity(t_reveal),
    };
    for t in 0..t_reveal {
        let mut pool: Vec<_> = full.ctx[t].iter().chain(&full.tgt[t]).cloned().collect();
        let keep = if t < sighted { cfg.max_context.min(full.ctx[t].len().max(1)) } else { 0 };
        let rest = pool.split_off(keep.min(pool.len()));
        base.ctx.push(pool);
        base.tgt.push(rest);
    }
    let last = t_reveal - 1;
    if base.tgt[last].len() < 2 {
        return None;
    }
    let revealed_obs = base.tgt[last].remove(0);
    let blind = base.clone();
    let mut revealed = base;
    revealed.ctx[last].push(revealed_obs);
    Some((blind, revealed))
}

/// Pixel MSE at the reveal step with and without the revealed observation,
/// averaged over scenes and samples. Both variants share noise.
pub fn context_probe<T: Scalar>(
    model: &TgqnModel,
    s: &ParamStore<T>,
    scenes: &[PreparedScene],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let per = parallel::map_range(scenes.len(), |i| -> Result<Option<(f64, f64)>> {
        let Some((blind, revealed)) = probe_variants(&scenes[i], cfg) else {
            return Ok(None);
        };
        let last = cfg.reveal_step - 1;
        let b = pixel_mse_episode(model, s, &blind, cfg.samples, seed, i as u64)?;
        let r = pixel_mse_episode(model, s, &revealed, cfg.samples, seed, i as u64)?;
        Ok(b[last].zip(r[last]))
    });
    let (mut sb, mut sr, mut n) = (0.0, 0.0, 0usize);
    for p in per {
        if let Some((b, r)) = p? {
            sb += b;
            sr += r;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(ProbeResult {
        mse_blind: sb / n,
        mse_revealed: sr / n,
    })
}

/// Seeds for repeated estimator runs.
pub fn derived_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}
