//! Sequential neural process for 1D regression, and the neural-process
//! baseline that sees time only as an extra query coordinate.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::dist::{GaussVar, GaussianParams};
use crate::error::{CoreError, Result};
use crate::gp::Episode1D;
use crate::nn::{LstmCell, Mlp, ParamBuilder, ParamId, ParamStore};
use crate::objective::{CombinedReport, Noise, ObjectiveReport, StepTerms};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Snp,
    Np,
}

impl FromStr for ModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snp" => Ok(ModelKind::Snp),
            "np" => Ok(ModelKind::Np),
            _ => Err(CoreError::Unknown {
                kind: "1d model",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Snp => "snp",
            ModelKind::Np => "np",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snp1dConfig {
    pub kind: ModelKind,
    /// Width of the hidden MLP layers.
    pub hidden: usize,
    pub latent: usize,
    /// Width of the pooled context encodings.
    pub repr: usize,
    /// LSTM state size (unused by the baseline).
    pub state: usize,
    pub det_layers: usize,
    pub lat_layers: usize,
    pub stat_layers: usize,
    pub dec_layers: usize,
}

impl Snp1dConfig {
    pub fn paper(kind: ModelKind) -> Self {
        Self {
            kind,
            hidden: 128,
            latent: 128,
            repr: 128,
            state: 128,
            det_layers: 6,
            lat_layers: 3,
            stat_layers: 2,
            dec_layers: 3,
        }
    }

    /// Narrower layers for single-core training runs.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            hidden: 32,
            latent: 16,
            repr: 32,
            state: 32,
            det_layers: 3,
            ..Self::paper(kind)
        }
    }

    /// Width-4 model for gradient checks.
    pub fn micro(kind: ModelKind) -> Self {
        Self {
            hidden: 4,
            latent: 3,
            repr: 4,
            state: 4,
            ..Self::paper(kind)
        }
    }

    /// Query features: `x`, plus normalized time for the baseline.
    pub fn query_dim(&self) -> usize {
        match self.kind {
            ModelKind::Snp => 1,
            ModelKind::Np => 2,
        }
    }
}

/// `t' = 0.25 + 0.5 * t / T`.
pub fn normalized_time(t: usize, steps: usize) -> f64 {
    0.25 + 0.5 * t as f64 / steps as f64
}

/// Pooled encodings of one observation set.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEncoding {
    /// Latent-path encoding.
    pub r: Vec<f64>,
    /// Deterministic-path encoding.
    pub s: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Predictive mean and std at a list of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An episode flattened into model-ready rows. Context rows are
/// `[query features.., y]`, sorted so that set order never matters.
#[derive(Clone, Debug)]
pub struct Prepared {
    ctx: Vec<Vec<Vec<f64>>>,
    full: Vec<Vec<Vec<f64>>>,
    target_q: Vec<Vec<Vec<f64>>>,
    target_y: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.ctx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctx.is_empty()
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn sorted(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.sort_by(|a, b| cmp_rows(a, b));
    rows
}

fn rows_tensor<T: Scalar>(rows: &[Vec<f64>]) -> Tensor<T> {
    let w = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), w], &flat)
}

fn row_var<'g, T: Scalar>(g: &'g Graph<T>, v: &[f64]) -> Var<'g, T> {
    g.constant(Tensor::from_f64(&[1, v.len()], v))
}

fn check_finite<T: Scalar>(v: &Var<'_, T>, what: &'static str, step: usize) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite {
            what: what.to_string(),
            step: Some(step),
        })
    }
}

/// Graph-side state of one step of a rollout.
pub struct StepVars<'g, T: Scalar> {
    pub prior: GaussVar<'g, T>,
    pub posterior: Option<GaussVar<'g, T>>,
    pub z: Var<'g, T>,
    pub det: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Snp1d {
    pub cfg: Snp1dConfig,
    det: Mlp,
    lat: Mlp,
    stats: Mlp,
    dec: Mlp,
    lstm: Option<LstmCell>,
    h0: Option<ParamId>,
    c0: Option<ParamId>,
}

impl Snp1d {
    /// Builds the network and its freshly initialized weights.
    pub fn new(cfg: Snp1dConfig, seed: u64) -> (Self, ParamStore<f64>) {
        let mut pb = ParamBuilder::new(seed);
        let q = cfg.query_dim();
        let det = Mlp::new(&mut pb, "det", &Mlp::sizes(q + 1, cfg.hidden, cfg.repr, cfg.det_layers));
        let lat = Mlp::new(&mut pb, "lat", &Mlp::sizes(q + 1, cfg.hidden, cfg.repr, cfg.lat_layers));
        let head_in = match cfg.kind {
            ModelKind::Snp => cfg.state + cfg.repr,
            ModelKind::Np => cfg.repr,
        };
        let stats = Mlp::new(&mut pb, "stats", &Mlp::sizes(head_in, cfg.hidden, 2 * cfg.latent, cfg.stat_layers));
        let dec = Mlp::new(
            &mut pb,
            "dec",
            &Mlp::sizes(q + cfg.latent + cfg.repr, cfg.hidden, 2, cfg.dec_layers),
        );
        let (lstm, h0, c0) = match cfg.kind {
            ModelKind::Snp => (
                Some(LstmCell::new(&mut pb, "lstm", cfg.latent + cfg.repr, cfg.state, 1.0)),
                Some(pb.constant("h0", &[1, cfg.state], 0.0)),
                Some(pb.constant("c0", &[1, cfg.state], 0.0)),
            ),
            ModelKind::Np => (None, None, None),
        };
        let model = Self {
            cfg,
            det,
            lat,
            stats,
            dec,
            lstm,
            h0,
            c0,
        };
        (model, pb.finish())
    }

    fn query_row(&self, x: f32, t: usize, steps: usize) -> Vec<f64> {
        match self.cfg.kind {
            ModelKind::Snp => vec![x as f64],
            ModelKind::Np => vec![x as f64, normalized_time(t, steps)],
        }
    }

    pub fn prepare(&self, ep: &Episode1D) -> Prepared {
        let steps = ep.len();
        let mut out = Prepared {
            ctx: Vec::with_capacity(steps),
            full: Vec::with_capacity(steps),
            target_q: Vec::with_capacity(steps),
            target_y: Vec::with_capacity(steps),
        };
        let mut cumulative: Vec<Vec<f64>> = Vec::new();
        for (i, st) in ep.steps.iter().enumerate() {
            let t = i + 1;
            let point = |x: f32, y: f32| {
                let mut r = self.query_row(x, t, steps);
                r.push(y as f64);
                r
            };
            let here: Vec<Vec<f64>> = st.context_x.iter().zip(&st.context_y).map(|(&x, &y)| point(x, y)).collect();
            let ctx = match self.cfg.kind {
                ModelKind::Snp => here,
                ModelKind::Np => {
                    cumulative.extend(here);
                    cumulative.clone()
                }
            };
            let targets = sorted(st.target_x.iter().zip(&st.target_y).map(|(&x, &y)| point(x, y)).collect());
            let mut full = ctx.clone();
            full.extend(targets.iter().cloned());
            let q = self.cfg.query_dim();
            out.target_q.push(targets.iter().map(|r| r[..q].to_vec()).collect());
            out.target_y.push(targets.iter().map(|r| r[q]).collect());
            out.ctx.push(sorted(ctx));
            out.full.push(sorted(full));
        }
        out
    }

    /// Mean-pooled `[1, repr]` encoding; zeros for an empty set.
    fn pool<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, mlp: &Mlp, rows: &[Vec<f64>]) -> Var<'g, T> {
        if rows.is_empty() {
            return g.zeros(&[1, self.cfg.repr]);
        }
        mlp.forward(g, s, g.constant(rows_tensor(rows)))
            .mean_rows()
            .reshape(&[1, self.cfg.repr])
    }

    fn head<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, input: Var<'g, T>) -> GaussVar<'g, T> {
        let out = self.stats.forward(g, s, input);
        let l = self.cfg.latent;
        GaussVar::latent(out.narrow(1, 0, l), out.narrow(1, l, l))
    }

    fn stats_input<'g, T: Scalar>(&self, g: &'g Graph<T>, h: Option<Var<'g, T>>, r: Var<'g, T>) -> Var<'g, T> {
        match h {
            Some(h) => g.concat(&[h, r], 1),
            None => r,
        }
    }

    /// Predictive Gaussian over `y` at `[m, query]` rows; mean and std are `[m, 1]`.
    fn decode_rows<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        queries: &[Vec<f64>],
        z: Var<'g, T>,
        det: Var<'g, T>,
    ) -> GaussVar<'g, T> {
        let m = queries.len();
        let input = g.concat(
            &[g.constant(rows_tensor(queries)), z.broadcast_rows(m), det.broadcast_rows(m)],
            1,
        );
        let out = self.dec.forward(g, s, input);
        GaussVar::observation(out.narrow(1, 0, 1), out.narrow(1, 1, 1))
    }

    /// Runs the latent chain. Steps flagged in `posterior` draw `z_t` from the
    /// posterior, the rest from the prior; `noise` supplies one block per step.
    pub fn rollout<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        data: &Prepared,
        posterior: &[bool],
        noise: &Noise,
    ) -> Result<Vec<StepVars<'g, T>>> {
        let steps = data.len();
        if posterior.len() != steps || noise.steps.len() != steps {
            return Err(CoreError::Shape(format!(
                "episode has {steps} steps, mask {} and noise {}",
                posterior.len(),
                noise.steps.len()
            )));
        }
        let mut state = match (&self.lstm, self.h0, self.c0) {
            (Some(_), Some(h0), Some(c0)) => Some((g.param(s, h0), g.param(s, c0))),
            _ => None,
        };
        let mut z = g.zeros(&[1, self.cfg.latent]);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let r_c = self.pool(g, s, &self.lat, &data.ctx[t]);
            let det = self.pool(g, s, &self.det, &data.ctx[t]);
            if let (Some(lstm), Some((h, c))) = (&self.lstm, state) {
                state = Some(lstm.forward(g, s, g.concat(&[z, r_c], 1), h, c));
            }
            let h = state.map(|(h, _)| h);
            let prior = self.head(g, s, self.stats_input(g, h, r_c));
            check_finite(&prior.mean, "prior", t + 1)?;
            let eps = row_var(g, &noise.steps[t]);
            let post = if posterior[t] {
                Some(if data.full[t].len() == data.ctx[t].len() {
                    prior
                } else {
                    let r_f = self.pool(g, s, &self.lat, &data.full[t]);
                    self.head(g, s, self.stats_input(g, h, r_f))
                })
            } else {
                None
            };
            z = post.as_ref().unwrap_or(&prior).sample(eps);
            out.push(StepVars {
                prior,
                posterior: post,
                z,
                det,
            });
        }
        Ok(out)
    }

    /// ELBO on the graph; steps marked in `dropped` are prior-sampled and contribute nothing.
    pub fn elbo_graph<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        data: &Prepared,
        dropped: &[bool],
        noise: &Noise,
    ) -> Result<(Var<'g, T>, ObjectiveReport)> {
        let keep: Vec<bool> = dropped.iter().map(|d| !d).collect();
        let roll = self.rollout(g, s, data, &keep, noise)?;
        let mut total: Option<Var<'g, T>> = None;
        let mut terms = Vec::with_capacity(roll.len());
        for (t, sv) in roll.iter().enumerate() {
            let Some(q) = &sv.posterior else {
                terms.push(StepTerms {
                    recon: 0.0,
                    kl: 0.0,
                    dropped: true,
                });
                continue;
            };
            let kl = q.kl(&sv.prior);
            check_finite(&kl, "kl", t + 1)?;
            let mut step = StepTerms {
                recon: 0.0,
                kl: kl.item(),
                dropped: false,
            };
            let step_elbo = if data.target_q[t].is_empty() {
                -kl
            } else {
                let pred = self.decode_rows(g, s, &data.target_q[t], sv.z, sv.det);
                let y = g.constant(Tensor::from_f64(&[data.target_y[t].len(), 1], &data.target_y[t]));
                let recon = pred.log_prob(y);
                check_finite(&recon, "reconstruction", t + 1)?;
                step.recon = recon.item();
                recon - kl
            };
            terms.push(step);
            total = Some(match total {
                Some(acc) => acc + step_elbo,
                None => step_elbo,
            });
        }
        let total = total.unwrap_or_else(|| g.scalar(0.0));
        Ok((total, ObjectiveReport::from_steps(terms)))
    }

    fn noise_for<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Noise {
        Noise::draw(steps, self.cfg.latent, rng)
    }

    pub fn elbo_snp<T: Scalar>(&self, s: &ParamStore<T>, ep: &Episode1D, seed: u64) -> Result<ObjectiveReport> {
        self.elbo_pd(s, ep, &vec![false; ep.len()], seed)
    }

    /// Posterior-dropout ELBO; `dropped[t]` marks prior-sampled steps.
    pub fn elbo_pd<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        ep: &Episode1D,
        dropped: &[bool],
        seed: u64,
    ) -> Result<ObjectiveReport> {
        let noise = self.noise_for(ep.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let g = Graph::new();
        Ok(self.elbo_graph(&g, s, &self.prepare(ep), dropped, &noise)?.1)
    }

    /// The baseline's ELBO; errors on a sequential model.
    pub fn np_baseline<T: Scalar>(&self, s: &ParamStore<T>, ep: &Episode1D, seed: u64) -> Result<ObjectiveReport> {
        if self.cfg.kind != ModelKind::Np {
            return Err(CoreError::Domain("np_baseline needs a baseline model".into()));
        }
        self.elbo_snp(s, ep, seed)
    }

    /// Gradients of `-(L_SNP + alpha * L_PD)`. The dropout rollout is skipped when alpha is zero.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        ep: &Episode1D,
        alpha: f64,
        dropped: &[bool],
        seed: u64,
    ) -> Result<(CombinedReport, Gradients<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.noise_for(ep.len(), &mut rng);
        let data = self.prepare(ep);
        let g = Graph::new();
        let (snp, snp_report) = self.elbo_graph(&g, s, &data, &vec![false; ep.len()], &noise)?;
        let (objective, pd_report) = if alpha != 0.0 {
            let pd_noise = self.noise_for(ep.len(), &mut rng);
            let (pd, report) = self.elbo_graph(&g, s, &data, dropped, &pd_noise)?;
            (snp + pd.mul_scalar(alpha), Some(report))
        } else {
            (snp, None)
        };
        let grads = g.backward(-objective, s.len());
        if !grads.is_finite() {
            return Err(CoreError::NonFinite {
                what: "gradient".into(),
                step: None,
            });
        }
        Ok((CombinedReport::new(snp_report, pd_report, alpha), grads))
    }

    /// Mean gradients over a minibatch, computed per episode in parallel and
    /// summed in episode order.
    pub fn batch_loss_and_grads<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        batch: &[&Episode1D],
        alpha: f64,
        masks: &[Vec<bool>],
        seeds: &[u64],
    ) -> Result<(Vec<CombinedReport>, Gradients<T>)> {
        let results = parallel::map_range(batch.len(), |i| self.loss_and_grads(s, batch[i], alpha, &masks[i], seeds[i]));
        let mut grads = Gradients::empty(s.len());
        let mut reports = Vec::with_capacity(batch.len());
        for r in results {
            let (rep, g) = r?;
            grads.accumulate(&g);
            reports.push(rep);
        }
        if !batch.is_empty() {
            grads.scale(T::lit(1.0 / batch.len() as f64));
        }
        Ok((reports, grads))
    }

    /// One importance weight `log p(Y|Z) + log p(Z|C) - log q(Z|C,D)` with
    /// `Z` drawn from the posterior chain.
    pub fn log_weight<T: Scalar>(&self, s: &ParamStore<T>, data: &Prepared, noise: &Noise) -> Result<f64> {
        let g = Graph::new();
        let roll = self.rollout(&g, s, data, &vec![true; data.len()], noise)?;
        let mut lw = 0.0;
        for (t, sv) in roll.iter().enumerate() {
            let q = sv.posterior.as_ref().expect("posterior-sampled rollout");
            lw += sv.prior.log_prob(sv.z).item() - q.log_prob(sv.z).item();
            if !data.target_q[t].is_empty() {
                let pred = self.decode_rows(&g, s, &data.target_q[t], sv.z, sv.det);
                let y = g.constant(Tensor::from_f64(&[data.target_y[t].len(), 1], &data.target_y[t]));
                lw += pred.log_prob(y).item();
            }
        }
        Ok(lw)
    }

    /// Per-step mean target NLL under one prior-chain sample conditioned on
    /// contexts only; `None` for steps without targets.
    pub fn prior_target_nll<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        data: &Prepared,
        noise: &Noise,
    ) -> Result<Vec<Option<f64>>> {
        let g = Graph::new();
        let roll = self.rollout(&g, s, data, &vec![false; data.len()], noise)?;
        Ok(roll
            .iter()
            .enumerate()
            .map(|(t, sv)| {
                let m = data.target_q[t].len();
                (m > 0).then(|| {
                    let pred = self.decode_rows(&g, s, &data.target_q[t], sv.z, sv.det);
                    let y = g.constant(Tensor::from_f64(&[m, 1], &data.target_y[t]));
                    -pred.log_prob(y).item() / m as f64
                })
            })
            .collect())
    }

    /// Predictions at `queries` for every step, from one prior-chain sample.
    pub fn predict<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        ep: &Episode1D,
        queries: &[f32],
        noise: &Noise,
    ) -> Result<Vec<Prediction>> {
        let data = self.prepare(ep);
        let g = Graph::new();
        let roll = self.rollout(&g, s, &data, &vec![false; data.len()], noise)?;
        Ok(roll
            .iter()
            .enumerate()
            .map(|(t, sv)| {
                let rows: Vec<Vec<f64>> = queries.iter().map(|&x| self.query_row(x, t + 1, ep.len())).collect();
                let p = self.decode_rows(&g, s, &rows, sv.z, sv.det).to_params();
                Prediction {
                    mean: p.mean,
                    std: p.std,
                }
            })
            .collect())
    }

    // -----------------------------------------------------------------------
    // value-level entry points

    /// Encodes rows of `[query features.., y]`.
    pub fn encode_set<T: Scalar>(&self, s: &ParamStore<T>, points: &[Vec<f64>]) -> Result<StepEncoding> {
        let width = self.cfg.query_dim() + 1;
        if points.iter().any(|p| p.len() != width) {
            return Err(CoreError::Shape(format!("points must have {width} columns")));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "context point".into(),
                step: None,
            });
        }
        let rows = sorted(points.to_vec());
        let g = Graph::new();
        Ok(StepEncoding {
            r: self.pool(&g, s, &self.lat, &rows).value().to_f64_vec(),
            s: self.pool(&g, s, &self.det, &rows).value().to_f64_vec(),
            count: rows.len(),
        })
    }

    pub fn initial_state<T: Scalar>(&self, s: &ParamStore<T>) -> Option<LstmState> {
        Some(LstmState {
            h: s.get(self.h0?).to_f64_vec(),
            c: s.get(self.c0?).to_f64_vec(),
        })
    }

    /// One transition step: the LSTM consumes `[z_prev, ctx.r]`, and the
    /// shared statistics head reads `[h_t, ctx.r]`.
    pub fn prior_step<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        prev: &LstmState,
        z_prev: &[f64],
        ctx: &StepEncoding,
    ) -> Result<(LstmState, GaussianParams)> {
        let lstm = self
            .lstm
            .as_ref()
            .ok_or_else(|| CoreError::Domain("the baseline has no transition".into()))?;
        if prev.h.len() != self.cfg.state || z_prev.len() != self.cfg.latent || ctx.r.len() != self.cfg.repr {
            return Err(CoreError::Shape("prior_step input sizes".into()));
        }
        let g = Graph::new();
        let r = row_var(&g, &ctx.r);
        let x = g.concat(&[row_var(&g, z_prev), r], 1);
        let (h, c) = lstm.forward(&g, s, x, row_var(&g, &prev.h), row_var(&g, &prev.c));
        let prior = self.head(&g, s, g.concat(&[h, r], 1)).to_params();
        Ok((
            LstmState {
                h: h.value().to_f64_vec(),
                c: c.value().to_f64_vec(),
            },
            prior,
        ))
    }

    /// Posterior statistics from `h_t` and the encoding of `C_t ∪ D_t`.
    pub fn posterior_step<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h: Option<&[f64]>,
        full: &StepEncoding,
    ) -> Result<GaussianParams> {
        let g = Graph::new();
        let h = match (self.cfg.kind, h) {
            (ModelKind::Snp, Some(h)) if h.len() == self.cfg.state => Some(row_var(&g, h)),
            (ModelKind::Np, None) => None,
            _ => return Err(CoreError::Shape("posterior_step state".into())),
        };
        if full.r.len() != self.cfg.repr {
            return Err(CoreError::Shape("posterior_step encoding".into()));
        }
        let input = self.stats_input(&g, h, row_var(&g, &full.r));
        Ok(self.head(&g, s, input).to_params())
    }

    /// Predictive Normal over `y` at one query.
    pub fn decode<T: Scalar>(&self, s: &ParamStore<T>, query: &[f64], z: &[f64], det: &[f64]) -> Result<GaussianParams> {
        if query.len() != self.cfg.query_dim() || z.len() != self.cfg.latent || det.len() != self.cfg.repr {
            return Err(CoreError::Shape("decode input sizes".into()));
        }
        let g = Graph::new();
        let p = self
            .decode_rows(&g, s, &[query.to_vec()], row_var(&g, z), row_var(&g, det))
            .to_params();
        if p.mean.iter().chain(&p.std).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "decoder output".into(),
                step: None,
            });
        }
        Ok(p)
    }
}

/// Randomly permutes which step each context set is revealed at; targets stay put.
pub fn shuffle_context_order<R: Rng + ?Sized>(ep: &Episode1D, rng: &mut R) -> Episode1D {
    let mut order: Vec<usize> = (0..ep.len()).collect();
    order.shuffle(rng);
    let mut out = ep.clone();
    for (dst, &src) in order.iter().enumerate() {
        out.steps[dst].context_x = ep.steps[src].context_x.clone();
        out.steps[dst].context_y = ep.steps[src].context_y.clone();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{gaussian_kl, normal_log_pdf, DECODER_STD_FLOOR};
    use crate::gp::{sample_episode, Task};

    fn micro(kind: ModelKind) -> (Snp1d, ParamStore<f64>) {
        Snp1d::new(Snp1dConfig::micro(kind), 11)
    }

    #[test]
    fn normalized_time_endpoints() {
        assert_eq!(normalized_time(0, 20), 0.25);
        assert_eq!(normalized_time(20, 20), 0.75);
        assert_eq!(normalized_time(10, 20), 0.5);
    }

    #[test]
    fn empty_set_encodes_to_zero() {
        let (m, s) = micro(ModelKind::Snp);
        let e = m.encode_set(&s, &[]).unwrap();
        assert_eq!(e.count, 0);
        assert!(e.r.iter().chain(&e.s).all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_point_equals_single() {
        let (m, s) = micro(ModelKind::Snp);
        let one = m.encode_set(&s, &[vec![0.3, -1.2]]).unwrap();
        let two = m.encode_set(&s, &[vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap();
        for (a, b) in one.r.iter().zip(&two.r).chain(one.s.iter().zip(&two.s)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffled_set_encodes_bitwise_equal() {
        let (m, s) = micro(ModelKind::Snp);
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.37 - 1.5, (i as f64).sin()]).collect();
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(m.encode_set(&s, &pts).unwrap(), m.encode_set(&s, &rev).unwrap());
    }

    #[test]
    fn posterior_equals_prior_without_targets() {
        let (m, s) = micro(ModelKind::Snp);
        let ctx = m.encode_set(&s, &[vec![0.5, 1.0], vec![-0.5, 0.2]]).unwrap();
        let st = m.initial_state(&s).unwrap();
        let (next, prior) = m.prior_step(&s, &st, &[0.0; 3], &ctx).unwrap();
        let post = m.posterior_step(&s, Some(&next.h), &ctx).unwrap();
        assert_eq!(prior, post);
        assert_eq!(gaussian_kl(&post, &prior).unwrap(), 0.0);
    }

    #[test]
    fn decoder_density_at_mean() {
        let (m, s) = micro(ModelKind::Snp);
        let p = m.decode(&s, &[0.7], &[0.1, -0.2, 0.3], &[0.0; 4]).unwrap();
        assert!(p.std[0] >= DECODER_STD_FLOOR);
        let want = -(p.std[0] * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((normal_log_pdf(p.mean[0], p.mean[0], p.std[0]) - want).abs() < 1e-12);
    }

    #[test]
    fn pd_reductions() {
        let (m, s) = micro(ModelKind::Snp);
        let ep = sample_episode(Task::A, 5).unwrap();
        let snp = m.elbo_snp(&s, &ep, 3).unwrap();
        let pd = m.elbo_pd(&s, &ep, &vec![false; ep.len()], 3).unwrap();
        assert_eq!(snp, pd);
        let none = m.elbo_pd(&s, &ep, &vec![true; ep.len()], 3).unwrap();
        assert_eq!(none.total, 0.0);
        assert!(snp.steps.iter().all(|st| st.kl >= 0.0));
    }

    #[test]
    fn empty_targets_leave_only_kl() {
        let (m, s) = micro(ModelKind::Snp);
        let mut ep = sample_episode(Task::B, 2).unwrap();
        for st in &mut ep.steps {
            st.target_x.clear();
            st.target_y.clear();
        }
        let r = m.elbo_snp(&s, &ep, 1).unwrap();
        assert!(r.steps.iter().all(|st| st.recon == 0.0));
        assert!(r.total <= 0.0);
    }

    #[test]
    fn baseline_guard_and_context_shuffle() {
        let (snp, s) = micro(ModelKind::Snp);
        let ep = sample_episode(Task::A, 8).unwrap();
        assert!(snp.np_baseline(&s, &ep, 0).is_err());
        let (np, s_np) = micro(ModelKind::Np);
        assert!(np.np_baseline(&s_np, &ep, 0).unwrap().total.is_finite());
        let shuffled = shuffle_context_order(&ep, &mut ChaCha8Rng::seed_from_u64(2));
        let n: usize = shuffled.steps.iter().map(|st| st.n_context()).sum();
        assert_eq!(n, ep.steps.iter().map(|st| st.n_context()).sum::<usize>());
        assert_eq!(shuffled.steps[3].target_x, ep.steps[3].target_x);
    }
}
