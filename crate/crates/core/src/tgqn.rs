//! Temporal GQN for the 2D shapes environment, and the GQN baseline that
//! pools all past contexts and sees time only through the query.
//!
//! Every tensor is `[channels, height, width]` at the latent resolution
//! except images, which live at `cfg.image`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::dist::{GaussVar, LN_2PI};
use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, ConvLstmCell, ConvTranspose2d, ParamBuilder, ParamId, ParamStore, SplitConvLstmCell};
use crate::objective::{CombinedReport, Noise, ObjectiveReport, StepTerms};
use crate::parallel;
use crate::scalar::Scalar;
use crate::shapes2d::{normalize_viewpoint, Episode2D, Image, PATCH};
use crate::snp1d::normalized_time;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneModelKind {
    Tgqn,
    Gqn,
}

impl FromStr for SceneModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tgqn" => Ok(SceneModelKind::Tgqn),
            "gqn" => Ok(SceneModelKind::Gqn),
            _ => Err(CoreError::Unknown {
                kind: "scene model",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for SceneModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneModelKind::Tgqn => "tgqn",
            SceneModelKind::Gqn => "gqn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TgqnConfig {
    pub kind: SceneModelKind,
    /// Side of the images the model sees; patches are box-filtered down to it.
    pub image: usize,
    pub latent_hw: usize,
    /// Depth of the context representation.
    pub repr: usize,
    /// Depth of every ConvLSTM state.
    pub hidden: usize,
    /// Depth of the renderer's canvas encoding.
    pub enc_depth: usize,
    /// Latent depth per DRAW step.
    pub z_depth: usize,
    pub draw_steps: usize,
    pub render_iters: usize,
    /// Depth of the projected latent fed to the transition.
    pub ssm_depth: usize,
    pub kernel: usize,
    /// Fixed pixel variance of the image likelihood.
    pub rgb_var: f64,
    /// Weight of each model pixel in the likelihood; the presets use the
    /// number of patch pixels it covers.
    pub pixel_weight: f64,
}

impl TgqnConfig {
    pub fn paper(kind: SceneModelKind) -> Self {
        Self {
            kind,
            image: 64,
            latent_hw: 16,
            repr: 256,
            hidden: 128,
            enc_depth: 128,
            z_depth: 4,
            draw_steps: 6,
            render_iters: 6,
            ssm_depth: 108,
            kernel: 5,
            rgb_var: 2.0,
            pixel_weight: 1.0,
        }
        .weighted()
    }

    /// Small enough to train on one core in minutes.
    pub fn desk(kind: SceneModelKind) -> Self {
        Self {
            kind,
            image: 16,
            latent_hw: 4,
            repr: 32,
            hidden: 32,
            enc_depth: 16,
            z_depth: 4,
            draw_steps: 3,
            render_iters: 3,
            ssm_depth: 16,
            kernel: 3,
            rgb_var: 2.0,
            pixel_weight: 1.0,
        }
        .weighted()
    }

    /// 8x8 latents over 16x16 images, for gradient checks.
    pub fn micro(kind: SceneModelKind) -> Self {
        Self {
            kind,
            image: 16,
            latent_hw: 8,
            repr: 4,
            hidden: 4,
            enc_depth: 4,
            z_depth: 2,
            draw_steps: 2,
            render_iters: 2,
            ssm_depth: 3,
            kernel: 3,
            rgb_var: 2.0,
            pixel_weight: 1.0,
        }
        .weighted()
    }

    /// Sets `pixel_weight` to the patch pixels per model pixel.
    pub fn weighted(mut self) -> Self {
        let f = (PATCH / self.image) as f64;
        self.pixel_weight = f * f;
        self
    }

    pub fn downscale(&self) -> usize {
        self.image / self.latent_hw
    }

    /// Viewpoint, plus normalized time for the baseline.
    pub fn view_dim(&self) -> usize {
        match self.kind {
            SceneModelKind::Tgqn => 2,
            SceneModelKind::Gqn => 3,
        }
    }

    /// Depth of the full per-step latent.
    pub fn z_channels(&self) -> usize {
        self.draw_steps * self.z_depth
    }

    pub fn noise_len(&self) -> usize {
        self.z_channels() * self.latent_hw * self.latent_hw
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.image.checked_div(self.latent_hw).unwrap_or(0);
        if !matches!(ds, 2 | 4) || ds * self.latent_hw != self.image {
            return Err(CoreError::Domain(format!(
                "image {} must be 2 or 4 times the latent size {}",
                self.image, self.latent_hw
            )));
        }
        if PATCH % self.image != 0 {
            return Err(CoreError::Domain(format!("image size {} must divide {PATCH}", self.image)));
        }
        if self.kernel % 2 == 0 || self.draw_steps == 0 || self.render_iters == 0 {
            return Err(CoreError::Domain("kernel must be odd, step counts positive".into()));
        }
        if !(self.rgb_var > 0.0) || !(self.pixel_weight > 0.0) {
            return Err(CoreError::Domain("pixel variance and weight must be positive".into()));
        }
        Ok(())
    }
}

/// One observation in model units: a `[3, image, image]` planar image and its query.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObs {
    pub image: Vec<f64>,
    pub view: Vec<f64>,
}

/// Per-step context and target observations, each sorted canonically.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    pub ctx: Vec<Vec<SceneObs>>,
    pub tgt: Vec<Vec<SceneObs>>,
}

impl PreparedScene {
    pub fn len(&self) -> usize {
        self.ctx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctx.is_empty()
    }
}

fn cmp_obs(a: &SceneObs, b: &SceneObs) -> Ordering {
    a.view
        .iter()
        .chain(&a.image)
        .zip(b.view.iter().chain(&b.image))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

struct Tower {
    c1: Conv2d,
    skip1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    skip2: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
    c6: Conv2d,
}

impl Tower {
    fn new(pb: &mut ParamBuilder, cfg: &TgqnConfig) -> Self {
        let r = cfg.repr;
        let half = (r / 2).max(1);
        let v = cfg.view_dim();
        let first = cfg.downscale() / 2;
        pb.scope("tower", |pb| Self {
            c1: Conv2d::new(pb, "c1", 3, r, first, first, 0),
            skip1: Conv2d::new(pb, "skip1", r, r, 2, 2, 0),
            c2: Conv2d::same(pb, "c2", r, half, 3),
            c3: Conv2d::new(pb, "c3", half, r, 2, 2, 0),
            skip2: Conv2d::same(pb, "skip2", r + v, r, 3),
            c4: Conv2d::same(pb, "c4", r + v, half, 3),
            c5: Conv2d::same(pb, "c5", half, r, 3),
            c6: Conv2d::new(pb, "c6", r, r, 1, 1, 0),
        })
    }

    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, img: Var<'g, T>, view: &[f64], hw: usize) -> Var<'g, T> {
        let r1 = self.c1.forward(g, s, img).relu();
        let skip = self.skip1.forward(g, s, r1).relu();
        let r = self.c2.forward(g, s, r1).relu();
        let r = self.c3.forward(g, s, r).relu() + skip;
        let v = g.constant(Tensor::from_f64(&[view.len()], view)).broadcast_spatial(hw, hw);
        let r = g.concat(&[r, v], 0);
        let skip = self.skip2.forward(g, s, r).relu();
        let r = self.c4.forward(g, s, r).relu();
        let r = self.c5.forward(g, s, r).relu() + skip;
        self.c6.forward(g, s, r).relu()
    }
}

struct Renderer {
    enc1: Conv2d,
    enc2: Conv2d,
    cell: SplitConvLstmCell,
    dec1: Conv2d,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl Renderer {
    fn new(pb: &mut ParamBuilder, cfg: &TgqnConfig) -> Self {
        let e = cfg.enc_depth;
        let four = cfg.downscale() == 4;
        pb.scope("render", |pb| Self {
            enc1: Conv2d::new(pb, "enc1", 3, e, 2, 2, 0),
            enc2: if four {
                Conv2d::new(pb, "enc2", e, e, 2, 2, 0)
            } else {
                Conv2d::same(pb, "enc2", e, e, 3)
            },
            cell: SplitConvLstmCell::new(
                pb,
                "cell",
                e + cfg.view_dim(),
                cfg.hidden + cfg.z_channels(),
                cfg.hidden,
                cfg.kernel,
            ),
            dec1: Conv2d::same(pb, "dec1", cfg.hidden, e, 3),
            up1: ConvTranspose2d::new(pb, "up1", e, e, 2, 2, 0),
            up2: if four {
                ConvTranspose2d::new(pb, "up2", e, 3, 2, 2, 0)
            } else {
                ConvTranspose2d::new(pb, "up2", e, 3, 3, 1, 1)
            },
        })
    }
}

struct Draw {
    gen: SplitConvLstmCell,
    inf: SplitConvLstmCell,
    stats: Conv2d,
    hp0: ParamId,
    cp0: ParamId,
    hq0: ParamId,
    cq0: ParamId,
}

enum Temporal {
    Tgqn {
        zproj: Conv2d,
        cell: ConvLstmCell,
        h0: ParamId,
        c0: ParamId,
        z0: ParamId,
        back: ConvLstmCell,
        b0: ParamId,
        bc0: ParamId,
    },
    Gqn {
        hproj: Conv2d,
        bproj: Conv2d,
    },
}

/// Latent sampling trace of one step.
pub struct DrawTrace<'g, T: Scalar> {
    pub prior: Vec<GaussVar<'g, T>>,
    pub posterior: Option<Vec<GaussVar<'g, T>>>,
    /// Per-DRAW-step latent slices.
    pub slices: Vec<Var<'g, T>>,
    /// Slices concatenated along channels.
    pub z: Var<'g, T>,
}

impl<'g, T: Scalar> DrawTrace<'g, T> {
    /// Sum of the per-DRAW-step KLs; `None` for a prior-sampled step.
    pub fn kl(&self) -> Option<Var<'g, T>> {
        let post = self.posterior.as_ref()?;
        post.iter()
            .zip(&self.prior)
            .map(|(q, p)| q.kl(p))
            .reduce(|a, b| a + b)
    }

    /// Per-DRAW-step KL values.
    pub fn kl_terms(&self) -> Option<Vec<f64>> {
        let post = self.posterior.as_ref()?;
        Some(post.iter().zip(&self.prior).map(|(q, p)| q.kl(p).item()).collect())
    }
}

pub struct SceneStepVars<'g, T: Scalar> {
    pub h: Var<'g, T>,
    pub draw: DrawTrace<'g, T>,
    /// Renderer gate pre-activations from `[h_t, z_t]`, shared by all queries of the step.
    render_fixed: Var<'g, T>,
}

pub struct TgqnModel {
    pub cfg: TgqnConfig,
    tower: Tower,
    temporal: Temporal,
    draw: Draw,
    renderer: Renderer,
}

fn state_param(pb: &mut ParamBuilder, name: &str, cfg: &TgqnConfig, depth: usize) -> ParamId {
    pb.constant(name, &[depth, cfg.latent_hw, cfg.latent_hw], 0.0)
}

impl TgqnModel {
    pub fn new(cfg: TgqnConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let tower = Tower::new(&mut pb, &cfg);
        let (h, r, zd) = (cfg.hidden, cfg.repr, cfg.z_depth);
        let temporal = match cfg.kind {
            SceneModelKind::Tgqn => pb.scope("transition", |pb| Temporal::Tgqn {
                zproj: Conv2d::new(pb, "zproj", cfg.z_channels(), cfg.ssm_depth, 1, 1, 0),
                cell: ConvLstmCell::new(pb, "cell", cfg.ssm_depth + r, h, cfg.kernel),
                h0: state_param(pb, "h0", &cfg, h),
                c0: state_param(pb, "c0", &cfg, h),
                z0: state_param(pb, "z0", &cfg, cfg.z_channels()),
                back: ConvLstmCell::new(pb, "back", r, h, cfg.kernel),
                b0: state_param(pb, "b0", &cfg, h),
                bc0: state_param(pb, "bc0", &cfg, h),
            }),
            SceneModelKind::Gqn => pb.scope("pool", |pb| Temporal::Gqn {
                hproj: Conv2d::new(pb, "hproj", r, h, 1, 1, 0),
                bproj: Conv2d::new(pb, "bproj", r, h, 1, 1, 0),
            }),
        };
        let draw = pb.scope("draw", |pb| Draw {
            gen: SplitConvLstmCell::new(pb, "gen", zd, h + r, h, cfg.kernel),
            inf: SplitConvLstmCell::new(pb, "inf", zd + h, 2 * h, h, cfg.kernel),
            stats: Conv2d::same(pb, "stats", h, 2 * zd, cfg.kernel),
            hp0: state_param(pb, "hp0", &cfg, h),
            cp0: state_param(pb, "cp0", &cfg, h),
            hq0: state_param(pb, "hq0", &cfg, h),
            cq0: state_param(pb, "cq0", &cfg, h),
        });
        let renderer = Renderer::new(&mut pb, &cfg);
        Ok((
            Self {
                cfg,
                tower,
                temporal,
                draw,
                renderer,
            },
            pb.finish(),
        ))
    }

    /// Converts a channels-last patch into a planar model image.
    pub fn model_image(&self, patch: &Image) -> Vec<f64> {
        let small = patch.downsample(patch.height / self.cfg.image);
        small.to_chw().into_iter().map(f64::from).collect()
    }

    fn query(&self, viewpoint: [f64; 2], t: usize, steps: usize) -> Vec<f64> {
        let v = normalize_viewpoint(viewpoint);
        let mut q = vec![v[0] as f64, v[1] as f64];
        if self.cfg.kind == SceneModelKind::Gqn {
            q.push(normalized_time(t, steps));
        }
        q
    }

    /// Model-ready observations; at most `max_targets` targets are kept per step.
    pub fn prepare(&self, ep: &Episode2D, max_targets: Option<usize>) -> PreparedScene {
        let steps = ep.len();
        let mut out = PreparedScene {
            ctx: Vec::with_capacity(steps),
            tgt: Vec::with_capacity(steps),
        };
        for (i, st) in ep.steps.iter().enumerate() {
            let conv = |o: &crate::shapes2d::Observation2D| SceneObs {
                image: self.model_image(&o.patch),
                view: self.query(o.viewpoint, i + 1, steps),
            };
            let mut ctx: Vec<SceneObs> = st.context.iter().map(conv).collect();
            let keep = max_targets.unwrap_or(usize::MAX).min(st.target.len());
            let mut tgt: Vec<SceneObs> = st.target[..keep].iter().map(conv).collect();
            ctx.sort_by(cmp_obs);
            tgt.sort_by(cmp_obs);
            out.ctx.push(ctx);
            out.tgt.push(tgt);
        }
        out
    }

    fn hw(&self) -> usize {
        self.cfg.latent_hw
    }

    fn image_var<'g, T: Scalar>(&self, g: &'g Graph<T>, img: &[f64]) -> Var<'g, T> {
        let n = self.cfg.image;
        g.constant(Tensor::from_f64(&[3, n, n], img))
    }

    fn encode<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, o: &SceneObs) -> Var<'g, T> {
        self.tower.forward(g, s, self.image_var(g, &o.image), &o.view, self.hw())
    }

    fn zeros_rep<'g, T: Scalar>(&self, g: &'g Graph<T>, depth: usize) -> Var<'g, T> {
        g.zeros(&[depth, self.hw(), self.hw()])
    }

    fn sum_vars<'g, T: Scalar>(vars: &[Var<'g, T>]) -> Option<Var<'g, T>> {
        vars.iter().copied().reduce(|a, b| a + b)
    }

    fn mean_vars<'g, T: Scalar>(&self, g: &'g Graph<T>, vars: &[Var<'g, T>]) -> Var<'g, T> {
        match Self::sum_vars(vars) {
            Some(sum) => sum.mul_scalar(1.0 / vars.len() as f64),
            None => self.zeros_rep(g, self.cfg.repr),
        }
    }

    fn stats<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, h: Var<'g, T>) -> GaussVar<'g, T> {
        let out = self.draw.stats.forward(g, s, h);
        let zd = self.cfg.z_depth;
        GaussVar::latent(out.narrow(0, 0, zd), out.narrow(0, zd, zd))
    }

    /// Temporal-ConvDRAW. With `b` the slices come from the inference RNN,
    /// which reads the generative RNN's previous hidden state; without it
    /// they come from the prior.
    fn draw_latent<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        h: Var<'g, T>,
        ctx: Var<'g, T>,
        b: Option<Var<'g, T>>,
        noise: &[f64],
    ) -> DrawTrace<'g, T> {
        let d = &self.draw;
        let (zd, hw) = (self.cfg.z_depth, self.hw());
        let block = zd * hw * hw;
        let fixed_gen = d.gen.fixed_part(g, s, g.concat(&[h, ctx], 0));
        let fixed_inf = b.map(|b| d.inf.fixed_part(g, s, g.concat(&[h, b], 0)));
        let (mut hp, mut cp) = (g.param(s, d.hp0), g.param(s, d.cp0));
        let (mut hq, mut cq) = (g.param(s, d.hq0), g.param(s, d.cq0));
        let mut z_prev = g.zeros(&[zd, hw, hw]);
        let mut prior = Vec::with_capacity(self.cfg.draw_steps);
        let mut posterior = fixed_inf.map(|_| Vec::with_capacity(self.cfg.draw_steps));
        let mut slices = Vec::with_capacity(self.cfg.draw_steps);
        for l in 0..self.cfg.draw_steps {
            let eps = g.constant(Tensor::from_f64(&[zd, hw, hw], &noise[l * block..(l + 1) * block]));
            if let (Some(fixed), Some(post)) = (fixed_inf, posterior.as_mut()) {
                (hq, cq) = d.inf.forward(g, s, Some(g.concat(&[z_prev, hp], 0)), Some(fixed), hq, cq);
                post.push(self.stats(g, s, hq));
            }
            (hp, cp) = d.gen.forward(g, s, Some(z_prev), Some(fixed_gen), hp, cp);
            prior.push(self.stats(g, s, hp));
            let source = posterior.as_ref().map_or(&prior[l], |q| &q[l]);
            z_prev = source.sample(eps);
            slices.push(z_prev);
        }
        let z = g.concat(&slices, 0);
        DrawTrace {
            prior,
            posterior,
            slices,
            z,
        }
    }

    /// Canvas after every renderer iteration, starting from the zero canvas.
    fn render_trace<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        fixed: Var<'g, T>,
        view: &[f64],
    ) -> Vec<Var<'g, T>> {
        let r = &self.renderer;
        let (n, hw, hid) = (self.cfg.image, self.hw(), self.cfg.hidden);
        let v = g.constant(Tensor::from_f64(&[view.len()], view)).broadcast_spatial(hw, hw);
        let mut canvas = g.zeros(&[3, n, n]);
        let (mut d, mut c) = (g.zeros(&[hid, hw, hw]), g.zeros(&[hid, hw, hw]));
        let mut trace = Vec::with_capacity(self.cfg.render_iters + 1);
        trace.push(canvas);
        for _ in 0..self.cfg.render_iters {
            let e = r.enc2.forward(g, s, r.enc1.forward(g, s, canvas).relu()).relu();
            (d, c) = r.cell.forward(g, s, Some(g.concat(&[e, v], 0)), Some(fixed), d, c);
            let up = r.up1.forward(g, s, r.dec1.forward(g, s, d).relu()).relu();
            canvas = canvas + r.up2.forward(g, s, up);
            trace.push(canvas);
        }
        trace
    }

    fn render_var<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, fixed: Var<'g, T>, view: &[f64]) -> Var<'g, T> {
        *self.render_trace(g, s, fixed, view).last().expect("non-empty trace")
    }

    /// With the preset weight, the log-likelihood of the full patch under the
    /// nearest-upsampled mean, less the within-block variance term, which has
    /// no parameters.
    fn log_likelihood<'g, T: Scalar>(&self, g: &'g Graph<T>, mean: Var<'g, T>, image: &[f64]) -> Var<'g, T> {
        let w = self.cfg.pixel_weight;
        let n = image.len() as f64;
        let diff = self.image_var(g, image) - mean;
        diff.square()
            .sum()
            .mul_scalar(-0.5 * w / self.cfg.rgb_var)
            .add_scalar(-0.5 * w * n * (LN_2PI + self.cfg.rgb_var.ln()))
    }

    /// Runs the latent chain; steps flagged in `posterior` sample from the
    /// inference network.
    pub fn rollout<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        data: &PreparedScene,
        posterior: &[bool],
        noise: &Noise,
    ) -> Result<Vec<SceneStepVars<'g, T>>> {
        let steps = data.len();
        if posterior.len() != steps || noise.steps.len() != steps {
            return Err(CoreError::Shape(format!(
                "episode has {steps} steps, mask {} and noise {}",
                posterior.len(),
                noise.steps.len()
            )));
        }
        if noise.steps.iter().any(|n| n.len() != self.cfg.noise_len()) {
            return Err(CoreError::Shape("noise block size".into()));
        }
        let ctx_reps: Vec<Vec<Var<'g, T>>> = data
            .ctx
            .iter()
            .map(|obs| obs.iter().map(|o| self.encode(g, s, o)).collect())
            .collect();
        let any_post = posterior.iter().any(|&p| p);
        let tgt_reps: Vec<Vec<Var<'g, T>>> = data
            .tgt
            .iter()
            .zip(posterior)
            .map(|(obs, &p)| {
                if any_post && (p || self.cfg.kind == SceneModelKind::Tgqn) {
                    obs.iter().map(|o| self.encode(g, s, o)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut out = Vec::with_capacity(steps);
        match &self.temporal {
            Temporal::Tgqn {
                zproj,
                cell,
                h0,
                c0,
                z0,
                back,
                b0,
                bc0,
            } => {
                let backward = any_post.then(|| {
                    let mut states = vec![None; steps];
                    let (mut b, mut bc) = (g.param(s, *b0), g.param(s, *bc0));
                    for t in (0..steps).rev() {
                        let mut all = ctx_reps[t].clone();
                        all.extend(tgt_reps[t].iter().copied());
                        (b, bc) = back.forward(g, s, self.mean_vars(g, &all), b, bc);
                        states[t] = Some(b);
                    }
                    states
                });
                let (mut h, mut c) = (g.param(s, *h0), g.param(s, *c0));
                let mut z_prev = g.param(s, *z0);
                for t in 0..steps {
                    let ctx = self.mean_vars(g, &ctx_reps[t]);
                    let x = g.concat(&[zproj.forward(g, s, z_prev), ctx], 0);
                    (h, c) = cell.forward(g, s, x, h, c);
                    check_finite(&h, "transition", t + 1)?;
                    let b = if posterior[t] {
                        backward.as_ref().and_then(|bs| bs[t])
                    } else {
                        None
                    };
                    let draw = self.draw_latent(g, s, h, ctx, b, &noise.steps[t]);
                    check_finite(&draw.z, "latent", t + 1)?;
                    z_prev = draw.z;
                    out.push(self.step_vars(g, s, h, draw));
                }
            }
            Temporal::Gqn { hproj, bproj } => {
                let mut pooled: Option<Var<'g, T>> = None;
                for t in 0..steps {
                    if let Some(sum) = Self::sum_vars(&ctx_reps[t]) {
                        pooled = Some(pooled.map_or(sum, |p| p + sum));
                    }
                    let r = pooled.unwrap_or_else(|| self.zeros_rep(g, self.cfg.repr));
                    let h = hproj.forward(g, s, r);
                    let b = posterior[t].then(|| {
                        let full = Self::sum_vars(&tgt_reps[t]).map_or(r, |d| r + d);
                        bproj.forward(g, s, full)
                    });
                    let draw = self.draw_latent(g, s, h, r, b, &noise.steps[t]);
                    check_finite(&draw.z, "latent", t + 1)?;
                    out.push(self.step_vars(g, s, h, draw));
                }
            }
        }
        Ok(out)
    }

    fn step_vars<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        h: Var<'g, T>,
        draw: DrawTrace<'g, T>,
    ) -> SceneStepVars<'g, T> {
        let render_fixed = self.renderer.cell.fixed_part(g, s, g.concat(&[h, draw.z], 0));
        SceneStepVars { h, draw, render_fixed }
    }

    /// ELBO on the graph; steps marked in `dropped` are prior-sampled and contribute nothing.
    pub fn elbo_graph<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        data: &PreparedScene,
        dropped: &[bool],
        noise: &Noise,
    ) -> Result<(Var<'g, T>, ObjectiveReport)> {
        let keep: Vec<bool> = dropped.iter().map(|d| !d).collect();
        let roll = self.rollout(g, s, data, &keep, noise)?;
        let mut total: Option<Var<'g, T>> = None;
        let mut terms = Vec::with_capacity(roll.len());
        for (t, sv) in roll.iter().enumerate() {
            let Some(kl) = sv.draw.kl() else {
                terms.push(StepTerms {
                    recon: 0.0,
                    kl: 0.0,
                    dropped: true,
                });
                continue;
            };
            check_finite(&kl, "kl", t + 1)?;
            let mut step = StepTerms {
                recon: 0.0,
                kl: kl.item(),
                dropped: false,
            };
            let recon = data.tgt[t]
                .iter()
                .map(|o| self.log_likelihood(g, self.render_var(g, s, sv.render_fixed, &o.view), &o.image))
                .reduce(|a, b| a + b);
            let step_elbo = match recon {
                Some(r) => {
                    check_finite(&r, "reconstruction", t + 1)?;
                    step.recon = r.item();
                    r - kl
                }
                None => -kl,
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

    pub fn draw_noise(&self, steps: usize, seed: u64) -> Noise {
        Noise::draw(steps, self.cfg.noise_len(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn elbo_snp<T: Scalar>(&self, s: &ParamStore<T>, data: &PreparedScene, seed: u64) -> Result<ObjectiveReport> {
        self.elbo_pd(s, data, &vec![false; data.len()], seed)
    }

    pub fn elbo_pd<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        data: &PreparedScene,
        dropped: &[bool],
        seed: u64,
    ) -> Result<ObjectiveReport> {
        let noise = self.draw_noise(data.len(), seed);
        let g = Graph::new();
        Ok(self.elbo_graph(&g, s, data, dropped, &noise)?.1)
    }

    /// The baseline's ELBO; errors on a temporal model.
    pub fn gqn_baseline<T: Scalar>(&self, s: &ParamStore<T>, data: &PreparedScene, seed: u64) -> Result<ObjectiveReport> {
        if self.cfg.kind != SceneModelKind::Gqn {
            return Err(CoreError::Domain("gqn_baseline needs a baseline model".into()));
        }
        self.elbo_snp(s, data, seed)
    }

    /// Gradients of `-(L_SNP + alpha * L_PD)`; the dropout rollout is skipped when alpha is zero.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        data: &PreparedScene,
        alpha: f64,
        dropped: &[bool],
        seed: u64,
    ) -> Result<(CombinedReport, Gradients<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Noise::draw(data.len(), self.cfg.noise_len(), &mut rng);
        let g = Graph::new();
        let (snp, snp_report) = self.elbo_graph(&g, s, data, &vec![false; data.len()], &noise)?;
        let (objective, pd_report) = if alpha != 0.0 {
            let pd_noise = Noise::draw(data.len(), self.cfg.noise_len(), &mut rng);
            let (pd, report) = self.elbo_graph(&g, s, data, dropped, &pd_noise)?;
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

    pub fn batch_loss_and_grads<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        batch: &[&PreparedScene],
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
    pub fn log_weight<T: Scalar>(&self, s: &ParamStore<T>, data: &PreparedScene, noise: &Noise) -> Result<f64> {
        let g = Graph::new();
        let roll = self.rollout(&g, s, data, &vec![true; data.len()], noise)?;
        let mut lw = 0.0;
        for (sv, tgt) in roll.iter().zip(&data.tgt) {
            let post = sv.draw.posterior.as_ref().expect("posterior-sampled rollout");
            for ((p, q), z) in sv.draw.prior.iter().zip(post).zip(&sv.draw.slices) {
                lw += p.log_prob(*z).item() - q.log_prob(*z).item();
            }
            for o in tgt {
                lw += self.log_likelihood(&g, self.render_var(&g, s, sv.render_fixed, &o.view), &o.image).item();
            }
        }
        Ok(lw)
    }

    /// Renders every target of every step from one prior-chain sample.
    /// Images are planar `[3, image, image]`.
    pub fn generate<T: Scalar>(&self, s: &ParamStore<T>, data: &PreparedScene, noise: &Noise) -> Result<Vec<Vec<Vec<f64>>>> {
        let g = Graph::new();
        let roll = self.rollout(&g, s, data, &vec![false; data.len()], noise)?;
        Ok(roll
            .iter()
            .zip(&data.tgt)
            .map(|(sv, tgt)| {
                tgt.iter()
                    .map(|o| self.render_var(&g, s, sv.render_fixed, &o.view).value().to_f64_vec())
                    .collect()
            })
            .collect())
    }

    // -----------------------------------------------------------------------
    // value-level entry points

    /// Tower representation `[repr, hw, hw]` of one planar image.
    pub fn tower_encode<T: Scalar>(&self, s: &ParamStore<T>, image: &[f64], view: &[f64]) -> Result<Tensor<f64>> {
        let n = self.cfg.image;
        if image.len() != 3 * n * n || view.len() != self.cfg.view_dim() {
            return Err(CoreError::Shape(format!("tower expects a [3,{n},{n}] image and {} view dims", self.cfg.view_dim())));
        }
        let g = Graph::new();
        let o = SceneObs {
            image: image.to_vec(),
            view: view.to_vec(),
        };
        Ok(self.encode(&g, s, &o).value().cast())
    }

    /// Backward states `b_t` over the pooled observations of each step.
    pub fn backward_encode<T: Scalar>(&self, s: &ParamStore<T>, data: &PreparedScene) -> Result<Vec<Tensor<f64>>> {
        let Temporal::Tgqn { back, b0, bc0, .. } = &self.temporal else {
            return Err(CoreError::Domain("the baseline has no backward encoder".into()));
        };
        let g = Graph::new();
        let (mut b, mut bc) = (g.param(s, *b0), g.param(s, *bc0));
        let mut states = vec![Tensor::zeros(&[0]); data.len()];
        for t in (0..data.len()).rev() {
            let reps: Vec<_> = data.ctx[t].iter().chain(&data.tgt[t]).map(|o| self.encode(&g, s, o)).collect();
            (b, bc) = back.forward(&g, s, self.mean_vars(&g, &reps), b, bc);
            states[t] = b.value().cast();
        }
        Ok(states)
    }

    /// One transition step from `(h, c)`; returns the new `(h, c)`.
    pub fn transition<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h: &Tensor<f64>,
        c: &Tensor<f64>,
        z_prev: &Tensor<f64>,
        ctx: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let Temporal::Tgqn { zproj, cell, .. } = &self.temporal else {
            return Err(CoreError::Domain("the baseline has no transition".into()));
        };
        let hw = self.hw();
        let expect = |t: &Tensor<f64>, d: usize| t.shape() == [d, hw, hw];
        if !expect(h, self.cfg.hidden) || !expect(c, self.cfg.hidden) || !expect(z_prev, self.cfg.z_channels()) || !expect(ctx, self.cfg.repr) {
            return Err(CoreError::Shape("transition input shapes".into()));
        }
        let g = Graph::new();
        let k = |t: &Tensor<f64>| g.constant(t.cast::<T>());
        let x = g.concat(&[zproj.forward(&g, s, k(z_prev)), k(ctx)], 0);
        let (h, c) = cell.forward(&g, s, x, k(h), k(c));
        Ok((h.value().cast(), c.value().cast()))
    }

    /// Learned initial `(h_0, c_0, z_0)`.
    pub fn initial_state<T: Scalar>(&self, s: &ParamStore<T>) -> Option<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        match &self.temporal {
            Temporal::Tgqn { h0, c0, z0, .. } => Some((s.get(*h0).cast(), s.get(*c0).cast(), s.get(*z0).cast())),
            Temporal::Gqn { .. } => None,
        }
    }

    /// Prior DRAW trace from `h_t` and the context representation.
    pub fn draw_prior<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h: &Tensor<f64>,
        ctx: &Tensor<f64>,
        noise: &[f64],
    ) -> Result<DrawValues> {
        self.draw_values(s, h, ctx, None, noise)
    }

    /// Posterior DRAW trace; `b` is the backward state of the step.
    pub fn draw_posterior<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h: &Tensor<f64>,
        ctx: &Tensor<f64>,
        b: &Tensor<f64>,
        noise: &[f64],
    ) -> Result<DrawValues> {
        self.draw_values(s, h, ctx, Some(b), noise)
    }

    fn draw_values<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h: &Tensor<f64>,
        ctx: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        noise: &[f64],
    ) -> Result<DrawValues> {
        if noise.len() != self.cfg.noise_len() {
            return Err(CoreError::Shape("noise block size".into()));
        }
        let g = Graph::new();
        let k = |t: &Tensor<f64>| g.constant(t.cast::<T>());
        let trace = self.draw_latent(&g, s, k(h), k(ctx), b.map(k), noise);
        for (l, p) in trace.prior.iter().enumerate() {
            if !p.mean.value().is_finite() || !p.std.value().is_finite() {
                return Err(CoreError::NonFinite {
                    what: "draw statistics".into(),
                    step: Some(l + 1),
                });
            }
        }
        Ok(DrawValues {
            prior: trace.prior.iter().map(|p| p.to_params()).collect(),
            posterior: trace
                .posterior
                .as_ref()
                .map(|q| q.iter().map(|p| p.to_params()).collect()),
            kl: trace.kl_terms(),
            z: trace.z.value().cast(),
        })
    }

    /// Renders one query from `(z_t, h_t)`; returns the canvas after each iteration.
    pub fn render<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        view: &[f64],
        z: &Tensor<f64>,
        h: &Tensor<f64>,
    ) -> Result<Vec<Tensor<f64>>> {
        let hw = self.hw();
        if view.len() != self.cfg.view_dim() || z.shape() != [self.cfg.z_channels(), hw, hw] || h.shape() != [self.cfg.hidden, hw, hw] {
            return Err(CoreError::Shape("render input shapes".into()));
        }
        let g = Graph::new();
        let fixed = self
            .renderer
            .cell
            .fixed_part(&g, s, g.concat(&[g.constant(h.cast::<T>()), g.constant(z.cast::<T>())], 0));
        Ok(self
            .render_trace(&g, s, fixed, view)
            .iter()
            .map(|v| v.value().cast())
            .collect())
    }

    /// Parameter names of the generative DRAW cell and its inference
    /// counterpart, for tests that tie the two.
    pub fn draw_param_ids(&self) -> DrawParamIds {
        let d = &self.draw;
        DrawParamIds {
            gen_w: d.gen.dynamic.w,
            gen_b: d.gen.dynamic.b,
            gen_fixed: d.gen.fixed_w.expect("fixed inputs"),
            inf_w: d.inf.dynamic.w,
            inf_b: d.inf.dynamic.b,
            inf_fixed: d.inf.fixed_w.expect("fixed inputs"),
            hp0: d.hp0,
            cp0: d.cp0,
            hq0: d.hq0,
            cq0: d.cq0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DrawParamIds {
    pub gen_w: ParamId,
    pub gen_b: ParamId,
    pub gen_fixed: ParamId,
    pub inf_w: ParamId,
    pub inf_b: ParamId,
    pub inf_fixed: ParamId,
    pub hp0: ParamId,
    pub cp0: ParamId,
    pub hq0: ParamId,
    pub cq0: ParamId,
}

/// Plain-value DRAW trace.
#[derive(Clone, Debug)]
pub struct DrawValues {
    pub prior: Vec<crate::dist::GaussianParams>,
    pub posterior: Option<Vec<crate::dist::GaussianParams>>,
    pub kl: Option<Vec<f64>>,
    pub z: Tensor<f64>,
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

/// Mean squared pixel error between two equally sized images.
pub fn pixel_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes2d::{sample_episode2d, Regime};

    fn micro(kind: SceneModelKind) -> (TgqnModel, ParamStore<f64>) {
        TgqnModel::new(TgqnConfig::micro(kind), 3).unwrap()
    }

    fn short(regime: Regime, steps: usize, seed: u64) -> Episode2D {
        sample_episode2d(regime, steps, seed).unwrap()
    }

    #[test]
    fn weighted_likelihood_is_the_full_patch_likelihood() {
        let (m, _) = TgqnModel::new(TgqnConfig::desk(SceneModelKind::Tgqn), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut patch = Image::filled(PATCH, PATCH, 0.0);
        for v in &mut patch.data {
            *v = rand::Rng::random::<f32>(&mut rng);
        }
        let small = m.model_image(&patch);
        let n = m.cfg.image;
        let mean: Vec<f64> = (0..3 * n * n).map(|i| (i % 7) as f64 / 7.0).collect();
        let g = Graph::<f64>::new();
        let ll = m.log_likelihood(&g, g.constant(Tensor::from_f64(&[3, n, n], &mean)), &small).item();

        let (f, var) = (PATCH / n, m.cfg.rgb_var);
        let (mut full, mut within) = (0.0, 0.0);
        for r in 0..PATCH {
            for c in 0..PATCH {
                for k in 0..3 {
                    let y = patch.data[(r * PATCH + c) * 3 + k] as f64;
                    let idx = k * n * n + (r / f) * n + c / f;
                    full += -0.5 * (LN_2PI + var.ln()) - (y - mean[idx]).powi(2) / (2.0 * var);
                    within += (y - small[idx]).powi(2) / (2.0 * var);
                }
            }
        }
        assert!((ll - within - full).abs() < 1e-6 * full.abs(), "{ll} - {within} vs {full}");
    }

    #[test]
    fn config_shapes() {
        let p = TgqnConfig::paper(SceneModelKind::Tgqn);
        assert_eq!(p.z_channels(), 24);
        assert_eq!(p.downscale(), 4);
        assert_eq!(TgqnConfig::paper(SceneModelKind::Gqn).view_dim(), 3);
        assert!(TgqnConfig {
            image: 20,
            ..TgqnConfig::micro(SceneModelKind::Tgqn)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn tower_output_is_latent_sized() {
        for cfg in [TgqnConfig::micro(SceneModelKind::Tgqn), TgqnConfig::desk(SceneModelKind::Tgqn)] {
            let (m, s) = TgqnModel::new(cfg.clone(), 1).unwrap();
            let img = vec![0.5; 3 * cfg.image * cfg.image];
            let r = m.tower_encode(&s, &img, &[0.1, -0.3]).unwrap();
            assert_eq!(r.shape(), [cfg.repr, cfg.latent_hw, cfg.latent_hw]);
            assert_eq!(r, m.tower_encode(&s, &img, &[0.1, -0.3]).unwrap());
        }
    }

    #[test]
    fn render_starts_blank_and_adds_up() {
        let (m, s) = micro(SceneModelKind::Tgqn);
        let cfg = &m.cfg;
        let hw = cfg.latent_hw;
        let z = Tensor::from_vec(&[cfg.z_channels(), hw, hw], (0..cfg.noise_len()).map(|i| (i as f64).sin()).collect());
        let h = Tensor::full(&[cfg.hidden, hw, hw], 0.3);
        let trace = m.render(&s, &[0.2, 0.4], &z, &h).unwrap();
        assert_eq!(trace.len(), cfg.render_iters + 1);
        assert!(trace[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(trace.last().unwrap().shape(), [3, cfg.image, cfg.image]);
        assert_eq!(trace, m.render(&s, &[0.2, 0.4], &z, &h).unwrap());
    }

    #[test]
    fn draw_depth_and_positive_std() {
        let (m, s) = TgqnModel::new(TgqnConfig::desk(SceneModelKind::Tgqn), 2).unwrap();
        let (h, _, _) = m.initial_state(&s).unwrap();
        let ctx = Tensor::zeros(&[m.cfg.repr, m.cfg.latent_hw, m.cfg.latent_hw]);
        let noise = m.draw_noise(1, 4).steps.remove(0);
        let d = m.draw_prior(&s, &h, &ctx, &noise).unwrap();
        assert_eq!(d.z.dim(0), m.cfg.z_channels());
        assert!(d.prior.iter().all(|p| p.std.iter().all(|&v| v > 0.0)));
        let again = m.draw_prior(&s, &h, &ctx, &noise).unwrap();
        assert_eq!(d.z, again.z);
    }

    #[test]
    fn pd_reductions_on_scenes() {
        for kind in [SceneModelKind::Tgqn, SceneModelKind::Gqn] {
            let (m, s) = micro(kind);
            let data = m.prepare(&short(Regime::Tracking, 3, 8), Some(2));
            let snp = m.elbo_snp(&s, &data, 5).unwrap();
            assert_eq!(snp, m.elbo_pd(&s, &data, &[false; 3], 5).unwrap());
            assert_eq!(m.elbo_pd(&s, &data, &[true; 3], 5).unwrap().total, 0.0);
            assert!(snp.steps.iter().all(|st| st.kl >= 0.0));
        }
    }

    #[test]
    fn backward_states_ignore_the_past() {
        let (m, s) = micro(SceneModelKind::Tgqn);
        let data = m.prepare(&short(Regime::Tracking, 3, 2), Some(2));
        let mut edited = data.clone();
        for o in &mut edited.tgt[0] {
            o.image.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        let a = m.backward_encode(&s, &data).unwrap();
        let b = m.backward_encode(&s, &edited).unwrap();
        assert_eq!(a[1..], b[1..]);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn baseline_queries_carry_time() {
        let (m, s) = micro(SceneModelKind::Gqn);
        let ep = short(Regime::Prediction, 4, 1);
        let data = m.prepare(&ep, Some(1));
        assert!(data.tgt.iter().flatten().all(|o| o.view.len() == 3));
        assert!(m.gqn_baseline(&s, &data, 0).is_ok());
        let (t, ts) = micro(SceneModelKind::Tgqn);
        assert!(t.gqn_baseline(&ts, &t.prepare(&ep, Some(1)), 0).is_err());
    }

    #[test]
    fn mse_extremes() {
        assert_eq!(pixel_mse(&[0.0; 12], &[1.0; 12]), 1.0);
        assert_eq!(pixel_mse(&[0.25; 12], &[0.25; 12]), 0.0);
    }
}
