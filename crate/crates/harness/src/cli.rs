//! The `snp` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snp_core::gp::sample_episode;
use snp_core::nn::ParamStore;
use snp_core::objective::Noise;
use snp_core::shapes2d::sample_episode2d;
use snp_core::tgqn::PreparedScene;

use crate::checkpoint::{check_compatible, Checkpoint};
use crate::config::{DataTask, RunConfig};
use crate::error::{HarnessError, IoContext, Result};
use crate::eval::{self, ProbeConfig};
use crate::metrics::{MetricRow, MetricsLog};
use crate::model::{split_seeds, Dataset, Model};
use crate::plot;
use crate::record::{self, AnyEpisode, EXTENSION};
use crate::train::Trainer;

#[derive(Parser, Debug)]
#[command(name = "snp", about = "Sequential neural processes: data, training, evaluation and plots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    NllIs,
    TargetNll,
    PixelMse,
    Probe,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write episode records.
    GenData {
        /// a, b, c, prediction or tracking
        #[arg(long)]
        task: DataTask,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Episode length for scene tasks.
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the config's out_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and append the results to a metrics log.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Directory of episode records; defaults to the run's evaluation split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Importance samples.
        #[arg(long)]
        k: Option<usize>,
        /// Latent samples for target NLL, generations for pixel MSE.
        #[arg(long)]
        samples: Option<usize>,
        /// Number of evaluation episodes when generating them.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Draw figures.
    Plot {
        #[command(subcommand)]
        kind: PlotKind,
    },
}

#[derive(Subcommand, Debug)]
pub enum PlotKind {
    /// Per-step curves of one metric, one line per metrics log.
    Curves {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// 1D predictions with context, truth, mean and a 2-std band.
    Function {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode record; generated from --episode-seed when absent.
        #[arg(long)]
        episode: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scene grid: context, truth and two generations per step.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            task,
            count,
            seed,
            out,
            steps,
        } => gen_data(task, count, seed, &out, steps).map(|_| ()),
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let mut t = if resume { Trainer::resume(cfg)? } else { Trainer::new(cfg)? };
            t.run()?;
            println!("trained to iteration {}; metrics in {}", t.iteration, t.metrics_path().display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            metric,
            dataset,
            k,
            samples,
            episodes,
            seed,
            log,
        } => {
            let log = log.unwrap_or_else(|| checkpoint.with_file_name("eval.csv"));
            let opts = EvalOptions {
                metric,
                dataset,
                k,
                samples,
                episodes,
                seed,
            };
            let rows = evaluate(&checkpoint, &opts)?;
            let mut out = MetricsLog::open_append(&log)?;
            for r in &rows {
                out.append(r)?;
            }
            out.flush()?;
            for r in rows.iter().filter(|r| r.metric.ends_with("_mean") || r.metric.starts_with("probe")) {
                println!("{} = {}", r.metric, r.value);
            }
            Ok(())
        }
        Command::Plot { kind } => run_plot(kind),
    }
}

/// Writes `count` records named `episode_NNNNN.snpe`; returns their paths.
pub fn gen_data(task: DataTask, count: usize, seed: u64, out: &Path, steps: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).at(out)?;
    let seeds = split_seeds(seed, false, count);
    let mut paths = Vec::with_capacity(count);
    for (i, &s) in seeds.iter().enumerate() {
        let ep = match (task.gp(), task.regime()) {
            (Some(t), _) => AnyEpisode::Gp(sample_episode(t, s)?),
            (None, Some(r)) => AnyEpisode::Shapes(sample_episode2d(r, steps, s)?),
            (None, None) => unreachable!("every task is GP or scene"),
        };
        let path = out.join(format!("episode_{i:05}.{EXTENSION}"));
        record::serialize_episode(&ep, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// A checkpointed model ready for evaluation.
pub struct Loaded {
    pub config: RunConfig,
    pub iteration: u64,
    pub model: Model,
    pub params: ParamStore<f32>,
}

pub fn load_model(checkpoint: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, fresh) = Model::build(&ck.config)?;
    check_compatible(&fresh, &ck.params)?;
    Ok(Loaded {
        config: ck.config,
        iteration: ck.iteration,
        model,
        params: ck.params,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub metric: Metric,
    pub dataset: Option<PathBuf>,
    pub k: Option<usize>,
    pub samples: Option<usize>,
    pub episodes: Option<usize>,
    pub seed: u64,
}

fn eval_dataset(l: &Loaded, opts: &EvalOptions) -> Result<Dataset> {
    match &opts.dataset {
        Some(dir) => Dataset::from_records(record::load_dir(dir)?, l.config.task),
        None => {
            let n = opts.episodes.unwrap_or(l.config.eval_episodes);
            Dataset::generate(l.config.task, l.config.steps, &split_seeds(l.config.data_seed, true, n))
        }
    }
}

fn scenes(l: &Loaded, data: &Dataset) -> Result<Vec<(u64, PreparedScene)>> {
    let m = l.model.scene().expect("scene model");
    (0..data.len())
        .map(|i| {
            let ep = data.shape_episode(i)?;
            Ok((ep.seed, m.prepare(&ep, None)))
        })
        .collect()
}

fn curve_rows(it: u64, name: &str, curve: &[Option<f64>], seed: u64) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = curve
        .iter()
        .enumerate()
        .filter_map(|(t, v)| v.map(|v| MetricRow::new(it, "eval", &plot::step_metric(name, t + 1), v, seed)))
        .collect();
    if let Some(mean) = eval::window_mean(curve, 1, curve.len()) {
        rows.push(MetricRow::new(it, "eval", &format!("{name}_mean"), mean, seed));
    }
    rows
}

/// Computes the metric rows of one evaluation.
pub fn evaluate(checkpoint: &Path, opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    let l = load_model(checkpoint)?;
    let data = eval_dataset(&l, opts)?;
    let (it, seed) = (l.iteration, opts.seed);
    let wrong = |what: &str| HarnessError::Config(format!("metric {} needs a {what} model", opts.metric.to_possible_value().map_or("?".into(), |v| v.get_name().to_string())));
    match opts.metric {
        Metric::NllIs => {
            let k = opts.k.unwrap_or(l.config.nll_k);
            let per: Vec<(u64, f64)> = match &l.model {
                Model::Seq(m) => {
                    let eps = data.gp().expect("GP data");
                    snp_core::parallel::map_range(eps.len(), |i| {
                        eval::nll_is_seq(m, &l.params, &eps[i], k, seed).map(|v| (eps[i].seed, v))
                    })
                    .into_iter()
                    .collect::<Result<_>>()?
                }
                Model::Scene(m) => scenes(&l, &data)?
                    .iter()
                    .enumerate()
                    .map(|(i, (s, d))| eval::nll_is_scene(m, &l.params, d, k, seed, i as u64).map(|v| (*s, v)))
                    .collect::<Result<_>>()?,
            };
            let mut rows: Vec<MetricRow> = per.iter().map(|&(s, v)| MetricRow::new(it, "eval", "nll_is", v, s)).collect();
            let mean = per.iter().map(|p| p.1).sum::<f64>() / per.len().max(1) as f64;
            rows.push(MetricRow::new(it, "eval", "nll_is_mean", mean, seed));
            Ok(rows)
        }
        Metric::TargetNll => {
            let m = l.model.seq().ok_or_else(|| wrong("1D"))?;
            let samples = opts.samples.unwrap_or(l.config.target_nll_samples);
            let curve = eval::target_nll_curve(m, &l.params, data.gp().expect("GP data"), samples, seed)?;
            Ok(curve_rows(it, "target_nll", &curve, seed))
        }
        Metric::PixelMse => {
            let m = l.model.scene().ok_or_else(|| wrong("scene"))?;
            let samples = opts.samples.unwrap_or(l.config.mse_samples);
            let prepared: Vec<PreparedScene> = scenes(&l, &data)?.into_iter().map(|p| p.1).collect();
            let curve = eval::pixel_mse_curve(m, &l.params, &prepared, samples, seed)?;
            Ok(curve_rows(it, "pixel_mse", &curve, seed))
        }
        Metric::Probe => {
            let m = l.model.scene().ok_or_else(|| wrong("scene"))?;
            let cfg = ProbeConfig {
                samples: opts.samples.unwrap_or(l.config.mse_samples),
                ..ProbeConfig::default()
            };
            let prepared: Vec<PreparedScene> = scenes(&l, &data)?.into_iter().map(|p| p.1).collect();
            let r = eval::context_probe(m, &l.params, &prepared, &cfg, seed)?;
            Ok(vec![
                MetricRow::new(it, "eval", "probe_mse_blind", r.mse_blind, seed),
                MetricRow::new(it, "eval", "probe_mse_revealed", r.mse_revealed, seed),
                MetricRow::new(it, "eval", "probe_drop", r.drop(), seed),
            ])
        }
    }
}

fn load_episode(l: &Loaded, path: Option<&PathBuf>, episode_seed: u64) -> Result<AnyEpisode> {
    if let Some(p) = path {
        return record::deserialize_episode(p);
    }
    let task = l.config.task;
    Ok(match (task.gp(), task.regime()) {
        (Some(t), _) => AnyEpisode::Gp(sample_episode(t, episode_seed)?),
        (None, Some(r)) => AnyEpisode::Shapes(sample_episode2d(r, l.config.steps, episode_seed)?),
        (None, None) => unreachable!("every task is GP or scene"),
    })
}

fn run_plot(kind: PlotKind) -> Result<()> {
    match kind {
        PlotKind::Curves { metrics, metric, out } => {
            let series = plot::curves_from_logs(&metrics, &metric)?;
            plot::plot_curves(&series, &out)
        }
        PlotKind::Function {
            checkpoint,
            episode,
            episode_seed,
            step,
            seed,
            out,
        } => {
            let l = load_model(&checkpoint)?;
            let m = l.model.seq().ok_or_else(|| HarnessError::Plot("function plots need a 1D model".into()))?;
            let AnyEpisode::Gp(ep) = load_episode(&l, episode.as_ref(), episode_seed)? else {
                return Err(HarnessError::Plot("function plots need a GP episode".into()));
            };
            let noise = Noise::draw(ep.len(), m.cfg.latent, &mut ChaCha8Rng::seed_from_u64(seed));
            plot::plot_function(&plot::function_plot_for(m, &l.params, &ep, step, &noise)?, &out)
        }
        PlotKind::Grid {
            checkpoint,
            episode,
            episode_seed,
            seed,
            out,
        } => {
            let l = load_model(&checkpoint)?;
            let m = l.model.scene().ok_or_else(|| HarnessError::Plot("grids need a scene model".into()))?;
            let AnyEpisode::Shapes(ep) = load_episode(&l, episode.as_ref(), episode_seed)? else {
                return Err(HarnessError::Plot("grids need a scene episode".into()));
            };
            let data = m.prepare(&ep, None);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noises: Vec<Noise> = (0..2).map(|_| Noise::draw(data.len(), m.cfg.noise_len(), &mut rng)).collect();
            let rows = plot::scene_grid_rows(m, &l.params, &data, &noises)?;
            plot::image_grid(&rows, m.cfg.image, 64, &out)
        }
    }
}
