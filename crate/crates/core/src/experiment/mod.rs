//! Experiment orchestration behind the command-line verbs: training runs
//! with periodic checkpoints and evaluation, full evaluation reports,
//! ablation sweeps and feature export.

pub mod checkpoint;
pub mod manifest;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::DynamicsParams;
use crate::error::{Error, Result};
use crate::metrics::{
    activation_entropy, cycle_consistency, cycle_consistency_3way, demo_observations, eval_level,
    evaluate, export_features, gradcam_map, EvalOptions, EvalSet, FgsmRow, MetricsReport,
    SuccessRow, Trajectory,
};
use crate::nn::Scalar;
use crate::trainer::{stream, Agent, EnvSpec, IterationStats, TrainConfig, Trainer};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use manifest::{
    AblationAxis, AblationPlan, EnvSetName, EvalPlan, ExperimentManifest, MANIFEST_SCHEMA_VERSION,
};

pub const EVAL_LOG_SCHEMA: &str = "netrand.eval/1";
pub const SWEEP_SCHEMA: &str = "netrand.sweep/1";
pub const LOCK_FILE: &str = ".netrand.lock";
pub const CHECKPOINT_FILE: &str = "checkpoint.nrnd";
pub const STATS_FILE: &str = "stats.jsonl";
pub const EVAL_LOG_FILE: &str = "eval.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Offset of the level seeds used for trajectory analyses, away from the
/// success-rate levels.
const ANALYSIS_LEVEL_OFFSET: u64 = 1 << 28;

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Abort(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn append_json_line<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Evaluation sets named by `plan.env_sets`.
pub fn eval_sets(train: &TrainConfig, plan: &EvalPlan) -> Vec<(EnvSetName, EvalSet)> {
    plan.env_sets
        .iter()
        .map(|&name| {
            let set = match &train.env {
                EnvSpec::CoinGrid {
                    grid,
                    seen_themes,
                    unseen_themes,
                    ..
                } => EvalSet::CoinGrid {
                    grid: grid.clone(),
                    themes: match name {
                        EnvSetName::Seen => seen_themes.clone(),
                        EnvSetName::Unseen => unseen_themes.clone(),
                    },
                    level_offset: 0,
                },
                EnvSpec::CartPole { dynamics } => EvalSet::CartPole {
                    params: match name {
                        EnvSetName::Seen => vec![*dynamics],
                        EnvSetName::Unseen => held_out_dynamics(plan),
                    },
                },
            };
            (name, set)
        })
        .collect()
}

pub fn held_out_dynamics(plan: &EvalPlan) -> Vec<DynamicsParams> {
    let mut rng = stream(plan.seed, 11);
    (0..plan.held_out_dynamics)
        .map(|_| DynamicsParams::sample_held_out(&mut rng))
        .collect()
}

fn nonempty_sets(train: &TrainConfig, plan: &EvalPlan) -> Vec<(EnvSetName, EvalSet)> {
    eval_sets(train, plan)
        .into_iter()
        .filter(|(_, s)| match s {
            EvalSet::CoinGrid { themes, .. } => !themes.is_empty(),
            EvalSet::CartPole { params } => !params.is_empty(),
        })
        .collect()
}

/// Demonstrations of the analysis levels in every seen and unseen theme,
/// tagged `seen-<id>` / `unseen-<id>`, grouped by level.
pub fn analysis_trajectories<T: Scalar>(
    agent: &Agent<T>,
    train: &TrainConfig,
    plan: &EvalPlan,
) -> Result<Vec<Vec<Trajectory<T>>>> {
    let EnvSpec::CoinGrid {
        grid,
        seen_themes,
        unseen_themes,
        ..
    } = &train.env
    else {
        return Ok(Vec::new());
    };
    (0..plan.analysis_levels)
        .map(|i| {
            let level = eval_level(grid, ANALYSIS_LEVEL_OFFSET, i)?;
            let tagged = seen_themes
                .iter()
                .map(|&t| (format!("seen-{t}"), t))
                .chain(unseen_themes.iter().map(|&t| (format!("unseen-{t}"), t)));
            tagged
                .map(|(tag, theme)| {
                    Trajectory::new(agent, &tag, demo_observations(grid, &level, theme)?)
                })
                .collect()
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Every metric enabled by `plan`, for one agent.
pub fn evaluate_report<T: Scalar>(
    agent: &Agent<T>,
    train: &TrainConfig,
    plan: &EvalPlan,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(agent.method, plan.seed);
    let m_default = train.hyper.mc_samples;
    for (name, set) in nonempty_sets(train, plan) {
        let mut at_default = None;
        for &m in &plan.mc_samples {
            let opts = EvalOptions {
                episodes: plan.episodes,
                mc_samples: m,
                fgsm_eps: None,
                seed: plan.seed,
            };
            let r = evaluate(agent, &set, &opts)?;
            if m == m_default {
                at_default = Some(r.success_rate);
            }
            report.success.push(SuccessRow {
                env_set: name.as_str().to_string(),
                mc_samples: m,
                success_rate: r.success_rate,
                mean_return: r.mean_return,
                episodes: r.episodes.len(),
            });
        }
        let is_grid = matches!(set, EvalSet::CoinGrid { .. });
        if plan.fgsm && is_grid {
            let opts = EvalOptions {
                episodes: plan.episodes,
                mc_samples: m_default,
                fgsm_eps: None,
                seed: plan.seed,
            };
            let clean = match at_default {
                Some(c) => c,
                None => evaluate(agent, &set, &opts)?.success_rate,
            };
            let eps = train.hyper.fgsm_eps;
            let attacked = evaluate(
                agent,
                &set,
                &EvalOptions {
                    fgsm_eps: Some(eps),
                    ..opts
                },
            )?
            .success_rate;
            report
                .fgsm
                .push(FgsmRow::new(name.as_str(), eps, clean, attacked));
        }
    }
    if plan.cycle || plan.entropy {
        let groups = analysis_trajectories(agent, train, plan)?;
        let mut two = Vec::new();
        let mut three = Vec::new();
        let mut ent_seen = Vec::new();
        let mut ent_unseen = Vec::new();
        for group in &groups {
            let seen: Vec<&Trajectory<T>> =
                group.iter().filter(|t| t.tag.starts_with("seen")).collect();
            let unseen: Vec<&Trajectory<T>> = group
                .iter()
                .filter(|t| t.tag.starts_with("unseen"))
                .collect();
            if plan.cycle {
                if let Some(v) = seen.first() {
                    for (k, u) in unseen.iter().enumerate() {
                        two.push(cycle_consistency(&v.features, &u.features)?);
                        if unseen.len() > 1 {
                            let j = unseen[(k + 1) % unseen.len()];
                            three.push(cycle_consistency_3way(
                                &v.features,
                                &u.features,
                                &j.features,
                            )?);
                        }
                    }
                }
            }
            if plan.entropy {
                for (list, out) in [(&seen, &mut ent_seen), (&unseen, &mut ent_unseen)] {
                    for t in list.iter() {
                        let maps = t
                            .observations
                            .iter()
                            .map(|o| gradcam_map(agent, o))
                            .collect::<Result<Vec<_>>>()?;
                        out.push(activation_entropy(&maps)?);
                    }
                }
            }
        }
        report.cycle_2way = mean(&two);
        report.cycle_3way = mean(&three);
        report.entropy_seen = mean(&ent_seen);
        report.entropy_unseen = mean(&ent_unseen);
    }
    Ok(report)
}

/// Record written to the periodic evaluation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema: String,
    pub timestep: u64,
    pub env_set: String,
    pub mc_samples: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub stats_log: PathBuf,
    pub timestep: u64,
    pub iterations: u64,
    pub last: Option<IterationStats>,
}

fn crossed(before: u64, after: u64, period: u64) -> bool {
    period > 0 && after / period > before / period
}

/// Trains `trainer` to its step budget inside `dir`, appending stats,
/// running periodic evaluations and refreshing the checkpoint.
pub fn run_training<T: Scalar>(
    trainer: &mut Trainer<T>,
    dir: &Path,
    plan: &EvalPlan,
    progress: &mut dyn FnMut(&IterationStats),
) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let stats_log = dir.join(STATS_FILE);
    File::options().create(true).append(true).open(&stats_log)?;
    let mut last = None;
    while !trainer.is_done() {
        let before = trainer.timestep;
        let stats = match trainer.train_iteration() {
            Ok(s) => s,
            Err(e) => {
                if let Some(dump) = &trainer.last_dump {
                    write_json(&dir.join(NAN_DUMP_FILE), dump)?;
                }
                return Err(e);
            }
        };
        append_json_line(&stats_log, &stats)?;
        progress(&stats);
        let after = trainer.timestep;
        if crossed(before, after, plan.interval) {
            let plan_unseen = EvalPlan {
                env_sets: vec![EnvSetName::Unseen],
                ..plan.clone()
            };
            for (name, set) in nonempty_sets(&trainer.config, &plan_unseen) {
                let m = trainer.config.hyper.mc_samples;
                let r = evaluate(
                    &trainer.agent,
                    &set,
                    &EvalOptions {
                        episodes: plan.episodes,
                        mc_samples: m,
                        fgsm_eps: None,
                        seed: plan.seed,
                    },
                )?;
                append_json_line(
                    &dir.join(EVAL_LOG_FILE),
                    &EvalRecord {
                        schema: EVAL_LOG_SCHEMA.to_string(),
                        timestep: after,
                        env_set: name.as_str().to_string(),
                        mc_samples: m,
                        success_rate: r.success_rate,
                        mean_return: r.mean_return,
                    },
                )?;
            }
        }
        if crossed(before, after, plan.checkpoint_interval) {
            Checkpoint::from_trainer(trainer).save(&ckpt)?;
        }
        last = Some(stats);
    }
    Checkpoint::from_trainer(trainer).save(&ckpt)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        stats_log,
        timestep: trainer.timestep,
        iterations: trainer.iteration,
        last,
    })
}

/// `train`: fresh run, or continuation of `resume` up to the manifest's
/// step budget. The checkpoint's configuration must otherwise match.
pub fn cmd_train(
    manifest: &ExperimentManifest,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&IterationStats),
) -> Result<TrainOutcome> {
    manifest.validate()?;
    let dir = &manifest.out_dir;
    let _lock = DirLock::acquire(dir)?;
    fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
    let mut trainer = match resume {
        None => Trainer::<f32>::new(manifest.train.clone())?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut stored = ck.config.clone();
            stored.total_timesteps = manifest.train.total_timesteps;
            if stored != manifest.train {
                return Err(Error::config(format!(
                    "checkpoint {} was trained with a different configuration",
                    path.display()
                )));
            }
            let mut t = ck.trainer::<f32>()?;
            t.config.total_timesteps = manifest.train.total_timesteps;
            t
        }
    };
    run_training(&mut trainer, dir, &manifest.eval, progress)
}

/// `eval`: full report for a checkpoint, written to `out/report.json`.
pub fn cmd_eval(checkpoint: &Path, plan: &EvalPlan, out: &Path) -> Result<MetricsReport> {
    plan.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let agent = ck.agent::<f32>()?;
    let _lock = DirLock::acquire(out)?;
    let report = evaluate_report(&agent, &ck.config, plan)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// `export-features`: penultimate features of the analysis
/// demonstrations, one file row per step.
pub fn cmd_export_features(checkpoint: &Path, plan: &EvalPlan, out: &Path) -> Result<usize> {
    plan.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    if !matches!(ck.config.env, EnvSpec::CoinGrid { .. }) {
        return Err(Error::config("feature export needs a grid-game checkpoint"));
    }
    let agent = ck.agent::<f32>()?;
    let trajs: Vec<Trajectory<f32>> = analysis_trajectories(&agent, &ck.config, plan)?
        .into_iter()
        .enumerate()
        .flat_map(|(level, group)| {
            group.into_iter().map(move |mut t| {
                if plan.analysis_levels > 1 {
                    t.tag = format!("{}@level{level}", t.tag);
                }
                t
            })
        })
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    export_features(&trajs, out)
}

/// Mean, spread and median of one number across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn new(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len();
        let mean = mean(&per_seed).unwrap_or(f64::NAN);
        let std = if n > 1 {
            (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = per_seed.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            per_seed,
            mean,
            std,
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seeds: Vec<u64>,
    pub seen: Option<Aggregate>,
    pub unseen: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub axis: AblationAxis,
    pub method: crate::trainer::Method,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Plain-text table, one row per grid value.
    pub fn table(&self) -> String {
        let cell = |a: &Option<Aggregate>| {
            a.as_ref()
                .map_or("-".to_string(), |a| format!("{:.3} ± {:.3}", a.mean, a.std))
        };
        let mut out = format!(
            "{:<16} {:>16} {:>16}\n",
            format!("{:?}", self.axis).to_lowercase(),
            "seen",
            "unseen"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>16} {:>16}\n",
                r.value,
                cell(&r.seen),
                cell(&r.unseen)
            ));
        }
        out
    }
}

fn success_by_set<T: Scalar>(
    agent: &Agent<T>,
    train: &TrainConfig,
    plan: &EvalPlan,
    m: usize,
) -> Result<Vec<(EnvSetName, f64)>> {
    nonempty_sets(train, plan)
        .into_iter()
        .map(|(name, set)| {
            let opts = EvalOptions {
                episodes: plan.episodes,
                mc_samples: m,
                fgsm_eps: None,
                seed: plan.seed,
            };
            Ok((name, evaluate(agent, &set, &opts)?.success_rate))
        })
        .collect()
}

fn sweep_row(value: String, seeds: &[u64], results: Vec<Vec<(EnvSetName, f64)>>) -> SweepRow {
    let pick = |name: EnvSetName| {
        let xs: Vec<f64> = results
            .iter()
            .filter_map(|r| r.iter().find(|(n, _)| *n == name).map(|p| p.1))
            .collect();
        (!xs.is_empty()).then(|| Aggregate::new(xs))
    };
    SweepRow {
        value,
        seeds: seeds.to_vec(),
        seen: pick(EnvSetName::Seen),
        unseen: pick(EnvSetName::Unseen),
    }
}

/// Trains `cfg` in `dir`, or reuses a finished checkpoint there that was
/// trained with exactly `cfg`, so an interrupted sweep can be rerun.
pub fn train_or_reuse(cfg: TrainConfig, dir: &Path, plan: &EvalPlan) -> Result<Agent<f32>> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        if let Ok(ck) = Checkpoint::load(&ckpt) {
            if ck.config == cfg && ck.timestep >= cfg.total_timesteps {
                return ck.agent();
            }
        }
    }
    let stats = dir.join(STATS_FILE);
    if stats.exists() {
        fs::remove_file(stats)?;
    }
    let mut t = Trainer::<f32>::new(cfg)?;
    let quiet = EvalPlan {
        interval: 0,
        checkpoint_interval: 0,
        ..plan.clone()
    };
    run_training(&mut t, dir, &quiet, &mut |_| {})?;
    Ok(t.agent)
}

/// `ablate`: trains and evaluates every grid value of `axis` for every
/// seed. The `M` axis is evaluation-only: it reuses `checkpoint` when
/// given, otherwise one training run per seed.
pub fn cmd_ablate(
    manifest: &ExperimentManifest,
    axis: AblationAxis,
    checkpoint: Option<&Path>,
) -> Result<SweepReport> {
    manifest.validate()?;
    let plan = &manifest.eval;
    let grid = &manifest.ablate;
    let dir = &manifest.out_dir;
    let _lock = DirLock::acquire(dir)?;
    let base = &manifest.train;
    let m_default = base.hyper.mc_samples;
    let mut rows = Vec::new();
    let run = |cfg: TrainConfig, tag: String| -> Result<SweepRow> {
        cfg.validate()?;
        let mut results = Vec::new();
        for &seed in &grid.seeds {
            let run_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let agent = train_or_reuse(
                run_cfg.clone(),
                &dir.join(format!("{tag}/seed-{seed}")),
                plan,
            )?;
            results.push(success_by_set(&agent, &run_cfg, plan, m_default)?);
        }
        Ok(sweep_row(tag, &grid.seeds, results))
    };
    match axis {
        AblationAxis::Alpha => {
            for &alpha in &grid.alpha {
                let mut cfg = base.clone();
                cfg.hyper.alpha_clean = alpha;
                rows.push(run(cfg, format!("alpha-{alpha}"))?);
            }
        }
        AblationAxis::Placement => {
            for &p in &grid.placement {
                let cfg = TrainConfig {
                    placement: p,
                    ..base.clone()
                };
                rows.push(run(cfg, p.to_string())?);
            }
        }
        AblationAxis::Mc => {
            let agents: Vec<(u64, Agent<f32>, TrainConfig)> = match checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    vec![(ck.config.seed, ck.agent()?, ck.config)]
                }
                None => grid
                    .seeds
                    .iter()
                    .map(|&seed| {
                        let cfg = TrainConfig {
                            seed,
                            ..base.clone()
                        };
                        let agent = train_or_reuse(
                            cfg.clone(),
                            &dir.join(format!("mc/seed-{seed}")),
                            plan,
                        )?;
                        Ok((seed, agent, cfg))
                    })
                    .collect::<Result<_>>()?,
            };
            let seeds: Vec<u64> = agents.iter().map(|a| a.0).collect();
            for &m in &grid.mc_samples {
                let results = agents
                    .iter()
                    .map(|(_, agent, cfg)| success_by_set(agent, cfg, plan, m))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(sweep_row(m.to_string(), &seeds, results));
            }
        }
    }
    let report = SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        axis,
        method: base.method,
        rows,
    };
    let name = match axis {
        AblationAxis::Alpha => "alpha",
        AblationAxis::Placement => "placement",
        AblationAxis::Mc => "mc",
    };
    write_json(&dir.join(format!("sweep-{name}.json")), &report)?;
    fs::write(dir.join(format!("sweep-{name}.txt")), report.table())?;
    Ok(report)
}
