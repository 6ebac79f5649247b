//! Desk-scale quantitative criteria.
//!
//! The reference setup is shrunk so that every agent trains on one CPU
//! core: 32x32 observations, 64-step episodes, 8 environments x 128-step
//! rollouts. Two seen themes, 24 unseen themes. Agents are trained once
//! per (method, placement, seed) and kept on disk, under cargo's target
//! scratch directory or `NETRAND_ZOO_DIR`. A stored agent is reused only
//! if its configuration and budget match exactly.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use netrand::envs::{theme_split, CartPole, CoinGridConfig, DynamicsParams};
use netrand::experiment::{
    cmd_ablate, held_out_dynamics, train_or_reuse, AblationAxis, EnvSetName, EvalPlan,
    ExperimentManifest,
};
use netrand::metrics::{
    activation_entropy, cycle_consistency, demo_observations, eval_level, evaluate, gradcam_map,
    EvalOptions, EvalSet, Trajectory,
};
use netrand::policy::{MlpConfig, NetConfig, Placement};
use netrand::ppo::Hyperparams;
use netrand::trainer::{Agent, EnvSpec, Method, TrainConfig};

use super::Verdict;

pub const SEEDS: [u64; 3] = [1, 2, 3];
const OBS: usize = 32;
const MAX_STEPS: usize = 64;
const GRID_STEPS: u64 = 80 * 1024;
const RAND_STEPS: u64 = 288 * 1024;
const POLE_STEPS: u64 = 1_000_000;
const EPISODES: usize = 240;
const ANALYSIS_LEVELS: usize = 4;

pub fn grid() -> CoinGridConfig {
    CoinGridConfig {
        obs_size: OBS,
        max_steps: MAX_STEPS,
        ..CoinGridConfig::default()
    }
}

fn themes() -> (Vec<u32>, Vec<u32>) {
    theme_split(0, 2, 24).unwrap()
}

pub fn grid_config(method: Method, placement: Placement, seed: u64) -> TrainConfig {
    let (seen, unseen) = themes();
    TrainConfig {
        method,
        placement,
        hyper: Hyperparams {
            rollout_len: 128,
            ..Hyperparams::default()
        },
        total_timesteps: if method.randomizes() {
            RAND_STEPS
        } else {
            GRID_STEPS
        },
        n_envs: 8,
        env: EnvSpec::CoinGrid {
            grid: grid(),
            seen_themes: seen,
            unseen_themes: unseen,
            n_levels: None,
        },
        net: NetConfig {
            obs_size: OBS,
            ..NetConfig::default()
        },
        mlp: MlpConfig::default(),
        fm_stop_grad: false,
        seed,
    }
}

/// Small configuration for the fast structural criteria.
pub fn tiny(method: Method) -> TrainConfig {
    let mut cfg = grid_config(method, Placement::First, 7);
    cfg.hyper.rollout_len = 16;
    cfg.hyper.minibatches = 4;
    cfg.hyper.epochs = 2;
    cfg.n_envs = 2;
    cfg.total_timesteps = 1 << 20;
    if let EnvSpec::CoinGrid { grid, .. } = &mut cfg.env {
        grid.obs_size = 16;
        grid.max_steps = 24;
    }
    cfg.net = NetConfig {
        obs_size: 16,
        channels: [4, 8, 8],
        features: 16,
        ..NetConfig::default()
    };
    cfg
}

fn pole_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        placement: Placement::None,
        hyper: Hyperparams {
            rollout_len: 128,
            ..Hyperparams::default()
        },
        total_timesteps: POLE_STEPS,
        n_envs: 8,
        env: EnvSpec::CartPole {
            dynamics: DynamicsParams::default(),
        },
        net: NetConfig::default(),
        mlp: MlpConfig {
            obs_dim: CartPole::OBS_DIM,
            ..MlpConfig::default()
        },
        fm_stop_grad: false,
        seed,
    }
}

fn zoo_root() -> &'static PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| match std::env::var_os("NETRAND_ZOO_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-zoo"),
    })
}

fn quiet_plan() -> EvalPlan {
    EvalPlan {
        episodes: EPISODES,
        mc_samples: vec![10],
        interval: 0,
        checkpoint_interval: 0,
        ..EvalPlan::default()
    }
}

/// Directory of one trained agent. Grid agents trained with rand_fm live
/// where the placement sweep of criterion 14 expects them.
fn run_dir(cfg: &TrainConfig) -> PathBuf {
    let root = zoo_root();
    match (&cfg.env, cfg.method) {
        (EnvSpec::CoinGrid { .. }, Method::RandFm) => root
            .join("placement")
            .join(cfg.placement.to_string())
            .join(format!("seed-{}", cfg.seed)),
        (EnvSpec::CoinGrid { .. }, m) => root
            .join("grid")
            .join(format!("{}-{}", m.name(), cfg.placement))
            .join(format!("seed-{}", cfg.seed)),
        (EnvSpec::CartPole { .. }, m) => root
            .join("pole")
            .join(m.name())
            .join(format!("seed-{}", cfg.seed)),
    }
}

pub fn trained(cfg: TrainConfig) -> Arc<Agent<f32>> {
    static ZOO: OnceLock<Mutex<BTreeMap<String, Arc<Agent<f32>>>>> = OnceLock::new();
    let key = serde_json::to_string(&cfg).unwrap();
    let zoo = ZOO.get_or_init(Default::default);
    if let Some(a) = zoo.lock().unwrap().get(&key) {
        return a.clone();
    }
    let start = std::time::Instant::now();
    let agent = Arc::new(train_or_reuse(cfg.clone(), &run_dir(&cfg), &quiet_plan()).unwrap());
    eprintln!(
        "  [zoo] {} {} seed {} ready in {:.0}s",
        cfg.method,
        cfg.placement,
        cfg.seed,
        start.elapsed().as_secs_f64()
    );
    zoo.lock().unwrap().insert(key, agent.clone());
    agent
}

fn grid_agent(method: Method, seed: u64) -> Arc<Agent<f32>> {
    let placement = if method.randomizes() {
        Placement::First
    } else {
        Placement::None
    };
    trained(grid_config(method, placement, seed))
}

fn set(themes: Vec<u32>) -> EvalSet {
    EvalSet::CoinGrid {
        grid: grid(),
        themes,
        level_offset: 0,
    }
}

fn success(agent: &Agent<f32>, themes: Vec<u32>, m: usize, fgsm: Option<f64>, seed: u64) -> f64 {
    let opts = EvalOptions {
        episodes: EPISODES,
        mc_samples: m,
        fgsm_eps: fgsm,
        seed,
    };
    100.0 * evaluate(agent, &set(themes), &opts).unwrap().success_rate
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.1}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Unseen success at the default M, per seed, cached per method.
fn unseen_by_seed(method: Method) -> Vec<f64> {
    static CACHE: OnceLock<Mutex<BTreeMap<&'static str, Vec<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().unwrap().get(method.name()) {
        return v.clone();
    }
    let v: Vec<f64> = SEEDS
        .iter()
        .map(|&s| success(&grid_agent(method, s), themes().1, 10, None, 0))
        .collect();
    cache.lock().unwrap().insert(method.name(), v.clone());
    v
}

pub fn criterion_8() -> Verdict {
    let seen: Vec<f64> = SEEDS
        .iter()
        .map(|&s| success(&grid_agent(Method::Vanilla, s), themes().0, 1, None, 0))
        .collect();
    let med = median(seen.clone());
    Verdict::new(
        med >= 95.0,
        format!(
            "vanilla seen success {} %, median {med:.1} after {GRID_STEPS} steps",
            fmt(&seen)
        ),
    )
}

pub fn criterion_9() -> Verdict {
    let v = unseen_by_seed(Method::Vanilla);
    let r = unseen_by_seed(Method::Rand);
    let f = unseen_by_seed(Method::RandFm);
    let (mv, mr, mf) = (median(v.clone()), median(r.clone()), median(f.clone()));
    let gap = mf - mv;
    let rand_ok = (mr >= mv.min(mf) && mr <= mv.max(mf)) || (mr - mf).abs() <= 5.0;
    Verdict::new(
        gap >= 20.0 && rand_ok,
        format!(
            "unseen success medians: vanilla {mv:.1} {}, rand {mr:.1} {}, rand_fm {mf:.1} {}; gap {gap:.1} points",
            fmt(&v),
            fmt(&r),
            fmt(&f)
        ),
    )
}

pub fn criterion_10() -> Verdict {
    const EVALS: u64 = 50;
    const EPS: usize = 48;
    let mut rows = Vec::new();
    for &s in &SEEDS {
        let agent = grid_agent(Method::RandFm, s);
        let runs = |m: usize| -> Vec<f64> {
            (0..EVALS)
                .map(|e| {
                    let opts = EvalOptions {
                        episodes: EPS,
                        mc_samples: m,
                        fgsm_eps: None,
                        seed: 1000 + e,
                    };
                    100.0
                        * evaluate(&agent, &set(themes().1), &opts)
                            .unwrap()
                            .success_rate
                })
                .collect()
        };
        let (one, ten) = (runs(1), runs(10));
        rows.push((std(&one), std(&ten), mean(&one), mean(&ten)));
    }
    let s1 = median(rows.iter().map(|r| r.0).collect());
    let s10 = median(rows.iter().map(|r| r.1).collect());
    let m1 = median(rows.iter().map(|r| r.2).collect());
    let m10 = median(rows.iter().map(|r| r.3).collect());
    Verdict::new(
        s10 <= s1 && m10 >= m1 - 2.0,
        format!("rand_fm unseen over {EVALS} evaluations x {EPS} episodes (median of seeds): M=1 mean {m1:.1} std {s1:.2}; M=10 mean {m10:.1} std {s10:.2}"),
    )
}

fn demo_features(agent: &Agent<f32>, theme: u32, level: usize) -> Vec<Vec<f64>> {
    let lvl = eval_level(&grid(), 1 << 28, level).unwrap();
    Trajectory::new(agent, "", demo_observations(&grid(), &lvl, theme).unwrap())
        .unwrap()
        .features
}

/// Mean 2-way consistency of seen theme 0 against every unseen theme.
fn cycle_score(agent: &Agent<f32>) -> f64 {
    let (seen, unseen) = themes();
    let mut scores = Vec::new();
    for level in 0..ANALYSIS_LEVELS {
        let v = demo_features(agent, seen[0], level);
        for &u in &unseen {
            scores.push(cycle_consistency(&v, &demo_features(agent, u, level)).unwrap());
        }
    }
    mean(&scores)
}

pub fn criterion_11() -> Verdict {
    let v: Vec<f64> = SEEDS
        .iter()
        .map(|&s| cycle_score(&grid_agent(Method::Vanilla, s)))
        .collect();
    let f: Vec<f64> = SEEDS
        .iter()
        .map(|&s| cycle_score(&grid_agent(Method::RandFm, s)))
        .collect();
    let (mv, mf) = (median(v.clone()), median(f.clone()));
    Verdict::new(
        mf > mv,
        format!(
            "2-way cycle-consistency median: vanilla {mv:.1} {}, rand_fm {mf:.1} {}",
            fmt(&v),
            fmt(&f)
        ),
    )
}

fn fgsm_drop(agent: &Agent<f32>) -> (f64, f64, f64) {
    let clean = success(agent, themes().0, 10, None, 0);
    let attacked = success(agent, themes().0, 10, Some(0.01), 0);
    let drop = if clean > 0.0 {
        100.0 * (clean - attacked) / clean
    } else {
        0.0
    };
    (clean, attacked, drop)
}

pub fn criterion_12() -> Verdict {
    let v: Vec<(f64, f64, f64)> = SEEDS
        .iter()
        .map(|&s| fgsm_drop(&grid_agent(Method::Vanilla, s)))
        .collect();
    let f: Vec<(f64, f64, f64)> = SEEDS
        .iter()
        .map(|&s| fgsm_drop(&grid_agent(Method::RandFm, s)))
        .collect();
    let dv = median(v.iter().map(|x| x.2).collect());
    let df = median(f.iter().map(|x| x.2).collect());
    let show = |xs: &[(f64, f64, f64)]| {
        xs.iter()
            .map(|(c, a, d)| format!("{c:.1}->{a:.1} (-{d:.1}%)"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Verdict::new(
        df < dv,
        format!(
            "seen relative drop at eps 0.01, median: vanilla {dv:.1}% [{}], rand_fm {df:.1}% [{}]",
            show(&v),
            show(&f)
        ),
    )
}

fn pole_returns(agent: &Agent<f32>, params: Vec<DynamicsParams>) -> f64 {
    let opts = EvalOptions {
        episodes: 200,
        mc_samples: 1,
        fgsm_eps: None,
        seed: 0,
    };
    evaluate(agent, &EvalSet::CartPole { params }, &opts)
        .unwrap()
        .mean_return
}

pub fn criterion_13() -> Verdict {
    let held_out = held_out_dynamics(&EvalPlan::default());
    let mut rows = Vec::new();
    for &s in &SEEDS {
        let v = trained(pole_config(Method::Vanilla, s));
        let r = trained(pole_config(Method::Rand, s));
        rows.push((
            pole_returns(&v, vec![DynamicsParams::default()]),
            pole_returns(&r, vec![DynamicsParams::default()]),
            pole_returns(&v, held_out.clone()),
            pole_returns(&r, held_out.clone()),
        ));
    }
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| [r.0, r.1, r.2, r.3][i]).collect() };
    let (vs, rs, vh, rh) = (
        median(col(0)),
        median(col(1)),
        median(col(2)),
        median(col(3)),
    );
    let gain = 100.0 * (rh - vh) / vh;
    let seen_diff = 100.0 * (rs - vs).abs() / vs;
    Verdict::new(
        gain >= 15.0 && seen_diff <= 10.0,
        format!(
            "CartPole mean return medians: seen vanilla {vs:.1} / diagonal {rs:.1} ({seen_diff:.1}% apart); held-out vanilla {vh:.1} {} / diagonal {rh:.1} {} ({gain:+.1}%)",
            fmt(&col(2)),
            fmt(&col(3))
        ),
    )
}

pub fn criterion_14() -> Verdict {
    let base = grid_config(Method::RandFm, Placement::First, SEEDS[0]);
    let mut m = ExperimentManifest::new(zoo_root().join("placement"), base);
    m.eval = EvalPlan {
        env_sets: vec![EnvSetName::Unseen],
        ..quiet_plan()
    };
    m.ablate.seeds = SEEDS.to_vec();
    m.ablate.placement = vec![Placement::First, Placement::AfterBlock(2)];
    let report = cmd_ablate(&m, AblationAxis::Placement, None).unwrap();
    let table = report.table();
    let medians: Vec<f64> = report
        .rows
        .iter()
        .map(|r| r.unseen.as_ref().unwrap().median)
        .collect();
    let ordered = report
        .rows
        .iter()
        .map(|r| r.value.as_str())
        .collect::<Vec<_>>()
        == ["first", "after_block_2"];
    let written = zoo_root().join("placement/sweep-placement.txt").exists();
    Verdict::new(
        ordered && written && medians[0] >= medians[1],
        format!(
            "unseen success median: first {:.1}, after_block_2 {:.1}; table:\n{}",
            100.0 * medians[0],
            100.0 * medians[1],
            table.trim_end()
        ),
    )
}

/// Mean entropy over demonstrations of the given themes.
fn entropy(agent: &Agent<f32>, themes: &[u32]) -> f64 {
    let mut vals = Vec::new();
    for level in 0..ANALYSIS_LEVELS {
        let lvl = eval_level(&grid(), 1 << 28, level).unwrap();
        for &t in themes {
            let maps: Vec<_> = demo_observations::<f32>(&grid(), &lvl, t)
                .unwrap()
                .iter()
                .map(|o| gradcam_map(agent, o).unwrap())
                .collect();
            vals.push(activation_entropy(&maps).unwrap());
        }
    }
    mean(&vals)
}

pub fn criterion_15() -> Verdict {
    let (seen, unseen) = themes();
    let rise = |method: Method| -> (f64, f64, f64) {
        let per_seed: Vec<(f64, f64)> = SEEDS
            .iter()
            .map(|&s| {
                let a = grid_agent(method, s);
                (entropy(&a, &seen), entropy(&a, &unseen))
            })
            .collect();
        let s = median(per_seed.iter().map(|p| p.0).collect());
        let u = median(per_seed.iter().map(|p| p.1).collect());
        let d = median(per_seed.iter().map(|p| p.1 - p.0).collect());
        (s, u, d)
    };
    let (vs, vu, vd) = rise(Method::Vanilla);
    let (fs, fu, fd) = rise(Method::RandFm);
    Verdict::new(
        fd < vd,
        format!("entropy seen/unseen (median): vanilla {vs:.3}/{vu:.3} (rise {vd:+.3}), rand_fm {fs:.3}/{fu:.3} (rise {fd:+.3})"),
    )
}
