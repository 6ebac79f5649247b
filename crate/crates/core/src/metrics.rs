//! Monte Carlo action selection and the evaluation suite: success rates,
//! cycle-consistency, activation-map entropy, gradient-weighted maps,
//! FGSM perturbations and feature export.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    theme::ThemeSpec, CartPole, CoinGrid, CoinGridConfig, DynamicsParams, LevelSpec,
};
use crate::error::{Error, Result};
use crate::nn::{ops, Graph, Scalar, Tensor};
use crate::policy::{argmax, ActorCritic, Placement};
use crate::randnet::{self, PriorConfig};
use crate::trainer::vecenv::{EnvSlot, EVAL_SEED_BASE};
use crate::trainer::{stream, Agent, EpisodeEnd, Method};

pub const REPORT_SCHEMA: &str = "netrand.report/1";
pub const FEATURES_SCHEMA: &str = "netrand.features/1";

/// Averages the softmax output over `m` independent draws from `prior`.
/// Returns an `(N, A)` probability tensor.
pub fn mc_policy<T: Scalar, R: Rng + ?Sized>(
    agent: &Agent<T>,
    obs: &Tensor<T>,
    prior: &PriorConfig,
    m: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if m == 0 {
        return Err(Error::contract("mc_policy needs at least one sample"));
    }
    if agent.placement() == Placement::None {
        // no randomizer: every sample would be the same clean pass
        return ops::softmax(&agent.forward(obs, None)?.logits);
    }
    let draws = (0..m)
        .map(|_| {
            let phi = randnet::sample_params_with::<T, _>(prior, rng);
            ops::softmax(&agent.forward(obs, Some(&phi))?.logits)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_distribution(&draws)
}

/// Elementwise mean of equally shaped probability tensors.
pub fn mean_distribution<T: Scalar>(dists: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::contract("no distributions to average"))?;
    let mut acc = first.clone();
    for d in &dists[1..] {
        if d.shape() != acc.shape() {
            return Err(Error::dim("mean_distribution", d.shape(), acc.shape()));
        }
        acc.data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(x, &y)| *x += y);
    }
    let inv = T::one() / T::lit(dists.len() as f64);
    Ok(acc.map(|v| v * inv))
}

/// Row-wise argmax with ties to the lowest index.
pub fn greedy_actions<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let k = *probs.shape().last().expect("rank >= 1");
    probs.data().chunks(k).map(argmax).collect()
}

/// A reproducible set of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalSet {
    /// Episode `i` plays evaluation level `i` in theme `themes[i % len]`.
    CoinGrid {
        grid: CoinGridConfig,
        themes: Vec<u32>,
        #[serde(default)]
        level_offset: u64,
    },
    CartPole {
        params: Vec<DynamicsParams>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub mc_samples: usize,
    /// Perturb every observation with FGSM before acting.
    pub fgsm_eps: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: Vec<EpisodeEnd>,
}

pub fn eval_level(grid: &CoinGridConfig, offset: u64, i: usize) -> Result<LevelSpec> {
    LevelSpec::generate_solvable(EVAL_SEED_BASE + offset + (i as u64) * 10_007, grid)
}

fn episode_slot(set: &EvalSet, i: usize, seed: u64) -> Result<EnvSlot> {
    match set {
        EvalSet::CoinGrid {
            grid,
            themes,
            level_offset,
        } => {
            if themes.is_empty() {
                return Err(Error::config("evaluation theme list is empty"));
            }
            let level = eval_level(grid, *level_offset, i)?;
            let theme = ThemeSpec::generate(themes[i % themes.len()]);
            Ok(EnvSlot::Grid(CoinGrid::reset(grid, level, theme)?))
        }
        EvalSet::CartPole { params } => {
            if params.is_empty() {
                return Err(Error::config("evaluation dynamics list is empty"));
            }
            let mut rng = stream(seed, 1000 + i as u64);
            Ok(EnvSlot::Pole(CartPole::reset(
                params[i % params.len()],
                &mut rng,
            )))
        }
    }
}

/// Plays `opts.episodes` episodes with greedy MC actions.
pub fn evaluate<T: Scalar>(
    agent: &Agent<T>,
    set: &EvalSet,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let mut rng = stream(opts.seed, 7);
    run_episodes::<T>(set, opts.episodes, opts.seed, &mut |_, obs| {
        let obs = match opts.fgsm_eps {
            Some(eps) => fgsm_attack(agent, &obs, eps)?,
            None => obs,
        };
        let probs = mc_policy(agent, &obs, &agent.prior, opts.mc_samples, &mut rng)?;
        Ok(greedy_actions(&probs))
    })
}

/// Plays the episodes of `set` in lockstep batches, asking `choose` for
/// one action per live environment.
pub fn run_episodes<T: Scalar>(
    set: &EvalSet,
    episodes: usize,
    seed: u64,
    choose: &mut dyn FnMut(&[&EnvSlot], Tensor<T>) -> Result<Vec<usize>>,
) -> Result<EvalResult> {
    const BATCH: usize = 32;
    let mut results = Vec::with_capacity(episodes);
    let mut next = 0;
    while next < episodes {
        let n = BATCH.min(episodes - next);
        let mut slots: Vec<EnvSlot> = (next..next + n)
            .map(|i| episode_slot(set, i, seed))
            .collect::<Result<_>>()?;
        let mut ret = vec![0.0; n];
        let mut len = vec![0usize; n];
        let mut done: Vec<Option<EpisodeEnd>> = vec![None; n];
        loop {
            let live: Vec<usize> = (0..n).filter(|&e| done[e].is_none()).collect();
            if live.is_empty() {
                break;
            }
            let obs: Vec<Tensor<T>> = live.iter().map(|&e| slots[e].observe()).collect();
            let batch = Tensor::stack(&obs.iter().collect::<Vec<_>>())?;
            let views: Vec<&EnvSlot> = live.iter().map(|&e| &slots[e]).collect();
            let actions = choose(&views, batch)?;
            if actions.len() != live.len() {
                return Err(Error::dim(
                    "run_episodes actions",
                    &[actions.len()],
                    &[live.len()],
                ));
            }
            for (&e, a) in live.iter().zip(actions) {
                let r = slots[e].step(a)?;
                ret[e] += r.reward;
                len[e] += 1;
                if r.done {
                    done[e] = Some(EpisodeEnd {
                        ret: ret[e],
                        len: len[e],
                        success: r.info.success,
                    });
                }
            }
        }
        results.extend(done.into_iter().map(|d| d.expect("finished")));
        next += n;
    }
    let k = results.len().max(1) as f64;
    Ok(EvalResult {
        success_rate: results.iter().filter(|e| e.success).count() as f64 / k,
        mean_return: results.iter().map(|e| e.ret).sum::<f64>() / k,
        episodes: results,
    })
}

/// Observations along the shortest solution of one level, one per
/// decision point.
pub fn demo_observations<T: Scalar>(
    grid: &CoinGridConfig,
    level: &LevelSpec,
    theme: u32,
) -> Result<Vec<Tensor<T>>> {
    let path = level
        .shortest_path()
        .ok_or_else(|| Error::Generation(format!("level {} has no solution", level.level_seed)))?;
    let mut env = CoinGrid::reset(grid, level.clone(), ThemeSpec::generate(theme))?;
    let mut out = Vec::with_capacity(path.len());
    for a in path {
        out.push(env.observe());
        env.step(a)?;
    }
    Ok(out)
}

/// Observations visited by the agent's own clean greedy policy.
pub fn policy_observations<T: Scalar>(
    agent: &Agent<T>,
    grid: &CoinGridConfig,
    level: &LevelSpec,
    theme: u32,
) -> Result<Vec<Tensor<T>>> {
    let mut env = CoinGrid::reset(grid, level.clone(), ThemeSpec::generate(theme))?;
    let mut out = Vec::new();
    while !env.is_done() {
        let obs: Tensor<T> = env.observe();
        let s = obs.shape().to_vec();
        let batch = obs.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let a = argmax(agent.forward(&batch, None)?.logits.data());
        out.push(obs);
        env.step(crate::envs::Action::from_index(a)?)?;
    }
    Ok(out)
}

/// Observations paired with their penultimate features under a clean pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub tag: String,
    pub observations: Vec<Tensor<T>>,
    pub features: Vec<Vec<f64>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(agent: &Agent<T>, tag: &str, observations: Vec<Tensor<T>>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::contract("trajectory has no observations"));
        }
        let batch = Tensor::stack(&observations.iter().collect::<Vec<_>>())?;
        let f = agent.forward(&batch, None)?.features;
        let d = f.shape()[1];
        let features = f
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        Ok(Self {
            tag: tag.to_string(),
            observations,
            features,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest point in `pool`, ties to the lowest index.
pub fn nearest(point: &[f64], pool: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, p) in pool.iter().enumerate() {
        let d = sq_dist(point, p);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn check_nonempty(sets: &[&[Vec<f64>]]) -> Result<()> {
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::contract(
            "cycle-consistency needs non-empty trajectories",
        ));
    }
    Ok(())
}

fn returns_home(v: &[Vec<f64>], hops: &[&[Vec<f64>]], i: usize) -> bool {
    let mut cur = &v[i];
    for pool in hops {
        cur = &pool[nearest(cur, pool)];
    }
    let k = nearest(cur, v);
    k.abs_diff(i) <= 1
}

/// Percentage of points of `v` that come back within one index after
/// hopping to their nearest neighbour in `u` and back.
pub fn cycle_consistency(v: &[Vec<f64>], u: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(&[v, u])?;
    let ok = (0..v.len()).filter(|&i| returns_home(v, &[u], i)).count();
    Ok(100.0 * ok as f64 / v.len() as f64)
}

/// Percentage of points of `v` that return within one index after
/// hopping through each trajectory of `hops` in order and back to `v`.
pub fn cycle_consistency_path(v: &[Vec<f64>], hops: &[&[Vec<f64>]]) -> Result<f64> {
    check_nonempty(&[v])?;
    check_nonempty(hops)?;
    let ok = (0..v.len()).filter(|&i| returns_home(v, hops, i)).count();
    Ok(100.0 * ok as f64 / v.len() as f64)
}

/// Like [`cycle_consistency`], but a point must return along both
/// `v → u → j → v` and `v → j → u → v`.
pub fn cycle_consistency_3way(v: &[Vec<f64>], u: &[Vec<f64>], j: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(&[v, u, j])?;
    let ok = (0..v.len())
        .filter(|&i| returns_home(v, &[u, j], i) && returns_home(v, &[j, u], i))
        .count();
    Ok(100.0 * ok as f64 / v.len() as f64)
}

/// A non-negative map over the last convolutional grid summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ActivationMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w || data.is_empty() {
            return Err(Error::dim("activation map", &[data.len()], &[h, w]));
        }
        let sum: f64 = data.iter().sum();
        if data.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!(
                "activation map is not normalized (sum {sum})"
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        let n = h * w;
        Self {
            h,
            w,
            data: vec![1.0 / n as f64; n],
        }
    }

    /// Normalizes non-negative weights; an all-zero map becomes uniform.
    pub fn from_weights(h: usize, w: usize, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            Self::new(h, w, weights.into_iter().map(|v| v / sum).collect())
        } else {
            Ok(Self::uniform(h, w))
        }
    }

    pub fn entropy(&self) -> f64 {
        -self
            .data
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| s * s.ln())
            .sum::<f64>()
    }
}

/// Natural-log entropy averaged over the maps of a trajectory.
pub fn activation_entropy(maps: &[ActivationMap]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::contract("no activation maps"));
    }
    for m in maps {
        ActivationMap::new(m.h, m.w, m.data.clone())?;
    }
    Ok(maps.iter().map(ActivationMap::entropy).sum::<f64>() / maps.len() as f64)
}

/// Gradient-weighted activation map of the greedy action for one
/// `(C, H, W)` observation under a clean pass.
pub fn gradcam_map<T: Scalar>(agent: &Agent<T>, obs: &Tensor<T>) -> Result<ActivationMap> {
    let s = obs.shape().to_vec();
    let batch = if s.len() == 3 {
        obs.clone().reshape(&[1, s[0], s[1], s[2]])?
    } else {
        obs.clone()
    };
    if batch.shape()[0] != 1 {
        return Err(Error::dim("gradcam_map", batch.shape(), &[1]));
    }
    let x_in = agent.eval_transform(&batch)?;
    let clean = agent.clean_phi();
    let mut g = Graph::new().verify_finite(false);
    let bound = agent.net.bind(&mut g, true);
    let x = g.constant(x_in);
    let heads = agent.net.forward_graph(&mut g, &bound, x, clean.as_ref())?;
    let last = heads
        .last_conv
        .ok_or_else(|| Error::contract("network has no convolutional layer"))?;
    let a = argmax(g.value(heads.logits).data());
    let chosen = g.gather_cols(heads.logits, &[a])?;
    let loss = g.sum(chosen)?;
    g.backward(loss)?;
    let act = g.value(last).clone();
    let grad = g.grad(last).unwrap_or_else(|| Tensor::zeros(act.shape()));
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = h * w;
    let weights = (0..plane)
        .map(|p| {
            let m: f64 = (0..c)
                .map(|ch| {
                    grad.data()[ch * plane + p].to_f64_lossy()
                        * act.data()[ch * plane + p].to_f64_lossy()
                })
                .sum::<f64>()
                / c as f64;
            m.max(0.0)
        })
        .collect();
    ActivationMap::from_weights(h, w, weights)
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `clamp(s − ε·sign(∇_s log π(a*|s)), 0, 1)` with `a*` the clean greedy
/// action, row by row over an `(N, ...)` batch.
pub fn fgsm_attack<T: Scalar>(agent: &Agent<T>, obs: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps == 0.0 {
        return Ok(obs.clone());
    }
    let x_in = agent.eval_transform(obs)?;
    let clean = agent.clean_phi();
    let mut g = Graph::new().verify_finite(false);
    let bound = agent.net.bind(&mut g, false);
    let x = g.leaf(x_in, true);
    let heads = agent.net.forward_graph(&mut g, &bound, x, clean.as_ref())?;
    let a_star = greedy_actions(g.value(heads.logits));
    let logp = g.log_softmax(heads.logits)?;
    let chosen = g.gather_cols(logp, &a_star)?;
    let total = g.sum(chosen)?;
    g.backward(total)?;
    let mut grad = g.grad(x).unwrap_or_else(|| Tensor::zeros(obs.shape()));
    if agent.method == Method::Grayout {
        // chain rule through the channel mean
        let s = obs.shape();
        let plane: usize = s[2..].iter().product();
        let per = s[1] * plane;
        let d = grad.data_mut();
        for base in (0..d.len()).step_by(per) {
            for p in 0..plane {
                let m = (0..s[1]).map(|c| d[base + c * plane + p]).sum::<T>() / T::lit(s[1] as f64);
                for c in 0..s[1] {
                    d[base + c * plane + p] = m;
                }
            }
        }
    }
    let e = T::lit(eps);
    let data = obs
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &gr)| {
            let v = s - e * sign(gr);
            v.max(T::zero()).min(T::one())
        })
        .collect();
    Tensor::new(obs.shape(), data)
}

/// Writes one comma-separated row per trajectory step: `env_tag,
/// timestep, f0 .. f{d-1}` after a header row. Values are 32-bit floats
/// with nine significant digits, so they parse back exactly. A sibling
/// `<path>.meta.json` records the schema.
pub fn export_features<T: Scalar>(trajectories: &[Trajectory<T>], path: &Path) -> Result<usize> {
    let dim = trajectories
        .first()
        .and_then(|t| t.features.first())
        .map_or(0, Vec::len);
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut header = vec!["env_tag".to_string(), "timestep".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    writeln!(out, "{}", header.join(","))?;
    let mut rows = 0;
    for t in trajectories {
        if t.tag.contains(',') || t.tag.contains('\n') {
            return Err(Error::contract(format!(
                "env tag {:?} contains a delimiter",
                t.tag
            )));
        }
        for (step, f) in t.features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::dim("export_features", &[f.len()], &[dim]));
            }
            write!(out, "{},{step}", t.tag)?;
            for &v in f {
                write!(out, ",{:.8e}", v as f32)?;
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    out.flush()?;
    let meta = serde_json::json!({
        "schema": FEATURES_SCHEMA,
        "delimiter": ",",
        "columns": header.len(),
        "feature_dim": dim,
        "rows": rows,
        "value_type": "f32",
    });
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta.json");
    fs::write(meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(rows)
}

/// One parsed row of an exported feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub env_tag: String,
    pub timestep: usize,
    pub features: Vec<f32>,
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (n, line) in file.lines().enumerate().skip(1) {
        let line = line?;
        let bad = |what: &str| Error::Serde(format!("{}: line {}: {what}", path.display(), n + 1));
        let mut parts = line.split(',');
        let env_tag = parts
            .next()
            .ok_or_else(|| bad("missing env tag"))?
            .to_string();
        let timestep = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad timestep"))?;
        let features = parts
            .map(|s| s.parse::<f32>().map_err(|_| bad("bad feature value")))
            .collect::<Result<_>>()?;
        rows.push(FeatureRow {
            env_tag,
            timestep,
            features,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub env_set: String,
    pub mc_samples: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgsmRow {
    pub env_set: String,
    pub eps: f64,
    pub clean: f64,
    pub attacked: f64,
    /// `100 · (clean − attacked) / clean`; zero when `clean` is zero.
    pub relative_drop: f64,
}

impl FgsmRow {
    pub fn new(env_set: &str, eps: f64, clean: f64, attacked: f64) -> Self {
        let relative_drop = if clean > 0.0 {
            100.0 * (clean - attacked) / clean
        } else {
            0.0
        };
        Self {
            env_set: env_set.to_string(),
            eps,
            clean,
            attacked,
            relative_drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub method: Method,
    pub eval_seed: u64,
    pub success: Vec<SuccessRow>,
    #[serde(default)]
    pub fgsm: Vec<FgsmRow>,
    #[serde(default)]
    pub cycle_2way: Option<f64>,
    #[serde(default)]
    pub cycle_3way: Option<f64>,
    #[serde(default)]
    pub entropy_seen: Option<f64>,
    #[serde(default)]
    pub entropy_unseen: Option<f64>,
}

impl MetricsReport {
    pub fn new(method: Method, eval_seed: u64) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            method,
            eval_seed,
            success: Vec::new(),
            fgsm: Vec::new(),
            cycle_2way: None,
            cycle_3way: None,
            entropy_seen: None,
            entropy_unseen: None,
        }
    }
}
