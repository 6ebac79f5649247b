//! The training loop: randomizer sampling, rollout collection, GAE and
//! the PPO update with the optional feature-matching term.

pub mod augment;
pub mod vecenv;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, Scalar, Tensor, Var};
use crate::policy::{
    choose_actions, ActMode, ActorCritic, Heads, MlpConfig, MlpPolicy, NetConfig, Outputs,
    Placement, PolicyNet,
};
use crate::ppo::{ppo_loss, Hyperparams, LossStats, RolloutBuffer};
use crate::randnet::{self, DiagonalParams, PriorConfig, RandomNetParams};

pub use augment::{augment, AugKind, EpisodeAug};
pub use vecenv::{EnvSlot, EnvSpec, EpisodeEnd, VecEnv};


pub const STATS_SCHEMA: &str = "netrand.stats/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Rand,
    RandFm,
    Cutout,
    Grayout,
    Invert,
    Jitter,
    Domrand,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Vanilla,
        Method::Rand,
        Method::RandFm,
        Method::Cutout,
        Method::Grayout,
        Method::Invert,
        Method::Jitter,
        Method::Domrand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Rand => "rand",
            Method::RandFm => "rand_fm",
            Method::Cutout => "cutout",
            Method::Grayout => "grayout",
            Method::Invert => "invert",
            Method::Jitter => "jitter",
            Method::Domrand => "domrand",
        }
    }

    /// Whether the method samples a random network each iteration.
    pub fn randomizes(self) -> bool {
        matches!(self, Method::Rand | Method::RandFm)
    }

    pub fn aug_kind(self) -> Option<AugKind> {
        match self {
            Method::Cutout => Some(AugKind::Cutout),
            Method::Grayout => Some(AugKind::Grayout),
            Method::Invert => Some(AugKind::Invert),
            Method::Jitter => Some(AugKind::Jitter),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

fn default_placement() -> Placement {
    Placement::First
}

fn default_envs() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Only consulted by methods that randomize.
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default)]
    pub hyper: Hyperparams,
    pub total_timesteps: u64,
    #[serde(default = "default_envs")]
    pub n_envs: usize,
    pub env: EnvSpec,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
    /// Detach the clean branch of the feature-matching loss.
    #[serde(default)]
    pub fm_stop_grad: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.n_envs == 0 {
            return Err(Error::config("n_envs must be at least 1"));
        }
        match &self.env {
            EnvSpec::CoinGrid {
                grid,
                seen_themes,
                unseen_themes,
                n_levels,
            } => {
                grid.validate()?;
                self.net.validate()?;
                if self.net.obs_size != grid.obs_size {
                    return Err(Error::config(format!(
                        "net.obs_size {} differs from env grid.obs_size {}",
                        self.net.obs_size, grid.obs_size
                    )));
                }
                if self.net.n_actions != crate::envs::Action::COUNT {
                    return Err(Error::config("net.n_actions must be 4 for the grid game"));
                }
                if seen_themes.is_empty() {
                    return Err(Error::config("seen_themes must not be empty"));
                }
                for &t in seen_themes.iter().chain(unseen_themes) {
                    if t >= crate::envs::PALETTE_SIZE {
                        return Err(Error::config(format!("theme id {t} out of range")));
                    }
                }
                if let Some(t) = seen_themes.iter().find(|t| unseen_themes.contains(t)) {
                    return Err(Error::config(format!("theme {t} is both seen and unseen")));
                }
                if self.method == Method::Domrand && seen_themes.len() < 2 {
                    return Err(Error::config("domrand needs at least 2 seen themes"));
                }
                if n_levels == &Some(0) {
                    return Err(Error::config("n_levels must be positive"));
                }
                if let Placement::AfterBlock(k) = self.placement {
                    if !(1..=3).contains(&k) {
                        return Err(Error::config(format!(
                            "after_block_{k}: block index must be 1..=3"
                        )));
                    }
                }
            }
            EnvSpec::CartPole { dynamics } => {
                dynamics.validate()?;
                if !matches!(self.method, Method::Vanilla | Method::Rand) {
                    return Err(Error::config(format!(
                        "method {} is not available for cartpole",
                        self.method
                    )));
                }
                if self.mlp.obs_dim != crate::envs::CartPole::OBS_DIM || self.mlp.n_actions != 2 {
                    return Err(Error::config(
                        "mlp must map 4 inputs to 2 actions for cartpole",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Placement in effect: methods that do not randomize run without one.
    pub fn effective_placement(&self) -> Placement {
        if self.method.randomizes() {
            self.placement
        } else {
            Placement::None
        }
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.hyper.rollout_len
    }
}

/// Either of the two network families.
#[derive(Clone, Debug, PartialEq)]
pub enum Net<T> {
    Cnn(PolicyNet<T>),
    Mlp(MlpPolicy<T>),
}

macro_rules! delegate {
    ($self:ident, $n:ident => $e:expr) => {
        match $self {
            Net::Cnn($n) => $e,
            Net::Mlp($n) => $e,
        }
    };
}

impl<T: Scalar> ActorCritic<T> for Net<T> {
    fn n_actions(&self) -> usize {
        delegate!(self, n => n.n_actions())
    }

    fn obs_shape(&self) -> Vec<usize> {
        delegate!(self, n => n.obs_shape())
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        delegate!(self, n => n.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        delegate!(self, n => n.params_mut())
    }

    fn param_names(&self) -> Vec<String> {
        delegate!(self, n => n.param_names())
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        input: Var,
        inner_phi: Option<&RandomNetParams<T>>,
    ) -> Result<Heads> {
        delegate!(self, n => n.forward_graph(g, bound, input, inner_phi))
    }

    fn input_transform(
        &self,
        obs: &Tensor<T>,
        phi: Option<&RandomNetParams<T>>,
    ) -> Result<Tensor<T>> {
        delegate!(self, n => n.input_transform(obs, phi))
    }
}

/// A network together with the method it was trained with, which fixes
/// the prior used at inference and any deterministic input transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent<T> {
    pub net: Net<T>,
    pub method: Method,
    pub prior: PriorConfig,
}

impl<T: Scalar> Agent<T> {
    pub fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let net = match cfg.env {
            EnvSpec::CoinGrid { .. } => Net::Cnn(PolicyNet::new(
                cfg.net.clone(),
                cfg.effective_placement(),
                rng,
            )?),
            EnvSpec::CartPole { .. } => Net::Mlp(MlpPolicy::new(cfg.mlp.clone(), rng)?),
        };
        let channels = match &net {
            Net::Cnn(p) => p.randomizer_channels(),
            Net::Mlp(_) => 3,
        };
        let prior = PriorConfig::with_channels(cfg.hyper.alpha_clean, channels);
        Ok(Self {
            net,
            method: cfg.method,
            prior,
        })
    }

    pub fn placement(&self) -> Placement {
        match &self.net {
            Net::Cnn(p) => p.placement,
            Net::Mlp(_) => Placement::None,
        }
    }

    /// Identity draw at this agent's placement, or `None` when it has no
    /// randomizer.
    pub fn clean_phi(&self) -> Option<RandomNetParams<T>> {
        (self.placement() != Placement::None)
            .then(|| RandomNetParams::identity(self.prior.n_in, self.prior.kernel_size))
    }

    /// Deterministic preprocessing applied at evaluation time as well.
    pub fn eval_transform(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.method != Method::Grayout {
            return Ok(obs.clone());
        }
        let n = obs.shape()[0];
        let rows: Vec<Tensor<T>> = (0..n)
            .map(|i| {
                let one = obs.slice_outer(i, 1)?;
                let s = one.shape()[1..].to_vec();
                augment(&one.reshape(&s)?, &EpisodeAug::Grayout)
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&rows.iter().collect::<Vec<_>>())
    }

    /// Forward pass with the randomizer set to `phi` (identity when `None`).
    pub fn forward(&self, obs: &Tensor<T>, phi: Option<&RandomNetParams<T>>) -> Result<Outputs<T>> {
        let x = self.eval_transform(obs)?;
        let clean = self.clean_phi();
        self.net.forward(&x, phi.or(clean.as_ref()))
    }
}

/// Mean squared Euclidean distance between matching rows.
pub fn fm_loss<T: Scalar>(features_rand: &Tensor<T>, features_clean: &Tensor<T>) -> Result<T> {
    if features_rand.shape() != features_clean.shape() || features_rand.shape().is_empty() {
        return Err(Error::dim(
            "fm_loss",
            features_rand.shape(),
            features_clean.shape(),
        ));
    }
    let n = features_rand.shape()[0].max(1);
    let total: T = features_rand
        .data()
        .iter()
        .zip(features_clean.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / T::lit(n as f64))
}

/// Graph form of [`fm_loss`].
pub fn fm_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    features_rand: Var,
    features_clean: Var,
) -> Result<Var> {
    let d = g.sub(features_rand, features_clean)?;
    let sq = g.square(d)?;
    let rows = g.sum_last(sq)?;
    g.mean(rows)
}

/// Independent random streams split from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    pub train: ChaCha8Rng,
    pub env: ChaCha8Rng,
    pub eval: ChaCha8Rng,
    pub randomizer: ChaCha8Rng,
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Streams {
    pub const INIT: u64 = 0;

    pub fn new(seed: u64) -> Self {
        Self {
            train: stream(seed, 1),
            env: stream(seed, 2),
            eval: stream(seed, 3),
            randomizer: stream(seed, 4),
        }
    }
}

/// One line of the stats log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub schema: String,
    pub iteration: u64,
    pub timestep: u64,
    pub method: Method,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub fm_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub total_loss: f64,
    pub kernel_hash: String,
}

/// What went wrong when an update produced a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NanDump {
    pub iteration: u64,
    pub epoch: usize,
    pub minibatch: usize,
    pub indices: Vec<usize>,
    pub stats: LossStats,
    pub fm_loss: f64,
    pub obs_min: f64,
    pub obs_max: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub non_finite_params: Vec<String>,
}

/// A collected rollout with the randomizer it was gathered under.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    pub buffer: RolloutBuffer<T>,
    pub episodes: Vec<EpisodeEnd>,
    pub kernel_hash: String,
    pub inner_phi: Option<RandomNetParams<T>>,
    pub clean_phi: Option<RandomNetParams<T>>,
}

/// The randomizer in effect for one iteration.
enum Draw<T> {
    None,
    Conv(RandomNetParams<T>),
    Diagonal(DiagonalParams<T>),
}

#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub agent: Agent<T>,
    pub adam: AdamState<T>,
    pub envs: VecEnv,
    pub augs: Vec<EpisodeAug>,
    pub rngs: Streams,
    pub timestep: u64,
    pub iteration: u64,
    pub last_dump: Option<NanDump>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, Streams::INIT);
        let agent = Agent::new(&config, &mut init)?;
        let adam = AdamState::new(agent.net.params(), config.hyper.lr);
        let mut rngs = Streams::new(config.seed);
        let envs = VecEnv::new(config.env.clone(), config.n_envs, &mut rngs.env)?;
        let augs = match config.method.aug_kind() {
            Some(kind) => {
                let size = config.net.obs_size;
                (0..config.n_envs)
                    .map(|_| EpisodeAug::sample(kind, size, &mut rngs.env))
                    .collect()
            }
            None => vec![EpisodeAug::None; config.n_envs],
        };
        Ok(Self {
            config,
            agent,
            adam,
            envs,
            augs,
            rngs,
            timestep: 0,
            iteration: 0,
            last_dump: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.timestep >= self.config.total_timesteps
    }

    fn sample_draw(&mut self) -> Draw<T> {
        if !self.config.method.randomizes() {
            return Draw::None;
        }
        match &self.agent.net {
            Net::Cnn(_) => Draw::Conv(randnet::sample_params_with(
                &self.agent.prior,
                &mut self.rngs.randomizer,
            )),
            Net::Mlp(m) => {
                let d = m.config.obs_dim;
                Draw::Diagonal(DiagonalParams::sample(d, &mut self.rngs.randomizer))
            }
        }
    }

    /// Policy input for a batch of clean observations under `draw`.
    fn policy_input(&self, clean: &Tensor<T>, draw: &Draw<T>) -> Result<Option<Tensor<T>>> {
        if self.config.method.aug_kind().is_some() {
            let rows: Vec<Tensor<T>> = self
                .augs
                .iter()
                .enumerate()
                .map(|(i, aug)| {
                    let one = clean.slice_outer(i, 1)?;
                    let s = one.shape()[1..].to_vec();
                    augment(&one.reshape(&s)?, aug)
                })
                .collect::<Result<_>>()?;
            return Ok(Some(Tensor::stack(&rows.iter().collect::<Vec<_>>())?));
        }
        match draw {
            Draw::None => Ok(None),
            Draw::Diagonal(d) => Ok(Some(d.apply(clean)?)),
            Draw::Conv(phi) => {
                if self.agent.placement().is_input_level() {
                    Ok(Some(self.agent.net.input_transform(clean, Some(phi))?))
                } else {
                    Ok(None)
                }
            }
        }
    }

    /// Samples this iteration's randomizer and collects one rollout
    /// from every environment, acting on the randomized observations.
    pub fn collect_rollout(&mut self) -> Result<Rollout<T>> {
        let draw = self.sample_draw();
        let clean_phi = self.agent.clean_phi();
        let inner_phi: Option<RandomNetParams<T>> = match &draw {
            Draw::Conv(phi) => Some(phi.clone()),
            _ => clean_phi.clone(),
        };
        let kernel_hash = match &draw {
            Draw::Conv(phi) => phi.hash_hex(),
            Draw::Diagonal(d) => d.hash_hex(),
            Draw::None => match &self.agent.net {
                Net::Cnn(_) => RandomNetParams::<T>::identity(
                    self.agent.prior.n_in,
                    self.agent.prior.kernel_size,
                )
                .hash_hex(),
                Net::Mlp(m) => DiagonalParams::<T>::ones(m.config.obs_dim).hash_hex(),
            },
        };
        let separate = self.config.method.aug_kind().is_some()
            || matches!(draw, Draw::Diagonal(_))
            || (matches!(draw, Draw::Conv(_)) && self.agent.placement().is_input_level());

        let n_envs = self.config.n_envs;
        let obs_shape = self.agent.net.obs_shape();
        let mut buffer = RolloutBuffer::new(n_envs, &obs_shape, separate);
        let mut episodes = Vec::new();
        for _ in 0..self.config.hyper.rollout_len {
            let clean = self.envs.observe::<T>()?;
            let input = self.policy_input(&clean, &draw)?;
            let out = self
                .agent
                .net
                .forward_input(input.as_ref().unwrap_or(&clean), inner_phi.as_ref())?;
            let (actions, logp) =
                choose_actions(&out.logits, ActMode::Sample, &mut self.rngs.train)?;
            let results = self.envs.step(&actions, &mut self.rngs.env)?;
            let mut rewards = Vec::with_capacity(n_envs);
            let mut dones = Vec::with_capacity(n_envs);
            for (e, (r, end)) in results.into_iter().enumerate() {
                rewards.push(r.reward);
                dones.push(r.done);
                if let Some(end) = end {
                    episodes.push(end);
                    if let Some(kind) = self.config.method.aug_kind() {
                        self.augs[e] =
                            EpisodeAug::sample(kind, self.config.net.obs_size, &mut self.rngs.env);
                    }
                }
            }
            let values: Vec<f64> = out.value.data().iter().map(|v| v.to_f64_lossy()).collect();
            let logp: Vec<f64> = logp.iter().map(|v| v.to_f64_lossy()).collect();
            buffer.push_step(
                &clean,
                input.as_ref(),
                &actions,
                &rewards,
                &values,
                &logp,
                &dones,
                &kernel_hash,
            )?;
        }
        self.timestep += buffer.len() as u64;

        let clean = self.envs.observe::<T>()?;
        let input = self.policy_input(&clean, &draw)?;
        let last = self
            .agent
            .net
            .forward_input(input.as_ref().unwrap_or(&clean), inner_phi.as_ref())?;
        let bootstrap: Vec<f64> = last.value.data().iter().map(|v| v.to_f64_lossy()).collect();
        buffer.finish(
            &bootstrap,
            self.config.hyper.gamma,
            self.config.hyper.gae_lambda,
        )?;
        Ok(Rollout {
            buffer,
            episodes,
            kernel_hash,
            inner_phi,
            clean_phi,
        })
    }

    /// Runs one collect-then-update cycle.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let rollout = self.collect_rollout()?;
        let (stats, fm) = self.update(
            &rollout.buffer,
            rollout.inner_phi.as_ref(),
            rollout.clean_phi.as_ref(),
        )?;
        self.iteration += 1;
        let ended = &rollout.episodes;
        let episodes = ended.len();
        let mean = |f: &dyn Fn(&EpisodeEnd) -> f64| {
            (episodes > 0).then(|| ended.iter().map(f).sum::<f64>() / episodes as f64)
        };
        Ok(IterationStats {
            schema: STATS_SCHEMA.to_string(),
            iteration: self.iteration,
            timestep: self.timestep,
            method: self.config.method,
            episodes,
            mean_return: mean(&|e| e.ret),
            success_rate: mean(&|e| if e.success { 1.0 } else { 0.0 }),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            fm_loss: fm,
            approx_kl: stats.approx_kl,
            clip_frac: stats.clip_frac,
            total_loss: stats.total,
            kernel_hash: rollout.kernel_hash,
        })
    }

    /// PPO epochs over a finished rollout. Returns averaged loss stats and
    /// the mean feature-matching loss.
    pub fn update(
        &mut self,
        buf: &RolloutBuffer<T>,
        inner_phi: Option<&RandomNetParams<T>>,
        clean_phi: Option<&RandomNetParams<T>>,
    ) -> Result<(LossStats, f64)> {
        let hyper = self.config.hyper.clone();
        let with_fm = self.config.method == Method::RandFm;
        let n = buf.len();
        let mb_size = n / hyper.minibatches;
        if mb_size == 0 {
            return Err(Error::config(format!(
                "{n} samples cannot fill {} minibatches",
                hyper.minibatches
            )));
        }
        let mut sum = LossStats::default();
        let mut fm_sum = 0.0;
        let mut count = 0.0;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..hyper.epochs {
            order.shuffle(&mut self.rngs.train);
            for (k, idx) in order.chunks(mb_size).take(hyper.minibatches).enumerate() {
                let mb = buf.minibatch(idx)?;
                let mut g = Graph::new().verify_finite(false);
                let bound = self.agent.net.bind(&mut g, true);
                let x = g.constant(mb.randomized.clone());
                let heads = self.agent.net.forward_graph(&mut g, &bound, x, inner_phi)?;
                let (mut loss, stats) = ppo_loss(&mut g, heads.logits, heads.value, &mb, &hyper)?;
                let mut fm = 0.0;
                if with_fm {
                    let clean_bound = if self.config.fm_stop_grad {
                        self.agent.net.bind(&mut g, false)
                    } else {
                        bound.clone()
                    };
                    let xc = g.constant(mb.clean.clone());
                    let clean_heads =
                        self.agent
                            .net
                            .forward_graph(&mut g, &clean_bound, xc, clean_phi)?;
                    let f = fm_loss_var(&mut g, heads.features, clean_heads.features)?;
                    fm = g.value(f).item().to_f64_lossy();
                    let weighted = g.scale(f, T::lit(hyper.beta_fm))?;
                    loss = g.add(loss, weighted)?;
                }
                let total = g.value(loss).item();
                if !total.is_finite() {
                    let dump = NanDump {
                        iteration: self.iteration,
                        epoch,
                        minibatch: k,
                        indices: idx.to_vec(),
                        stats,
                        fm_loss: fm,
                        obs_min: mb
                            .randomized
                            .data()
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .fold(f64::INFINITY, f64::min),
                        obs_max: mb
                            .randomized
                            .data()
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .fold(f64::NEG_INFINITY, f64::max),
                        advantages: mb.advantages.clone(),
                        returns: mb.returns.clone(),
                        old_log_probs: mb.old_log_probs.clone(),
                        non_finite_params: self
                            .agent
                            .net
                            .param_names()
                            .into_iter()
                            .zip(self.agent.net.params())
                            .filter(|(_, p)| !p.all_finite())
                            .map(|(name, _)| name)
                            .collect(),
                    };
                    let msg = format!(
                        "non-finite loss at iteration {} epoch {epoch} minibatch {k} (policy {}, value {}, entropy {}, fm {fm})",
                        self.iteration, stats.policy_loss, stats.value_loss, stats.entropy
                    );
                    self.last_dump = Some(dump);
                    return Err(Error::Abort(msg));
                }
                g.backward(loss)?;
                self.agent.net.zero_grads();
                self.agent.net.collect_grads(&g, &bound)?;
                let mut params = self.agent.net.params_mut();
                self.adam.step(&mut params)?;
                sum.policy_loss += stats.policy_loss;
                sum.value_loss += stats.value_loss;
                sum.entropy += stats.entropy;
                sum.approx_kl += stats.approx_kl;
                sum.clip_frac += stats.clip_frac;
                sum.total += total.to_f64_lossy();
                fm_sum += fm;
                count += 1.0;
            }
        }
        let avg = LossStats {
            policy_loss: sum.policy_loss / count,
            value_loss: sum.value_loss / count,
            entropy: sum.entropy / count,
            approx_kl: sum.approx_kl / count,
            clip_frac: sum.clip_frac / count,
            total: sum.total / count,
        };
        Ok((avg, fm_sum / count))
    }

    /// Trains until `total_timesteps`, handing each iteration's stats to
    /// `on_iteration`.
    pub fn run(
        &mut self,
        mut on_iteration: impl FnMut(&Self, &IterationStats) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let stats = self.train_iteration()?;
            on_iteration(self, &stats)?;
        }
        Ok(())
    }
}
