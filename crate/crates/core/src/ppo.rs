//! Advantage estimation, the rollout buffer and the clipped PPO objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub beta_fm: f64,
    pub alpha_clean: f64,
    pub mc_samples: usize,
    pub fgsm_eps: f64,
    /// Steps collected per environment per iteration.
    pub rollout_len: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 3,
            minibatches: 8,
            lr: 0.0005,
            beta_fm: 0.002,
            alpha_clean: 0.1,
            mc_samples: 10,
            fgsm_eps: 0.01,
            rollout_len: 256,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "{name} = {v} must be finite and non-negative"
                )))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        unit("alpha_clean", self.alpha_clean)?;
        nonneg("entropy_coef", self.entropy_coef)?;
        nonneg("value_coef", self.value_coef)?;
        nonneg("beta_fm", self.beta_fm)?;
        nonneg("fgsm_eps", self.fgsm_eps)?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!(
                "clip_eps = {} must lie in (0, 1)",
                self.clip_eps
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr = {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("mc_samples", self.mc_samples),
            ("rollout_len", self.rollout_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// GAE for one environment row. `dones[t]` marks that the episode ended
/// on step `t`, so nothing past it is bootstrapped.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::dim(
            "compute_gae",
            &[n],
            &[values.len(), dones.len()],
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit (population) std.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// Read-only view of one stored step.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a, T> {
    pub clean: &'a [T],
    pub randomized: &'a [T],
    pub action: usize,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
}

/// Step-major storage: entry `t * n_envs + e` is env `e` at step `t`.
#[derive(Clone, Debug)]
pub struct RolloutBuffer<T> {
    n_envs: usize,
    obs_shape: Vec<usize>,
    obs_len: usize,
    clean: Vec<T>,
    /// `None` when the policy input equals the clean observation.
    randomized: Option<Vec<T>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    log_probs: Vec<f64>,
    dones: Vec<bool>,
    kernel_hashes: Vec<String>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    finished: bool,
}

/// Tensors and targets for one optimization step.
#[derive(Clone, Debug)]
pub struct Minibatch<T> {
    pub clean: Tensor<T>,
    pub randomized: Tensor<T>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(n_envs: usize, obs_shape: &[usize], separate_randomized: bool) -> Self {
        Self {
            n_envs,
            obs_shape: obs_shape.to_vec(),
            obs_len: obs_shape.iter().product(),
            clean: Vec::new(),
            randomized: separate_randomized.then(Vec::new),
            actions: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            log_probs: Vec::new(),
            dones: Vec::new(),
            kernel_hashes: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            finished: false,
        }
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len() / self.n_envs.max(1)
    }

    pub fn kernel_hashes(&self) -> &[String] {
        &self.kernel_hashes
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    /// Appends one step for every environment. `clean` and `randomized`
    /// are `(n_envs, obs...)` batches.
    #[allow(clippy::too_many_arguments)]
    pub fn push_step(
        &mut self,
        clean: &Tensor<T>,
        randomized: Option<&Tensor<T>>,
        actions: &[usize],
        rewards: &[f64],
        values: &[f64],
        log_probs: &[f64],
        dones: &[bool],
        kernel_hash: &str,
    ) -> Result<()> {
        if self.finished {
            return Err(Error::contract("push_step after finish"));
        }
        let mut want = vec![self.n_envs];
        want.extend(&self.obs_shape);
        if clean.shape() != want {
            return Err(Error::dim("push_step observations", clean.shape(), &want));
        }
        let lens = [
            actions.len(),
            rewards.len(),
            values.len(),
            log_probs.len(),
            dones.len(),
        ];
        if lens.iter().any(|&l| l != self.n_envs) {
            return Err(Error::dim(
                "push_step per-env arrays",
                &lens,
                &[self.n_envs],
            ));
        }
        match (&mut self.randomized, randomized) {
            (Some(store), Some(r)) => {
                if r.shape() != want {
                    return Err(Error::dim("push_step randomized", r.shape(), &want));
                }
                store.extend_from_slice(r.data());
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::contract("buffer expects randomized observations"))
            }
            (None, Some(_)) => {
                return Err(Error::contract("buffer stores clean observations only"))
            }
        }
        self.clean.extend_from_slice(clean.data());
        self.actions.extend_from_slice(actions);
        self.rewards.extend_from_slice(rewards);
        self.values.extend_from_slice(values);
        self.log_probs.extend_from_slice(log_probs);
        self.dones.extend_from_slice(dones);
        self.kernel_hashes.push(kernel_hash.to_string());
        Ok(())
    }

    pub fn get(&self, i: usize) -> Transition<'_, T> {
        let span = i * self.obs_len..(i + 1) * self.obs_len;
        Transition {
            clean: &self.clean[span.clone()],
            randomized: self
                .randomized
                .as_ref()
                .map_or(&self.clean[span.clone()], |r| &r[span]),
            action: self.actions[i],
            reward: self.rewards[i],
            value: self.values[i],
            log_prob: self.log_probs[i],
            done: self.dones[i],
        }
    }

    /// Runs GAE per environment row and normalizes advantages over the
    /// whole rollout.
    pub fn finish(&mut self, bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        if bootstrap.len() != self.n_envs {
            return Err(Error::dim(
                "finish bootstrap",
                &[bootstrap.len()],
                &[self.n_envs],
            ));
        }
        let steps = self.steps();
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for (e, &boot) in bootstrap.iter().enumerate() {
            let col = |v: &[f64]| {
                (0..steps)
                    .map(|t| v[t * self.n_envs + e])
                    .collect::<Vec<_>>()
            };
            let dones: Vec<bool> = (0..steps)
                .map(|t| self.dones[t * self.n_envs + e])
                .collect();
            let (adv, ret) = compute_gae(
                &col(&self.rewards),
                &col(&self.values),
                &dones,
                boot,
                gamma,
                lambda,
            )?;
            for t in 0..steps {
                self.advantages[t * self.n_envs + e] = adv[t];
                self.returns[t * self.n_envs + e] = ret[t];
            }
        }
        normalize_advantages(&mut self.advantages);
        self.finished = true;
        Ok(())
    }

    pub fn minibatch(&self, indices: &[usize]) -> Result<Minibatch<T>> {
        if !self.finished {
            return Err(Error::contract(
                "minibatch requested before advantages were computed",
            ));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.obs_shape);
        let gather = |src: &[T]| {
            let mut out = Vec::with_capacity(indices.len() * self.obs_len);
            for &i in indices {
                out.extend_from_slice(&src[i * self.obs_len..(i + 1) * self.obs_len]);
            }
            Tensor::new(&shape, out)
        };
        let clean = gather(&self.clean)?;
        let randomized = match &self.randomized {
            Some(r) => gather(r)?,
            None => clean.clone(),
        };
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Minibatch {
            clean,
            randomized,
            actions: indices.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: pick(&self.log_probs),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub total: f64,
}

fn vec_const<T: Scalar>(g: &mut Graph<T>, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(
        &[v.len()],
        v.iter().map(|&x| T::lit(x)).collect(),
    )?))
}

/// Records the clipped surrogate, value and entropy terms on `g`.
/// `logits` is `(N, A)` and `values` is `(N, 1)` or `(N,)`.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    values: Var,
    mb: &Minibatch<T>,
    hyper: &Hyperparams,
) -> Result<(Var, LossStats)> {
    let n = mb.actions.len();
    let ls = g.try_value(logits)?.shape().to_vec();
    if ls.len() != 2 || ls[0] != n {
        return Err(Error::dim("ppo_loss logits", &ls, &[n]));
    }
    let logp_all = g.log_softmax(logits)?;
    let logp = g.gather_cols(logp_all, &mb.actions)?;
    let old = vec_const(g, &mb.old_log_probs)?;
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff)?;
    let adv = vec_const(g, &mb.advantages)?;
    let s1 = g.mul(ratio, adv)?;
    let eps = T::lit(hyper.clip_eps);
    let clipped = g.clamp(ratio, T::one() - eps, T::one() + eps)?;
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr_mean = g.mean(surr)?;
    let policy_loss = g.scale(surr_mean, -T::one())?;

    let v = g.reshape(values, &[n])?;
    let ret = vec_const(g, &mb.returns)?;
    let verr = g.sub(v, ret)?;
    let sq = g.square(verr)?;
    let value_loss = g.mean(sq)?;

    let probs = g.softmax(logits)?;
    let plogp = g.mul(probs, logp_all)?;
    let neg_ent = g.sum_last(plogp)?;
    let neg_ent_mean = g.mean(neg_ent)?;

    let vl = g.scale(value_loss, T::lit(hyper.value_coef))?;
    let el = g.scale(neg_ent_mean, T::lit(hyper.entropy_coef))?;
    let partial = g.add(policy_loss, vl)?;
    let total = g.add(partial, el)?;

    let ratios = g.value(ratio).data();
    let clip_frac = ratios
        .iter()
        .filter(|r| (r.to_f64_lossy() - 1.0).abs() > hyper.clip_eps)
        .count() as f64
        / n.max(1) as f64;
    let approx_kl = g
        .value(diff)
        .data()
        .iter()
        .map(|d| -d.to_f64_lossy())
        .sum::<f64>()
        / n.max(1) as f64;
    let stats = LossStats {
        policy_loss: g.value(policy_loss).item().to_f64_lossy(),
        value_loss: g.value(value_loss).item().to_f64_lossy(),
        entropy: -g.value(neg_ent_mean).item().to_f64_lossy(),
        approx_kl,
        clip_frac,
        total: g.value(total).item().to_f64_lossy(),
    };
    Ok((total, stats))
}
