//! Actor-critic networks.
//!
//! [`PolicyNet`] is a three-block convolutional trunk followed by a dense
//! feature layer `h(·)` and separate policy/value heads. The randomizer
//! can be inserted at the input, after an interior block, or as a
//! residual branch on the input. [`MlpPolicy`] is the small tanh MLP used
//! for low-dimensional state inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, Graph, LayerParams, Scalar, Tensor, Var};
use crate::randnet::{self, RandomNetParams};

/// Where the randomizer sits in the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Placement {
    None,
    First,
    /// After the given conv block (1-based).
    AfterBlock(usize),
    /// `x + f(x; φ)` on the input.
    Residual,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::None => write!(f, "none"),
            Placement::First => write!(f, "first"),
            Placement::AfterBlock(k) => write!(f, "after_block_{k}"),
            Placement::Residual => write!(f, "residual"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Placement::None),
            "first" => Ok(Placement::First),
            "residual" => Ok(Placement::Residual),
            _ => s
                .strip_prefix("after_block_")
                .and_then(|k| k.parse().ok())
                .map(Placement::AfterBlock)
                .ok_or_else(|| Error::config(format!("unknown placement `{s}`"))),
        }
    }
}

impl TryFrom<String> for Placement {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Placement> for String {
    fn from(p: Placement) -> String {
        p.to_string()
    }
}

impl Placement {
    /// Whether the randomizer acts on the raw observation only, so its
    /// output can be precomputed outside the graph.
    pub fn is_input_level(self) -> bool {
        matches!(self, Placement::First | Placement::Residual)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub obs_size: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub features: usize,
    pub n_actions: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            obs_size: 48,
            channels: [16, 32, 32],
            kernel: 3,
            features: 256,
            n_actions: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.obs_size.is_multiple_of(8) || self.obs_size == 0 {
            return Err(Error::config(format!(
                "obs_size {} must be a positive multiple of 8",
                self.obs_size
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("trunk kernel size must be odd"));
        }
        if self.channels.contains(&0)
            || self.features == 0
            || self.n_actions == 0
            || self.in_channels == 0
        {
            return Err(Error::config("network widths must be positive"));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let s = self.obs_size / 8;
        self.channels[2] * s * s
    }
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub logits: Var,
    pub value: Var,
    pub features: Var,
    /// Post-activation output of the last convolution (before pooling).
    pub last_conv: Option<Var>,
}

/// Plain tensors produced by an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs<T> {
    pub logits: Tensor<T>,
    pub value: Tensor<T>,
    pub features: Tensor<T>,
}

/// Shared interface of the trainable networks.
pub trait ActorCritic<T: Scalar> {
    fn n_actions(&self) -> usize;

    /// Shape of one observation.
    fn obs_shape(&self) -> Vec<usize>;

    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_names(&self) -> Vec<String>;

    /// Records every parameter on `g` in [`Self::params`] order.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p)
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass on an already input-transformed batch. `inner_phi`
    /// is only consulted by placements that randomize inside the trunk.
    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        input: Var,
        inner_phi: Option<&RandomNetParams<T>>,
    ) -> Result<Heads>;

    /// Applies whatever part of the randomizer acts on raw observations.
    fn input_transform(
        &self,
        obs: &Tensor<T>,
        phi: Option<&RandomNetParams<T>>,
    ) -> Result<Tensor<T>> {
        let _ = phi;
        Ok(obs.clone())
    }

    /// Full forward pass `π(·|f(s; φ))` on a batch, with the randomizer
    /// applied at the configured placement.
    fn forward(&self, obs: &Tensor<T>, phi: Option<&RandomNetParams<T>>) -> Result<Outputs<T>> {
        let x = self.input_transform(obs, phi)?;
        self.forward_input(&x, phi)
    }

    /// Tape-free forward of an input-transformed batch.
    fn forward_input(
        &self,
        input: &Tensor<T>,
        inner_phi: Option<&RandomNetParams<T>>,
    ) -> Result<Outputs<T>> {
        let mut g = Graph::new().verify_finite(false);
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let h = self.forward_graph(&mut g, &bound, x, inner_phi)?;
        Ok(Outputs {
            logits: g.value(h.logits).clone(),
            value: g.value(h.value).clone(),
            features: g.value(h.features).clone(),
        })
    }

    /// Adds gradients recorded on `g` into the parameter gradient slots.
    fn collect_grads(&mut self, g: &Graph<T>, bound: &[Var]) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(bound) {
            g.accumulate_into(*v, p)?;
        }
        Ok(())
    }

    fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Convolutional actor-critic.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet<T> {
    pub config: NetConfig,
    pub placement: Placement,
    pub convs: Vec<LayerParams<T>>,
    pub hidden: LayerParams<T>,
    pub policy_head: LayerParams<T>,
    pub value_head: LayerParams<T>,
}

impl<T: Scalar> PolicyNet<T> {
    pub fn new<R: Rng + ?Sized>(
        config: NetConfig,
        placement: Placement,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if let Placement::AfterBlock(k) = placement {
            if !(1..=3).contains(&k) {
                return Err(Error::config(format!(
                    "after_block_{k}: block index must be 1..=3"
                )));
            }
        }
        let mut cin = config.in_channels;
        let mut convs = Vec::with_capacity(3);
        for &c in &config.channels {
            convs.push(LayerParams::conv_he(cin, c, config.kernel, rng));
            cin = c;
        }
        let hidden = LayerParams::dense_he(config.flat_features(), config.features, rng);
        let policy_head = LayerParams::dense_scaled(config.features, config.n_actions, 0.01, rng);
        let value_head = LayerParams::dense_he(config.features, 1, rng);
        Ok(Self {
            config,
            placement,
            convs,
            hidden,
            policy_head,
            value_head,
        })
    }

    /// Channel count the randomizer must preserve at this placement.
    pub fn randomizer_channels(&self) -> usize {
        match self.placement {
            Placement::AfterBlock(k) => self.config.channels[k - 1],
            _ => self.config.in_channels,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.convs
            .iter()
            .chain([&self.hidden, &self.policy_head, &self.value_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.convs.iter_mut().chain([
            &mut self.hidden,
            &mut self.policy_head,
            &mut self.value_head,
        ])
    }

    fn require_phi(&self, phi: Option<&RandomNetParams<T>>) -> Result<()> {
        if self.placement != Placement::None && phi.is_none() {
            return Err(Error::contract(format!(
                "placement {} requires a randomizer draw",
                self.placement
            )));
        }
        Ok(())
    }
}

/// Walks a flat bound-parameter list layer by layer.
struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn layer<T>(&mut self, l: &LayerParams<T>) -> (Var, Option<Var>) {
        let w = self.vars[self.at];
        self.at += 1;
        let b = l.bias.as_ref().map(|_| {
            self.at += 1;
            self.vars[self.at - 1]
        });
        (w, b)
    }
}

impl<T: Scalar> ActorCritic<T> for PolicyNet<T> {
    fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![
            self.config.in_channels,
            self.config.obs_size,
            self.config.obs_size,
        ]
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| l.tensors()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut push = |prefix: String, l: &LayerParams<T>| {
            names.push(format!("{prefix}.weight"));
            if l.bias.is_some() {
                names.push(format!("{prefix}.bias"));
            }
        };
        for (i, c) in self.convs.iter().enumerate() {
            push(format!("conv{}", i + 1), c);
        }
        push("hidden".into(), &self.hidden);
        push("policy".into(), &self.policy_head);
        push("value".into(), &self.value_head);
        names
    }

    fn input_transform(
        &self,
        obs: &Tensor<T>,
        phi: Option<&RandomNetParams<T>>,
    ) -> Result<Tensor<T>> {
        self.require_phi(phi)?;
        match (self.placement, phi) {
            (Placement::First, Some(phi)) => randnet::randomize(obs, phi),
            (Placement::Residual, Some(phi)) => {
                let r = randnet::randomize(obs, phi)?;
                let data = obs
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                Tensor::new(obs.shape(), data)
            }
            _ => Ok(obs.clone()),
        }
    }

    fn forward(&self, obs: &Tensor<T>, phi: Option<&RandomNetParams<T>>) -> Result<Outputs<T>> {
        let x = self.input_transform(obs, phi)?;
        self.forward_input(&x, phi)
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        input: Var,
        inner_phi: Option<&RandomNetParams<T>>,
    ) -> Result<Heads> {
        let shape = g.try_value(input)?.shape().to_vec();
        let want = self.obs_shape();
        if shape.len() != 4 || shape[1..] != want[..] {
            return Err(Error::dim("policy forward", &shape, &want));
        }
        let mut cur = Cursor { vars: bound, at: 0 };
        let mut h = input;
        let mut last_conv = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let (w, b) = cur.layer(conv);
            let meta = conv.conv.expect("conv layer");
            h = g.conv2d_meta(h, w, b, &meta)?;
            h = g.relu(h)?;
            if i == self.convs.len() - 1 {
                last_conv = Some(h);
            }
            h = g.maxpool2(h)?;
            if self.placement == Placement::AfterBlock(i + 1) {
                let phi = inner_phi.ok_or_else(|| {
                    Error::contract(format!(
                        "placement {} requires a randomizer draw",
                        self.placement
                    ))
                })?;
                h = randnet::randomize_var(g, h, phi)?;
            }
        }
        let flat = g.flatten(h)?;
        let (w, b) = cur.layer(&self.hidden);
        let hid = g.dense(flat, w, b)?;
        let features = g.relu(hid)?;
        let (w, b) = cur.layer(&self.policy_head);
        let logits = g.dense(features, w, b)?;
        let (w, b) = cur.layer(&self.value_head);
        let value = g.dense(features, w, b)?;
        Ok(Heads {
            logits,
            value,
            features,
            last_conv,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub obs_dim: usize,
    pub hidden: [usize; 2],
    pub n_actions: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            hidden: [64, 64],
            n_actions: 2,
        }
    }
}

/// Two-hidden-layer tanh actor-critic for vector observations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy<T> {
    pub config: MlpConfig,
    pub layers: Vec<LayerParams<T>>,
    pub policy_head: LayerParams<T>,
    pub value_head: LayerParams<T>,
}

impl<T: Scalar> MlpPolicy<T> {
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        if config.obs_dim == 0 || config.hidden.contains(&0) || config.n_actions == 0 {
            return Err(Error::config("MLP widths must be positive"));
        }
        let l1 = LayerParams::dense_he(config.obs_dim, config.hidden[0], rng);
        let l2 = LayerParams::dense_he(config.hidden[0], config.hidden[1], rng);
        let policy_head = LayerParams::dense_scaled(config.hidden[1], config.n_actions, 0.01, rng);
        let value_head = LayerParams::dense_he(config.hidden[1], 1, rng);
        Ok(Self {
            config,
            layers: vec![l1, l2],
            policy_head,
            value_head,
        })
    }

    fn all(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.layers
            .iter()
            .chain([&self.policy_head, &self.value_head])
    }
}

impl<T: Scalar> ActorCritic<T> for MlpPolicy<T> {
    fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![self.config.obs_dim]
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.all().flat_map(|l| l.tensors()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .chain([&mut self.policy_head, &mut self.value_head])
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for prefix in ["fc1", "fc2", "policy", "value"] {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        }
        names
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        input: Var,
        _inner_phi: Option<&RandomNetParams<T>>,
    ) -> Result<Heads> {
        let shape = g.try_value(input)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.obs_dim {
            return Err(Error::dim("mlp forward", &shape, &[0, self.config.obs_dim]));
        }
        let mut cur = Cursor { vars: bound, at: 0 };
        let mut h = input;
        for l in &self.layers {
            let (w, b) = cur.layer(l);
            h = g.dense(h, w, b)?;
            h = g.tanh(h)?;
        }
        let (w, b) = cur.layer(&self.policy_head);
        let logits = g.dense(h, w, b)?;
        let (w, b) = cur.layer(&self.value_head);
        let value = g.dense(h, w, b)?;
        Ok(Heads {
            logits,
            value,
            features: h,
            last_conv: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a probability row using one uniform variate.
pub fn sample_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

/// Per-row action choice from logits. Returns `(actions, log_probs)`.
pub fn choose_actions<T: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    mode: ActMode,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<T>)> {
    let probs = ops::softmax(logits)?;
    let logp = ops::log_softmax(logits)?;
    let k = *logits.shape().last().expect("logits rank");
    let mut actions = Vec::new();
    let mut lps = Vec::new();
    for (prow, lrow) in probs.data().chunks(k).zip(logp.data().chunks(k)) {
        let a = match mode {
            ActMode::Greedy => argmax(lrow),
            ActMode::Sample => sample_categorical(prow, rng),
        };
        actions.push(a);
        lps.push(lrow[a]);
    }
    Ok((actions, lps))
}

/// Runs the policy on a batch and picks actions: `(action, log_prob, value)`.
pub fn act<T: Scalar, N: ActorCritic<T> + ?Sized, R: Rng + ?Sized>(
    net: &N,
    obs: &Tensor<T>,
    phi: Option<&RandomNetParams<T>>,
    mode: ActMode,
    rng: &mut R,
) -> Result<Vec<(usize, T, T)>> {
    let out = net.forward(obs, phi)?;
    let (actions, lps) = choose_actions(&out.logits, mode, rng)?;
    Ok(actions
        .into_iter()
        .zip(lps)
        .zip(out.value.data().iter().copied())
        .map(|((a, l), v)| (a, l, v))
        .collect())
}
