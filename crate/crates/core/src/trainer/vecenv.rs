//! A fixed-size batch of auto-resetting environments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    theme::ThemeSpec, Action, CartPole, CoinGrid, CoinGridConfig, DynamicsParams, LevelSpec, Push,
    StepResult,
};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Training levels draw seeds below this bound; evaluation levels above.
pub const TRAIN_SEED_SPACE: u64 = 1 << 31;
pub const EVAL_SEED_BASE: u64 = 1 << 32;

/// Which environment family a run uses, plus its fixed settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    CoinGrid {
        #[serde(default)]
        grid: CoinGridConfig,
        seen_themes: Vec<u32>,
        unseen_themes: Vec<u32>,
        /// Restrict training to level seeds `0..n`; unlimited when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_levels: Option<u64>,
    },
    CartPole {
        #[serde(default)]
        dynamics: DynamicsParams,
    },
}

impl EnvSpec {
    pub fn obs_shape(&self) -> Vec<usize> {
        match self {
            EnvSpec::CoinGrid { grid, .. } => grid.obs_shape().to_vec(),
            EnvSpec::CartPole { .. } => vec![CartPole::OBS_DIM],
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvSpec::CoinGrid { .. } => Action::COUNT,
            EnvSpec::CartPole { .. } => 2,
        }
    }
}

/// One live environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSlot {
    Grid(CoinGrid),
    Pole(CartPole),
}

impl EnvSlot {
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            EnvSlot::Grid(g) => g.step(Action::from_index(action)?),
            EnvSlot::Pole(p) => p.step(Push::from_index(action)?),
        }
    }

    pub fn observe<T: Scalar>(&self) -> Tensor<T> {
        match self {
            EnvSlot::Grid(g) => g.observe(),
            EnvSlot::Pole(p) => p.observe(),
        }
    }
}

/// Summary of an episode that just ended.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    pub ret: f64,
    pub len: usize,
    pub success: bool,
}

/// Success for the grid game is reaching the coin; for the pole it is
/// surviving to the step limit.
pub fn episode_success(r: &StepResult) -> bool {
    r.info.success
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnv {
    pub spec: EnvSpec,
    pub slots: Vec<EnvSlot>,
    pub ep_return: Vec<f64>,
    pub ep_len: Vec<usize>,
}

/// Draws a training level and a seen theme.
pub fn fresh_grid<R: Rng + ?Sized>(
    grid: &CoinGridConfig,
    seen: &[u32],
    n_levels: Option<u64>,
    rng: &mut R,
) -> Result<CoinGrid> {
    if seen.is_empty() {
        return Err(Error::config("no seen themes"));
    }
    let seed = rng.random_range(0..n_levels.unwrap_or(TRAIN_SEED_SPACE));
    let theme = seen[rng.random_range(0..seen.len())];
    let level = LevelSpec::generate_solvable(seed, grid)?;
    CoinGrid::reset(grid, level, ThemeSpec::generate(theme))
}

impl VecEnv {
    pub fn new<R: Rng + ?Sized>(spec: EnvSpec, n: usize, rng: &mut R) -> Result<Self> {
        let mut v = Self {
            spec,
            slots: Vec::with_capacity(n),
            ep_return: vec![0.0; n],
            ep_len: vec![0; n],
        };
        for _ in 0..n {
            let slot = v.fresh(rng)?;
            v.slots.push(slot);
        }
        Ok(v)
    }

    fn fresh<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EnvSlot> {
        Ok(match &self.spec {
            EnvSpec::CoinGrid {
                grid,
                seen_themes,
                n_levels,
                ..
            } => EnvSlot::Grid(fresh_grid(grid, seen_themes, *n_levels, rng)?),
            EnvSpec::CartPole { dynamics } => EnvSlot::Pole(CartPole::reset(*dynamics, rng)),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Stacked `(n, obs...)` observations.
    pub fn observe<T: Scalar>(&self) -> Result<Tensor<T>> {
        let obs: Vec<Tensor<T>> = self.slots.iter().map(EnvSlot::observe).collect();
        Tensor::stack(&obs.iter().collect::<Vec<_>>())
    }

    /// Steps every slot, resetting those whose episode ended.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        actions: &[usize],
        rng: &mut R,
    ) -> Result<Vec<(StepResult, Option<EpisodeEnd>)>> {
        if actions.len() != self.slots.len() {
            return Err(Error::dim(
                "vec env step",
                &[actions.len()],
                &[self.slots.len()],
            ));
        }
        let mut out = Vec::with_capacity(actions.len());
        for (e, &a) in actions.iter().enumerate() {
            let r = self.slots[e].step(a)?;
            self.ep_return[e] += r.reward;
            self.ep_len[e] += 1;
            let end = if r.done {
                let end = EpisodeEnd {
                    ret: self.ep_return[e],
                    len: self.ep_len[e],
                    success: episode_success(&r),
                };
                self.ep_return[e] = 0.0;
                self.ep_len[e] = 0;
                self.slots[e] = self.fresh(rng)?;
                Some(end)
            } else {
                None
            };
            out.push((r, end));
        }
        Ok(out)
    }
}
