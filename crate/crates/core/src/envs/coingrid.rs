//! CoinGrid: a side-scrolling gridworld whose visuals come from a
//! [`ThemeSpec`] and whose geometry comes from a seeded [`LevelSpec`].
//!
//! The agent starts in the leftmost column of the ground row and must
//! reach the coin in the rightmost column. `Right` and `Left` move one
//! cell, `Jump` leaps two cells to the right (clearing the cell in
//! between), `Noop` waits. Landing on an obstacle kills the agent.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::theme::{ThemeSpec, AGENT_COLOR, AGENT_EYE_COLOR, BAD_COIN_COLOR};
use super::{StepInfo, StepResult};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub const COIN_REWARD: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Left,
    Right,
    Jump,
    Noop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Jump, Action::Noop];
    pub const COUNT: usize = 4;

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoinGridConfig {
    /// Level length in cells.
    pub width: usize,
    /// Observation side length in pixels.
    pub obs_size: usize,
    /// Cells visible across (and down) the observation.
    pub view_cells: usize,
    /// Column of the view where the agent is drawn.
    pub agent_view_col: usize,
    pub max_steps: usize,
    /// Per-column obstacle probability.
    pub obstacle_density: f64,
    pub bad_coins: usize,
    /// Obstacles alternate between their base column and the next one.
    pub moving_obstacles: bool,
}

impl Default for CoinGridConfig {
    fn default() -> Self {
        Self {
            width: 20,
            obs_size: 48,
            view_cells: 8,
            agent_view_col: 3,
            max_steps: 256,
            obstacle_density: 0.3,
            bad_coins: 0,
            moving_obstacles: false,
        }
    }
}

impl CoinGridConfig {
    pub const GROUND_ROW: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if self.view_cells == 0 || !self.obs_size.is_multiple_of(self.view_cells) {
            return Err(Error::config(format!(
                "observation size {} is not a multiple of view_cells {}",
                self.obs_size, self.view_cells
            )));
        }
        if self.view_cells <= Self::GROUND_ROW + 1 || self.agent_view_col >= self.view_cells {
            return Err(Error::config(
                "view too small for the ground row and agent column",
            ));
        }
        if self.width < 6 {
            return Err(Error::config("level width must be at least 6 cells"));
        }
        if !(0.0..1.0).contains(&self.obstacle_density) {
            return Err(Error::config("obstacle density must lie in [0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        Ok(())
    }

    pub fn cell_px(&self) -> usize {
        self.obs_size / self.view_cells
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [3, self.obs_size, self.obs_size]
    }
}

/// Geometry of one level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub level_seed: u64,
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<usize>,
    pub coin: usize,
    pub bad_coins: Vec<usize>,
    pub moving_obstacles: bool,
}

impl LevelSpec {
    /// Layout for `level_seed`; fails if the coin is unreachable.
    pub fn generate(level_seed: u64, cfg: &CoinGridConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(level_seed ^ 0x1e7e_15ee_d000_0000);
        let w = cfg.width;
        let obstacles: Vec<usize> = (2..w - 2)
            .filter(|_| rng.random::<f64>() < cfg.obstacle_density)
            .collect();
        let mut bad_coins = Vec::new();
        let mut guard = 0;
        while bad_coins.len() < cfg.bad_coins && guard < 1000 {
            guard += 1;
            let c = rng.random_range(1..w - 1);
            let blocked =
                obstacles.contains(&c) || (cfg.moving_obstacles && obstacles.contains(&(c - 1)));
            if !blocked && !bad_coins.contains(&c) {
                bad_coins.push(c);
            }
        }
        bad_coins.sort_unstable();
        let level = Self {
            level_seed,
            width: w,
            height: cfg.view_cells,
            obstacles,
            coin: w - 1,
            bad_coins,
            moving_obstacles: cfg.moving_obstacles,
        };
        if level.shortest_path().is_none() {
            return Err(Error::Generation(format!(
                "level {level_seed} is not solvable"
            )));
        }
        Ok(level)
    }

    /// First solvable level at or after `seed`.
    pub fn generate_solvable(seed: u64, cfg: &CoinGridConfig) -> Result<Self> {
        for s in seed..seed.saturating_add(10_000) {
            match Self::generate(s, cfg) {
                Ok(l) => return Ok(l),
                Err(Error::Generation(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Generation(format!(
            "no solvable level near seed {seed}"
        )))
    }

    pub fn obstacle_at(&self, x: usize, t: usize) -> bool {
        if self.moving_obstacles && t % 2 == 1 {
            self.obstacles.iter().any(|&o| o + 1 == x)
        } else {
            self.obstacles.contains(&x)
        }
    }

    pub fn bad_coin_at(&self, x: usize) -> bool {
        self.bad_coins.contains(&x)
    }

    fn target(&self, x: usize, a: Action) -> usize {
        match a {
            Action::Left => x.saturating_sub(1),
            Action::Right => (x + 1).min(self.width - 1),
            Action::Jump => (x + 2).min(self.width - 1),
            Action::Noop => x,
        }
    }

    /// Breadth-first search over `(column, obstacle phase)`; returns an
    /// action sequence reaching the coin, preferring the lowest action
    /// index among shortest paths.
    pub fn shortest_path(&self) -> Option<Vec<Action>> {
        let phases = if self.moving_obstacles { 2 } else { 1 };
        let key = |x: usize, t: usize| x * phases + t % phases;
        let mut prev: Vec<Option<(usize, Action)>> = vec![None; self.width * phases];
        let mut seen = vec![false; self.width * phases];
        let mut queue = VecDeque::from([(0usize, 0usize)]);
        seen[key(0, 0)] = true;
        while let Some((x, t)) = queue.pop_front() {
            for a in Action::ALL {
                let nx = self.target(x, a);
                let nt = t + 1;
                if self.obstacle_at(nx, nt) || self.bad_coin_at(nx) {
                    continue;
                }
                let k = key(nx, nt);
                if seen[k] {
                    continue;
                }
                seen[k] = true;
                prev[k] = Some((key(x, t), a));
                if nx == self.coin {
                    let mut path = Vec::new();
                    let mut cur = k;
                    while let Some((p, a)) = prev[cur] {
                        path.push(a);
                        cur = p;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back((nx, nt));
            }
        }
        None
    }
}

/// One running CoinGrid episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoinGrid {
    cfg: CoinGridConfig,
    level: LevelSpec,
    theme: ThemeSpec,
    x: usize,
    t: usize,
    done: bool,
}

impl CoinGrid {
    /// Starts an episode; the first observation is `self.observe()`.
    pub fn reset(cfg: &CoinGridConfig, level: LevelSpec, theme: ThemeSpec) -> Result<Self> {
        cfg.validate()?;
        if level.width != cfg.width {
            return Err(Error::config(format!(
                "level width {} differs from config width {}",
                level.width, cfg.width
            )));
        }
        if level.shortest_path().is_none() {
            return Err(Error::Generation(format!(
                "level {} is not solvable",
                level.level_seed
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            level,
            theme,
            x: 0,
            t: 0,
            done: false,
        })
    }

    pub fn level(&self) -> &LevelSpec {
        &self.level
    }

    pub fn theme(&self) -> &ThemeSpec {
        &self.theme
    }

    pub fn config(&self) -> &CoinGridConfig {
        &self.cfg
    }

    pub fn position(&self) -> usize {
        self.x
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Swaps the visual theme without touching the episode state.
    pub fn with_theme(&self, theme: ThemeSpec) -> Self {
        Self {
            theme,
            ..self.clone()
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        self.t += 1;
        self.x = self.level.target(self.x, action);
        let mut info = StepInfo::default();
        let mut reward = 0.0;
        if self.level.obstacle_at(self.x, self.t) {
            info.death = true;
        } else if self.level.bad_coin_at(self.x) {
            info.death = true;
            info.bad_coin = true;
        } else if self.x == self.level.coin {
            info.success = true;
            reward = COIN_REWARD;
        } else if self.t >= self.cfg.max_steps {
            info.timeout = true;
        }
        self.done = info.success || info.death || info.timeout;
        Ok(StepResult {
            reward,
            done: self.done,
            info,
        })
    }

    /// Renders the egocentric view as a `(3, obs, obs)` tensor in `[0, 1]`.
    pub fn observe<T: Scalar>(&self) -> Tensor<T> {
        let size = self.cfg.obs_size;
        let cell = self.cfg.cell_px();
        let plane = size * size;
        let mut data = vec![T::zero(); 3 * plane];
        for py in 0..size {
            for px in 0..size {
                let rgb = self.pixel(py, px, cell);
                for (c, v) in rgb.iter().enumerate() {
                    data[c * plane + py * size + px] = T::lit(*v);
                }
            }
        }
        Tensor::new(&[3, size, size], data).expect("observation shape")
    }

    fn pixel(&self, py: usize, px: usize, cell: usize) -> [f64; 3] {
        let (row, col) = (py / cell, px / cell);
        let (sy, sx) = (py % cell, px % cell);
        let wx = self.x as i64 + col as i64 - self.cfg.agent_view_col as i64;
        let world_x = wx * cell as i64 + sx as i64;
        let world_y = py as i64;
        let inside = wx >= 0 && wx < self.level.width as i64;
        let ground = CoinGridConfig::GROUND_ROW;
        let bg = self.theme.background.color(world_x, world_y);
        if row > ground || (row == ground && !inside) {
            return self.theme.floor.color(world_x, world_y);
        }
        if row < ground {
            return bg;
        }
        let (u, v) = (
            (sx as f64 + 0.5) / cell as f64,
            (sy as f64 + 0.5) / cell as f64,
        );
        let wx = wx as usize;
        if col == self.cfg.agent_view_col {
            if (0.12..0.88).contains(&u) && (0.12..0.88).contains(&v) {
                let eye = (0.25..0.45).contains(&v)
                    && ((0.55..0.75).contains(&u) || (0.3..0.45).contains(&u));
                return if eye { AGENT_EYE_COLOR } else { AGENT_COLOR };
            }
            return bg;
        }
        if self.level.obstacle_at(wx, self.t) {
            // upward spike
            if (u - 0.5).abs() <= 0.5 * v + 0.02 {
                return self.theme.obstacle.color(world_x, world_y);
            }
            return bg;
        }
        let in_coin = (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.36 * 0.36;
        if wx == self.level.coin && in_coin {
            return self.theme.coin_color;
        }
        if self.level.bad_coin_at(wx) && in_coin {
            return BAD_COIN_COLOR;
        }
        bg
    }
}
