//! Desk-scale environments: the themed [`coingrid`] platformer and the
//! [`cartpole`] dynamics testbed.

pub mod cartpole;
pub mod coingrid;
pub mod theme;

use serde::{Deserialize, Serialize};

pub use cartpole::{cartpole_step, CartPole, DynamicsParams, Push};
pub use coingrid::{Action, CoinGrid, CoinGridConfig, LevelSpec};
pub use theme::{theme_split, ThemeSpec, PALETTE_SIZE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub death: bool,
    pub timeout: bool,
    /// Set together with `death` when the episode ended on a bad coin.
    pub bad_coin: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}
