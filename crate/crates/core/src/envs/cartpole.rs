//! Cart-pole balancing with configurable force, pole length and pole mass.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{StepInfo, StepResult};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const DT: f64 = 0.02;
pub const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const MAX_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub force: f64,
    /// Half-length of the pole, as in the classic formulation.
    pub length: f64,
    pub pole_mass: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            force: 10.0,
            length: 0.5,
            pole_mass: 0.1,
        }
    }
}

impl DynamicsParams {
    pub const HELD_OUT_FORCE: [(f64, f64); 2] = [(1.0, 5.0), (15.0, 20.0)];
    pub const HELD_OUT_LENGTH: [(f64, f64); 2] = [(0.05, 0.25), (0.75, 1.0)];
    pub const HELD_OUT_MASS: [(f64, f64); 2] = [(0.01, 0.05), (0.5, 1.0)];

    pub fn validate(&self) -> Result<()> {
        if self.force > 0.0 && self.length > 0.0 && self.pole_mass > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "dynamics parameters must be positive: {self:?}"
            )))
        }
    }

    /// Draws every parameter from the union of its two held-out intervals.
    pub fn sample_held_out<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut pick = |ranges: [(f64, f64); 2]| {
            let (lo, hi) = ranges[rng.random_range(0..2)];
            Uniform::new_inclusive(lo, hi).expect("range").sample(rng)
        };
        Self {
            force: pick(Self::HELD_OUT_FORCE),
            length: pick(Self::HELD_OUT_LENGTH),
            pole_mass: pick(Self::HELD_OUT_MASS),
        }
    }
}

/// `[x, x_dot, theta, theta_dot]`
pub type CartState = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Push {
    Left,
    Right,
}

impl Push {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Push::Left),
            1 => Ok(Push::Right),
            _ => Err(Error::contract(format!(
                "cart-pole action {i} out of range"
            ))),
        }
    }
}

fn failed(s: &CartState) -> bool {
    s[2].abs() > ANGLE_LIMIT || s[0].abs() > POSITION_LIMIT
}

/// One semi-implicit Euler step. A state already past the failure
/// threshold ends immediately without moving.
pub fn cartpole_step(
    state: &CartState,
    action: Push,
    params: &DynamicsParams,
) -> (CartState, StepResult) {
    if failed(state) {
        let info = StepInfo {
            death: true,
            ..StepInfo::default()
        };
        return (
            *state,
            StepResult {
                reward: 0.0,
                done: true,
                info,
            },
        );
    }
    let [x, x_dot, theta, theta_dot] = *state;
    let force = match action {
        Push::Left => -params.force,
        Push::Right => params.force,
    };
    let total_mass = CART_MASS + params.pole_mass;
    let pml = params.pole_mass * params.length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pml * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (params.length * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pml * theta_acc * cos / total_mass;
    let x_dot = x_dot + DT * x_acc;
    let x = x + DT * x_dot;
    let theta_dot = theta_dot + DT * theta_acc;
    let theta = theta + DT * theta_dot;
    let next = [x, x_dot, theta, theta_dot];
    let dead = failed(&next);
    let info = StepInfo {
        death: dead,
        ..StepInfo::default()
    };
    (
        next,
        StepResult {
            reward: if dead { 0.0 } else { 1.0 },
            done: dead,
            info,
        },
    )
}

/// Episode wrapper adding the step cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPole {
    pub params: DynamicsParams,
    pub state: CartState,
    pub t: usize,
    pub done: bool,
}

impl CartPole {
    pub const OBS_DIM: usize = 4;

    pub fn reset<R: Rng + ?Sized>(params: DynamicsParams, rng: &mut R) -> Self {
        let u = Uniform::new_inclusive(-0.05, 0.05).expect("range");
        Self {
            params,
            state: [u.sample(rng), u.sample(rng), u.sample(rng), u.sample(rng)],
            t: 0,
            done: false,
        }
    }

    pub fn step(&mut self, action: Push) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        let (next, mut r) = cartpole_step(&self.state, action, &self.params);
        self.state = next;
        self.t += 1;
        if !r.done && self.t >= MAX_STEPS {
            r.done = true;
            r.info.timeout = true;
        }
        self.done = r.done;
        Ok(r)
    }

    pub fn observe<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[Self::OBS_DIM], &self.state).expect("state shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent integrator of the same equations of motion, written
    /// in terms of the full Lagrangian form for cross-checking.
    fn oracle_step(s: [f64; 4], f: f64, p: &DynamicsParams) -> [f64; 4] {
        let (m, mc, l) = (p.pole_mass, CART_MASS, p.length);
        let (sin, cos) = s[2].sin_cos();
        // Solve the 2x2 linear system for (x_acc, theta_acc).
        // (mc+m) xa + m l cos ta = f + m l w^2 sin
        // cos xa + (4/3) l ta = g sin
        let a11 = mc + m;
        let a12 = m * l * cos;
        let a21 = cos;
        let a22 = 4.0 / 3.0 * l;
        let b1 = f + m * l * s[3] * s[3] * sin;
        let b2 = GRAVITY * sin;
        let det = a11 * a22 - a12 * a21;
        let xa = (b1 * a22 - a12 * b2) / det;
        let ta = (a11 * b2 - a21 * b1) / det;
        let xd = s[1] + DT * xa;
        let td = s[3] + DT * ta;
        [s[0] + DT * xd, xd, s[2] + DT * td, td]
    }

    #[test]
    fn matches_independent_integrator() {
        let p = DynamicsParams::default();
        let mut s = [0.01, -0.02, 0.03, 0.01];
        let mut o = s;
        for i in 0..20 {
            let a = if i % 3 == 0 { Push::Left } else { Push::Right };
            let f = if a == Push::Left { -p.force } else { p.force };
            let (n, r) = cartpole_step(&s, a, &p);
            o = oracle_step(o, f, &p);
            s = n;
            if r.done {
                break;
            }
            for (x, y) in s.iter().zip(o) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn upright_with_alternating_pushes_survives() {
        let p = DynamicsParams::default();
        let mut env = CartPole {
            params: p,
            state: [0.0; 4],
            t: 0,
            done: false,
        };
        let mut o = [0.0; 4];
        let mut survived = 0;
        for i in 0..10 {
            let a = if i % 2 == 0 { Push::Left } else { Push::Right };
            let r = env.step(a).unwrap();
            o = oracle_step(o, if i % 2 == 0 { -p.force } else { p.force }, &p);
            assert!(o[2].abs() < ANGLE_LIMIT && o[0].abs() < POSITION_LIMIT);
            if r.done {
                break;
            }
            survived += 1;
        }
        assert!(survived >= 10);
    }

    #[test]
    fn beyond_threshold_ends_immediately() {
        let s = [0.0, 0.0, ANGLE_LIMIT + 0.01, 0.0];
        let (n, r) = cartpole_step(&s, Push::Right, &DynamicsParams::default());
        assert!(r.done && r.info.death);
        assert_eq!(n, s);
    }

    #[test]
    fn step_cap_is_a_timeout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = CartPole::reset(DynamicsParams::default(), &mut rng);
        // a bang-bang controller keeps the default pole up for the full episode
        let mut total = 0.0;
        loop {
            let s = env.state;
            let a = if s[2] + 0.5 * s[3] + 0.01 * s[0] + 0.1 * s[1] > 0.0 {
                Push::Right
            } else {
                Push::Left
            };
            let r = env.step(a).unwrap();
            total += r.reward;
            if r.done {
                assert!(r.info.timeout, "failed at t={}", env.t);
                break;
            }
        }
        assert_eq!(total, MAX_STEPS as f64);
    }

    #[test]
    fn held_out_params_avoid_training_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = DynamicsParams::sample_held_out(&mut rng);
            p.validate().unwrap();
            let inside = |v: f64, r: [(f64, f64); 2]| r.iter().any(|&(a, b)| v >= a && v <= b);
            assert!(inside(p.force, DynamicsParams::HELD_OUT_FORCE));
            assert!(inside(p.length, DynamicsParams::HELD_OUT_LENGTH));
            assert!(inside(p.pole_mass, DynamicsParams::HELD_OUT_MASS));
        }
    }
}
