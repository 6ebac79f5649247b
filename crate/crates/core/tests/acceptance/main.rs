//! Acceptance gate. Runs every criterion and prints one PASS/FAIL line
//! each. `NETRAND_ACCEPT=1,5,9` restricts the run to the listed ids.
//!
//! Criteria 8-15 train agents at a reduced desk scale (see `desk.rs`);
//! trained agents are shared between criteria.

use std::time::Instant;

use netrand::experiment::Checkpoint;
use netrand::metrics::{
    activation_entropy, cycle_consistency, cycle_consistency_3way, ActivationMap,
};
use netrand::nn::{Graph, Tensor, Var};
use netrand::policy::ActorCritic;
use netrand::ppo::{ppo_loss, Hyperparams, Minibatch};
use netrand::randnet::{
    randomize, randomize_var, sample_params_with, PriorConfig, RandomNetParams,
};
use netrand::trainer::{fm_loss_var, IterationStats, Method, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod desk;

type T64 = Tensor<f64>;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- 1

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    Tensor::randn(shape, 1.0, rng)
}

/// Values with magnitude in [0.1, 1] and random sign, away from the relu kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.1..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Distinct values at least 0.05 apart, so max-pooling has no ties.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_f64(shape, &v).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> netrand::Result<Var>;

fn project(out: &T64, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Norm-wise relative error between the analytic gradient of
/// `sum(build(inputs) * r)` and its central difference with step 1e-3,
/// over the first `n_diff` inputs.
fn gradient_error(inputs: &[T64], n_diff: usize, build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let forward = |xs: &[T64]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let shape = forward(inputs).shape().to_vec();
    let r = randn(&shape, rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let h = 1e-3;
    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    for (k, x) in inputs.iter().enumerate().take(n_diff) {
        let analytic = g
            .grad(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + h;
            let up = project(&forward(&xs), r.data());
            xs[k].data_mut()[i] = x.data()[i] - h;
            let down = project(&forward(&xs), r.data());
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - numeric).powi(2);
            an2 += analytic[i].powi(2);
            nu2 += numeric.powi(2);
        }
    }
    diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(1e-8)
}

type Gen = dyn Fn(&mut ChaCha8Rng) -> Vec<T64>;

fn gradient_cases() -> Vec<(&'static str, Box<Gen>, Box<Build>)> {
    fn b(f: impl Fn(&mut Graph<f64>, &[Var]) -> netrand::Result<Var> + 'static) -> Box<Build> {
        Box::new(f)
    }
    fn gen(f: impl Fn(&mut ChaCha8Rng) -> Vec<T64> + 'static) -> Box<Gen> {
        Box::new(f)
    }
    let vec4 = |rng: &mut ChaCha8Rng| vec![randn(&[3, 4], rng)];
    vec![
        (
            "conv2d s1 p1",
            gen(|r| {
                vec![
                    randn(&[2, 3, 5, 5], r),
                    randn(&[4, 3, 3, 3], r),
                    randn(&[4], r),
                ]
            }),
            b(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d s2 p0",
            gen(|r| vec![randn(&[1, 2, 7, 7], r), randn(&[3, 2, 3, 3], r)]),
            b(|g, v| g.conv2d(v[0], v[1], None, 2, 0)),
        ),
        (
            "dense",
            gen(|r| vec![randn(&[3, 5], r), randn(&[4, 5], r), randn(&[4], r)]),
            b(|g, v| g.dense(v[0], v[1], Some(v[2]))),
        ),
        (
            "relu",
            gen(|r| vec![away_from_zero(&[3, 4], r)]),
            b(|g, v| g.relu(v[0])),
        ),
        ("tanh", gen(vec4), b(|g, v| g.tanh(v[0]))),
        ("exp", gen(vec4), b(|g, v| g.exp(v[0]))),
        (
            "ln",
            gen(|r| {
                let v: Vec<f64> = (0..12).map(|_| r.random_range(0.5..2.0)).collect();
                vec![Tensor::from_f64(&[3, 4], &v).unwrap()]
            }),
            b(|g, v| g.ln(v[0])),
        ),
        ("square", gen(vec4), b(|g, v| g.square(v[0]))),
        ("scale", gen(vec4), b(|g, v| g.scale(v[0], -1.7))),
        ("add_scalar", gen(vec4), b(|g, v| g.add_scalar(v[0], 0.3))),
        (
            "clamp",
            gen(|r| {
                let v: Vec<f64> = (0..12)
                    .map(|_| loop {
                        let x: f64 = r.random_range(-1.0..1.0);
                        if (x.abs() - 0.5).abs() > 0.02 {
                            break x;
                        }
                    })
                    .collect();
                vec![Tensor::from_f64(&[3, 4], &v).unwrap()]
            }),
            b(|g, v| g.clamp(v[0], -0.5, 0.5)),
        ),
        (
            "maxpool2",
            gen(|r| vec![spaced(&[2, 2, 4, 6], r)]),
            b(|g, v| g.maxpool2(v[0])),
        ),
        ("reshape", gen(vec4), b(|g, v| g.reshape(v[0], &[2, 6]))),
        (
            "flatten",
            gen(|r| vec![randn(&[2, 2, 2, 3], r)]),
            b(|g, v| g.flatten(v[0])),
        ),
        (
            "add",
            gen(|r| vec![randn(&[3, 4], r), randn(&[3, 4], r)]),
            b(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            gen(|r| vec![randn(&[3, 4], r), randn(&[3, 4], r)]),
            b(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            gen(|r| vec![randn(&[3, 4], r), randn(&[3, 4], r)]),
            b(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "minimum",
            gen(|r| {
                let a = randn(&[3, 4], r);
                let gap = away_from_zero(&[3, 4], r);
                let bv: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(gap.data())
                    .map(|(x, d)| x + d)
                    .collect();
                vec![a, Tensor::from_f64(&[3, 4], &bv).unwrap()]
            }),
            b(|g, v| g.minimum(v[0], v[1])),
        ),
        ("softmax", gen(vec4), b(|g, v| g.softmax(v[0]))),
        ("log_softmax", gen(vec4), b(|g, v| g.log_softmax(v[0]))),
        (
            "gather_cols",
            gen(vec4),
            b(|g, v| g.gather_cols(v[0], &[2, 0, 3])),
        ),
        ("sum_last", gen(vec4), b(|g, v| g.sum_last(v[0]))),
        ("sum", gen(vec4), b(|g, v| g.sum(v[0]))),
        ("mean", gen(vec4), b(|g, v| g.mean(v[0]))),
        (
            "randomize",
            gen(|r| vec![randn(&[2, 3, 6, 6], r)]),
            b(|g, v| {
                let phi = RandomNetParams {
                    kernel: Tensor::randn(&[3, 3, 3, 3], 0.2, &mut ChaCha8Rng::seed_from_u64(9)),
                    is_identity: false,
                };
                randomize_var(g, v[0], &phi)
            }),
        ),
        (
            "fm_loss",
            gen(|r| vec![randn(&[4, 6], r), randn(&[4, 6], r)]),
            b(|g, v| fm_loss_var(g, v[0], v[1])),
        ),
        (
            "ppo_loss",
            gen(|r| loop {
                // reject instances with a probability ratio near the clip edges
                let logits = randn(&[5, 4], r);
                let values = randn(&[5, 1], r);
                let old: Vec<f64> = (0..5).map(|_| r.random_range(-2.5..-0.5)).collect();
                let lp = netrand::nn::ops::log_softmax(&logits).unwrap();
                let ok = PPO_ACTIONS.iter().enumerate().all(|(i, &a)| {
                    let ratio = (lp.data()[i * 4 + a] - old[i]).exp();
                    (ratio - 0.8).abs() > 0.02 && (ratio - 1.2).abs() > 0.02
                });
                if ok {
                    break vec![logits, values, Tensor::from_f64(&[5], &old).unwrap()];
                }
            }),
            b(|g, v| {
                let old = g.value(v[2]).data().to_vec();
                let mb = Minibatch {
                    clean: Tensor::zeros(&[5, 1]),
                    randomized: Tensor::zeros(&[5, 1]),
                    actions: PPO_ACTIONS.to_vec(),
                    old_log_probs: old,
                    advantages: vec![1.0, -0.5, 0.3, -1.2, 0.8],
                    returns: vec![0.5, 1.0, -0.2, 0.0, 2.0],
                };
                Ok(ppo_loss(g, v[0], v[1], &mb, &Hyperparams::default())?.0)
            }),
        ),
    ]
}

const PPO_ACTIONS: [usize; 5] = [0, 3, 1, 1, 2];

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = ("", 0.0f64);
    let mut count = 0;
    for (name, gen, build) in gradient_cases() {
        for _ in 0..20 {
            let inputs = gen(&mut rng);
            // old log-probabilities enter the PPO loss as constants
            let n_diff = if name == "ppo_loss" { 2 } else { inputs.len() };
            let e = gradient_error(&inputs, n_diff, build.as_ref(), &mut rng);
            count += 1;
            if !(e <= worst.1) {
                worst = (name, e);
            }
        }
    }
    let n_ops = gradient_cases().len();
    Verdict::new(
        worst.1 < 1e-3,
        format!(
            "{n_ops} ops x 20 instances ({count} checks), worst relative error {:.2e} ({})",
            worst.1, worst.0
        ),
    )
}

// ---------------------------------------------------------------- 2

fn run_iters(cfg: netrand::trainer::TrainConfig, n: usize) -> (Vec<IterationStats>, Trainer<f32>) {
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let s = (0..n).map(|_| t.train_iteration().unwrap()).collect();
    (s, t)
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn(&[4, 3, 12, 12], 1.0, &mut rng);
    let id = RandomNetParams::identity(3, 3);
    let passthrough = randomize(&x, &id).unwrap().data() == x.data();
    let mut conv_id = id.clone();
    conv_id.is_identity = false;
    let conv_passthrough = randomize(&x, &conv_id).unwrap().data() == x.data();

    let vanilla = desk::tiny(Method::Vanilla);
    let mut rand = desk::tiny(Method::Rand);
    rand.hyper.alpha_clean = 1.0;
    let (sv, tv) = run_iters(vanilla, 3);
    let (sr, tr) = run_iters(rand, 3);
    let strip = |s: &[IterationStats]| {
        s.iter()
            .map(|r| {
                (
                    r.total_loss.to_bits(),
                    r.policy_loss.to_bits(),
                    r.entropy.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    let same_stats = strip(&sv) == strip(&sr);
    let same_params = tv
        .agent
        .net
        .params()
        .iter()
        .zip(tr.agent.net.params())
        .all(|(a, b)| a.data() == b.data());
    Verdict::new(
        passthrough && conv_passthrough && same_stats && same_params,
        format!(
            "identity pass-through {passthrough} (via conv {conv_passthrough}); vanilla vs alpha=1 rand after 3 iterations: losses identical {same_stats}, parameters identical {same_params}"
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

fn criterion_3() -> Verdict {
    let prior = PriorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ids, mut sum, mut sq, mut n) = (0usize, 0.0, 0.0, 0usize);
    for _ in 0..10_000 {
        let p: RandomNetParams<f64> = sample_params_with(&prior, &mut rng);
        if p.is_identity {
            ids += 1;
        } else {
            for &w in p.kernel.data() {
                sum += w;
                sq += w * w;
                n += 1;
            }
        }
    }
    let frac = ids as f64 / 10_000.0;
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    let target = prior.xavier_std();
    let rel = (std - target).abs() / target;
    Verdict::new(
        (0.091..=0.109).contains(&frac) && rel <= 0.05,
        format!(
            "identity fraction {frac:.4}; entry std {std:.5} vs {target:.5} ({:.2}% off)",
            100.0 * rel
        ),
    )
}

fn criterion_4() -> Verdict {
    let prior = PriorConfig {
        alpha: 0.0,
        ..PriorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (size, draws) = (16, 10_000);
    let mut total = 0.0;
    for _ in 0..draws {
        let x = Tensor::<f64>::randn(&[1, 3, size, size], 1.0, &mut rng);
        let phi = sample_params_with(&prior, &mut rng);
        let y = randomize(&x, &phi).unwrap();
        // interior pixels only: zero padding shrinks the border variance
        let mut s2 = 0.0;
        let mut m = 0;
        for c in 0..3 {
            for i in 1..size - 1 {
                for j in 1..size - 1 {
                    s2 += y.data()[(c * size + i) * size + j].powi(2);
                    m += 1;
                }
            }
        }
        total += s2 / m as f64;
    }
    let var = total / draws as f64;
    Verdict::new(
        (0.9..=1.1).contains(&var),
        format!("mean output variance {var:.4} over {draws} kernels (input 1.0)"),
    )
}

// ---------------------------------------------------------------- 5

fn nn_oracle(p: &[f64], pool: &[Vec<f64>]) -> usize {
    let d = |q: &Vec<f64>| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for k in 1..pool.len() {
        if d(&pool[k]) < d(&pool[best]) {
            best = k;
        }
    }
    best
}

fn returns_oracle(v: &[Vec<f64>], path: &[&[Vec<f64>]], i: usize) -> bool {
    let mut p = v[i].clone();
    for hop in path {
        p = hop[nn_oracle(&p, hop)].clone();
    }
    let k = nn_oracle(&p, v);
    (k as i64 - i as i64).abs() <= 1
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let traj = |rng: &mut ChaCha8Rng, d: usize| -> Vec<Vec<f64>> {
        let n = rng.random_range(2..=12);
        // a coarse integer grid produces plenty of ties
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0..4) as f64).collect())
            .collect()
    };
    for _ in 0..1000 {
        let d = rng.random_range(1..=3);
        let (v, u, j) = (traj(&mut rng, d), traj(&mut rng, d), traj(&mut rng, d));
        let pct = |ok: usize| 100.0 * ok as f64 / v.len() as f64;
        let two = pct((0..v.len())
            .filter(|&i| returns_oracle(&v, &[&u], i))
            .count());
        let three = pct((0..v.len())
            .filter(|&i| returns_oracle(&v, &[&u, &j], i) && returns_oracle(&v, &[&j, &u], i))
            .count());
        if cycle_consistency(&v, &u).unwrap() != two
            || cycle_consistency_3way(&v, &u, &j).unwrap() != three
        {
            mismatches += 1;
        }
    }
    Verdict::new(
        mismatches == 0,
        format!("{mismatches} mismatches against brute force on 1000 instances"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    let mut notes = Vec::new();
    for (h, w) in [(1, 1), (2, 3), (6, 6), (8, 8), (12, 12)] {
        let n = (h * w) as f64;
        let u = activation_entropy(&[ActivationMap::uniform(h, w)]).unwrap();
        ok &= (u - n.ln()).abs() <= 1e-12;
        let mut one_hot = vec![0.0; h * w];
        one_hot[rng.random_range(0..h * w)] = 1.0;
        ok &= activation_entropy(&[ActivationMap::new(h, w, one_hot).unwrap()]).unwrap() == 0.0;
        if (h, w) == (8, 8) {
            notes.push(format!("uniform 8x8 {u:.4}"));
        }
    }
    let mut out_of_range = 0;
    for _ in 0..2000 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let weights: Vec<f64> = (0..h * w)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    0.0
                } else {
                    rng.random::<f64>().powi(3)
                }
            })
            .collect();
        let maps: Vec<ActivationMap> = (0..rng.random_range(1..4))
            .map(|_| ActivationMap::from_weights(h, w, weights.clone()).unwrap())
            .collect();
        let e = activation_entropy(&maps).unwrap();
        if !(0.0..=((h * w) as f64).ln() + 1e-12).contains(&e) {
            out_of_range += 1;
        }
    }
    ok &= out_of_range == 0;
    notes.push(format!(
        "{out_of_range}/2000 random maps outside [0, log HW]"
    ));
    Verdict::new(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let cfg = desk::tiny(Method::RandFm);
    let (_, t) = run_iters(cfg.clone(), 2);
    let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let identical = back.to_bytes().unwrap() == bytes
        && Checkpoint::from_trainer(&back.trainer::<f32>().unwrap())
            .to_bytes()
            .unwrap()
            == bytes;

    let (full, t_full) = run_iters(cfg.clone(), 6);
    let (mut split, t_half) = run_iters(cfg, 3);
    let mut resumed =
        Checkpoint::from_bytes(&Checkpoint::from_trainer(&t_half).to_bytes().unwrap())
            .unwrap()
            .trainer::<f32>()
            .unwrap();
    for _ in 0..3 {
        split.push(resumed.train_iteration().unwrap());
    }
    let curves = full == split;
    let weights = Checkpoint::from_trainer(&t_full).to_bytes().unwrap()
        == Checkpoint::from_trainer(&resumed).to_bytes().unwrap();
    Verdict::new(
        identical && curves && weights,
        format!("{} byte checkpoint round trip identical {identical}; resumed curve identical {curves}, final state identical {weights}", bytes.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("NETRAND_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: Vec<(u32, &str, fn() -> Verdict)> = vec![
        (1, "gradient suite", criterion_1),
        (2, "identity equivalence", criterion_2),
        (3, "prior statistics", criterion_3),
        (4, "variance preservation", criterion_4),
        (5, "cycle-consistency oracle", criterion_5),
        (6, "entropy bounds", criterion_6),
        (7, "checkpoint round trip and resume", criterion_7),
        (8, "seen-env mastery", desk::criterion_8),
        (9, "generalization gap", desk::criterion_9),
        (10, "MC inference", desk::criterion_10),
        (11, "cycle-consistency", desk::criterion_11),
        (12, "FGSM robustness", desk::criterion_12),
        (13, "dynamics variant", desk::criterion_13),
        (14, "placement ablation", desk::criterion_14),
        (15, "activation entropy", desk::criterion_15),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} [{tag}] {name}: {} ({:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
