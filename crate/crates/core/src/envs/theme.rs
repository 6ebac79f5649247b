//! Procedural visual themes. A theme only changes colours and textures;
//! it never touches level geometry or dynamics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of distinct themes the generator exposes.
pub const PALETTE_SIZE: u32 = 64;

/// Colour of bad coins, shared by every theme.
pub const BAD_COIN_COLOR: [f64; 3] = [0.72, 0.72, 0.76];
pub const AGENT_COLOR: [f64; 3] = [0.98, 0.98, 0.98];
pub const AGENT_EYE_COLOR: [f64; 3] = [0.05, 0.05, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Flat,
    HStripes,
    VStripes,
    Checker,
    Diagonal,
    Noise,
}

/// Two-colour procedural texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub kind: PatternKind,
    /// Period (stripes, checker) or block size (noise), in pixels.
    pub scale: u32,
    pub texture_seed: u64,
}

impl Pattern {
    /// Colour at world pixel `(x, y)`.
    pub fn color(&self, x: i64, y: i64) -> [f64; 3] {
        let s = self.scale.max(1) as i64;
        let on = match self.kind {
            PatternKind::Flat => false,
            PatternKind::HStripes => y.div_euclid(s) % 2 == 0,
            PatternKind::VStripes => x.div_euclid(s) % 2 == 0,
            PatternKind::Checker => (x.div_euclid(s) + y.div_euclid(s)) % 2 == 0,
            PatternKind::Diagonal => (x + y).div_euclid(s) % 2 == 0,
            PatternKind::Noise => {
                hash3(x.div_euclid(s), y.div_euclid(s), self.texture_seed) & 1 == 1
            }
        };
        if on {
            self.accent
        } else {
            self.base
        }
    }
}

fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(31).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    h ^ (h >> 29)
}

/// Visual style of a level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThemeSpec {
    pub theme_id: u32,
    pub background: Pattern,
    pub floor: Pattern,
    pub obstacle: Pattern,
    pub coin_color: [f64; 3],
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn random_pattern<R: Rng>(rng: &mut R, base: [f64; 3]) -> Pattern {
    const KINDS: [PatternKind; 6] = [
        PatternKind::Flat,
        PatternKind::HStripes,
        PatternKind::VStripes,
        PatternKind::Checker,
        PatternKind::Diagonal,
        PatternKind::Noise,
    ];
    let kind = KINDS[rng.random_range(0..KINDS.len())];
    let accent = base.map(|c| (c + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0));
    Pattern {
        base,
        accent,
        kind,
        scale: rng.random_range(2..=6),
        texture_seed: rng.random(),
    }
}

impl ThemeSpec {
    /// Deterministic theme for `theme_id`. Colour pairs that must stay
    /// distinguishable (obstacle/coin against background and floor) are
    /// drawn with a minimum RGB distance.
    pub fn generate(theme_id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e3a_0000_0000 ^ theme_id as u64);
        loop {
            let bg = random_color(&mut rng);
            let floor = random_color(&mut rng);
            let obstacle = random_color(&mut rng);
            let coin = random_color(&mut rng);
            let ok = dist(bg, obstacle) > 0.55
                && dist(bg, coin) > 0.55
                && dist(floor, bg) > 0.35
                && dist(obstacle, coin) > 0.45
                && dist(coin, BAD_COIN_COLOR) > 0.4
                && dist(bg, AGENT_COLOR) > 0.3;
            if !ok {
                continue;
            }
            return Self {
                theme_id,
                background: random_pattern(&mut rng, bg),
                floor: random_pattern(&mut rng, floor),
                obstacle: random_pattern(&mut rng, obstacle),
                coin_color: coin,
            };
        }
    }
}

/// Splits the palette into disjoint seen and unseen theme ids.
pub fn theme_split(
    master_seed: u64,
    n_seen: usize,
    n_unseen: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if n_seen + n_unseen > PALETTE_SIZE as usize {
        return Err(Error::config(format!(
            "{n_seen} seen + {n_unseen} unseen themes exceed the palette of {PALETTE_SIZE}"
        )));
    }
    let mut ids: Vec<u32> = (0..PALETTE_SIZE).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(master_seed));
    let unseen = ids[n_seen..n_seen + n_unseen].to_vec();
    ids.truncate(n_seen);
    Ok((ids, unseen))
}
