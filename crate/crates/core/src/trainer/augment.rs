//! Per-episode image augmentations used by the baseline methods.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub const MAX_CUTOUT_BOXES: usize = 5;
pub const JITTER_LOW: f64 = 0.5;
pub const JITTER_HIGH: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoutBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub color: [f64; 3],
}

/// Augmentation parameters, fixed for the length of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeAug {
    None,
    Cutout(Vec<CutoutBox>),
    Grayout,
    Invert(bool),
    Jitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Cutout,
    Grayout,
    Invert,
    Jitter,
}

impl EpisodeAug {
    pub fn sample<R: Rng + ?Sized>(kind: AugKind, size: usize, rng: &mut R) -> Self {
        match kind {
            AugKind::Grayout => EpisodeAug::Grayout,
            AugKind::Invert => EpisodeAug::Invert(rng.random_bool(0.5)),
            AugKind::Jitter => EpisodeAug::Jitter {
                brightness: rng.random_range(JITTER_LOW..=JITTER_HIGH),
                contrast: rng.random_range(JITTER_LOW..=JITTER_HIGH),
                saturation: rng.random_range(JITTER_LOW..=JITTER_HIGH),
            },
            AugKind::Cutout => {
                let n = rng.random_range(0..=MAX_CUTOUT_BOXES);
                let max_side = (size / 2).max(1);
                let boxes = (0..n)
                    .map(|_| {
                        let h = rng.random_range(1..=max_side);
                        let w = rng.random_range(1..=max_side);
                        CutoutBox {
                            y: rng.random_range(0..=size - h),
                            x: rng.random_range(0..=size - w),
                            h,
                            w,
                            color: [rng.random(), rng.random(), rng.random()],
                        }
                    })
                    .collect();
                EpisodeAug::Cutout(boxes)
            }
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Applies `aug` to one `(3, H, W)` observation.
pub fn augment<T: Scalar>(obs: &Tensor<T>, aug: &EpisodeAug) -> Result<Tensor<T>> {
    let s = obs.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("augment", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let src = obs.data();
    let mut out = src.to_vec();
    match aug {
        EpisodeAug::None => {}
        EpisodeAug::Invert(false) => {}
        EpisodeAug::Invert(true) => out.iter_mut().for_each(|v| *v = T::one() - *v),
        EpisodeAug::Grayout => {
            let three = T::lit(3.0);
            for p in 0..plane {
                let m = (src[p] + src[plane + p] + src[2 * plane + p]) / three;
                for c in 0..3 {
                    out[c * plane + p] = m;
                }
            }
        }
        EpisodeAug::Cutout(boxes) => {
            for b in boxes {
                for y in b.y..(b.y + b.h).min(h) {
                    for x in b.x..(b.x + b.w).min(w) {
                        for c in 0..3 {
                            out[c * plane + y * w + x] = T::lit(b.color[c]);
                        }
                    }
                }
            }
        }
        EpisodeAug::Jitter {
            brightness,
            contrast,
            saturation,
        } => {
            let mut px: Vec<[f64; 3]> = (0..plane)
                .map(|p| [0, 1, 2].map(|c| src[c * plane + p].to_f64_lossy()))
                .collect();
            let clamp = |v: f64| v.clamp(0.0, 1.0);
            for p in &mut px {
                *p = p.map(|v| clamp(v * brightness));
            }
            let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f64>() / plane.max(1) as f64;
            for p in &mut px {
                *p = p.map(|v| clamp(contrast * v + (1.0 - contrast) * mean));
            }
            for p in &mut px {
                let g = luma(p[0], p[1], p[2]);
                *p = p.map(|v| clamp(saturation * v + (1.0 - saturation) * g));
            }
            for (i, p) in px.iter().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = T::lit(p[c]);
                }
            }
        }
    }
    Tensor::new(s, out)
}
