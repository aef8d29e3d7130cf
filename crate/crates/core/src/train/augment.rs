//! Geometric and photometric augmentation. Geometric transforms act on image
//! and mask together; contrast touches the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate90: bool,
    pub contrast: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h: true,
            flip_v: true,
            rotate90: true,
            contrast: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_h: false,
            flip_v: false,
            rotate90: false,
            contrast: false,
        }
    }
}

pub const CONTRAST_RANGE: (f32, f32) = (0.8, 1.2);

fn remap<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(x.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for r in 0..out_h {
                for col in 0..out_w {
                    let (sr, sc) = src(r, col);
                    data.push(plane[sr * s.w + sc]);
                }
            }
        }
    }
    Tensor::new(s.with_hw(out_h, out_w), data).expect("remap shape")
}

/// Mirrors left–right.
pub fn flip_h<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    remap(x, s.h, s.w, |r, c| (r, s.w - 1 - c))
}

/// Mirrors top–bottom.
pub fn flip_v<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    remap(x, s.h, s.w, |r, c| (s.h - 1 - r, c))
}

/// Rotates counter-clockwise by `quarter_turns · 90°`.
pub fn rot90<T: Element>(x: &Tensor<T>, quarter_turns: usize) -> Tensor<T> {
    let s = x.shape();
    match quarter_turns % 4 {
        0 => x.clone(),
        // out(r, c) = in(c, w − 1 − r)
        1 => remap(x, s.w, s.h, |r, c| (c, s.w - 1 - r)),
        2 => remap(x, s.h, s.w, |r, c| (s.h - 1 - r, s.w - 1 - c)),
        _ => remap(x, s.w, s.h, |r, c| (s.h - 1 - c, r)),
    }
}

/// Scales intensities by `factor` and clamps to `[0, 1]`.
pub fn adjust_contrast(x: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    x.map(|v| (v * factor).clamp(0.0, 1.0))
}

pub fn augment(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if image.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: image.shape(),
            rhs: mask.shape(),
        });
    }
    let (mut img, mut msk) = (image.clone(), mask.clone());
    if cfg.flip_h && rng.random_bool(0.5) {
        img = flip_h(&img);
        msk = flip_h(&msk);
    }
    if cfg.flip_v && rng.random_bool(0.5) {
        img = flip_v(&img);
        msk = flip_v(&msk);
    }
    if cfg.rotate90 {
        let s = img.shape();
        // Non-square inputs only take half turns so batch shapes stay fixed.
        let turns = if s.h == s.w {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        };
        img = rot90(&img, turns);
        msk = rot90(&msk, turns);
    }
    if cfg.contrast {
        let u = rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
        img = adjust_contrast(&img, u);
    }
    Ok((img, msk))
}
