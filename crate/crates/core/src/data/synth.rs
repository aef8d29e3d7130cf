use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean background level the clutter field oscillates around.
pub const BACKGROUND_LEVEL: f64 = 0.3;
/// Spacing of the clutter field's control grid.
const CLUTTER_CELL: usize = 16;
const MAX_PLACEMENT_TRIES: usize = 1000;
/// Smallest radius whose half-peak disc always covers a pixel centre.
const MIN_SIGMA: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub size: usize,
    pub n_targets: [usize; 2],
    pub target_sigma: [f64; 2],
    pub target_contrast: [f64; 2],
    pub clutter: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            n_targets: [1, 3],
            target_sigma: [0.8, 2.0],
            target_contrast: [0.3, 0.6],
            clutter: 0.15,
            noise_sigma: 0.02,
        }
    }
}

fn ordered(name: &str, [lo, hi]: [f64; 2]) -> Result<()> {
    if !(lo <= hi) {
        return Err(Error::Config(format!("{name}: [{lo}, {hi}] is not a range")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "scene size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        let [n_min, n_max] = self.n_targets;
        if n_min == 0 || n_min > n_max {
            return Err(Error::Config(format!(
                "n_targets must satisfy 1 ≤ min ≤ max, got [{n_min}, {n_max}]"
            )));
        }
        ordered("target_sigma", self.target_sigma)?;
        ordered("target_contrast", self.target_contrast)?;
        if self.target_sigma[0] < MIN_SIGMA {
            return Err(Error::Config(format!(
                "target_sigma must be ≥ {MIN_SIGMA} so every target covers a pixel"
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.clutter >= 0.0) {
            return Err(Error::Config("clutter and noise_sigma must be ≥ 0".into()));
        }
        if !(self.target_contrast[0] > self.noise_sigma) || self.target_contrast[1] > 1.0 {
            return Err(Error::Config(format!(
                "target_contrast must exceed noise_sigma {} and stay ≤ 1",
                self.noise_sigma
            )));
        }
        if margin(self.target_sigma[1]) * 2.0 >= (self.size - 1) as f64 {
            return Err(Error::Config(format!(
                "targets of sigma {} do not fit a {}-pixel scene",
                self.target_sigma[1], self.size
            )));
        }
        Ok(())
    }
}

/// A placed Gaussian blob; `center` is `(row, col)` in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub center: (f64, f64),
    pub sigma: f64,
    pub contrast: f64,
}

/// Everything drawn for one scene, before and after noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParts {
    pub background: Tensor<f32>,
    pub targets: Vec<TargetSpec>,
    /// Background plus targets, clamped, without noise.
    pub noiseless: Tensor<f32>,
    pub sample: Sample,
}

/// Keeps the mask and a two-pixel ring around it inside the frame.
fn margin(sigma: f64) -> f64 {
    3.0 * sigma + 2.0
}

fn clutter_field(size: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let g = size / CLUTTER_CELL + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let fr = r as f64 / CLUTTER_CELL as f64;
        let (r0, tr) = (fr.floor() as usize, fr.fract());
        let r1 = (r0 + 1).min(g - 1);
        for c in 0..size {
            let fc = c as f64 / CLUTTER_CELL as f64;
            let (c0, tc) = (fc.floor() as usize, fc.fract());
            let c1 = (c0 + 1).min(g - 1);
            let top = grid[r0 * g + c0] * (1.0 - tc) + grid[r0 * g + c1] * tc;
            let bottom = grid[r1 * g + c0] * (1.0 - tc) + grid[r1 * g + c1] * tc;
            out.push(BACKGROUND_LEVEL + amplitude * (top * (1.0 - tr) + bottom * tr));
        }
    }
    out
}

fn place_targets(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<TargetSpec>> {
    let n = rng.random_range(cfg.n_targets[0]..=cfg.n_targets[1]);
    let hi = (cfg.size - 1) as f64;
    let mut targets: Vec<TargetSpec> = Vec::with_capacity(n);
    for k in 0..n {
        let sigma = rng.random_range(cfg.target_sigma[0]..=cfg.target_sigma[1]);
        let contrast = rng.random_range(cfg.target_contrast[0]..=cfg.target_contrast[1]);
        let m = margin(sigma);
        let placed = (0..MAX_PLACEMENT_TRIES).find_map(|_| {
            let center = (rng.random_range(m..=hi - m), rng.random_range(m..=hi - m));
            let clear = targets.iter().all(|t| {
                let d = ((t.center.0 - center.0).powi(2) + (t.center.1 - center.1).powi(2)).sqrt();
                d > 3.0 * (t.sigma + sigma) + 4.0
            });
            clear.then_some(center)
        });
        let center = placed.ok_or_else(|| {
            Error::Dataset(format!(
                "could not place target {} of {n} without overlap after {MAX_PLACEMENT_TRIES} tries",
                k + 1
            ))
        })?;
        targets.push(TargetSpec {
            center,
            sigma,
            contrast,
        });
    }
    Ok(targets)
}

fn to_plane(size: usize, data: Vec<f64>) -> Tensor<f32> {
    Tensor::new([1, 1, size, size], data.into_iter().map(|v| v as f32).collect())
        .expect("scene plane")
}

pub fn synth_scene_parts(cfg: &SceneConfig, seed: u64) -> Result<SceneParts> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = clutter_field(size, cfg.clutter, &mut rng);
    let targets = place_targets(cfg, &mut rng)?;

    let mut signal = background.clone();
    let mut mask = vec![0.0; size * size];
    for t in &targets {
        let inv = 1.0 / (2.0 * t.sigma * t.sigma);
        for r in 0..size {
            for c in 0..size {
                let d2 = (r as f64 - t.center.0).powi(2) + (c as f64 - t.center.1).powi(2);
                let v = t.contrast * (-d2 * inv).exp();
                signal[r * size + c] += v;
                if v > 0.5 * t.contrast {
                    mask[r * size + c] = 1.0;
                }
            }
        }
    }
    let noiseless: Vec<f64> = signal.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let noisy: Vec<f64> = if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite noise sigma");
        signal
            .iter()
            .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect()
    } else {
        noiseless.clone()
    };

    Ok(SceneParts {
        background: to_plane(size, background),
        targets,
        noiseless: to_plane(size, noiseless),
        sample: Sample {
            image: to_plane(size, noisy),
            mask: to_plane(size, mask),
            id: format!("synth_{seed:08}"),
        },
    })
}

pub fn synth_scene(cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    synth_scene_parts(cfg, seed).map(|p| p.sample)
}

/// `count` scenes with seeds `seed, seed + 1, …`, in seed order.
pub fn synth_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| synth_scene(cfg, seed.wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{connected_components, BinaryMap};

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(synth_scene(&cfg, 3).unwrap(), synth_scene(&cfg, 3).unwrap());
        assert_ne!(synth_scene(&cfg, 3).unwrap().image, synth_scene(&cfg, 4).unwrap().image);
    }

    #[test]
    fn components_match_targets() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let parts = synth_scene_parts(&cfg, seed).unwrap();
            let mask = BinaryMap::from_tensor(&parts.sample.mask, 0.5).unwrap();
            let comps = connected_components(&mask);
            assert_eq!(comps.components.len(), parts.targets.len());
            assert!((1..=3).contains(&parts.targets.len()));
        }
    }

    #[test]
    fn value_ranges() {
        let s = synth_scene(&SceneConfig::default(), 9).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.mask.sum() > 0.0);
    }

    #[test]
    fn invalid_configs() {
        let base = SceneConfig::default();
        for cfg in [
            SceneConfig { size: 40, ..base.clone() },
            SceneConfig { n_targets: [0, 2], ..base.clone() },
            SceneConfig { n_targets: [3, 2], ..base.clone() },
            SceneConfig { target_contrast: [0.01, 0.5], ..base.clone() },
            SceneConfig { target_sigma: [0.3, 1.0], ..base.clone() },
        ] {
            assert!(synth_scene(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn crowded_scene_fails_to_place() {
        let cfg = SceneConfig {
            size: 32,
            n_targets: [40, 40],
            ..SceneConfig::default()
        };
        let err = synth_scene(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("could not place"));
    }
}
