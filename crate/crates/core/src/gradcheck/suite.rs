//! The standing gradient checks: every differentiable op plus the tiny
//! network end to end, all in f64.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_elements, spread_indices};
use crate::nn::{build_network, network_forward, NetConfig};
use crate::ops::{ConvOptions, Padding, PoolAxis, PoolMode};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::train::{soft_iou_loss, DEFAULT_LOSS_EPS};

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance for the whole network, whose relu kinks add numeric noise.
pub const NETWORK_TOLERANCE: f64 = 3e-3;
/// Central-difference step for single ops.
pub const OP_STEP: f64 = 1e-3;
/// Starting step for the network; probes that straddle a kink shrink from here.
pub const NETWORK_STEP: f64 = 1e-5;
/// Side of the end-to-end input image.
pub const NETWORK_SIZE: usize = 32;
/// Elements checked per parameter tensor end to end; the image is checked in full.
pub const NETWORK_SAMPLES_PER_TENSOR: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Uniform in `[-1, 1]`.
pub fn random_tensor(shape: impl Into<Shape>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.into(), |_, _, _, _| rng.random_range(-1.0..=1.0))
}

/// Uniform magnitudes in `[0.1, 1]` with random sign, clear of kinks at 0.
fn off_zero(shape: impl Into<Shape>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.into(), |_, _, _, _| {
        let m = rng.random_range(0.1..=1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`, so that no output direction is
/// blind to the check (plain `sum` after a norm has zero gradient).
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random_tensor(tape.shape(y), &mut rng));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn timed(
    name: &str,
    tolerance: f64,
    check: impl FnOnce() -> Result<f64>,
) -> Result<CheckResult> {
    let start = Instant::now();
    let max_rel_error = check()?;
    Ok(CheckResult {
        name: name.to_owned(),
        max_rel_error,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn conv_case(name: &str, x: Shape, w: Shape, opts: ConvOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let inputs = [random_tensor(x, rng), random_tensor(w, rng), random_tensor([1, w.n, 1, 1], rng)];
    timed(name, OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), opts)?;
                project(t, y, 1)
            },
            &inputs,
            OP_STEP,
        )
    })
}

/// Every single-op check, in a fixed order.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![
        conv_case("conv2d_plain", Shape::new(1, 2, 6, 6), Shape::new(3, 2, 3, 3), ConvOptions::same(1), rng)?,
        conv_case("conv2d_plain_wide", Shape::new(1, 2, 6, 6), Shape::new(10, 2, 3, 3), ConvOptions::same(1), rng)?,
        conv_case(
            "conv2d_strided",
            Shape::new(2, 2, 7, 6),
            Shape::new(3, 2, 3, 3),
            ConvOptions::strided(2, Padding::SameZero),
            rng,
        )?,
        conv_case(
            "conv2d_strided_replicate",
            Shape::new(1, 1, 6, 6),
            Shape::new(2, 1, 2, 2),
            ConvOptions::strided(2, Padding::SameReplicate),
            rng,
        )?,
        conv_case("conv2d_dilated", Shape::new(1, 2, 9, 9), Shape::new(2, 2, 3, 3), ConvOptions::same(3), rng)?,
    ];

    let x = random_tensor([2, 4, 5, 5], rng);
    let gamma = random_tensor([1, 4, 1, 1], rng);
    let beta = random_tensor([1, 4, 1, 1], rng);
    for groups in [1, 2] {
        let inputs = [x.clone(), gamma.clone(), beta.clone()];
        out.push(timed(&format!("group_norm_g{groups}"), OP_TOLERANCE, || {
            grad_check(
                |t, v| {
                    let y = t.group_norm(v[0], groups, v[1], v[2])?;
                    project(t, y, 2)
                },
                &inputs,
                OP_STEP,
            )
        })?);
    }

    for (axis, an) in [(PoolAxis::Spatial, "spatial"), (PoolAxis::Channel, "channel")] {
        for (mode, mn) in [(PoolMode::Avg, "avg"), (PoolMode::Max, "max")] {
            let inputs = [random_tensor([2, 3, 4, 5], rng)];
            out.push(timed(&format!("pool_{an}_{mn}"), OP_TOLERANCE, || {
                grad_check(
                    |t, v| {
                        let y = t.pool(v[0], axis, mode)?;
                        project(t, y, 3)
                    },
                    &inputs,
                    OP_STEP,
                )
            })?);
        }
    }

    let inputs = [random_tensor([1, 2, 4, 6], rng)];
    out.push(timed("avg_pool2x", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.avg_pool2x(v[0])?;
                project(t, y, 4)
            },
            &inputs,
            OP_STEP,
        )
    })?);
    out.push(timed("upsample_bilinear2x", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.upsample_bilinear2x(v[0])?;
                project(t, y, 5)
            },
            &inputs,
            OP_STEP,
        )
    })?);

    let inputs = [random_tensor([1, 2, 3, 4], rng)];
    out.push(timed("sigmoid", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, 6)
            },
            &inputs,
            OP_STEP,
        )
    })?);
    let inputs = [off_zero([1, 2, 3, 4], rng)];
    out.push(timed("relu", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, 7)
            },
            &inputs,
            OP_STEP,
        )
    })?);

    // Second operand broadcast over channels and space, as in the attention blocks.
    let pairs = [
        (Shape::new(2, 3, 4, 4), Shape::new(2, 3, 4, 4)),
        (Shape::new(2, 3, 4, 4), Shape::new(2, 1, 4, 4)),
        (Shape::new(2, 3, 4, 4), Shape::new(2, 3, 1, 1)),
    ];
    for (sa, sb) in pairs {
        let inputs = [random_tensor(sa, rng), random_tensor(sb, rng)];
        let tag = format!("{}x{}x{}", sb.c, sb.h, sb.w);
        out.push(timed(&format!("add_{tag}"), OP_TOLERANCE, || {
            grad_check(
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, 8)
                },
                &inputs,
                OP_STEP,
            )
        })?);
        out.push(timed(&format!("mul_{tag}"), OP_TOLERANCE, || {
            grad_check(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, 9)
                },
                &inputs,
                OP_STEP,
            )
        })?);
    }

    let inputs = [random_tensor([1, 3, 2, 3], rng), random_tensor([1, 2, 2, 3], rng)];
    out.push(timed("concat_slice", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let y = t.channel_concat(&[v[0], v[1]])?;
                let y = t.slice_channels(y, 1, 3)?;
                project(t, y, 10)
            },
            &inputs,
            OP_STEP,
        )
    })?);

    let logits = random_tensor([1, 1, 8, 8], rng).map(|v| 2.0 * v);
    let target = Tensor::from_fn([1, 1, 8, 8], |_, _, _, _| f64::from(u8::from(rng.random_bool(0.3))));
    let inputs = [logits];
    out.push(timed("soft_iou_loss", OP_TOLERANCE, || {
        grad_check(
            |t, v| {
                let p = t.sigmoid(v[0])?;
                let y = t.constant(target.clone());
                soft_iou_loss(t, p, y, DEFAULT_LOSS_EPS)
            },
            &inputs,
            OP_STEP,
        )
    })?);
    Ok(out)
}

/// Parameters checked end to end: every weight, norm and unnormalized bias.
/// A bias feeding a per-channel norm has an exactly-zero gradient, which a
/// relative check can only score as noise, so those are left out.
pub fn network_check_paths(store: &ParamStore<f32>) -> Vec<String> {
    store
        .paths()
        .filter(|p| {
            let Some(base) = p.strip_suffix(".bias") else {
                return true;
            };
            store.get(&format!("{base}.norm.gamma")).is_none()
        })
        .map(str::to_owned)
        .collect()
}

/// `soft_iou_loss(network_forward(image))` on the tiny network, checked
/// against every image pixel and [`NETWORK_SAMPLES_PER_TENSOR`] spread
/// elements of each tensor from [`network_check_paths`].
pub fn network_check(seed: u64) -> Result<CheckResult> {
    let cfg = NetConfig::tiny();
    let params = build_network(&cfg, seed)?;
    let store = params.store.cast::<f64>();
    let paths = network_check_paths(&params.store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = NETWORK_SIZE;
    let image = Tensor::from_fn([1, 1, n, n], |_, _, _, _| rng.random_range(0.0..=1.0));
    let target = Tensor::from_fn([1, 1, n, n], |_, _, h, w| {
        f64::from(u8::from((h as isize - 12).abs() <= 1 && (w as isize - 20).abs() <= 1))
    });

    let mut inputs = vec![image];
    for p in &paths {
        inputs.push(store.get(p).expect("listed path").value.clone());
    }
    let mut elements = vec![(0..n * n).collect::<Vec<_>>()];
    elements.extend(inputs[1..].iter().map(|t| spread_indices(t.numel(), NETWORK_SAMPLES_PER_TENSOR)));
    timed("network_end_to_end", NETWORK_TOLERANCE, || {
        grad_check_elements(
            |t, v| {
                let mut bound = store.bind(t, false);
                for (p, &var) in paths.iter().zip(&v[1..]) {
                    bound.rebind(p, var)?;
                }
                let out = network_forward(t, &bound, &cfg, v[0])?;
                let y = t.constant(target.clone());
                soft_iou_loss(t, out.probs, y, DEFAULT_LOSS_EPS)
            },
            &inputs,
            NETWORK_STEP,
            &elements,
        )
    })
}

/// [`op_checks`] followed by [`network_check`].
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.push(network_check(seed)?);
    Ok(out)
}
