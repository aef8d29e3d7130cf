use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolAxis {
    /// Reduce `(h, w)` to `(1, 1)` per channel.
    Spatial,
    /// Reduce channels to one per pixel.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

pub struct Pooled<T> {
    pub output: Tensor<T>,
    /// Flat input index chosen by each output element (max mode only).
    pub argmax: Vec<usize>,
}

pub fn pool<T: Element>(x: &Tensor<T>, axis: PoolAxis, mode: PoolMode) -> Result<Tensor<T>> {
    pool_with_argmax(x, axis, mode).map(|p| p.output)
}

/// Input indices reduced into output element `o`, as `(first, step, count)`.
fn reduction_window(s: Shape, axis: PoolAxis, o: usize) -> (usize, usize, usize) {
    match axis {
        PoolAxis::Spatial => (o * s.plane(), 1, s.plane()),
        PoolAxis::Channel => {
            let (n, px) = (o / s.plane(), o % s.plane());
            (n * s.c * s.plane() + px, s.plane(), s.c)
        }
    }
}

fn output_shape(s: Shape, axis: PoolAxis) -> Shape {
    match axis {
        PoolAxis::Spatial => s.with_hw(1, 1),
        PoolAxis::Channel => s.with_c(1),
    }
}

pub(crate) fn pool_with_argmax<T: Element>(
    x: &Tensor<T>,
    axis: PoolAxis,
    mode: PoolMode,
) -> Result<Pooled<T>> {
    let s = x.shape();
    if s.numel() == 0 {
        return Err(Error::invalid("pool", "empty input"));
    }
    let out_shape = output_shape(s, axis);
    let d = x.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::new();
    for o in 0..out_shape.numel() {
        let (first, step, count) = reduction_window(s, axis, o);
        let idx = (0..count).map(|i| first + i * step);
        match mode {
            PoolMode::Avg => {
                let total: T = idx.map(|i| d[i]).sum();
                out.push(total / T::lit(count as f64));
            }
            PoolMode::Max => {
                // First occurrence wins on ties.
                let best = idx.fold(first, |best, i| if d[i] > d[best] { i } else { best });
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(out_shape, out)?,
        argmax,
    })
}

pub(crate) fn pool_backward<T: Element>(
    input: Shape,
    axis: PoolAxis,
    mode: PoolMode,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); input.numel()];
    match mode {
        PoolMode::Avg => {
            for (o, &gv) in g.data().iter().enumerate() {
                let (first, step, count) = reduction_window(input, axis, o);
                let share = gv / T::lit(count as f64);
                for i in 0..count {
                    dx[first + i * step] = dx[first + i * step] + share;
                }
            }
        }
        PoolMode::Max => {
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                dx[i] = dx[i] + gv;
            }
        }
    }
    Tensor::new(input, dx).expect("pool grad shape")
}

/// 2×2 average pooling with stride 2 (halves `h` and `w`).
pub fn avg_pool2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(
            "avg_pool2x",
            format!("spatial dims of {s} must be even and non-zero"),
        ));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data().chunks(s.plane()) {
        for y in 0..oh {
            let r0 = &plane[2 * y * s.w..(2 * y + 1) * s.w];
            let r1 = &plane[(2 * y + 1) * s.w..(2 * y + 2) * s.w];
            for xo in 0..ow {
                let v = r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1];
                out.push(v * quarter);
            }
        }
    }
    Tensor::new(s.with_hw(oh, ow), out)
}

pub(crate) fn avg_pool2x_backward<T: Element>(input: Shape, g: &Tensor<T>) -> Tensor<T> {
    let quarter = T::lit(0.25);
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut dx = vec![T::zero(); input.numel()];
    for (plane, gp) in dx.chunks_mut(input.plane()).zip(g.data().chunks(oh * ow)) {
        for y in 0..input.h {
            for xi in 0..input.w {
                plane[y * input.w + xi] = gp[(y / 2) * ow + xi / 2] * quarter;
            }
        }
    }
    Tensor::new(input, dx).expect("avg_pool2x grad shape")
}
