use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unary {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementwiseKind {
    Sigmoid,
    Relu,
    Add,
    Mul,
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn unary<T: Element>(x: &Tensor<T>, kind: Unary) -> Tensor<T> {
    match kind {
        Unary::Sigmoid => x.map(sigmoid),
        Unary::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// Gradient of a unary op given its input `x`, output `y` and upstream `g`.
pub(crate) fn unary_backward<T: Element>(
    kind: Unary,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let data = match kind {
        Unary::Sigmoid => y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
        Unary::Relu => x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    };
    Tensor::new(x.shape(), data).expect("unary grad shape")
}

/// Shape both operands broadcast to: every dim must agree or be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for (i, (da, db)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a,
                    rhs: b,
                })
            }
        };
    }
    Ok(Shape::from(out))
}

/// Element strides of `s` when read at broadcast shape `out` (0 on stretched dims).
fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let d = s.dims();
    let contiguous = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let od = out.dims();
    let mut strides = [0; 4];
    for i in 0..4 {
        strides[i] = if d[i] == od[i] { contiguous[i] } else { 0 };
    }
    strides
}

fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w {
                    f(o, ia + w * sa[3], ib + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub fn binary<T: Element>(x: &Tensor<T>, y: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
    match kind {
        Binary::Add => binary_with(x, y, |a, b| a + b),
        Binary::Mul => binary_with(x, y, |a, b| a * b),
    }
}

/// Monomorphised per op so `f` inlines into the loops.
fn binary_with<T: Element>(x: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let out = broadcast_shape(x.shape(), y.shape())?;
    if x.shape() == y.shape() {
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::new(out, data);
    }
    let (xd, yd) = (x.data(), y.data());
    let (xs, ys) = (x.shape(), y.shape());
    let plane = out.h * out.w;
    // Common case: each operand is either full-plane or one value per plane.
    let kind = |s: Shape| match (s.h, s.w) {
        (h, w) if h == out.h && w == out.w => Some(true),
        (1, 1) => Some(false),
        _ => None,
    };
    if let (Some(fx), Some(fy)) = (kind(xs), kind(ys)) {
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..out.n {
            for c in 0..out.c {
                let px = (if xs.n == 1 { 0 } else { n }) * xs.c + if xs.c == 1 { 0 } else { c };
                let py = (if ys.n == 1 { 0 } else { n }) * ys.c + if ys.c == 1 { 0 } else { c };
                match (fx, fy) {
                    (true, true) => data.extend(
                        xd[px * plane..][..plane].iter().zip(&yd[py * plane..][..plane]).map(|(&a, &b)| f(a, b)),
                    ),
                    (true, false) => data.extend(xd[px * plane..][..plane].iter().map(|&a| f(a, yd[py]))),
                    (false, true) => data.extend(yd[py * plane..][..plane].iter().map(|&b| f(xd[px], b))),
                    (false, false) => data.extend(std::iter::repeat_n(f(xd[px], yd[py]), plane)),
                }
            }
        }
        return Tensor::new(out, data);
    }
    let mut data = vec![T::zero(); out.numel()];
    for_each_broadcast(out, xs, ys, |o, i, j| data[o] = f(xd[i], yd[j]));
    Tensor::new(out, data)
}

/// Sums `g` (at broadcast shape) back down to `target`.
pub(crate) fn reduce_to<T: Element>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut data = vec![T::zero(); target.numel()];
    let (gd, gs) = (g.data(), g.shape());
    let plane = gs.h * gs.w;
    let full = target.h == gs.h && target.w == gs.w;
    if full || (target.h == 1 && target.w == 1) {
        let tp = if full { plane } else { 1 };
        for (k, gp) in gd.chunks(plane).enumerate() {
            let (n, c) = (k / gs.c, k % gs.c);
            let pt = (if target.n == 1 { 0 } else { n }) * target.c + if target.c == 1 { 0 } else { c };
            let dst = &mut data[pt * tp..][..tp];
            if full {
                for (d, &v) in dst.iter_mut().zip(gp) {
                    *d = *d + v;
                }
            } else {
                dst[0] = gp.iter().fold(dst[0], |s, &v| s + v);
            }
        }
        return Tensor::new(target, data).expect("reduce shape");
    }
    for_each_broadcast(g.shape(), g.shape(), target, |o, _, j| data[j] = data[j] + gd[o]);
    Tensor::new(target, data).expect("reduce shape")
}

/// Gradients of a broadcast binary op for both operands.
pub(crate) fn binary_backward<T: Element>(
    kind: Binary,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    match kind {
        Binary::Add => (reduce_to(g, x.shape()), reduce_to(g, y.shape())),
        Binary::Mul => {
            let gx = binary(g, y, Binary::Mul).expect("broadcast checked in forward");
            let gy = binary(g, x, Binary::Mul).expect("broadcast checked in forward");
            (reduce_to(&gx, x.shape()), reduce_to(&gy, y.shape()))
        }
    }
}

/// Applies `kind` as in the op table: unary kinds take no `y`, binary kinds require one.
pub fn elementwise<T: Element>(
    x: &Tensor<T>,
    y: Option<&Tensor<T>>,
    kind: ElementwiseKind,
) -> Result<Tensor<T>> {
    match (kind, y) {
        (ElementwiseKind::Sigmoid, None) => Ok(unary(x, Unary::Sigmoid)),
        (ElementwiseKind::Relu, None) => Ok(unary(x, Unary::Relu)),
        (ElementwiseKind::Add, Some(y)) => binary(x, y, Binary::Add),
        (ElementwiseKind::Mul, Some(y)) => binary(x, y, Binary::Mul),
        (ElementwiseKind::Sigmoid | ElementwiseKind::Relu, Some(_)) => Err(Error::invalid(
            "elementwise",
            format!("{kind:?} is unary but a second operand was supplied"),
        )),
        (ElementwiseKind::Add | ElementwiseKind::Mul, None) => Err(Error::invalid(
            "elementwise",
            format!("{kind:?} needs a second operand"),
        )),
    }
}
