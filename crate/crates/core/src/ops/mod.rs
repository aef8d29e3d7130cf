//! Forward numeric kernels on plain tensors, plus the adjoints the tape uses.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, ConvOptions, Padding};
pub use elementwise::{broadcast_shape, elementwise, sigmoid, Binary, ElementwiseKind, Unary};
pub use norm::{group_norm, GROUP_NORM_EPS};
pub use pool::{avg_pool2x, pool, PoolAxis, PoolMode};
pub use resize::{resize_bilinear, upsample_bilinear2x};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenates along channels; every input must share `(n, h, w)`.
pub fn channel_concat<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "empty input list"))?;
    let s = first.shape();
    for x in xs {
        let t = x.shape();
        if (t.n, t.h, t.w) != (s.n, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op: "channel_concat",
                lhs: s,
                rhs: t,
            });
        }
    }
    let total_c: usize = xs.iter().map(|x| x.shape().c).sum();
    let mut data = Vec::with_capacity(s.n * total_c * s.plane());
    for n in 0..s.n {
        for x in xs {
            let item = x.shape().c * s.plane();
            data.extend_from_slice(&x.data()[n * item..(n + 1) * item]);
        }
    }
    Tensor::new(s.with_c(total_c), data)
}
