//! Fixed 2×2 directional kernels and the parameter-free high-frequency
//! injection applied to the raw image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvOptions, Padding};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
    /// Low-pass ("zero direction") branch.
    Low,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::Diagonal,
        Direction::Low,
    ];

    pub const HIGH_PASS: [Direction; 3] =
        [Direction::Horizontal, Direction::Vertical, Direction::Diagonal];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::Diagonal => "diagonal",
            Direction::Low => "low",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid("direction", format!("unknown direction {s:?}")))
    }
}

/// A constant 2×2 kernel, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedKernel(pub [[f32; 2]; 2]);

impl FixedKernel {
    pub fn sum(&self) -> f32 {
        self.0.iter().flatten().sum()
    }

    pub fn dot(&self, other: &FixedKernel) -> f32 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let [[a, b], [c, d]] = self.0;
        Tensor::new([1, 1, 2, 2], [a, b, c, d].map(|v| T::lit(v as f64)).to_vec())
            .expect("2×2 kernel")
    }
}

pub fn directional_kernel(d: Direction) -> FixedKernel {
    FixedKernel(match d {
        Direction::Horizontal => [[0.5, -0.5], [0.5, -0.5]],
        Direction::Vertical => [[0.5, 0.5], [-0.5, -0.5]],
        Direction::Diagonal => [[0.5, -0.5], [-0.5, 0.5]],
        Direction::Low => [[0.5, 0.5], [0.5, 0.5]],
    })
}

fn filter_options(shape: crate::tensor::Shape, stride: usize, padding: Padding) -> Result<ConvOptions> {
    if stride == 0 {
        return Err(Error::invalid("apply_fixed_filter", "stride must be ≥ 1"));
    }
    if padding == Padding::None && stride == 2 && (!shape.h.is_multiple_of(2) || !shape.w.is_multiple_of(2)) {
        return Err(Error::invalid(
            "apply_fixed_filter",
            format!("stride 2 needs even spatial dims, got {shape}"),
        ));
    }
    Ok(ConvOptions {
        stride,
        dilation: 1,
        padding,
    })
}

/// Filters every channel of `x` independently with the kernel for `d`.
pub fn apply_fixed_filter<T: Element>(
    x: &Tensor<T>,
    d: Direction,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = apply_fixed_filter_on(&mut tape, v, d, stride, padding)?;
    Ok(tape.value(out).clone())
}

/// Tape-recording form of [`apply_fixed_filter`]; the kernel is a constant.
pub fn apply_fixed_filter_on<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    d: Direction,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let opts = filter_options(tape.shape(x), stride, padding)?;
    tape.depthwise_fixed(x, &directional_kernel(d).to_tensor(), opts)
}

/// Three stride-2 high-pass responses of a single-channel image, stacked as
/// channels `[horizontal, vertical, diagonal]`.
pub fn hfdi<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(image.clone());
    let out = hfdi_on(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn hfdi_on<T: Element>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    let s = tape.shape(image);
    if s.c != 1 {
        return Err(Error::invalid("hfdi", format!("expects one channel, got {s}")));
    }
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid("hfdi", format!("spatial dims of {s} must be even")));
    }
    let parts = Direction::HIGH_PASS
        .into_iter()
        .map(|d| apply_fixed_filter_on(tape, image, d, 2, Padding::None))
        .collect::<Result<Vec<_>>>()?;
    tape.channel_concat(&parts)
}

/// Trainable parameters owned by the injection module: none.
pub const HFDI_PARAM_COUNT: usize = 0;
