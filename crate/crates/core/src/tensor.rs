//! Dense 4-D tensors in `(batch, channel, height, width)` layout.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type a tensor can hold.
///
/// Training and inference run in `f32`. Gradient checking evaluates the same
/// programs in `f64` so that finite differences are not swamped by rounding.
pub trait Element:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    /// Row-major `c = a · b + beta · c` where `a` is `m × k` with strides
    /// `(rsa, csa)`, `b` is `k × n` with strides `(rsb, csb)` and `c` is a
    /// contiguous `m × n` matrix.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    (a_len, rsa, csa): (usize, usize, usize),
    (b_len, rsb, csb): (usize, usize, usize),
    c_len: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a_len, "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(
                    m,
                    k,
                    n,
                    (a.len(), rsa, csa),
                    (b.len(), rsb, csb),
                    c.len(),
                );
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl From<[usize; 4]> for Shape {
    fn from([n, c, h, w]: [usize; 4]) -> Self {
        Shape { n, c, h, w }
    }
}

impl From<Shape> for [usize; 4] {
    fn from(s: Shape) -> Self {
        s.dims()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape} needs {} values, got {}",
                    shape.numel(),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(
        shape: impl Into<Shape>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Builds a `(1, 1, h, w)` tensor from rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(Shape::new(1, 1, h, w), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(
                "item",
                format!("tensor of shape {} is not a scalar", self.shape),
            )),
        }
    }

    /// One `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Channels `start..start + len` of every batch item.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c || len == 0 {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {s}", start + len),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            shape: s.with_c(len),
            data,
        })
    }

    /// Batch items `start..start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.n || len == 0 {
            return Err(Error::invalid(
                "slice_batch",
                format!("items {start}..{} out of range for {s}", start + len),
            ));
        }
        let item = s.c * s.plane();
        Ok(Tensor {
            shape: Shape { n: len, ..s },
            data: self.data[start * item..(start + len) * item].to_vec(),
        })
    }

    /// Stacks tensors with identical `(c, h, w)` along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.len() * s.numel());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: s,
                    rhs: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..s },
            data,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max)
        })
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new([1, 1, 2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.shape().offset(1, 0, 2, 1)], 1021.0);
    }

    #[test]
    fn channel_slices_cover_tensor() {
        let t = Tensor::<f32>::from_fn([2, 5, 3, 3], |n, c, h, w| (n + c * 7 + h * 3 + w) as f32);
        let a = t.slice_channels(0, 2).unwrap();
        let b = t.slice_channels(2, 3).unwrap();
        assert_eq!(a.shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(b.at(1, 0, 2, 2), t.at(1, 2, 2, 2));
        assert!(t.slice_channels(4, 2).is_err());
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // a = [[1,2],[3,4]] read transposed -> [[1,3],[2,4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, 1, 2, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn shape_serializes_as_array() {
        let s = Shape::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[1,2,3,4]");
    }
}
