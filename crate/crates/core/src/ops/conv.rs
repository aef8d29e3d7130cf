//! 2-D convolution and its adjoint. Wide layers go through im2col + GEMM;
//! narrow stride-1 layers accumulate shifted rows directly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    None,
    /// Zero padding so that stride 1 keeps `(h, w)`. An odd total pad puts the
    /// extra row/column at the bottom/right.
    SameZero,
    /// Like `SameZero` but out-of-range reads clamp to the nearest edge pixel.
    SameReplicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvOptions {
    pub const fn same(dilation: usize) -> Self {
        ConvOptions {
            stride: 1,
            dilation,
            padding: Padding::SameZero,
        }
    }

    pub const fn valid() -> Self {
        ConvOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::None,
        }
    }

    pub const fn strided(stride: usize, padding: Padding) -> Self {
        ConvOptions {
            stride,
            dilation: 1,
            padding,
        }
    }
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self::valid()
    }
}

/// Resolved index arithmetic for one convolution.
#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub opts: ConvOptions,
    /// Source row for each `(ki, oy)`, `None` for zero padding.
    rows: Vec<Option<usize>>,
    /// Source column for each `(kj, ox)`.
    cols: Vec<Option<usize>>,
    pad_top: usize,
    pad_left: usize,
    /// Use the row-accumulation kernels instead of im2col + GEMM.
    pub direct: bool,
}

/// Layers with at most this many output channels skip GEMM at stride 1.
const DIRECT_MAX_OUT_C: usize = 8;

/// For one kernel tap at stride 1: outputs `lo..hi` read inputs shifted by `off`.
#[derive(Clone, Copy)]
struct Span {
    lo: usize,
    hi: usize,
    off: isize,
}

impl Span {
    fn new(in_len: usize, out_len: usize, off: isize) -> Self {
        let lo = (-off).max(0) as usize;
        let hi = (in_len as isize - off).clamp(0, out_len as isize) as usize;
        Span {
            lo: lo.min(hi),
            hi,
            off,
        }
    }

    fn src(&self, o: usize) -> usize {
        (o as isize + self.off) as usize
    }
}

#[inline(always)]
fn axpy<T: Element>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

#[inline(always)]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn axis_table(
    len: usize,
    k: usize,
    out: usize,
    stride: usize,
    dilation: usize,
    pad_before: usize,
    replicate: bool,
) -> Vec<Option<usize>> {
    let mut table = Vec::with_capacity(k * out);
    for ki in 0..k {
        for o in 0..out {
            let pos = (o * stride + ki * dilation) as isize - pad_before as isize;
            let src = if (0..len as isize).contains(&pos) {
                Some(pos as usize)
            } else if replicate {
                Some(pos.clamp(0, len as isize - 1) as usize)
            } else {
                None
            };
            table.push(src);
        }
    }
    table
}

impl ConvGeometry {
    pub fn new(input: Shape, kernel: Shape, opts: ConvOptions) -> Result<Self> {
        let [out_c, in_c, kh, kw] = kernel.dims();
        if input.c != in_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input,
                rhs: kernel,
            });
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be ≥ 1"));
        }
        if out_c == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d", format!("empty kernel {kernel}")));
        }
        let ext_h = opts.dilation * (kh - 1) + 1;
        let ext_w = opts.dilation * (kw - 1) + 1;
        let (pad_h, pad_w) = match opts.padding {
            Padding::None => (0, 0),
            Padding::SameZero | Padding::SameReplicate => (ext_h - 1, ext_w - 1),
        };
        let (padded_h, padded_w) = (input.h + pad_h, input.w + pad_w);
        if padded_h < ext_h || padded_w < ext_w {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel extent {ext_h}×{ext_w} larger than padded input {padded_h}×{padded_w}"
                ),
            ));
        }
        let oh = (padded_h - ext_h) / opts.stride + 1;
        let ow = (padded_w - ext_w) / opts.stride + 1;
        if input.n == 0 || oh == 0 || ow == 0 {
            return Err(Error::invalid("conv2d", "zero-size output"));
        }
        let replicate = opts.padding == Padding::SameReplicate;
        let direct = opts.stride == 1 && !replicate && out_c <= DIRECT_MAX_OUT_C && kh * kw > 1;
        let rows = axis_table(input.h, kh, oh, opts.stride, opts.dilation, pad_h / 2, replicate);
        let cols = axis_table(input.w, kw, ow, opts.stride, opts.dilation, pad_w / 2, replicate);
        Ok(ConvGeometry {
            input,
            out_c,
            kh,
            kw,
            oh,
            ow,
            opts,
            rows,
            cols,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            direct,
        })
    }

    fn spans(&self) -> (Vec<Span>, Vec<Span>) {
        let d = self.opts.dilation as isize;
        let rows = (0..self.kh)
            .map(|ki| Span::new(self.input.h, self.oh, ki as isize * d - self.pad_top as isize))
            .collect();
        let cols = (0..self.kw)
            .map(|kj| Span::new(self.input.w, self.ow, kj as isize * d - self.pad_left as isize))
            .collect();
        (rows, cols)
    }

    /// Taps that only ever read padding are dropped.
    fn live_spans(&self) -> (Vec<(usize, Span)>, Vec<(usize, Span)>) {
        let (rs, cs) = self.spans();
        fn live(v: Vec<Span>) -> Vec<(usize, Span)> {
            v.into_iter().enumerate().filter(|(_, s)| s.lo < s.hi).collect()
        }
        (live(rs), live(cs))
    }

    /// `dst += conv(image)` for one batch item, `dst` holding `out_c` planes.
    fn direct_forward<T: Element>(&self, image: &[T], w: &[T], dst: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was just detected; the body is the portable one.
            return unsafe { self.direct_forward_avx2(image, w, dst) };
        }
        self.direct_forward_impl(image, w, dst)
    }

    /// Wider vectors only; the arithmetic order is unchanged, so results match bitwise.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn direct_forward_avx2<T: Element>(&self, image: &[T], w: &[T], dst: &mut [T]) {
        self.direct_forward_impl(image, w, dst)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn direct_backward_avx2<T: Element>(&self, image: &[T], w: &[T], g: &[T], dx: &mut [T], dw: &mut [T]) {
        self.direct_backward_impl(image, w, g, dx, dw)
    }

    /// Input and weight gradients of one batch item; `dw` accumulates.
    fn direct_backward<T: Element>(&self, image: &[T], w: &[T], g: &[T], dx: &mut [T], dw: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as in `direct_forward`.
            return unsafe { self.direct_backward_avx2(image, w, g, dx, dw) };
        }
        self.direct_backward_impl(image, w, g, dx, dw)
    }

    #[inline(always)]
    fn direct_forward_impl<T: Element>(&self, image: &[T], w: &[T], dst: &mut [T]) {
        let (h, wd, ow) = (self.input.h, self.input.w, self.ow);
        let (rs, cs) = self.live_spans();
        let taps = self.kh * self.kw;
        for (o, out) in dst.chunks_mut(self.out_plane()).enumerate() {
            for ci in 0..self.input.c {
                let plane = &image[ci * h * wd..(ci + 1) * h * wd];
                let wk = &w[(o * self.input.c + ci) * taps..][..taps];
                for &(ki, r) in &rs {
                    for oy in r.lo..r.hi {
                        let src = &plane[r.src(oy) * wd..][..wd];
                        let row = &mut out[oy * ow..][..ow];
                        for &(kj, c) in &cs {
                            axpy(&mut row[c.lo..c.hi], wk[ki * self.kw + kj], &src[c.src(c.lo)..]);
                        }
                    }
                }
            }
        }
    }

    #[inline(always)]
    fn direct_backward_impl<T: Element>(&self, image: &[T], w: &[T], g: &[T], dx: &mut [T], dw: &mut [T]) {
        let (h, wd, ow) = (self.input.h, self.input.w, self.ow);
        let (rs, cs) = self.live_spans();
        let taps = self.kh * self.kw;
        let p = self.out_plane();
        for ci in 0..self.input.c {
            let plane = &image[ci * h * wd..(ci + 1) * h * wd];
            let dplane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for o in 0..self.out_c {
                let gp = &g[o * p..(o + 1) * p];
                let base = (o * self.input.c + ci) * taps;
                for &(ki, r) in &rs {
                    for &(kj, c) in &cs {
                        let wv = w[base + ki * self.kw + kj];
                        let mut acc = T::zero();
                        for oy in r.lo..r.hi {
                            let grow = &gp[oy * ow + c.lo..oy * ow + c.hi];
                            let start = r.src(oy) * wd + c.src(c.lo);
                            acc = acc + dot(grow, &plane[start..start + grow.len()]);
                            axpy(&mut dplane[start..start + grow.len()], wv, grow);
                        }
                        dw[base + ki * self.kw + kj] = dw[base + ki * self.kw + kj] + acc;
                    }
                }
            }
        }
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.input.n, self.out_c, self.oh, self.ow)
    }

    fn patch_len(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 convolution reads the input plane as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1
    }

    fn im2col<T: Element>(&self, image: &[T], col: &mut [T]) {
        let (h, w) = (self.input.h, self.input.w);
        let p = self.out_plane();
        let mut row = 0;
        for ci in 0..self.input.c {
            let plane = &image[ci * h * w..(ci + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let src_cols = &self.cols[kj * self.ow..(kj + 1) * self.ow];
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.rows[ki * self.oh + oy] {
                            Some(iy) => {
                                let src = &plane[iy * w..(iy + 1) * w];
                                for (o, sx) in out.iter_mut().zip(src_cols) {
                                    *o = sx.map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                            None => out.fill(T::zero()),
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], image: &mut [T]) {
        let (h, w) = (self.input.h, self.input.w);
        let p = self.out_plane();
        let mut row = 0;
        for ci in 0..self.input.c {
            let plane = &mut image[ci * h * w..(ci + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &col[row * p..(row + 1) * p];
                    let src_cols = &self.cols[kj * self.ow..(kj + 1) * self.ow];
                    for oy in 0..self.oh {
                        if let Some(iy) = self.rows[ki * self.oh + oy] {
                            let dst = &mut plane[iy * w..(iy + 1) * w];
                            let g = &src[oy * self.ow..(oy + 1) * self.ow];
                            for (gv, sx) in g.iter().zip(src_cols) {
                                if let Some(ix) = sx {
                                    dst[*ix] = dst[*ix] + *gv;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Batches above this many output elements are split across threads.
const PAR_THRESHOLD: usize = 1 << 14;

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: ConvOptions,
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(x.shape(), w.shape(), opts)?;
    if let Some(b) = b {
        if b.numel() != geom.out_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
    }
    Ok(conv2d_with(&geom, x, w, b))
}

pub(crate) fn conv2d_with<T: Element>(
    geom: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let out_shape = geom.output_shape();
    let (k, p) = (geom.patch_len(), geom.out_plane());
    let in_item = geom.input.c * geom.input.plane();
    let mut out = vec![T::zero(); out_shape.numel()];

    let run = |(n, dst): (usize, &mut [T])| {
        let image = &x.data()[n * in_item..(n + 1) * in_item];
        if let Some(b) = b {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if geom.direct {
            geom.direct_forward(image, w.data(), dst);
        } else if geom.is_pointwise() {
            T::gemm(geom.out_c, k, p, w.data(), k, 1, image, p, 1, beta, dst);
        } else {
            let mut col = vec![T::zero(); k * p];
            geom.im2col(image, &mut col);
            T::gemm(geom.out_c, k, p, w.data(), k, 1, &col, p, 1, beta, dst);
        }
    };
    let item = geom.out_c * p;
    if out.len() >= PAR_THRESHOLD && geom.input.n > 1 {
        out.par_chunks_mut(item).enumerate().for_each(run);
    } else {
        out.chunks_mut(item).enumerate().for_each(run);
    }
    Tensor::new(out_shape, out).expect("conv output shape")
}

/// Row or column of the source plane read at each padded position.
fn padded_axis(len: usize, padded: usize, before: usize, replicate: bool) -> Vec<Option<usize>> {
    (0..padded)
        .map(|p| {
            let src = p as isize - before as isize;
            if (0..len as isize).contains(&src) {
                Some(src as usize)
            } else if replicate {
                Some(src.clamp(0, len as isize - 1) as usize)
            } else {
                None
            }
        })
        .collect()
}

impl ConvGeometry {
    /// Extent of the padded plane that the kernel actually visits.
    fn padded_dims(&self) -> (usize, usize) {
        let d = self.opts.dilation;
        (
            (self.oh - 1) * self.opts.stride + d * (self.kh - 1) + 1,
            (self.ow - 1) * self.opts.stride + d * (self.kw - 1) + 1,
        )
    }

    fn padded_maps(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let (ph, pw) = self.padded_dims();
        let replicate = self.opts.padding == Padding::SameReplicate;
        (
            padded_axis(self.input.h, ph, self.pad_top, replicate),
            padded_axis(self.input.w, pw, self.pad_left, replicate),
        )
    }
}

/// Applies the single-plane `kernel` to every `(h, w)` plane of `x`; the
/// geometry describes one plane.
pub(crate) fn depthwise_planes<T: Element>(geom: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (h, w) = (geom.input.h, geom.input.w);
    let (ph, pw) = geom.padded_dims();
    let (rmap, cmap) = geom.padded_maps();
    let (s, d, ow) = (geom.opts.stride, geom.opts.dilation, geom.ow);
    let run = |(plane, out): (&[T], &mut [T])| {
        let mut pad = vec![T::zero(); ph * pw];
        for (row, r) in pad.chunks_mut(pw).zip(&rmap) {
            if let Some(r) = r {
                for (v, c) in row.iter_mut().zip(&cmap) {
                    *v = c.map_or(T::zero(), |c| plane[r * w + c]);
                }
            }
        }
        // Positive and negative taps are summed apart so that equal inputs
        // under opposite taps (replicated borders, flat regions) cancel exactly.
        let mut neg = vec![T::zero(); out.len()];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let kv = kernel[ki * geom.kw + kj];
                let (acc, kv) = if kv < T::zero() { (&mut neg[..], -kv) } else { (&mut out[..], kv) };
                for (oy, orow) in acc.chunks_mut(ow).enumerate() {
                    let prow = &pad[(oy * s + ki * d) * pw + kj * d..];
                    if s == 1 {
                        axpy(orow, kv, &prow[..ow]);
                    } else {
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o = *o + kv * prow[ox * s];
                        }
                    }
                }
            }
        }
        for (o, n) in out.iter_mut().zip(&neg) {
            *o = *o - *n;
        }
    };
    let out_plane = geom.out_plane();
    let mut out = vec![T::zero(); x.len() / (h * w) * out_plane];
    if out.len() >= PAR_THRESHOLD {
        x.par_chunks(h * w).zip(out.par_chunks_mut(out_plane)).for_each(run);
    } else {
        x.chunks(h * w).zip(out.chunks_mut(out_plane)).for_each(run);
    }
    out
}

/// Input gradient of [`depthwise_planes`].
pub(crate) fn depthwise_planes_backward<T: Element>(geom: &ConvGeometry, kernel: &[T], g: &[T]) -> Vec<T> {
    let (h, w) = (geom.input.h, geom.input.w);
    let (ph, pw) = geom.padded_dims();
    let (rmap, cmap) = geom.padded_maps();
    let (s, d, ow) = (geom.opts.stride, geom.opts.dilation, geom.ow);
    let run = |(gp, dx): (&[T], &mut [T])| {
        let mut pad = vec![T::zero(); ph * pw];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let kv = kernel[ki * geom.kw + kj];
                for (oy, grow) in gp.chunks(ow).enumerate() {
                    let prow = &mut pad[(oy * s + ki * d) * pw + kj * d..];
                    if s == 1 {
                        axpy(&mut prow[..ow], kv, grow);
                    } else {
                        for (ox, &gv) in grow.iter().enumerate() {
                            prow[ox * s] = prow[ox * s] + kv * gv;
                        }
                    }
                }
            }
        }
        for (row, r) in pad.chunks(pw).zip(&rmap) {
            if let Some(r) = r {
                for (v, c) in row.iter().zip(&cmap) {
                    if let Some(c) = c {
                        dx[r * w + c] = dx[r * w + c] + *v;
                    }
                }
            }
        }
    };
    let out_plane = geom.out_plane();
    let mut dx = vec![T::zero(); g.len() / out_plane * h * w];
    if dx.len() >= PAR_THRESHOLD {
        g.par_chunks(out_plane).zip(dx.par_chunks_mut(h * w)).for_each(run);
    } else {
        g.chunks(out_plane).zip(dx.chunks_mut(h * w)).for_each(run);
    }
    dx
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    geom: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> ConvGrads<T> {
    let (k, p) = (geom.patch_len(), geom.out_plane());
    let in_item = geom.input.c * geom.input.plane();
    let out_item = geom.out_c * p;
    let n_items = geom.input.n;

    let per_item = |n: usize| -> (Vec<T>, Vec<T>) {
        let image = &x.data()[n * in_item..(n + 1) * in_item];
        let g = &gout.data()[n * out_item..(n + 1) * out_item];
        let mut dw = vec![T::zero(); geom.out_c * k];
        let mut dx = vec![T::zero(); in_item];
        if geom.direct {
            geom.direct_backward(image, w.data(), g, &mut dx, &mut dw);
        } else if geom.is_pointwise() {
            T::gemm(geom.out_c, p, k, g, p, 1, image, 1, p, T::zero(), &mut dw);
            T::gemm(k, geom.out_c, p, w.data(), 1, k, g, p, 1, T::zero(), &mut dx);
        } else {
            let mut col = vec![T::zero(); k * p];
            geom.im2col(image, &mut col);
            T::gemm(geom.out_c, p, k, g, p, 1, &col, 1, p, T::zero(), &mut dw);
            T::gemm(k, geom.out_c, p, w.data(), 1, k, g, p, 1, T::zero(), &mut col);
            geom.col2im(&col, &mut dx);
        }
        (dx, dw)
    };
    let parts: Vec<(Vec<T>, Vec<T>)> = if gout.numel() >= PAR_THRESHOLD && n_items > 1 {
        (0..n_items).into_par_iter().map(per_item).collect()
    } else {
        (0..n_items).map(per_item).collect()
    };

    let mut dx = Vec::with_capacity(n_items * in_item);
    let mut dw = vec![T::zero(); geom.out_c * k];
    for (pdx, pdw) in parts {
        dx.extend_from_slice(&pdx);
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); geom.out_c];
    for n in 0..n_items {
        for (o, acc) in db.iter_mut().enumerate() {
            let start = n * out_item + o * p;
            *acc = *acc + gout.data()[start..start + p].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        dx: Tensor::new(geom.input, dx).expect("dx shape"),
        dw: Tensor::new(Shape::new(geom.out_c, geom.input.c, geom.kh, geom.kw), dw)
            .expect("dw shape"),
        db: Tensor::new(Shape::new(1, geom.out_c, 1, 1), db).expect("db shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight from the definition, one output element at a time.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, opts: ConvOptions) -> Tensor<f64> {
        let [oc, ic, kh, kw] = w.shape().dims();
        let s = x.shape();
        let (ext_h, ext_w) = (opts.dilation * (kh - 1) + 1, opts.dilation * (kw - 1) + 1);
        let (ph, pw) = match opts.padding {
            Padding::None => (0, 0),
            _ => (ext_h - 1, ext_w - 1),
        };
        let oh = (s.h + ph - ext_h) / opts.stride + 1;
        let ow = (s.w + pw - ext_w) / opts.stride + 1;
        Tensor::from_fn([s.n, oc, oh, ow], |n, o, y, xo| {
            let mut acc = 0.0;
            for c in 0..ic {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (y * opts.stride + i * opts.dilation) as isize - (ph / 2) as isize;
                        let ix = (xo * opts.stride + j * opts.dilation) as isize - (pw / 2) as isize;
                        let v = match opts.padding {
                            Padding::SameReplicate => x.at(
                                n,
                                c,
                                iy.clamp(0, s.h as isize - 1) as usize,
                                ix.clamp(0, s.w as isize - 1) as usize,
                            ),
                            _ if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize => {
                                0.0
                            }
                            _ => x.at(n, c, iy as usize, ix as usize),
                        };
                        acc += v * w.at(o, c, i, j);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn two_by_two_window_dot_product() {
        let x = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let w = Tensor::new([1, 1, 2, 2], vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let y = conv2d(&x, &w, None, ConvOptions::valid()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = pseudo([2, 3, 5, 4], 1).cast::<f32>();
        let w = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let b = Tensor::zeros([1, 3, 1, 1]);
        let y = conv2d(&x, &w, Some(&b), ConvOptions::valid()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_same_shape() {
        let x = Tensor::<f32>::zeros([2, 3, 32, 32]);
        let w = Tensor::zeros([8, 3, 3, 3]);
        let y = conv2d(&x, &w, None, ConvOptions::same(2)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 8, 32, 32));
    }

    #[test]
    fn matches_definition() {
        let cases = [
            ([2, 3, 7, 6], [4, 3, 3, 3], ConvOptions::valid()),
            ([1, 2, 8, 8], [3, 2, 3, 3], ConvOptions::same(1)),
            ([1, 2, 9, 8], [2, 2, 3, 3], ConvOptions::same(3)),
            ([2, 2, 8, 8], [3, 2, 3, 3], ConvOptions::strided(2, Padding::SameZero)),
            ([1, 3, 6, 6], [2, 3, 2, 2], ConvOptions::strided(1, Padding::SameReplicate)),
            ([1, 1, 6, 7], [1, 1, 5, 5], ConvOptions::same(1)),
            ([2, 4, 5, 5], [3, 4, 1, 1], ConvOptions::valid()),
            ([1, 3, 7, 9], [12, 3, 3, 3], ConvOptions::same(2)),
            ([1, 2, 4, 4], [2, 2, 3, 3], ConvOptions::same(5)),
        ];
        for (i, (xs, ws, opts)) in cases.into_iter().enumerate() {
            let x = pseudo(xs, i as u64);
            let w = pseudo(ws, 100 + i as u64);
            let got = conv2d(&x, &w, None, opts).unwrap();
            let want = conv_oracle(&x, &w, opts);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "case {i}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), None, ConvOptions::valid()).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 5, 5]), None, ConvOptions::valid()).is_err());
        let opts = ConvOptions {
            stride: 0,
            ..ConvOptions::valid()
        };
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 1, 1]), None, opts).is_err());
    }

    #[test]
    fn direct_and_gemm_agree() {
        let cases = [
            ([2, 3, 9, 7], [4, 3, 3, 3], ConvOptions::same(1)),
            ([1, 4, 8, 8], [4, 4, 5, 5], ConvOptions::same(1)),
            ([2, 2, 10, 6], [3, 2, 3, 3], ConvOptions::same(3)),
            ([1, 2, 3, 3], [2, 2, 3, 3], ConvOptions::same(5)),
            ([1, 2, 7, 6], [3, 2, 2, 4], ConvOptions::valid()),
        ];
        for (i, (xs, ws, opts)) in cases.into_iter().enumerate() {
            let x = pseudo(xs, 40 + i as u64);
            let w = pseudo(ws, 50 + i as u64);
            let mut geom = ConvGeometry::new(x.shape(), w.shape(), opts).unwrap();
            assert!(geom.direct, "case {i}");
            let y_direct = conv2d_with(&geom, &x, &w, None);
            let g = pseudo(y_direct.shape().dims(), 60 + i as u64);
            let b_direct = conv2d_backward(&geom, &x, &w, &g);
            geom.direct = false;
            let y_gemm = conv2d_with(&geom, &x, &w, None);
            let b_gemm = conv2d_backward(&geom, &x, &w, &g);
            assert!(y_direct.max_abs_diff(&y_gemm).unwrap() < 1e-12, "case {i}");
            assert!(b_direct.dx.max_abs_diff(&b_gemm.dx).unwrap() < 1e-12, "case {i}");
            assert!(b_direct.dw.max_abs_diff(&b_gemm.dw).unwrap() < 1e-12, "case {i}");
        }
    }

    #[test]
    fn depthwise_matches_conv() {
        let cases = [
            ([2, 3, 6, 7], ConvOptions::strided(1, Padding::SameReplicate)),
            ([1, 2, 8, 8], ConvOptions::strided(2, Padding::None)),
            ([1, 2, 7, 9], ConvOptions::strided(2, Padding::SameZero)),
            ([3, 1, 5, 5], ConvOptions { stride: 1, dilation: 2, padding: Padding::SameZero }),
        ];
        for (i, (xs, opts)) in cases.into_iter().enumerate() {
            let x = pseudo(xs, 70 + i as u64);
            let k = pseudo([1, 1, 2, 3], 80 + i as u64);
            let s = x.shape();
            let flat = Shape::new(s.n * s.c, 1, s.h, s.w);
            let geom = ConvGeometry::new(flat, k.shape(), opts).unwrap();
            let xf = Tensor::new(flat, x.data().to_vec()).unwrap();
            let want = conv2d_with(&geom, &xf, &k, None);
            let got = depthwise_planes(&geom, x.data(), k.data());
            let diff = got.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "case {i}");
            let g = pseudo(want.shape().dims(), 90 + i as u64);
            let want_dx = conv2d_backward(&geom, &xf, &k, &g).dx;
            let got_dx = depthwise_planes_backward(&geom, k.data(), g.data());
            let diff = got_dx.iter().zip(want_dx.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "case {i}");
        }
    }

    #[test]
    fn depthwise_replicated_border_cancels_exactly() {
        let x = pseudo([1, 3, 5, 6], 7);
        let k = Tensor::new([1, 1, 2, 2], vec![0.5, 0.5, -0.5, -0.5]).unwrap();
        let flat = Shape::new(3, 1, 5, 6);
        let geom = ConvGeometry::new(flat, k.shape(), ConvOptions::strided(1, Padding::SameReplicate)).unwrap();
        let out = depthwise_planes(&geom, x.data(), k.data());
        // The last output row reads the bottom row twice, once under each sign.
        for plane in out.chunks(geom.out_plane()) {
            assert!(plane[(geom.oh - 1) * geom.ow..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x), g> == <x, dx> + <w, dw> / 2 for a bias-free bilinear form.
        let opts = ConvOptions {
            stride: 2,
            dilation: 2,
            padding: Padding::SameReplicate,
        };
        let x = pseudo([2, 3, 9, 8], 7);
        let w = pseudo([4, 3, 3, 3], 8);
        let geom = ConvGeometry::new(x.shape(), w.shape(), opts).unwrap();
        let y = conv2d_with(&geom, &x, &w, None);
        let g = pseudo(y.shape().dims(), 9);
        let grads = conv2d_backward(&geom, &x, &w, &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(grads.dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(grads.dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
