use crate::tensor::{Element, Tensor};

/// Interpolation taps for one output coordinate: `(i0, i1, w0, w1)`.
type Taps<T> = (usize, usize, T, T);

/// Half-pixel-centred bilinear taps mapping `out_len` samples onto `in_len`,
/// clamping at the edges.
pub(crate) fn bilinear_taps<T: Element>(in_len: usize, out_len: usize) -> Vec<Taps<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    resize_bilinear(x, 2 * s.h, 2 * s.w)
}

/// Bilinear resampling of every plane to `oh × ow`. Both sizes must be nonzero.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let ty = bilinear_taps::<T>(s.h, oh);
    let tx = bilinear_taps::<T>(s.w, ow);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data().chunks(s.plane()) {
        for &(y0, y1, wy0, wy1) in &ty {
            let r0 = &plane[y0 * s.w..(y0 + 1) * s.w];
            let r1 = &plane[y1 * s.w..(y1 + 1) * s.w];
            for &(x0, x1, wx0, wx1) in &tx {
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bottom = r1[x0] * wx0 + r1[x1] * wx1;
                out.push(top * wy0 + bottom * wy1);
            }
        }
    }
    Tensor::new(s.with_hw(oh, ow), out).expect("resize shape")
}

pub(crate) fn upsample_bilinear2x_backward<T: Element>(
    input: crate::tensor::Shape,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (oh, ow) = (2 * input.h, 2 * input.w);
    let ty = bilinear_taps::<T>(input.h, oh);
    let tx = bilinear_taps::<T>(input.w, ow);
    let mut dx = vec![T::zero(); input.numel()];
    for (plane, gp) in dx.chunks_mut(input.plane()).zip(g.data().chunks(oh * ow)) {
        for (yo, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gp[yo * ow + xo];
                let (a, b) = (gv * wy0, gv * wy1);
                plane[y0 * input.w + x0] = plane[y0 * input.w + x0] + a * wx0;
                plane[y0 * input.w + x1] = plane[y0 * input.w + x1] + a * wx1;
                plane[y1 * input.w + x0] = plane[y1 * input.w + x0] + b * wx0;
                plane[y1 * input.w + x1] = plane[y1 * input.w + x1] + b * wx1;
            }
        }
    }
    Tensor::new(input, dx).expect("upsample grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn two_samples_to_four() {
        let x = Tensor::<f32>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear2x(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::full([1, 2, 3, 5], 0.3);
        let y = upsample_bilinear2x(&x);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn doubles_shape() {
        let y = upsample_bilinear2x(&Tensor::<f32>::zeros([1, 64, 16, 16]));
        assert_eq!(y.shape(), Shape::new(1, 64, 32, 32));
    }
}
