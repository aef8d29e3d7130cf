use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-`(item, group)` statistics kept for the backward pass.
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check<T: Element>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c;
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            lhs: x.shape(),
            rhs: gamma.shape(),
        });
    }
    Ok(())
}

pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    group_norm_with_stats(x, groups, gamma, beta).map(|(y, _)| y)
}

pub(crate) fn group_norm_with_stats<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    check(x, groups, gamma, beta)?;
    let s = x.shape();
    let per_group = s.c / groups;
    let len = per_group * s.plane();
    let count = T::lit(len as f64);
    let eps = T::lit(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); s.numel()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(s.n * groups),
        rstd: Vec::with_capacity(s.n * groups),
    };
    for (gi, (src, dst)) in x.data().chunks(len).zip(out.chunks_mut(len)).enumerate() {
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let rstd = T::one() / (var + eps).sqrt();
        let c0 = (gi % groups) * per_group;
        for (ci, (sp, dp)) in src.chunks(s.plane()).zip(dst.chunks_mut(s.plane())).enumerate() {
            let (g, b) = (gamma.data()[c0 + ci], beta.data()[c0 + ci]);
            for (&v, d) in sp.iter().zip(dp) {
                *d = (v - mean) * rstd * g + b;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(s, out)?, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let per_group = s.c / groups;
    let len = per_group * s.plane();
    let count = T::lit(len as f64);
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (gi, ((src, gs), dst)) in x
        .data()
        .chunks(len)
        .zip(g.data().chunks(len))
        .zip(dx.chunks_mut(len))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let c0 = (gi % groups) * per_group;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for (ci, (sp, gp)) in src.chunks(s.plane()).zip(gs.chunks(s.plane())).enumerate() {
            let gam = gamma.data()[c0 + ci];
            let mut dgam = T::zero();
            let mut dbet = T::zero();
            for (&v, &gv) in sp.iter().zip(gp) {
                let xhat = (v - mean) * rstd;
                dgam = dgam + gv * xhat;
                dbet = dbet + gv;
                sum_dxhat = sum_dxhat + gv * gam;
                sum_dxhat_xhat = sum_dxhat_xhat + gv * gam * xhat;
            }
            dgamma[c0 + ci] = dgamma[c0 + ci] + dgam;
            dbeta[c0 + ci] = dbeta[c0 + ci] + dbet;
        }
        let mean_dxhat = sum_dxhat / count;
        let mean_dxhat_xhat = sum_dxhat_xhat / count;
        for (ci, ((sp, gp), dp)) in src
            .chunks(s.plane())
            .zip(gs.chunks(s.plane()))
            .zip(dst.chunks_mut(s.plane()))
            .enumerate()
        {
            let gam = gamma.data()[c0 + ci];
            for ((&v, &gv), d) in sp.iter().zip(gp).zip(dp) {
                let xhat = (v - mean) * rstd;
                *d = rstd * (gv * gam - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    let cshape = gamma.shape();
    (
        Tensor::new(s, dx).expect("dx shape"),
        Tensor::new(cshape, dgamma).expect("dgamma shape"),
        Tensor::new(cshape, dbeta).expect("dbeta shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize, g: f32, b: f32) -> (Tensor<f32>, Tensor<f32>) {
        (Tensor::full([1, c, 1, 1], g), Tensor::full([1, c, 1, 1], b))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f32>::full([2, 4, 3, 3], 2.5);
        let (g, b) = affine(4, 1.0, 0.0);
        let y = group_norm(&x, 2, &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_one_group() {
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = group_norm(&x, 1, &g, &b).unwrap();
        // mean 1, variance 1, so (x - 1) / sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!((y.data()[1] - expected).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn beta_shifts_constant() {
        let x = Tensor::<f32>::full([1, 2, 2, 2], -3.0);
        let (g, b) = affine(2, 1.0, 5.0);
        let y = group_norm(&x, 1, &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn indivisible_groups() {
        let x = Tensor::<f32>::zeros([1, 6, 2, 2]);
        let (g, b) = affine(6, 1.0, 0.0);
        assert!(group_norm(&x, 4, &g, &b).is_err());
    }
}
