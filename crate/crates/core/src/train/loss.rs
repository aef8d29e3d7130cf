use crate::error::{Error, Result};
use crate::tape::{GradRule, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LOSS_EPS: f64 = 1e-6;

struct SoftIouGrad {
    eps: f64,
}

/// `(Σ p·y, Σ p, Σ y)` accumulated in f64.
fn soft_sums<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, f64, f64) {
    pred.data()
        .iter()
        .zip(target.data())
        .fold((0.0, 0.0, 0.0), |(i, p, y), (&pv, &yv)| {
            let (pv, yv) = (pv.to_f64_lossy(), yv.to_f64_lossy());
            (i + pv * yv, p + pv, y + yv)
        })
}

impl<T: Element> GradRule<T> for SoftIouGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let (inter, sum_p, sum_y) = soft_sums(pred, target);
        let num = inter + self.eps;
        let union = sum_p + sum_y - inter + self.eps;
        let upstream = grad.data()[0].to_f64_lossy();
        // d/dp_i of 1 − num/union with dnum/dp_i = y_i and dunion/dp_i = 1 − y_i.
        let dpred = target.map(|y| {
            let y = y.to_f64_lossy();
            let d = -(y * union - num * (1.0 - y)) / (union * union);
            T::lit(d * upstream)
        });
        vec![dpred, Tensor::zeros(target.shape())]
    }
}

fn check_inputs<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_iou_loss",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    if let Some(bad) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(
            "soft_iou_loss",
            format!("target must be binary, found {bad}"),
        ));
    }
    Ok(())
}

/// `1 − (Σ p·y + eps) / (Σ p + Σ y − Σ p·y + eps)` over the whole batch.
pub fn soft_iou_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    check_inputs(pred, target)?;
    let (inter, sum_p, sum_y) = soft_sums(pred, target);
    Ok(1.0 - (inter + eps) / (sum_p + sum_y - inter + eps))
}

/// Records the soft IoU loss on the tape; differentiable in `pred`.
pub fn soft_iou_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let loss = soft_iou_value(tape.value(pred), tape.value(target), eps)?;
    tape.custom(
        "soft_iou_loss",
        &[pred, target],
        Tensor::scalar(T::lit(loss)),
        Box::new(SoftIouGrad { eps }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn perfect_overlap() {
        let y = plane(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(soft_iou_value(&y, &y, DEFAULT_LOSS_EPS).unwrap() <= 1e-5);
    }

    #[test]
    fn partial_overlap() {
        let p = plane(&[&[1.0, 1.0, 0.0]]);
        let y = plane(&[&[0.0, 1.0, 1.0]]);
        let loss = soft_iou_value(&p, &y, 0.0).unwrap();
        assert!((loss - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let p = plane(&[&[0.5, 0.5]]);
        assert!(soft_iou_value(&p, &plane(&[&[0.0, 0.5]]), 1e-6).is_err());
        assert!(soft_iou_value(&p, &plane(&[&[0.0]]), 1e-6).is_err());
    }

    #[test]
    fn more_confidence_on_hits_never_hurts() {
        let y = plane(&[&[1.0, 0.0, 1.0, 0.0]]);
        let mut p = plane(&[&[0.3, 0.6, 0.2, 0.1]]);
        let mut last = soft_iou_value(&p, &y, 1e-6).unwrap();
        for _ in 0..10 {
            p.data_mut()[0] += 0.05;
            let now = soft_iou_value(&p, &y, 1e-6).unwrap();
            assert!(now <= last);
            last = now;
        }
    }
}
