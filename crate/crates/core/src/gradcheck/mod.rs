//! Finite-difference verification of tape gradients.

pub mod suite;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub use suite::{network_check, op_checks, run_suite, CheckResult};

/// Times a central difference may cut its step by 10 to keep both probes on
/// the base point's side of every relu and max-pool kink.
pub const MAX_STEP_SHRINKS: usize = 3;

/// Max over every input element of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`, with the numeric
/// derivative taken by central differences of step `eps`. A stencil that
/// straddles a kink is retried at a tenth of the step, up to
/// [`MAX_STEP_SHRINKS`] times.
pub fn grad_check<T, F>(program: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Sync,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_elements(program, inputs, eps, &all)
}

/// `k` indices spread evenly over `0..len`, ends included; all of them when `len ≤ k`.
pub fn spread_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    if k <= 1 {
        return vec![0; k];
    }
    (0..k).map(|i| i * (len - 1) / (k - 1)).collect()
}

/// [`grad_check`] restricted to `elements[k]` of input `k`.
pub fn grad_check_elements<T, F>(program: F, inputs: &[Tensor<T>], eps: f64, elements: &[Vec<usize>]) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Sync,
{
    if elements.len() != inputs.len() {
        return Err(Error::invalid(
            "grad_check",
            format!("{} element lists for {} inputs", elements.len(), inputs.len()),
        ));
    }
    if let Some((k, i)) = elements
        .iter()
        .enumerate()
        .find_map(|(k, e)| e.iter().find(|&&i| i >= inputs[k].numel()).map(|&i| (k, i)))
    {
        return Err(Error::invalid("grad_check", format!("element {i} out of range for input {k}")));
    }
    let evaluate = |values: &[Tensor<T>]| -> Result<(f64, Vec<u32>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = program(&mut tape, &vars)?;
        let value = tape
            .value(out)
            .item()
            .map_err(|_| Error::invalid("grad_check", "program output is not a scalar"))?;
        Ok((value.to_f64_lossy(), tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("program output has shape {}, expected a scalar", tape.shape(out)),
        ));
    }
    let grads = tape.backward(out)?;
    let base = tape.branch_pattern();
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    for (k, picks) in elements.iter().enumerate() {
        let errors = picks
            .par_iter()
            .map(|&i| -> Result<f64> {
                let mut values = inputs.to_vec();
                let orig = values[k].data()[i];
                let mut h = eps;
                let mut numeric = 0.0;
                for attempt in 0..=MAX_STEP_SHRINKS {
                    values[k].data_mut()[i] = orig + T::lit(h);
                    let (plus, p_plus) = evaluate(&values)?;
                    values[k].data_mut()[i] = orig - T::lit(h);
                    let (minus, p_minus) = evaluate(&values)?;
                    numeric = (plus - minus) / (2.0 * h);
                    if (p_plus == base && p_minus == base) || attempt == MAX_STEP_SHRINKS {
                        break;
                    }
                    h /= 10.0;
                }
                let exact = analytic[k].data()[i].to_f64_lossy();
                let denom = exact.abs().max(numeric.abs()).max(1e-8);
                Ok((exact - numeric).abs() / denom)
            })
            .collect::<Result<Vec<f64>>>()?;
        worst = errors.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}
