use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros() }
    }
}

/// Bias-corrected Adam step `step` (1-based). Gradients are read, not cleared.
pub fn adam_update(
    params: &mut ParamStore<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("adam_update", "step counts from 1"));
    }
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_update",
            format!("optimizer state covers {} tensors, store has {}", state.m.len(), params.len()),
        ));
    }
    let (b1, b2) = cfg.betas;
    let correct1 = 1.0 - b1.powi(step as i32);
    let correct2 = 1.0 - b2.powi(step as i32);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let step_size = (cfg.lr / correct1) as f32;
    let rcorrect2 = (1.0 / correct2.sqrt()) as f32;
    let eps = cfg.eps as f32;

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.grad.shape() != p.value.shape() || m.shape() != p.value.shape() {
            return Err(Error::invalid(
                "adam_update",
                format!("gradient for {} missing or misshapen", p.path),
            ));
        }
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1f * *mi + (1.0 - b1f) * g;
            *vi = b2f * *vi + (1.0 - b2f) * g * g;
            *w -= step_size * *mi / (vi.sqrt() * rcorrect2 + eps);
        }
    }
    Ok(())
}
