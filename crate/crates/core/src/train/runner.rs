use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{build_network, check_input_shape, network_forward, NetConfig, NetworkParams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::adam::{adam_update, AdamState};
use crate::train::augment::augment;
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;
use crate::train::loss::soft_iou_loss;

pub const CHECKPOINT_FINAL: &str = "checkpoint_final.bin";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.bin";
pub const TRAIN_LOG: &str = "train_log.csv";

/// One row of the training log, written at the end of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Pixel IoU pooled over the epoch's augmented batches.
    pub train_iou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Snapshot at the end of the epoch with the lowest mean loss.
    pub best_checkpoint: Checkpoint,
    pub log: Vec<TrainRecord>,
}

pub fn log_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("epoch,step,loss,train_iou\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.epoch, r.step, r.loss, r.train_iou).expect("string write");
    }
    out
}

impl TrainOutcome {
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.final_checkpoint.save(&dir.join(CHECKPOINT_FINAL))?;
        self.best_checkpoint.save(&dir.join(CHECKPOINT_BEST))?;
        let log = dir.join(TRAIN_LOG);
        std::fs::write(&log, log_csv(&self.log)).map_err(|e| Error::io(&log, e))
    }
}

fn check_dataset(data: &[Sample]) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::Dataset("training set is empty".into()))?;
    for s in data {
        if s.image.shape() != s.mask.shape() {
            return Err(Error::Dataset(format!(
                "{}: image {} and mask {} differ",
                s.id,
                s.image.shape(),
                s.mask.shape()
            )));
        }
        if s.image.shape() != first.image.shape() {
            return Err(Error::Dataset(format!(
                "{}: shape {} differs from {} of {}",
                s.id,
                s.image.shape(),
                first.image.shape(),
                first.id
            )));
        }
        check_input_shape(s.image.shape())
            .map_err(|e| Error::Dataset(format!("{}: {e}", s.id)))?;
    }
    Ok(())
}

/// Pixel confusion counts `(tp, fp, fn)` of `probs > threshold` against `mask`.
fn confusion(probs: &Tensor<f32>, mask: &Tensor<f32>, threshold: f64) -> (u64, u64, u64) {
    let mut counts = (0, 0, 0);
    for (&p, &y) in probs.data().iter().zip(mask.data()) {
        match (f64::from(p) > threshold, y > 0.5) {
            (true, true) => counts.0 += 1,
            (true, false) => counts.1 += 1,
            (false, true) => counts.2 += 1,
            (false, false) => {}
        }
    }
    counts
}

/// Trains from a fresh network seeded by `train_cfg.seed`.
pub fn train_loop(net_cfg: &NetConfig, train_cfg: &TrainConfig, data: &[Sample]) -> Result<TrainOutcome> {
    train_loop_with(net_cfg, train_cfg, data, |_| ControlFlow::Continue(()))
}

/// [`train_loop`], calling `on_epoch` after each epoch; `Break` ends training after that epoch.
pub fn train_loop_with(
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    data: &[Sample],
    mut on_epoch: impl FnMut(&TrainRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    check_dataset(data)?;
    let mut params = build_network(net_cfg, train_cfg.seed)?;
    let mut state = AdamState::new(&params.store);
    let adam = train_cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, NetworkParams, u64)> = None;
    let mut step = 0u64;
    let mut tape = Tape::<f32>::new();

    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for chunk in order.chunks(train_cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, msk) = augment(&data[i].image, &data[i].mask, &mut rng, &train_cfg.augmentation)?;
                images.push(img);
                masks.push(msk);
            }
            let images = Tensor::stack_batch(&images)?;
            let masks = Tensor::stack_batch(&masks)?;

            tape.clear();
            let bound = params.store.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = network_forward(&mut tape, &bound, net_cfg, x)?;
            let target = tape.constant(masks);
            let loss = soft_iou_loss(&mut tape, out.probs, target, train_cfg.loss_epsilon)?;
            let grads = tape.backward(loss)?;

            let (a, b, c) = confusion(tape.value(out.probs), tape.value(target), net_cfg.binarize_threshold);
            tp += a;
            fp += b;
            fneg += c;
            let value = f64::from(tape.value(loss).item()?);
            if !value.is_finite() {
                return Err(Error::Backward(format!("non-finite loss at step {}", step + 1)));
            }
            loss_sum += value;
            batches += 1;

            params.store.zero_grad();
            params.store.accumulate_grads(&bound, &grads);
            step += 1;
            adam_update(&mut params.store, &mut state, &adam, step)?;
        }
        let denom = tp + fp + fneg;
        let record = TrainRecord {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            train_iou: if denom == 0 { 1.0 } else { tp as f64 / denom as f64 },
        };
        let flow = on_epoch(&record);
        if best.as_ref().is_none_or(|(l, _, _)| record.loss < *l) {
            best = Some((record.loss, params.clone(), step));
        }
        log.push(record);
        if flow.is_break() {
            break;
        }
    }

    let (_, mut best_params, best_step) = best.expect("at least one epoch");
    // Checkpoints carry values only; stale gradients would not survive a reload.
    params.store.zero_grad();
    best_params.store.zero_grad();
    Ok(TrainOutcome {
        final_checkpoint: Checkpoint { params, step },
        best_checkpoint: Checkpoint {
            params: best_params,
            step: best_step,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let csv = log_csv(&[TrainRecord {
            epoch: 1,
            step: 2,
            loss: 0.5,
            train_iou: 0.25,
        }]);
        assert_eq!(csv, "epoch,step,loss,train_iou\n1,2,0.5,0.25\n");
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train_loop(&NetConfig::tiny(), &TrainConfig::default(), &[]).is_err());
    }

    #[test]
    fn bad_dimensions_rejected() {
        let s = Sample {
            image: Tensor::zeros([1, 1, 40, 40]),
            mask: Tensor::zeros([1, 1, 40, 40]),
            id: "odd".into(),
        };
        let err = train_loop(&NetConfig::tiny(), &TrainConfig::default(), &[s]).unwrap_err();
        assert!(err.to_string().contains("odd"));
    }
}
