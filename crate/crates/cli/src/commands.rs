//! One function per subcommand. Every artifact lands under the `--out` path.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use msda_core::data::{load_dataset, read_gray, synth_dataset, write_dataset, write_gray16, write_gray8, Sample};
use msda_core::eval::{compute_metrics, roc3d, BinaryMap, EvalRecord};
use msda_core::filters::{hfdi, Direction};
use msda_core::gradcheck::run_suite;
use msda_core::nn::NetworkParams;
use msda_core::tensor::Tensor;
use msda_core::train::{train_loop_with, Checkpoint};

use crate::config::{CliConfig, DataConfig, EvalConfig};

pub const METRICS: &str = "metrics.csv";
pub const ROC: &str = "roc.csv";
pub const MASKS_OUT: &str = "masks";
pub const PROBS_OUT: &str = "probs";
pub const CONFIG_OUT: &str = "config.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

pub fn load_samples(data: &DataConfig) -> Result<Vec<Sample>> {
    match &data.dir {
        Some(dir) => Ok(load_dataset(dir, data.resize_to)?),
        None => Ok(synth_dataset(&data.synth, data.count, data.seed)?),
    }
}

/// Probability maps, metrics at the binarization threshold and the ROC sweep.
pub fn evaluate(params: &NetworkParams, samples: &[Sample], cfg: &EvalConfig) -> Result<(EvalRecord, Vec<Tensor<f32>>)> {
    anyhow::ensure!(!samples.is_empty(), "no samples to evaluate");
    let threshold = cfg.threshold.unwrap_or(params.config.binarize_threshold);
    let probs = samples
        .iter()
        .map(|s| params.predict(&s.image).with_context(|| format!("predicting {}", s.id)))
        .collect::<Result<Vec<_>>>()?;
    let gts = samples
        .iter()
        .map(|s| BinaryMap::from_tensor(&s.mask, 0.5))
        .collect::<msda_core::Result<Vec<_>>>()?;
    let preds = probs
        .iter()
        .map(|p| BinaryMap::from_tensor(p, threshold))
        .collect::<msda_core::Result<Vec<_>>>()?;
    let mut record = compute_metrics(&preds, &gts, cfg.match_dist)?;
    record.roc = roc3d(&probs, &gts, cfg.delta, cfg.match_dist)?;
    Ok((record, probs))
}

fn write_eval(
    out: &Path,
    record: &EvalRecord,
    samples: &[Sample],
    probs: &[Tensor<f32>],
    threshold: f64,
    with_probs: bool,
) -> Result<()> {
    let masks = out.join(MASKS_OUT);
    create_dir(&masks)?;
    write_text(&out.join(METRICS), &record.metrics_csv())?;
    write_text(&out.join(ROC), &record.roc_csv())?;
    for (s, p) in samples.iter().zip(probs) {
        write_gray8(&masks.join(format!("{}.png", s.id)), &BinaryMap::from_tensor(p, threshold)?.to_tensor())?;
    }
    if with_probs {
        let dir = out.join(PROBS_OUT);
        create_dir(&dir)?;
        for (s, p) in samples.iter().zip(probs) {
            write_gray16(&dir.join(format!("{}.png", s.id)), p)?;
        }
    }
    log::info!(
        "iou {:.6} niou {:.6} pd {:.6} fa {:.3e} over {} images",
        record.iou,
        record.niou,
        record.pd,
        record.fa,
        samples.len()
    );
    Ok(())
}

fn train_and_save(cfg: &CliConfig, out: &Path) -> Result<msda_core::train::TrainOutcome> {
    let samples = load_samples(&cfg.data)?;
    log::info!("training on {} samples", samples.len());
    let outcome = train_loop_with(&cfg.net, &cfg.train, &samples, |r| {
        log::info!("epoch {} step {} loss {:.6} train_iou {:.6}", r.epoch, r.step, r.loss, r.train_iou);
        ControlFlow::Continue(())
    })?;
    outcome.write_artifacts(out)?;
    write_text(&out.join(CONFIG_OUT), &serde_json::to_string_pretty(cfg)?)?;
    Ok(outcome)
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = CliConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.echo();
    train_and_save(&cfg, out)?;
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>, with_probs: bool) -> Result<()> {
    let cfg = config.map(CliConfig::load).transpose()?.unwrap_or_default();
    cfg.echo();
    let ckpt = load_checkpoint(checkpoint)?;
    let samples = load_dataset(data, cfg.data.resize_to)?;
    let (record, probs) = evaluate(&ckpt.params, &samples, &cfg.eval)?;
    let threshold = cfg.eval.threshold.unwrap_or(ckpt.params.config.binarize_threshold);
    write_eval(out, &record, &samples, &probs, threshold, with_probs)
}

pub fn infer(checkpoint: &Path, image: &Path, out: &Path, probs: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let x = read_gray(image)?;
    let p = ckpt
        .params
        .predict(&x)
        .with_context(|| format!("predicting {}", image.display()))?;
    let mask = BinaryMap::from_tensor(&p, ckpt.params.config.binarize_threshold)?;
    write_gray8(out, &mask.to_tensor())?;
    if let Some(path) = probs {
        write_gray16(path, &p)?;
    }
    log::info!("{} foreground pixels written to {}", mask.count(), out.display());
    Ok(())
}

/// Output file for one directional response.
pub fn filter_path(out: &Path, d: Direction) -> PathBuf {
    out.join(format!("{d}.png"))
}

/// Directional responses lie in `[-1, 1]`; they are stored as `(v + 1) / 2`
/// in 16-bit PNGs so that zero maps to mid-gray.
pub fn filter(image: &Path, out: &Path) -> Result<()> {
    let x = read_gray(image)?;
    let y = hfdi(&x).with_context(|| format!("filtering {}", image.display()))?;
    create_dir(out)?;
    for (i, d) in Direction::HIGH_PASS.into_iter().enumerate() {
        let plane = y.slice_channels(i, 1)?.map(|v| (v + 1.0) * 0.5);
        write_gray16(&filter_path(out, d), &plane)?;
    }
    Ok(())
}

pub fn synth(config: &Path, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = CliConfig::load(config)?;
    if let Some(n) = count {
        cfg.data.count = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.echo();
    let samples = synth_dataset(&cfg.data.synth, cfg.data.count, cfg.data.seed)?;
    write_dataset(out, &samples)?;
    log::info!("wrote {} scenes to {}", samples.len(), out.display());
    Ok(())
}

/// Runs every gradient check; `Ok(false)` when any exceeds its tolerance.
pub fn gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<28} max_rel {:.3e} tol {:.0e} {:>7.2}s {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.seconds,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

/// Trains with `switches` applied, then evaluates on `eval_data` (or the
/// training samples) into the same directory.
pub fn ablate(config: &Path, switches: &[String], out: &Path, eval_data: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = CliConfig::load(config)?;
    for s in switches {
        cfg.net.ablation.apply_assignment(s)?;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.echo();
    let outcome = train_and_save(&cfg, out)?;
    let params = &outcome.final_checkpoint.params;
    log::info!("{} trainable parameters with {}", params.num_parameters(), switches.join(" "));
    let samples = match eval_data {
        Some(dir) => load_dataset(dir, cfg.data.resize_to)?,
        None => load_samples(&cfg.data)?,
    };
    let (record, probs) = evaluate(params, &samples, &cfg.eval)?;
    let threshold = cfg.eval.threshold.unwrap_or(cfg.net.binarize_threshold);
    write_eval(out, &record, &samples, &probs, threshold, false)
}
