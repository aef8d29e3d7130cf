//! Pixel-level (IoU, nIoU) and target-level (P_d, F_a) metrics, and the
//! threshold sweep producing `(tau, P_d, F_a)` triplets.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default centroid distance (pixels) for matching a prediction to a target.
pub const DEFAULT_MATCH_DIST: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(
                "binary map",
                format!("{height}×{width} map needs {} pixels, got {}", height * width, pixels.len()),
            ));
        }
        Ok(BinaryMap {
            height,
            width,
            pixels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMap {
            height,
            width,
            pixels: vec![false; height * width],
        }
    }

    /// Pixels with `value > threshold`, read from a single-plane tensor.
    pub fn from_tensor(t: &Tensor<f32>, threshold: f64) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(
                "binary map",
                format!("expects a single (1, 1, h, w) plane, got {s}"),
            ));
        }
        Ok(BinaryMap {
            height: s.h,
            width: s.w,
            pixels: t.data().iter().map(|&v| f64::from(v) > threshold).collect(),
        })
    }

    /// Every `(1, 1, h, w)` plane of a batch, binarized.
    pub fn from_batch(t: &Tensor<f32>, threshold: f64) -> Vec<Self> {
        let s = t.shape();
        (0..s.n)
            .flat_map(|n| (0..s.c).map(move |c| (n, c)))
            .map(|(n, c)| BinaryMap {
                height: s.h,
                width: s.w,
                pixels: t.plane(n, c).iter().map(|&v| f64::from(v) > threshold).collect(),
            })
            .collect()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        Tensor::new([1, 1, self.height, self.width], data).expect("map shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixel_count: usize,
    /// `(row, col)` mean of member pixel coordinates.
    pub centroid: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    /// Per-pixel label, 0 for background, components numbered from 1.
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

/// 8-connected labeling; labels follow the raster order of each
/// component's first pixel.
pub fn connected_components(mask: &BinaryMap) -> ComponentSet {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.pixels[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let (mut count, mut sum_r, mut sum_c) = (0usize, 0.0f64, 0.0f64);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            count += 1;
            sum_r += r as f64;
            sum_c += c as f64;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.pixels[q] && labels[q] == 0 {
                        labels[q] = label;
                        queue.push_back(q);
                    }
                }
            }
        }
        components.push(Component {
            pixel_count: count,
            centroid: (sum_r / count as f64, sum_c / count as f64),
        });
    }
    ComponentSet { labels, components }
}

/// Targets detected in one image. A target overlapped by any predicted pixel
/// is detected outright, so one blob covering several targets detects them
/// all; the rest are matched to predicted components by [`match_targets`].
pub fn detected_targets(gt: &ComponentSet, pred: &ComponentSet, match_dist: f64) -> usize {
    let mut covered = vec![false; gt.components.len()];
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g > 0 && p > 0 {
            covered[g as usize - 1] = true;
        }
    }
    let rest: Vec<Component> = gt
        .components
        .iter()
        .zip(&covered)
        .filter(|(_, &c)| !c)
        .map(|(g, _)| g.clone())
        .collect();
    covered.iter().filter(|&&c| c).count() + match_targets(&rest, &pred.components, match_dist)
}

/// Greedy nearest-first one-to-one matching by centroid distance; returns how
/// many targets matched.
pub fn match_targets(gt: &[Component], pred: &[Component], match_dist: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = (g.centroid.0 - p.centroid.0).hypot(g.centroid.1 - p.centroid.1);
            if d <= match_dist {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matched += 1;
        }
    }
    matched
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub pd: f64,
    pub fa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    /// False-positive pixels over all pixels, pooled across the dataset.
    pub fa: f64,
    pub roc: Vec<RocPoint>,
}

impl EvalRecord {
    /// `metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in [("iou", self.iou), ("niou", self.niou), ("pd", self.pd), ("fa", self.fa)] {
            writeln!(s, "{name},{v}").unwrap();
        }
        s
    }

    /// `tau,pd,fa` rows.
    pub fn roc_csv(&self) -> String {
        roc_csv(&self.roc)
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("tau,pd,fa\n");
    for p in points {
        writeln!(s, "{},{},{}", p.tau, p.pd, p.fa).unwrap();
    }
    s
}

#[derive(Default)]
struct Pooled {
    tp: usize,
    fp: usize,
    fn_: usize,
    niou_sum: f64,
    images: usize,
    matched: usize,
    targets: usize,
    pixels: usize,
}

fn accumulate(acc: &mut Pooled, pred: &BinaryMap, gt: &BinaryMap, match_dist: f64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let union = tp + fp + fn_;
    acc.niou_sum += if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    acc.tp += tp;
    acc.fp += fp;
    acc.fn_ += fn_;
    acc.images += 1;
    acc.pixels += gt.pixels.len();

    let gt_cc = connected_components(gt);
    let pred_cc = connected_components(pred);
    acc.targets += gt_cc.components.len();
    acc.matched += detected_targets(&gt_cc, &pred_cc, match_dist);
}

fn check_pairs(preds: &[BinaryMap], gts: &[BinaryMap]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "compute_metrics",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::invalid(
                "compute_metrics",
                format!(
                    "pair {i}: prediction {}×{} vs ground truth {}×{}",
                    p.height, p.width, g.height, g.width
                ),
            ));
        }
    }
    Ok(())
}

/// Empty-union and target-free datasets score 1 on the affected ratio.
pub fn compute_metrics(preds: &[BinaryMap], gts: &[BinaryMap], match_dist: f64) -> Result<EvalRecord> {
    check_pairs(preds, gts)?;
    let mut acc = Pooled::default();
    for (p, g) in preds.iter().zip(gts) {
        accumulate(&mut acc, p, g, match_dist);
    }
    let union = acc.tp + acc.fp + acc.fn_;
    Ok(EvalRecord {
        iou: if union == 0 { 1.0 } else { acc.tp as f64 / union as f64 },
        niou: if acc.images == 0 { 1.0 } else { acc.niou_sum / acc.images as f64 },
        pd: if acc.targets == 0 { 1.0 } else { acc.matched as f64 / acc.targets as f64 },
        fa: if acc.pixels == 0 { 0.0 } else { acc.fp as f64 / acc.pixels as f64 },
        roc: Vec::new(),
    })
}

/// Thresholds `0, delta, 2·delta, …, 1`.
pub fn roc_thresholds(delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid("roc3d", format!("delta must lie in (0, 1], got {delta}")));
    }
    let steps = (1.0 / delta + 1e-9).floor() as usize;
    let mut taus: Vec<f64> = (0..=steps).map(|k| (k as f64 * delta).min(1.0)).collect();
    if let Some(last) = taus.last_mut() {
        if (1.0 - *last).abs() < 1e-9 {
            *last = 1.0;
        }
    }
    Ok(taus)
}

/// Binarizes each probability map at `p > tau` for every threshold and
/// records detection and false-alarm rates.
pub fn roc3d(
    pred_probs: &[Tensor<f32>],
    gts: &[BinaryMap],
    delta: f64,
    match_dist: f64,
) -> Result<Vec<RocPoint>> {
    let taus = roc_thresholds(delta)?;
    taus.into_iter()
        .map(|tau| {
            let preds = pred_probs
                .iter()
                .map(|p| BinaryMap::from_tensor(p, tau))
                .collect::<Result<Vec<_>>>()?;
            let rec = compute_metrics(&preds, gts, match_dist)?;
            Ok(RocPoint {
                tau,
                pd: rec.pd,
                fa: rec.fa,
            })
        })
        .collect()
}
