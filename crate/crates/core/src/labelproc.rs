//! Pseudo-label processing: the low-confidence removal schedule, disagreement
//! scoring, confidence-weighted voting and confidence estimation.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{round_half_up, ImageGrid, MaskGrid};
use crate::error::{file_error, invalid, Result};
use crate::losses::EPSILON;
use crate::metrics;
use crate::views::{combine, TripleModel, ViewId};

/// Piecewise-linear count of pseudo-labels to drop at iteration `t`.
///
/// With `k = 1 - zeta`: a plateau of `0.05 k y` before `0.01 k x`, a line of
/// slope `-y/x` up to `0.05 k x`, then a floor of `0.01 k y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemovalSchedule {
    pub x: u64,
    pub y: u64,
    pub zeta: f64,
}

impl RemovalSchedule {
    pub fn new(x: u64, y: u64, zeta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&zeta) {
            return Err(invalid(format!("zeta must lie in [0, 1), got {zeta}")));
        }
        if x == 0 {
            return Err(invalid("total iterations x must be positive"));
        }
        Ok(Self { x, y, zeta })
    }

    fn k(&self) -> f64 {
        1.0 - self.zeta
    }

    pub fn breakpoints(&self) -> (f64, f64) {
        let x = self.x as f64;
        (0.01 * self.k() * x, 0.05 * self.k() * x)
    }

    pub fn first_branch(&self) -> f64 {
        0.05 * self.k() * self.y as f64
    }

    pub fn middle_branch(&self, t: f64) -> f64 {
        let y = self.y as f64;
        0.06 * self.k() * y - y * t / self.x as f64
    }

    pub fn last_branch(&self) -> f64 {
        0.01 * self.k() * self.y as f64
    }

    /// Un-rounded schedule value.
    pub fn value(&self, t: f64) -> f64 {
        let (b1, b2) = self.breakpoints();
        if t < b1 {
            self.first_branch()
        } else if t <= b2 {
            self.middle_branch(t)
        } else {
            self.last_branch()
        }
    }
}

/// Number of labels to remove at iteration `t` (1-based), rounded half-up and
/// clamped to the active pool size.
pub fn removal_count(t: u64, x: u64, y: u64, zeta: f64, active: usize) -> Result<usize> {
    let schedule = RemovalSchedule::new(x, y, zeta)?;
    if t == 0 || t > x {
        return Err(invalid(format!("iteration t={t} outside 1..={x}")));
    }
    let n = round_half_up(schedule.value(t as f64).max(0.0));
    if n > active {
        log::warn!("removal count {n} exceeds the {active} active labels; clamped");
    }
    Ok(n.min(active))
}

/// `1 - Dice` of the two maps hardened at 0.5, smoothed so that two empty
/// maps agree completely.
pub fn disagreement_score(p1: &MaskGrid, p2: &MaskGrid) -> Result<f64> {
    let c = metrics::confusion_counts(&p1.harden(0.5), &p2.harden(0.5))?;
    let both = 2.0 * c.tp as f64 + EPSILON;
    let sizes = (2 * c.tp + c.fp + c.fn_) as f64 + EPSILON;
    Ok((1.0 - both / sizes).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub image_id: usize,
    pub pseudo_label: MaskGrid,
    pub disagreement: f64,
    pub active: bool,
}

/// Pseudo-labels for the unlabelled images together with the removal state.
/// `total_iterations` and `total_predictions` are the schedule's `x` and `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPool {
    pub entries: Vec<PoolEntry>,
    pub iteration: u64,
    pub total_iterations: u64,
    pub total_predictions: u64,
}

impl PseudoPool {
    /// Pool with empty pseudo-labels; labels and scores are filled in by
    /// [`PseudoPool::update`].
    pub fn new(image_ids: &[usize], dims: (usize, usize), total_iterations: u64) -> Self {
        Self {
            entries: image_ids
                .iter()
                .map(|&image_id| PoolEntry {
                    image_id,
                    pseudo_label: MaskGrid::empty(dims.0, dims.1),
                    disagreement: 0.0,
                    active: true,
                })
                .collect(),
            iteration: 0,
            total_iterations,
            total_predictions: image_ids.len() as u64,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces labels and scores, aligned with `entries`.
    pub fn update(&mut self, labels: Vec<MaskGrid>, scores: Vec<f64>) -> Result<()> {
        if labels.len() != self.len() || scores.len() != self.len() {
            return Err(invalid("pool update must cover every entry"));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("disagreement scores must lie in [0, 1]"));
        }
        for ((e, l), s) in self.entries.iter_mut().zip(labels).zip(scores) {
            e.pseudo_label = l;
            e.disagreement = s;
        }
        Ok(())
    }

    pub fn mean_disagreement(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.disagreement).sum::<f64>() / self.len() as f64
    }

    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|e| e.active).count()
    }

    pub fn active_entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(|e| e.active)
    }

    /// Marks every entry active without removing any.
    pub fn activate_all(&mut self, t: u64) {
        for e in &mut self.entries {
            e.active = true;
        }
        self.iteration = t;
    }

    /// Re-activates everything, then deactivates the `N(t)` entries with the
    /// highest disagreement (ties: smaller image id first). Removal lasts
    /// for the current epoch only. Returns the number removed.
    pub fn filter_low_confidence(&mut self, t: u64, zeta: f64) -> Result<usize> {
        self.activate_all(t);
        let n = removal_count(t, self.total_iterations, self.total_predictions, zeta, self.len())?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&self.entries[a], &self.entries[b]);
            eb.disagreement
                .total_cmp(&ea.disagreement)
                .then(ea.image_id.cmp(&eb.image_id))
        });
        for &i in &order[..n] {
            self.entries[i].active = false;
        }
        self.iteration = t;
        Ok(n)
    }

    pub fn snapshot(&self, stage: u8, view: ViewId, epoch: usize, zeta: f64, removed: usize) -> PoolSnapshot {
        PoolSnapshot {
            stage,
            view,
            epoch,
            iteration: self.iteration,
            total_iterations: self.total_iterations,
            total_predictions: self.total_predictions,
            zeta,
            removed,
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    image_id: e.image_id,
                    disagreement: e.disagreement,
                    active: e.active,
                    foreground_fraction: e.pseudo_label.harden(0.5).foreground_fraction(),
                })
                .collect(),
        }
    }

    /// Hardened pseudo-labels as a `u8` safetensors archive keyed by image id.
    pub fn save_masks(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for e in &self.entries {
            let (h, w) = e.pseudo_label.dims();
            let bytes: Vec<u8> = e.pseudo_label.harden(0.5).pixels().iter().map(|&v| v as u8).collect();
            map.insert(e.image_id.to_string(), Tensor::from_vec(bytes, (h, w), &Device::Cpu)?);
        }
        candle_core::safetensors::save(&map, path).map_err(|e| file_error(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub image_id: usize,
    pub disagreement: f64,
    pub active: bool,
    pub foreground_fraction: f64,
}

/// Audit record of the pool after filtering in one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub stage: u8,
    pub view: ViewId,
    pub epoch: usize,
    pub iteration: u64,
    pub total_iterations: u64,
    pub total_predictions: u64,
    pub zeta: f64,
    pub removed: usize,
    pub entries: Vec<SnapshotEntry>,
}

impl PoolSnapshot {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| file_error(path, e))
    }

    /// Counts of disagreement scores in `bins` equal-width bins over [0, 1].
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let bins = bins.max(1);
        let mut h = vec![0; bins];
        for e in &self.entries {
            h[((e.disagreement * bins as f64) as usize).min(bins - 1)] += 1;
        }
        h
    }

    pub fn render_histogram(&self, bins: usize, width: usize) -> String {
        let h = self.histogram(bins);
        let peak = h.iter().copied().max().unwrap_or(0).max(1);
        let mut out = format!(
            "stage {} view {} epoch {}: {} entries, {} removed, zeta {:.4}\n",
            self.stage,
            self.view,
            self.epoch,
            self.entries.len(),
            self.removed,
            self.zeta
        );
        for (i, &c) in h.iter().enumerate() {
            let lo = i as f64 / bins as f64;
            let hi = (i + 1) as f64 / bins as f64;
            let bar = "#".repeat(c * width / peak);
            out.push_str(&format!("[{lo:.2}, {hi:.2}) {c:>6} {bar}\n"));
        }
        out
    }
}

/// Pseudo-label for a view from its two donors: donor weights are
/// renormalised to sum to one, falling back to an unweighted mean when both
/// are zero.
pub fn vote_from_predictions(prev: &MaskGrid, alpha_prev: f64, next: &MaskGrid, alpha_next: f64) -> Result<MaskGrid> {
    let weights = if alpha_prev + alpha_next <= 0.0 {
        log::warn!("both donor confidences are zero; using an unweighted vote");
        [1.0, 1.0]
    } else {
        [alpha_prev, alpha_next]
    };
    combine(&[prev, next], &weights)
}

pub fn vote_pseudo_label(model: &TripleModel, target: ViewId, image: &ImageGrid) -> Result<MaskGrid> {
    let (p, n) = target.donors();
    let preds = model.predict_views(&[p, n], &[image], 1)?;
    let a = model.alpha();
    vote_from_predictions(&preds[p.index()][0], a[p.index()], &preds[n.index()][0], a[n.index()])
}

/// Per-view raw confidence (mean validation Dice).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEstimate {
    pub raw: [f64; 3],
}

impl ConfidenceEstimate {
    pub fn normalized(&self) -> Result<[f64; 3]> {
        let v = self.normalized_over(&ViewId::ALL)?;
        Ok([v[0], v[1], v[2]])
    }

    /// Weights of `views` rescaled to sum to one.
    pub fn normalized_over(&self, views: &[ViewId]) -> Result<Vec<f64>> {
        let s: f64 = views.iter().map(|v| self.raw[v.index()]).sum();
        if s <= 0.0 {
            return Err(crate::Error::ZeroConfidence);
        }
        Ok(views.iter().map(|v| self.raw[v.index()] / s).collect())
    }
}

/// Mean Dice between hardened predictions and hardened targets.
pub fn validation_score(predictions: &[MaskGrid], targets: &[&MaskGrid]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("empty validation set"));
    }
    if predictions.len() != targets.len() {
        return Err(invalid("one target per prediction required"));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        total += metrics::dice(&p.harden(0.5), &t.harden(0.5))?;
    }
    Ok(total / predictions.len() as f64)
}

/// Raw confidence of one view on `(image, target)` validation pairs.
pub fn estimate_confidence(
    model: &TripleModel,
    view: ViewId,
    validation: &[(&ImageGrid, &MaskGrid)],
    batch: usize,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(invalid("empty validation set"));
    }
    let images: Vec<&ImageGrid> = validation.iter().map(|(i, _)| *i).collect();
    let targets: Vec<&MaskGrid> = validation.iter().map(|(_, t)| *t).collect();
    let preds = model.predict_views(&[view], &images, batch)?;
    validation_score(&preds[view.index()], &targets)
}
