//! The three training stages and the end-to-end pipeline.
//!
//! Stage 1 trains every view on the perturbed labelled set with focal
//! Tversky. Stage 2 runs `stage2_iterations` rounds; in each round every view
//! trains for a few epochs on pseudo-labels voted by its two neighbours, with
//! the most contested labels removed per epoch. Stage 3 keeps training the
//! least confident view on alternating labelled and pseudo-labelled batches
//! until it catches up with the others.
//!
//! All randomness is derived from the run seed, data order is serial and
//! nothing time-dependent is logged, so a run is reproducible bit for bit on
//! one platform.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{LabelProcessing, PseudoTarget, RunConfig, StagePlan, DatasetSource};
use crate::data::{self, DatasetSplit, ImageGrid, MaskGrid};
use crate::error::{file_error, invalid, Error, Result};
use crate::labelproc::{self, disagreement_score, vote_from_predictions, PseudoPool};
use crate::losses::{self, MixedLossConfig, TverskyParams};
use crate::metrics::{self, MetricReport};
use crate::overlay;
use crate::perturb::{perturb_batch, PerturbConfig};
use crate::seed;
use crate::views::{TripleModel, ViewId};

const EVAL_BATCH: usize = 32;
const ZETA_MAX: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The target view's confidence reached the others'.
    Alpha,
    /// `stage3_epochs_max` was hit.
    Cap,
}

/// One line of `log.jsonl`. `epoch` is a run-wide counter of view-epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Epoch {
        epoch: usize,
        stage: u8,
        view: ViewId,
        loss: f64,
        steps: usize,
    },
    Pool {
        epoch: usize,
        stage: u8,
        view: ViewId,
        t: u64,
        x: u64,
        zeta: f64,
        mean_disagreement: f64,
        removed: usize,
        active: usize,
    },
    Confidence {
        epoch: usize,
        stage: u8,
        /// The updated view, or `None` when all three were re-estimated.
        view: Option<ViewId>,
        raw: [f64; 3],
        normalized: [f64; 3],
    },
    Skip {
        epoch: usize,
        stage: u8,
        view: ViewId,
        reason: String,
    },
    Stage3Stop {
        epoch: usize,
        target: ViewId,
        epochs_run: usize,
        reason: StopReason,
        raw: [f64; 3],
    },
    Checkpoint {
        stage: u8,
        path: String,
    },
}

/// Append-only training log, mirrored to a JSON-lines file when attached to
/// a run directory.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    events: Vec<LogEvent>,
    file: Option<PathBuf>,
}

impl TrainLog {
    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    fn push(&mut self, event: LogEvent) -> Result<()> {
        if let Some(path) = &self.file {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| file_error(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&event)?)?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<LogEvent>> {
        let text = fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| file_error(path, e)))
            .collect()
    }

    pub fn confidence_updates(&self, stage: u8) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, LogEvent::Confidence { stage: s, .. } if *s == stage))
            .count()
    }

    /// Mean loss per epoch of one view in one stage, in order.
    pub fn losses(&self, stage: u8, view: ViewId) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Epoch { stage: s, view: v, loss, .. } if *s == stage && *v == view => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

/// Sidecar of a stage checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: u8,
    pub epoch: usize,
    pub alpha: [f64; 3],
    pub config_hash: String,
    pub seed: u64,
    /// Stage-2 gradient steps taken so far; with the seed this fixes every
    /// derived random stream of the remaining run.
    pub stage2_step: u64,
    pub pseudo_target: PseudoTarget,
    pub pretrained_channel_mode: Option<String>,
    pub archive: String,
}

impl CheckpointManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| file_error(path, e))
    }
}

/// Everything the stages need besides the model and the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub plan: StagePlan,
    pub perturb: PerturbConfig,
    pub tversky: TverskyParams,
    pub mixed_loss: MixedLossConfig,
    pub label_processing: LabelProcessing,
    pub dual_loss: bool,
    pub pool_masks: bool,
}

impl TrainSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            seed: c.seed,
            plan: c.plan.clone(),
            perturb: c.perturb.clone(),
            tversky: c.tversky,
            mixed_loss: c.mixed_loss,
            label_processing: c.label_processing.clone(),
            dual_loss: c.dual_loss,
            pool_masks: c.pool_masks,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Tversky,
    Mixed,
}

type Pair = (ImageGrid, MaskGrid);

pub struct Trainer {
    model: TripleModel,
    split: DatasetSplit,
    settings: TrainSettings,
    optimizers: [Option<AdamW>; 3],
    log: TrainLog,
    run_dir: Option<PathBuf>,
    config_hash: String,
    pretrained_mode: Option<String>,
    completed_stage: u8,
    stage: u8,
    epoch: usize,
    stage2_step: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: TripleModel, split: DatasetSplit, settings: TrainSettings) -> Result<Self> {
        if split.labelled.is_empty() {
            return Err(invalid("training needs at least one labelled sample"));
        }
        settings.plan.validate()?;
        settings.perturb.validate()?;
        settings.tversky.validate()?;
        Ok(Self {
            model,
            split,
            settings,
            optimizers: [None, None, None],
            log: TrainLog::default(),
            run_dir: None,
            config_hash: String::new(),
            pretrained_mode: None,
            completed_stage: 0,
            stage: 0,
            epoch: 0,
            stage2_step: 0,
            last_checkpoint: None,
        })
    }

    /// Persist checkpoints, pool snapshots and the log under `dir`.
    pub fn with_run_dir(mut self, dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("pool"))?;
        let log = dir.join("log.jsonl");
        fs::write(&log, "").map_err(|e| file_error(&log, e))?;
        self.log.file = Some(log);
        self.run_dir = Some(dir.to_path_buf());
        self.config_hash = config_hash.to_string();
        Ok(self)
    }

    pub fn set_pretrained_mode(&mut self, mode: &str) {
        self.pretrained_mode = Some(mode.to_string());
    }

    pub fn model(&self) -> &TripleModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TripleModel {
        &mut self.model
    }

    pub fn into_model(self) -> TripleModel {
        self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn completed_stage(&self) -> u8 {
        self.completed_stage
    }

    /// Planned stage-2 gradient steps, the schedule's `x`.
    pub fn planned_stage2_steps(&self) -> u64 {
        let plan = &self.settings.plan;
        let batches = self.split.unlabelled.len().div_ceil(plan.batch_size).max(1);
        (3 * plan.stage2_iterations * plan.epochs_per_iteration() * batches).max(1) as u64
    }

    fn optimizer(&mut self, view: ViewId) -> Result<&mut AdamW> {
        let slot = &mut self.optimizers[view.index()];
        if slot.is_none() {
            let params = ParamsAdamW {
                lr: self.settings.plan.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            };
            *slot = Some(AdamW::new(self.model.trainable_vars(view), params)?);
        }
        Ok(slot.as_mut().expect("initialised above"))
    }

    fn step(&mut self, view: ViewId, batch: &[&Pair], kind: LossKind) -> Result<f64> {
        let images: Vec<&ImageGrid> = batch.iter().map(|p| &p.0).collect();
        let masks: Vec<&MaskGrid> = batch.iter().map(|p| &p.1).collect();
        let x = self.model.image_tensor(&images)?;
        let y = self.model.mask_tensor(&masks)?;
        let pred = self.model.forward_tensor(view, &x)?;
        let loss = match kind {
            LossKind::Tversky => losses::focal_tversky(&pred, &y, &self.settings.tversky)?,
            LossKind::Mixed => losses::mixed_loss(&pred, &y, &self.settings.mixed_loss)?,
        };
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: self.stage,
                view: view.letter(),
                checkpoint: self.last_checkpoint.clone(),
            });
        }
        self.optimizer(view)?.backward_step(&loss)?;
        Ok(value)
    }

    fn batches<'a>(&self, pairs: &'a [Pair], stream: &[u64]) -> Vec<Vec<&'a Pair>> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seed::rng(self.settings.seed, stream));
        order
            .chunks(self.settings.plan.batch_size)
            .map(|c| c.iter().map(|&i| &pairs[i]).collect())
            .collect()
    }

    /// One pass over `pairs`; returns `(mean loss, steps)`.
    fn train_epoch(&mut self, view: ViewId, pairs: &[Pair], kind: LossKind, stream: &[u64]) -> Result<(f64, usize)> {
        let batches = self.batches(pairs, stream);
        let mut total = 0.0;
        for b in &batches {
            total += self.step(view, b, kind)?;
        }
        Ok((total / batches.len().max(1) as f64, batches.len()))
    }

    fn labelled_pairs(&self, stream: &[u64]) -> Result<Vec<Pair>> {
        let pairs: Vec<Pair> = self
            .split
            .labelled
            .iter()
            .map(|s| (s.image.clone(), s.mask.clone()))
            .collect();
        self.maybe_perturb(pairs, stream)
    }

    fn maybe_perturb(&self, pairs: Vec<Pair>, stream: &[u64]) -> Result<Vec<Pair>> {
        if !self.settings.label_processing.enabled || pairs.is_empty() {
            return Ok(pairs);
        }
        let seed = seed::derive(self.settings.seed, stream);
        Ok(perturb_batch(&pairs, &self.settings.perturb, seed)?.0)
    }

    fn pseudo_loss(&self) -> LossKind {
        if self.settings.dual_loss {
            LossKind::Mixed
        } else {
            LossKind::Tversky
        }
    }

    fn donor_weights(&self, view: ViewId) -> (f64, f64) {
        let (p, n) = view.donors();
        if self.settings.label_processing.enabled {
            let a = self.model.alpha();
            (a[p.index()], a[n.index()])
        } else {
            (1.0, 1.0)
        }
    }

    fn log_event(&mut self, event: LogEvent) -> Result<()> {
        self.log.push(event)
    }

    /// Re-estimates the confidence of `views` on the labelled set plus the
    /// unlabelled validation members, whose targets are hardened votes.
    fn update_confidence(&mut self, views: &[ViewId]) -> Result<()> {
        let val_ids: BTreeSet<usize> = self.split.validation_ids.iter().copied().collect();
        let mut images: Vec<&ImageGrid> = self.split.labelled.iter().map(|s| &s.image).collect();
        let n_lab = images.len();
        images.extend(
            self.split
                .unlabelled
                .iter()
                .filter(|s| val_ids.contains(&s.id))
                .map(|s| &s.image),
        );
        let preds = self.model.predict_all(&images, EVAL_BATCH)?;
        let mut alpha = self.model.alpha();
        for &view in views {
            let (p, n) = view.donors();
            let (wp, wn) = self.donor_weights(view);
            let mut targets: Vec<MaskGrid> = self.split.labelled.iter().map(|s| s.mask.clone()).collect();
            for j in n_lab..images.len() {
                targets.push(vote_from_predictions(&preds[p.index()][j], wp, &preds[n.index()][j], wn)?.harden(0.5));
            }
            let refs: Vec<&MaskGrid> = targets.iter().collect();
            alpha[view.index()] = labelproc::validation_score(&preds[view.index()], &refs)?;
        }
        if alpha.iter().all(|&a| a == 0.0) {
            log::warn!("every view scored zero confidence; falling back to uniform weights");
            alpha = [1.0 / 3.0; 3];
        }
        self.model.set_alpha(alpha)?;
        let event = LogEvent::Confidence {
            epoch: self.epoch,
            stage: self.stage,
            view: (views.len() == 1).then(|| views[0]),
            raw: alpha,
            normalized: self.model.alpha_normalized()?,
        };
        self.log_event(event)
    }

    fn checkpoint(&mut self, stage: u8) -> Result<()> {
        self.completed_stage = stage;
        let Some(dir) = self.run_dir.clone() else {
            return Ok(());
        };
        let archive = format!("stage{stage}.ckpt");
        let path = dir.join("checkpoints").join(&archive);
        self.model.save(&path)?;
        let manifest = CheckpointManifest {
            stage,
            epoch: self.epoch,
            alpha: self.model.alpha(),
            config_hash: self.config_hash.clone(),
            seed: self.settings.seed,
            stage2_step: self.stage2_step,
            pseudo_target: self.settings.label_processing.pseudo_target,
            pretrained_channel_mode: self.pretrained_mode.clone(),
            archive: archive.clone(),
        };
        let mpath = dir.join("checkpoints").join(format!("stage{stage}.json"));
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| file_error(&mpath, e))?;
        self.last_checkpoint = Some(path);
        self.log_event(LogEvent::Checkpoint {
            stage,
            path: format!("checkpoints/{archive}"),
        })
    }

    fn require_stage(&self, needed: u8, stage: u8) -> Result<()> {
        let order = Error::StageOrder { stage, required: needed };
        if self.completed_stage < needed {
            return Err(order);
        }
        if let Some(dir) = &self.run_dir {
            let m = dir.join("checkpoints").join(format!("stage{needed}.json"));
            match CheckpointManifest::read(&m) {
                Ok(manifest) if manifest.stage == needed => {}
                _ => return Err(order),
            }
        }
        Ok(())
    }

    /// Supervised warm-up of `views` on the labelled set, then a confidence
    /// estimate and the stage-1 checkpoint.
    pub fn train_stage1(&mut self) -> Result<()> {
        self.stage1_views(&ViewId::ALL)?;
        self.update_confidence(&ViewId::ALL)?;
        self.checkpoint(1)
    }

    /// Baseline: view A alone, same stage-1 plan, confidence fixed to A.
    pub fn train_supervised_only(&mut self) -> Result<()> {
        self.stage1_views(&[ViewId::A])?;
        self.model.set_alpha([1.0, 0.0, 0.0])?;
        self.checkpoint(1)
    }

    fn stage1_views(&mut self, views: &[ViewId]) -> Result<()> {
        self.stage = 1;
        for e in 0..self.settings.plan.stage1_epochs {
            for &view in views {
                let v = view.index() as u64;
                let pairs = self.labelled_pairs(&[1, v, e as u64, 1])?;
                let (loss, steps) = self.train_epoch(view, &pairs, LossKind::Tversky, &[1, v, e as u64, 2])?;
                self.log_event(LogEvent::Epoch {
                    epoch: self.epoch,
                    stage: 1,
                    view,
                    loss,
                    steps,
                })?;
                self.epoch += 1;
            }
        }
        Ok(())
    }

    /// Votes, scores and filters the pool for `view`, then returns the active
    /// (image, target) pairs, perturbed when label processing is on.
    fn prepare_pseudo(&mut self, view: ViewId, pool: &mut PseudoPool, t: u64) -> Result<Vec<Pair>> {
        let images: Vec<&ImageGrid> = self.split.unlabelled.iter().map(|s| &s.image).collect();
        let (p, n) = view.donors();
        let preds = self.model.predict_views(&[p, n], &images, EVAL_BATCH)?;
        let (wp, wn) = self.donor_weights(view);
        let mut labels = Vec::with_capacity(images.len());
        let mut scores = Vec::with_capacity(images.len());
        for (a, b) in preds[p.index()].iter().zip(&preds[n.index()]) {
            labels.push(vote_from_predictions(a, wp, b, wn)?);
            scores.push(disagreement_score(a, b)?);
        }
        pool.update(labels, scores)?;
        let lp = self.settings.label_processing.clone();
        let mean = pool.mean_disagreement();
        let zeta = lp.zeta_override.unwrap_or(mean.clamp(0.0, ZETA_MAX));
        let removed = if lp.enabled {
            pool.filter_low_confidence(t, zeta)?
        } else {
            pool.activate_all(t);
            0
        };
        self.log_event(LogEvent::Pool {
            epoch: self.epoch,
            stage: self.stage,
            view,
            t,
            x: pool.total_iterations,
            zeta,
            mean_disagreement: mean,
            removed,
            active: pool.active_count(),
        })?;
        if let Some(dir) = &self.run_dir {
            let base = dir.join("pool").join(format!("stage{}_view{}_epoch{:05}", self.stage, view, self.epoch));
            let snap = pool.snapshot(self.stage, view, self.epoch, zeta, removed);
            let json = base.with_extension("json");
            fs::write(&json, serde_json::to_string(&snap)?).map_err(|e| file_error(&json, e))?;
            if self.settings.pool_masks {
                pool.save_masks(&base.with_extension("masks.safetensors"))?;
            }
        }
        let hard = lp.pseudo_target == PseudoTarget::Hard;
        let by_id: std::collections::HashMap<usize, &ImageGrid> =
            self.split.unlabelled.iter().map(|s| (s.id, &s.image)).collect();
        let pairs: Vec<Pair> = pool
            .active_entries()
            .map(|e| {
                let target = if hard { e.pseudo_label.harden(0.5) } else { e.pseudo_label.clone() };
                (by_id[&e.image_id].clone(), target)
            })
            .collect();
        let v = view.index() as u64;
        self.maybe_perturb(pairs, &[self.stage as u64, v, self.epoch as u64, 1])
    }

    fn new_pool(&self) -> PseudoPool {
        let ids: Vec<usize> = self.split.unlabelled.iter().map(|s| s.id).collect();
        let dims = self.split.labelled[0].image.dims();
        PseudoPool::new(&ids, dims, self.planned_stage2_steps())
    }

    /// Iterative co-training on voted pseudo-labels.
    pub fn train_stage2(&mut self) -> Result<()> {
        self.require_stage(1, 2)?;
        self.stage = 2;
        let epi = self.settings.plan.epochs_per_iteration();
        if self.split.unlabelled.is_empty() || epi == 0 {
            log::warn!("stage 2 skipped: no unlabelled data or no stage-2 epochs planned");
            return self.checkpoint(2);
        }
        let mut pools = [self.new_pool(), self.new_pool(), self.new_pool()];
        let kind = self.pseudo_loss();
        for _ in 0..self.settings.plan.stage2_iterations {
            for view in ViewId::ALL {
                for _ in 0..epi {
                    let t = self.stage2_step + 1;
                    let pairs = self.prepare_pseudo(view, &mut pools[view.index()], t)?;
                    if pairs.is_empty() {
                        log::warn!("stage 2: every pseudo-label of view {view} was removed; skipping");
                        self.log_event(LogEvent::Skip {
                            epoch: self.epoch,
                            stage: 2,
                            view,
                            reason: "pool fully deactivated".into(),
                        })?;
                        self.epoch += 1;
                        continue;
                    }
                    let stream = [2, view.index() as u64, self.epoch as u64, 2];
                    let (loss, steps) = self.train_epoch(view, &pairs, kind, &stream)?;
                    self.stage2_step += steps as u64;
                    self.log_event(LogEvent::Epoch {
                        epoch: self.epoch,
                        stage: 2,
                        view,
                        loss,
                        steps,
                    })?;
                    self.epoch += 1;
                }
                self.update_confidence(&[view])?;
            }
        }
        self.checkpoint(2)
    }

    /// Remedial training of the least confident view.
    pub fn train_stage3(&mut self) -> Result<()> {
        self.require_stage(2, 3)?;
        self.stage = 3;
        let alpha = self.model.alpha();
        let target = ViewId::ALL
            .into_iter()
            .min_by(|a, b| alpha[a.index()].total_cmp(&alpha[b.index()]))
            .expect("three views");
        let tol = self.settings.plan.stage3_tolerance;
        let cap = self.settings.plan.stage3_epochs_max;
        let mut pool = self.new_pool();
        let x = pool.total_iterations;
        let kind = self.pseudo_loss();
        let mut epochs_run = 0;
        let reason = loop {
            let a = self.model.alpha();
            let others = ViewId::ALL
                .iter()
                .filter(|v| **v != target)
                .map(|v| a[v.index()])
                .fold(f64::INFINITY, f64::min);
            if a[target.index()] >= others - tol {
                break StopReason::Alpha;
            }
            if epochs_run >= cap {
                break StopReason::Cap;
            }
            let v = target.index() as u64;
            let labelled = self.labelled_pairs(&[3, v, self.epoch as u64, 3])?;
            let pseudo = if self.split.unlabelled.is_empty() {
                Vec::new()
            } else {
                self.prepare_pseudo(target, &mut pool, x)?
            };
            let lab_batches = self.batches(&labelled, &[3, v, self.epoch as u64, 4]);
            let pseudo_batches = self.batches(&pseudo, &[3, v, self.epoch as u64, 5]);
            let rounds = pseudo_batches.len().max(1);
            let mut total = 0.0;
            let mut steps = 0;
            for i in 0..rounds {
                total += self.step(target, &lab_batches[i % lab_batches.len()], LossKind::Tversky)?;
                steps += 1;
                if let Some(b) = pseudo_batches.get(i) {
                    total += self.step(target, b, kind)?;
                    steps += 1;
                }
            }
            self.log_event(LogEvent::Epoch {
                epoch: self.epoch,
                stage: 3,
                view: target,
                loss: total / steps as f64,
                steps,
            })?;
            self.epoch += 1;
            epochs_run += 1;
            self.update_confidence(&ViewId::ALL)?;
        };
        self.log_event(LogEvent::Stage3Stop {
            epoch: self.epoch,
            target,
            epochs_run,
            reason,
            raw: self.model.alpha(),
        })?;
        self.checkpoint(3)
    }

    /// Ensemble predictions on the test split, hardened at 0.5, and their
    /// metrics.
    pub fn evaluate_test(&self) -> Result<(Vec<MaskGrid>, MetricReport)> {
        evaluate(&self.model, &self.split)
    }
}

pub fn evaluate(model: &TripleModel, split: &DatasetSplit) -> Result<(Vec<MaskGrid>, MetricReport)> {
    let images: Vec<&ImageGrid> = split.test.iter().map(|s| &s.image).collect();
    let preds: Vec<MaskGrid> = model
        .ensemble_predict_all(&images, EVAL_BATCH)?
        .into_iter()
        .map(|m| m.harden(0.5))
        .collect();
    let rows = split
        .test
        .iter()
        .zip(&preds)
        .map(|(s, p)| metrics::evaluate_pair(&s.name, p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, MetricReport::from_images(rows)))
}

pub struct PipelineOutput {
    pub run_dir: PathBuf,
    pub model: TripleModel,
    pub log: TrainLog,
    pub report: MetricReport,
}

/// Loads or synthesises the data, trains all stages, evaluates the ensemble
/// on the test split and writes the run directory.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let run_dir = config.run_dir();
    if run_dir.is_dir() && fs::read_dir(&run_dir)?.next().is_some() {
        return Err(file_error(&run_dir, "run directory exists and is not empty"));
    }
    fs::create_dir_all(&run_dir)?;
    let snapshot = run_dir.join("config.snapshot");
    fs::write(&snapshot, config.to_toml_string()).map_err(|e| file_error(&snapshot, e))?;

    let size = (config.image_size[0], config.image_size[1]);
    let samples = match &config.dataset {
        DatasetSource::Synthetic { count, .. } => data::generate_synthetic_with(
            *count,
            size,
            config.seed,
            &config.synth_config().expect("synthetic source"),
        )?,
        DatasetSource::Directory { path } => data::load_dataset(path, size)?,
    };
    let split = data::split_dataset(&samples, config.labelled_fraction, config.seed)?;
    let mut model = TripleModel::new(&config.model, config.seed, DType::F32)?;
    let mode = match &config.pretrained_stem {
        Some(p) => Some(model.load_pretrained_stem(p)?),
        None => None,
    };

    let mut trainer =
        Trainer::new(model, split, TrainSettings::from_config(config))?.with_run_dir(&run_dir, &config.hash())?;
    if let Some(m) = mode {
        trainer.set_pretrained_mode(m);
    }
    if config.supervised_only {
        trainer.train_supervised_only()?;
    } else {
        trainer.train_stage1()?;
        trainer.train_stage2()?;
        trainer.train_stage3()?;
    }

    let (preds, report) = trainer.evaluate_test()?;
    write_run_outputs(&run_dir, &trainer.split().test, &preds, &report)?;
    overlay::write_run_overlays(&run_dir)?;
    let log = trainer.log().clone();
    Ok(PipelineOutput {
        run_dir,
        model: trainer.into_model(),
        log,
        report,
    })
}

fn write_run_outputs(
    dir: &Path,
    test: &[data::LabelledSample],
    preds: &[MaskGrid],
    report: &MetricReport,
) -> Result<()> {
    let pdir = dir.join("predictions");
    let gdir = dir.join("test_masks");
    fs::create_dir_all(&pdir)?;
    fs::create_dir_all(&gdir)?;
    for (s, p) in test.iter().zip(preds) {
        data::write_grey_png(&pdir.join(format!("{}.png", s.name)), p.grid())?;
        data::write_grey_png(&gdir.join(format!("{}.png", s.name)), s.mask.grid())?;
    }
    write_report(dir, report)
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| file_error(&json, e))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| file_error(&csv, e))
}
