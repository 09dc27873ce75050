//! Seeded training loop shared by every mode: shuffled minibatches, one
//! tape per sample, heavy-ball SGD, per-epoch validation with best-weight
//! restore, and the staged variant that trains the query network first and
//! then the refiner with everything else frozen.
//!
//! A config trains bit-identically across runs. With `threads > 1` each
//! batch is mapped over worker replicas; the result is deterministic for a
//! fixed thread count but can differ from the serial schedule in the last
//! float bit because chunk gradients are reduced in chunk order.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icmlm::draw_mask_flags;
use crate::loss::{attribute_weights, WeightScheme};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Mode, Model, ModelConfig};
use crate::nn::{LrSchedule, Sgd};
use crate::rng::{streams, substream};
use crate::synth::Dataset;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    /// Divide the rate by 10 after `patience` epochs without a validation
    /// improvement. The patience value lives in [`TrainConfig`].
    Plateau,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Plateau => "plateau",
        }
    }

    pub fn parse(s: &str) -> Option<ScheduleKind> {
        match s {
            "constant" => Some(ScheduleKind::Constant),
            "cosine" => Some(ScheduleKind::Cosine),
            "plateau" => Some(ScheduleKind::Plateau),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    /// Exponential attribute weights from the training split's positive
    /// ratios.
    Exponential,
}

impl Weighting {
    pub fn name(&self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Option<Weighting> {
        match s {
            "uniform" => Some(Weighting::Uniform),
            "exponential" => Some(Weighting::Exponential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub patience: usize,
    /// Per-word masking probability for refiner training.
    pub alpha: f64,
    /// Weight of the refiner loss in the summed objective.
    pub lambda: f64,
    pub weighting: Weighting,
    pub seed: u64,
    /// 1 = serial; more maps each batch over that many worker replicas.
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |detail: String| Err(Error::ConfigError { detail });
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.model.mode == Mode::TwoStage && self.epochs < 2 {
            return fail("two_stage needs at least 2 epochs, one per stage".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr {} must be finite and positive", self.lr));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} must be finite and nonnegative", self.weight_decay));
        }
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda {} must be finite and nonnegative", self.lambda));
        }
        if self.schedule == ScheduleKind::Plateau && self.patience == 0 {
            return fail("plateau patience must be at least 1".into());
        }
        Ok(())
    }

    fn build_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::Cosine => LrSchedule::Cosine { total_epochs: self.epochs },
            ScheduleKind::Plateau => LrSchedule::plateau(self.patience),
        }
    }
}

/// A dataset split held in memory: images plus binary label rows, in the
/// manifest's split order.
pub struct LoadedSplit {
    pub ids: Vec<u64>,
    pub images: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

impl LoadedSplit {
    pub fn load(ds: &Dataset, split: &str) -> Result<LoadedSplit> {
        let ids = ds.split(split)?.to_vec();
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in &ids {
            let image = ds.load_image(id)?;
            image.set_requires_grad(false);
            images.push(image);
            labels.push(ds.label(id)?.to_vec());
        }
        Ok(LoadedSplit { ids, images, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fraction of positive labels per attribute, the gamma driving the
/// exponential weighting scheme.
pub fn positive_ratios(labels: &[Vec<u8>]) -> Vec<f64> {
    if labels.is_empty() {
        return Vec::new();
    }
    let m = labels[0].len();
    let n = labels.len() as f64;
    (0..m)
        .map(|j| labels.iter().filter(|row| row[j] == 1).count() as f64 / n)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_aqn")]
    pub l_aqn: f64,
    #[serde(rename = "L_mlm")]
    pub l_mlm: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub val: MetricReport,
}

pub struct TrainResult {
    /// Weights restored to the best validation epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_error: f64,
}

/// Which parameters train during an epoch. Single-phase modes stay `Joint`;
/// `two_stage` spends the first half in `QueryOnly` (refiner frozen and
/// idle) and the rest in `RefinerOnly` (everything else frozen).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Joint,
    QueryOnly,
    RefinerOnly,
}

fn phase_for_epoch(cfg: &TrainConfig, epoch: usize) -> Phase {
    if cfg.model.mode != Mode::TwoStage {
        Phase::Joint
    } else if epoch < (cfg.epochs + 1) / 2 {
        Phase::QueryOnly
    } else {
        Phase::RefinerOnly
    }
}

fn apply_phase(model: &Model, phase: Phase) {
    model.set_trainable(&[""], true);
    match phase {
        Phase::Joint => {}
        Phase::QueryOnly => model.set_trainable(&["mlm."], false),
        Phase::RefinerOnly => model.set_trainable(&["backbone.", "aqn."], false),
    }
}

fn run_refiner_in(phase: Phase, mode: Mode) -> bool {
    match phase {
        Phase::Joint => mode.has_refiner(),
        Phase::QueryOnly => false,
        Phase::RefinerOnly => true,
    }
}

#[derive(Default, Clone, Copy)]
struct BatchTerms {
    l_aqn: f64,
    l_mlm: f64,
    l_total: f64,
}

impl BatchTerms {
    fn add(&mut self, other: &BatchTerms) {
        self.l_aqn += other.l_aqn;
        self.l_mlm += other.l_mlm;
        self.l_total += other.l_total;
    }
}

/// Forward/backward over the indexed samples, leaving gradients accumulated
/// in the model's parameters. Each sample gets its own tape; losses are
/// scaled by `inv_batch` so the batch gradient is a mean.
#[allow(clippy::too_many_arguments)]
fn accumulate_batch(
    model: &Model,
    images: &[Tensor],
    labels_f: &[Vec<f64>],
    idxs: &[usize],
    flags: Option<&[Vec<bool>]>,
    run_refiner: bool,
    inv_batch: f64,
    lambda: f64,
    scheme: &WeightScheme,
) -> Result<BatchTerms> {
    let mut terms = BatchTerms::default();
    for (k, &i) in idxs.iter().enumerate() {
        let tape = Tape::new();
        let mask = flags.map(|f| f[k].as_slice());
        let fwd = model.forward(&tape, &images[i], mask, run_refiner)?;
        let (loss, la, lm) = model.sample_loss(&tape, &fwd, &labels_f[i], lambda, scheme)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { value });
        }
        terms.l_aqn += la;
        terms.l_mlm += lm;
        terms.l_total += value;
        tape.backward(&tape.mul_scalar(&loss, inv_batch))?;
    }
    Ok(terms)
}

/// Trainable parameters the batch graph never reached (an idle head, unused
/// positional rows) get explicit zero gradients so the optimizer can insist
/// on one gradient per trainable parameter.
fn materialize_missing_grads(model: &Model) {
    for (_, t, _) in model.params.iter() {
        if t.requires_grad() && t.grad().is_none() {
            t.accumulate_grad(&vec![0.0; t.numel()]);
        }
    }
}

/// Greedy per-sample predictions for a whole split; the inference path, no
/// masking. `run_refiner = false` reads the query-network head instead.
pub fn predictions(model: &Model, split: &LoadedSplit, run_refiner: bool) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(split.len());
    for image in &split.images {
        let tape = Tape::new();
        out.push(model.forward(&tape, image, None, run_refiner)?.prediction);
    }
    Ok(out)
}

struct Job {
    snapshot: Arc<Vec<Vec<f64>>>,
    idxs: Vec<usize>,
    flags: Option<Vec<Vec<bool>>>,
    run_refiner: bool,
    inv_batch: f64,
    phase: Phase,
}

type Reply = Result<(BatchTerms, Vec<Option<Vec<f64>>>)>;

struct Worker {
    job_tx: mpsc::Sender<Job>,
    reply_rx: mpsc::Receiver<Reply>,
    handle: thread::JoinHandle<()>,
}

/// Each worker owns a model replica plus a private copy of the training
/// tensors. Per job it syncs to the sent snapshot, accumulates its chunk's
/// gradients and mails them back; the caller reduces chunks in worker order.
fn spawn_workers(cfg: &TrainConfig, split: &LoadedSplit, labels_f: &[Vec<f64>], scheme: &WeightScheme) -> Vec<Worker> {
    if cfg.threads <= 1 {
        return Vec::new();
    }
    (0..cfg.threads)
        .map(|_| {
            let (job_tx, job_rx) = mpsc::channel::<Job>();
            let (reply_tx, reply_rx) = mpsc::channel::<Reply>();
            let config = cfg.model.clone();
            let lambda = cfg.lambda;
            let scheme = scheme.clone();
            let raw: Vec<(Vec<usize>, Vec<f64>)> =
                split.images.iter().map(|t| (t.shape().to_vec(), t.to_vec())).collect();
            let labels: Vec<Vec<f64>> = labels_f.to_vec();
            let handle = thread::spawn(move || {
                let replica = Model::new(config, 0).expect("replica of a validated config");
                let images: Vec<Tensor> = raw
                    .into_iter()
                    .map(|(shape, data)| {
                        let t = Tensor::param(shape, data).expect("replica image");
                        t.set_requires_grad(false);
                        t
                    })
                    .collect();
                while let Ok(job) = job_rx.recv() {
                    let reply = (|| {
                        apply_phase(&replica, job.phase);
                        replica.params.load_snapshot(&job.snapshot)?;
                        let terms = accumulate_batch(
                            &replica,
                            &images,
                            &labels,
                            &job.idxs,
                            job.flags.as_deref(),
                            job.run_refiner,
                            job.inv_batch,
                            lambda,
                            &scheme,
                        )?;
                        let grads: Vec<Option<Vec<f64>>> =
                            replica.params.iter().map(|(_, t, _)| t.grad()).collect();
                        replica.params.zero_grads();
                        Ok((terms, grads))
                    })();
                    if reply_tx.send(reply).is_err() {
                        break;
                    }
                }
            });
            Worker { job_tx, reply_rx, handle }
        })
        .collect()
}

/// Contiguous near-even chunks, one per worker; early chunks absorb the
/// remainder so sizes differ by at most one.
fn chunk_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut bounds = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        bounds.push((start, start + size));
        start += size;
    }
    bounds
}

pub fn train(
    cfg: &TrainConfig,
    train_split: &LoadedSplit,
    val_split: &LoadedSplit,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::ConfigError {
            detail: "training and validation splits must be nonempty".into(),
        });
    }
    for split in [train_split, val_split] {
        if split.labels.iter().any(|row| row.len() != cfg.model.m) {
            return Err(Error::ConfigError {
                detail: format!("dataset labels do not have {} attributes", cfg.model.m),
            });
        }
    }

    let n = train_split.len();
    let m = cfg.model.m;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let labels_f: Vec<Vec<f64>> = train_split
        .labels
        .iter()
        .map(|row| row.iter().map(|&b| f64::from(b)).collect())
        .collect();
    let scheme = match cfg.weighting {
        Weighting::Uniform => WeightScheme::Uniform,
        Weighting::Exponential => attribute_weights(&positive_ratios(&train_split.labels))?,
    };
    let workers = spawn_workers(cfg, train_split, &labels_f, &scheme);

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut schedule = cfg.build_schedule();
    let mut prev_val: Option<f64> = None;
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut prev_phase = None;

    let mut run = || -> Result<()> {
        for epoch in 0..cfg.epochs {
            let phase = phase_for_epoch(cfg, epoch);
            apply_phase(&model, phase);
            if prev_phase.is_some() && prev_phase != Some(phase) {
                // New head, new race: stage two restarts the schedule and
                // the best-epoch tracking so a stage-one snapshot can never
                // win with an untrained refiner.
                schedule = cfg.build_schedule();
                prev_val = None;
                best = None;
            }
            prev_phase = Some(phase);
            let run_refiner = run_refiner_in(phase, cfg.model.mode);

            let lr = schedule.epoch_lr(cfg.lr, epoch, prev_val);
            sgd.lr = lr;

            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = substream(cfg.seed, streams::SHUFFLE + epoch as u64);
            for i in (1..n).rev() {
                order.swap(i, shuffle_rng.gen_range(0..=i));
            }
            let epoch_flags: Option<Vec<Vec<bool>>> = if run_refiner {
                let mut mask_rng = substream(cfg.seed, streams::MASK + epoch as u64);
                Some((0..n).map(|_| draw_mask_flags(m, cfg.alpha, &mut mask_rng)).collect())
            } else {
                None
            };

            let mut epoch_terms = BatchTerms::default();
            for batch_start in (0..n).step_by(cfg.batch_size) {
                let batch_end = (batch_start + cfg.batch_size).min(n);
                let idxs = &order[batch_start..batch_end];
                let inv_batch = 1.0 / idxs.len() as f64;
                let flags_slice = epoch_flags.as_ref().map(|f| &f[batch_start..batch_end]);

                let terms = if workers.is_empty() {
                    accumulate_batch(
                        &model,
                        &train_split.images,
                        &labels_f,
                        idxs,
                        flags_slice,
                        run_refiner,
                        inv_batch,
                        cfg.lambda,
                        &scheme,
                    )?
                } else {
                    let snapshot = Arc::new(model.params.snapshot());
                    let bounds = chunk_bounds(idxs.len(), workers.len());
                    for (worker, &(lo, hi)) in workers.iter().zip(&bounds) {
                        if lo == hi {
                            continue;
                        }
                        let job = Job {
                            snapshot: Arc::clone(&snapshot),
                            idxs: idxs[lo..hi].to_vec(),
                            flags: flags_slice.map(|f| f[lo..hi].to_vec()),
                            run_refiner,
                            inv_batch,
                            phase,
                        };
                        worker.job_tx.send(job).expect("worker alive");
                    }
                    let mut terms = BatchTerms::default();
                    let slots = model.params.tensors();
                    for (worker, &(lo, hi)) in workers.iter().zip(&bounds) {
                        if lo == hi {
                            continue;
                        }
                        let (chunk_terms, grads) = worker.reply_rx.recv().expect("worker alive")?;
                        terms.add(&chunk_terms);
                        for (slot, grad) in slots.iter().zip(&grads) {
                            if let Some(g) = grad {
                                slot.accumulate_grad(g);
                            }
                        }
                    }
                    terms
                };
                epoch_terms.add(&terms);
                materialize_missing_grads(&model);
                sgd.step(&model.params)?;
            }

            let preds = predictions(&model, val_split, run_refiner)?;
            let val = evaluate(&preds, &val_split.labels)?;
            let entry = EpochLog {
                epoch: epoch + 1,
                l_aqn: epoch_terms.l_aqn / n as f64,
                l_mlm: epoch_terms.l_mlm / n as f64,
                l_total: epoch_terms.l_total / n as f64,
                lr,
                val,
            };
            prev_val = Some(entry.val.mean_error);
            if best.as_ref().map_or(true, |(b, _, _)| entry.val.mean_error < *b) {
                best = Some((entry.val.mean_error, epoch + 1, model.params.snapshot()));
            }
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(())
    };
    let outcome = run();

    for worker in workers {
        drop(worker.job_tx);
        let _ = worker.handle.join();
    }
    outcome?;

    let (best_val_error, best_epoch, snapshot) = best.expect("at least one epoch ran");
    model.params.load_snapshot(&snapshot)?;
    Ok(TrainResult { model, log, best_epoch, best_val_error })
}
