//! Optimization, sampling, training loops, evaluation and the ablation
//! harness.

mod ablation;
mod metrics;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::adsformer::{AdpmBatch, AdpmVocabs};
use crate::autograd::Graph;
use crate::embeddings::PretrainedBundle;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ranking::{forward, predict, RankingBatch, RankingModel, Task};
use crate::rng::Stream;
use crate::sequences::Dataset;
use crate::tensor::Tensor;

pub use ablation::{
    lift_percent, records_tsv, run_ablation, run_grid, run_variant, summarize, summary_table,
    summary_tsv, AblationContext, AblationRecord, AblationSummary, AblationVariant, BASELINE,
};
pub use metrics::{
    ece, fit_platt, nce, pr_auc, roc_auc, CalibrationParams, MetricReport, ECE_BINS,
    PLATT_MAX_ITERS, PLATT_TOL,
};

// ----- optimizer -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr_max: f64) -> Self {
        Self {
            lr_max,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update at learning rate `lr`. Gradients for
    /// non-trainable entries are ignored.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            if g.len() != p.tensor.len() {
                return Err(Error::shape("adam", p.tensor.shape(), &[g.len()]));
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `0.5·lr_max·(1 + cos(π·t/T))`, clamped to `t ∈ [0, T]`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = step.min(total) as f64;
    if step >= total {
        return 0.0;
    }
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

// ----- sampling ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Keep a random subset of negatives as large as the positive set.
    #[default]
    Balanced5050,
    /// Keep each negative independently with probability one half.
    KeepHalfNegatives,
    None,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced_50_50" => Ok(SamplingMode::Balanced5050),
            "keep_half_negatives" => Ok(SamplingMode::KeepHalfNegatives),
            "none" => Ok(SamplingMode::None),
            _ => Err(Error::Config(format!(
                "unknown sampling mode `{s}` (balanced_50_50|keep_half_negatives|none)"
            ))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Balanced5050 => "balanced_50_50",
            SamplingMode::KeepHalfNegatives => "keep_half_negatives",
            SamplingMode::None => "none",
        })
    }
}

/// Row indices kept by `mode`, in ascending order.
pub fn negative_sample(
    labels: &[bool],
    mode: SamplingMode,
    rng: &mut Stream,
) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut kept = match mode {
        SamplingMode::None => return Ok((0..labels.len()).collect()),
        SamplingMode::Balanced5050 => {
            if pos.is_empty() {
                return Err(Error::InvalidArgument(
                    "balanced sampling needs at least one positive".into(),
                ));
            }
            rng.shuffle(&mut neg);
            neg.truncate(pos.len());
            neg
        }
        SamplingMode::KeepHalfNegatives => neg.into_iter().filter(|_| rng.bernoulli(0.5)).collect(),
    };
    kept.extend(pos);
    kept.sort_unstable();
    Ok(kept)
}

/// Dataset-level wrapper of [`negative_sample`] on click labels.
pub fn negative_sample_dataset(
    data: &Dataset,
    mode: SamplingMode,
    rng: &mut Stream,
) -> Result<Dataset> {
    let labels: Vec<bool> = data.rows.iter().map(|r| r.click).collect();
    Ok(data.subset(&negative_sample(&labels, mode, rng)?))
}

// ----- data ----------------------------------------------------------------------

/// Impressions with their dense context features, row aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dataset: Dataset,
    pub context: Tensor,
}

impl TrainingData {
    pub fn new(dataset: Dataset, context: Tensor) -> Result<Self> {
        if context.shape().len() != 2 || context.rows() != dataset.len() {
            return Err(Error::shape(
                "training data",
                context.shape(),
                &[dataset.len()],
            ));
        }
        Ok(Self { dataset, context })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn context_dim(&self) -> usize {
        self.context.cols()
    }

    pub fn label(&self, row: usize, task: Task) -> bool {
        let r = &self.dataset.rows[row];
        match task {
            Task::Ctr => r.click,
            Task::Pccvr => r.purchase,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.context_dim();
        let mut ctx = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            ctx.extend_from_slice(self.context.row(r));
        }
        Self {
            dataset: self.dataset.subset(rows),
            context: Tensor::new(&[rows.len(), d], ctx).expect("consistent widths"),
        }
    }

    /// Rows a task trains or evaluates on: all of them for CTR, clicked
    /// ones for PCCVR.
    pub fn task_rows(&self, task: Task) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| task == Task::Ctr || self.dataset.rows[i].click)
            .collect()
    }

    pub fn batch(
        &self,
        rows: &[usize],
        task: Task,
        model: &RankingModel,
        vocabs: Option<&AdpmVocabs>,
    ) -> Result<RankingBatch> {
        let d = self.context_dim();
        let mut ctx = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            ctx.extend_from_slice(self.context.row(r));
        }
        let adpm = match &model.adpm {
            Some(a) => {
                let v = vocabs
                    .ok_or_else(|| Error::Config("personalized model needs vocabularies".into()))?;
                Some(AdpmBatch::from_dataset(&self.dataset, rows, v, &a.config)?)
            }
            None => None,
        };
        Ok(RankingBatch {
            context: Tensor::new(&[rows.len(), d], ctx)?,
            adpm,
            labels: rows
                .iter()
                .map(|&r| f64::from(u8::from(self.label(r, task))))
                .collect(),
        })
    }
}

// ----- training ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Ctr => Self {
                task,
                epochs: 1,
                batch_size: 256,
                lr_max: 0.002,
                sampling: SamplingMode::Balanced5050,
                seed: 0,
            },
            Task::Pccvr => Self {
                task,
                epochs: 2,
                batch_size: 256,
                lr_max: 0.002,
                sampling: SamplingMode::None,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return Err(Error::Config(format!(
                "lr_max {} must be a non-negative number",
                self.lr_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    /// Mean loss of every step, in order.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub rows_per_epoch: usize,
    /// Rows without a click that reached a PCCVR loss (always 0).
    pub non_clicked_rows_seen: usize,
}

/// Runs `cfg.epochs` passes of minibatch Adam with a cosine schedule over
/// the task rows of `data` (after negative sampling for CTR).
pub fn train(
    store: &mut ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    vocabs: Option<&AdpmVocabs>,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let (Some(a), Some(v)) = (&model.adpm, vocabs) {
        a.check_pretrained(pretrained, v)?;
    }
    let root = Stream::new(cfg.seed).substream("train");
    let task_rows = data.task_rows(cfg.task);
    let rows: Vec<usize> = match cfg.task {
        Task::Ctr => {
            let labels: Vec<bool> = task_rows.iter().map(|&r| data.label(r, cfg.task)).collect();
            negative_sample(&labels, cfg.sampling, &mut root.substream("sampling"))?
                .into_iter()
                .map(|i| task_rows[i])
                .collect()
        }
        Task::Pccvr => task_rows,
    };
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no training rows".into()));
    }
    let per_epoch = rows.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new(cfg.lr_max);
    let mut out = TrainOutcome {
        rows_per_epoch: rows.len(),
        ..TrainOutcome::default()
    };
    let mut dropout_rng = root.substream("dropout");
    for epoch in 0..cfg.epochs {
        let mut order = rows.clone();
        root.substream(&format!("epoch{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.task == Task::Pccvr {
                out.non_clicked_rows_seen += chunk
                    .iter()
                    .filter(|&&r| !data.dataset.rows[r].click)
                    .count();
            }
            let batch = data.batch(chunk, cfg.task, model, vocabs)?;
            let lr = cosine_lr(out.steps, total, cfg.lr_max);
            let loss = train_step(
                store,
                model,
                pretrained,
                &batch,
                &mut adam,
                lr,
                &mut dropout_rng,
            )?;
            out.losses.push(loss);
            out.steps += 1;
        }
    }
    Ok(out)
}

/// One forward/backward/update on `batch`; returns the loss before the
/// update.
pub fn train_step(
    store: &mut ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    batch: &RankingBatch,
    adam: &mut Adam,
    lr: f64,
    rng: &mut Stream,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = forward(&mut g, store, model, pretrained, batch, true, rng)?;
    let loss = g.bce(out.probs, &batch.labels)?;
    g.backward(loss)?;
    let value = g.data(loss)[0];
    let grads = g.param_grads();
    adam.step(store, &grads, lr)?;
    model.update_running_stats(store, &out.bn_stats);
    Ok(value)
}

pub const EVAL_CHUNK: usize = 2048;

/// Evaluation-mode logits and labels over the task rows of `data`.
pub fn score(
    store: &ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    vocabs: Option<&AdpmVocabs>,
    data: &TrainingData,
    task: Task,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let rows = data.task_rows(task);
    let mut logits = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk, task, model, vocabs)?;
        logits.extend(predict(store, model, pretrained, &batch)?.0);
    }
    let labels = rows.iter().map(|&r| data.label(r, task)).collect();
    Ok((logits, labels))
}

/// Metrics of the model (optionally recalibrated) on the task rows of
/// `data`.
pub fn evaluate(
    store: &ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    vocabs: Option<&AdpmVocabs>,
    data: &TrainingData,
    task: Task,
    calibration: Option<CalibrationParams>,
) -> Result<MetricReport> {
    let (logits, labels) = score(store, model, pretrained, vocabs, data, task)?;
    let cal = calibration.unwrap_or(CalibrationParams::identity());
    MetricReport::compute(&cal.apply_all(&logits), &labels)
}
