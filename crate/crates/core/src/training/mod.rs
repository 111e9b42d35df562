//! Optimization of the trainable partition, evaluation, and few-shot
//! episode sampling.

mod fewshot;
mod metrics;
mod optimizer;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use fewshot::{sample_16shot, sample_all_classes, sample_kway_nshot, FewShotEpisode, TEST_PER_CLASS};
pub use metrics::{accuracy, segmentation_metrics, SegmentationMetrics};
pub use optimizer::{AdamW, AdamWConfig, LrSchedule};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::heads::{contrastive_loss, total_classification_loss, TextFeatureBank, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE};
use crate::model::{PointClassifier, PointSegmenter};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Contrastive weight; only used with a text bank.
    pub lambda: f64,
    pub temperature: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Constant,
            seed,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// Per-epoch metrics, timings and frozen-tensor digests. Epoch 0 holds
/// the metrics before any update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    /// Seconds spent in each epoch.
    pub wall_times: Vec<f64>,
    /// Combined digest of every frozen tensor, one per epoch including 0.
    pub frozen_digests: Vec<String>,
    /// Mean training loss of each optimizer step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    /// `epoch,split,metric,value` lines with a header. Wall times are left
    /// out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
        }
        s
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    fn push(&mut self, epoch: usize, split: &'static str, metric: &'static str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split,
            metric,
            value,
        });
    }
}

/// Digest over the digests of every frozen tensor, in store order.
pub fn frozen_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for id in store.ids().filter(|&id| store.is_frozen(id)) {
        h.update(store.name(id).as_bytes());
        h.update(store.digest(id).as_bytes());
    }
    hex::encode(h.finalize())
}

/// A model the generic loop can drive.
pub trait Task {
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    /// Training-mode loss of one batch.
    fn loss<'s>(
        &'s self,
        tape: &mut Tape<'s, f32>,
        batch: &[&Sample],
        rng: &mut ChaCha8Rng,
        cfg: &TrainConfig,
    ) -> Result<Var>;
    /// Evaluation-mode metrics, `(name, value)`.
    fn evaluate(&self, samples: &[&Sample], batch: usize) -> Result<Vec<(&'static str, f64)>>;
    /// Checked once before training starts.
    fn prepare(&self, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

/// Classifier plus the optional text bank for the contrastive term.
pub struct Classification<'a> {
    pub model: &'a mut PointClassifier<f32>,
    pub bank: Option<&'a TextFeatureBank>,
}

impl Task for Classification<'_> {
    fn store(&self) -> &ParamStore<f32> {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.model.store
    }

    fn prepare(&self, cfg: &TrainConfig) -> Result<()> {
        if let Some(bank) = self.bank {
            if cfg.lambda > 0.0 && self.model.cfg.head.text_dim != Some(bank.dim) {
                return Err(Error::Config(format!(
                    "head projects to {:?} dims but the text bank has {}",
                    self.model.cfg.head.text_dim, bank.dim
                )));
            }
            if bank.classes() != self.model.cfg.head.classes {
                return Err(Error::Config(format!(
                    "text bank has {} classes, head has {}",
                    bank.classes(),
                    self.model.cfg.head.classes
                )));
            }
        }
        Ok(())
    }

    fn loss<'s>(
        &'s self,
        tape: &mut Tape<'s, f32>,
        batch: &[&Sample],
        rng: &mut ChaCha8Rng,
        cfg: &TrainConfig,
    ) -> Result<Var> {
        let clouds: Vec<_> = batch.iter().map(|s| &s.cloud).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let pass = self.model.forward(tape, &clouds, Some(rng))?;
        let ce = tape.cross_entropy(pass.logits, &labels)?;
        let con = match (self.bank, pass.proj) {
            (Some(bank), Some(proj)) if cfg.lambda > 0.0 => {
                Some(contrastive_loss(tape, proj, &labels, bank, cfg.temperature)?)
            }
            _ => None,
        };
        let lambda = if self.bank.is_some() { cfg.lambda } else { 0.0 };
        total_classification_loss(tape, ce, con, lambda)
    }

    fn evaluate(&self, samples: &[&Sample], batch: usize) -> Result<Vec<(&'static str, f64)>> {
        let clouds: Vec<_> = samples.iter().map(|s| &s.cloud).collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let pred = self.model.predict(&clouds, batch)?;
        Ok(vec![("accuracy", accuracy(&pred, &truth)?)])
    }
}

fn point_labels(s: &Sample) -> Result<Vec<usize>> {
    s.cloud
        .labels()
        .map(|l| l.iter().map(|&v| v as usize).collect())
        .ok_or_else(|| Error::Argument(format!("cloud `{}` has no point labels", s.id)))
}

impl Task for PointSegmenter<f32> {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn loss<'s>(
        &'s self,
        tape: &mut Tape<'s, f32>,
        batch: &[&Sample],
        rng: &mut ChaCha8Rng,
        _cfg: &TrainConfig,
    ) -> Result<Var> {
        let clouds: Vec<_> = batch.iter().map(|s| &s.cloud).collect();
        let mut labels = Vec::new();
        for s in batch {
            labels.extend(point_labels(s)?);
        }
        let logits = self.forward(tape, &clouds, Some(rng))?;
        tape.cross_entropy(logits, &labels)
    }

    fn evaluate(&self, samples: &[&Sample], batch: usize) -> Result<Vec<(&'static str, f64)>> {
        let clouds: Vec<_> = samples.iter().map(|s| &s.cloud).collect();
        let truth = samples.iter().map(|s| point_labels(s)).collect::<Result<Vec<_>>>()?;
        let pred = self.predict(&clouds, batch)?;
        let m = segmentation_metrics(&pred, &truth, self.cfg.pipeline.classes)?;
        Ok(vec![
            ("point_accuracy", m.point_accuracy),
            ("mAcc", m.mean_class_accuracy),
            ("mIoU", m.instance_miou),
        ])
    }
}

fn first_non_finite(store: &ParamStore<f32>, grads: bool) -> Option<String> {
    store.ids().find_map(|id| {
        let t = store.get(id);
        let vals = if grads { t.grad()? } else { t.data() };
        vals.iter().any(|v| !v.is_finite()).then(|| store.name(id).to_string())
    })
}

/// Trains `task` on `train`, evaluating on `test` (if non-empty) before
/// the first epoch and after each one.
///
/// Frozen tensors are re-hashed after every epoch; any change is a
/// contract violation.
pub fn train<M: Task>(task: &mut M, train: &[&Sample], test: &[&Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    task.prepare(cfg)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Argument("training split is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer);
    let schedule = match cfg.schedule {
        LrSchedule::Cosine { total_steps: 0, min_lr } => {
            let per_epoch = train.len().div_ceil(cfg.batch_size);
            LrSchedule::Cosine {
                total_steps: cfg.max_steps.unwrap_or(per_epoch * cfg.epochs),
                min_lr,
            }
        }
        s => s,
    };
    let mut report = TrainReport::default();
    let initial = frozen_digest(task.store());
    report.frozen_digests.push(initial.clone());
    if !test.is_empty() {
        for (name, v) in task.evaluate(test, cfg.batch_size)? {
            report.push(0, "test", name, v);
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let lr = schedule.rate(cfg.optimizer.lr, report.steps);
            let (value, grads) = {
                let store = task.store();
                let mut tape = Tape::new(store);
                let loss = task.loss(&mut tape, &batch, &mut drop_rng, cfg)?;
                let value = f64::from(tape.value(loss)[0]);
                if !value.is_finite() {
                    let culprit = first_non_finite(store, false)
                        .map(|n| format!("tensor `{n}` is non-finite"))
                        .unwrap_or_else(|| "all parameters finite".into());
                    return Err(Error::Numerical {
                        step: report.steps,
                        lr,
                        msg: format!("loss is {value}; {culprit}"),
                    });
                }
                (value, tape.backward(loss)?)
            };
            let store = task.store_mut();
            store.zero_grad();
            store.accumulate(&grads)?;
            if let Some(name) = first_non_finite(store, true) {
                return Err(Error::Numerical {
                    step: report.steps,
                    lr,
                    msg: format!("gradient of tensor `{name}` is non-finite"),
                });
            }
            opt.step(store, lr)?;
            report.steps += 1;
            report.step_losses.push(value);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let digest = frozen_digest(task.store());
        if digest != initial {
            return Err(Error::Contract(format!("frozen tensors changed during epoch {epoch}")));
        }
        report.frozen_digests.push(digest);
        if seen > 0 {
            report.push(epoch, "train", "loss", loss_sum / seen as f64);
        }
        if !test.is_empty() {
            for (name, v) in task.evaluate(test, cfg.batch_size)? {
                report.push(epoch, "test", name, v);
            }
        }
        report.wall_times.push(start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: loss {:.4}, test {}",
            if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            report
                .records
                .iter()
                .filter(|r| r.epoch == epoch && r.split == "test")
                .map(|r| format!("{} {:.4}", r.metric, r.value))
                .collect::<Vec<_>>()
                .join(", ")
        );
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break 'epochs;
        }
    }
    Ok(report)
}
