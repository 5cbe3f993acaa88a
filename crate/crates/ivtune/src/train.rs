//! Training loop, loss and evaluation metrics.
//!
//! The loop enforces the freeze contract end to end: gradients only exist
//! for trainable parameters (the tape never materializes others) and the
//! optimizer rejects any gradient for a frozen parameter. Batch norm runs
//! in train mode during steps and eval mode during evaluation.

use crate::config::TrainConfig;
use crate::data::{collate, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::IvModel;
use crate::optim::Optimizer;
use crate::params::Binding;
use crate::tape::{BnMode, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar metrics for one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub miou: f64,
}

/// One metric row: (epoch, split, metrics).
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub metrics: Metrics,
}

/// Per-epoch metric log; serializes to the metrics CSV.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: metrics.v1\nepoch,split,loss,accuracy,miou\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.split, r.metrics.loss, r.metrics.accuracy, r.metrics.miou
            ));
        }
        out
    }

    /// Final validation metrics, when any epoch ran.
    pub fn final_val(&self) -> Option<Metrics> {
        self.records.iter().rev().find(|r| r.split == "val").map(|r| r.metrics)
    }
}

/// Argmax over the class axis of [.., K] logits; ties resolve to the
/// lowest class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// K×K confusion counts indexed [true][pred].
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn update(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::Shape {
                op: "confusion",
                detail: format!("{} predictions vs {} labels", preds.len(), labels.len()),
            });
        }
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: p.max(t),
                    classes: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        correct as f64 / self.total() as f64
    }

    /// Mean IoU over classes; classes absent from both prediction and
    /// truth are excluded from the mean.
    pub fn miou(&self) -> f64 {
        let k = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.counts[t * k + c]).sum();
            let denom = tp + fp + fn_;
            if denom > 0 {
                sum += tp as f64 / denom as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

/// One optimization step on a collated batch. Returns the loss and the
/// batch predictions from the same forward pass.
pub fn train_step(
    model: &mut IvModel,
    optimizer: &mut Optimizer,
    vis: &Tensor,
    ir: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<usize>)> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&model.store, &mut tape)?;
    let vis_v = tape.constant(vis.clone())?;
    let ir_v = tape.constant(ir.clone())?;
    let out = model.forward_on(&mut tape, &bind, vis_v, Some(ir_v), BnMode::Train)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite { op: "train_step loss" });
    }
    let preds = predictions(tape.value(out.logits));
    let grads = tape.backward(loss)?;
    let named = bind.named_gradients(&model.store, grads);
    optimizer.step(&mut model.store, &named)?;
    Ok((loss_val, preds))
}

/// Gradients of the batch loss by parameter name, without updating.
pub fn batch_gradients(
    model: &mut IvModel,
    vis: &Tensor,
    ir: &Tensor,
    labels: &[usize],
) -> Result<std::collections::HashMap<String, Tensor>> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&model.store, &mut tape)?;
    let vis_v = tape.constant(vis.clone())?;
    let ir_v = tape.constant(ir.clone())?;
    let out = model.forward_on(&mut tape, &bind, vis_v, Some(ir_v), BnMode::Train)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(bind.named_gradients(&model.store, grads))
}

/// Evaluate on a sample slice with eval-mode batch norm.
pub fn evaluate(model: &mut IvModel, samples: &[SyntheticSample], batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluate on empty split".into()));
    }
    let k = model.config.num_classes;
    let mut conf = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    let mut rows = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SyntheticSample> = chunk.iter().collect();
        let (vis, ir, labels) = collate(&refs);
        let mut tape = Tape::new();
        let bind = Binding::bind(&model.store, &mut tape)?;
        let vis_v = tape.constant(vis)?;
        let ir_v = tape.constant(ir)?;
        let out = model.forward_on(&mut tape, &bind, vis_v, Some(ir_v), BnMode::Eval)?;
        let loss = tape.cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).item() * labels.len() as f64;
        rows += labels.len();
        conf.update(&predictions(tape.value(out.logits)), &labels)?;
    }
    Ok(Metrics {
        loss: loss_sum / rows as f64,
        accuracy: conf.accuracy(),
        miou: conf.miou(),
    })
}

/// Full training run: seeded shuffling, one metrics row per split per
/// epoch. With zero epochs the model is untouched and the log is empty.
pub fn train(model: &mut IvModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainLog, Optimizer)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let mut optimizer = Optimizer::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let k = model.config.num_classes;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);
        let mut conf = ConfusionMatrix::new(k);
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SyntheticSample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (vis, ir, labels) = collate(&refs);
            let (loss, preds) = train_step(model, &mut optimizer, &vis, &ir, &labels)?;
            loss_sum += loss * labels.len() as f64;
            rows += labels.len();
            conf.update(&preds, &labels)?;
        }
        log.records.push(EpochRecord {
            epoch,
            split: "train",
            metrics: Metrics {
                loss: loss_sum / rows as f64,
                accuracy: conf.accuracy(),
                miou: conf.miou(),
            },
        });
        if !dataset.val.is_empty() {
            let metrics = evaluate(model, &dataset.val, cfg.batch_size)?;
            log.records.push(EpochRecord { epoch, split: "val", metrics });
        }
    }
    Ok((log, optimizer))
}
