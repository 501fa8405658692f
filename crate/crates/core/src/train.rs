//! Momentum-SGD training and fine-tuning with seeded shuffling and augmentation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Augment, Dataset, Normalizer, Split};
use crate::error::{Error, Result};
use crate::kernels::dense::{argmax_rows, softmax_cross_entropy};
use crate::model::{Ctx, Layer, ModelGraph, Node};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    MomentumSgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub lr: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: Augment,
    /// Per-channel mean/std normalization fitted on the training split.
    pub normalize: bool,
    /// L1 penalty on BN scales (network-slimming regularizer); 0 disables it.
    pub bn_l1: f64,
    pub eval_batch_size: usize,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            optimizer: Optimizer::MomentumSgd,
            momentum: 0.9,
            lr: 0.1,
            milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            weight_decay: 5e-4,
            seed: 0,
            augment: Augment::default(),
            normalize: true,
            bn_l1: 0.0,
            eval_batch_size: 256,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 || self.bn_l1 < 0.0 {
            return bad("regularization strengths must be non-negative".into());
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones are fractions of the epoch budget in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize).count();
        (self.lr * self.lr_decay.powi(passed as i32)) as f32
    }

    pub fn normalizer(&self, train: &Split) -> Result<Normalizer> {
        if self.normalize {
            Normalizer::fit(train)
        } else {
            Ok(Normalizer::identity())
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f32,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub normalizer: Normalizer,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Stored tensors at the best test accuracy.
    pub best_tensors: Option<Vec<(String, Tensor)>>,
    pub first_epoch_loss: f64,
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn step(&mut self, model: &mut ModelGraph, cfg: &TrainConfig, lr: f32) {
        let mut k = 0;
        let velocity = &mut self.velocity;
        let (momentum, weight_decay) = (cfg.momentum as f32, cfg.weight_decay as f32);
        model.visit_params(&mut |_, w, g| {
            if velocity.len() <= k {
                velocity.push(vec![0.0; w.len()]);
            }
            let v = &mut velocity[k];
            for ((wi, gi), vi) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let d = gi + weight_decay * *wi;
                *vi = momentum * *vi + d;
                *wi -= lr * *vi;
            }
            k += 1;
        });
    }
}

fn add_bn_l1(nodes: &mut [Node], lambda: f32) {
    for n in nodes {
        match &mut n.layer {
            Layer::BatchNorm(b) => {
                for (g, &w) in b.grad_gamma.data_mut().iter_mut().zip(b.gamma.data()) {
                    *g += lambda * w.signum() * f32::from(w != 0.0);
                }
            }
            Layer::Residual(r) => add_bn_l1(&mut r.branch, lambda),
            _ => {}
        }
    }
}

/// Eval-mode mean cross-entropy and top-1 accuracy.
pub fn evaluate(model: &mut ModelGraph, split: &Split, norm: &Normalizer, batch_size: usize) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let classes = model.meta.num_classes;
    let (mut loss, mut correct) = (0f64, 0usize);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = make_batch(split, chunk, norm, Augment::none(), None);
        let logits = model.forward(x, &mut Ctx::eval())?;
        let (l, _) = softmax_cross_entropy(logits.data(), y.len(), classes, &y);
        loss += l as f64 * chunk.len() as f64;
        correct += argmax_rows(logits.data(), classes).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss / split.len() as f64, correct as f64 / split.len() as f64))
}

/// Trains `model` in place. Log records are written as JSON lines to `log`.
pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if data.num_classes() != model.meta.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {} has {}",
            model.meta.num_classes,
            data.name,
            data.num_classes()
        )));
    }
    let norm = cfg.normalizer(&data.train)?;
    let classes = model.meta.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd { velocity: Vec::new() };
    let start = Instant::now();
    let mut out = TrainOutcome {
        history: Vec::new(),
        normalizer: norm,
        final_test_acc: None,
        best_test_acc: None,
        best_epoch: None,
        best_tensors: None,
        first_epoch_loss: f64::NAN,
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = make_batch(&data.train, chunk, &norm, cfg.augment, Some(&mut rng));
            model.zero_grad();
            let logits = model.forward(x, &mut Ctx::train())?;
            let (loss, grad) = softmax_cross_entropy(logits.data(), y.len(), classes, &y);
            if !loss.is_finite() {
                model.clear_caches();
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += argmax_rows(logits.data(), classes).iter().zip(&y).filter(|(p, t)| p == t).count();
            model.backward(Tensor::new(logits.shape().to_vec(), grad)?)?;
            if cfg.bn_l1 > 0.0 {
                add_bn_l1(&mut model.nodes, cfg.bn_l1 as f32);
            }
            sgd.step(model, cfg, lr);
        }
        let n = data.train.len() as f64;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if epoch == 0 {
            out.first_epoch_loss = rec.loss;
        }
        emit(&mut log, &rec)?;
        out.history.push(rec);
        let last = epoch + 1 == cfg.epochs;
        if !data.test.is_empty() && (cfg.eval_each_epoch || last) {
            let (loss, acc) = evaluate(model, &data.test, &norm, cfg.eval_batch_size)?;
            let rec = EpochRecord {
                epoch,
                split: "test".into(),
                loss,
                accuracy: acc,
                lr,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            emit(&mut log, &rec)?;
            out.history.push(rec);
            if out.best_test_acc.is_none_or(|b| acc > b) {
                out.best_test_acc = Some(acc);
                out.best_epoch = Some(epoch);
                out.best_tensors = Some(model.named_tensors());
            }
            if last {
                out.final_test_acc = Some(acc);
            }
        }
    }
    Ok(out)
}

/// Continues training a pruned model from its current weights.
pub fn finetune(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    train(model, data, cfg, log)
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &EpochRecord) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
