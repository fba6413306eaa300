//! Adam optimization, the training loop, evaluation and multi-seed runs.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::encoder::{EmbeddingStore, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, EvalReport, MeanStd};
use crate::model::{Model, ModelConfig, Prepared};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Long/short boundary for length-bucketed accuracy.
    pub length_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 16,
            seed: 42,
            length_threshold: 21,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step to match the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter in `params`; `grads` is in
    /// store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
            self.v = self.m.clone();
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if e.value.shape() != g.shape() {
                return Err(crate::tensor::TensorError::Dimension {
                    op: "adam_step",
                    lhs: e.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if update != 0.0 {
                    *p -= update;
                }
            }
        }
        Ok(())
    }
}

/// Predictions for every instance; runs in parallel with read-only parameters.
pub fn evaluate(model: &Model, data: &[Prepared], length_threshold: usize) -> Result<EvalReport> {
    let start = Instant::now();
    let preds = data
        .par_iter()
        .map(|ex| model.predict_prepared(ex, false))
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::from_predictions(
        data.iter().map(|e| e.id.clone()).collect(),
        data.iter().map(|e| e.gold).collect(),
        preds.iter().map(|p| p.label).collect(),
        &data.iter().map(|e| e.length).collect::<Vec<_>>(),
        length_threshold,
    );
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean cross-entropy of the current model on `data`.
pub fn mean_cross_entropy(model: &Model, data: &[Prepared]) -> Result<f64> {
    let total: f64 = data
        .par_iter()
        .map(|ex| {
            model
                .predict_prepared(ex, false)
                .map(|p| -p.probs[ex.gold.index()].ln())
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / data.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective per instance over the epoch's batches.
    pub loss: f64,
}

/// Stateful training loop over prepared instances.
pub struct Trainer {
    model: Model,
    optimizer: Adam,
    config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            optimizer: Adam::from_config(&config),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` in seeded shuffled mini-batches.
    pub fn run_epoch(&mut self, train: &[Prepared]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Batch("empty training set".into()));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<Prepared> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = self.model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss;
            self.optimizer.step(self.model.params_mut(), &grads)?;
        }
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total / train.len() as f64,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub split: String,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub timing: Vec<TimingRecord>,
    pub final_train: EvalReport,
    pub final_test: Option<EvalReport>,
    /// Epoch and accuracy of the best test epoch, when a test split is given.
    pub best_test: Option<(usize, f64)>,
}

/// Trains `model` on `train` for the configured number of epochs, evaluating
/// on both splits after every epoch.
pub fn train(model: Model, train: &[Instance], test: Option<&[Instance]>, config: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Batch("empty training split".into()));
    }
    let train_p = model.prepare_all(train)?;
    let test_p = test.map(|t| model.prepare_all(t)).transpose()?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut log = Vec::new();
    let mut timing = Vec::new();
    let mut best_test: Option<(usize, f64)> = None;
    let mut final_train = None;
    let mut final_test = None;
    for _ in 0..config.epochs {
        let t0 = Instant::now();
        let stats = trainer.run_epoch(&train_p)?;
        let report = evaluate(trainer.model(), &train_p, config.length_threshold)?;
        timing.push(TimingRecord {
            epoch: stats.epoch,
            split: "train".into(),
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        log.push(LogRecord {
            epoch: stats.epoch,
            split: "train".into(),
            loss: stats.loss,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
        });
        final_train = Some(report);
        if let Some(tp) = &test_p {
            let t1 = Instant::now();
            let report = evaluate(trainer.model(), tp, config.length_threshold)?;
            log.push(LogRecord {
                epoch: stats.epoch,
                split: "test".into(),
                loss: mean_cross_entropy(trainer.model(), tp)?,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
            });
            timing.push(TimingRecord {
                epoch: stats.epoch,
                split: "test".into(),
                wall_secs: t1.elapsed().as_secs_f64(),
            });
            if best_test.is_none_or(|(_, acc)| report.accuracy > acc) {
                best_test = Some((stats.epoch, report.accuracy));
            }
            final_test = Some(report);
        }
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        timing,
        final_train: final_train.expect("at least one epoch"),
        final_test,
        best_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
}

/// Trains one model per seed (parameter init and batch order both follow the
/// seed) and summarizes final test metrics.
pub fn multi_seed(
    train_set: &[Instance],
    test_set: &[Instance],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    embeddings: Option<Arc<EmbeddingStore>>,
) -> Result<MultiSeedReport> {
    let vocab = Vocab::build(train_set)?;
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut model = Model::new(model_config.clone(), vocab.clone(), seed)?;
        if let Some(store) = &embeddings {
            model.set_embeddings(Arc::clone(store))?;
        }
        let cfg = TrainConfig {
            seed,
            ..train_config.clone()
        };
        let out = train(model, train_set, Some(test_set), &cfg)?;
        reports.push(out.final_test.expect("test split given"));
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        accuracy: mean_std(&acc),
        macro_f1: mean_std(&f1),
        reports,
    })
}
