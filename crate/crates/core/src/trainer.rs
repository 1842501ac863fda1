//! Mini-batch training with Adam, best-on-validation model selection and
//! micro-F1 evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::corpus::{kshot_sample, Corpus, CorpusError, Instance, KShotSpec};
use crate::encoder::EncoderConfig;
use crate::metrics::{evaluate, EvalError, EvalReport};
use crate::model::{argmax, LabelPromptModel, ModelConfig, ModelError};
use crate::objective::{sample_negative_spans, ObjectiveConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::template::{PromptEncoding, TokenStrategy};
use crate::vocab::Vocabulary;

/// Fine-tuning rates quoted for a large pretrained encoder. They are far
/// too small for a randomly initialised toy encoder; kept for reference and
/// reachable through an explicit learning rate.
pub const PRETRAINED_LR_FEW_SHOT: f64 = 4e-5;
pub const PRETRAINED_LR_FULL: f64 = 4e-6;

/// Defaults for the toy encoder trained from scratch.
pub const DEFAULT_LR_FEW_SHOT: f64 = 1e-2;
pub const DEFAULT_LR_FULL: f64 = 1e-3;
pub const DEFAULT_EPOCHS_FEW_SHOT: usize = 30;
pub const DEFAULT_EPOCHS_FULL: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seeds parameter init, shuffling and the training k-shot draw.
    pub seed: u64,
    pub token_strategy: TokenStrategy,
    pub k: Option<usize>,
    /// Seed for the validation k-shot draw.
    pub val_seed: u64,
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
    pub eval_exclude_no_relation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_data()
    }
}

impl TrainConfig {
    pub fn full_data() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LR_FULL,
            epochs: DEFAULT_EPOCHS_FULL,
            seed: 0,
            token_strategy: TokenStrategy::Label,
            k: None,
            val_seed: 1,
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::default(),
            eval_exclude_no_relation: true,
        }
    }

    pub fn few_shot(k: usize) -> Self {
        Self {
            learning_rate: DEFAULT_LR_FEW_SHOT,
            epochs: DEFAULT_EPOCHS_FEW_SHOT,
            k: Some(k),
            ..Self::full_data()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.k == Some(0) {
            return Err(TrainError::Config("k must be positive".into()));
        }
        self.encoder.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.objective.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder, objective: self.objective, strategy: self.token_strategy }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training set is empty")]
    EmptyTrain,
    /// Carries the parameters from before the failing step.
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, component: &'static str, last_good: Box<ParamStore<f64>> },
}

/// Mean loss components over one epoch plus validation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mask_loss: f64,
    pub label_loss: f64,
    pub entity_loss: f64,
    pub validation_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters with the best validation micro-F1 (the last epoch when
    /// there is no validation split).
    pub model: LabelPromptModel<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub validation: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub train_size: usize,
}

/// Loss values and parameter gradients of one instance.
pub struct ExampleGrad<S> {
    pub total: S,
    pub mask: S,
    pub label: S,
    pub entity: S,
    pub grads: Vec<Tensor<S>>,
}

/// Forward and backward pass for one encoded instance.
pub fn example_gradient<S: Scalar>(
    model: &LabelPromptModel<S>,
    instance: &Instance,
    enc: &PromptEncoding,
    negative_rng: &mut ChaCha8Rng,
) -> Result<ExampleGrad<S>, ModelError> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let negatives = sample_negative_spans(instance, negative_rng);
    let terms = model.loss_graph(&mut g, &bound, enc, negatives)?;
    let mut grads = g.backward(terms.total)?;
    let value = |v: Option<crate::autodiff::Var>| v.and_then(|v| g.scalar(v)).unwrap_or(S::zero());
    Ok(ExampleGrad {
        total: value(Some(terms.total)),
        mask: value(Some(terms.mask)),
        label: value(terms.label),
        entity: value(terms.entity),
        grads: bound.vars().iter().map(|&v| grads.take(v)).collect(),
    })
}

fn negative_rng(seed: u64, epoch: usize, example: usize, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch * n + example) as u64);
    rng
}

/// Scores `model` on `instances`.
pub fn evaluate_model<S: Scalar>(
    model: &LabelPromptModel<S>,
    instances: &[Instance],
    exclude_no_relation: bool,
) -> Result<EvalReport, TrainError> {
    let pairs = predict_all(model, instances)?;
    let excluded = exclude_no_relation.then_some(0);
    Ok(evaluate(&pairs, model.num_relations(), excluded)?)
}

/// `(gold, predicted)` for each instance, in input order.
pub fn predict_all<S: Scalar>(
    model: &LabelPromptModel<S>,
    instances: &[Instance],
) -> Result<Vec<(usize, usize)>, ModelError> {
    instances
        .par_iter()
        .map(|inst| {
            let enc = model.prompt(inst)?;
            Ok((enc.gold, argmax(&model.logits_for(&enc)?)))
        })
        .collect()
}

/// Training and validation instances after optional k-shot subsetting.
pub fn select_splits(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Vec<Instance>, Vec<Instance>), TrainError> {
    match cfg.k {
        None => Ok((corpus.train.clone(), corpus.validation.clone())),
        Some(k) => {
            let train = kshot_sample(&corpus.train, KShotSpec::new(k as i64, cfg.seed)?)?;
            let validation = if corpus.validation.is_empty() {
                Vec::new()
            } else {
                kshot_sample(&corpus.validation, KShotSpec::new(k as i64, cfg.val_seed)?)?
            };
            Ok((train, validation))
        }
    }
}

/// Trains a fresh model on `corpus`.
pub fn train<S: Scalar>(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    let model = LabelPromptModel::new(Vocabulary::build(corpus), cfg.model_config(), cfg.seed)?;
    train_model(model, corpus, cfg)
}

/// Continues training `model` on `corpus`.
pub fn train_model<S: Scalar>(
    mut model: LabelPromptModel<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    let (train_set, validation) = select_splits(corpus, cfg)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let encodings = train_set.iter().map(|i| model.prompt(i)).collect::<Result<Vec<_>, _>>()?;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, LabelPromptModel<S>)> = None;
    let neg_seed = cfg.objective.negative_seed ^ cfg.seed.rotate_left(32);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<ExampleGrad<S>, ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = negative_rng(neg_seed, epoch, i, n);
                    example_gradient(&model, &train_set[i], &encodings[i], &mut rng)
                })
                .collect();
            let inv = S::one() / S::from_usize(batch.len()).expect("batch fits scalar");
            let mut acc: Vec<Tensor<S>> = Vec::new();
            for r in results {
                let ex = r?;
                for (component, v) in [("total", ex.total), ("mask", ex.mask), ("label", ex.label), ("entity", ex.entity)] {
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite { epoch, step, component, last_good: Box::new(model.store.cast()) });
                    }
                }
                sums[0] += ex.total.as_f64();
                sums[1] += ex.mask.as_f64();
                sums[2] += ex.label.as_f64();
                sums[3] += ex.entity.as_f64();
                if acc.is_empty() {
                    acc = ex.grads;
                } else {
                    for (a, gr) in acc.iter_mut().zip(&ex.grads) {
                        a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            if let Some(bad) = acc.iter().position(|t| !t.is_finite()) {
                log::error!("non-finite gradient for {}", model.store.names()[bad]);
                return Err(TrainError::NonFinite { epoch, step, component: "gradient", last_good: Box::new(model.store.cast()) });
            }
            adam.step(&mut model.store, &acc);
        }
        let nf = n as f64;
        let validation_f1 = if validation.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &validation, cfg.eval_exclude_no_relation)?.micro_f1)
        };
        let record = EpochRecord {
            epoch,
            loss: sums[0] / nf,
            mask_loss: sums[1] / nf,
            label_loss: sums[2] / nf,
            entity_loss: sums[3] / nf,
            validation_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (mask {:.4}, label {:.4}, entity {:.4}) val {:?}",
            record.loss,
            record.mask_loss,
            record.label_loss,
            record.entity_loss,
            validation_f1
        );
        history.push(record);
        if let Some(f1) = validation_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.clone()));
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, Some(epoch)),
        None => (model, cfg.epochs.checked_sub(1)),
    };
    let validation_report = if validation.is_empty() {
        None
    } else {
        Some(evaluate_model(&model, &validation, cfg.eval_exclude_no_relation)?)
    };
    let test = if corpus.test.is_empty() {
        None
    } else {
        Some(evaluate_model(&model, &corpus.test, cfg.eval_exclude_no_relation)?)
    };
    Ok(TrainOutcome { model, history, best_epoch, validation: validation_report, test, train_size: n })
}
