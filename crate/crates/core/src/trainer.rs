//! Training loop, evaluation and decoding.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{peek, Checkpoint};
use crate::data::{make_batches, truncate, Record, Sample, Vocab};
use crate::error::{Error, Result};
use crate::eval::{extract_spans, score, MetricsReport};
use crate::labels::{tag_strings, Tag};
use crate::model::{DropoutRngs, Encoded, FmitModel, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bindings, GradStore};
use crate::posenc::SinusoidTable;
use crate::tensor::{Precision, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Stop once training-set F1 reaches this value (checked every epoch).
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            max_len: 128,
            lr: 2e-4,
            lambda: 0.25,
            seed: 0,
            precision: Precision::F32,
            clip_norm: None,
            target_train_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 {
            return bad("epochs, batch_size and max_len must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        crate::ebd::JointLossConfig::new(self.lambda)?;
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint loss per training sample.
    pub train_loss: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    pub train_f1: Option<f64>,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "epoch\ttrain_loss\tdev_P\tdev_R\tdev_F1"
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch, self.train_loss, self.dev_precision, self.dev_recall, self.dev_f1
        )
    }
}

pub fn metrics_tsv(log: &[EpochLog]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", EpochLog::tsv_header());
    for e in log {
        let _ = writeln!(out, "{}", e.tsv());
    }
    out
}

pub struct TrainOutcome<T> {
    /// Parameters at the epoch with the best dev F1 (earliest on ties).
    pub best: FmitModel<T>,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: FmitModel<T>,
    pub log: Vec<EpochLog>,
}

/// Independent random streams derived from the run seed.
struct Streams {
    shuffle: ChaCha8Rng,
    main: ChaCha8Rng,
    ebd: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            shuffle: stream(1),
            main: stream(2),
            ebd: stream(3),
        }
    }
}

/// Joint loss and gradients for a set of encoded samples, summed.
pub fn batch_gradients<T: Real>(
    model: &FmitModel<T>,
    batch: &[&Encoded],
    lambda: f64,
    rngs: Option<(&mut ChaCha8Rng, &mut ChaCha8Rng)>,
) -> Result<(f64, GradStore<T>)> {
    let mut g = Graph::new();
    let mut b = Bindings::new(&model.params, true);
    let mut table = SinusoidTable::new(model.config.d)?;
    let mut rngs = rngs;
    let mut total = None;
    for enc in batch {
        let r = rngs.as_mut().map(|(m, e)| DropoutRngs { main: m, ebd: e });
        let l = model.loss(&mut g, &mut b, &mut table, enc, lambda, r)?;
        total = Some(match total {
            None => l.total,
            Some(t) => g.add(t, l.total)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let value = g.value(total).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let mut grads = g.backward(total)?;
    Ok((value, b.collect(&mut grads)))
}

fn clip<T: Real>(grads: &mut GradStore<T>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains a fresh model on `train`, selecting by F1 on `dev`.
pub fn train<T: Real>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Sample],
    dev: &[Sample],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let words = Vocab::words(train);
    let objects = Vocab::objects(train);
    let model = FmitModel::<T>::new(model_config.clone(), words, objects, config.seed)?;
    train_model(model, config, train, dev)
}

/// Continues training `model`.
pub fn train_model<T: Real>(
    mut model: FmitModel<T>,
    config: &TrainConfig,
    train: &[Sample],
    dev: &[Sample],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let truncated: Vec<Sample> = train.iter().map(|s| truncate(s, config.max_len)).collect();
    let encoded = truncated.iter().map(|s| model.encode(s)).collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: config.lr,
        ..AdamConfig::default()
    });
    let mut streams = Streams::new(config.seed);
    let mut log = Vec::new();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);

    for epoch in 1..=config.epochs {
        let order = make_batches(
            train,
            config.max_len,
            config.batch_size,
            Some(streams.shuffle.next_u64()),
        )?;
        let mut loss_sum = 0.0;
        for (bi, batch) in order.iter().enumerate() {
            let items: Vec<&Encoded> = batch.indices.iter().map(|&i| &encoded[i]).collect();
            let rngs = Some((&mut streams.main, &mut streams.ebd));
            let (loss, mut grads) = batch_gradients(&model, &items, config.lambda, rngs).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", bi + 1)),
                other => other,
            })?;
            if let Some(c) = config.clip_norm {
                clip(&mut grads, c);
            }
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss;
        }
        let dev_report = if dev.is_empty() {
            MetricsReport::default()
        } else {
            evaluate(&model, dev, config.max_len)?
        };
        let train_f1 = match config.target_train_f1 {
            Some(_) => Some(evaluate(&model, &truncated, config.max_len)?.f1()),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_precision: dev_report.precision(),
            dev_recall: dev_report.recall(),
            dev_f1: dev_report.f1(),
            train_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev F1 {:.4}{}",
            entry.train_loss,
            entry.dev_f1,
            train_f1.map_or(String::new(), |f| format!(" train F1 {f:.4}"))
        );
        if entry.dev_f1 > best.2 {
            best = (model.clone(), epoch, entry.dev_f1);
        }
        log.push(entry);
        if let (Some(target), Some(f1)) = (config.target_train_f1, train_f1) {
            if f1 >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        log,
    })
}

/// Viterbi tags for every sample, after truncation to `max_len`.
pub fn predict<T: Real>(model: &FmitModel<T>, samples: &[Sample], max_len: usize) -> Result<Vec<Vec<Tag>>> {
    samples
        .iter()
        .map(|s| model.predict(&model.encode(&truncate(s, max_len))?))
        .collect()
}

/// Span scores of `model` on `samples`; gold is the truncated sample.
pub fn evaluate<T: Real>(model: &FmitModel<T>, samples: &[Sample], max_len: usize) -> Result<MetricsReport> {
    let pred = predict(model, samples, max_len)?;
    let gold: Vec<_> = samples
        .iter()
        .map(|s| extract_spans(&truncate(s, max_len).tags))
        .collect();
    let pred: Vec<_> = pred.iter().map(|t| extract_spans(t)).collect();
    Ok(score(&gold, &pred))
}

/// Input records with `pred_labels` filled in. Tokens past `max_len` get `O`.
pub fn decode<T: Real>(model: &FmitModel<T>, samples: &[Sample], max_len: usize) -> Result<Vec<Record>> {
    let pred = predict(model, samples, max_len)?;
    Ok(samples
        .iter()
        .zip(pred)
        .map(|(s, mut tags)| {
            tags.resize(s.len(), Tag::O);
            Record {
                pred_labels: Some(tag_strings(&tags)),
                ..Record::from(s)
            }
        })
        .collect())
}

/// A model in either precision, as loaded from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(FmitModel<f32>),
    F64(FmitModel<f64>),
}

impl AnyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(match peek(path)?.precision {
            Precision::F32 => AnyModel::F32(FmitModel::from_checkpoint(Checkpoint::load(path)?)?),
            Precision::F64 => AnyModel::F64(FmitModel::from_checkpoint(Checkpoint::load(path)?)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    pub fn evaluate(&self, samples: &[Sample], max_len: usize) -> Result<MetricsReport> {
        match self {
            AnyModel::F32(m) => evaluate(m, samples, max_len),
            AnyModel::F64(m) => evaluate(m, samples, max_len),
        }
    }

    pub fn decode(&self, samples: &[Sample], max_len: usize) -> Result<Vec<Record>> {
        match self {
            AnyModel::F32(m) => decode(m, samples, max_len),
            AnyModel::F64(m) => decode(m, samples, max_len),
        }
    }
}
