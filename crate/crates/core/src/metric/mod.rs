//! Triplet-loss training with batch-hard mining.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::embnet::{self, build_model, ArchConfig, EmbeddingVector, Model, ModelError};
use crate::nn::{sgd_step, BnMode, Graph, NnError, SgdConfig, SgdState, Tensor};
use crate::sampling::{SampledVector, SamplingError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label:?} has {count} attribute(s); at least 2 are needed")]
    InsufficientSamples { label: String, count: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("batch has no valid triplet: {0}")]
    DegenerateBatch(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl TrainError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InsufficientSamples { .. } => "InsufficientSamples",
            Self::NonFiniteLoss { .. } => "NonFiniteLoss",
            Self::DegenerateBatch(_) => "DegenerateBatch",
            Self::DimensionMismatch(..) => "DimensionMismatch",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::Model(e) => e.name(),
            Self::Nn(e) => e.name(),
            Self::Sampling(e) => e.name(),
        }
    }
}

/// Optimization settings. Batches hold `batch_labels` groups of
/// `samples_per_label` attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr0: f64,
    pub lr_step: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_labels: usize,
    pub samples_per_label: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lr0: 0.01,
            lr_step: 10,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 100,
            batch_labels: 8,
            samples_per_label: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short CPU schedule used with [`ArchConfig::desk`].
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lr0.is_finite() && self.lr_decay.is_finite()) {
            return bad("lr0 and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if self.batch_labels < 2 || self.samples_per_label < 2 {
            return bad("batch_labels and samples_per_label must be at least 2");
        }
        if self.lr_step == 0 || self.epochs == 0 {
            return bad("lr_step and epochs must be positive");
        }
        Ok(())
    }

    /// `lr0 * lr_decay^floor(epoch / lr_step)` for a 0-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

pub fn euclidean_distance<T: Scalar>(
    a: &EmbeddingVector<T>,
    b: &EmbeddingVector<T>,
) -> Result<T, TrainError> {
    if a.dim() != b.dim() {
        return Err(TrainError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(squared_distance(a.values(), b.values()).sqrt())
}

pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `max(0, alpha + d_pos - d_neg)`
pub fn triplet_loss<T: Scalar>(d_pos: T, d_neg: T, alpha: T) -> T {
    (alpha + d_pos - d_neg).max(T::zero())
}

/// Index triples into a batch; `embeddings` and `labels` are the batch the
/// indices refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch<T> {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub embeddings: Vec<EmbeddingVector<T>>,
    pub labels: Vec<String>,
}

impl<T> TripletBatch<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// For every anchor with at least one positive and one negative: the
/// farthest same-label sample and the closest different-label sample.
/// Ties go to the lower batch index.
pub fn mine_batch_hard<T: Scalar>(
    embeddings: &[EmbeddingVector<T>],
    labels: &[String],
) -> Result<TripletBatch<T>, TrainError> {
    if embeddings.len() != labels.len() {
        return Err(TrainError::DegenerateBatch(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if let Some(e) = embeddings.iter().find(|e| e.dim() != embeddings[0].dim()) {
        return Err(TrainError::DimensionMismatch(embeddings[0].dim(), e.dim()));
    }
    let n = embeddings.len();
    let (mut anchors, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..n {
        let mut pos: Option<(usize, T)> = None;
        let mut neg: Option<(usize, T)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = squared_distance(embeddings[a].values(), embeddings[j].values());
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            anchors.push(a);
            positives.push(p);
            negatives.push(q);
        }
    }
    if anchors.is_empty() {
        return Err(TrainError::DegenerateBatch(
            "need two labels and a label with two samples".into(),
        ));
    }
    Ok(TripletBatch {
        anchors,
        positives,
        negatives,
        embeddings: embeddings.to_vec(),
        labels: labels.to_vec(),
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_mrr: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,mean_loss,train_mrr,lr";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.mean_loss, r.train_mrr, r.lr).expect("string write");
    }
    out
}

/// Leave-self-out MRR: every embedding is queried against all others, which
/// are ranked by ascending distance with ties broken by `(label, source)`.
pub fn training_mrr<T: Scalar>(embeddings: &[EmbeddingVector<T>], labels: &[String], sources: &[String]) -> f64 {
    let n = embeddings.len();
    let rr: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut others: Vec<(T, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (squared_distance(embeddings[q].values(), embeddings[j].values()), j))
                .collect();
            others.sort_by(|x, y| {
                x.0.partial_cmp(&y.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| (&labels[x.1], &sources[x.1]).cmp(&(&labels[y.1], &sources[y.1])))
            });
            others
                .iter()
                .position(|&(_, j)| labels[j] == labels[q])
                .map(|p| 1.0 / (p + 1) as f64)
        })
        .collect();
    let hits: Vec<f64> = rr.into_iter().flatten().collect();
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().sum::<f64>() / hits.len() as f64
    }
}

/// Groups of up to `k` same-label indices, shuffled, packed `p` groups per
/// batch. A remainder group of one joins the previous group of its label,
/// and a final batch with a single label joins the previous batch.
fn epoch_batches(by_label: &[Vec<usize>], p: usize, k: usize, rng: &mut ChaCha8Rng, labels: &[String]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for members in by_label {
        let mut m = members.clone();
        m.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = m.chunks(k).map(|c| c.to_vec()).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let last = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").extend(last);
        }
        groups.extend(chunks);
    }
    groups.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = groups.chunks(p).map(|c| c.concat()).collect();
    let distinct = |b: &Vec<usize>| {
        let first = &labels[b[0]];
        b.iter().any(|&i| &labels[i] != first)
    };
    if batches.len() > 1 && !distinct(batches.last().expect("non-empty")) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn eval_embeddings<T: Scalar>(model: &Model<T>, inputs: &[SampledVector<T>]) -> Result<Vec<EmbeddingVector<T>>, ModelError> {
    let chunks: Vec<Result<Vec<EmbeddingVector<T>>, ModelError>> =
        inputs.par_chunks(64).map(|c| model.embed_batch(c)).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Trains an embedder on `dataset` and returns the epoch with the best
/// leave-self-out training MRR along with the full history.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(Model<T>, Vec<HistoryRow>), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InsufficientSamples {
            label: String::new(),
            count: 0,
        });
    }
    let attrs = dataset.attributes();
    let labels: Vec<String> = attrs.iter().map(|a| a.label().to_string()).collect();
    let sources: Vec<String> = attrs.iter().map(|a| a.source().to_string()).collect();
    let by_label: Vec<Vec<usize>> = dataset
        .labels()
        .iter()
        .map(|l| (0..attrs.len()).filter(|&i| &labels[i] == l).collect())
        .collect();
    for (l, members) in dataset.labels().iter().zip(&by_label) {
        if members.len() < 2 {
            return Err(TrainError::InsufficientSamples {
                label: l.clone(),
                count: members.len(),
            });
        }
    }
    if by_label.len() < 2 {
        return Err(TrainError::DegenerateBatch("training data has a single label".into()));
    }

    let inputs: Vec<SampledVector<T>> = attrs
        .par_iter()
        .map(|a| embnet::preprocess(a.values(), arch))
        .collect::<Result<_, _>>()?;

    let mut model: Model<T> = build_model(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut state = SgdState::new();
    let alpha = T::of(cfg.alpha);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let sgd = SgdConfig {
            lr: T::of(lr),
            momentum: T::of(cfg.momentum),
            weight_decay: T::of(cfg.weight_decay),
        };
        let batches = epoch_batches(&by_label, cfg.batch_labels, cfg.samples_per_label, &mut rng, &labels);
        let mut loss_sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let loss = train_step(&mut model, &inputs, &labels, batch, alpha, sgd, &mut state)
                .map_err(|e| match e {
                    StepError::NonFinite(detail) => TrainError::NonFiniteLoss { epoch, step, detail },
                    StepError::Other(e) => e,
                })?;
            loss_sum += loss;
        }
        let embeddings = eval_embeddings(&model, &inputs)?;
        let mrr = training_mrr(&embeddings, &labels, &sources);
        let mean_loss = loss_sum / batches.len() as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5} train_mrr {mrr:.4} lr {lr}");
        history.push(HistoryRow {
            epoch,
            mean_loss,
            train_mrr: mrr,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
            best = Some((mrr, epoch, model.clone()));
        }
    }

    let (best_mrr, best_epoch, mut best_model) = best.expect("at least one epoch");
    best_model.meta.epochs_seen = cfg.epochs;
    best_model.meta.best_mrr = best_mrr;
    best_model.meta.best_epoch = best_epoch;
    best_model.meta.seed = cfg.seed;
    Ok((best_model, history))
}

enum StepError {
    NonFinite(String),
    Other(TrainError),
}

macro_rules! step_from {
    ($($t:ty),*) => {$(
        impl From<$t> for StepError {
            fn from(e: $t) -> Self {
                StepError::Other(e.into())
            }
        }
    )*};
}

step_from!(TrainError, ModelError, NnError);

/// One SGD step on a batch; returns the batch loss (0 when every triplet
/// already satisfies the margin, in which case no update is made).
fn train_step<T: Scalar>(
    model: &mut Model<T>,
    inputs: &[SampledVector<T>],
    labels: &[String],
    batch: &[usize],
    alpha: T,
    sgd: SgdConfig<T>,
    state: &mut SgdState<T>,
) -> Result<f64, StepError> {
    let h = model.arch.h;
    let mut data = Vec::with_capacity(batch.len() * h);
    for &i in batch {
        data.extend_from_slice(inputs[i].values());
    }
    let mut graph = Graph::new();
    let x = graph.leaf(Tensor::new(vec![batch.len(), 1, h], data)?);
    let pass = model.forward(&mut graph, x, BnMode::Train)?;
    let out = graph.value(pass.output);
    let embeddings: Vec<EmbeddingVector<T>> = out.rows().map(|r| EmbeddingVector::new(r.to_vec())).collect();
    if !out.all_finite() {
        return Err(StepError::NonFinite("embeddings contain NaN or infinity".into()));
    }
    let batch_labels: Vec<String> = batch.iter().map(|&i| labels[i].clone()).collect();
    let triplets = mine_batch_hard(&embeddings, &batch_labels)?;

    let ea = graph.gather_rows(pass.output, &triplets.anchors)?;
    let ep = graph.gather_rows(pass.output, &triplets.positives)?;
    let en = graph.gather_rows(pass.output, &triplets.negatives)?;
    let diff_p = graph.sub(ea, ep)?;
    let diff_n = graph.sub(ea, en)?;
    let dp = graph.row_norm(diff_p)?;
    let dn = graph.row_norm(diff_n)?;
    let margin = graph.sub(dp, dn)?;
    let margin = graph.add_scalar(margin, alpha);
    let hinge = graph.relu(margin);
    let active = graph.value(hinge).data().iter().filter(|&&v| v > T::zero()).count();
    let total = graph.sum(hinge);
    let raw_total = graph.value(total).item();
    if !raw_total.is_finite() {
        return Err(StepError::NonFinite(format!("triplet loss sum {raw_total}")));
    }
    if active == 0 {
        return Ok(0.0);
    }
    let loss = graph.scale(total, T::one() / T::of_usize(active));
    let loss_value = graph.value(loss).item().to_f64_lossy();

    let grads = graph.backward(loss)?;
    let grad_list: Vec<Tensor<T>> = pass
        .params
        .iter()
        .map(|(idx, key, v)| grads.param(*v, &graph, &format!("{}.{key}", model.layers[*idx].name)))
        .collect();
    if let Some(((idx, key, _), _)) = pass.params.iter().zip(&grad_list).find(|(_, g)| !g.all_finite()) {
        return Err(StepError::NonFinite(format!(
            "gradient of {}.{key} is not finite",
            model.layers[*idx].name
        )));
    }
    let bn_stats = pass.bn_stats;
    let mut params: Vec<&mut Tensor<T>> = model
        .layers
        .iter_mut()
        .flat_map(|l| l.arrays.iter_mut())
        .filter(|(k, _)| matches!(k.as_str(), "weight" | "bias" | "gamma" | "beta"))
        .map(|(_, t)| t)
        .collect();
    debug_assert_eq!(params.len(), grad_list.len());
    sgd_step(&mut params, &grad_list, sgd, state)?;
    model.update_running_stats(&bn_stats);
    Ok(loss_value)
}
