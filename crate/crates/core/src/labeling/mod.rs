//! Labeling as retrieval: index labeled attributes, rank them against a
//! query, take the top label, and score rankings with MRR.

mod benchmark;
mod store;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, LogisticModel};
use crate::dataset::{Dataset, NumericAttribute};
use crate::embnet::{self, EmbeddingVector, Model, ModelError};
use crate::sampling::SamplingError;

pub use benchmark::{experiment_count, run_benchmark, BenchmarkReport, CountSummary, TIMING_SCOPE};
pub use store::{export_embeddings, load_store, model_sha256, read_store, save_store, write_store};

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("labeled data is empty")]
    EmptyLabeledData,
    #[error("method {0} needs a model")]
    MissingModel(MethodKind),
    #[error("feature store is empty")]
    EmptyStore,
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("no query has its label in the labeled data")]
    NoQueries,
    #[error("rank {0} is not a 1-based position")]
    InvalidRank(usize),
    #[error("benchmark needs at least 2 sources, dataset has {0}")]
    TooFewSources(usize),
    #[error("store was built with model {expected}, got {got}")]
    ModelMismatch { expected: String, got: String },
    #[error("invalid store file: {0}")]
    InvalidStore(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl LabelingError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::EmptyLabeledData => "EmptyLabeledData",
            Self::MissingModel(_) => "MissingModel",
            Self::EmptyStore => "EmptyStore",
            Self::EmptyRanking => "EmptyRanking",
            Self::NoQueries => "NoQueries",
            Self::InvalidRank(_) => "InvalidRank",
            Self::TooFewSources(_) => "TooFewSources",
            Self::ModelMismatch { .. } => "ModelMismatch",
            Self::InvalidStore(_) => "InvalidStore",
            Self::Io(_) => "IoError",
            Self::Model(e) => e.name(),
            Self::Baseline(e) => e.name(),
            Self::Sampling(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Embnum,
    Semantictyper,
    Dsl,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Embnum => "embnum",
            Self::Semantictyper => "semantictyper",
            Self::Dsl => "dsl",
        })
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embnum" => Ok(Self::Embnum),
            "semantictyper" => Ok(Self::Semantictyper),
            "dsl" => Ok(Self::Dsl),
            _ => Err(format!("unknown method {s:?} (embnum, semantictyper, dsl)")),
        }
    }
}

/// A scorer together with the model it needs.
#[derive(Debug, Clone)]
pub enum Method {
    EmbNum(Arc<Model<f32>>),
    SemanticTyper,
    Dsl(LogisticModel),
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Self::EmbNum(_) => MethodKind::Embnum,
            Self::SemanticTyper => MethodKind::Semantictyper,
            Self::Dsl(_) => MethodKind::Dsl,
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            Self::EmbNum(_) => Orientation::AscendingDistance,
            _ => Orientation::DescendingSimilarity,
        }
    }
}

/// What a store keeps per record.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Embedding(EmbeddingVector<f32>),
    Raw(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub label: String,
    pub source: String,
    pub feature: Feature,
}

/// Immutable database of labeled features.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    method: Method,
    records: Vec<StoreRecord>,
}

impl FeatureStore {
    /// Builds a store from precomputed records.
    pub fn from_records(method: Method, records: Vec<StoreRecord>) -> Result<Self, LabelingError> {
        for r in &records {
            let ok = matches!(
                (&method, &r.feature),
                (Method::EmbNum(_), Feature::Embedding(_)) | (Method::SemanticTyper | Method::Dsl(_), Feature::Raw(_))
            );
            if !ok {
                return Err(LabelingError::InvalidStore(format!(
                    "record {}/{} does not fit method {}",
                    r.source,
                    r.label,
                    method.kind()
                )));
            }
        }
        Ok(Self { method, records })
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Query-side features of a batch of attributes under `method`.
pub fn extract_features(method: &Method, values: &[&[f64]]) -> Result<Vec<Feature>, LabelingError> {
    match method {
        Method::EmbNum(model) => {
            let inputs = values
                .iter()
                .map(|v| embnet::preprocess::<f32>(v, &model.arch))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(model
                .embed_batch(&inputs)?
                .into_iter()
                .map(Feature::Embedding)
                .collect())
        }
        Method::SemanticTyper | Method::Dsl(_) => values
            .iter()
            .map(|v| {
                if v.is_empty() {
                    return Err(BaselineError::EmptyInput.into());
                }
                Ok(Feature::Raw(v.to_vec()))
            })
            .collect(),
    }
}

/// One record per labeled attribute, in dataset order.
pub fn index_labeled(labeled: &Dataset, method: &Method) -> Result<FeatureStore, LabelingError> {
    if labeled.is_empty() {
        return Err(LabelingError::EmptyLabeledData);
    }
    let values: Vec<&[f64]> = labeled.attributes().iter().map(|a| a.values()).collect();
    let features = extract_features(method, &values)?;
    let records = labeled
        .attributes()
        .iter()
        .zip(features)
        .map(|(a, feature)| StoreRecord {
            label: a.label().to_string(),
            source: a.source().to_string(),
            feature,
        })
        .collect();
    FeatureStore::from_records(method.clone(), records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    AscendingDistance,
    DescendingSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub label: String,
    pub source: String,
    /// Distance or similarity, depending on the list's orientation.
    pub score: f64,
}

/// Store records ordered best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingList {
    pub orientation: Orientation,
    pub entries: Vec<RankEntry>,
}

impl RankingList {
    /// 1-based position of the first entry carrying `label`.
    pub fn first_correct_rank(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label).map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn score(method: &Method, query: &Feature, record: &Feature) -> Result<f64, LabelingError> {
    match (method, query, record) {
        (Method::EmbNum(_), Feature::Embedding(q), Feature::Embedding(r)) => {
            if q.dim() != r.dim() {
                return Err(LabelingError::InvalidStore(format!(
                    "embedding dimension {} vs {}",
                    q.dim(),
                    r.dim()
                )));
            }
            let sq: f64 = q
                .values()
                .iter()
                .zip(r.values())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            Ok(sq.sqrt())
        }
        (Method::SemanticTyper, Feature::Raw(q), Feature::Raw(r)) => Ok(baselines::semantictyper_score(q, r)?),
        (Method::Dsl(model), Feature::Raw(q), Feature::Raw(r)) => Ok(baselines::dsl_score(model, q, r)?),
        _ => Err(LabelingError::InvalidStore(format!(
            "query feature does not fit method {}",
            method.kind()
        ))),
    }
}

/// Ranks every record against a query feature; ties go to the smaller
/// `(label, source)`.
pub fn rank_feature(store: &FeatureStore, query: &Feature) -> Result<RankingList, LabelingError> {
    if store.is_empty() {
        return Err(LabelingError::EmptyStore);
    }
    let orientation = store.method.orientation();
    let mut entries = store
        .records
        .iter()
        .map(|r| {
            Ok(RankEntry {
                label: r.label.clone(),
                source: r.source.clone(),
                score: score(&store.method, query, &r.feature)?,
            })
        })
        .collect::<Result<Vec<_>, LabelingError>>()?;
    entries.sort_by(|a, b| compare_entries(a, b, orientation));
    Ok(RankingList { orientation, entries })
}

pub fn rank(store: &FeatureStore, query: &NumericAttribute) -> Result<RankingList, LabelingError> {
    if store.is_empty() {
        return Err(LabelingError::EmptyStore);
    }
    let feature = extract_features(&store.method, &[query.values()])?
        .pop()
        .expect("one feature");
    rank_feature(store, &feature)
}

/// Extracts query features and ranks the store for each query.
pub fn label_batch(store: &FeatureStore, queries: &[&[f64]]) -> Result<Vec<RankingList>, LabelingError> {
    if store.is_empty() {
        return Err(LabelingError::EmptyStore);
    }
    extract_features(&store.method, queries)?
        .iter()
        .map(|f| rank_feature(store, f))
        .collect()
}

/// Label of the top entry.
pub fn assign_label(ranking: &RankingList) -> Result<&str, LabelingError> {
    ranking
        .entries
        .first()
        .map(|e| e.label.as_str())
        .ok_or(LabelingError::EmptyRanking)
}

/// Mean of `1 / rank` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64, LabelingError> {
    if ranks.is_empty() {
        return Err(LabelingError::NoQueries);
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(LabelingError::InvalidRank(r));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn compare_entries(a: &RankEntry, b: &RankEntry, orientation: Orientation) -> Ordering {
    let by_score = match orientation {
        Orientation::AscendingDistance => a.score.total_cmp(&b.score),
        Orientation::DescendingSimilarity => b.score.total_cmp(&a.score),
    };
    by_score.then_with(|| (&a.label, &a.source).cmp(&(&b.label, &b.source)))
}
