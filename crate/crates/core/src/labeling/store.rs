use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::LogisticModel;
use crate::dataset::Dataset;
use crate::embnet::{self, EmbeddingVector, Model};

use super::{Feature, FeatureStore, LabelingError, Method, MethodKind, StoreRecord};

#[derive(Serialize, Deserialize)]
struct RecordFile {
    label: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    method: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dsl_model: Option<LogisticModel>,
    records: Vec<RecordFile>,
}

/// SHA-256 of the model's checkpoint bytes.
pub fn model_sha256(model: &Model<f32>) -> String {
    hex::encode(Sha256::digest(embnet::write_model(model)))
}

/// JSON form of a store. Embedding stores record the model checksum, DSL
/// stores carry their logistic model.
pub fn write_store(store: &FeatureStore) -> String {
    let (model_sha256, dsl_model) = match store.method() {
        Method::EmbNum(m) => (Some(self::model_sha256(m)), None),
        Method::SemanticTyper => (None, None),
        Method::Dsl(m) => (None, Some(m.clone())),
    };
    let file = StoreFile {
        method: store.method().kind(),
        model_sha256,
        dsl_model,
        records: store
            .records()
            .iter()
            .map(|r| {
                let (embedding, values) = match &r.feature {
                    Feature::Embedding(e) => (Some(e.values().to_vec()), None),
                    Feature::Raw(v) => (None, Some(v.clone())),
                };
                RecordFile {
                    label: r.label.clone(),
                    source: r.source.clone(),
                    embedding,
                    values,
                }
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("store serializes")
}

/// Parses a store. Embedding stores need the model they were built with.
pub fn read_store(text: &str, model: Option<Arc<Model<f32>>>) -> Result<FeatureStore, LabelingError> {
    let file: StoreFile = serde_json::from_str(text).map_err(|e| LabelingError::InvalidStore(e.to_string()))?;
    let method = match file.method {
        MethodKind::Embnum => {
            let model = model.ok_or(LabelingError::MissingModel(MethodKind::Embnum))?;
            let got = model_sha256(&model);
            if let Some(expected) = file.model_sha256 {
                if expected != got {
                    return Err(LabelingError::ModelMismatch { expected, got });
                }
            }
            Method::EmbNum(model)
        }
        MethodKind::Semantictyper => Method::SemanticTyper,
        MethodKind::Dsl => Method::Dsl(file.dsl_model.ok_or(LabelingError::MissingModel(MethodKind::Dsl))?),
    };
    let records = file
        .records
        .into_iter()
        .map(|r| {
            let feature = match (r.embedding, r.values) {
                (Some(e), None) => Feature::Embedding(EmbeddingVector::new(e)),
                (None, Some(v)) => Feature::Raw(v),
                _ => {
                    return Err(LabelingError::InvalidStore(format!(
                        "record {}/{} needs exactly one of embedding or values",
                        r.source, r.label
                    )))
                }
            };
            Ok(StoreRecord {
                label: r.label,
                source: r.source,
                feature,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    FeatureStore::from_records(method, records)
}

pub fn save_store(store: &FeatureStore, path: &Path) -> Result<(), LabelingError> {
    crate::io::write_atomic(path, write_store(store).as_bytes())?;
    Ok(())
}

pub fn load_store(path: &Path, model: Option<Arc<Model<f32>>>) -> Result<FeatureStore, LabelingError> {
    read_store(&std::fs::read_to_string(path)?, model)
}

/// CSV of `label,source,e0..e{k-1}` for every attribute.
pub fn export_embeddings(model: &Model<f32>, dataset: &Dataset) -> Result<String, LabelingError> {
    let store = super::index_labeled(dataset, &Method::EmbNum(Arc::new(model.clone())))?;
    let mut out = String::from("label,source");
    for i in 0..model.arch.k {
        write!(out, ",e{i}").expect("string write");
    }
    out.push('\n');
    for r in store.records() {
        out.push_str(&r.label);
        out.push(',');
        out.push_str(&r.source);
        if let Feature::Embedding(e) = &r.feature {
            for v in e.values() {
                write!(out, ",{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    Ok(out)
}
