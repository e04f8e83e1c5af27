use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;

use super::{extract_features, label_batch, mrr, FeatureStore, LabelingError, Method, StoreRecord};

pub const TIMING_SCOPE: &str = "query feature extraction and ranking, summed over the held-out source's queries";

/// Mean results over every experiment with one labeled-source count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub labeled_sources: usize,
    pub mean_mrr: f64,
    pub mean_seconds: f64,
    pub experiments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub dataset_sha256: String,
    pub per_count: Vec<CountSummary>,
    pub total_experiments: usize,
    /// Queries skipped because their label was absent from the labeled data.
    pub excluded_queries: usize,
    pub timing_scope: String,
}

impl BenchmarkReport {
    pub fn mrr_at(&self, labeled_sources: usize) -> Option<f64> {
        self.per_count
            .iter()
            .find(|c| c.labeled_sources == labeled_sources)
            .map(|c| c.mean_mrr)
    }
}

/// `d * (2^(d-1) - 1)`
pub fn experiment_count(d: usize) -> u128 {
    if d < 2 {
        return 0;
    }
    d as u128 * ((1u128 << (d - 1)) - 1)
}

/// Leave-one-source-out protocol: every source in turn is the unknown
/// source, and every non-empty subset of the others is the labeled data.
/// Store features are computed once up front; only query-side work is
/// timed. Experiments run sequentially so timings do not contend.
pub fn run_benchmark(dataset: &Dataset, method: &Method) -> Result<BenchmarkReport, LabelingError> {
    let sources = dataset.sources();
    let d = sources.len();
    if d < 2 {
        return Err(LabelingError::TooFewSources(d));
    }
    if d > 20 {
        return Err(LabelingError::InvalidStore(format!(
            "{d} sources would need {} experiments",
            experiment_count(d)
        )));
    }
    let attrs = dataset.attributes();
    let values: Vec<&[f64]> = attrs.iter().map(|a| a.values()).collect();
    let features = extract_features(method, &values)?;
    let source_of: Vec<usize> = attrs
        .iter()
        .map(|a| sources.iter().position(|s| s == a.source()).expect("known source"))
        .collect();

    let mut mrr_sum = vec![0.0; d];
    let mut secs_sum = vec![0.0; d];
    let mut counts = vec![0usize; d];
    let mut scored = vec![0usize; d];
    let mut total = 0usize;
    let mut excluded = 0usize;

    for held in 0..d {
        let others: Vec<usize> = (0..d).filter(|&s| s != held).collect();
        let queries: Vec<usize> = (0..attrs.len()).filter(|&i| source_of[i] == held).collect();
        for mask in 1u32..(1u32 << others.len()) {
            let chosen: Vec<usize> = others
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &s)| s)
                .collect();
            let records: Vec<StoreRecord> = (0..attrs.len())
                .filter(|&i| chosen.contains(&source_of[i]))
                .map(|i| StoreRecord {
                    label: attrs[i].label().to_string(),
                    source: attrs[i].source().to_string(),
                    feature: features[i].clone(),
                })
                .collect();
            let store = FeatureStore::from_records(method.clone(), records)?;
            let known: HashSet<&str> = store.records().iter().map(|r| r.label.as_str()).collect();

            let included: Vec<usize> = queries
                .iter()
                .copied()
                .filter(|&i| known.contains(attrs[i].label()))
                .collect();
            let included_values: Vec<&[f64]> = included.iter().map(|&i| values[i]).collect();

            let start = Instant::now();
            let rankings = if included.is_empty() {
                Vec::new()
            } else {
                label_batch(&store, &included_values)?
            };
            let elapsed = start.elapsed().as_secs_f64();
            let ranks: Vec<usize> = included
                .iter()
                .zip(&rankings)
                .map(|(&i, r)| r.first_correct_rank(attrs[i].label()).expect("label is in the store"))
                .collect();

            excluded += queries.len() - ranks.len();
            total += 1;
            let c = chosen.len();
            counts[c] += 1;
            secs_sum[c] += elapsed;
            match mrr(&ranks) {
                Ok(m) => {
                    mrr_sum[c] += m;
                    scored[c] += 1;
                }
                Err(LabelingError::NoQueries) => {
                    log::warn!("held-out source {} has no query with a known label", sources[held]);
                }
                Err(e) => return Err(e),
            }
        }
    }

    let per_count = (1..d)
        .map(|c| CountSummary {
            labeled_sources: c,
            mean_mrr: if scored[c] == 0 { 0.0 } else { mrr_sum[c] / scored[c] as f64 },
            mean_seconds: secs_sum[c] / counts[c] as f64,
            experiments: counts[c],
        })
        .collect();
    Ok(BenchmarkReport {
        method: method.kind().to_string(),
        dataset_sha256: dataset.fingerprint(),
        per_count,
        total_experiments: total,
        excluded_queries: excluded,
        timing_scope: TIMING_SCOPE.to_string(),
    })
}
