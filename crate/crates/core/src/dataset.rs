//! Multi-source labeled numerical attributes: on-disk loading, writing,
//! synthetic generation and source partitioning.
//!
//! A dataset lives on disk as `root/<source_id>/<label_id>.csv`, one decimal
//! literal per line, no header. Sources and labels are kept in lexicographic
//! order and attributes are ordered by `(source, label)`, so a loaded dataset
//! and a generated one compare equal when their contents match.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {0} does not exist or is not a directory")]
    MissingDirectory(PathBuf),
    #[error("attribute file {0} has no values")]
    EmptyAttribute(PathBuf),
    #[error("{file}:{line}: malformed value {token:?}")]
    MalformedValue {
        file: PathBuf,
        line: usize,
        token: String,
    },
    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),
    #[error("duplicate attribute for source {source_id:?} label {label:?}")]
    DuplicateAttribute { source_id: String, label: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MissingDirectory(_) => "MissingDirectory",
            Self::EmptyAttribute(_) => "EmptyAttribute",
            Self::MalformedValue { .. } => "MalformedValue",
            Self::InvalidAttribute(_) => "InvalidAttribute",
            Self::DuplicateAttribute { .. } => "DuplicateAttribute",
            Self::InvalidSpec(_) => "InvalidSpec",
            Self::UnknownSource(_) => "UnknownSource",
            Self::Io { .. } => "IoError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One numeric table column together with its semantic label and origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericAttribute {
    values: Vec<f64>,
    label: String,
    source: String,
    name: Option<String>,
}

impl NumericAttribute {
    pub fn new(
        values: Vec<f64>,
        label: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let label = label.into();
        let source = source.into();
        if values.is_empty() {
            return Err(DatasetError::InvalidAttribute(format!(
                "{source}/{label}: no values"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidAttribute(format!(
                "{source}/{label}: non-finite value {v}"
            )));
        }
        if label.is_empty() || source.is_empty() {
            return Err(DatasetError::InvalidAttribute(
                "label and source must be non-empty".into(),
            ));
        }
        Ok(Self {
            values,
            label,
            source,
            name: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An immutable collection of attributes with unique `(source, label)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    sources: Vec<String>,
    labels: Vec<String>,
    attributes: Vec<NumericAttribute>,
}

impl Dataset {
    /// Builds a dataset, deriving the source and label lists from the
    /// attributes and putting everything in canonical order.
    pub fn new(mut attributes: Vec<NumericAttribute>) -> Result<Self, DatasetError> {
        attributes.sort_by(|a, b| (&a.source, &a.label).cmp(&(&b.source, &b.label)));
        for pair in attributes.windows(2) {
            if pair[0].source == pair[1].source && pair[0].label == pair[1].label {
                return Err(DatasetError::DuplicateAttribute {
                    source_id: pair[0].source.clone(),
                    label: pair[0].label.clone(),
                });
            }
        }
        let sources: BTreeSet<&str> = attributes.iter().map(|a| a.source.as_str()).collect();
        let labels: BTreeSet<&str> = attributes.iter().map(|a| a.label.as_str()).collect();
        Ok(Self {
            sources: sources.into_iter().map(String::from).collect(),
            labels: labels.into_iter().map(String::from).collect(),
            attributes,
        })
    }

    pub fn empty() -> Self {
        Self {
            sources: Vec::new(),
            labels: Vec::new(),
            attributes: Vec::new(),
        }
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn attributes(&self) -> &[NumericAttribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Keeps the attributes whose source is accepted by `keep`.
    pub fn filter_sources(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        let attributes = self
            .attributes
            .iter()
            .filter(|a| keep(&a.source))
            .cloned()
            .collect();
        Dataset::new(attributes).expect("subset of a valid dataset is valid")
    }

    /// SHA-256 over the canonical content (ids and value bit patterns).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for a in &self.attributes {
            hasher.update(a.source.as_bytes());
            hasher.update([0u8]);
            hasher.update(a.label.as_bytes());
            hasher.update([0u8]);
            hasher.update((a.values.len() as u64).to_le_bytes());
            for v in &a.values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn valid_component(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\', '\0'])
}

/// Parses one attribute file: one finite decimal literal per line.
/// Blank lines (including a trailing newline) are ignored.
pub fn parse_attribute_file(path: &Path) -> Result<Vec<f64>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_values(&text, path)
}

pub(crate) fn parse_values(text: &str, path: &Path) -> Result<Vec<f64>, DatasetError> {
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let token = raw.trim();
        if token.is_empty() {
            continue;
        }
        match token.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ => {
                return Err(DatasetError::MalformedValue {
                    file: path.to_path_buf(),
                    line: i + 1,
                    token: token.to_string(),
                })
            }
        }
    }
    if values.is_empty() {
        return Err(DatasetError::EmptyAttribute(path.to_path_buf()));
    }
    Ok(values)
}

/// Loads `root/<source>/<label>.csv` into a dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingDirectory(root.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let source_dir = entry.path();
        if !source_dir.is_dir() {
            continue;
        }
        let source = entry.file_name().to_string_lossy().into_owned();
        for file in fs::read_dir(&source_dir).map_err(io_err(&source_dir))? {
            let file = file.map_err(io_err(&source_dir))?;
            let path = file.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") || !path.is_file() {
                continue;
            }
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push((source.clone(), label, path));
        }
    }
    files.sort();
    let attributes = files
        .par_iter()
        .map(|(source, label, path)| {
            let values = parse_attribute_file(path)?;
            NumericAttribute::new(values, label.clone(), source.clone())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(attributes)
}

/// Writes a dataset in the on-disk layout. `root` must not exist yet or be
/// an empty directory. Values are written in shortest round-trip form.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for a in &dataset.attributes {
        if !valid_component(&a.source) || !valid_component(&a.label) {
            return Err(DatasetError::InvalidAttribute(format!(
                "{:?}/{:?} is not a valid path component",
                a.source, a.label
            )));
        }
        let dir = root.join(&a.source);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{}.csv", a.label));
        let mut buf = String::with_capacity(a.values.len() * 12);
        for v in &a.values {
            buf.push_str(&format_value(*v));
            buf.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Shortest decimal text that parses back to the same f64.
pub fn format_value(v: f64) -> String {
    let mag = v.abs();
    if mag != 0.0 && !(1e-5..1e16).contains(&mag) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Partitions a dataset into labeled data and the attributes of one held-out
/// source.
pub fn split_holdout(
    dataset: &Dataset,
    unknown_source: &str,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !dataset.sources.iter().any(|s| s == unknown_source) {
        return Err(DatasetError::UnknownSource(unknown_source.to_string()));
    }
    let labeled = dataset.filter_sources(|s| s != unknown_source);
    let queries = dataset.filter_sources(|s| s == unknown_source);
    Ok((labeled, queries))
}

/// Axis along which a dataset is halved for metric learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAxis {
    Source,
    Label,
}

/// Randomly halves a dataset by source (or by label). The first half gets
/// `ceil(n / 2)` of the ids.
pub fn split_halves(dataset: &Dataset, axis: SplitAxis, seed: u64) -> (Dataset, Dataset) {
    let mut ids: Vec<&String> = match axis {
        SplitAxis::Source => dataset.sources.iter().collect(),
        SplitAxis::Label => dataset.labels.iter().collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let first: HashSet<&str> = ids[..ids.len().div_ceil(2)]
        .iter()
        .map(|s| s.as_str())
        .collect();
    let pick = |want_first: bool| {
        let attrs = dataset
            .attributes
            .iter()
            .filter(|a| {
                let id = match axis {
                    SplitAxis::Source => a.source.as_str(),
                    SplitAxis::Label => a.label.as_str(),
                };
                first.contains(id) == want_first
            })
            .cloned()
            .collect();
        Dataset::new(attrs).expect("subset of a valid dataset is valid")
    };
    (pick(true), pick(false))
}

/// Distribution family of one synthetic label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `location + scale * U(-1, 1)`
    Uniform,
    /// `location + scale * N(0, 1)`
    Normal,
    /// `location + scale * exp(shape * N(0, 1))`
    LogNormal,
    /// `location + scale * Exp(1)`
    Exponential,
    /// `location + Poisson(scale)`
    DiscreteCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub kind: FamilyKind,
    pub location: f64,
    pub scale: f64,
    #[serde(default = "one")]
    pub shape: f64,
}

fn one() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    0.1
}

impl FamilyDescriptor {
    fn validate(&self) -> Result<(), String> {
        if !self.location.is_finite() || !self.scale.is_finite() || !self.shape.is_finite() {
            return Err("family parameters must be finite".into());
        }
        if self.scale <= 0.0 {
            return Err("family scale must be positive".into());
        }
        if self.kind == FamilyKind::LogNormal && self.shape <= 0.0 {
            return Err("log-normal shape must be positive".into());
        }
        Ok(())
    }

    fn draw(&self, location: f64, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            FamilyKind::Uniform => location + self.scale * rng.random_range(-1.0..=1.0),
            FamilyKind::Normal => {
                let z: f64 = rng.sample(StandardNormal);
                location + self.scale * z
            }
            FamilyKind::LogNormal => {
                let z: f64 = rng.sample(StandardNormal);
                location + self.scale * (self.shape * z).exp()
            }
            FamilyKind::Exponential => {
                let e: f64 = rng.sample(Exp1);
                location + self.scale * e
            }
            FamilyKind::DiscreteCount => {
                let p = Poisson::new(self.scale).expect("positive rate");
                location.round() + p.sample(rng)
            }
        }
    }
}

/// Parameters of the synthetic multi-source generator. Label `i` draws from
/// `family_pool[i]`; each `(source, label)` cell shifts the family location
/// by `location_jitter * scale * N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub label_count: usize,
    pub source_count: usize,
    pub rows_min: usize,
    pub rows_max: usize,
    pub family_pool: Vec<FamilyDescriptor>,
    pub seed: u64,
    #[serde(default = "default_jitter")]
    pub location_jitter: f64,
}

impl SyntheticSpec {
    /// A spec drawing from [`default_family_pool`].
    pub fn with_defaults(label_count: usize, source_count: usize, seed: u64) -> Self {
        Self {
            label_count,
            source_count,
            rows_min: 20,
            rows_max: 200,
            family_pool: default_family_pool(label_count),
            seed,
            location_jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.label_count == 0 || self.source_count == 0 {
            return bad("label_count and source_count must be positive");
        }
        if self.rows_min == 0 || self.rows_min > self.rows_max {
            return bad("require 1 <= rows_min <= rows_max");
        }
        if self.label_count > self.family_pool.len() {
            return bad("label_count exceeds family_pool size");
        }
        if !(self.location_jitter >= 0.0 && self.location_jitter.is_finite()) {
            return bad("location_jitter must be a non-negative finite number");
        }
        for f in &self.family_pool[..self.label_count] {
            f.validate().map_err(DatasetError::InvalidSpec)?;
        }
        Ok(())
    }
}

/// Deterministic pool of distinct families cycling through every kind, with
/// locations and scales spread over several orders of magnitude.
pub fn default_family_pool(n: usize) -> Vec<FamilyDescriptor> {
    const KINDS: [FamilyKind; 5] = [
        FamilyKind::Uniform,
        FamilyKind::Normal,
        FamilyKind::LogNormal,
        FamilyKind::Exponential,
        FamilyKind::DiscreteCount,
    ];
    (0..n)
        .map(|i| {
            let kind = KINDS[i % KINDS.len()];
            let tier = (i / KINDS.len()) as f64;
            let magnitude = 10f64.powf(1.0 + 0.75 * tier + 0.15 * (i % KINDS.len()) as f64);
            let (location, scale, shape) = match kind {
                FamilyKind::Uniform => (magnitude, 0.5 * magnitude, 1.0),
                FamilyKind::Normal => (magnitude, 0.2 * magnitude, 1.0),
                FamilyKind::LogNormal => (0.0, 0.5 * magnitude, 0.8),
                FamilyKind::Exponential => (0.1 * magnitude, magnitude, 1.0),
                FamilyKind::DiscreteCount => (0.0, magnitude, 1.0),
            };
            FamilyDescriptor {
                kind,
                location,
                scale,
                shape,
            }
        })
        .collect()
}

/// Id of the `i`-th synthetic label, zero padded so lexicographic order
/// follows the index.
pub fn synthetic_label_id(i: usize) -> String {
    format!("label_{i:03}")
}

pub fn synthetic_source_id(i: usize) -> String {
    format!("src_{i:02}")
}

/// Draws a `label_count x source_count` dataset. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut attributes = Vec::with_capacity(spec.label_count * spec.source_count);
    for s in 0..spec.source_count {
        for (l, family) in spec.family_pool[..spec.label_count].iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let location = family.location + spec.location_jitter * family.scale * z;
            let rows = rng.random_range(spec.rows_min..=spec.rows_max);
            let values: Vec<f64> = (0..rows).map(|_| family.draw(location, &mut rng)).collect();
            attributes.push(NumericAttribute::new(
                values,
                synthetic_label_id(l),
                synthetic_source_id(s),
            )?);
        }
    }
    Dataset::new(attributes)
}
