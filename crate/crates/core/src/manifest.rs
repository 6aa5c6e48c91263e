//! Labelled image corpus and k-fold cross-validation plans.
//!
//! A manifest is a UTF-8 CSV with header `id,image_path,label,source_note`.
//! Relative image paths resolve against the directory holding the manifest.

use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot open manifest {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("row {row}: {source}")]
    UnknownLabel {
        row: usize,
        source: crate::label::UnknownLabel,
    },
    #[error("row {row}: empty {field}")]
    EmptyField { row: usize, field: &'static str },
    #[error("cannot write manifest: {0}")]
    Write(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FoldError {
    #[error("fold count must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("class {label} has {count} samples, fewer than k = {k}")]
    ClassTooSmall { label: Label, count: usize, k: usize },
    #[error("{count} samples cannot fill {k} folds")]
    TooFewSamples { count: usize, k: usize },
    #[error("manifest has no {0} samples; both classes are required")]
    MissingClass(Label),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label: Label,
    pub source_note: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positive,
            Label::Negative => self.negative,
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    samples: Vec<SampleRecord>,
    class_counts: ClassCounts,
    base_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    image_path: String,
    label: String,
    #[serde(default)]
    source_note: Option<String>,
}

impl Manifest {
    /// Build a manifest from records, enforcing id uniqueness and non-empty paths.
    pub fn from_records(
        samples: Vec<SampleRecord>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, ManifestError> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut class_counts = ClassCounts::default();
        for (row, s) in samples.iter().enumerate() {
            if s.id.is_empty() {
                return Err(ManifestError::EmptyField { row: row + 1, field: "id" });
            }
            if s.image_path.as_os_str().is_empty() {
                return Err(ManifestError::EmptyField {
                    row: row + 1,
                    field: "image_path",
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(ManifestError::DuplicateId(s.id.clone()));
            }
            match s.label {
                Label::Positive => class_counts.positive += 1,
                Label::Negative => class_counts.negative += 1,
            }
        }
        Ok(Self {
            samples,
            class_counts,
            base_dir: base_dir.into(),
        })
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn class_counts(&self) -> ClassCounts {
        self.class_counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Filesystem location of a record's image.
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.base_dir.join(&record.image_path)
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ManifestError::Write(e.to_string()))?;
        w.write_record(["id", "image_path", "label", "source_note"])
            .map_err(|e| ManifestError::Write(e.to_string()))?;
        for s in &self.samples {
            w.write_record([
                s.id.as_str(),
                &s.image_path.to_string_lossy(),
                s.label.as_str(),
                s.source_note.as_deref().unwrap_or(""),
            ])
            .map_err(|e| ManifestError::Write(e.to_string()))?;
        }
        w.flush().map_err(|e| ManifestError::Write(e.to_string()))
    }
}

/// Read a CSV manifest, preserving row order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ManifestError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| ManifestError::Malformed { row: 0, message: e.to_string() })?
        .clone();
    for required in ["id", "image_path", "label"] {
        if !headers.iter().any(|h| h == required) {
            return Err(ManifestError::Malformed {
                row: 0,
                message: format!("missing column {required:?}"),
            });
        }
    }

    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| ManifestError::Malformed {
            row: row_no,
            message: e.to_string(),
        })?;
        let label = row
            .label
            .parse::<Label>()
            .map_err(|source| ManifestError::UnknownLabel { row: row_no, source })?;
        samples.push(SampleRecord {
            id: row.id,
            image_path: PathBuf::from(row.image_path),
            label,
            source_note: row.source_note.filter(|s| !s.is_empty()),
        });
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::from_records(samples, base_dir)
}

/// k disjoint test folds over manifest indices; each train set is the complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    /// Test indices per fold, each sorted ascending.
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn n_samples(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let n = self.n_samples();
        let mut in_test = vec![false; n];
        for &i in &self.folds[fold] {
            in_test[i] = true;
        }
        (0..n).filter(|&i| !in_test[i]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }
}

/// Partition the manifest into `k` folds.
///
/// Indices of each class (positive first) are shuffled with one seeded
/// stream, concatenated, and dealt round-robin into folds. Dealing the
/// concatenation keeps both the per-class and the overall fold sizes within
/// one of each other. Without stratification the whole index list is
/// shuffled and dealt the same way.
pub fn plan_folds(
    manifest: &Manifest,
    k: usize,
    seed: u64,
    stratified: bool,
) -> Result<FoldPlan, FoldError> {
    if k < 2 {
        return Err(FoldError::TooFewFolds(k));
    }
    let counts = manifest.class_counts();
    for label in Label::ORDER {
        if counts.get(label) == 0 {
            return Err(FoldError::MissingClass(label));
        }
        if stratified && counts.get(label) < k {
            return Err(FoldError::ClassTooSmall {
                label,
                count: counts.get(label),
                k,
            });
        }
    }
    if manifest.len() < k {
        return Err(FoldError::TooFewSamples { count: manifest.len(), k });
    }

    let mut rng = SplitMix64::new(seed);
    let order: Vec<usize> = if stratified {
        let mut order = Vec::with_capacity(manifest.len());
        for label in Label::ORDER {
            let mut idx: Vec<usize> = manifest
                .samples()
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == label)
                .map(|(i, _)| i)
                .collect();
            rng.shuffle(&mut idx);
            order.extend(idx);
        }
        order
    } else {
        let mut idx: Vec<usize> = (0..manifest.len()).collect();
        rng.shuffle(&mut idx);
        idx
    };

    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { k, seed, stratified, folds })
}
