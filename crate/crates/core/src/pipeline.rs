//! End-to-end cross-validated run: per fold, extract (augmented) training
//! features, train one head per member, predict the untouched test fold,
//! fuse by majority vote, and score everything.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, PipelineConfig};
use crate::ensemble::{self, EnsembleError, EnsembleMember, EnsembleModel, VoteRecord};
use crate::extractor::{self, sha256_hex, Backbone, ExtractError, FeatureCache, FeatureMatrix};
use crate::head::{self, HeadError};
use crate::imageproc::{AugmentConfig, AugmentParams};
use crate::label::Label;
use crate::manifest::{self, FoldError, FoldPlan, Manifest, ManifestError};
use crate::metrics::{self, MetricsError, MetricsReport, RocCurve};
use crate::report::{self, ReportError};
use crate::rng::{derive_seed, SplitMix64};

pub const ENSEMBLE_NAME: &str = "ensemble";

/// Present in an output directory while a run is in progress or after it
/// failed; removed only once every artifact has been written.
pub const INCOMPLETE_MARKER: &str = "RUN_INCOMPLETE";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Folds(#[from] FoldError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("backbone {backbone}: {source}")]
    Backbone { backbone: String, source: ExtractError },
    #[error("fold {fold}, backbone {backbone}, sample {sample}: {source}")]
    Extract {
        fold: usize,
        backbone: String,
        sample: String,
        source: ExtractError,
    },
    #[error("fold {fold}, member {member}: {source}")]
    Train { fold: usize, member: String, source: HeadError },
    #[error("fold {fold}: {source}")]
    Ensemble { fold: usize, source: EnsembleError },
    #[error("fold {fold}, model {model}: {source}")]
    Metrics { fold: usize, model: String, source: MetricsError },
    #[error("aggregate for {model}: {source}")]
    Aggregate { model: String, source: MetricsError },
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl PipelineError {
    /// Stable machine-readable error category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Manifest(_) => "manifest",
            PipelineError::Folds(_) => "folds",
            PipelineError::Io { .. } => "io",
            PipelineError::Backbone { .. } => "backbone",
            PipelineError::Extract { .. } => "extract",
            PipelineError::Train { .. } => "train",
            PipelineError::Ensemble { .. } => "ensemble",
            PipelineError::Metrics { .. } | PipelineError::Aggregate { .. } => "metrics",
            PipelineError::Report(_) => "report",
        }
    }
}

/// Manifest plus the raw bytes and content hash of every image.
pub struct Corpus {
    pub manifest: Manifest,
    pub images: Vec<Vec<u8>>,
    pub hashes: Vec<String>,
}

impl Corpus {
    pub fn load(manifest: Manifest) -> Result<Self, PipelineError> {
        let images = manifest
            .samples()
            .par_iter()
            .map(|s| {
                let path = manifest.resolve(s);
                fs::read(&path).map_err(|source| PipelineError::Io { path, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let hashes = images.par_iter().map(|b| sha256_hex(b)).collect();
        Ok(Self { manifest, images, hashes })
    }

    pub fn labels(&self) -> Vec<Label> {
        self.manifest.labels()
    }

    /// Hash over (id, label, image hash) of every row, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (s, ih) in self.manifest.samples().iter().zip(&self.hashes) {
            h.update(s.id.as_bytes());
            h.update([0]);
            h.update(s.label.as_str().as_bytes());
            h.update([0]);
            h.update(ih.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// How training images are perturbed within one fold.
#[derive(Debug, Clone, Copy)]
pub struct AugmentPlan {
    pub cfg: AugmentConfig,
    pub seed: u64,
    pub fold: usize,
    pub copy: usize,
}

impl AugmentPlan {
    /// Parameters for the sample at manifest index `index`; a pure function
    /// of (seed, fold, copy, index).
    pub fn params(&self, index: usize) -> AugmentParams {
        let mut rng = SplitMix64::derived(self.seed, &[self.fold as u64, self.copy as u64, index as u64]);
        AugmentParams::draw(&self.cfg, &mut rng)
    }
}

/// Feature rows for `indices`, read from or written to the cache.
pub fn corpus_features(
    backbone: &Backbone,
    corpus: &Corpus,
    indices: &[usize],
    augment: Option<&AugmentPlan>,
    cache: Option<&FeatureCache>,
    fold: usize,
) -> Result<FeatureMatrix, PipelineError> {
    let spec = backbone.spec();
    let rows = indices
        .par_iter()
        .map(|&i| {
            let id = &corpus.manifest.samples()[i].id;
            let wrap = |source| PipelineError::Extract {
                fold,
                backbone: spec.name.clone(),
                sample: id.clone(),
                source,
            };
            let params = augment.filter(|a| a.cfg.enabled).map(|a| a.params(i));
            let key = cache.map(|_| FeatureCache::key(spec, &corpus.hashes[i], params.as_ref()));
            if let (Some(c), Some(k)) = (cache, key.as_ref()) {
                if let Some(hit) = c.get(k).filter(|m| m.rows() == 1 && m.dim() == spec.feature_dim) {
                    return Ok(hit.row(0).to_vec());
                }
            }
            let img = backbone.prepare(&corpus.images[i], params.as_ref()).map_err(wrap)?;
            let row = backbone.extract_one(&img).map_err(wrap)?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(wrap(ExtractError::NonFinite(0)));
            }
            if let (Some(c), Some(k)) = (cache, key.as_ref()) {
                let single = FeatureMatrix::new(row.len(), row.clone(), vec![id.clone()]).map_err(wrap)?;
                c.put(k, &single).map_err(wrap)?;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let ids = indices.iter().map(|&i| corpus.manifest.samples()[i].id.clone()).collect();
    FeatureMatrix::new(spec.feature_dim, rows.concat(), ids).map_err(|source| PipelineError::Backbone {
        backbone: spec.name.clone(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFoldResult {
    pub model: String,
    pub metrics: MetricsReport,
    pub roc: Option<RocCurve>,
    /// Final-epoch training loss (members only).
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub members: Vec<ModelFoldResult>,
    pub ensemble: ModelFoldResult,
    pub votes: Vec<VoteRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMean {
    pub mean: Option<f64>,
    /// Folds in which the metric was defined.
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub model: String,
    /// Metrics from counts and scores pooled over all test folds.
    pub pooled: MetricsReport,
    pub pooled_roc: Option<RocCurve>,
    /// Mean of each per-fold metric over the folds where it is defined.
    pub mean_of_folds: BTreeMap<String, FoldMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneProvenance {
    pub name: String,
    pub sha256: String,
    pub feature_dim: usize,
    pub input_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub settings_hash: String,
    pub manifest_sha256: String,
    pub corpus_sha256: String,
    pub backbones: Vec<BackboneProvenance>,
    pub code_version: String,
    pub method: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub complete: bool,
    pub k: usize,
    pub stratified: bool,
    pub n_samples: usize,
    pub models: Vec<String>,
    pub fold_plan: FoldPlan,
    pub folds: Vec<FoldSummary>,
    pub aggregate: Vec<AggregateResult>,
    pub provenance: Provenance,
    pub generated_at_unix: u64,
}

impl RunSummary {
    pub fn aggregate_for(&self, model: &str) -> Option<&AggregateResult> {
        self.aggregate.iter().find(|a| a.model == model)
    }

    /// Summary JSON with the timestamp zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> String {
        let mut s = self.clone();
        s.generated_at_unix = 0;
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

pub fn method_notes() -> Vec<String> {
    vec![
        "head: fully connected + softmax, mean cross-entropy loss, plain mini-batch SGD".into(),
        "ensemble label: unweighted majority vote, ties resolve to covid".into(),
        "ensemble score for ROC/AUC: arithmetic mean of member covid probabilities".into(),
        "accuracy: (TP + TN) / (TP + FP + TN + FN)".into(),
        "ROC: per-image TPR vs FPR; predict covid iff score >= threshold".into(),
        "confidence interval: 95% Wilson score interval on accuracy".into(),
        "augmentation: training folds only; test folds are never augmented".into(),
    ]
}

struct LoadedMember {
    name: String,
    backbone_ref: String,
}

/// Run the full cross-validated protocol.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let manifest = manifest::load_manifest(&cfg.manifest)?;
    let manifest_bytes = fs::read(&cfg.manifest).map_err(|source| PipelineError::Io { path: cfg.manifest.clone(), source })?;
    let plan = manifest::plan_folds(&manifest, cfg.folds, cfg.seeds.split, cfg.stratified)?;
    let corpus = Corpus::load(manifest)?;
    let labels = corpus.labels();

    let mut backbones: HashMap<String, Arc<Backbone>> = HashMap::new();
    let mut backbone_order = Vec::new();
    for m in &cfg.members {
        if !backbones.contains_key(&m.backbone) {
            let b = extractor::load_backbone(&m.backbone).map_err(|source| PipelineError::Backbone {
                backbone: m.backbone.clone(),
                source,
            })?;
            backbones.insert(m.backbone.clone(), Arc::new(b));
            backbone_order.push(m.backbone.clone());
        }
    }
    let members: Vec<LoadedMember> = cfg
        .members
        .iter()
        .map(|m| LoadedMember { name: m.name.clone(), backbone_ref: m.backbone.clone() })
        .collect();
    let cache = cfg.cache_dir.as_ref().map(FeatureCache::new);

    log::info!(
        "running {}-fold CV over {} samples with {} member(s)",
        cfg.folds,
        corpus.manifest.len(),
        members.len()
    );

    let folds = (0..plan.k)
        .into_par_iter()
        .map(|fold| run_fold(cfg, &corpus, &labels, &plan, fold, &members, &backbones, cache.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut models: Vec<String> = members.iter().map(|m| m.name.clone()).collect();
    models.push(ENSEMBLE_NAME.to_string());
    let aggregate = models
        .iter()
        .map(|name| aggregate_model(name, &folds, &labels, &corpus))
        .collect::<Result<Vec<_>, _>>()?;

    let provenance = Provenance {
        settings_hash: cfg.settings_hash(),
        manifest_sha256: sha256_hex(&manifest_bytes),
        corpus_sha256: corpus.content_hash(),
        backbones: backbone_order
            .iter()
            .map(|r| {
                let s = backbones[r].spec();
                BackboneProvenance {
                    name: s.name.clone(),
                    sha256: s.sha256.clone(),
                    feature_dim: s.feature_dim,
                    input_side: s.input_side,
                }
            })
            .collect(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        method: method_notes(),
    };

    Ok(RunSummary {
        complete: true,
        k: plan.k,
        stratified: plan.stratified,
        n_samples: corpus.manifest.len(),
        models,
        fold_plan: plan,
        folds,
        aggregate,
        provenance,
        generated_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

/// Run the protocol and write every artifact into `cfg.output_dir`.
///
/// The output directory carries an [`INCOMPLETE_MARKER`] file for the whole
/// run; on failure it is left in place with the error appended, so partial
/// outputs are never mistaken for a finished run.
pub fn run_and_report(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let out = &cfg.output_dir;
    let io = |path: PathBuf| move |source| PipelineError::Io { path, source };
    fs::create_dir_all(out).map_err(io(out.clone()))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run started; artifacts in this directory are partial\n").map_err(io(marker.clone()))?;

    let result = run_pipeline(cfg).and_then(|summary| {
        report::report(&summary, out)?;
        Ok(summary)
    });
    match &result {
        Ok(_) => fs::remove_file(&marker).map_err(io(marker.clone()))?,
        Err(e) => {
            let note = format!("run failed ({}): {e}\n", e.kind());
            if let Err(w) = fs::OpenOptions::new().append(true).open(&marker).and_then(|mut f| std::io::Write::write_all(&mut f, note.as_bytes())) {
                log::warn!("cannot annotate {}: {w}", marker.display());
            }
        }
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    labels: &[Label],
    plan: &FoldPlan,
    fold: usize,
    members: &[LoadedMember],
    backbones: &HashMap<String, Arc<Backbone>>,
    cache: Option<&FeatureCache>,
) -> Result<FoldSummary, PipelineError> {
    let train_idx = plan.train_indices(fold);
    let test_idx = plan.test_indices(fold).to_vec();
    let test_truth: Vec<Label> = test_idx.iter().map(|&i| labels[i]).collect();

    // Features are computed once per distinct backbone and shared by members.
    let mut train_feats: HashMap<&str, (FeatureMatrix, Vec<Label>)> = HashMap::new();
    let mut test_feats: HashMap<&str, FeatureMatrix> = HashMap::new();
    for m in members {
        let key = m.backbone_ref.as_str();
        if test_feats.contains_key(key) {
            continue;
        }
        let backbone = &backbones[key];
        let copies = if cfg.augment.enabled { cfg.augment_copies } else { 1 };
        let mut parts = Vec::with_capacity(copies);
        let mut ys = Vec::with_capacity(copies * train_idx.len());
        for copy in 0..copies {
            let aug = AugmentPlan { cfg: cfg.augment, seed: cfg.seeds.augment, fold, copy };
            parts.push(corpus_features(backbone, corpus, &train_idx, Some(&aug), cache, fold)?);
            ys.extend(train_idx.iter().map(|&i| labels[i]));
        }
        let stacked = FeatureMatrix::concat(&parts).map_err(|source| PipelineError::Backbone {
            backbone: key.to_string(),
            source,
        })?;
        train_feats.insert(key, (stacked, ys));
        test_feats.insert(key, corpus_features(backbone, corpus, &test_idx, None, cache, fold)?);
    }

    let trained = members
        .par_iter()
        .enumerate()
        .map(|(j, m)| {
            let (x, y) = &train_feats[m.backbone_ref.as_str()];
            let init_seed = derive_seed(cfg.seeds.init, &[j as u64]);
            let train_cfg = cfg.train.with_seed(derive_seed(cfg.seeds.train, &[fold as u64, j as u64]));
            head::train(x, y, init_seed, &train_cfg).map_err(|source| PipelineError::Train {
                fold,
                member: m.name.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut member_results = Vec::with_capacity(members.len());
    for (m, t) in members.iter().zip(&trained) {
        let preds = t
            .head
            .forward(&test_feats[m.backbone_ref.as_str()])
            .map_err(|source| PipelineError::Train { fold, member: m.name.clone(), source })?;
        let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let (report, roc) = metrics::evaluate(&predicted, &scores, &test_truth).map_err(|source| PipelineError::Metrics {
            fold,
            model: m.name.clone(),
            source,
        })?;
        member_results.push(ModelFoldResult {
            model: m.name.clone(),
            metrics: report,
            roc,
            final_loss: Some(t.final_loss()),
        });
    }

    let model = EnsembleModel::new(
        members
            .iter()
            .zip(trained)
            .map(|(m, t)| EnsembleMember {
                name: m.name.clone(),
                backbone: m.backbone_ref.clone(),
                head: t.head,
            })
            .collect(),
    )
    .map_err(|source| PipelineError::Ensemble { fold, source })?;
    let member_feats: Vec<FeatureMatrix> = members.iter().map(|m| test_feats[m.backbone_ref.as_str()].clone()).collect();
    let votes = ensemble::predict_ensemble(&model, &member_feats).map_err(|source| PipelineError::Ensemble { fold, source })?;
    let fused: Vec<Label> = votes.iter().map(|v| v.fused_label).collect();
    let fused_scores: Vec<f64> = votes.iter().map(|v| v.fused_score).collect();
    let (report, roc) = metrics::evaluate(&fused, &fused_scores, &test_truth).map_err(|source| PipelineError::Metrics {
        fold,
        model: ENSEMBLE_NAME.into(),
        source,
    })?;

    Ok(FoldSummary {
        fold,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        members: member_results,
        ensemble: ModelFoldResult { model: ENSEMBLE_NAME.into(), metrics: report, roc, final_loss: None },
        votes,
    })
}

fn fold_result<'a>(fold: &'a FoldSummary, model: &str) -> &'a ModelFoldResult {
    if model == ENSEMBLE_NAME {
        &fold.ensemble
    } else {
        fold.members.iter().find(|m| m.model == model).expect("model present in every fold")
    }
}

/// Named view of a report's metrics, in a fixed order.
pub fn metric_values(r: &MetricsReport) -> [(&'static str, Option<f64>); 8] {
    [
        ("accuracy", r.accuracy),
        ("sensitivity", r.sensitivity),
        ("specificity", r.specificity),
        ("precision", r.precision),
        ("npv", r.npv),
        ("f1", r.f1),
        ("fpr", r.fpr),
        ("auc", r.auc),
    ]
}

fn aggregate_model(model: &str, folds: &[FoldSummary], labels: &[Label], corpus: &Corpus) -> Result<AggregateResult, PipelineError> {
    let wrap = |source| PipelineError::Aggregate { model: model.to_string(), source };

    // Out-of-fold predictions, reassembled by sample id.
    let index: HashMap<&str, usize> = corpus.manifest.samples().iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut predicted = Vec::new();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for f in folds {
        let member_pos = f.members.iter().position(|m| m.model == model);
        for v in &f.votes {
            let (label, score) = match member_pos {
                Some(j) => (v.member_labels[j], v.member_scores[j]),
                None => (v.fused_label, v.fused_score),
            };
            predicted.push(label);
            scores.push(score);
            truth.push(labels[index[v.sample_id.as_str()]]);
        }
    }
    let (pooled, pooled_roc) = metrics::evaluate(&predicted, &scores, &truth).map_err(wrap)?;

    let mut mean_of_folds = BTreeMap::new();
    let per_fold: Vec<_> = folds.iter().map(|f| metric_values(&fold_result(f, model).metrics)).collect();
    for (k, (name, _)) in metric_values(&pooled).iter().enumerate() {
        let defined: Vec<f64> = per_fold.iter().filter_map(|vals| vals[k].1).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        mean_of_folds.insert(name.to_string(), FoldMean { mean, folds: defined.len() });
    }

    Ok(AggregateResult { model: model.to_string(), pooled, pooled_roc, mean_of_folds })
}
