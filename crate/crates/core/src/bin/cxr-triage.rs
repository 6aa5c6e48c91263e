//! Command-line front end for the triage pipeline.
//!
//! Every subcommand prints a JSON result on stdout. On failure it prints
//! `{"error": {"kind": ..., "message": ...}}` on stderr and exits nonzero.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use cxr_triage::config::PipelineConfig;
use cxr_triage::ensemble::{self, EnsembleDefinition, EnsembleMember, EnsembleModel};
use cxr_triage::extractor::{self, FeatureCache, FeatureMatrix};
use cxr_triage::head::{self, HeadFile, Prediction, SoftmaxHead, TrainConfig};
use cxr_triage::manifest::{self, Manifest};
use cxr_triage::metrics::{self, MetricsReport, RocCurve};
use cxr_triage::pipeline::{self, AugmentPlan, Corpus, PipelineError, RunSummary};
use cxr_triage::{report, synth, Label};

#[derive(Parser)]
#[command(name = "cxr-triage", version, about = "Binary COVID-19 chest X-ray triage: frozen backbones, softmax heads, k-fold CV and majority-vote ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic separable corpus (PNG images plus manifest.csv).
    Synth {
        #[arg(long, default_value_t = 261)]
        n_pos: usize,
        #[arg(long, default_value_t = 25)]
        n_neg: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::DEFAULT_SIDE)]
        side: u32,
    },
    /// Partition a manifest into k folds and print the plan as JSON.
    PlanFolds {
        #[command(flatten)]
        settings: Settings,
        /// Also write the plan to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract backbone features for a manifest (optionally one fold's train or test part).
    Extract {
        #[command(flatten)]
        settings: Settings,
        /// `toypool` or a backbone metadata JSON path.
        #[arg(long)]
        backbone: String,
        /// Restrict to one fold (0-based); requires the fold settings.
        #[arg(long)]
        fold: Option<usize>,
        /// Which part of `--fold` to extract. Train parts are augmented per the config.
        #[arg(long, value_enum, default_value_t = Part::Test, requires = "fold")]
        part: Part,
        /// Output feature file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a softmax head on a feature file; labels come from the manifest.
    Train {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        features: PathBuf,
        /// Output head JSON.
        #[arg(long)]
        out: PathBuf,
        /// Backbone reference recorded in the head file.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Score a trained head on a feature file against manifest labels.
    Evaluate {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Directory for metrics.json, roc.csv and predictions.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Majority-vote ensemble of trained heads, scored against manifest labels.
    Ensemble {
        #[command(flatten)]
        settings: Settings,
        /// Ensemble definition JSON (member names, head files, backbones).
        #[arg(long)]
        definition: PathBuf,
        /// `member=path` feature files; members without one are extracted from the manifest.
        #[arg(long = "features", value_parser = parse_pair)]
        features: Vec<(String, PathBuf)>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full cross-validated protocol with all artifacts written to the output directory.
    Run {
        #[command(flatten)]
        settings: Settings,
    },
    /// Rewrite report artifacts from a summary JSON.
    Report {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Part {
    Train,
    Test,
}

/// Pipeline settings: `--config` plus per-field overrides.
#[derive(Args, Default)]
struct Settings {
    /// Pipeline config TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    stratified: Option<bool>,
    #[arg(long)]
    positive_class: Option<String>,
    #[arg(long)]
    augment_copies: Option<usize>,
    /// `name=backbone` ensemble member; repeat to replace the configured list.
    #[arg(long = "member", value_parser = parse_pair)]
    members: Vec<(String, PathBuf)>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    augment_seed: Option<u64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    flip_x_prob: Option<f64>,
    #[arg(long)]
    flip_y_prob: Option<f64>,
    #[arg(long)]
    rotation_range_deg: Option<f64>,
    #[arg(long)]
    shear_range: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    shuffle: Option<bool>,
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("expected name=value, got {s:?}")),
    }
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

macro_rules! impl_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e.to_string())
            }
        })*
    };
}

impl_from!(
    cxr_triage::config::ConfigError => "config",
    cxr_triage::manifest::ManifestError => "manifest",
    cxr_triage::manifest::FoldError => "folds",
    cxr_triage::extractor::ExtractError => "backbone",
    cxr_triage::head::HeadError => "train",
    cxr_triage::ensemble::EnsembleError => "ensemble",
    cxr_triage::metrics::MetricsError => "metrics",
    cxr_triage::report::ReportError => "report",
    cxr_triage::synth::SynthError => "synth",
);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("parse", format!("{}: {e}", path.display())))
}

impl Settings {
    /// The config file (paths resolved against its directory) as a TOML
    /// table, with every given flag written over it.
    fn table(&self) -> Result<toml::Table, CliError> {
        let mut t = match &self.config {
            Some(p) => {
                let cfg = PipelineConfig::load(p)?;
                toml::Table::try_from(&cfg).map_err(|e| CliError::new("config", e.to_string()))?
            }
            None => toml::Table::new(),
        };
        fn set(t: &mut toml::Table, path: &[&str], v: toml::Value) {
            let mut cur = t;
            for key in &path[..path.len() - 1] {
                cur = cur
                    .entry(key.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("config sections are tables");
            }
            cur.insert(path[path.len() - 1].to_string(), v);
        }
        let path_str = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        let int = |v: u64| toml::Value::Integer(v as i64);

        if let Some(v) = &self.manifest {
            set(&mut t, &["manifest"], path_str(v));
        }
        if let Some(v) = &self.output_dir {
            set(&mut t, &["output_dir"], path_str(v));
        }
        if let Some(v) = &self.cache_dir {
            set(&mut t, &["cache_dir"], path_str(v));
        }
        if let Some(v) = self.folds {
            set(&mut t, &["folds"], int(v as u64));
        }
        if let Some(v) = self.stratified {
            set(&mut t, &["stratified"], toml::Value::Boolean(v));
        }
        if let Some(v) = &self.positive_class {
            set(&mut t, &["positive_class"], toml::Value::String(v.clone()));
        }
        if let Some(v) = self.augment_copies {
            set(&mut t, &["augment_copies"], int(v as u64));
        }
        if !self.members.is_empty() {
            let list = self
                .members
                .iter()
                .map(|(name, backbone)| {
                    let mut m = toml::Table::new();
                    m.insert("name".into(), toml::Value::String(name.clone()));
                    m.insert("backbone".into(), path_str(backbone));
                    toml::Value::Table(m)
                })
                .collect();
            set(&mut t, &["members"], toml::Value::Array(list));
        }
        for (key, v) in [
            ("split", self.split_seed),
            ("init", self.init_seed),
            ("train", self.train_seed),
            ("augment", self.augment_seed),
        ] {
            if let Some(v) = v {
                set(&mut t, &["seeds", key], int(v));
            }
        }
        if let Some(v) = self.augment {
            set(&mut t, &["augment", "enabled"], toml::Value::Boolean(v));
        }
        for (key, v) in [
            ("flip_x_prob", self.flip_x_prob),
            ("flip_y_prob", self.flip_y_prob),
            ("rotation_range_deg", self.rotation_range_deg),
            ("shear_range", self.shear_range),
        ] {
            if let Some(v) = v {
                set(&mut t, &["augment", key], toml::Value::Float(v));
            }
        }
        if let Some(v) = self.epochs {
            set(&mut t, &["train", "epochs"], int(v as u64));
        }
        if let Some(v) = self.batch_size {
            set(&mut t, &["train", "batch_size"], int(v as u64));
        }
        if let Some(v) = self.learning_rate {
            set(&mut t, &["train", "learning_rate"], toml::Value::Float(v));
        }
        if let Some(v) = self.shuffle {
            set(&mut t, &["train", "shuffle"], toml::Value::Boolean(v));
        }
        Ok(t)
    }

    fn full(&self) -> Result<PipelineConfig, CliError> {
        let cfg: PipelineConfig = self
            .table()?
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Typed lookup of one (possibly nested) setting; a missing value names
/// both the flag and the config key.
fn field<T: DeserializeOwned>(t: &toml::Table, path: &[&str], flag: &str) -> Result<T, CliError> {
    let mut cur = t.get(path[0]);
    for key in &path[1..] {
        cur = cur.and_then(|v| v.get(key));
    }
    let v = cur.ok_or_else(|| CliError::new("usage", format!("missing {flag} (or `{}` in --config)", path.join("."))))?;
    v.clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::new("config", format!("{}: {}", path.join("."), e.message())))
}

fn load_manifest(t: &toml::Table) -> Result<Manifest, CliError> {
    let path: PathBuf = field(t, &["manifest"], "--manifest")?;
    Ok(manifest::load_manifest(path)?)
}

/// Fold count, split seed and stratification, checked before any I/O.
struct FoldSettings {
    k: usize,
    seed: u64,
    stratified: bool,
}

impl FoldSettings {
    fn from_table(t: &toml::Table) -> Result<Self, CliError> {
        Ok(Self {
            k: field(t, &["folds"], "--folds")?,
            seed: field(t, &["seeds", "split"], "--split-seed")?,
            stratified: field(t, &["stratified"], "--stratified")?,
        })
    }

    fn plan(&self, m: &Manifest) -> Result<manifest::FoldPlan, CliError> {
        Ok(manifest::plan_folds(m, self.k, self.seed, self.stratified)?)
    }
}

fn labels_by_id(m: &Manifest, ids: &[String]) -> Result<Vec<Label>, CliError> {
    let map: HashMap<&str, Label> = m.samples().iter().map(|s| (s.id.as_str(), s.label)).collect();
    ids.iter()
        .map(|id| {
            map.get(id.as_str())
                .copied()
                .ok_or_else(|| CliError::new("manifest", format!("sample {id:?} is not in the manifest")))
        })
        .collect()
}

fn write_eval_outputs(dir: &Path, report: &MetricsReport, roc: Option<&RocCurve>, preds: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_text(&dir.join("metrics.json"), serde_json::to_string_pretty(report).expect("report serializes"))?;
    if let Some(roc) = roc {
        let mut buf = Vec::new();
        roc.write_csv(&mut buf).expect("writing to memory");
        write_text(&dir.join("roc.csv"), buf)?;
    }
    write_text(&dir.join("predictions.csv"), preds)
}

fn cmd_extract(settings: &Settings, backbone_ref: &str, fold: Option<usize>, part: Part, out: &Path) -> Result<serde_json::Value, CliError> {
    let t = settings.table()?;
    let folds = fold.map(|_| FoldSettings::from_table(&t)).transpose()?;
    let m = load_manifest(&t)?;
    let backbone = extractor::load_backbone(backbone_ref)?;
    let cache = t.get("cache_dir").map(|_| field::<PathBuf>(&t, &["cache_dir"], "--cache-dir")).transpose()?.map(FeatureCache::new);
    let corpus = Corpus::load(m)?;
    let features = match fold {
        None => {
            let all: Vec<usize> = (0..corpus.manifest.len()).collect();
            pipeline::corpus_features(&backbone, &corpus, &all, None, cache.as_ref(), 0)?
        }
        Some(f) => {
            let p = folds.as_ref().expect("fold settings read above").plan(&corpus.manifest)?;
            if f >= p.k {
                return Err(CliError::new("usage", format!("--fold {f} out of range for k = {}", p.k)));
            }
            match part {
                Part::Test => pipeline::corpus_features(&backbone, &corpus, p.test_indices(f), None, cache.as_ref(), f)?,
                Part::Train => {
                    let augment = field(&t, &["augment"], "--augment")?;
                    let seed = field(&t, &["seeds", "augment"], "--augment-seed")?;
                    let copies: usize = field(&t, &["augment_copies"], "--augment-copies")?;
                    let train = p.train_indices(f);
                    let parts = (0..copies.max(1))
                        .map(|copy| {
                            let plan = AugmentPlan { cfg: augment, seed, fold: f, copy };
                            pipeline::corpus_features(&backbone, &corpus, &train, Some(&plan), cache.as_ref(), f)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    FeatureMatrix::concat(&parts)?
                }
            }
        }
    };
    features.write(out)?;
    Ok(json!({
        "features": out,
        "rows": features.rows(),
        "dim": features.dim(),
        "backbone": backbone.spec().name,
        "backbone_sha256": backbone.spec().sha256,
    }))
}

fn cmd_train(settings: &Settings, features: &Path, out: &Path, backbone: Option<String>) -> Result<serde_json::Value, CliError> {
    let t = settings.table()?;
    let m = load_manifest(&t)?;
    let x = FeatureMatrix::read(features)?;
    let y = labels_by_id(&m, x.sample_ids())?;
    let cfg = TrainConfig {
        epochs: field(&t, &["train", "epochs"], "--epochs")?,
        batch_size: field(&t, &["train", "batch_size"], "--batch-size")?,
        learning_rate: field(&t, &["train", "learning_rate"], "--learning-rate")?,
        shuffle: field(&t, &["train", "shuffle"], "--shuffle")?,
        seed: field(&t, &["seeds", "train"], "--train-seed")?,
    };
    let init_seed = field(&t, &["seeds", "init"], "--init-seed")?;
    let trained = head::train(&x, &y, init_seed, &cfg)?;
    let file = HeadFile::new(&trained, &cfg, backbone);
    write_text(out, serde_json::to_string_pretty(&file).expect("head serializes"))?;
    Ok(json!({ "head": out, "rows": x.rows(), "dim": x.dim(), "loss_trace": trained.loss_trace }))
}

fn predictions_csv(preds: &[Prediction], truth: &[Label]) -> String {
    let mut s = String::from("sample_id,truth,label,score\n");
    for (p, t) in preds.iter().zip(truth) {
        s.push_str(&format!("{},{t},{},{}\n", p.sample_id, p.label, p.score));
    }
    s
}

fn cmd_evaluate(settings: &Settings, head_path: &Path, features: &Path, out_dir: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let t = settings.table()?;
    let m = load_manifest(&t)?;
    let head: SoftmaxHead = read_json::<HeadFile>(head_path)?.into_head()?;
    let x = FeatureMatrix::read(features)?;
    let truth = labels_by_id(&m, x.sample_ids())?;
    let preds = head.forward(&x)?;
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let (report, roc) = metrics::evaluate(&labels, &scores, &truth)?;
    if let Some(dir) = out_dir {
        write_eval_outputs(dir, &report, roc.as_ref(), &predictions_csv(&preds, &truth))?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn cmd_ensemble(
    settings: &Settings,
    definition: &Path,
    given: &[(String, PathBuf)],
    out_dir: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let t = settings.table()?;
    let def = EnsembleDefinition::read(definition)?;
    let base = definition.parent().unwrap_or(Path::new(""));
    let given: HashMap<&str, &PathBuf> = given.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let mut corpus: Option<Corpus> = None;
    let mut members = Vec::new();
    let mut feats = Vec::new();
    for d in &def.members {
        let head = read_json::<HeadFile>(&EnsembleDefinition::resolve(base, &d.head))?.into_head()?;
        let backbone = if d.backbone == extractor::TOYPOOL {
            d.backbone.clone()
        } else {
            EnsembleDefinition::resolve(base, Path::new(&d.backbone)).to_string_lossy().into_owned()
        };
        let x = match given.get(d.name.as_str()) {
            Some(p) => FeatureMatrix::read(p)?,
            None => {
                if corpus.is_none() {
                    corpus = Some(Corpus::load(load_manifest(&t)?)?);
                }
                let c = corpus.as_ref().expect("loaded above");
                let all: Vec<usize> = (0..c.manifest.len()).collect();
                pipeline::corpus_features(&extractor::load_backbone(&backbone)?, c, &all, None, None, 0)?
            }
        };
        members.push(EnsembleMember { name: d.name.clone(), backbone, head });
        feats.push(x);
    }
    let model = EnsembleModel::new(members)?;
    let votes = ensemble::predict_ensemble(&model, &feats)?;
    let m = match corpus {
        Some(c) => c.manifest,
        None => load_manifest(&t)?,
    };
    let ids: Vec<String> = votes.iter().map(|v| v.sample_id.clone()).collect();
    let truth = labels_by_id(&m, &ids)?;
    let labels: Vec<Label> = votes.iter().map(|v| v.fused_label).collect();
    let scores: Vec<f64> = votes.iter().map(|v| v.fused_score).collect();
    let (report, roc) = metrics::evaluate(&labels, &scores, &truth)?;
    if let Some(dir) = out_dir {
        let mut csv = String::from("sample_id,truth");
        for mem in model.members() {
            csv.push_str(&format!(",{0}_label,{0}_score", mem.name));
        }
        csv.push_str(",ensemble_label,ensemble_score\n");
        for (v, tr) in votes.iter().zip(&truth) {
            csv.push_str(&format!("{},{tr}", v.sample_id));
            for (l, s) in v.member_labels.iter().zip(&v.member_scores) {
                csv.push_str(&format!(",{l},{s}"));
            }
            csv.push_str(&format!(",{},{}\n", v.fused_label, v.fused_score));
        }
        write_eval_outputs(dir, &report, roc.as_ref(), &csv)?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn run_summary_json(summary: &RunSummary, out: &Path) -> serde_json::Value {
    let models: Vec<_> = summary
        .aggregate
        .iter()
        .map(|a| {
            json!({
                "model": a.model,
                "pooled_accuracy": a.pooled.accuracy,
                "pooled_sensitivity": a.pooled.sensitivity,
                "pooled_auc": a.pooled.auc,
                "counts": a.pooled.counts,
            })
        })
        .collect();
    json!({ "output_dir": out, "k": summary.k, "n_samples": summary.n_samples, "models": models })
}

fn dispatch(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Synth { n_pos, n_neg, seed, out, side } => {
            let m = synth::make_synthetic_corpus(n_pos, n_neg, seed, &out, side)?;
            let c = m.class_counts();
            Ok(json!({ "manifest": out.join("manifest.csv"), "rows": m.len(), "covid": c.positive, "normal": c.negative }))
        }
        Command::PlanFolds { settings, out } => {
            let t = settings.table()?;
            let folds = FoldSettings::from_table(&t)?;
            let p = folds.plan(&load_manifest(&t)?)?;
            if let Some(out) = out {
                write_text(&out, p.to_json())?;
            }
            Ok(serde_json::to_value(&p).expect("plan serializes"))
        }
        Command::Extract { settings, backbone, fold, part, out } => cmd_extract(&settings, &backbone, fold, part, &out),
        Command::Train { settings, features, out, backbone } => cmd_train(&settings, &features, &out, backbone),
        Command::Evaluate { settings, head, features, out_dir } => cmd_evaluate(&settings, &head, &features, out_dir.as_deref()),
        Command::Ensemble { settings, definition, features, out_dir } => cmd_ensemble(&settings, &definition, &features, out_dir.as_deref()),
        Command::Run { settings } => {
            let cfg = settings.full()?;
            let summary = pipeline::run_and_report(&cfg)?;
            Ok(run_summary_json(&summary, &cfg.output_dir))
        }
        Command::Report { summary, out } => {
            let s: RunSummary = read_json(&summary)?;
            let written = report::report(&s, &out)?;
            Ok(json!({ "written": written }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("result serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind, "message": e.message } }));
            ExitCode::FAILURE
        }
    }
}
