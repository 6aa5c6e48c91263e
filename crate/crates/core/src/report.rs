//! Run artifacts: summary JSON, confusion tables, ROC CSVs, out-of-fold
//! predictions and a Markdown report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::metrics::{ConfusionCounts, MetricsReport, RocCurve};
use crate::pipeline::{metric_values, RunSummary, ENSEMBLE_NAME};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("summary is marked incomplete")]
    Incomplete,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

fn count_cell(value: f64, total: f64) -> String {
    format!("{value} ({:.1}%)", 100.0 * value / total)
}

/// 2×2 confusion table with covid as the positive class.
pub fn confusion_table(model: &str, c: &ConfusionCounts) -> String {
    let w = [c.tp, c.fp, c.tn, c.fn_].iter().map(|v| v.to_string().len()).max().unwrap_or(1).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{model}");
    let _ = writeln!(s, "{:>16} | {:>w$} | {:>w$}", "", "truth covid", "truth normal", w = w.max(12));
    let _ = writeln!(s, "{:>16} | {:>w$} | {:>w$}", "predicted covid", c.tp, c.fp, w = w.max(12));
    let _ = writeln!(s, "{:>16} | {:>w$} | {:>w$}", "predicted normal", c.fn_, c.tn, w = w.max(12));
    s
}

fn write_roc(path: &Path, roc: &RocCurve) -> Result<(), ReportError> {
    let mut buf = Vec::new();
    roc.write_csv(&mut buf).expect("writing to memory");
    write(path, buf)
}

fn table_row(model: &str, r: &MetricsReport) -> String {
    let c = &r.counts;
    let t = c.total();
    let ci = r
        .ci95
        .map_or_else(|| "n/a".to_string(), |(lo, hi)| format!("{:.2}% – {:.2}%", 100.0 * lo, 100.0 * hi));
    let auc = r.auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.5}"));
    format!(
        "| {model} | {} | {} | {} | {} | {} | {auc} | {ci} |",
        count_cell(c.tp, t),
        count_cell(c.fp, t),
        count_cell(c.tn, t),
        count_cell(c.fn_, t),
        pct(r.accuracy),
    )
}

/// Markdown report: pooled table (TP, FP, TN, FN, accuracy, AUC, CI), the
/// full metric suite pooled and as fold means, and per-fold accuracy.
pub fn markdown(summary: &RunSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Cross-validated triage run\n");
    let _ = writeln!(
        s,
        "{} samples, {}-fold{} cross-validation, {} model(s) plus majority-vote ensemble.\n",
        summary.n_samples,
        summary.k,
        if summary.stratified { " stratified" } else { "" },
        summary.models.len() - 1
    );

    let _ = writeln!(s, "## Pooled out-of-fold results\n");
    let _ = writeln!(s, "| Model | TP | FP | TN | FN | Accuracy | AUC | 95% CI (accuracy) |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for a in &summary.aggregate {
        let _ = writeln!(s, "{}", table_row(&a.model, &a.pooled));
    }

    let _ = writeln!(s, "\n## Metric suite (pooled / mean of folds)\n");
    let names: Vec<&str> = metric_values(&summary.aggregate[0].pooled).iter().map(|(n, _)| *n).collect();
    let _ = writeln!(s, "| Model | {} |", names.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(names.len()));
    for a in &summary.aggregate {
        let cells: Vec<String> = metric_values(&a.pooled)
            .iter()
            .map(|(name, pooled)| {
                let mean = a.mean_of_folds.get(*name).and_then(|m| m.mean);
                let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"));
                format!("{} / {}", fmt(*pooled), fmt(mean))
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", a.model, cells.join(" | "));
    }

    let _ = writeln!(s, "\n## Per-fold accuracy\n");
    let _ = writeln!(s, "| Fold | Train | Test | {} |", summary.models.join(" | "));
    let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(summary.models.len()));
    for f in &summary.folds {
        let cells: Vec<String> = f
            .members
            .iter()
            .chain(std::iter::once(&f.ensemble))
            .map(|m| pct(m.metrics.accuracy))
            .collect();
        let _ = writeln!(s, "| {} | {} | {} | {} |", f.fold + 1, f.train_size, f.test_size, cells.join(" | "));
    }

    let _ = writeln!(s, "\n## Method\n");
    for note in &summary.provenance.method {
        let _ = writeln!(s, "- {note}");
    }
    let _ = writeln!(s, "\n## Provenance\n");
    let p = &summary.provenance;
    let _ = writeln!(s, "- settings hash: `{}`", p.settings_hash);
    let _ = writeln!(s, "- manifest sha256: `{}`", p.manifest_sha256);
    let _ = writeln!(s, "- corpus sha256: `{}`", p.corpus_sha256);
    for b in &p.backbones {
        let _ = writeln!(s, "- backbone {} ({}px → {}): `{}`", b.name, b.input_side, b.feature_dim, b.sha256);
    }
    let _ = writeln!(s, "- code version: {}", p.code_version);
    s
}

/// Write every artifact for `summary` into `out_dir`, creating it if needed.
/// Returns the paths written.
pub fn report(summary: &RunSummary, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if !summary.complete {
        return Err(ReportError::Incomplete);
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let roc_dir = out_dir.join("roc");
    let conf_dir = out_dir.join("confusion");
    for d in [out_dir, &roc_dir, &conf_dir] {
        fs::create_dir_all(d).map_err(io(d))?;
    }
    let mut written = Vec::new();

    let p = out_dir.join("summary.json");
    write(&p, serde_json::to_string_pretty(summary).expect("summary serializes"))?;
    written.push(p);

    for a in &summary.aggregate {
        let stem = file_stem(&a.model);
        let p = conf_dir.join(format!("{stem}.txt"));
        let mut text = confusion_table(&format!("{} (pooled)", a.model), &a.pooled.counts);
        for f in &summary.folds {
            let r = if a.model == ENSEMBLE_NAME {
                &f.ensemble
            } else {
                match f.members.iter().find(|m| m.model == a.model) {
                    Some(m) => m,
                    None => continue,
                }
            };
            text.push('\n');
            text.push_str(&confusion_table(&format!("{} (fold {})", a.model, f.fold + 1), &r.metrics.counts));
        }
        write(&p, text)?;
        written.push(p);

        if let Some(roc) = &a.pooled_roc {
            let p = roc_dir.join(format!("{stem}.csv"));
            write_roc(&p, roc)?;
            written.push(p);
        }
        for f in &summary.folds {
            let r = if a.model == ENSEMBLE_NAME { Some(&f.ensemble) } else { f.members.iter().find(|m| m.model == a.model) };
            if let Some(roc) = r.and_then(|r| r.roc.as_ref()) {
                let p = roc_dir.join(format!("{stem}_fold{}.csv", f.fold + 1));
                write_roc(&p, roc)?;
                written.push(p);
            }
        }
    }

    let mut preds = String::from("fold,sample_id");
    for m in &summary.models[..summary.models.len() - 1] {
        let _ = write!(preds, ",{m}_label,{m}_score");
    }
    preds.push_str(",ensemble_label,ensemble_score\n");
    for f in &summary.folds {
        for v in &f.votes {
            let _ = write!(preds, "{},{}", f.fold + 1, v.sample_id);
            for (l, sc) in v.member_labels.iter().zip(&v.member_scores) {
                let _ = write!(preds, ",{l},{sc}");
            }
            let _ = writeln!(preds, ",{},{}", v.fused_label, v.fused_score);
        }
    }
    let p = out_dir.join("predictions.csv");
    write(&p, preds)?;
    written.push(p);

    let p = out_dir.join("report.md");
    write(&p, markdown(summary))?;
    written.push(p);
    Ok(written)
}
