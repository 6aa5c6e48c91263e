//! Majority-vote fusion of independently trained heads.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::extractor::FeatureMatrix;
use crate::head::{HeadError, SoftmaxHead};
use crate::label::Label;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnsembleError {
    #[error("cannot vote over an empty list")]
    Empty,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("{members} members but {features} feature matrices")]
    MemberCount { members: usize, features: usize },
    #[error("member {member}: {source}")]
    Member { member: String, source: HeadError },
    #[error("member {member} has no features for sample {sample_id:?}")]
    MissingSample { member: String, sample_id: String },
    #[error("member {member} covers {got} samples, expected {expected}")]
    SampleSetMismatch { member: String, expected: usize, got: usize },
    #[error("invalid ensemble definition: {0}")]
    Definition(String),
}

/// Behaviour on an exact vote tie. Only positive-on-tie is supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieRule {
    #[default]
    #[serde(rename = "positive")]
    PositiveOnTie,
}

/// Modal label; an exact tie resolves to `Positive`.
pub fn majority_vote(labels: &[Label]) -> Result<Label, EnsembleError> {
    if labels.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    let negatives = labels.len() - positives;
    Ok(if positives >= negatives { Label::Positive } else { Label::Negative })
}

/// Mean member probability. Scores are summed in sorted order so the result
/// does not depend on member order.
pub fn fused_score(scores: &[f64]) -> Result<f64, EnsembleError> {
    if scores.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EnsembleError::ScoreOutOfRange(s));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    Ok(mean.clamp(lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub name: String,
    pub backbone: String,
    pub head: SoftmaxHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<EnsembleMember>,
    tie_rule: TieRule,
}

impl EnsembleModel {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::Definition("an ensemble needs at least one member".into()));
        }
        Ok(Self { members, tie_rule: TieRule::PositiveOnTie })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn tie_rule(&self) -> TieRule {
        self.tie_rule
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub sample_id: String,
    pub member_labels: Vec<Label>,
    pub member_scores: Vec<f64>,
    pub fused_label: Label,
    pub fused_score: f64,
}

/// One vote record per sample of the first member's matrix, in its order.
/// Other members are joined by sample id and must cover exactly the same set.
pub fn predict_ensemble(model: &EnsembleModel, features: &[FeatureMatrix]) -> Result<Vec<VoteRecord>, EnsembleError> {
    if features.len() != model.members.len() {
        return Err(EnsembleError::MemberCount { members: model.members.len(), features: features.len() });
    }
    let mut per_member = Vec::with_capacity(model.members.len());
    for (m, f) in model.members.iter().zip(features) {
        let preds = m
            .head
            .forward(f)
            .map_err(|source| EnsembleError::Member { member: m.name.clone(), source })?;
        let by_id: HashMap<&str, usize> = f.sample_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        per_member.push((preds, by_id));
    }

    let anchor = &features[0];
    for (m, f) in model.members.iter().zip(features) {
        if f.rows() != anchor.rows() {
            return Err(EnsembleError::SampleSetMismatch { member: m.name.clone(), expected: anchor.rows(), got: f.rows() });
        }
    }

    anchor
        .sample_ids()
        .iter()
        .map(|id| {
            let mut labels = Vec::with_capacity(model.members.len());
            let mut scores = Vec::with_capacity(model.members.len());
            for (m, (preds, by_id)) in model.members.iter().zip(&per_member) {
                let &i = by_id.get(id.as_str()).ok_or_else(|| EnsembleError::MissingSample {
                    member: m.name.clone(),
                    sample_id: id.clone(),
                })?;
                labels.push(preds[i].label);
                scores.push(preds[i].score);
            }
            Ok(VoteRecord {
                sample_id: id.clone(),
                fused_label: majority_vote(&labels)?,
                fused_score: fused_score(&scores)?,
                member_labels: labels,
                member_scores: scores,
            })
        })
        .collect()
}

/// Ensemble definition file: member heads and backbone references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDefinition {
    pub members: Vec<MemberDefinition>,
    #[serde(default)]
    pub tie_rule: TieRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberDefinition {
    pub name: String,
    /// Head JSON file, relative to the definition file.
    pub head: PathBuf,
    /// `toypool` or a backbone metadata path relative to the definition file.
    pub backbone: String,
}

impl EnsembleDefinition {
    pub fn read(path: &Path) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnsembleError::Definition(format!("{}: {e}", path.display())))?;
        let def: Self = serde_json::from_str(&text).map_err(|e| EnsembleError::Definition(e.to_string()))?;
        if def.members.is_empty() {
            return Err(EnsembleError::Definition("no members".into()));
        }
        Ok(def)
    }

    /// Resolve a member-relative path against the definition's directory.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Negative as N, Positive as P};

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[P, P, N]), Ok(P));
        assert_eq!(majority_vote(&[N, N, N]), Ok(N));
        assert_eq!(majority_vote(&[P, N]), Ok(P));
        assert_eq!(majority_vote(&[N, P, N, P]), Ok(P));
        assert_eq!(majority_vote(&[N]), Ok(N));
        assert_eq!(majority_vote(&[]), Err(EnsembleError::Empty));
    }

    #[test]
    fn score_examples() {
        assert!((fused_score(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(fused_score(&[0.37]), Ok(0.37));
        assert_eq!(fused_score(&[]), Err(EnsembleError::Empty));
        assert_eq!(fused_score(&[0.5, 1.2]), Err(EnsembleError::ScoreOutOfRange(1.2)));
        assert!(fused_score(&[f64::NAN]).is_err());
    }

    fn features(ids: &[&str], rows: Vec<Vec<f32>>) -> FeatureMatrix {
        FeatureMatrix::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    fn member(name: &str, bias: [f64; 2]) -> EnsembleMember {
        EnsembleMember {
            name: name.into(),
            backbone: "toypool".into(),
            head: SoftmaxHead::from_parts(1, vec![1.0, -1.0], bias, 0).unwrap(),
        }
    }

    #[test]
    fn single_member_passthrough() {
        let m = EnsembleModel::new(vec![member("a", [0.0, 0.3])]).unwrap();
        let f = features(&["x", "y"], vec![vec![0.5], vec![-2.0]]);
        let preds = m.members()[0].head.forward(&f).unwrap();
        let votes = predict_ensemble(&m, &[f]).unwrap();
        for (v, p) in votes.iter().zip(&preds) {
            assert_eq!(v.fused_label, p.label);
            assert_eq!(v.fused_score, p.score);
        }
    }

    #[test]
    fn joins_members_by_sample_id() {
        let m = EnsembleModel::new(vec![member("a", [0.0; 2]), member("b", [0.0; 2])]).unwrap();
        let fa = features(&["x", "y"], vec![vec![1.0], vec![-1.0]]);
        let fb = features(&["y", "x"], vec![vec![-1.0], vec![1.0]]);
        let votes = predict_ensemble(&m, &[fa, fb]).unwrap();
        assert_eq!(votes[0].member_labels, vec![P, P]);
        assert_eq!(votes[1].member_labels, vec![N, N]);
    }

    #[test]
    fn mismatched_inputs_are_errors() {
        let m = EnsembleModel::new(vec![member("a", [0.0; 2]), member("b", [0.0; 2])]).unwrap();
        let fa = features(&["x", "y"], vec![vec![1.0], vec![-1.0]]);
        let fb = features(&["x", "z"], vec![vec![1.0], vec![-1.0]]);
        assert!(matches!(predict_ensemble(&m, &[fa.clone(), fb]), Err(EnsembleError::MissingSample { .. })));
        let fc = features(&["x"], vec![vec![1.0]]);
        assert!(matches!(predict_ensemble(&m, &[fa.clone(), fc]), Err(EnsembleError::SampleSetMismatch { .. })));
        assert!(matches!(predict_ensemble(&m, &[fa.clone()]), Err(EnsembleError::MemberCount { .. })));
        let wide = features(&["x", "y"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(predict_ensemble(&m, &[fa, wide]), Err(EnsembleError::Member { .. })));
        assert!(EnsembleModel::new(vec![]).is_err());
    }

    #[test]
    fn definition_parses() {
        let json = r#"{"members":[{"name":"r18","head":"heads/r18.json","backbone":"toypool"}],"tie_rule":"positive"}"#;
        let def: EnsembleDefinition = serde_json::from_str(json).unwrap();
        assert_eq!(def.tie_rule, TieRule::PositiveOnTie);
        assert!(serde_json::from_str::<EnsembleDefinition>(r#"{"members":[],"tie_rule":"negative"}"#).is_err());
    }
}
