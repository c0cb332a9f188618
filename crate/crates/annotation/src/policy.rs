use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use incoforge_core::evalkit::{classification_report, ClassificationReport, Prediction};

use crate::error::{AnnotationError, Result};
use crate::types::{AgreementPolicy, Candidate, Judgment, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub agree: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub policy: AgreementPolicy,
    /// Kept candidate ids, in input order.
    pub kept: Vec<String>,
    pub tallies: BTreeMap<String, Tally>,
}

impl FilterOutcome {
    pub fn dropped(&self) -> usize {
        self.tallies.len() - self.kept.len()
    }

    pub fn retention(&self) -> f64 {
        if self.tallies.is_empty() {
            0.0
        } else {
            self.kept.len() as f64 / self.tallies.len() as f64
        }
    }
}

fn judgments_by_candidate<'a>(judgments: &'a [Judgment], phase: Phase) -> BTreeMap<&'a str, Vec<&'a Judgment>> {
    let mut by: BTreeMap<&str, Vec<&Judgment>> = BTreeMap::new();
    for j in judgments.iter().filter(|j| j.phase == phase) {
        by.entry(j.candidate.as_str()).or_default().push(j);
    }
    by
}

/// Keeps a candidate iff at least `required_agree` of its verification
/// judgments match the automatic label. Every candidate must carry exactly
/// `n_judges` verification judgments.
pub fn filter_testset(candidates: &[Candidate], judgments: &[Judgment], policy: AgreementPolicy) -> Result<FilterOutcome> {
    policy.validate()?;
    let by = judgments_by_candidate(judgments, Phase::Verification);
    let deficient: Vec<(String, usize)> = candidates
        .iter()
        .map(|c| (c.id.clone(), by.get(c.id.as_str()).map_or(0, Vec::len)))
        .filter(|&(_, n)| n != policy.n_judges)
        .collect();
    if !deficient.is_empty() {
        return Err(AnnotationError::Incomplete(deficient));
    }
    let mut kept = Vec::new();
    let mut tallies = BTreeMap::new();
    for c in candidates {
        let js = &by[c.id.as_str()];
        let agree = js.iter().filter(|j| j.label == c.auto_label).count();
        if agree >= policy.required_agree {
            kept.push(c.id.clone());
        }
        tallies.insert(c.id.clone(), Tally { agree, total: js.len() });
    }
    Ok(FilterOutcome { policy, kept, tallies })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub judges: Vec<JudgeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub worker: String,
    pub judged: usize,
    pub report: ClassificationReport,
}

/// Human performance on the kept set: each baseline judge is scored against
/// the automatic labels, and the reported numbers are the mean over judges.
pub fn human_baseline(kept: &[Candidate], judgments: &[Judgment], per_instance: usize) -> Result<BaselineReport> {
    if kept.is_empty() {
        return Err(AnnotationError::NotReady("no kept candidates".into()));
    }
    let by = judgments_by_candidate(judgments, Phase::Baseline);
    let deficient: Vec<(String, usize)> = kept
        .iter()
        .map(|c| (c.id.clone(), by.get(c.id.as_str()).map_or(0, Vec::len)))
        .filter(|&(_, n)| n != per_instance)
        .collect();
    if !deficient.is_empty() {
        return Err(AnnotationError::Incomplete(deficient));
    }
    let mut per_judge: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for c in kept {
        for j in &by[c.id.as_str()] {
            per_judge
                .entry(j.worker.as_str())
                .or_default()
                .push(Prediction { score: f64::from(j.label), gold: c.auto_label });
        }
    }
    let mut judges = Vec::with_capacity(per_judge.len());
    for (worker, preds) in per_judge {
        judges.push(JudgeReport {
            worker: worker.to_string(),
            judged: preds.len(),
            report: classification_report(&preds, 0.5)?,
        });
    }
    let n = judges.len() as f64;
    let mean = |f: fn(&ClassificationReport) -> f64| judges.iter().map(|j| f(&j.report)).sum::<f64>() / n;
    Ok(BaselineReport {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        judges,
    })
}
