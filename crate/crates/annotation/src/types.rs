use serde::{Deserialize, Serialize};

use incoforge_core::forge::Instance;
use incoforge_core::forge::Mode;

use crate::error::{AnnotationError, Result};

/// One judgeable question: is the instance incoherent at `focus`?
/// For MSD the focus is slot k (between sentences k and k+1), for DSD it
/// is sentence k; both 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub instance_id: String,
    pub mode: Mode,
    pub focus: usize,
    pub auto_label: u8,
    pub instance: Instance,
}

pub fn candidate_id(instance_id: &str, focus: usize) -> String {
    format!("{instance_id}@{focus}")
}

impl Candidate {
    pub fn new(instance: &Instance, focus: usize) -> Result<Self> {
        let labels = instance.labels();
        if focus == 0 || focus > labels.len() {
            return Err(AnnotationError::Invalid(format!(
                "focus {focus} outside 1..={} for instance {}",
                labels.len(),
                instance.id()
            )));
        }
        Ok(Self {
            id: candidate_id(instance.id(), focus),
            instance_id: instance.id().to_string(),
            mode: instance.mode(),
            focus,
            auto_label: labels[focus - 1],
            instance: instance.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fresh = Candidate::new(&self.instance, self.focus)?;
        if fresh != *self {
            return Err(AnnotationError::Invalid(format!("candidate {} does not match its instance", self.id)));
        }
        Ok(())
    }

    /// The judge-facing view; never carries the automatic label.
    pub fn view(&self, phase: Phase) -> TaskView {
        TaskView {
            candidate_id: self.id.clone(),
            phase,
            mode: self.mode,
            sentences: self.instance.sentences().iter().map(|s| s.text.clone()).collect(),
            focus: self.focus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Every labeled position.
    #[default]
    All,
    /// Only automatically corrupted positions.
    Corrupted,
}

pub fn candidates_for(instance: &Instance, selection: Selection) -> Result<Vec<Candidate>> {
    let labels = instance.labels();
    (1..=labels.len())
        .filter(|&k| selection == Selection::All || labels[k - 1] == 1)
        .map(|k| Candidate::new(instance, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Screening,
    Verification,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Verification,
    Baseline,
}

impl Role {
    pub fn phase(self) -> Phase {
        match self {
            Role::Verification => Phase::Verification,
            Role::Baseline => Phase::Baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub worker: String,
    pub candidate: String,
    /// 1 = incoherent at the focus position.
    pub label: u8,
    pub timestamp_ms: u64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub candidate_id: String,
    pub phase: Phase,
    pub mode: Mode,
    pub sentences: Vec<String>,
    pub focus: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementPolicy {
    pub n_judges: usize,
    pub required_agree: usize,
}

impl Default for AgreementPolicy {
    fn default() -> Self {
        Self { n_judges: 4, required_agree: 3 }
    }
}

impl AgreementPolicy {
    pub fn new(n_judges: usize, required_agree: usize) -> Result<Self> {
        let p = Self { n_judges, required_agree };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.required_agree < 1 || self.required_agree > self.n_judges {
            return Err(AnnotationError::Invalid(format!(
                "need 1 <= required_agree <= n_judges, got {} of {}",
                self.required_agree, self.n_judges
            )));
        }
        Ok(())
    }
}
