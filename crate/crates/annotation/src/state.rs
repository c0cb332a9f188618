use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotationError, Result};
use crate::policy::FilterOutcome;
use crate::types::{Candidate, Judgment, Phase, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub id: String,
    /// Hex SHA-256 of the bearer token; the token itself is never stored.
    pub token_hash: String,
    pub role: Role,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Enqueue { candidates: Vec<Candidate> },
    SetProbes { probes: Vec<Candidate> },
    Worker(Worker),
    Judgment(Judgment),
    Filter(FilterOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Screening {
    Pending { answered: usize, total: usize },
    Passed { correct: usize, total: usize },
    Failed { correct: usize, total: usize },
}

#[derive(Debug, Default, Clone)]
struct Index {
    candidates: HashMap<String, usize>,
    probes: HashMap<String, usize>,
    workers: HashMap<String, usize>,
    tokens: HashMap<String, usize>,
    judged: HashMap<(String, String, Phase), u8>,
    counts: HashMap<(String, Phase), usize>,
    idempotency: HashMap<String, usize>,
    kept: HashSet<String>,
}

/// Everything the service knows. Only the serialized fields are
/// authoritative; the index is rebuilt from them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct State {
    pub seq: u64,
    pub candidates: Vec<Candidate>,
    pub probes: Vec<Candidate>,
    pub workers: Vec<Worker>,
    pub judgments: Vec<Judgment>,
    pub filter: Option<FilterOutcome>,
    #[serde(skip)]
    index: Index,
}

impl PartialEq for State {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
            && self.candidates == other.candidates
            && self.probes == other.probes
            && self.workers == other.workers
            && self.judgments == other.judgments
            && self.filter == other.filter
    }
}

impl State {
    pub fn rebuild_index(&mut self) {
        let mut idx = Index::default();
        idx.candidates = self.candidates.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        idx.probes = self.probes.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        idx.workers = self.workers.iter().enumerate().map(|(i, w)| (w.id.clone(), i)).collect();
        idx.tokens = self.workers.iter().enumerate().map(|(i, w)| (w.token_hash.clone(), i)).collect();
        for (i, j) in self.judgments.iter().enumerate() {
            Self::index_judgment(&mut idx, i, j);
        }
        if let Some(f) = &self.filter {
            idx.kept = f.kept.iter().cloned().collect();
        }
        self.index = idx;
    }

    fn index_judgment(idx: &mut Index, i: usize, j: &Judgment) {
        idx.judged.insert((j.worker.clone(), j.candidate.clone(), j.phase), j.label);
        *idx.counts.entry((j.candidate.clone(), j.phase)).or_default() += 1;
        if let Some(k) = &j.idempotency_key {
            idx.idempotency.insert(k.clone(), i);
        }
    }

    pub fn apply(&mut self, seq: u64, event: Event) -> Result<()> {
        if seq != self.seq + 1 {
            return Err(AnnotationError::Invalid(format!("event {seq} applied after {}", self.seq)));
        }
        match event {
            Event::Enqueue { candidates } => {
                for c in candidates {
                    if self.index.candidates.contains_key(&c.id) || self.index.probes.contains_key(&c.id) {
                        return Err(AnnotationError::Invalid(format!("candidate {} enqueued twice", c.id)));
                    }
                    self.index.candidates.insert(c.id.clone(), self.candidates.len());
                    self.candidates.push(c);
                }
            }
            Event::SetProbes { probes } => {
                self.index.probes = probes.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
                self.probes = probes;
            }
            Event::Worker(w) => {
                if self.index.workers.contains_key(&w.id) {
                    return Err(AnnotationError::Invalid(format!("worker {} created twice", w.id)));
                }
                self.index.workers.insert(w.id.clone(), self.workers.len());
                self.index.tokens.insert(w.token_hash.clone(), self.workers.len());
                self.workers.push(w);
            }
            Event::Judgment(j) => {
                Self::index_judgment(&mut self.index, self.judgments.len(), &j);
                self.judgments.push(j);
            }
            Event::Filter(f) => {
                self.index.kept = f.kept.iter().cloned().collect();
                self.filter = Some(f);
            }
        }
        self.seq = seq;
        Ok(())
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.index.candidates.get(id).map(|&i| &self.candidates[i])
    }

    pub fn probe(&self, id: &str) -> Option<&Candidate> {
        self.index.probes.get(id).map(|&i| &self.probes[i])
    }

    pub fn worker(&self, id: &str) -> Option<&Worker> {
        self.index.workers.get(id).map(|&i| &self.workers[i])
    }

    pub fn worker_by_token_hash(&self, hash: &str) -> Option<&Worker> {
        self.index.tokens.get(hash).map(|&i| &self.workers[i])
    }

    pub fn has_judged(&self, worker: &str, candidate: &str, phase: Phase) -> bool {
        self.label_of(worker, candidate, phase).is_some()
    }

    pub fn label_of(&self, worker: &str, candidate: &str, phase: Phase) -> Option<u8> {
        self.index.judged.get(&(worker.to_string(), candidate.to_string(), phase)).copied()
    }

    pub fn count(&self, candidate: &str, phase: Phase) -> usize {
        self.index.counts.get(&(candidate.to_string(), phase)).copied().unwrap_or(0)
    }

    pub fn by_idempotency_key(&self, key: &str) -> Option<&Judgment> {
        self.index.idempotency.get(key).map(|&i| &self.judgments[i])
    }

    pub fn is_kept(&self, candidate: &str) -> bool {
        self.index.kept.contains(candidate)
    }

    pub fn closed(&self) -> bool {
        self.filter.is_some()
    }

    pub fn kept_candidates(&self) -> Vec<Candidate> {
        match &self.filter {
            Some(f) => f.kept.iter().filter_map(|id| self.candidate(id).cloned()).collect(),
            None => Vec::new(),
        }
    }

    pub fn screening(&self, worker: &str, threshold: f64) -> Screening {
        let total = self.probes.len();
        if total == 0 {
            return Screening::Passed { correct: 0, total: 0 };
        }
        let mut answered = 0;
        let mut correct = 0;
        for p in &self.probes {
            if let Some(label) = self.label_of(worker, &p.id, Phase::Screening) {
                answered += 1;
                correct += usize::from(label == p.auto_label);
            }
        }
        if answered < total {
            Screening::Pending { answered, total }
        } else if correct as f64 >= threshold * total as f64 - 1e-9 {
            Screening::Passed { correct, total }
        } else {
            Screening::Failed { correct, total }
        }
    }
}
