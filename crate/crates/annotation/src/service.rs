use std::collections::HashSet;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use incoforge_core::forge::Instance;
use incoforge_core::seed::sha256_hex;

use crate::error::{AnnotationError, Result};
use crate::journal::{Journal, Record};
use crate::policy::{filter_testset, human_baseline, BaselineReport, FilterOutcome};
use crate::state::{Event, Screening, State, Worker};
use crate::types::{candidates_for, AgreementPolicy, Candidate, Judgment, Phase, Role, Selection, TaskView};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub policy: AgreementPolicy,
    pub baseline_per_instance: usize,
    pub screening_threshold: f64,
    pub probes: Vec<Candidate>,
    /// Write a snapshot after this many journaled events (0 disables).
    pub snapshot_every: u64,
    #[serde(skip_serializing)]
    pub admin_token: String,
}

impl ServiceConfig {
    pub fn new(admin_token: impl Into<String>) -> Self {
        Self {
            policy: AgreementPolicy::default(),
            baseline_per_instance: 3,
            screening_threshold: 0.8,
            probes: Vec::new(),
            snapshot_every: 100,
            admin_token: admin_token.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.baseline_per_instance == 0 {
            return Err(AnnotationError::Invalid("baseline_per_instance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.screening_threshold) {
            return Err(AnnotationError::Invalid("screening_threshold must be in [0, 1]".into()));
        }
        if self.admin_token.len() < 8 {
            return Err(AnnotationError::Invalid("admin token must have at least 8 characters".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.probes {
            p.validate()?;
            if !seen.insert(&p.id) {
                return Err(AnnotationError::Invalid(format!("probe {} listed twice", p.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

pub type EnqueueItem = (usize, Result<Candidate, (Option<String>, String)>);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnqueueReport {
    pub accepted: Vec<String>,
    pub duplicates: Vec<String>,
    pub rejected: Vec<Rejected>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub candidate_id: String,
    pub label: u8,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SubmitOutcome {
    Accepted { seq: u64, phase: Phase },
    /// The same idempotency key was replayed; nothing new was recorded.
    Duplicate { phase: Phase },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub seq: u64,
    pub candidates: usize,
    pub probes: usize,
    pub workers: usize,
    pub screening_judgments: usize,
    pub verification_judgments: usize,
    pub baseline_judgments: usize,
    pub verification_complete: usize,
    pub closed: bool,
    pub kept: Option<usize>,
    pub baseline_complete: usize,
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProgress {
    pub worker: String,
    pub role: Role,
    pub screening: Screening,
    pub judged: usize,
    pub remaining: usize,
}

#[derive(Debug)]
struct Inner {
    state: State,
    journal: Option<Journal>,
    since_snapshot: u64,
}

#[derive(Debug)]
pub struct AnnotationService {
    config: ServiceConfig,
    admin_hash: String,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn hash_token(token: &str) -> String {
    sha256_hex(token.as_bytes())
}

fn new_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl AnnotationService {
    /// A service with no journal; state is lost on drop.
    pub fn in_memory(config: ServiceConfig) -> Result<Self> {
        Self::build(config, State::default(), None)
    }

    /// Opens (or creates) a journaled service in `dir`, replaying the
    /// snapshot and any journal records after it.
    pub fn open(dir: &Path, config: ServiceConfig) -> Result<Self> {
        let (state, journal) = replay(dir)?;
        Self::build(config, state, Some(journal))
    }

    fn build(config: ServiceConfig, mut state: State, journal: Option<Journal>) -> Result<Self> {
        config.validate()?;
        state.rebuild_index();
        let svc = Self {
            admin_hash: hash_token(&config.admin_token),
            config,
            inner: Mutex::new(Inner { state, journal, since_snapshot: 0 }),
        };
        {
            let mut inner = svc.lock();
            if inner.state.probes != svc.config.probes {
                if let Some(c) = svc.config.probes.iter().find(|p| inner.state.candidate(&p.id).is_some()) {
                    return Err(AnnotationError::Invalid(format!("probe {} is also a candidate", c.id)));
                }
                let probes = svc.config.probes.clone();
                svc.commit(&mut inner, Event::SetProbes { probes })?;
            }
        }
        Ok(svc)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<u64> {
        let seq = inner.state.seq + 1;
        if let Some(j) = inner.journal.as_mut() {
            j.append(&Record { seq, event: &event })?;
        }
        inner.state.apply(seq, event)?;
        inner.since_snapshot += 1;
        if self.config.snapshot_every > 0 && inner.since_snapshot >= self.config.snapshot_every {
            if let Some(j) = inner.journal.as_ref() {
                j.write_snapshot(inner.state.seq, &inner.state)?;
            }
            inner.since_snapshot = 0;
        }
        Ok(seq)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot_now(&self) -> Result<()> {
        let mut inner = self.lock();
        if let Some(j) = inner.journal.as_ref() {
            j.write_snapshot(inner.state.seq, &inner.state)?;
        }
        inner.since_snapshot = 0;
        Ok(())
    }

    pub fn state(&self) -> State {
        self.lock().state.clone()
    }

    pub fn state_digest(&self) -> String {
        digest(&self.lock().state)
    }

    pub fn is_admin(&self, token: &str) -> bool {
        hash_token(token) == self.admin_hash
    }

    pub fn authenticate(&self, token: &str) -> Result<Worker> {
        self.lock().state.worker_by_token_hash(&hash_token(token)).cloned().ok_or(AnnotationError::Unauthorized)
    }

    pub fn enqueue(&self, candidates: Vec<Candidate>) -> Result<EnqueueReport> {
        self.enqueue_results(candidates.into_iter().enumerate().map(|(i, c)| (i, Ok(c))).collect())
    }

    pub fn enqueue_instances(&self, instances: &[Instance], selection: Selection) -> Result<EnqueueReport> {
        let mut items = Vec::new();
        for (i, inst) in instances.iter().enumerate() {
            match candidates_for(inst, selection) {
                Ok(cs) => items.extend(cs.into_iter().map(|c| (i, Ok(c)))),
                Err(e) => items.push((i, Err((Some(inst.id().to_string()), e.to_string())))),
            }
        }
        self.enqueue_results(items)
    }

    /// Accepts each well-formed new candidate; duplicates and malformed
    /// entries are reported and skipped. Each item carries the index of the
    /// input it came from.
    pub fn enqueue_results(&self, items: Vec<EnqueueItem>) -> Result<EnqueueReport> {
        let mut inner = self.lock();
        if inner.state.closed() {
            return Err(AnnotationError::Closed);
        }
        let mut report = EnqueueReport::default();
        let mut fresh = Vec::new();
        let mut batch = HashSet::new();
        for (index, item) in items {
            let c = match item {
                Ok(c) => c,
                Err((id, reason)) => {
                    report.rejected.push(Rejected { index, id, reason });
                    continue;
                }
            };
            if let Err(e) = c.validate() {
                report.rejected.push(Rejected { index, id: Some(c.id.clone()), reason: e.to_string() });
            } else if inner.state.probe(&c.id).is_some() {
                report.rejected.push(Rejected { index, id: Some(c.id.clone()), reason: "id is used by a screening probe".into() });
            } else if inner.state.candidate(&c.id).is_some() || !batch.insert(c.id.clone()) {
                report.duplicates.push(c.id);
            } else {
                report.accepted.push(c.id.clone());
                fresh.push(c);
            }
        }
        if !fresh.is_empty() {
            self.commit(&mut inner, Event::Enqueue { candidates: fresh })?;
        }
        Ok(report)
    }

    pub fn create_worker(&self, role: Role) -> Result<(Worker, String)> {
        let mut inner = self.lock();
        let token = new_token();
        let worker = Worker {
            id: format!("w{:04}", inner.state.workers.len() + 1),
            token_hash: hash_token(&token),
            role,
            created_ms: now_ms(),
        };
        self.commit(&mut inner, Event::Worker(worker.clone()))?;
        Ok((worker, token))
    }

    fn require_screened(&self, state: &State, worker: &str) -> Result<()> {
        match state.screening(worker, self.config.screening_threshold) {
            Screening::Passed { .. } => Ok(()),
            Screening::Pending { answered, total } => Err(AnnotationError::Forbidden(format!(
                "screening incomplete ({answered} of {total} probes answered)"
            ))),
            Screening::Failed { correct, total } => {
                Err(AnnotationError::Forbidden(format!("screening failed ({correct} of {total} probes correct)")))
            }
        }
    }

    /// The next task for a worker: an unanswered probe while screening,
    /// then the open candidate with the fewest judgments (ties go to the
    /// earliest enqueued). `None` once nothing is left for this worker.
    pub fn next_task(&self, worker_id: &str) -> Result<Option<TaskView>> {
        let inner = self.lock();
        let st = &inner.state;
        let w = st.worker(worker_id).ok_or_else(|| AnnotationError::UnknownWorker(worker_id.into()))?;
        if let Screening::Pending { .. } = st.screening(worker_id, self.config.screening_threshold) {
            let p = st.probes.iter().find(|p| !st.has_judged(worker_id, &p.id, Phase::Screening));
            return Ok(p.map(|p| p.view(Phase::Screening)));
        }
        self.require_screened(st, worker_id)?;
        let phase = w.role.phase();
        let (pool, cap): (Vec<&Candidate>, usize) = match w.role {
            Role::Verification if st.closed() => return Ok(None),
            Role::Verification => (st.candidates.iter().collect(), self.config.policy.n_judges),
            Role::Baseline if !st.closed() => {
                return Err(AnnotationError::NotReady("baseline tasks open after the agreement filter".into()))
            }
            Role::Baseline => (
                st.candidates.iter().filter(|c| st.is_kept(&c.id)).collect(),
                self.config.baseline_per_instance,
            ),
        };
        let best = pool
            .into_iter()
            .map(|c| (st.count(&c.id, phase), c))
            .filter(|(n, c)| *n < cap && !st.has_judged(worker_id, &c.id, phase))
            .min_by_key(|(n, _)| *n);
        Ok(best.map(|(_, c)| c.view(phase)))
    }

    pub fn submit(&self, worker_id: &str, req: SubmitRequest) -> Result<SubmitOutcome> {
        if req.label > 1 {
            return Err(AnnotationError::Invalid(format!("label must be 0 or 1, got {}", req.label)));
        }
        let mut inner = self.lock();
        let st = &inner.state;
        let w = st.worker(worker_id).ok_or_else(|| AnnotationError::UnknownWorker(worker_id.into()))?.clone();
        if let Some(key) = &req.idempotency_key {
            if let Some(prev) = st.by_idempotency_key(key) {
                if prev.worker == worker_id && prev.candidate == req.candidate_id && prev.label == req.label {
                    return Ok(SubmitOutcome::Duplicate { phase: prev.phase });
                }
                return Err(AnnotationError::IdempotencyConflict(key.clone()));
            }
        }
        let phase = if st.probe(&req.candidate_id).is_some() {
            if !matches!(st.screening(worker_id, self.config.screening_threshold), Screening::Pending { .. })
                && !st.has_judged(worker_id, &req.candidate_id, Phase::Screening)
            {
                return Err(AnnotationError::Invalid("screening is already decided".into()));
            }
            Phase::Screening
        } else if st.candidate(&req.candidate_id).is_some() {
            self.require_screened(st, worker_id)?;
            w.role.phase()
        } else {
            return Err(AnnotationError::UnknownCandidate(req.candidate_id));
        };
        if st.has_judged(worker_id, &req.candidate_id, phase) {
            return Err(AnnotationError::DuplicateJudgment { worker: worker_id.into(), candidate: req.candidate_id });
        }
        match phase {
            Phase::Screening => {}
            Phase::Verification => {
                if st.closed() {
                    return Err(AnnotationError::Closed);
                }
                if st.count(&req.candidate_id, phase) >= self.config.policy.n_judges {
                    return Err(AnnotationError::Full(req.candidate_id));
                }
            }
            Phase::Baseline => {
                if !st.closed() {
                    return Err(AnnotationError::NotReady("baseline judgments open after the agreement filter".into()));
                }
                if !st.is_kept(&req.candidate_id) {
                    return Err(AnnotationError::Forbidden(format!("{} was not kept by the filter", req.candidate_id)));
                }
                if st.count(&req.candidate_id, phase) >= self.config.baseline_per_instance {
                    return Err(AnnotationError::Full(req.candidate_id));
                }
            }
        }
        let judgment = Judgment {
            worker: worker_id.into(),
            candidate: req.candidate_id,
            label: req.label,
            timestamp_ms: now_ms(),
            phase,
            idempotency_key: req.idempotency_key,
        };
        let seq = self.commit(&mut inner, Event::Judgment(judgment))?;
        Ok(SubmitOutcome::Accepted { seq, phase })
    }

    pub fn progress(&self) -> Progress {
        let inner = self.lock();
        let st = &inner.state;
        let n_phase = |p: Phase| st.judgments.iter().filter(|j| j.phase == p).count();
        let kept = st.kept_candidates();
        Progress {
            seq: st.seq,
            candidates: st.candidates.len(),
            probes: st.probes.len(),
            workers: st.workers.len(),
            screening_judgments: n_phase(Phase::Screening),
            verification_judgments: n_phase(Phase::Verification),
            baseline_judgments: n_phase(Phase::Baseline),
            verification_complete: st
                .candidates
                .iter()
                .filter(|c| st.count(&c.id, Phase::Verification) >= self.config.policy.n_judges)
                .count(),
            closed: st.closed(),
            kept: st.filter.as_ref().map(|f| f.kept.len()),
            baseline_complete: kept
                .iter()
                .filter(|c| st.count(&c.id, Phase::Baseline) >= self.config.baseline_per_instance)
                .count(),
            state_digest: digest(st),
        }
    }

    pub fn worker_progress(&self, worker_id: &str) -> Result<WorkerProgress> {
        let inner = self.lock();
        let st = &inner.state;
        let w = st.worker(worker_id).ok_or_else(|| AnnotationError::UnknownWorker(worker_id.into()))?;
        let phase = w.role.phase();
        let judged = st.judgments.iter().filter(|j| j.worker == worker_id && j.phase == phase).count();
        let (pool, cap): (Vec<&Candidate>, usize) = match w.role {
            Role::Verification if !st.closed() => (st.candidates.iter().collect(), self.config.policy.n_judges),
            Role::Baseline if st.closed() => (
                st.candidates.iter().filter(|c| st.is_kept(&c.id)).collect(),
                self.config.baseline_per_instance,
            ),
            _ => (Vec::new(), 0),
        };
        let remaining =
            pool.iter().filter(|c| st.count(&c.id, phase) < cap && !st.has_judged(worker_id, &c.id, phase)).count();
        Ok(WorkerProgress {
            worker: w.id.clone(),
            role: w.role,
            screening: st.screening(worker_id, self.config.screening_threshold),
            judged,
            remaining,
        })
    }

    /// Runs the agreement filter and closes verification.
    pub fn run_filter(&self, policy: Option<AgreementPolicy>) -> Result<FilterOutcome> {
        let policy = policy.unwrap_or(self.config.policy);
        let mut inner = self.lock();
        if let Some(f) = &inner.state.filter {
            if f.policy == policy {
                return Ok(f.clone());
            }
        }
        let outcome = filter_testset(&inner.state.candidates, &inner.state.judgments, policy)?;
        self.commit(&mut inner, Event::Filter(outcome.clone()))?;
        Ok(outcome)
    }

    /// Kept candidates as instance JSON plus `candidate`, `focus` and `tally`.
    pub fn export(&self) -> Result<Vec<Value>> {
        export_rows(&self.lock().state)
    }

    pub fn human_baseline(&self) -> Result<BaselineReport> {
        baseline_report(&self.lock().state, self.config.baseline_per_instance)
    }
}

fn replay(dir: &Path) -> Result<(State, Journal)> {
    let loaded = Journal::open::<Event, State>(dir)?;
    let last = loaded.records.last().map_or(0, |r| r.seq);
    let mut state = State::default();
    if let Some((seq, snap)) = loaded.snapshot {
        if seq <= last && snap.seq == seq {
            state = snap;
            state.rebuild_index();
        }
    }
    for r in loaded.records {
        if r.seq <= state.seq {
            continue;
        }
        state.apply(r.seq, r.event)?;
    }
    Ok((state, loaded.journal))
}

/// Replays a journal directory without starting a service.
pub fn load_state(dir: &Path) -> Result<State> {
    if !dir.join(crate::journal::JOURNAL_FILE).exists() {
        return Err(AnnotationError::Invalid(format!("no journal in {}", dir.display())));
    }
    Ok(replay(dir)?.0)
}

pub fn export_rows(st: &State) -> Result<Vec<Value>> {
    let f = st.filter.as_ref().ok_or_else(|| AnnotationError::NotReady("the agreement filter has not run".into()))?;
    let mut out = Vec::with_capacity(f.kept.len());
    for id in &f.kept {
        let c = st.candidate(id).ok_or_else(|| AnnotationError::UnknownCandidate(id.clone()))?;
        let mut v = serde_json::to_value(&c.instance)?;
        if let Value::Object(m) = &mut v {
            m.insert("candidate".into(), Value::String(c.id.clone()));
            m.insert("focus".into(), c.focus.into());
            m.insert("tally".into(), serde_json::to_value(f.tallies[id])?);
        }
        out.push(v);
    }
    Ok(out)
}

pub fn baseline_report(st: &State, per_instance: usize) -> Result<BaselineReport> {
    if !st.closed() {
        return Err(AnnotationError::NotReady("the agreement filter has not run".into()));
    }
    human_baseline(&st.kept_candidates(), &st.judgments, per_instance)
}

pub fn digest(state: &State) -> String {
    sha256_hex(&serde_json::to_vec(state).expect("state serializes"))
}
