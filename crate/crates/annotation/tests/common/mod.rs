#![allow(dead_code)]

use incoforge_annotation::{AnnotationService, Candidate, Judgment, Phase, Role, ServiceConfig, SubmitRequest};
use incoforge_core::forge::{forge_msd, Instance};
use incoforge_core::Sentence;

pub const ADMIN: &str = "admin-token-for-tests";

/// Five sentences with the third removed: slots 1..=3 labeled [0, 1, 0].
pub fn instance(i: usize) -> Instance {
    let seg: Vec<Sentence> =
        (1..=5).map(|k| Sentence::new(format!("Story {i} sentence {k} walks the dog."))).collect();
    Instance::Msd(forge_msd(&format!("inst{i:03}"), &format!("story{i}"), &seg, &[3]))
}

/// A candidate with the requested automatic label.
pub fn candidate(i: usize, auto_label: u8) -> Candidate {
    Candidate::new(&instance(i), if auto_label == 1 { 2 } else { 1 }).unwrap()
}

pub fn judgment(worker: &str, c: &Candidate, label: u8, phase: Phase) -> Judgment {
    Judgment {
        worker: worker.into(),
        candidate: c.id.clone(),
        label,
        timestamp_ms: 0,
        phase,
        idempotency_key: None,
    }
}

pub fn config() -> ServiceConfig {
    ServiceConfig::new(ADMIN)
}

pub fn probes(n: usize) -> Vec<Candidate> {
    (0..n).map(|i| Candidate::new(&instance(900 + i), 1 + i % 3).unwrap()).collect()
}

pub fn submit(svc: &AnnotationService, worker: &str, candidate: &str, label: u8) -> incoforge_annotation::Result<incoforge_annotation::SubmitOutcome> {
    svc.submit(worker, SubmitRequest { candidate_id: candidate.into(), label, idempotency_key: None })
}

/// Gives every verification worker all candidates, labeling with `label_for`.
pub fn judge_all(svc: &AnnotationService, workers: &[String], label_for: impl Fn(usize, &Candidate) -> u8) {
    for (wi, w) in workers.iter().enumerate() {
        while let Some(t) = svc.next_task(w).unwrap() {
            let st = svc.state();
            let label = match st.probe(&t.candidate_id) {
                Some(p) => p.auto_label,
                None => label_for(wi, st.candidate(&t.candidate_id).unwrap()),
            };
            submit(svc, w, &t.candidate_id, label).unwrap();
        }
    }
}

pub fn workers(svc: &AnnotationService, role: Role, n: usize) -> Vec<String> {
    (0..n).map(|_| svc.create_worker(role).unwrap().0.id).collect()
}
