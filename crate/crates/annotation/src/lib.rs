//! Judge-agreement annotation: queueing candidates, screening workers,
//! collecting judgments into a crash-safe journal, filtering by agreement
//! and scoring a human baseline. `http` exposes the same operations as a
//! JSON API.

pub mod error;
pub mod http;
pub mod journal;
pub mod policy;
pub mod service;
pub mod state;
pub mod types;

pub use error::{AnnotationError, Result};
pub use policy::{filter_testset, human_baseline, BaselineReport, FilterOutcome, Tally};
pub use service::{AnnotationService, ServiceConfig, SubmitOutcome, SubmitRequest};
pub use types::{candidate_id, candidates_for, AgreementPolicy, Candidate, Judgment, Phase, Role, Selection, TaskView};
