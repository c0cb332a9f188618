use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Core(#[from] incoforge_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("worker {worker} already judged {candidate}")]
    DuplicateJudgment { worker: String, candidate: String },
    #[error("idempotency key {0:?} was used for a different judgment")]
    IdempotencyConflict(String),
    #[error("verification is closed: the agreement filter has run")]
    Closed,
    #[error("candidate {0} already has all the judgments it needs")]
    Full(String),
    #[error("{0}")]
    NotReady(String),
    #[error("incomplete judgments for {} candidate(s): {}", .0.len(), fmt_deficient(.0))]
    Incomplete(Vec<(String, usize)>),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
}

fn fmt_deficient(d: &[(String, usize)]) -> String {
    let mut s: Vec<String> = d.iter().take(10).map(|(id, n)| format!("{id} ({n})")).collect();
    if d.len() > 10 {
        s.push(format!("... {} more", d.len() - 10));
    }
    s.join(", ")
}

impl AnnotationError {
    /// Stable machine-readable code used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            AnnotationError::Core(_) | AnnotationError::Io(_) | AnnotationError::Journal { .. } => "internal",
            AnnotationError::Json(_) | AnnotationError::Invalid(_) => "invalid_request",
            AnnotationError::Unauthorized => "unauthorized",
            AnnotationError::Forbidden(_) => "forbidden",
            AnnotationError::UnknownWorker(_) => "unknown_worker",
            AnnotationError::UnknownCandidate(_) => "unknown_candidate",
            AnnotationError::DuplicateJudgment { .. } => "duplicate_judgment",
            AnnotationError::IdempotencyConflict(_) => "idempotency_conflict",
            AnnotationError::Closed => "closed",
            AnnotationError::Full(_) => "candidate_full",
            AnnotationError::NotReady(_) => "not_ready",
            AnnotationError::Incomplete(_) => "incomplete_judgments",
        }
    }
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;
