use thiserror::Error;

use crate::model::{DrbId, Micros, QueueId, SessionId, Violation};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("DSCP codepoint {0} is outside 0..=63")]
    DscpOutOfRange(u32),
    #[error("invalid cell configuration: {0}")]
    InvalidCell(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("no eligible queue to select")]
    NoEligibleQueue,
    #[error("unknown queue {0}")]
    UnknownQueue(QueueId),
    #[error("session is releasing")]
    SessionReleasing,
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("invalid rules: {}", join(.0))]
    InvalidRules(Vec<Violation>),
    #[error("IP address pool exhausted")]
    PoolExhausted,
    #[error("UE {ue} already holds session '{key}'")]
    DuplicateSession { ue: u32, key: String },
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is releasing")]
    SessionReleasing(SessionId),
    #[error("{origin} may not change {rule} rules")]
    AuthorityViolation {
        origin: &'static str,
        rule: &'static str,
    },
    #[error("update for {apply_at} us submitted at {now} us")]
    PastApplyTime { apply_at: Micros, now: Micros },
    #[error("drb_map references {0}, which is not a configured bearer")]
    UnknownDrb(DrbId),
    #[error("handover needs distinct source and target nodes")]
    SameNode,
    #[error("unknown node '{0}'")]
    UnknownNode(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("a path needs at least one leg")]
    NoLegs,
    #[error("unknown encapsulation stack '{0}'")]
    UnknownStack(String),
    #[error("unknown deployment scenario '{0}'")]
    UnknownScenario(String),
    #[error("fitted config has no entry for {0}")]
    MissingScenario(String),
    #[error("leg '{0}' has a negative RTT contribution")]
    NegativeRtt(String),
    #[error("fitted config is malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} us while the clock reads {now} us")]
    CausalityViolation { at: Micros, now: Micros },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
