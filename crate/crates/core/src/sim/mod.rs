//! Deterministic discrete-event simulation of the whole downlink.

pub mod engine;
pub mod metrics;
pub mod scenario;
pub mod source;

pub use engine::{run_scenario, Engine, EventKind, PhaseSummary, Report};
pub use metrics::{MetricsSlice, MetricsStore, WindowRow};
pub use scenario::{PathSpec, ScenarioSpec, SessionSpec, SourceKindSpec, SourceSpec, SCHEMA_VERSION};
pub use source::{source_on_event, SourceEvent, SourceState};
