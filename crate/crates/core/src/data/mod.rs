//! Flow records: ingestion, prompt rendering, stratified splitting and a
//! synthetic generator with its exact Bayes classifier.

mod ingest;
mod record;
mod split;
mod synthetic;

pub use ingest::{parse_records, write_records, Format, LineError, Parsed};
pub use record::{render_prompt, TrafficRecord, PAYLOAD_HEX_LIMIT};
pub use split::split_dataset;
pub use synthetic::{
    bayes_oracle, generate_synthetic, ClassSpec, OracleDecision, SyntheticSpec, TaskSpec,
    MIN_PACKET_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error("all {lines} input lines are malformed; first error: {first}")]
    Ingestion { lines: usize, first: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
