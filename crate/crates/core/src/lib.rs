//! Encrypted-traffic classification with distilled decoder-only transformer
//! experts behind a hard-gated mixture-of-experts router.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod tokenizer;
pub mod training;
pub mod verify;
