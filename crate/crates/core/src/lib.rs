//! Translation quality estimation lab: a small decoder-only transformer with
//! layer-selective regression heads trained through low-rank adapters, prompt
//! baselines, an ingestion layer for DA-scored QE data, and correlation
//! reporting.

pub mod adapters;
pub mod data;
pub mod metrics;
pub mod numerics;
pub mod prompting;
pub mod qe_head;
pub mod rng;
pub mod transformer;
