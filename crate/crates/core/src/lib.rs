//! Corpus-grounded semantic strata for retrieval benchmarks: coverage
//! auditing, stratified performance estimation and coverage-aware query
//! generation.

pub mod corpus;
pub mod coverage;
pub mod error;
pub mod estimation;
pub mod generation;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod providers;
pub mod retrieval;
pub mod semantic;
pub mod stats;
pub mod stratification;
pub mod text;

pub use error::{Error, Result};
