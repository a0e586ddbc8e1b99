pub mod backend;
pub mod corpus;
pub mod labelset;
pub mod metrics;
pub mod normalization;
pub mod prompting;
pub mod summary_quality;
pub mod sft_export;
pub mod triage;
pub mod config;
pub mod store;
pub mod pipeline;
