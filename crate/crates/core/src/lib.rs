//! Evaluation harness and topic-budget calibrator for retrieval-augmented
//! question answering.

pub mod calibration;
pub mod composer;
pub mod corpus;
pub mod hash;
pub mod http;
pub mod metrics;
pub mod reader;
pub mod retrieval;
pub mod runner;
pub mod synth;
