//! Chest-radiograph triage pipeline: frozen pretrained backbones as feature
//! extractors, retrained softmax heads, k-fold cross-validation, a
//! majority-vote ensemble, and the diagnostic metric suite.

pub mod config;
pub mod ensemble;
pub mod extractor;
pub mod head;
pub mod imageproc;
pub mod label;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synth;

pub use label::Label;
