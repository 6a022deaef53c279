//! Multidimensional fairness metrics for text-to-image generators and a
//! group-relative policy optimization stack that drives a categorical
//! generator toward demographic balance.

pub mod labels;
pub mod metrics;
pub mod reward;
pub mod taxonomy;
pub mod grpo;
pub mod prompts;
pub mod freqview;
pub mod commands;
