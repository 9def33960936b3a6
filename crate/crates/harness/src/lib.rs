//! Experiment harness for return-time statistics of planar billiards.

pub mod accept;
pub mod config;
pub mod experiment;
pub mod oracle;
pub mod report;
pub mod tables;
