pub mod dpm;
pub mod error;
pub mod estimators;
pub mod logdata;
pub mod metrics;
pub mod parametric;
pub mod rng;
pub mod simulator;
pub mod pipeline;
