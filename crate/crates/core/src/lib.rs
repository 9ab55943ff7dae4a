//! Simulator and explicit-state checker for a NIC that delivers RPCs straight
//! into CPU cache lines and steers them with a mirror of kernel scheduling
//! state, alongside a conventional DMA/interrupt NIC for comparison.

pub mod datapath;
pub mod machine;
pub mod model;
pub mod protocol;
pub mod scheduler;
pub mod baseline;
pub mod metrics;
pub mod sim;
pub mod trace;
pub mod workload;
pub mod checker;
pub mod config;
pub mod experiment;
