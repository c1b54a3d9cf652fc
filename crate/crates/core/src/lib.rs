//! Planning toolkit for distributed pipelined speculative decoding.
//!
//! Devices draft tokens locally with a small model; an edge server verifies
//! them in batches with the target model, pipelining batches across rounds.
//! The crate models round latency and verifier memory analytically, chooses
//! the batch count, user-to-batch assignment and per-user draft lengths that
//! maximize expected accepted tokens per second, compares against simpler
//! baselines, and checks the analytic model with a seeded round simulator.
//!
//! ```
//! use dipsd_core::{instance::default_instance, solver::{solve, SolverConfig}};
//!
//! let report = solve(&default_instance(6), &SolverConfig::default()).unwrap();
//! assert_eq!(report.best_batch_count, 2);
//! assert!((report.best_metrics.throughput_tps - 83.78).abs() < 0.01);
//! ```

pub mod baselines;
pub mod cost_model;
pub mod error;
pub mod instance;
pub mod montecarlo;
pub mod schedule;
pub mod solver;
pub mod sweep;

pub use error::{Error, Result};
