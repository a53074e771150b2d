//! Command-line harness: configuration, training runs, checkpoints,
//! verification suites and the decode-scaling benchmark.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod run;
pub mod verify;

pub use bench::{run_bench, BenchReport};
pub use checkpoint::{load_checkpoint, load_policy, save_checkpoint};
pub use config::{BenchConfig, EnvConfig, Fault, RunConfig};
pub use error::{HarnessError, Result};
pub use metrics::{BenchRow, MetricsRow};
pub use run::{run_eval, run_train, EvalOutcome, TrainOutcome};
pub use verify::{run_verify, CheckResult, VerifyReport};
