//! Operational tooling around the monitor: the wire format, bundled
//! compliance policies, the synthetic log generator with its delay model,
//! the log/UDP replay runner, the differential tester, and the benchmark
//! runner.

pub mod bench;
pub mod difftest;
pub mod gen;
pub mod policies;
pub mod run;
pub mod wire;

pub use bench::{bench, BenchRow};
pub use difftest::{difftest, DiffConfig, DiffFailure, DiffReport};
pub use gen::{generate_log, reorder, GenConfig, GenError, LogRecord};
pub use policies::Policy;
pub use run::{run_lines, run_udp, RunError, RunFlags, RunSummary};
pub use wire::{format_message, parse_message, WireError};
