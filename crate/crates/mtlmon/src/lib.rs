//! Out-of-order runtime verification for metric temporal logic with
//! freeze quantifiers.
//!
//! The engine ingests timestamped event messages that may arrive delayed or
//! be lost, maintains an incremental graph of propositional formulas over
//! the observed timeline, and emits Boolean verdicts that are sound and
//! observationally complete with respect to a three-valued semantics.
//!
//! Crate layout:
//! - [`trace`]: truth values, exact rational intervals, observations.
//! - [`formula`]: surface grammar, parser, desugaring, occurrence tree.
//! - [`oracle`]: reference (non-incremental) evaluator of the semantics.
//! - [`propcalc`]: the propositional calculus the monitor state is made of.
//! - [`monitor`]: the incremental online monitor.
//! - [`harness`]: wire format, log generator, delay model, differential
//!   tester, and benchmark runner behind the `mtlmon` CLI.

pub mod formula;
pub mod harness;
pub mod monitor;
pub mod oracle;
pub mod propcalc;
pub mod trace;
