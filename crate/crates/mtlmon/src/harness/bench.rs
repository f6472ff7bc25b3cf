//! Benchmark runner: wall-clock times of full log replays per policy,
//! event rate, and delay deviation, over several fresh seeds.

use super::gen::{generate_log, GenConfig, GenError};
use super::policies::Policy;
use super::run::{run_lines, RunFlags};
use super::wire::format_message;
use crate::formula::parse_formula;
use serde::Serialize;
use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub rate: u64,
    pub sigma: f64,
    pub reps: u32,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub events: u64,
    pub verdicts: u64,
}

#[derive(Debug)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<7} {:>6} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "policy", "rate", "sigma", "reps", "mean_s", "min_s", "max_s", "events", "verdicts"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<7} {:>6} {:>6.1} {:>5} {:>9.3} {:>9.3} {:>9.3} {:>9} {:>9}",
                r.policy, r.rate, r.sigma, r.reps, r.mean_s, r.min_s, r.max_s, r.events, r.verdicts
            )?;
        }
        Ok(())
    }
}

/// Replays freshly generated logs and reports wall-time statistics per
/// `(rate, sigma)` cell.
pub fn bench(
    policy: Policy,
    rates: &[u64],
    sigmas: &[f64],
    reps: u32,
    duration: u64,
    base_seed: u64,
) -> Result<BenchTable, GenError> {
    let mut rows = Vec::new();
    for &rate in rates {
        for &sigma in sigmas {
            let mut times = Vec::new();
            let mut events = 0u64;
            let mut verdicts = 0u64;
            for rep in 0..reps {
                let cfg = GenConfig {
                    duration,
                    sigma,
                    violations: (0, 3),
                    ..GenConfig::new(policy, rate, base_seed + rep as u64)
                };
                let log = generate_log(&cfg)?;
                let lines: Vec<String> =
                    log.iter().map(|r| format_message(&r.message)).collect();
                let formula = parse_formula(&policy.formula_text()).expect("bundled policy");
                let flags = RunFlags {
                    gc: true,
                    components: cfg.component_names(),
                    ..RunFlags::default()
                };
                let started = Instant::now();
                let summary =
                    run_lines(formula, lines, &flags, &mut std::io::sink()).expect("replay");
                times.push(started.elapsed().as_secs_f64());
                events += summary.events;
                verdicts += summary.verdicts;
            }
            let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
            let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = times.iter().cloned().fold(0.0f64, f64::max);
            rows.push(BenchRow {
                policy: policy.to_string(),
                rate,
                sigma,
                reps,
                mean_s: mean,
                min_s: if min.is_finite() { min } else { 0.0 },
                max_s: max,
                events,
                verdicts,
            });
        }
    }
    Ok(BenchTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rate_list_gives_empty_table() {
        let table = bench(Policy::P1, &[], &[0.0], 1, 5, 1).unwrap();
        assert!(table.rows.is_empty());
    }

    #[test]
    fn small_bench_produces_rows() {
        let table = bench(Policy::P1, &[5], &[0.0, 2.0], 2, 5, 1).unwrap();
        assert_eq!(table.rows.len(), 2);
        for r in &table.rows {
            assert!(r.min_s <= r.mean_s && r.mean_s <= r.max_s);
            assert!(r.events > 0);
        }
    }
}
