//! Command-line interface: online monitoring of logs or UDP streams,
//! synthetic log generation, one-shot reference evaluation, differential
//! testing, and benchmarking.

use clap::{Parser, Subcommand};
use mtlmon::formula::parse_formula;
use mtlmon::harness::{
    bench, difftest, format_message, generate_log, run_lines, run_udp, DiffConfig, GenConfig,
    Policy, RunFlags,
};
use mtlmon::oracle::{eval_at_time, Valuation};
use mtlmon::trace::rat_from_decimal;
use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mtlmon", version, about = "Out-of-order runtime verification for metric temporal logic with freeze quantifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monitor a message stream from a log file or a UDP socket.
    Monitor {
        /// Formula file ('#' comments allowed).
        #[arg(long)]
        formula: PathBuf,
        /// Log file in the wire format, replayed in line order.
        #[arg(long, conflicts_with = "udp")]
        log: Option<PathBuf>,
        /// UDP port on 127.0.0.1; an empty datagram ends the stream.
        #[arg(long)]
        udp: Option<u16>,
        /// Abort on malformed or rejected messages instead of skipping.
        #[arg(long)]
        strict: bool,
        /// Collect resolved nodes after every step.
        #[arg(long)]
        gc: bool,
        /// Dump the node store after every step.
        #[arg(long)]
        debug_state: bool,
        /// Check state coherence after every step (slow).
        #[arg(long)]
        debug_coherence: bool,
        /// Declared components (comma-separated). Inferred from the log
        /// when omitted; required for UDP sources.
        #[arg(long, value_delimiter = ',')]
        components: Vec<String>,
        /// Drop each message independently with this probability.
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
        /// Seed for the drop decision.
        #[arg(long, default_value_t = 0)]
        drop_seed: u64,
        /// Reject open formulas (monitoring requires closed ones anyway).
        #[arg(long)]
        require_closed: bool,
    },
    /// Generate a synthetic log for a bundled policy.
    Gen {
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        rate: u64,
        #[arg(long, default_value_t = 60)]
        duration: u64,
        /// Delay standard deviation in time units.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Mean delay in time units.
        #[arg(long, default_value_t = 10.0)]
        mean: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inclusive violation range, e.g. 1:3.
        #[arg(long, default_value = "0:3")]
        violations: String,
        #[arg(long, default_value_t = 3)]
        components: u64,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a formula on the observation induced by a full log.
    Oracle {
        #[arg(long)]
        formula: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Timestamp to evaluate at (decimal literal).
        #[arg(long)]
        at: String,
        #[arg(long)]
        require_closed: bool,
    },
    /// Differential test of the monitor against the reference evaluator.
    Difftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        cases: u64,
        /// Skip the per-step coherence assertion.
        #[arg(long)]
        no_coherence: bool,
    },
    /// Benchmark replay times over generated logs.
    Bench {
        #[arg(long)]
        policy: Policy,
        #[arg(long, value_delimiter = ',')]
        rates: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        reps: u32,
        #[arg(long, default_value_t = 60)]
        duration: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the rows as JSON lines to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn load_formula(path: &PathBuf, require_closed: bool) -> Result<mtlmon::formula::Formula, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let f = parse_formula(&text).map_err(|e| e.to_string())?;
    if require_closed && !f.is_closed() {
        return Err("formula has unbound variables".into());
    }
    Ok(f)
}

fn parse_violations(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s.split_once(':').ok_or("violations must be LO:HI")?;
    let lo = lo.parse().map_err(|_| "bad violation lower bound")?;
    let hi = hi.parse().map_err(|_| "bad violation upper bound")?;
    Ok((lo, hi))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match cli.command {
        Command::Monitor {
            formula,
            log,
            udp,
            strict,
            gc,
            debug_state,
            debug_coherence,
            components,
            drop,
            drop_seed,
            require_closed,
        } => {
            let f = load_formula(&formula, require_closed)?;
            let flags = RunFlags {
                strict,
                gc,
                debug_state,
                debug_coherence,
                components: components.clone(),
                drop,
                drop_seed,
            };
            let mut out = stdout.lock();
            let summary = match (log, udp) {
                (Some(path), None) => {
                    let file = fs::File::open(&path)
                        .map_err(|e| format!("cannot open {}: {e}", path.display()))?;
                    let lines: Vec<String> = std::io::BufReader::new(file)
                        .lines()
                        .collect::<Result<_, _>>()
                        .map_err(|e| e.to_string())?;
                    run_lines(f, lines, &flags, &mut out).map_err(|e| e.to_string())?
                }
                (None, Some(port)) => {
                    if flags.components.is_empty() {
                        return Err("--components is required with --udp".into());
                    }
                    run_udp(f, port, &flags, &mut out).map_err(|e| e.to_string())?
                }
                _ => return Err("exactly one of --log or --udp is required".into()),
            };
            writeln!(out, "{}", summary.render()).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { policy, rate, duration, sigma, mean, seed, violations, components, output } => {
            let violations = parse_violations(&violations)?;
            let cfg = GenConfig {
                policy,
                rate,
                duration,
                sigma,
                mean_delay: mean,
                seed,
                violations,
                components,
            };
            let log = generate_log(&cfg).map_err(|e| e.to_string())?;
            let mut body = String::new();
            for r in &log {
                body.push_str(&format_message(&r.message));
                body.push('\n');
            }
            match output {
                Some(path) => fs::write(&path, body)
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?,
                None => print!("{body}"),
            }
            eprintln!("generated {} events for {policy}", log.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { formula, log, at, require_closed } => {
            let f = load_formula(&formula, require_closed)?;
            let tau = rat_from_decimal(at.trim()).ok_or("bad --at timestamp")?;
            let text = fs::read_to_string(&log).map_err(|e| format!("cannot read {}: {e}", log.display()))?;
            let mut messages = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let m = mtlmon::harness::parse_message(line)
                    .map_err(|e| format!("line {}: {e}", i + 1))?;
                messages.push(m);
            }
            let comps: Vec<String> = messages
                .iter()
                .map(|m| m.comp.clone())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let obs = mtlmon::harness::difftest::independent_observation(&messages, &f, &comps);
            let v = eval_at_time(&obs, &tau, &Valuation::new(), &f);
            println!("{v}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Difftest { seed, cases, no_coherence } => {
            let cfg = DiffConfig { seed, cases, check_coherence: !no_coherence };
            let report = difftest(&cfg);
            print!("{report}");
            if report.ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Bench { policy, rates, sigmas, reps, duration, seed, json } => {
            let table = bench(policy, &rates, &sigmas, reps, duration, seed)
                .map_err(|e| e.to_string())?;
            print!("{table}");
            if let Some(path) = json {
                let mut body = String::new();
                for row in &table.rows {
                    body.push_str(&serde_json::to_string(row).map_err(|e| e.to_string())?);
                    body.push('\n');
                }
                fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
