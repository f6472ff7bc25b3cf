//! Replay of message streams through the monitor, from log files or a UDP
//! socket, with a streamed verdict output and an end-of-input summary.

use super::wire::parse_message;
use crate::formula::Formula;
use crate::monitor::{Monitor, MonitorConfig, MonitorError};
use crate::trace::Value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::net::UdpSocket;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Monitor(#[from] MonitorError),
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RunFlags {
    /// Abort on malformed lines and rejected messages instead of skipping.
    pub strict: bool,
    /// Collect resolved nodes after every step.
    pub gc: bool,
    /// Dump the node store after every step.
    pub debug_state: bool,
    /// Check state coherence after every step.
    pub debug_coherence: bool,
    /// Declared components; inferred from the input when empty.
    pub components: Vec<String>,
    /// Drop each message independently with this probability.
    pub drop: f64,
    pub drop_seed: u64,
}

impl Default for RunFlags {
    fn default() -> Self {
        RunFlags {
            strict: false,
            gc: false,
            debug_state: false,
            debug_coherence: false,
            components: Vec::new(),
            drop: 0.0,
            drop_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub events: u64,
    pub skipped: u64,
    pub dropped: u64,
    pub verdicts: u64,
    pub wall: Duration,
    pub peak_nodes: usize,
}

impl RunSummary {
    pub fn render(&self) -> String {
        format!(
            "summary events={} skipped={} dropped={} verdicts={} wall_s={:.3} peak_nodes={}",
            self.events,
            self.skipped,
            self.dropped,
            self.verdicts,
            self.wall.as_secs_f64(),
            self.peak_nodes
        )
    }
}

/// Replays wire-format lines through a fresh monitor, writing one line per
/// verdict to `out`. Empty lines and `#` comments are ignored.
pub fn run_lines<I>(formula: Formula, lines: I, flags: &RunFlags, out: &mut impl Write) -> Result<RunSummary, RunError>
where
    I: IntoIterator<Item = String>,
{
    let regs = formula.registers();
    let mut components = flags.components.clone();
    let lines: Vec<String> = lines.into_iter().collect();
    if components.is_empty() {
        let mut seen = std::collections::BTreeSet::new();
        for line in &lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(comp) = line.split('|').next() {
                seen.insert(comp.trim().to_string());
            }
        }
        components = seen.into_iter().collect();
    }
    let mut cfg = MonitorConfig::new(components);
    cfg.gc = flags.gc;
    cfg.check_coherence = flags.debug_coherence;
    let mut monitor = Monitor::new(formula, cfg)?;

    let mut drop_rng = ChaCha8Rng::seed_from_u64(flags.drop_seed);
    let started = Instant::now();
    let mut summary = RunSummary {
        events: 0,
        skipped: 0,
        dropped: 0,
        verdicts: 0,
        wall: Duration::ZERO,
        peak_nodes: 0,
    };
    for (lineno, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if flags.drop > 0.0 && drop_rng.gen_bool(flags.drop.clamp(0.0, 1.0)) {
            summary.dropped += 1;
            continue;
        }
        let mut msg = match parse_message(line) {
            Ok(m) => m,
            Err(e) => {
                if flags.strict {
                    return Err(RunError::BadLine { line: lineno + 1, msg: e.to_string() });
                }
                summary.skipped += 1;
                continue;
            }
        };
        // Unlisted monitored registers default to the integer 0.
        for r in &regs {
            msg.regs.entry(r.clone()).or_insert(Value::Int(0));
        }
        match monitor.step(&msg) {
            Ok(verdicts) => {
                summary.events += 1;
                for v in verdicts {
                    summary.verdicts += 1;
                    writeln!(out, "{v}")?;
                }
            }
            Err(e) => {
                if flags.strict {
                    return Err(RunError::BadLine { line: lineno + 1, msg: e.to_string() });
                }
                summary.skipped += 1;
            }
        }
        if flags.debug_state {
            writeln!(out, "# state after iteration {}", monitor.iteration())?;
            for l in monitor.debug_dump().lines() {
                writeln!(out, "# {l}")?;
            }
        }
    }
    summary.wall = started.elapsed();
    summary.peak_nodes = monitor.peak_node_count();
    Ok(summary)
}

/// Receives wire-format datagrams on `127.0.0.1:port` until an empty
/// datagram arrives, then replays them like a file.
///
/// Each datagram may carry several newline-separated messages. Delivery
/// order is the datagram arrival order.
pub fn run_udp(formula: Formula, port: u16, flags: &RunFlags, out: &mut impl Write) -> Result<RunSummary, RunError> {
    let socket = UdpSocket::bind(("127.0.0.1", port))?;
    let mut buf = vec![0u8; 65536];
    let mut lines = Vec::new();
    loop {
        let (n, _) = socket.recv_from(&mut buf)?;
        if n == 0 {
            break;
        }
        let text = String::from_utf8_lossy(&buf[..n]);
        lines.extend(text.lines().map(|l| l.to_string()));
    }
    run_lines(formula, lines, flags, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    fn p_log() -> Vec<String> {
        vec![
            "# a comment".to_string(),
            "c|1|1.0|p()|".to_string(),
            String::new(),
            "c|2|2.0||".to_string(),
        ]
    }

    #[test]
    fn file_replay_produces_verdicts() {
        let f = parse_formula("G p()").unwrap();
        let mut out = Vec::new();
        let summary = run_lines(f, p_log(), &RunFlags::default(), &mut out).unwrap();
        assert_eq!(summary.events, 2);
        assert_eq!(summary.skipped, 0);
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("verdict ts=1 value=false"), "{text}");
        assert!(text.contains("verdict ts=2 value=false"), "{text}");
        assert_eq!(summary.verdicts, 2);
    }

    #[test]
    fn malformed_lines_skip_or_fail() {
        let f = parse_formula("G p()").unwrap();
        let mut lines = p_log();
        lines.insert(1, "garbage".to_string());
        let mut out = Vec::new();
        let lax = run_lines(f.clone(), lines.clone(), &RunFlags::default(), &mut out).unwrap();
        assert_eq!(lax.skipped, 1);
        let strict = RunFlags { strict: true, ..RunFlags::default() };
        let err = run_lines(f, lines, &strict, &mut Vec::new()).unwrap_err();
        assert!(matches!(err, RunError::BadLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn udp_replay_matches_file_replay() {
        let f = parse_formula("G p()").unwrap();
        let mut file_out = Vec::new();
        run_lines(f.clone(), p_log(), &RunFlags::default(), &mut file_out).unwrap();

        let port = 46253;
        let flags = RunFlags { components: vec!["c".into()], ..RunFlags::default() };
        let handle = std::thread::spawn(move || {
            let mut udp_out = Vec::new();
            let summary = run_udp(f, port, &flags, &mut udp_out).unwrap();
            (udp_out, summary)
        });
        std::thread::sleep(std::time::Duration::from_millis(100));
        let sender = UdpSocket::bind("127.0.0.1:0").unwrap();
        for line in p_log() {
            if line.trim().is_empty() {
                continue;
            }
            sender.send_to(line.as_bytes(), ("127.0.0.1", port)).unwrap();
        }
        sender.send_to(&[], ("127.0.0.1", port)).unwrap();
        let (udp_out, summary) = handle.join().unwrap();
        assert_eq!(summary.events, 2);
        assert_eq!(udp_out, file_out);
    }

    #[test]
    fn dropped_messages_leave_gaps_but_stream_continues() {
        let f = parse_formula("G p()").unwrap();
        let lines: Vec<String> = (1..=20)
            .map(|i| format!("c|{i}|{i}.0|p()|"))
            .collect();
        let flags = RunFlags { drop: 0.5, drop_seed: 9, ..RunFlags::default() };
        let mut out = Vec::new();
        let summary = run_lines(f, lines, &flags, &mut out).unwrap();
        assert!(summary.dropped > 0);
        assert_eq!(summary.events + summary.dropped, 20);
    }
}
