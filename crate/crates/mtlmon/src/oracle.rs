//! Reference evaluator of the three-valued semantics on observations.
//!
//! This is a direct transcription of the inductive definition, with no
//! incremental state; it serves as the ground truth the monitor is tested
//! against. Exponential behavior on large inputs is accepted; the evaluator
//! is meant for desk-scale observations.

use crate::formula::{Formula, FormulaKind, NodeId};
use crate::trace::{Interval, Observation, Rat, Tv3, Value};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// A partial assignment of data values to variables.
pub type Valuation = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("position {0} out of range for an observation of length {1}")]
    PositionOutOfRange(usize, usize),
}

/// `True` when position `j` is a time point, `Unknown` otherwise (never
/// `False`: a refinement may still place a time point inside the interval).
pub fn tp(w: &Observation, j: usize) -> Result<Tv3, OracleError> {
    let letter = w
        .letters()
        .get(j)
        .ok_or(OracleError::PositionOutOfRange(j, w.len()))?;
    Ok(if letter.interval.is_singleton() { Tv3::True } else { Tv3::Unknown })
}

/// Whether the metric constraint `cons` certainly holds (or certainly
/// fails) between positions `i` and `j`: the set of nonnegative differences
/// `I_i - I_j` is tested against `cons` by endpoint arithmetic.
pub fn tc(w: &Observation, cons: &Interval, i: usize, j: usize) -> Result<Tv3, OracleError> {
    let n = w.len();
    let li = w.letters().get(i).ok_or(OracleError::PositionOutOfRange(i, n))?;
    let lj = w.letters().get(j).ok_or(OracleError::PositionOutOfRange(j, n))?;
    Ok(tc_intervals(cons, &li.interval, &lj.interval))
}

/// Interval-level version of [`tc`]: differences of `future` minus `anchor`.
pub fn tc_intervals(cons: &Interval, future: &Interval, anchor: &Interval) -> Tv3 {
    match future.diff(anchor) {
        None => Tv3::False,
        Some(d) => {
            if d.is_subset_of(cons) {
                Tv3::True
            } else if !d.intersects(cons) {
                Tv3::False
            } else {
                Tv3::Unknown
            }
        }
    }
}

/// Memoizing evaluator for one formula. Reusable across positions and
/// valuations of the same observation.
pub struct Evaluator<'a> {
    formula: &'a Formula,
    w: &'a Observation,
    memo: HashMap<(NodeId, usize, Vec<(String, Value)>), Tv3>,
}

impl<'a> Evaluator<'a> {
    pub fn new(formula: &'a Formula, w: &'a Observation) -> Self {
        Evaluator { formula, w, memo: HashMap::new() }
    }

    pub fn eval(&mut self, pos: usize, nu: &Valuation, node: NodeId) -> Result<Tv3, OracleError> {
        if pos >= self.w.len() {
            return Err(OracleError::PositionOutOfRange(pos, self.w.len()));
        }
        Ok(self.eval_inner(pos, nu, node))
    }

    fn memo_key(&self, node: NodeId, pos: usize, nu: &Valuation) -> (NodeId, usize, Vec<(String, Value)>) {
        let free = self.formula.free_vars(node);
        let restricted: Vec<(String, Value)> = nu
            .iter()
            .filter(|(k, _)| free.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        (node, pos, restricted)
    }

    fn eval_inner(&mut self, pos: usize, nu: &Valuation, node: NodeId) -> Tv3 {
        let key = self.memo_key(node, pos, nu);
        if let Some(v) = self.memo.get(&key) {
            return *v;
        }
        let result = match self.formula.kind(node).clone() {
            FormulaKind::True => Tv3::True,
            FormulaKind::Pred { name, args } => {
                let letter = &self.w.letters()[pos];
                let tuple: Option<Vec<Value>> =
                    args.iter().map(|t| t.value(|x| nu.get(x).cloned())).collect();
                match (tuple, letter.sigma.get(&name)) {
                    (Some(tuple), Some(rel)) => Tv3::from_bool(rel.contains(&tuple)),
                    _ => Tv3::Unknown,
                }
            }
            FormulaKind::Cmp { left, op, right } => {
                let l = left.value(|x| nu.get(x).cloned());
                let r = right.value(|x| nu.get(x).cloned());
                match (l, r) {
                    (Some(l), Some(r)) => Tv3::from_bool(op.eval(&l, &r)),
                    _ => Tv3::Unknown,
                }
            }
            FormulaKind::Freeze { reg, var, body } => {
                let mut inner = nu.clone();
                match self.w.letters()[pos].rho.get(&reg) {
                    Some(v) => {
                        inner.insert(var.clone(), v.clone());
                    }
                    None => {
                        inner.remove(&var);
                    }
                }
                self.eval_inner(pos, &inner, body)
            }
            FormulaKind::Not(a) => self.eval_inner(pos, nu, a).not(),
            FormulaKind::Or(a, b) => {
                // True absorbs in every row of the disjunction table.
                let l = self.eval_inner(pos, nu, a);
                if l == Tv3::True {
                    Tv3::True
                } else {
                    l.or(self.eval_inner(pos, nu, b))
                }
            }
            FormulaKind::Until { interval, left, right } => {
                self.eval_until(pos, nu, &interval, left, right)
            }
        };
        self.memo.insert(key, result);
        result
    }

    /// Finite disjunction over candidate future positions `j >= i`:
    /// `tp(j) and tc(j, i) and right(j) and (tp(k) implies left(k))` for all
    /// `i <= k < j`. Iteration stops once the running left-chain is false or
    /// the metric constraint can no longer be met.
    fn eval_until(&mut self, i: usize, nu: &Valuation, cons: &Interval, left: NodeId, right: NodeId) -> Tv3 {
        let mut acc = Tv3::False;
        let mut chain = Tv3::True;
        for j in i..self.w.len() {
            let tcv = tc_intervals(
                cons,
                &self.w.letters()[j].interval,
                &self.w.letters()[i].interval,
            );
            if tcv == Tv3::False {
                let diff = self.w.letters()[j].interval.diff(&self.w.letters()[i].interval);
                let past_window = match diff {
                    Some(d) => d.entirely_above(cons),
                    None => false,
                };
                if past_window {
                    break;
                }
            } else {
                let tpv = tp(self.w, j).expect("position in range");
                let disjunct = tpv
                    .and(tcv)
                    .and(self.eval_inner(j, nu, right))
                    .and(chain);
                acc = acc.or(disjunct);
                if acc == Tv3::True {
                    return Tv3::True;
                }
            }
            let tpv = tp(self.w, j).expect("position in range");
            chain = chain.and(tpv.implies(self.eval_inner(j, nu, left)));
            if chain == Tv3::False {
                break;
            }
        }
        acc
    }
}

/// One-shot evaluation at a position.
pub fn eval(w: &Observation, pos: usize, nu: &Valuation, f: &Formula, node: NodeId) -> Result<Tv3, OracleError> {
    Evaluator::new(f, w).eval(pos, nu, node)
}

/// Time-anchored evaluation: the value at the time point with timestamp
/// `tau`, or `Unknown` when no such time point exists. Boolean values are
/// only ever reported at time points.
pub fn eval_at_time(w: &Observation, tau: &Rat, nu: &Valuation, f: &Formula) -> Tv3 {
    match w.timestamp_position(tau) {
        Some(pos) => eval(w, pos, nu, f, f.root()).expect("position exists"),
        None => Tv3::Unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;
    use crate::trace::{rat, Rho, Sigma};
    use std::collections::BTreeSet;

    fn iv(lo: i64, lo_open: bool, hi: Option<i64>, hi_open: bool) -> Interval {
        Interval::new(rat(lo, 1), lo_open, hi.map(|h| rat(h, 1)), hi_open).unwrap()
    }

    fn sigma1(pred: &str, tuples: &[Vec<Value>]) -> Sigma {
        let mut s = Sigma::new();
        s.insert(pred.into(), tuples.iter().cloned().collect());
        s
    }

    #[test]
    fn tp_values() {
        let w = Observation::initial().t1_split(0, &rat(3, 1)).unwrap();
        assert_eq!(tp(&w, 1).unwrap(), Tv3::True);
        assert_eq!(tp(&w, 2).unwrap(), Tv3::Unknown);
        assert!(tp(&w, 3).is_err());
    }

    #[test]
    fn tc_golden_cases() {
        let cons = iv(0, false, Some(3), false);
        let w = Observation::initial()
            .t1_split(0, &rat(1, 1))
            .unwrap()
            .t1_split(2, &rat(3, 1))
            .unwrap();
        // positions: [0,1) {1} (1,3) {3} (3,inf)
        assert_eq!(tc(&w, &cons, 3, 1).unwrap(), Tv3::True, "3-1=2 inside [0,3]");
        assert_eq!(tc(&w, &cons, 4, 3).unwrap(), Tv3::Unknown, "(0,inf) straddles [0,3]");
        assert_eq!(tc(&w, &cons, 1, 3).unwrap(), Tv3::False, "negative differences only");
    }

    /// Set-enumeration oracle for tc on denominator-bounded rationals.
    #[test]
    fn tc_matches_enumeration() {
        let grid: Vec<Rat> = (0..=12).map(|n| rat(n, 2)).collect();
        let mut intervals = vec![Interval::zero_to_inf()];
        for lo in 0..=6 {
            for hi in lo..=6 {
                for lo_open in [false, true] {
                    for hi_open in [false, true] {
                        if let Ok(i) =
                            Interval::new(rat(lo, 1), lo_open, Some(rat(hi, 1)), hi_open)
                        {
                            intervals.push(i);
                        }
                    }
                }
            }
        }
        let fine: Vec<Rat> = (0..=48).map(|n| rat(n, 8)).collect();
        for cons in intervals.iter().step_by(3) {
            for fut in intervals.iter().step_by(5) {
                for anchor in intervals.iter().step_by(7) {
                    let got = tc_intervals(cons, fut, anchor);
                    let mut any_in = false;
                    let mut any_out = false;
                    for x in &fine {
                        if !fut.contains(x) {
                            continue;
                        }
                        for y in &grid {
                            if !anchor.contains(y) {
                                continue;
                            }
                            let d = x - y;
                            if d < rat(0, 1) {
                                // Negative differences are excluded from the set.
                                continue;
                            }
                            if cons.contains(&d) {
                                any_in = true;
                            } else {
                                any_out = true;
                            }
                        }
                    }
                    // The sampled grid only approximates the full sets, so
                    // check one-sided implications of the exact answer.
                    match got {
                        Tv3::True => {
                            assert!(!any_out, "T but difference outside: {cons} {fut} {anchor}")
                        }
                        Tv3::False => assert!(!any_in, "F but difference inside: {cons} {fut} {anchor}"),
                        Tv3::Unknown => {}
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_on_initial_observation() {
        // A shape that is Boolean-false in classical logic stays unknown
        // while nothing has been observed.
        let f = parse_formula("G (p() & F[0,inf) !p())").unwrap();
        let w = Observation::initial();
        assert_eq!(eval(&w, 0, &Valuation::new(), &f, f.root()).unwrap(), Tv3::Unknown);
    }

    #[test]
    fn unbound_variable_is_unknown() {
        let f = parse_formula("p(x)").unwrap();
        let w = Observation::initial()
            .t1_split(0, &rat(1, 1))
            .unwrap()
            .t3_refine(1, sigma1("p", &[vec![Value::Int(5)]]), Rho::new())
            .unwrap();
        assert_eq!(eval(&w, 1, &Valuation::new(), &f, f.root()).unwrap(), Tv3::Unknown);
        let mut nu = Valuation::new();
        nu.insert("x".into(), Value::Int(5));
        assert_eq!(eval(&w, 1, &nu, &f, f.root()).unwrap(), Tv3::True);
        nu.insert("x".into(), Value::Int(6));
        assert_eq!(eval(&w, 1, &nu, &f, f.root()).unwrap(), Tv3::False);
    }

    fn example_w1() -> Observation {
        let mut rho = Rho::new();
        rho.insert("cid".into(), Value::Str("Alice".into()));
        rho.insert("tid".into(), Value::Int(42));
        rho.insert("sum".into(), Value::Int(99));
        Observation::initial()
            .t1_split(0, &rat(3, 1))
            .unwrap()
            .t3_refine(
                1,
                sigma1("trans", &[vec![Value::Str("Alice".into()), Value::Int(42), Value::Int(99)]]),
                rho,
            )
            .unwrap()
    }

    #[test]
    fn frozen_transaction_atom_is_true_at_its_time() {
        let f = parse_formula(
            "freeze cid as c . freeze tid as t . freeze sum as a . trans(c,t,a)",
        )
        .unwrap();
        let w = example_w1();
        assert_eq!(eval_at_time(&w, &rat(3, 1), &Valuation::new(), &f), Tv3::True);
        // No time point at 2.0.
        assert_eq!(eval_at_time(&w, &rat(2, 1), &Valuation::new(), &f), Tv3::Unknown);
    }

    #[test]
    fn eval_at_time_true_is_true_at_time_points() {
        let f = parse_formula("true").unwrap();
        let w = example_w1();
        assert_eq!(eval_at_time(&w, &rat(3, 1), &Valuation::new(), &f), Tv3::True);
    }

    /// The future of the transaction policy is unknown right after the
    /// triggering event.
    #[test]
    fn p2_unknown_on_partial_knowledge() {
        let f = parse_formula(
            "freeze cid as c . freeze tid as t . freeze sum as a . \
             (trans(c,t,a) & a > 2000 -> G(0,3] (freeze tid as t2 . freeze sum as a2 . \
             (trans(c,t2,a2) -> a2 <= 2000)))",
        )
        .unwrap();
        let mut rho = Rho::new();
        rho.insert("cid".into(), Value::Str("Alice".into()));
        rho.insert("tid".into(), Value::Int(42));
        rho.insert("sum".into(), Value::Int(2500));
        let w = Observation::initial()
            .t1_split(0, &rat(3, 1))
            .unwrap()
            .t3_refine(
                1,
                sigma1("trans", &[vec![Value::Str("Alice".into()), Value::Int(42), Value::Int(2500)]]),
                rho,
            )
            .unwrap();
        assert_eq!(eval(&w, 1, &Valuation::new(), &f, f.root()).unwrap(), Tv3::Unknown);
    }

    #[test]
    fn freeze_clause_matches_explicit_update() {
        let f = parse_formula("freeze r as x . p(x)").unwrap();
        let body = parse_formula("p(x)").unwrap();
        let mut rho = Rho::new();
        rho.insert("r".into(), Value::Int(1));
        let w = Observation::initial()
            .t1_split(0, &rat(2, 1))
            .unwrap()
            .t3_refine(1, sigma1("p", &[vec![Value::Int(1)]]), rho)
            .unwrap();
        // Bound by the freeze.
        let lhs = eval(&w, 1, &Valuation::new(), &f, f.root()).unwrap();
        let mut nu = Valuation::new();
        nu.insert("x".into(), Value::Int(1));
        let rhs = eval(&w, 1, &nu, &body, body.root()).unwrap();
        assert_eq!(lhs, rhs);
        assert_eq!(lhs, Tv3::True);

        // Register undefined at the time point: the variable is unbound even
        // if the outer valuation had defined it.
        let w2 = Observation::initial()
            .t1_split(0, &rat(2, 1))
            .unwrap()
            .t3_refine(1, sigma1("p", &[vec![Value::Int(1)]]), Rho::new())
            .unwrap();
        let mut outer = Valuation::new();
        outer.insert("x".into(), Value::Int(1));
        assert_eq!(eval(&w2, 1, &outer, &f, f.root()).unwrap(), Tv3::Unknown);
    }

    #[test]
    fn closed_formula_ignores_valuation() {
        use rand::{Rng, SeedableRng};
        let f = parse_formula("freeze r as x . F[0,2] p(x)").unwrap();
        let w = Observation::initial()
            .t1_split(0, &rat(1, 1))
            .unwrap()
            .t3_refine(1, sigma1("p", &[vec![Value::Int(1)]]), {
                let mut r = Rho::new();
                r.insert("r".into(), Value::Int(1));
                r
            })
            .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let base = eval(&w, 1, &Valuation::new(), &f, f.root()).unwrap();
        for _ in 0..20 {
            let mut nu = Valuation::new();
            for v in ["x", "y", "z"] {
                if rng.gen_bool(0.5) {
                    nu.insert(v.into(), Value::Int(rng.gen_range(0..3)));
                }
            }
            assert_eq!(eval(&w, 1, &nu, &f, f.root()).unwrap(), base);
        }
    }

    /// Random refinement chains never lose knowledge.
    #[test]
    fn monotone_along_refinement_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let formulas = [
            "G p()",
            "p() U[0,2] q()",
            "freeze r as x . F[0,2] p(x)",
            "G (p() -> F[0,1] q())",
            "!p() | q()",
        ];
        for round in 0..60 {
            let f = parse_formula(formulas[round % formulas.len()]).unwrap();
            let mut chain = vec![Observation::initial()];
            for _ in 0..6 {
                let w = chain.last().unwrap().clone();
                let step = match rng.gen_range(0..3) {
                    0 => w.t1_split(rng.gen_range(0..w.len()), &rat(rng.gen_range(0..24), 4)).ok(),
                    1 => w.t2_remove(rng.gen_range(0..w.len())).ok(),
                    _ => {
                        let pos = rng.gen_range(0..w.len());
                        let mut sigma = Sigma::new();
                        for p in ["p", "q"] {
                            if rng.gen_bool(0.7) {
                                let tuples: BTreeSet<Vec<Value>> = if rng.gen_bool(0.5) {
                                    [vec![]].into_iter().collect()
                                } else {
                                    BTreeSet::new()
                                };
                                sigma.insert(p.into(), tuples);
                            }
                        }
                        let mut rho = Rho::new();
                        if rng.gen_bool(0.5) {
                            rho.insert("r".into(), Value::Int(rng.gen_range(0..2)));
                        }
                        w.t3_refine(pos, sigma, rho).ok()
                    }
                };
                if let Some(n) = step {
                    chain.push(n);
                }
            }
            let last = chain.last().unwrap().clone();
            let taus: Vec<Rat> = last.time_points().map(|(_, t)| t.clone()).collect();
            let arities = f.predicates();
            let _ = arities;
            let mut mu = Valuation::new();
            let mut nu = Valuation::new();
            nu.insert("x".into(), Value::Int(0));
            if rng.gen_bool(0.5) {
                mu = nu.clone();
            }
            for tau in &taus {
                for i in 0..chain.len() {
                    for j in i..chain.len() {
                        let a = eval_at_time(&chain[i], tau, &mu, &f);
                        let b = eval_at_time(&chain[j], tau, &nu, &f);
                        assert!(
                            a.knowledge_leq(b),
                            "monotonicity broken: {a:?} -> {b:?} at {tau} (round {round})"
                        );
                    }
                }
            }
        }
    }
}
