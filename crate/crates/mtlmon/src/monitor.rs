//! The incremental online monitor.
//!
//! State is a graph of nodes `(subformula occurrence, interval, valuation)`,
//! each storing a propositional formula over indexed atoms. A message
//! splits the interval containing its timestamp, rewrites the stored
//! formulas to the refined interval structure, propagates frozen data
//! values down the syntax tree by copying nodes, and propagates Boolean
//! values up through bidirectional triggers. When a root node over a
//! singleton interval simplifies to a Boolean, a verdict is emitted.
//!
//! Intervals proven free of future events are detected from per-component
//! sequence numbers and removed together with their nodes.
//!
//! For untils whose left operand is the constant true (the shape every
//! eventually/always expansion produces), the ever-moving disjunct over the
//! unbounded tail is kept as a single suffix atom instead of being
//! rewritten on every split; a registry routes child resolutions to the
//! formulas that hold such an atom. The logical content is unchanged:
//! accessors and the coherence check expand the atom to the disjunction it
//! stands for.

use crate::formula::{Formula, FormulaKind, NodeId};
use crate::oracle::{self, Valuation};
use crate::propcalc::{
    equiv, pf_and, pf_atom, pf_not, pf_or, Atom, PropFormula, Substitution, FALSE, TRUE,
};
use crate::trace::{Interval, Letter, Message, Observation, Rat, Rho, Sigma, Tv3, Value};
use indexmap::{IndexMap, IndexSet};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::Bound;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("monitored formula must be closed")]
    OpenFormula,
    #[error("monitored formula must not be atomic")]
    AtomicFormula,
    #[error("message from undeclared component '{0}'")]
    UnknownComponent(String),
    #[error("component '{comp}' resent sequence number {seq} with different content")]
    DuplicateSequence { comp: String, seq: u64 },
    #[error("timestamp of ({comp},{seq}) breaks per-component monotonicity")]
    TimestampRegression { comp: String, seq: u64 },
    #[error("timestamp {0} is already a time point of another message")]
    TimestampCollision(String),
    #[error("timestamp {0} falls in a region already proven complete")]
    LateMessage(String),
    #[error("state coherence check failed:\n{0}")]
    CoherenceFailure(String),
}

/// Monitor configuration. The full component set must be declared up
/// front: completeness detection is only sound if no unknown component can
/// still send messages.
#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub components: Vec<String>,
    /// Delete resolved-and-propagated singleton nodes after each step.
    pub gc: bool,
    /// Run the coherence assertion after each step (slow; debugging aid).
    pub check_coherence: bool,
}

impl MonitorConfig {
    pub fn new(components: Vec<String>) -> Self {
        MonitorConfig { components, gc: false, check_coherence: false }
    }
}

/// An output of the monitor: the formula has the Boolean value `value` at
/// the time point `ts` of the current observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub ts: Rat,
    pub value: bool,
    pub iteration: u64,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "verdict ts={} value={} iter={}",
            crate::trace::rat_to_decimal(&self.ts),
            self.value,
            self.iteration
        )
    }
}

/// Identifies one node of the monitor graph. The valuation is restricted
/// to the free variables of the subformula occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub node: NodeId,
    pub iv: Interval,
    pub val: Valuation,
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals: Vec<String> = self.val.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "({}, {}, {{{}}})", self.node, self.iv, vals.join(","))
    }
}

#[derive(Debug, Clone)]
struct NodeData {
    psi: PropFormula,
    /// Parents whose stored formula mentions one of this node's atoms.
    out_triggers: BTreeSet<NodeKey>,
    /// Children mentioned by this node's stored formula.
    in_triggers: BTreeSet<NodeKey>,
    /// Start of this node's suffix segment (tail position and whether that
    /// position itself belongs to the segment), when its formula holds a
    /// suffix atom.
    suffix_since: Option<(Rat, bool)>,
}

#[derive(Debug, Clone, Default)]
struct CompTracker {
    /// Received messages by sequence number: timestamp plus content
    /// fingerprint for duplicate detection.
    by_seq: BTreeMap<u64, (Rat, Sigma, Rho)>,
    /// The same messages keyed by timestamp (timestamps are strictly
    /// monotone in the sequence number).
    by_ts: BTreeMap<Rat, u64>,
}

impl CompTracker {
    fn insert(&mut self, seq: u64, ts: Rat, sigma: Sigma, rho: Rho) {
        self.by_ts.insert(ts.clone(), seq);
        self.by_seq.insert(seq, (ts, sigma, rho));
    }

    /// Could this component still deliver a message with a timestamp in
    /// `iv`? Unknown sequence numbers are confined to the open timestamp
    /// gaps between received neighbors.
    fn may_emit_in(&self, iv: &Interval) -> bool {
        // The received message at or just below the interval.
        let below = self
            .by_ts
            .range((Bound::Unbounded, Bound::Included(iv.lo().clone())))
            .next_back();
        match below {
            None => {
                // Everything below the first received timestamp: unreachable
                // only when that message is the very first one sent.
                match self.by_seq.iter().next() {
                    None => true,
                    Some((&first_seq, (first_ts, _, _))) => {
                        if first_seq != 1 {
                            return true;
                        }
                        // No emission strictly below first_ts; iv must fit.
                        match iv.hi() {
                            None => true,
                            Some(h) => h > first_ts || (h == first_ts && !iv.hi_open()),
                        }
                    }
                }
            }
            Some((ts_p, &seq_p)) => {
                if iv.contains(ts_p) {
                    return false; // a known timestamp inside: never queried, defensive
                }
                match self.by_seq.range(seq_p + 1..).next() {
                    None => true, // open tail after the last received message
                    Some((&seq_n, (ts_n, _, _))) => {
                        if seq_n != seq_p + 1 {
                            return true; // sequence gap: timestamps in (ts_p, ts_n) possible
                        }
                        // Adjacent sequence numbers bracket (ts_p, ts_n):
                        // iv must not reach past ts_n.
                        match iv.hi() {
                            None => true,
                            Some(h) => h > ts_n || (h == ts_n && !iv.hi_open()),
                        }
                    }
                }
            }
        }
    }
}

/// Per-step coherence report; failures carry a rendered explanation.
#[derive(Debug, Default)]
pub struct CoherenceReport {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl CoherenceReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct Monitor {
    formula: Formula,
    cfg: MonitorConfig,
    /// Intervals of the current observation, ordered.
    intervals: BTreeSet<Interval>,
    /// Bounded non-singleton intervals (candidates for completion).
    gaps: BTreeSet<Interval>,
    /// The unbounded last interval.
    tail: Interval,
    /// Timestamps of the current time points.
    singleton_ts: BTreeSet<Rat>,
    /// Letter content of time points, keyed by timestamp.
    singleton_data: HashMap<Rat, (Sigma, Rho)>,
    nodes: IndexMap<NodeKey, NodeData>,
    /// All node keys per interval.
    nodes_at: HashMap<Interval, IndexSet<NodeKey>>,
    /// Until nodes whose formula mentions bar or metric atoms over an
    /// interval, per interval. Suffix atoms are not indexed here.
    bar_refs: HashMap<Interval, IndexSet<NodeKey>>,
    /// Holders of a suffix atom, keyed by the until occurrence and the
    /// valuation class of its right child.
    suffix_holders: HashMap<(NodeId, Valuation), BTreeSet<NodeKey>>,
    /// Bounded-window suffix holders by the tail position at which their
    /// window is certainly over.
    suffix_expiry: BTreeMap<Rat, BTreeSet<NodeKey>>,
    trackers: BTreeMap<String, CompTracker>,
    declared: BTreeSet<String>,
    verdicts: BTreeMap<Rat, (bool, u64)>,
    fresh: Vec<Verdict>,
    queue: VecDeque<NodeKey>,
    /// Nodes that recently lost their last parent reference.
    orphan_candidates: Vec<NodeKey>,
    /// Nodes that recently became constant over a singleton.
    collect_candidates: Vec<NodeKey>,
    iteration: u64,
    peak_nodes: usize,
    events: u64,
}

impl Monitor {
    pub fn new(formula: Formula, cfg: MonitorConfig) -> Result<Monitor, MonitorError> {
        if !formula.is_closed() {
            return Err(MonitorError::OpenFormula);
        }
        if formula.is_atomic(formula.root()) {
            return Err(MonitorError::AtomicFormula);
        }
        let declared = cfg.components.iter().cloned().collect();
        let j0 = Interval::zero_to_inf();
        let mut m = Monitor {
            formula,
            cfg,
            intervals: [j0.clone()].into_iter().collect(),
            gaps: BTreeSet::new(),
            tail: j0,
            singleton_ts: BTreeSet::new(),
            singleton_data: HashMap::new(),
            nodes: IndexMap::new(),
            nodes_at: HashMap::new(),
            bar_refs: HashMap::new(),
            suffix_holders: HashMap::new(),
            suffix_expiry: BTreeMap::new(),
            trackers: BTreeMap::new(),
            declared,
            verdicts: BTreeMap::new(),
            fresh: Vec::new(),
            queue: VecDeque::new(),
            orphan_candidates: Vec::new(),
            collect_candidates: Vec::new(),
            iteration: 0,
            peak_nodes: 0,
            events: 0,
        };
        m.init_nodes();
        m.settle();
        m.fresh.clear();
        m.peak_nodes = m.nodes.len();
        Ok(m)
    }

    // ----- accessors -------------------------------------------------

    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    /// The observation the monitor currently represents, materialized from
    /// the interval bookkeeping.
    pub fn observation(&self) -> Observation {
        let letters = self
            .intervals
            .iter()
            .map(|iv| {
                let (sigma, rho) = iv
                    .singleton_value()
                    .and_then(|t| self.singleton_data.get(t))
                    .cloned()
                    .unwrap_or_default();
                Letter { interval: iv.clone(), sigma, rho }
            })
            .collect();
        Observation::from_letters(letters)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn peak_node_count(&self) -> usize {
        self.peak_nodes
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// All verdicts emitted so far: timestamp to (value, iteration).
    pub fn cumulative_verdicts(&self) -> &BTreeMap<Rat, (bool, u64)> {
        &self.verdicts
    }

    /// The stored formula of a node, with suffix atoms expanded to the
    /// disjunction over the pending time points and the current tail.
    pub fn psi(&self, key: &NodeKey) -> Option<PropFormula> {
        self.nodes.get(key).map(|n| self.conceptual_psi(key, &n.psi))
    }

    /// The raw stored formula (suffix atoms unexpanded).
    pub fn stored_psi(&self, key: &NodeKey) -> Option<&PropFormula> {
        self.nodes.get(key).map(|n| &n.psi)
    }

    pub fn node_keys_sorted(&self) -> Vec<NodeKey> {
        let mut keys: Vec<NodeKey> = self.nodes.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Trigger edges of a node over the expanded formulas: parents that
    /// mention one of its atoms, and children it mentions.
    pub fn triggers(&self, key: &NodeKey) -> Option<(BTreeSet<NodeKey>, BTreeSet<NodeKey>)> {
        if !self.nodes.contains_key(key) {
            return None;
        }
        let children = self.conceptual_children(key);
        let mut parents = BTreeSet::new();
        for (k, _) in &self.nodes {
            if self.conceptual_children(k).contains(key) {
                parents.insert(k.clone());
            }
        }
        Some((parents, children))
    }

    fn conceptual_children(&self, key: &NodeKey) -> BTreeSet<NodeKey> {
        match self.nodes.get(key) {
            Some(n) => {
                let psi = self.conceptual_psi(key, &n.psi);
                self.referenced_children(key, &psi)
            }
            None => BTreeSet::new(),
        }
    }

    /// Renders the node store, one line per node.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for key in self.node_keys_sorted() {
            let psi = self.psi(&key).unwrap();
            let vals: Vec<String> = key.val.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!(
                "({}, {}, {{{}}}) : {}\n",
                self.formula.path(key.node),
                key.iv,
                vals.join(","),
                psi
            ));
        }
        out
    }

    // ----- initialization ---------------------------------------------

    fn init_nodes(&mut self) {
        let j0 = Interval::zero_to_inf();
        for id in self.formula.subformulas() {
            if matches!(self.formula.kind(id), FormulaKind::True) {
                continue;
            }
            let psi = self.initial_psi(id, &j0);
            self.create_node(NodeKey { node: id, iv: j0.clone(), val: Valuation::new() }, psi);
        }
    }

    fn initial_psi(&self, id: NodeId, iv: &Interval) -> PropFormula {
        match self.formula.kind(id) {
            FormulaKind::True => TRUE,
            FormulaKind::Pred { .. } | FormulaKind::Cmp { .. } => {
                pf_atom(Atom::Sub { node: id, iv: iv.clone() })
            }
            FormulaKind::Not(a) => pf_not(self.sub_prop(*a, iv)),
            FormulaKind::Or(a, b) => pf_or(vec![self.sub_prop(*a, iv), self.sub_prop(*b, iv)]),
            FormulaKind::Freeze { body, .. } => self.sub_prop(*body, iv),
            FormulaKind::Until { interval, left, right } => {
                if self.suffix_eligible(id) {
                    pf_atom(Atom::SuffixBeta { until: id })
                } else {
                    pf_and(vec![
                        self.tc_prop(id, &interval.clone(), iv, iv),
                        self.bar_beta_prop(*right, iv),
                        self.bar_bar_alpha_prop(*left, iv),
                    ])
                }
            }
        }
    }

    /// Untils whose left operand is the constant true store their tail
    /// disjunct as a suffix atom. A constant-true right operand stays on
    /// the eager path: it has no node whose resolution could wake the
    /// deferred disjunct.
    fn suffix_eligible(&self, id: NodeId) -> bool {
        match self.formula.kind(id) {
            FormulaKind::Until { left, right, .. } => {
                matches!(self.formula.kind(*left), FormulaKind::True)
                    && !matches!(self.formula.kind(*right), FormulaKind::True)
            }
            _ => false,
        }
    }

    fn until_parts(&self, id: NodeId) -> (Interval, NodeId, NodeId) {
        match self.formula.kind(id) {
            FormulaKind::Until { interval, left, right } => (interval.clone(), *left, *right),
            _ => panic!("not an until occurrence"),
        }
    }

    fn sub_prop(&self, child: NodeId, iv: &Interval) -> PropFormula {
        if matches!(self.formula.kind(child), FormulaKind::True) {
            TRUE
        } else {
            pf_atom(Atom::Sub { node: child, iv: iv.clone() })
        }
    }

    fn bar_beta_prop(&self, child: NodeId, iv: &Interval) -> PropFormula {
        if matches!(self.formula.kind(child), FormulaKind::True) && iv.is_singleton() {
            TRUE
        } else {
            pf_atom(Atom::BarBeta { node: child, iv: iv.clone() })
        }
    }

    fn bar_alpha_prop(&self, child: NodeId, iv: &Interval) -> PropFormula {
        if matches!(self.formula.kind(child), FormulaKind::True) {
            TRUE
        } else {
            pf_atom(Atom::BarAlpha { node: child, iv: iv.clone() })
        }
    }

    fn bar_bar_alpha_prop(&self, child: NodeId, iv: &Interval) -> PropFormula {
        if matches!(self.formula.kind(child), FormulaKind::True) {
            TRUE
        } else {
            pf_atom(Atom::BarBarAlpha { node: child, iv: iv.clone() })
        }
    }

    /// The metric-constraint atom for an until, folded to a constant when
    /// the interval pair already decides it.
    fn tc_prop(&self, until: NodeId, cons: &Interval, future: &Interval, anchor: &Interval) -> PropFormula {
        match oracle::tc_intervals(cons, future, anchor) {
            Tv3::True => TRUE,
            Tv3::False => FALSE,
            Tv3::Unknown => {
                pf_atom(Atom::Tc { until, future: future.clone(), anchor: anchor.clone() })
            }
        }
    }

    // ----- suffix atom expansion ----------------------------------------

    /// Expands suffix atoms of a stored formula into the disjunction over
    /// still-pending time points of the segment plus the current tail.
    fn conceptual_psi(&self, key: &NodeKey, stored: &PropFormula) -> PropFormula {
        let mut th = Substitution::new();
        stored.visit_atoms(&mut |a| {
            if let Atom::SuffixBeta { until } = a {
                th.insert(a.clone(), self.suffix_expansion(*until, key, true));
            }
        });
        if th.is_empty() {
            stored.clone()
        } else {
            stored.substitute(&th)
        }
    }

    /// The disjunction a suffix atom stands for: one disjunct per pending
    /// time point and per gap of the holder's segment (child value still
    /// unknown and metric constraint not falsified) plus, when
    /// `include_tail`, the disjunct over the unbounded tail.
    fn suffix_expansion(&self, until: NodeId, holder: &NodeKey, include_tail: bool) -> PropFormula {
        let (cons, _left, right) = self.until_parts(until);
        let (since, since_incl) = self
            .nodes
            .get(holder)
            .and_then(|n| n.suffix_since.clone())
            .unwrap_or_else(|| (self.tail.lo().clone(), !self.tail.lo_open()));
        let class = self.restrict(&holder.val, right);
        let mut disjuncts = Vec::new();
        let mut push_region = |region: &Interval| {
            let tcv = oracle::tc_intervals(&cons, region, &holder.iv);
            if tcv == Tv3::False {
                // Continue iff a later region could still hit the window.
                return !region
                    .diff(&holder.iv)
                    .map(|d| d.entirely_above(&cons))
                    .unwrap_or(false);
            }
            let child = NodeKey { node: right, iv: region.clone(), val: class.clone() };
            match self.nodes.get(&child).and_then(|n| n.psi.constant_value()) {
                Some(false) => {}
                Some(true) if region.is_singleton() => {
                    // Should have resolved the holder at propagation time.
                    disjuncts
                        .push(pf_and(vec![TRUE, self.tc_prop(until, &cons, region, &holder.iv)]));
                }
                _ => {
                    disjuncts.push(pf_and(vec![
                        self.bar_beta_prop(right, region),
                        self.tc_prop(until, &cons, region, &holder.iv),
                    ]));
                }
            }
            true
        };
        let lower = if since_incl { Bound::Included(since.clone()) } else { Bound::Excluded(since.clone()) };
        for ts in self.singleton_ts.range((lower, Bound::Unbounded)) {
            if !push_region(&Interval::singleton(ts.clone())) {
                break;
            }
        }
        let gap_probe = Interval::singleton(since);
        for gap in self.gaps.range(gap_probe..) {
            if !push_region(gap) {
                break;
            }
        }
        if include_tail {
            disjuncts.push(pf_and(vec![
                self.bar_beta_prop(right, &self.tail),
                self.tc_prop(until, &cons, &self.tail, &holder.iv),
            ]));
        }
        pf_or(disjuncts)
    }

    // ----- node store maintenance --------------------------------------

    fn rho_at(&self, iv: &Interval) -> Option<&Rho> {
        iv.singleton_value().and_then(|t| self.singleton_data.get(t)).map(|(_, r)| r)
    }

    fn sigma_at(&self, iv: &Interval) -> Option<&Sigma> {
        iv.singleton_value().and_then(|t| self.singleton_data.get(t)).map(|(s, _)| s)
    }

    fn restrict(&self, val: &Valuation, node: NodeId) -> Valuation {
        let free = self.formula.free_vars(node);
        val.iter().filter(|(k, _)| free.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// The key of the child node an atom of `parent` refers to, adjusting
    /// the valuation through a freeze binder. Suffix atoms resolve to the
    /// child over the current tail.
    fn child_key_of_atom(&self, parent: &NodeKey, atom: &Atom) -> Option<NodeKey> {
        let (child, iv) = match atom {
            Atom::SuffixBeta { until } => {
                let (_, _, right) = self.until_parts(*until);
                (right, self.tail.clone())
            }
            _ => {
                let child = atom.tracked_node()?;
                (child, atom.interval()?.clone())
            }
        };
        if matches!(self.formula.kind(child), FormulaKind::True) || child == parent.node {
            return None;
        }
        let mut val = parent.val.clone();
        if let FormulaKind::Freeze { reg, var, body } = self.formula.kind(parent.node) {
            if *body == child {
                match self.rho_at(&parent.iv).and_then(|r| r.get(reg)) {
                    Some(d) => {
                        val.insert(var.clone(), d.clone());
                    }
                    None => {
                        val.remove(var);
                    }
                }
            }
        }
        Some(NodeKey { node: child, iv, val: self.restrict(&val, child) })
    }

    fn referenced_children(&self, key: &NodeKey, psi: &PropFormula) -> BTreeSet<NodeKey> {
        let mut out = BTreeSet::new();
        psi.visit_atoms(&mut |a| {
            if let Some(ck) = self.child_key_of_atom(key, a) {
                out.insert(ck);
            }
        });
        out
    }

    /// Stored child edges: like [`Monitor::referenced_children`] but
    /// skipping suffix atoms, whose routing goes through the registry.
    fn stored_children(&self, key: &NodeKey, psi: &PropFormula) -> BTreeSet<NodeKey> {
        let mut out = BTreeSet::new();
        psi.visit_atoms(&mut |a| {
            if matches!(a, Atom::SuffixBeta { .. }) {
                return;
            }
            if let Some(ck) = self.child_key_of_atom(key, a) {
                out.insert(ck);
            }
        });
        out
    }

    /// Intervals an until formula refers to through eager bar or metric
    /// atoms.
    fn referenced_intervals(psi: &PropFormula) -> BTreeSet<Interval> {
        let mut out = BTreeSet::new();
        psi.visit_atoms(&mut |a| match a {
            Atom::BarBeta { iv, .. } | Atom::BarAlpha { iv, .. } | Atom::BarBarAlpha { iv, .. } => {
                out.insert(iv.clone());
            }
            Atom::Tc { future, .. } => {
                out.insert(future.clone());
            }
            _ => {}
        });
        out
    }

    fn has_suffix_atom(psi: &PropFormula) -> Option<NodeId> {
        let mut found = None;
        psi.visit_atoms(&mut |a| {
            if let Atom::SuffixBeta { until } = a {
                found = Some(*until);
            }
        });
        found
    }

    /// Rewrites the stored formula of `key`, maintaining triggers and the
    /// index structures, and queueing propagation when the formula becomes
    /// (or newly references) a constant.
    fn set_psi(&mut self, key: &NodeKey, psi: PropFormula) {
        if !self.nodes.contains_key(key) {
            return;
        }
        let old_psi = self.nodes[key].psi.clone();
        let old_children = self.nodes[key].in_triggers.clone();
        let old_refs = Self::referenced_intervals(&old_psi);
        let new_children_all = self.stored_children(key, &psi);
        let new_refs = Self::referenced_intervals(&psi);

        for gone in old_children.difference(&new_children_all) {
            if let Some(c) = self.nodes.get_mut(gone) {
                c.out_triggers.remove(key);
                if c.out_triggers.is_empty() {
                    self.orphan_candidates.push(gone.clone());
                }
            }
        }
        let mut existing_children = BTreeSet::new();
        for added in &new_children_all {
            if old_children.contains(added) {
                existing_children.insert(added.clone());
                continue;
            }
            if let Some(c) = self.nodes.get_mut(added) {
                c.out_triggers.insert(key.clone());
                existing_children.insert(added.clone());
                if c.psi.constant_value().is_some() {
                    self.queue.push_back(added.clone());
                }
            }
        }
        for iv in old_refs.difference(&new_refs) {
            if let Some(set) = self.bar_refs.get_mut(iv) {
                set.shift_remove(key);
            }
        }
        for iv in new_refs.difference(&old_refs) {
            self.bar_refs.entry(iv.clone()).or_default().insert(key.clone());
        }

        // Suffix registration.
        let had_suffix = Self::has_suffix_atom(&old_psi);
        let has_suffix = Self::has_suffix_atom(&psi);
        match (had_suffix, has_suffix) {
            (None, Some(until)) => self.register_suffix(key, until, None),
            (Some(until), None) => self.deregister_suffix(key, until),
            _ => {}
        }

        let node = self.nodes.get_mut(key).unwrap();
        node.in_triggers = existing_children;
        let became_const = psi.constant_value().is_some() && old_psi.constant_value().is_none();
        node.psi = psi;
        if became_const {
            self.queue.push_back(key.clone());
            if key.iv.is_singleton() {
                self.collect_candidates.push(key.clone());
            }
        }
    }

    fn register_suffix(&mut self, key: &NodeKey, until: NodeId, since: Option<(Rat, bool)>) {
        let (_, _, right) = self.until_parts(until);
        let class = self.restrict(&key.val, right);
        self.suffix_holders.entry((until, class)).or_default().insert(key.clone());
        let since = since.unwrap_or_else(|| (self.tail.lo().clone(), !self.tail.lo_open()));
        if let Some(n) = self.nodes.get_mut(key) {
            n.suffix_since = Some(since);
        }
        self.schedule_suffix_expiry(key, until);
    }

    fn deregister_suffix(&mut self, key: &NodeKey, until: NodeId) {
        let (_, _, right) = self.until_parts(until);
        let class = self.restrict(&key.val, right);
        if let Some(set) = self.suffix_holders.get_mut(&(until, class)) {
            set.remove(key);
        }
        if let Some(n) = self.nodes.get_mut(key) {
            n.suffix_since = None;
        }
        // Expiry entries are validated when popped; no eager removal.
    }

    /// Schedules the tail position at which the holder's metric window is
    /// certainly over and its suffix atom folds to false.
    fn schedule_suffix_expiry(&mut self, key: &NodeKey, until: NodeId) {
        let (cons, _, _) = self.until_parts(until);
        let (Some(cons_hi), Some(anchor_hi)) = (cons.hi(), key.iv.hi()) else { return };
        let deadline = anchor_hi + cons_hi;
        self.suffix_expiry.entry(deadline).or_default().insert(key.clone());
    }

    /// Inserts a fresh node, wires triggers in both directions, and runs
    /// the leaf-resolution hooks.
    fn create_node(&mut self, key: NodeKey, psi: PropFormula) {
        debug_assert!(!self.nodes.contains_key(&key));
        self.nodes.insert(
            key.clone(),
            NodeData {
                psi: TRUE,
                out_triggers: BTreeSet::new(),
                in_triggers: BTreeSet::new(),
                suffix_since: None,
            },
        );
        self.nodes_at.entry(key.iv.clone()).or_default().insert(key.clone());
        self.set_psi(&key, psi);

        // Wire parents that already mention this node's atoms.
        if let Some(pid) = self.formula.parent(key.node) {
            let candidates: Vec<NodeKey> = if matches!(self.formula.kind(pid), FormulaKind::Until { .. }) {
                self.bar_refs
                    .get(&key.iv)
                    .map(|s| s.iter().filter(|k| k.node == pid).cloned().collect())
                    .unwrap_or_default()
            } else {
                self.nodes_at
                    .get(&key.iv)
                    .map(|s| s.iter().filter(|k| k.node == pid).cloned().collect())
                    .unwrap_or_default()
            };
            for cand in candidates {
                if cand == key {
                    continue;
                }
                let refs = self.stored_children(&cand, &self.nodes[&cand].psi);
                if refs.contains(&key) {
                    self.nodes.get_mut(&cand).unwrap().in_triggers.insert(key.clone());
                    self.nodes.get_mut(&key).unwrap().out_triggers.insert(cand.clone());
                }
            }
        }

        // Leaf hooks: rigid comparisons resolve as soon as their arguments
        // are bound; predicate atoms resolve at time points with known
        // interpretation.
        match self.formula.kind(key.node).clone() {
            FormulaKind::Cmp { .. } => self.try_resolve_cmp(&key),
            FormulaKind::Pred { .. } => self.try_resolve_pred(&key),
            _ => {}
        }
        if self.nodes[&key].psi.constant_value().is_some() {
            self.queue.push_back(key.clone());
        } else if self.nodes[&key].out_triggers.is_empty() {
            self.orphan_candidates.push(key.clone());
        }
        self.peak_nodes = self.peak_nodes.max(self.nodes.len());
    }

    fn delete_node(&mut self, key: &NodeKey) {
        let Some(node) = self.nodes.shift_remove(key) else { return };
        if let Some(set) = self.nodes_at.get_mut(&key.iv) {
            set.shift_remove(key);
        }
        for iv in Self::referenced_intervals(&node.psi) {
            if let Some(set) = self.bar_refs.get_mut(&iv) {
                set.shift_remove(key);
            }
        }
        if let Some(until) = Self::has_suffix_atom(&node.psi) {
            let (_, _, right) = self.until_parts(until);
            let class = self.restrict(&key.val, right);
            if let Some(set) = self.suffix_holders.get_mut(&(until, class)) {
                set.remove(key);
            }
        }
        for child in &node.in_triggers {
            if let Some(c) = self.nodes.get_mut(child) {
                c.out_triggers.remove(key);
                if c.out_triggers.is_empty() {
                    self.orphan_candidates.push(child.clone());
                }
            }
        }
        for parent in &node.out_triggers {
            if let Some(p) = self.nodes.get_mut(parent) {
                p.in_triggers.remove(key);
            }
        }
    }

    fn try_resolve_cmp(&mut self, key: &NodeKey) {
        if self.nodes[key].psi.constant_value().is_some() {
            return;
        }
        let FormulaKind::Cmp { left, op, right } = self.formula.kind(key.node).clone() else {
            return;
        };
        let l = left.value(|x| key.val.get(x).cloned());
        let r = right.value(|x| key.val.get(x).cloned());
        if let (Some(l), Some(r)) = (l, r) {
            self.set_psi(key, PropFormula::Const(op.eval(&l, &r)));
        }
    }

    fn try_resolve_pred(&mut self, key: &NodeKey) {
        if self.nodes[key].psi.constant_value().is_some() {
            return;
        }
        let FormulaKind::Pred { name, args } = self.formula.kind(key.node).clone() else {
            return;
        };
        let Some(sigma) = self.sigma_at(&key.iv) else { return };
        let Some(rel) = sigma.get(&name) else { return };
        let tuple: Option<Vec<Value>> = args.iter().map(|t| t.value(|x| key.val.get(x).cloned())).collect();
        if let Some(tuple) = tuple {
            let b = rel.contains(&tuple);
            self.set_psi(key, PropFormula::Const(b));
        }
    }

    // ----- spec operations ---------------------------------------------

    fn interval_containing(&self, tau: &Rat) -> Option<Interval> {
        let probe = Interval::singleton(tau.clone());
        let candidate = self.intervals.range(..=&probe).next_back();
        match candidate {
            Some(iv) if iv.contains(tau) => Some(iv.clone()),
            _ => {
                // An interval with an open lower bound equal to tau sorts
                // after the probe; the only other candidate is the first
                // interval at or after tau with a closed bound.
                let up = self.intervals.range(&probe..).next();
                match up {
                    Some(iv) if iv.contains(tau) => Some(iv.clone()),
                    _ => None,
                }
            }
        }
    }

    /// Splits the interval containing `tau` into its incomplete parts,
    /// recording `(comp, seq, tau)` for completeness detection. Returns the
    /// split interval and the surviving parts (always including the
    /// singleton). Only updates the observation bookkeeping; callers follow
    /// up with [`Monitor::new_time_point`].
    pub fn split(
        &mut self,
        tau: &Rat,
        comp: &str,
        seq: u64,
    ) -> Result<(Interval, Vec<Interval>), MonitorError> {
        if self.singleton_ts.contains(tau) {
            return Err(MonitorError::TimestampCollision(crate::trace::rat_to_decimal(tau)));
        }
        let Some(j_iv) = self.interval_containing(tau) else {
            return Err(MonitorError::LateMessage(crate::trace::rat_to_decimal(tau)));
        };
        let tracker = self.trackers.entry(comp.to_string()).or_default();
        if !tracker.by_seq.contains_key(&seq) {
            tracker.insert(seq, tau.clone(), Sigma::new(), Rho::new());
        }
        self.intervals.remove(&j_iv);
        self.gaps.remove(&j_iv);
        let singleton = Interval::singleton(tau.clone());
        self.singleton_ts.insert(tau.clone());
        let mut kept = Vec::new();
        for part in [j_iv.below(tau), Some(singleton), j_iv.above(tau)].into_iter().flatten() {
            if part.is_singleton() {
                self.intervals.insert(part.clone());
                kept.push(part);
            } else if part.is_bounded() {
                if self.interval_complete_raw(&part) {
                    continue;
                }
                self.intervals.insert(part.clone());
                self.gaps.insert(part.clone());
                kept.push(part);
            } else {
                self.tail = part.clone();
                self.intervals.insert(part.clone());
                kept.push(part);
            }
        }
        Ok((j_iv, kept))
    }

    fn interval_complete_raw(&self, iv: &Interval) -> bool {
        self.declared.iter().all(|comp| {
            self.trackers
                .get(comp)
                .map(|t| !t.may_emit_in(iv))
                .unwrap_or(false)
        })
    }

    /// Rebuilds the node store after `j_iv` was split into `new`: nodes at
    /// the split interval are re-created per surviving part, until formulas
    /// referring to the split interval are rewritten via
    /// [`Monitor::refinement_until`], and suffix holders absorb a surviving
    /// gap before the new tail.
    pub fn new_time_point(&mut self, j_iv: &Interval, new: &[Interval]) {
        let was_tail = !j_iv.is_bounded();
        // Re-create nodes at the split interval, parents before children.
        let mut group: Vec<NodeKey> = self
            .nodes_at
            .get(j_iv)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        group.sort_by(|a, b| b.node.cmp(&a.node).then_with(|| a.cmp(b)));
        let mut transported_suffix: Vec<NodeKey> = Vec::new();
        for key in group {
            let old_psi = self.nodes[&key].psi.clone();
            let old_since = self.nodes[&key].suffix_since.clone();
            for k in new {
                let new_psi = self.transported_psi(key.node, &old_psi, j_iv, k);
                let new_key = NodeKey { node: key.node, iv: k.clone(), val: key.val.clone() };
                self.create_node(new_key.clone(), new_psi);
                // A transported suffix segment keeps its pending range.
                if let Some(since) = &old_since {
                    if let Some(until) = Self::has_suffix_atom(&self.nodes[&new_key].psi) {
                        if let Some(n) = self.nodes.get_mut(&new_key) {
                            n.suffix_since = Some(since.clone());
                        }
                        self.schedule_suffix_expiry(&new_key, until);
                        transported_suffix.push(new_key);
                    }
                }
            }
            self.delete_node(&key);
        }
        // Rewrite until formulas that eagerly mention the split interval.
        let mut targets: Vec<NodeKey> = self
            .bar_refs
            .get(j_iv)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        targets.sort();
        for t in targets {
            if !self.nodes.contains_key(&t) {
                continue;
            }
            let th = self.refinement_until(t.node, &t.iv, j_iv, new);
            self.apply_subst(&t, &th);
        }
        if was_tail {
            self.pop_suffix_expiries();
        }
        // An anchor created by this split may already lie entirely behind
        // the tail; folding is only sound after the eager coverage of the
        // split parts above has been rebuilt. Transported copies keep their
        // valuation class, so past witnesses are already reflected and only
        // the fold check is needed.
        for key in transported_suffix {
            self.fold_suffix_if_dead(&key);
        }
    }

    /// The formula for a copy of `(node, j_iv)` at part `k`: same-interval
    /// atoms are renamed for non-temporal nodes; metric atoms are
    /// re-anchored (and re-evaluated) for untils. Suffix atoms carry over
    /// unchanged (they are anchor-relative).
    fn transported_psi(&self, node: NodeId, old: &PropFormula, j_iv: &Interval, k: &Interval) -> PropFormula {
        let mut th = Substitution::new();
        match self.formula.kind(node).clone() {
            FormulaKind::True => unreachable!("constants have no nodes"),
            FormulaKind::Pred { .. } | FormulaKind::Cmp { .. } => {
                th.insert(
                    Atom::Sub { node, iv: j_iv.clone() },
                    pf_atom(Atom::Sub { node, iv: k.clone() }),
                );
            }
            FormulaKind::Not(a) => {
                th.insert(Atom::Sub { node: a, iv: j_iv.clone() }, self.sub_prop(a, k));
            }
            FormulaKind::Or(a, b) => {
                for c in [a, b] {
                    th.insert(Atom::Sub { node: c, iv: j_iv.clone() }, self.sub_prop(c, k));
                }
            }
            FormulaKind::Freeze { body, .. } => {
                th.insert(Atom::Sub { node: body, iv: j_iv.clone() }, self.sub_prop(body, k));
            }
            FormulaKind::Until { interval: cons, .. } => {
                for atom in old.atoms() {
                    if let Atom::Tc { until, future, anchor } = &atom {
                        debug_assert_eq!(anchor, j_iv);
                        th.insert(atom.clone(), self.tc_prop(*until, &cons, future, k));
                    }
                }
            }
        }
        old.substitute(&th)
    }

    /// The substitution that rewrites `J`-indexed atoms of an until node
    /// anchored at `anchor_iv` after `J` was split into `new`: the
    /// anchor-witness atom unfolds into one disjunct per surviving part,
    /// the left-chain atom into a conjunction, and stale atoms of the
    /// split interval are discarded. The disjunct over an unbounded part
    /// becomes a suffix atom when the until is eligible.
    pub fn refinement_until(
        &self,
        until: NodeId,
        anchor_iv: &Interval,
        j_iv: &Interval,
        new: &[Interval],
    ) -> Substitution {
        let (cons, left, right) = self.until_parts(until);
        let mut th = Substitution::new();
        th.insert(
            Atom::Tc { until, future: j_iv.clone(), anchor: anchor_iv.clone() },
            TRUE,
        );
        let mut anchor_f = FALSE;
        let mut continuation = TRUE;
        for k in new {
            if k < anchor_iv {
                continue;
            }
            let disjunct = if !k.is_bounded() && self.suffix_eligible(until) {
                if oracle::tc_intervals(&cons, k, anchor_iv) == Tv3::False {
                    FALSE // the whole remaining timeline is past the window
                } else {
                    pf_atom(Atom::SuffixBeta { until })
                }
            } else {
                let cont_piece =
                    if k.is_singleton() { TRUE } else { self.bar_bar_alpha_prop(left, k) };
                pf_and(vec![
                    self.bar_beta_prop(right, k),
                    self.tc_prop(until, &cons, k, anchor_iv),
                    cont_piece,
                    continuation.clone(),
                ])
            };
            anchor_f = pf_or(vec![anchor_f, disjunct]);
            continuation = pf_and(vec![continuation, self.bar_alpha_prop(left, k)]);
        }
        th.insert(Atom::BarBeta { node: right, iv: j_iv.clone() }, anchor_f);
        th.insert(Atom::BarAlpha { node: left, iv: j_iv.clone() }, continuation);
        th.insert(Atom::BarBarAlpha { node: left, iv: j_iv.clone() }, TRUE);
        th
    }

    /// Folds the suffix atom of `key` when its tail disjunct is decided:
    /// the tail lies past the metric window, or the child is already false
    /// over the whole tail. Returns whether a fold happened.
    fn fold_suffix_if_dead(&mut self, key: &NodeKey) -> bool {
        let Some(node) = self.nodes.get(key) else { return false };
        let Some(until) = Self::has_suffix_atom(&node.psi) else { return false };
        let (cons, _, right) = self.until_parts(until);
        let class = self.restrict(&key.val, right);
        let tail_child = NodeKey { node: right, iv: self.tail.clone(), val: class };
        let tail_child_false = self
            .nodes
            .get(&tail_child)
            .and_then(|n| n.psi.constant_value())
            == Some(false);
        if tail_child_false || oracle::tc_intervals(&cons, &self.tail, &key.iv) == Tv3::False {
            let residue = self.suffix_expansion(until, key, false);
            let mut th = Substitution::new();
            th.insert(Atom::SuffixBeta { until }, residue);
            self.apply_subst(key, &th);
            return true;
        }
        false
    }

    /// Reconciles a suffix atom with resolutions that happened before its
    /// holder existed: folds it when the tail disjunct is decided, and
    /// absorbs witnesses among the segment's time points that already
    /// resolved true. Used for fresh valuation classes, whose child nodes
    /// may have resolved long before the holder appeared.
    fn suffix_catch_up(&mut self, key: &NodeKey) {
        if self.fold_suffix_if_dead(key) {
            return;
        }
        let Some(node) = self.nodes.get(key) else { return };
        let Some(until) = Self::has_suffix_atom(&node.psi) else { return };
        let (cons, _, right) = self.until_parts(until);
        let class = self.restrict(&key.val, right);
        // Witnesses in the segment that resolved true before this holder
        // was created.
        let (since, since_incl) = self
            .nodes
            .get(key)
            .and_then(|n| n.suffix_since.clone())
            .unwrap_or_else(|| (self.tail.lo().clone(), !self.tail.lo_open()));
        let lower = if since_incl { Bound::Included(since) } else { Bound::Excluded(since) };
        let pending: Vec<Rat> = self
            .singleton_ts
            .range((lower, Bound::Unbounded))
            .cloned()
            .collect();
        let mut extra = Vec::new();
        let mut resolve_true = false;
        for ts in pending {
            let point = Interval::singleton(ts);
            let tcv = oracle::tc_intervals(&cons, &point, &key.iv);
            if tcv == Tv3::False {
                if point.diff(&key.iv).map(|d| d.entirely_above(&cons)).unwrap_or(false) {
                    break;
                }
                continue;
            }
            let child = NodeKey { node: right, iv: point.clone(), val: class.clone() };
            if self.nodes.get(&child).and_then(|n| n.psi.constant_value()) == Some(true) {
                match tcv {
                    Tv3::True => {
                        resolve_true = true;
                        break;
                    }
                    Tv3::Unknown => extra.push(pf_atom(Atom::Tc {
                        until,
                        future: point,
                        anchor: key.iv.clone(),
                    })),
                    Tv3::False => unreachable!(),
                }
            }
        }
        if resolve_true {
            let mut th = Substitution::new();
            th.insert(Atom::SuffixBeta { until }, TRUE);
            self.apply_subst(key, &th);
        } else if !extra.is_empty() {
            let Some(node) = self.nodes.get(key) else { return };
            let mut parts = vec![node.psi.clone()];
            parts.extend(extra);
            self.set_psi(key, pf_or(parts));
        }
    }

    /// Folds suffix atoms whose metric window the advanced tail has left
    /// behind: the tail disjunct is false, leaving only the still-pending
    /// time points of the segment.
    fn pop_suffix_expiries(&mut self) {
        let tail_lo = self.tail.lo().clone();
        let due: Vec<Rat> = self
            .suffix_expiry
            .range((Bound::Unbounded, Bound::Included(tail_lo)))
            .map(|(d, _)| d.clone())
            .collect();
        for deadline in due {
            let Some(keys) = self.suffix_expiry.remove(&deadline) else { continue };
            for key in keys {
                let Some(node) = self.nodes.get(&key) else { continue };
                let Some(until) = Self::has_suffix_atom(&node.psi) else { continue };
                let (cons, _, _) = self.until_parts(until);
                if oracle::tc_intervals(&cons, &self.tail, &key.iv) != Tv3::False {
                    // Rescheduled while transported; a later entry covers it.
                    continue;
                }
                let residue = self.suffix_expansion(until, &key, false);
                let mut th = Substitution::new();
                th.insert(Atom::SuffixBeta { until }, residue);
                self.apply_subst(&key, &th);
            }
        }
    }

    /// Routes a resolved child value to the suffix holders whose lazily
    /// represented disjunct it belongs to.
    fn suffix_broadcast(&mut self, key: &NodeKey, b: bool) {
        let Some(pid) = self.formula.parent(key.node) else { return };
        if !self.suffix_eligible(pid) {
            return;
        }
        let (cons, _, right) = self.until_parts(pid);
        if key.node != right {
            return;
        }
        let class = key.val.clone(); // already restricted to the child
        let Some(holders) = self.suffix_holders.get(&(pid, class)) else { return };
        if key.iv.is_singleton() {
            if !b {
                return; // a dead lazy disjunct needs no bookkeeping
            }
            // A witness time point inside the suffix regions.
            let holders: Vec<NodeKey> = holders
                .range(
                    ..NodeKey {
                        node: pid,
                        iv: Interval::new(key.iv.lo().clone(), true, None, true).unwrap(),
                        val: Valuation::new(),
                    },
                )
                .rev()
                .cloned()
                .collect();
            for holder in holders {
                // Only segments that had already started cover this point.
                let since = self.nodes.get(&holder).and_then(|n| n.suffix_since.clone());
                let Some((since, since_incl)) = since else { continue };
                let tau = key.iv.lo();
                let covered = if since_incl { tau >= &since } else { tau > &since };
                if !covered {
                    continue;
                }
                let tcv = oracle::tc_intervals(&cons, &key.iv, &holder.iv);
                match tcv {
                    Tv3::False => {
                        if key.iv.diff(&holder.iv).map(|d| d.entirely_above(&cons)).unwrap_or(false) {
                            break; // earlier anchors are even further out
                        }
                    }
                    Tv3::True if b => {
                        let mut th = Substitution::new();
                        th.insert(Atom::SuffixBeta { until: pid }, TRUE);
                        self.apply_subst(&holder, &th);
                    }
                    Tv3::Unknown if b => {
                        let Some(node) = self.nodes.get(&holder) else { continue };
                        let new_psi = pf_or(vec![
                            node.psi.clone(),
                            pf_atom(Atom::Tc {
                                until: pid,
                                future: key.iv.clone(),
                                anchor: holder.iv.clone(),
                            }),
                        ]);
                        self.set_psi(&holder, new_psi);
                    }
                    _ => {}
                }
            }
        } else if !key.iv.is_bounded() && !b {
            // The child is false over the whole remaining tail: the suffix
            // collapses to its pending time points.
            let holders: Vec<NodeKey> = holders.iter().cloned().collect();
            for holder in holders {
                let Some(node) = self.nodes.get(&holder) else { continue };
                if Self::has_suffix_atom(&node.psi) != Some(pid) {
                    continue;
                }
                let residue = self.suffix_expansion(pid, &holder, false);
                let mut th = Substitution::new();
                th.insert(Atom::SuffixBeta { until: pid }, residue);
                self.apply_subst(&holder, &th);
            }
        }
    }

    /// Copies every node of the freeze body reachable through stored
    /// formulas, extending its valuation with `var = d`. Existing copies
    /// are kept (they may carry more resolved formulas).
    pub fn propagate_down(&mut self, body: NodeId, iv: &Interval, var: &str, d: &Value) {
        let mut visited = HashSet::new();
        self.propagate_down_rec(body, iv, var, d, &mut visited);
    }

    fn propagate_down_rec(
        &mut self,
        node: NodeId,
        iv: &Interval,
        var: &str,
        d: &Value,
        visited: &mut HashSet<(NodeId, Interval)>,
    ) {
        if !self.formula.free_vars(node).contains(var) {
            return;
        }
        if !visited.insert((node, iv.clone())) {
            return;
        }
        let mut keys: Vec<NodeKey> = self
            .nodes_at
            .get(iv)
            .map(|s| s.iter().filter(|k| k.node == node).cloned().collect())
            .unwrap_or_default();
        keys.sort();
        for key in &keys {
            if key.val.contains_key(var) {
                continue;
            }
            let mut val = key.val.clone();
            val.insert(var.to_string(), d.clone());
            let target = NodeKey { node, iv: iv.clone(), val };
            if !self.nodes.contains_key(&target) {
                let psi = self.nodes[key].psi.clone();
                let since = self.nodes[key].suffix_since.clone();
                self.create_node(target.clone(), psi);
                if let Some(since) = since {
                    if let Some(until) = Self::has_suffix_atom(&self.nodes[&target].psi) {
                        if let Some(n) = self.nodes.get_mut(&target) {
                            n.suffix_since = Some(since);
                        }
                        self.schedule_suffix_expiry(&target, until);
                    }
                }
                self.suffix_catch_up(&target);
            }
        }
        if self.formula.is_atomic(node) {
            return;
        }
        // Recurse through the conceptual atoms, so lazily represented
        // disjuncts over pending time points are copied as well.
        let mut child_targets: BTreeSet<(NodeId, Interval)> = BTreeSet::new();
        for key in &keys {
            let psi = self.conceptual_psi(key, &self.nodes[key].psi);
            psi.visit_atoms(&mut |a| {
                if let Some(c) = a.tracked_node() {
                    if !matches!(self.formula.kind(c), FormulaKind::True) {
                        if let Some(civ) = a.interval() {
                            child_targets.insert((c, civ.clone()));
                        }
                    }
                }
            });
        }
        for (c, civ) in child_targets {
            self.propagate_down_rec(c, &civ, var, d, visited);
        }
    }

    /// Substitutes into the stored formula of `key` and returns the result;
    /// a formula that becomes constant is queued for upward propagation.
    pub fn apply_subst(&mut self, key: &NodeKey, th: &Substitution) -> Option<PropFormula> {
        let node = self.nodes.get(key)?;
        let new_psi = node.psi.substitute(th);
        self.set_psi(key, new_psi.clone());
        Some(new_psi)
    }

    /// Queues a node whose formula is a Boolean constant for upward
    /// propagation; [`Monitor::settle`] performs the propagation.
    pub fn propagate_up(&mut self, key: &NodeKey) {
        if self.nodes.get(key).map(|n| n.psi.constant_value().is_some()).unwrap_or(false) {
            self.queue.push_back(key.clone());
        }
    }

    /// Runs upward propagation to a fixpoint and returns the verdicts
    /// produced since the last call.
    pub fn settle(&mut self) -> Vec<Verdict> {
        while let Some(key) = self.queue.pop_front() {
            let Some(node) = self.nodes.get(&key) else { continue };
            let Some(b) = node.psi.constant_value() else { continue };
            if key.node == self.formula.root() {
                if let Some(ts) = key.iv.singleton_value() {
                    if !self.verdicts.contains_key(ts) {
                        self.verdicts.insert(ts.clone(), (b, self.iteration));
                        self.fresh.push(Verdict { ts: ts.clone(), value: b, iteration: self.iteration });
                    }
                }
                continue;
            }
            let Some(pid) = self.formula.parent(key.node) else { continue };
            let th = match self.formula.kind(pid) {
                FormulaKind::Until { right, .. } if key.node == *right => {
                    self.suffix_broadcast(&key, b);
                    if !(key.iv.is_singleton() || !b) {
                        continue; // a true witness in a gap is not yet usable
                    }
                    let mut th = Substitution::new();
                    th.insert(Atom::BarBeta { node: key.node, iv: key.iv.clone() }, PropFormula::Const(b));
                    th
                }
                FormulaKind::Until { .. } => {
                    if !(key.iv.is_singleton() || b) {
                        continue; // a false left child may still be skipped over
                    }
                    let mut th = Substitution::new();
                    th.insert(Atom::BarAlpha { node: key.node, iv: key.iv.clone() }, PropFormula::Const(b));
                    th.insert(
                        Atom::BarBarAlpha { node: key.node, iv: key.iv.clone() },
                        PropFormula::Const(b),
                    );
                    th
                }
                _ => {
                    let mut th = Substitution::new();
                    th.insert(Atom::Sub { node: key.node, iv: key.iv.clone() }, PropFormula::Const(b));
                    th
                }
            };
            let parents: Vec<NodeKey> = self
                .nodes
                .get(&key)
                .map(|n| n.out_triggers.iter().cloned().collect())
                .unwrap_or_default();
            for parent in parents {
                self.apply_subst(&parent, &th);
            }
        }
        let mut out = std::mem::take(&mut self.fresh);
        out.sort_by(|a, b| a.ts.cmp(&b.ts));
        out
    }

    /// Whether suffix holders still route resolutions to this node.
    fn suffix_referenced(&self, key: &NodeKey) -> bool {
        let Some(pid) = self.formula.parent(key.node) else { return false };
        if !self.suffix_eligible(pid) {
            return false;
        }
        let (_, _, right) = self.until_parts(pid);
        if key.node != right {
            return false;
        }
        self.suffix_holders
            .get(&(pid, key.val.clone()))
            .map(|s| !s.is_empty())
            .unwrap_or(false)
    }

    /// Removes never-referenced non-root nodes left over from copying.
    fn prune_orphans(&mut self) {
        let root = self.formula.root();
        let mut stack = std::mem::take(&mut self.orphan_candidates);
        while let Some(key) = stack.pop() {
            let Some(node) = self.nodes.get(&key) else { continue };
            if key.node == root
                || node.psi.constant_value().is_some()
                || !node.out_triggers.is_empty()
                || self.suffix_referenced(&key)
            {
                continue;
            }
            let children = node.in_triggers.clone();
            self.delete_node(&key);
            for c in children {
                if let Some(cn) = self.nodes.get(&c) {
                    if c.node != root && cn.psi.constant_value().is_none() && cn.out_triggers.is_empty() {
                        stack.push(c);
                    }
                }
            }
        }
    }

    /// Deletes resolved singleton nodes whose value has been propagated.
    /// Returns the number of removed nodes.
    pub fn collect_resolved(&mut self) -> usize {
        let root = self.formula.root();
        let candidates = std::mem::take(&mut self.collect_candidates);
        let mut removed = 0;
        for key in candidates {
            let Some(node) = self.nodes.get(&key) else { continue };
            let collectable = node.psi.constant_value().is_some()
                && key.iv.is_singleton()
                && node.out_triggers.is_empty()
                && !self.suffix_referenced(&key)
                && (key.node != root
                    || key
                        .iv
                        .singleton_value()
                        .map(|t| self.verdicts.contains_key(t))
                        .unwrap_or(false));
            if collectable {
                self.delete_node(&key);
                removed += 1;
            }
        }
        removed
    }

    /// Removes intervals (other than fresh split parts) that became
    /// complete, folding their deferred atoms to the values a removed
    /// region dictates.
    fn sweep_completions(&mut self) {
        let candidates: Vec<Interval> = self.gaps.iter().cloned().collect();
        for x in candidates {
            if !self.interval_complete_raw(&x) {
                continue;
            }
            let mut targets: Vec<NodeKey> = self
                .bar_refs
                .get(&x)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
            targets.sort();
            for t in targets {
                let Some(node) = self.nodes.get(&t) else { continue };
                let mut th = Substitution::new();
                node.psi.visit_atoms(&mut |a| match a {
                    Atom::BarBeta { iv, .. } if iv == &x => {
                        th.insert(a.clone(), FALSE);
                    }
                    Atom::BarAlpha { iv, .. } if iv == &x => {
                        th.insert(a.clone(), TRUE);
                    }
                    Atom::BarBarAlpha { iv, .. } if iv == &x => {
                        th.insert(a.clone(), TRUE);
                    }
                    Atom::Tc { future, .. } if future == &x => {
                        th.insert(a.clone(), FALSE);
                    }
                    _ => {}
                });
                self.apply_subst(&t, &th);
            }
            let at: Vec<NodeKey> = self
                .nodes_at
                .get(&x)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
            for key in at {
                self.delete_node(&key);
            }
            self.intervals.remove(&x);
            self.gaps.remove(&x);
        }
    }

    /// Processes one message; returns the verdicts produced this iteration.
    pub fn step(&mut self, msg: &Message) -> Result<Vec<Verdict>, MonitorError> {
        if !self.declared.contains(&msg.comp) {
            return Err(MonitorError::UnknownComponent(msg.comp.clone()));
        }
        if msg.seq == 0 {
            return Err(MonitorError::DuplicateSequence { comp: msg.comp.clone(), seq: 0 });
        }
        // Normalize letter content to the monitored alphabet: listed facts
        // define the relation, unlisted monitored predicates are empty.
        let preds = self.formula.predicates();
        let regs = self.formula.registers();
        let mut sigma = Sigma::new();
        for (p, _) in preds {
            sigma.insert(p.clone(), msg.facts.get(&p).cloned().unwrap_or_default());
        }
        let rho: Rho = msg
            .regs
            .iter()
            .filter(|(r, _)| regs.contains(*r))
            .map(|(r, v)| (r.clone(), v.clone()))
            .collect();

        let tracker = self.trackers.entry(msg.comp.clone()).or_default();
        if let Some((ts0, s0, r0)) = tracker.by_seq.get(&msg.seq) {
            if *ts0 == msg.ts && *s0 == sigma && *r0 == rho {
                return Ok(Vec::new()); // duplicate delivery, ignored
            }
            return Err(MonitorError::DuplicateSequence { comp: msg.comp.clone(), seq: msg.seq });
        }
        if let Some((_, (prev_ts, _, _))) = tracker.by_seq.range(..msg.seq).next_back() {
            if *prev_ts >= msg.ts {
                return Err(MonitorError::TimestampRegression { comp: msg.comp.clone(), seq: msg.seq });
            }
        }
        if let Some((_, (next_ts, _, _))) = tracker.by_seq.range(msg.seq + 1..).next() {
            if *next_ts <= msg.ts {
                return Err(MonitorError::TimestampRegression { comp: msg.comp.clone(), seq: msg.seq });
            }
        }
        if self.singleton_ts.contains(&msg.ts) {
            return Err(MonitorError::TimestampCollision(crate::trace::rat_to_decimal(&msg.ts)));
        }
        if self.interval_containing(&msg.ts).is_none() {
            return Err(MonitorError::LateMessage(crate::trace::rat_to_decimal(&msg.ts)));
        }

        self.iteration += 1;
        self.events += 1;
        let (j_iv, new_ivs) = self.split(&msg.ts, &msg.comp, msg.seq)?;
        self.trackers
            .get_mut(&msg.comp)
            .unwrap()
            .insert(msg.seq, msg.ts.clone(), sigma.clone(), rho.clone());
        self.singleton_data.insert(msg.ts.clone(), (sigma, rho.clone()));

        self.new_time_point(&j_iv, &new_ivs);
        self.sweep_completions();

        // Push frozen values down, outer binders first.
        let freeze_ids: Vec<NodeId> = self
            .formula
            .subformulas()
            .filter(|id| matches!(self.formula.kind(*id), FormulaKind::Freeze { .. }))
            .collect();
        let tau_iv = Interval::singleton(msg.ts.clone());
        for fid in freeze_ids.into_iter().rev() {
            let FormulaKind::Freeze { reg, var, body } = self.formula.kind(fid).clone() else {
                unreachable!()
            };
            if let Some(d) = rho.get(&reg).cloned() {
                self.propagate_down(body, &tau_iv, &var, &d);
            }
        }

        // Instantiate predicate atoms at the new time point.
        let mut at: Vec<NodeKey> = self
            .nodes_at
            .get(&tau_iv)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        at.sort();
        for key in at {
            if matches!(self.formula.kind(key.node), FormulaKind::Pred { .. }) {
                self.try_resolve_pred(&key);
            }
        }

        let verdicts = self.settle();
        self.prune_orphans();
        if self.cfg.gc {
            self.collect_resolved();
        }
        self.peak_nodes = self.peak_nodes.max(self.nodes.len());
        if self.cfg.check_coherence {
            let report = self.debug_coherence();
            if !report.ok() {
                return Err(MonitorError::CoherenceFailure(report.failures.join("\n")));
            }
        }
        Ok(verdicts)
    }

    // ----- coherence assertion ------------------------------------------

    /// Checks, for every node, that the stored formula (with its deferred
    /// atoms expanded) is propositionally equivalent to the direct
    /// unfolding of the semantics over the current observation with known
    /// truth values substituted. Nodes whose check would exceed the atom
    /// budget are skipped and counted.
    pub fn debug_coherence(&self) -> CoherenceReport {
        let mut report = CoherenceReport::default();
        let obs = self.observation();
        let mut evaluator = oracle::Evaluator::new(&self.formula, &obs);
        let positions: HashMap<Interval, usize> = obs
            .letters()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.interval.clone(), i))
            .collect();
        for (key, node) in &self.nodes {
            let Some(&pos) = positions.get(&key.iv) else {
                report
                    .failures
                    .push(format!("{key}: interval not part of the current observation"));
                continue;
            };
            let mu = match self.formula.kind(key.node) {
                FormulaKind::Freeze { reg, var, .. } => {
                    let mut mu = key.val.clone();
                    match self.rho_at(&key.iv).and_then(|r| r.get(reg)) {
                        Some(d) => {
                            mu.insert(var.clone(), d.clone());
                        }
                        None => {
                            mu.remove(var);
                        }
                    }
                    mu
                }
                _ => key.val.clone(),
            };
            let phi = self.build_phi(key.node, pos, &obs);
            let mut theta = Substitution::new();
            phi.visit_atoms(&mut |a| {
                if let Atom::Sub { node, iv } = a {
                    let p = positions[iv];
                    if let Ok(v) = evaluator.eval(p, &mu, *node) {
                        if let Some(b) = v.as_bool() {
                            theta.insert(a.clone(), PropFormula::Const(b));
                        }
                    }
                }
            });
            let theta_phi = phi.substitute(&theta);
            let expanded = self.conceptual_psi(key, &node.psi);
            let delta_psi = match self.expand_bars(key, &expanded) {
                Ok(f) => f,
                Err(msg) => {
                    report.failures.push(format!("{key}: {msg}"));
                    continue;
                }
            };
            match equiv(&theta_phi, &delta_psi, 20) {
                Ok(true) => report.checked += 1,
                Ok(false) => report.failures.push(format!(
                    "{key}: semantics {theta_phi} vs stored {delta_psi}"
                )),
                Err(_) => report.skipped += 1,
            }
        }
        report
    }

    /// The direct propositional unfolding of the semantics of `node` at
    /// position `pos` of the observation.
    fn build_phi(&self, node: NodeId, pos: usize, obs: &Observation) -> PropFormula {
        let ivs: Vec<Interval> = obs.letters().iter().map(|l| l.interval.clone()).collect();
        let tp_prop = |k: usize| -> PropFormula {
            if ivs[k].is_singleton() {
                TRUE
            } else {
                pf_atom(Atom::Tp { iv: ivs[k].clone() })
            }
        };
        match self.formula.kind(node).clone() {
            FormulaKind::True => TRUE,
            FormulaKind::Pred { .. } | FormulaKind::Cmp { .. } => {
                pf_atom(Atom::Sub { node, iv: ivs[pos].clone() })
            }
            FormulaKind::Not(a) => pf_not(self.sub_prop(a, &ivs[pos])),
            FormulaKind::Or(a, b) => {
                pf_or(vec![self.sub_prop(a, &ivs[pos]), self.sub_prop(b, &ivs[pos])])
            }
            FormulaKind::Freeze { body, .. } => self.sub_prop(body, &ivs[pos]),
            FormulaKind::Until { interval: cons, left, right } => {
                let mut disjuncts = Vec::new();
                let mut chain: Vec<PropFormula> = Vec::new();
                for k in pos..ivs.len() {
                    let tcv = self.tc_prop(node, &cons, &ivs[k], &ivs[pos]);
                    let mut parts = vec![tp_prop(k), tcv, self.sub_prop(right, &ivs[k])];
                    parts.extend(chain.iter().cloned());
                    disjuncts.push(pf_and(parts));
                    chain.push(pf_or(vec![pf_not(tp_prop(k)), self.sub_prop(left, &ivs[k])]));
                }
                pf_or(disjuncts)
            }
        }
    }

    /// Expands the deferred bar atoms of a stored formula into their
    /// `tp`/`Sub` definitions, consulting child node values. Returns an
    /// error description when an atom should already have been
    /// instantiated.
    fn expand_bars(&self, key: &NodeKey, psi: &PropFormula) -> Result<PropFormula, String> {
        let mut th = Substitution::new();
        let mut err = None;
        psi.visit_atoms(&mut |a| {
            if err.is_some() {
                return;
            }
            let child_value = |child: NodeId| -> Result<Option<bool>, String> {
                if matches!(self.formula.kind(child), FormulaKind::True) {
                    return Ok(Some(true));
                }
                let ck = self
                    .child_key_of_atom(key, a)
                    .ok_or_else(|| "untracked child".to_string())?;
                Ok(self.nodes.get(&ck).and_then(|n| n.psi.constant_value()))
            };
            let result: Result<PropFormula, String> = match a {
                Atom::BarBeta { node: c, iv } => child_value(*c).and_then(|v| {
                    let tp = pf_atom(Atom::Tp { iv: iv.clone() });
                    let sub = pf_atom(Atom::Sub { node: *c, iv: iv.clone() });
                    match (iv.is_singleton(), v) {
                        (false, None) => Ok(pf_and(vec![tp, sub])),
                        (false, Some(true)) => Ok(tp),
                        (true, None) => Ok(sub),
                        (s, Some(b)) => Err(format!(
                            "stale anchor-witness atom {a} (singleton={s}, child={b})"
                        )),
                    }
                }),
                Atom::BarAlpha { node: c, iv } => child_value(*c).and_then(|v| {
                    let tp = pf_atom(Atom::Tp { iv: iv.clone() });
                    let sub = pf_atom(Atom::Sub { node: *c, iv: iv.clone() });
                    match (iv.is_singleton(), v) {
                        (false, None) => Ok(pf_or(vec![pf_not(tp), sub])),
                        (false, Some(false)) => Ok(pf_not(tp)),
                        (true, None) => Ok(sub),
                        (s, Some(b)) => {
                            Err(format!("stale left-chain atom {a} (singleton={s}, child={b})"))
                        }
                    }
                }),
                Atom::BarBarAlpha { node: c, iv } => child_value(*c).and_then(|v| {
                    let tp = pf_atom(Atom::Tp { iv: iv.clone() });
                    let sub = pf_atom(Atom::Sub { node: *c, iv: iv.clone() });
                    match (iv.is_singleton(), v) {
                        (false, None) => Ok(pf_or(vec![tp, sub])),
                        (false, Some(false)) => Ok(tp),
                        (s, v) => Err(format!(
                            "stale witness-guard atom {a} (singleton={s}, child={v:?})"
                        )),
                    }
                }),
                Atom::SuffixBeta { .. } => Err("unexpanded suffix atom".to_string()),
                _ => Ok(pf_atom(a.clone())),
            };
            match result {
                Ok(f) => {
                    th.insert(a.clone(), f);
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(psi.substitute(&th))
    }

    #[cfg(test)]
    fn set_psi_for_test(&mut self, key: &NodeKey, psi: PropFormula) {
        self.set_psi(key, psi);
    }
}
