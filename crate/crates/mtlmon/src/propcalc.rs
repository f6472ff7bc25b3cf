//! The propositional calculus the monitor state is made of: indexed atomic
//! propositions, constant-folding simplification, substitution, and a
//! truth-table equivalence check for tests and the coherence assertion.
//!
//! Formulas are kept in a canonical simplified form: connectives are n-ary
//! and flattened, children are sorted and deduplicated, no constant appears
//! under a connective, and no double negation survives. Simplification is
//! deliberately limited to constant folding; anything stronger would let
//! verdicts propagate along paths the update rules do not cover.

use crate::formula::NodeId;
use crate::trace::Interval;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// An indexed atomic proposition.
///
/// `Sub` stands for the truth value of a subformula occurrence on an
/// interval. `Tp` stands for "this interval is a time point" and `Tc` for
/// "the metric constraint of the given until holds between the future and
/// anchor intervals". The bar atoms are the deferred-instantiation forms
/// stored inside until formulas: `BarBeta` for `tp and sub`, `BarAlpha` for
/// `tp implies sub`, and `BarBarAlpha` for `tp or sub`; they are only
/// instantiated once singleton-ness of their interval is settled.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Atom {
    Sub { node: NodeId, iv: Interval },
    Tp { iv: Interval },
    Tc { until: NodeId, future: Interval, anchor: Interval },
    BarBeta { node: NodeId, iv: Interval },
    BarAlpha { node: NodeId, iv: Interval },
    BarBarAlpha { node: NodeId, iv: Interval },
    /// The deferred disjunct of an until over the yet-unsplit rest of the
    /// timeline, relative to the interval of the node holding it. Only
    /// used for untils whose left operand is the constant true.
    SuffixBeta { until: NodeId },
}

impl Atom {
    fn kind_rank(&self) -> u8 {
        match self {
            Atom::Sub { .. } => 0,
            Atom::BarBeta { .. } => 1,
            Atom::BarAlpha { .. } => 2,
            Atom::BarBarAlpha { .. } => 3,
            Atom::Tc { .. } => 4,
            Atom::Tp { .. } => 5,
            Atom::SuffixBeta { .. } => 6,
        }
    }

    fn node_key(&self) -> u32 {
        match self {
            Atom::Sub { node, .. }
            | Atom::BarBeta { node, .. }
            | Atom::BarAlpha { node, .. }
            | Atom::BarBarAlpha { node, .. } => node.0,
            Atom::Tc { until, .. } | Atom::SuffixBeta { until } => until.0,
            Atom::Tp { .. } => u32::MAX,
        }
    }

    /// The interval the atom is indexed by (the future interval for `Tc`);
    /// suffix atoms are not indexed by a concrete interval.
    pub fn interval(&self) -> Option<&Interval> {
        match self {
            Atom::Sub { iv, .. }
            | Atom::Tp { iv }
            | Atom::BarBeta { iv, .. }
            | Atom::BarAlpha { iv, .. }
            | Atom::BarBarAlpha { iv, .. } => Some(iv),
            Atom::Tc { future, .. } => Some(future),
            Atom::SuffixBeta { .. } => None,
        }
    }

    /// The anchor interval of a `Tc` atom.
    pub fn anchor(&self) -> Option<&Interval> {
        match self {
            Atom::Tc { anchor, .. } => Some(anchor),
            _ => None,
        }
    }

    /// The subformula occurrence this atom tracks, when it tracks one.
    pub fn tracked_node(&self) -> Option<NodeId> {
        match self {
            Atom::Sub { node, .. }
            | Atom::BarBeta { node, .. }
            | Atom::BarAlpha { node, .. }
            | Atom::BarBarAlpha { node, .. } => Some(*node),
            _ => None,
        }
    }
}

impl PartialOrd for Atom {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Atom {
    fn cmp(&self, other: &Self) -> Ordering {
        self.node_key()
            .cmp(&other.node_key())
            .then_with(|| self.interval().cmp(&other.interval()))
            .then_with(|| self.kind_rank().cmp(&other.kind_rank()))
            .then_with(|| match (self, other) {
                (Atom::Tc { anchor: a, .. }, Atom::Tc { anchor: b, .. }) => a.cmp(b),
                _ => Ordering::Equal,
            })
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Sub { node, iv } => write!(f, "{node}^{iv}"),
            Atom::Tp { iv } => write!(f, "tp^{iv}"),
            Atom::Tc { until, future, anchor } => write!(f, "tc_{until}^{{{future},{anchor}}}"),
            Atom::BarBeta { node, iv } => write!(f, "bB({node})^{iv}"),
            Atom::BarAlpha { node, iv } => write!(f, "bA({node})^{iv}"),
            Atom::BarBarAlpha { node, iv } => write!(f, "bbA({node})^{iv}"),
            Atom::SuffixBeta { until } => write!(f, "suffix({until})"),
        }
    }
}

/// A propositional formula in canonical simplified form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PropFormula {
    Const(bool),
    Atom(Atom),
    Not(Box<PropFormula>),
    And(Vec<PropFormula>),
    Or(Vec<PropFormula>),
}

/// A simultaneous replacement of atoms by formulas.
pub type Substitution = BTreeMap<Atom, PropFormula>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("equivalence check over {0} atoms exceeds the budget of {1}")]
pub struct AtomBudgetExceeded(pub usize, pub usize);

pub const TRUE: PropFormula = PropFormula::Const(true);
pub const FALSE: PropFormula = PropFormula::Const(false);

/// Negation with constant folding and double-negation elimination.
pub fn pf_not(f: PropFormula) -> PropFormula {
    match f {
        PropFormula::Const(b) => PropFormula::Const(!b),
        PropFormula::Not(inner) => *inner,
        other => PropFormula::Not(Box::new(other)),
    }
}

fn nary(items: Vec<PropFormula>, conj: bool) -> PropFormula {
    let (identity, absorbing) = (conj, !conj);
    let mut flat = Vec::with_capacity(items.len());
    let mut stack: Vec<PropFormula> = items.into_iter().rev().collect();
    while let Some(item) = stack.pop() {
        match item {
            PropFormula::Const(b) if b == identity => {}
            PropFormula::Const(b) => {
                debug_assert_eq!(b, absorbing);
                return PropFormula::Const(absorbing);
            }
            PropFormula::And(children) if conj => stack.extend(children.into_iter().rev()),
            PropFormula::Or(children) if !conj => stack.extend(children.into_iter().rev()),
            other => flat.push(other),
        }
    }
    flat.sort();
    flat.dedup();
    match flat.len() {
        0 => PropFormula::Const(identity),
        1 => flat.into_iter().next().unwrap(),
        _ => {
            if conj {
                PropFormula::And(flat)
            } else {
                PropFormula::Or(flat)
            }
        }
    }
}

/// N-ary conjunction with flattening, constant folding, and a canonical
/// child order.
pub fn pf_and(items: Vec<PropFormula>) -> PropFormula {
    nary(items, true)
}

/// N-ary disjunction, dual to [`pf_and`].
pub fn pf_or(items: Vec<PropFormula>) -> PropFormula {
    nary(items, false)
}

pub fn pf_atom(a: Atom) -> PropFormula {
    PropFormula::Atom(a)
}

impl PropFormula {
    /// Re-establishes the canonical form bottom-up. The smart constructors
    /// keep formulas simplified, so this is mainly useful for tests that
    /// build formulas by hand.
    pub fn simplify(&self) -> PropFormula {
        match self {
            PropFormula::Const(_) | PropFormula::Atom(_) => self.clone(),
            PropFormula::Not(a) => pf_not(a.simplify()),
            PropFormula::And(items) => pf_and(items.iter().map(|i| i.simplify()).collect()),
            PropFormula::Or(items) => pf_or(items.iter().map(|i| i.simplify()).collect()),
        }
    }

    /// Simultaneous substitution followed by simplification. Atoms outside
    /// the substitution's domain are unchanged.
    pub fn substitute(&self, th: &Substitution) -> PropFormula {
        match self {
            PropFormula::Const(_) => self.clone(),
            PropFormula::Atom(a) => th.get(a).cloned().unwrap_or_else(|| self.clone()),
            PropFormula::Not(inner) => pf_not(inner.substitute(th)),
            PropFormula::And(items) => pf_and(items.iter().map(|i| i.substitute(th)).collect()),
            PropFormula::Or(items) => pf_or(items.iter().map(|i| i.substitute(th)).collect()),
        }
    }

    pub fn visit_atoms(&self, f: &mut impl FnMut(&Atom)) {
        match self {
            PropFormula::Const(_) => {}
            PropFormula::Atom(a) => f(a),
            PropFormula::Not(inner) => inner.visit_atoms(f),
            PropFormula::And(items) | PropFormula::Or(items) => {
                for i in items {
                    i.visit_atoms(f);
                }
            }
        }
    }

    pub fn atoms(&self) -> BTreeSet<Atom> {
        let mut s = BTreeSet::new();
        self.visit_atoms(&mut |a| {
            s.insert(a.clone());
        });
        s
    }

    /// `Some(b)` when the formula is the constant `b`.
    pub fn constant_value(&self) -> Option<bool> {
        match self {
            PropFormula::Const(b) => Some(*b),
            _ => None,
        }
    }

    pub fn eval(&self, assign: &impl Fn(&Atom) -> bool) -> bool {
        match self {
            PropFormula::Const(b) => *b,
            PropFormula::Atom(a) => assign(a),
            PropFormula::Not(inner) => !inner.eval(assign),
            PropFormula::And(items) => items.iter().all(|i| i.eval(assign)),
            PropFormula::Or(items) => items.iter().any(|i| i.eval(assign)),
        }
    }
}

/// Truth-table equivalence over the union of both atom sets.
pub fn equiv(f: &PropFormula, g: &PropFormula, max_atoms: usize) -> Result<bool, AtomBudgetExceeded> {
    let mut atoms = f.atoms();
    atoms.extend(g.atoms());
    let atoms: Vec<Atom> = atoms.into_iter().collect();
    if atoms.len() > max_atoms {
        return Err(AtomBudgetExceeded(atoms.len(), max_atoms));
    }
    let index: BTreeMap<&Atom, usize> = atoms.iter().enumerate().map(|(i, a)| (a, i)).collect();
    for mask in 0u64..(1u64 << atoms.len()) {
        let assign = |a: &Atom| mask & (1 << index[a]) != 0;
        if f.eval(&assign) != g.eval(&assign) {
            return Ok(false);
        }
    }
    Ok(true)
}

impl fmt::Display for PropFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropFormula::Const(true) => write!(f, "T"),
            PropFormula::Const(false) => write!(f, "F"),
            PropFormula::Atom(a) => write!(f, "{a}"),
            PropFormula::Not(inner) => write!(f, "!{inner}"),
            PropFormula::And(items) => {
                write!(f, "(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " & ")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, ")")
            }
            PropFormula::Or(items) => {
                write!(f, "(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " | ")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::rat;
    use proptest::prelude::*;

    fn iv(lo: i64, hi: i64) -> Interval {
        Interval::new(rat(lo, 1), false, Some(rat(hi, 1)), true).unwrap()
    }

    fn sub(n: u32, lo: i64, hi: i64) -> PropFormula {
        pf_atom(Atom::Sub { node: NodeId(n), iv: iv(lo, hi) })
    }

    #[test]
    fn simplify_constants() {
        assert_eq!(pf_not(TRUE), FALSE);
        assert_eq!(pf_and(vec![TRUE, pf_or(vec![sub(0, 0, 1), FALSE])]), sub(0, 0, 1));
        assert_eq!(pf_or(vec![FALSE, FALSE]), FALSE);
        assert_eq!(pf_not(pf_not(sub(1, 0, 1))), sub(1, 0, 1));
    }

    #[test]
    fn substitute_identity_and_annihilator() {
        let a = Atom::Sub { node: NodeId(0), iv: iv(0, 1) };
        let b = Atom::Sub { node: NodeId(1), iv: iv(0, 1) };
        let f = pf_or(vec![pf_atom(a.clone()), pf_atom(b.clone())]);
        let mut th = Substitution::new();
        th.insert(a.clone(), FALSE);
        assert_eq!(f.substitute(&th), pf_atom(b.clone()));
        th.insert(a.clone(), TRUE);
        assert_eq!(f.substitute(&th), TRUE);
    }

    #[test]
    fn substitute_bar_pair_to_false() {
        // The shape stored for an until with both children pending.
        let bb = Atom::BarBeta { node: NodeId(0), iv: iv(0, 2) };
        let bba = Atom::BarBarAlpha { node: NodeId(1), iv: iv(0, 2) };
        let f = pf_and(vec![pf_atom(bb.clone()), pf_atom(bba)]);
        let mut th = Substitution::new();
        th.insert(bb, FALSE);
        assert_eq!(f.substitute(&th), FALSE);
    }

    #[test]
    fn atoms_and_constants() {
        let f = pf_or(vec![
            pf_atom(Atom::BarBeta { node: NodeId(3), iv: iv(0, 1) }),
            pf_atom(Atom::BarBeta { node: NodeId(3), iv: iv(1, 2) }),
        ]);
        assert_eq!(f.atoms().len(), 2);
        assert_eq!(TRUE.constant_value(), Some(true));
        assert_eq!(f.constant_value(), None);
    }

    #[test]
    fn equivalence_basics() {
        let x = sub(0, 0, 1);
        let y = sub(1, 0, 1);
        let absorb = pf_and(vec![x.clone(), pf_or(vec![x.clone(), y.clone()])]);
        assert!(equiv(&absorb, &x, 20).unwrap());
        assert!(!equiv(&x, &pf_not(x.clone()), 20).unwrap());

        // tp^K == tp^K & (tp^K | a^K)
        let tp = pf_atom(Atom::Tp { iv: iv(0, 1) });
        let a = sub(0, 0, 1);
        let rhs = pf_and(vec![tp.clone(), pf_or(vec![tp.clone(), a])]);
        assert!(equiv(&tp, &rhs, 20).unwrap());
    }

    #[test]
    fn equivalence_budget() {
        let many: Vec<PropFormula> = (0..25).map(|n| sub(n, 0, 1)).collect();
        let f = pf_or(many);
        assert!(equiv(&f, &TRUE, 20).is_err());
    }

    fn arb_formula() -> impl Strategy<Value = PropFormula> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(PropFormula::Const),
            (0u32..8).prop_map(|n| sub(n, 0, 1)),
        ];
        leaf.prop_recursive(4, 32, 4, |inner| {
            prop_oneof![
                inner.clone().prop_map(pf_not),
                proptest::collection::vec(inner.clone(), 0..4).prop_map(pf_and),
                proptest::collection::vec(inner, 0..4).prop_map(pf_or),
            ]
        })
    }

    fn well_formed(f: &PropFormula) -> bool {
        match f {
            PropFormula::Const(_) | PropFormula::Atom(_) => true,
            PropFormula::Not(inner) => {
                !matches!(**inner, PropFormula::Const(_) | PropFormula::Not(_)) && well_formed(inner)
            }
            PropFormula::And(items) => {
                items.len() >= 2
                    && items.iter().all(|i| {
                        !matches!(i, PropFormula::Const(_) | PropFormula::And(_)) && well_formed(i)
                    })
            }
            PropFormula::Or(items) => {
                items.len() >= 2
                    && items.iter().all(|i| {
                        !matches!(i, PropFormula::Const(_) | PropFormula::Or(_)) && well_formed(i)
                    })
            }
        }
    }

    proptest! {
        #[test]
        fn simplify_idempotent_and_equivalence_preserving(f in arb_formula()) {
            let s = f.simplify();
            prop_assert_eq!(&s, &s.simplify());
            prop_assert!(well_formed(&s));
            prop_assert!(equiv(&f, &s, 20).unwrap());
            // A formula with no atoms simplifies to a constant.
            if s.atoms().is_empty() {
                prop_assert!(s.constant_value().is_some());
            }
        }

        #[test]
        fn full_constant_substitution_yields_constant(f in arb_formula()) {
            let mut th = Substitution::new();
            for (i, a) in f.atoms().into_iter().enumerate() {
                th.insert(a, PropFormula::Const(i % 2 == 0));
            }
            prop_assert!(f.substitute(&th).constant_value().is_some());
        }

        #[test]
        fn substitution_composes_on_disjoint_domains(f in arb_formula()) {
            // th1 maps even nodes to fresh atoms, th2 maps those to constants.
            let mut th1 = Substitution::new();
            let mut th2 = Substitution::new();
            for a in f.atoms() {
                if let Atom::Sub { node, iv } = &a {
                    if node.0 % 2 == 0 {
                        let fresh = Atom::Sub { node: NodeId(node.0 + 100), iv: iv.clone() };
                        th1.insert(a.clone(), pf_atom(fresh.clone()));
                        th2.insert(fresh, PropFormula::Const(node.0 % 4 == 0));
                    }
                }
            }
            let mut composed = Substitution::new();
            for (a, g) in &th1 {
                composed.insert(a.clone(), g.substitute(&th2));
            }
            for (a, g) in &th2 {
                composed.entry(a.clone()).or_insert_with(|| g.clone());
            }
            let two_step = f.substitute(&th1).substitute(&th2);
            let one_step = f.substitute(&composed);
            prop_assert!(equiv(&two_step, &one_step, 20).unwrap());
        }
    }
}
