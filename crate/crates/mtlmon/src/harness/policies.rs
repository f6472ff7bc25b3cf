//! Bundled banking compliance policies: four data policies over
//! transaction events with frozen customer/transaction/amount registers,
//! and four propositional counterparts.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    P1,
    P2,
    P3,
    P4,
    P1Prop,
    P2Prop,
    P3Prop,
    P4Prop,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::P1,
        Policy::P2,
        Policy::P3,
        Policy::P4,
        Policy::P1Prop,
        Policy::P2Prop,
        Policy::P3Prop,
        Policy::P4Prop,
    ];

    pub const DATA: [Policy; 4] = [Policy::P1, Policy::P2, Policy::P3, Policy::P4];
    pub const PROP: [Policy; 4] = [Policy::P1Prop, Policy::P2Prop, Policy::P3Prop, Policy::P4Prop];

    pub fn is_propositional(self) -> bool {
        matches!(self, Policy::P1Prop | Policy::P2Prop | Policy::P3Prop | Policy::P4Prop)
    }

    /// The property under the outermost always-quantifier.
    pub fn body_text(self) -> &'static str {
        match self {
            Policy::P1 => {
                "freeze cid as c . freeze tid as t . freeze sum as a . \
                 (trans(c,t,a) & a > 2000 -> F[0,3] report(t))"
            }
            Policy::P2 => {
                "freeze cid as c . freeze tid as t . freeze sum as a . \
                 (trans(c,t,a) & a > 2000 -> G(0,3] (freeze tid as t2 . freeze sum as a2 . \
                 (trans(c,t2,a2) -> a2 <= 2000)))"
            }
            Policy::P3 => {
                "freeze cid as c . freeze tid as t . freeze sum as a . \
                 (trans(c,t,a) & a > 2000 -> \
                 ((freeze tid as t2 . freeze sum as a2 . (trans(c,t2,a2) -> t == t2)) W report(t)))"
            }
            Policy::P4 => {
                "freeze cid as c . freeze tid as t . freeze sum as a . \
                 (trans(c,t,a) & a > 2000 -> G[0,6] (freeze tid as t2 . freeze sum as a2 . \
                 (trans(c,t2,a2) -> F[0,3] report(t2))))"
            }
            Policy::P1Prop => "transaction() & suspicious() -> F[0,3] report()",
            Policy::P2Prop => "transaction() & suspicious() -> G(0,3] (transaction() -> !suspicious())",
            Policy::P3Prop => {
                "transaction() & suspicious() -> ((transaction() -> F[0,3] report()) W unflag())"
            }
            Policy::P4Prop => {
                "transaction() & suspicious() -> G[0,6] (transaction() -> F[0,3] report())"
            }
        }
    }

    pub fn formula_text(self) -> String {
        format!("G ({})", self.body_text())
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Policy::P1 => "P1",
            Policy::P2 => "P2",
            Policy::P3 => "P3",
            Policy::P4 => "P4",
            Policy::P1Prop => "P1'",
            Policy::P2Prop => "P2'",
            Policy::P3Prop => "P3'",
            Policy::P4Prop => "P4'",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Policy::P1),
            "P2" => Ok(Policy::P2),
            "P3" => Ok(Policy::P3),
            "P4" => Ok(Policy::P4),
            "P1'" | "P1P" => Ok(Policy::P1Prop),
            "P2'" | "P2P" => Ok(Policy::P2Prop),
            "P3'" | "P3P" => Ok(Policy::P3Prop),
            "P4'" | "P4P" => Ok(Policy::P4Prop),
            other => Err(format!("unknown policy '{other}' (expected P1..P4 or P1'..P4')")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    #[test]
    fn all_policies_parse_and_are_closed() {
        for p in Policy::ALL {
            let f = parse_formula(&p.formula_text()).unwrap_or_else(|e| panic!("{p}: {e}"));
            assert!(f.is_closed(), "{p} must be closed");
            let body = parse_formula(&p.body_text()).unwrap();
            assert!(body.is_closed(), "{p} body must be closed");
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("p2p".parse::<Policy>().unwrap(), Policy::P2Prop);
        assert!("P9".parse::<Policy>().is_err());
    }
}
