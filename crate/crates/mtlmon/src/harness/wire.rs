//! The line-based wire format, used both for log files and UDP payloads:
//!
//! ```text
//! line   := comp "|" seq "|" ts "|" facts "|" regs
//! facts  := "" | fact ("," fact)*    fact := pred "(" vals? ")"
//! regs   := "" | assign ("," assign)*  assign := reg "=" val
//! val    := decimal integer | quoted string
//! ```
//!
//! Listed facts define the relation of their predicate; unlisted monitored
//! predicates are empty. Unlisted monitored registers default to the
//! integer 0 (applied by the replay layer, which knows the formula).

use crate::trace::{rat_from_decimal, rat_to_decimal, Message, Rho, Sigma, Value};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed message: {0}")]
pub struct WireError(pub String);

pub fn format_message(m: &Message) -> String {
    let mut facts = String::new();
    let mut first = true;
    for (p, rel) in &m.facts {
        for tuple in rel {
            if !first {
                facts.push(',');
            }
            first = false;
            facts.push_str(p);
            facts.push('(');
            for (i, v) in tuple.iter().enumerate() {
                if i > 0 {
                    facts.push(',');
                }
                facts.push_str(&format_value(v));
            }
            facts.push(')');
        }
        if rel.is_empty() {
            // An explicitly empty relation needs no entry: unlisted
            // predicates are empty by convention.
        }
    }
    let regs = m
        .regs
        .iter()
        .map(|(r, v)| format!("{r}={}", format_value(v)))
        .collect::<Vec<_>>()
        .join(",");
    format!("{}|{}|{}|{}|{}", m.comp, m.seq, rat_to_decimal(&m.ts), facts, regs)
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Str(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                if c == '"' || c == '\\' {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('"');
            out
        }
    }
}

struct Scanner<'a> {
    chars: Vec<char>,
    pos: usize,
    line: &'a str,
}

impl<'a> Scanner<'a> {
    fn new(s: &'a str) -> Self {
        Scanner { chars: s.chars().collect(), pos: 0, line: s }
    }

    fn err(&self, msg: &str) -> WireError {
        WireError(format!("{msg} at offset {} in {:?}", self.pos, self.line))
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn eat(&mut self, c: char) -> Result<(), WireError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{c}'")))
        }
    }

    fn ident(&mut self) -> Result<String, WireError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected an identifier"));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn value(&mut self) -> Result<Value, WireError> {
        match self.peek() {
            Some('"') => {
                self.pos += 1;
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some('"') => return Ok(Value::Str(s)),
                        Some('\\') => match self.bump() {
                            Some(c) => s.push(c),
                            None => return Err(self.err("unterminated escape")),
                        },
                        Some(c) => s.push(c),
                        None => return Err(self.err("unterminated string")),
                    }
                }
            }
            Some(c) if c == '-' || c.is_ascii_digit() => {
                let start = self.pos;
                if c == '-' {
                    self.pos += 1;
                }
                while self.peek().map(|c| c.is_ascii_digit()).unwrap_or(false) {
                    self.pos += 1;
                }
                let text: String = self.chars[start..self.pos].iter().collect();
                text.parse::<i64>().map(Value::Int).map_err(|_| self.err("bad integer"))
            }
            _ => Err(self.err("expected a value")),
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.chars.len()
    }
}

/// Splits on `|` outside quoted strings.
fn split_fields(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut in_string = false;
    let mut escaped = false;
    for c in line.chars() {
        if escaped {
            fields.last_mut().unwrap().push(c);
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_string => {
                fields.last_mut().unwrap().push(c);
                escaped = true;
            }
            '"' => {
                fields.last_mut().unwrap().push(c);
                in_string = !in_string;
            }
            '|' if !in_string => fields.push(String::new()),
            c => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

pub fn parse_message(line: &str) -> Result<Message, WireError> {
    let parts: Vec<String> = split_fields(line);
    if parts.len() != 5 {
        return Err(WireError(format!("expected 5 '|'-separated fields in {line:?}")));
    }
    let comp = parts[0].trim().to_string();
    if comp.is_empty() {
        return Err(WireError("empty component".into()));
    }
    let seq: u64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| WireError(format!("bad sequence number {:?}", parts[1])))?;
    if seq == 0 {
        return Err(WireError("sequence numbers start at 1".into()));
    }
    let ts = rat_from_decimal(parts[2].trim())
        .ok_or_else(|| WireError(format!("bad timestamp {:?}", parts[2])))?;

    let mut facts = Sigma::new();
    let facts_str = parts[3].trim().to_string();
    if !facts_str.is_empty() {
        let mut sc = Scanner::new(&facts_str);
        loop {
            let pred = sc.ident()?;
            sc.eat('(')?;
            let mut tuple = Vec::new();
            if sc.peek() != Some(')') {
                loop {
                    tuple.push(sc.value()?);
                    if sc.peek() == Some(',') {
                        sc.pos += 1;
                    } else {
                        break;
                    }
                }
            }
            sc.eat(')')?;
            facts.entry(pred).or_insert_with(BTreeSet::new).insert(tuple);
            if sc.done() {
                break;
            }
            sc.eat(',')?;
        }
    }

    let mut regs = Rho::new();
    let regs_str = parts[4].trim().to_string();
    if !regs_str.is_empty() {
        let mut sc = Scanner::new(&regs_str);
        loop {
            let reg = sc.ident()?;
            sc.eat('=')?;
            let v = sc.value()?;
            regs.insert(reg, v);
            if sc.done() {
                break;
            }
            sc.eat(',')?;
        }
    }

    Ok(Message { comp, seq, ts, facts, regs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::rat;
    use proptest::prelude::*;

    #[test]
    fn parse_basic_line() {
        let m = parse_message("c0|3|12.125|trans(5,42,2500),report(42)|cid=5,tid=42,sum=2500").unwrap();
        assert_eq!(m.comp, "c0");
        assert_eq!(m.seq, 3);
        assert_eq!(m.ts, rat(97, 8));
        assert_eq!(m.facts["trans"].len(), 1);
        assert!(m.facts["trans"].contains(&vec![Value::Int(5), Value::Int(42), Value::Int(2500)]));
        assert_eq!(m.regs["sum"], Value::Int(2500));
    }

    #[test]
    fn parse_empty_fields_and_strings() {
        let m = parse_message("c|1|0.5||").unwrap();
        assert!(m.facts.is_empty());
        assert!(m.regs.is_empty());
        let m = parse_message(r#"c|1|1.0|p("a,b","q\"x")|r="hi""#).unwrap();
        assert!(m.facts["p"].contains(&vec![Value::Str("a,b".into()), Value::Str("q\"x".into())]));
        assert_eq!(m.regs["r"], Value::Str("hi".into()));
    }

    #[test]
    fn reject_malformed() {
        assert!(parse_message("c|1|1.0|p(").is_err());
        assert!(parse_message("c|0|1.0||").is_err());
        assert!(parse_message("c|x|1.0||").is_err());
        assert!(parse_message("c|1|ts||").is_err());
        assert!(parse_message("only|three|fields").is_err());
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            (-100i64..100).prop_map(Value::Int),
            "[a-z\"\\\\,|()=]{0,6}".prop_map(Value::Str),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(
            comp in "[a-z][a-z0-9]{0,4}",
            seq in 1u64..1000,
            num in 0i64..100000,
            tuples in proptest::collection::vec(proptest::collection::vec(arb_value(), 0..3), 0..3),
            regs in proptest::collection::btree_map("[a-z]{1,3}", arb_value(), 0..3),
        ) {
            let mut facts = Sigma::new();
            for t in tuples {
                facts.entry("p".to_string()).or_default().insert(t);
            }
            let m = Message { comp, seq, ts: rat(num, 1000), facts, regs };
            let line = format_message(&m);
            let back = parse_message(&line).expect(&line);
            // Explicitly-empty relations are not representable on the wire;
            // they are equivalent to absence.
            let mut norm = m.clone();
            norm.facts.retain(|_, rel| !rel.is_empty());
            prop_assert_eq!(back, norm, "line: {}", line);
        }
    }
}
