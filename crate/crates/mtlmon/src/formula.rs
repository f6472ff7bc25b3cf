//! Formula syntax: the surface grammar with its parser and printer, the
//! desugaring into the primitive connectives, and the occurrence-indexed
//! core representation used by the evaluator and the monitor.
//!
//! Grammar (one formula per file, `#` starts a comment):
//!
//! ```text
//! phi  := "true" | ident "(" termlist? ")" | term cmp term
//!       | "!" phi | phi "&" phi | phi "|" phi | phi "->" phi
//!       | "freeze" ident "as" ident "." phi
//!       | phi "U" intv phi | phi "W" phi | "F" intv phi | "G" intv? phi
//! intv := ("["|"(") dec "," (dec|"inf") ("]"|")")
//! cmp  := ">" | ">=" | "<" | "<=" | "==" | "!="
//! term := ident | integer | quoted-string
//! ```
//!
//! Binding strength, tightest first: `!`, `&`, `|`, `->`, the temporal
//! connectives, `freeze`. Prefix temporal connectives extend as far right as
//! possible; `G` without an interval means `G[0,inf)`.

use crate::trace::{rat_from_decimal, Interval, Rat, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// A predicate argument or comparison operand.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Var(String),
    Int(i64),
    Str(String),
}

impl Term {
    /// The value of the term under `lookup`, when defined.
    pub fn value(&self, lookup: impl Fn(&str) -> Option<Value>) -> Option<Value> {
        match self {
            Term::Var(x) => lookup(x),
            Term::Int(i) => Some(Value::Int(*i)),
            Term::Str(s) => Some(Value::Str(s.clone())),
        }
    }

    pub fn var(&self) -> Option<&str> {
        match self {
            Term::Var(x) => Some(x),
            _ => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(x) => write!(f, "{x}"),
            Term::Int(i) => write!(f, "{i}"),
            Term::Str(s) => write!(f, "\"{s}\""),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl CmpOp {
    /// Rigid interpretation on bound values. Ordering comparisons require
    /// integers on both sides; mixed or non-integer operands order to false,
    /// while equality is decidable on the whole domain.
    pub fn eval(self, l: &Value, r: &Value) -> bool {
        match self {
            CmpOp::Eq => l == r,
            CmpOp::Ne => l != r,
            _ => match (l, r) {
                (Value::Int(a), Value::Int(b)) => match self {
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    _ => unreachable!(),
                },
                _ => false,
            },
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        };
        write!(f, "{s}")
    }
}

/// Surface syntax tree, including the sugared connectives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SugarForm {
    True,
    Pred(String, Vec<Term>),
    Cmp(Term, CmpOp, Term),
    Not(Box<SugarForm>),
    And(Box<SugarForm>, Box<SugarForm>),
    Or(Box<SugarForm>, Box<SugarForm>),
    Implies(Box<SugarForm>, Box<SugarForm>),
    Freeze { reg: String, var: String, body: Box<SugarForm> },
    Until(Interval, Box<SugarForm>, Box<SugarForm>),
    /// Weak until; supported only without a metric interval.
    WeakUntil(Box<SugarForm>, Box<SugarForm>),
    Eventually(Interval, Box<SugarForm>),
    Always(Interval, Box<SugarForm>),
}

impl SugarForm {
    pub fn node_count(&self) -> usize {
        match self {
            SugarForm::True | SugarForm::Pred(..) | SugarForm::Cmp(..) => 1,
            SugarForm::Not(a) | SugarForm::Freeze { body: a, .. } => 1 + a.node_count(),
            SugarForm::Eventually(_, a) | SugarForm::Always(_, a) => 1 + a.node_count(),
            SugarForm::And(a, b)
            | SugarForm::Or(a, b)
            | SugarForm::Implies(a, b)
            | SugarForm::Until(_, a, b)
            | SugarForm::WeakUntil(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    fn prec(&self) -> u8 {
        match self {
            SugarForm::Freeze { .. } => 1,
            SugarForm::Until(..)
            | SugarForm::WeakUntil(..)
            | SugarForm::Eventually(..)
            | SugarForm::Always(..) => 2,
            SugarForm::Implies(..) => 3,
            SugarForm::Or(..) => 4,
            SugarForm::And(..) => 5,
            SugarForm::Not(..) => 6,
            SugarForm::True | SugarForm::Pred(..) | SugarForm::Cmp(..) => 7,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let this = self.prec();
        let parens = this < min;
        if parens {
            write!(f, "(")?;
        }
        match self {
            SugarForm::True => write!(f, "true")?,
            SugarForm::Pred(name, args) => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")?;
            }
            SugarForm::Cmp(l, op, r) => write!(f, "{l} {op} {r}")?,
            SugarForm::Not(a) => {
                write!(f, "!")?;
                a.fmt_prec(f, 6)?;
            }
            SugarForm::And(a, b) => {
                a.fmt_prec(f, 5)?;
                write!(f, " & ")?;
                b.fmt_prec(f, 6)?;
            }
            SugarForm::Or(a, b) => {
                a.fmt_prec(f, 4)?;
                write!(f, " | ")?;
                b.fmt_prec(f, 5)?;
            }
            SugarForm::Implies(a, b) => {
                a.fmt_prec(f, 4)?;
                write!(f, " -> ")?;
                b.fmt_prec(f, 3)?;
            }
            SugarForm::Freeze { reg, var, body } => {
                write!(f, "freeze {reg} as {var} . ")?;
                body.fmt_prec(f, 1)?;
            }
            SugarForm::Until(iv, a, b) => {
                a.fmt_prec(f, 3)?;
                write!(f, " U{} ", fmt_interval(iv))?;
                b.fmt_prec(f, 2)?;
            }
            SugarForm::WeakUntil(a, b) => {
                a.fmt_prec(f, 3)?;
                write!(f, " W ")?;
                b.fmt_prec(f, 2)?;
            }
            SugarForm::Eventually(iv, a) => {
                write!(f, "F{} ", fmt_interval(iv))?;
                a.fmt_prec(f, 2)?;
            }
            SugarForm::Always(iv, a) => {
                write!(f, "G{} ", fmt_interval(iv))?;
                a.fmt_prec(f, 2)?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn fmt_interval(iv: &Interval) -> String {
    let lo_b = if iv.lo_open() { "(" } else { "[" };
    let lo = crate::trace::rat_to_decimal(iv.lo());
    match iv.hi() {
        None => format!("{lo_b}{lo},inf)"),
        Some(h) => {
            let hi_b = if iv.hi_open() { ")" } else { "]" };
            format!("{lo_b}{lo},{}{hi_b}", crate::trace::rat_to_decimal(h))
        }
    }
}

impl fmt::Display for SugarForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Dec(Rat),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Bang,
    Amp,
    Pipe,
    Arrow,
    Cmp(CmpOp),
    KwTrue,
    KwFreeze,
    KwAs,
    KwU,
    KwW,
    KwF,
    KwG,
    KwInf,
}

struct Lexer {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    end: (usize, usize),
}

fn lex(input: &str) -> Result<Lexer, ParseError> {
    let mut toks = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0usize;
    let err = |line: usize, col: usize, msg: String| ParseError { line, col, msg };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let advance = |i: &mut usize, col: &mut usize| {
            *i += 1;
            *col += 1;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => advance(&mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '(' => {
                toks.push((Tok::LParen, tl, tc));
                advance(&mut i, &mut col);
            }
            ')' => {
                toks.push((Tok::RParen, tl, tc));
                advance(&mut i, &mut col);
            }
            '[' => {
                toks.push((Tok::LBracket, tl, tc));
                advance(&mut i, &mut col);
            }
            ']' => {
                toks.push((Tok::RBracket, tl, tc));
                advance(&mut i, &mut col);
            }
            ',' => {
                toks.push((Tok::Comma, tl, tc));
                advance(&mut i, &mut col);
            }
            '.' => {
                toks.push((Tok::Dot, tl, tc));
                advance(&mut i, &mut col);
            }
            '&' => {
                toks.push((Tok::Amp, tl, tc));
                advance(&mut i, &mut col);
            }
            '|' => {
                toks.push((Tok::Pipe, tl, tc));
                advance(&mut i, &mut col);
            }
            '-' => {
                if i + 1 < chars.len() && chars[i + 1] == '>' {
                    toks.push((Tok::Arrow, tl, tc));
                    i += 2;
                    col += 2;
                } else if i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                    let mut j = i + 1;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    let text: String = chars[i..j].iter().collect();
                    let n: i64 = text
                        .parse()
                        .map_err(|_| err(tl, tc, format!("integer out of range: {text}")))?;
                    toks.push((Tok::Int(n), tl, tc));
                    col += j - i;
                    i = j;
                } else {
                    return Err(err(tl, tc, "unexpected '-'".into()));
                }
            }
            '!' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    toks.push((Tok::Cmp(CmpOp::Ne), tl, tc));
                    i += 2;
                    col += 2;
                } else {
                    toks.push((Tok::Bang, tl, tc));
                    advance(&mut i, &mut col);
                }
            }
            '=' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    toks.push((Tok::Cmp(CmpOp::Eq), tl, tc));
                    i += 2;
                    col += 2;
                } else {
                    return Err(err(tl, tc, "expected '=='".into()));
                }
            }
            '>' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    toks.push((Tok::Cmp(CmpOp::Ge), tl, tc));
                    i += 2;
                    col += 2;
                } else {
                    toks.push((Tok::Cmp(CmpOp::Gt), tl, tc));
                    advance(&mut i, &mut col);
                }
            }
            '<' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    toks.push((Tok::Cmp(CmpOp::Le), tl, tc));
                    i += 2;
                    col += 2;
                } else {
                    toks.push((Tok::Cmp(CmpOp::Lt), tl, tc));
                    advance(&mut i, &mut col);
                }
            }
            '"' => {
                let mut j = i + 1;
                let mut s = String::new();
                loop {
                    if j >= chars.len() {
                        return Err(err(tl, tc, "unterminated string literal".into()));
                    }
                    match chars[j] {
                        '"' => break,
                        '\\' if j + 1 < chars.len() => {
                            s.push(chars[j + 1]);
                            j += 2;
                        }
                        c => {
                            s.push(c);
                            j += 1;
                        }
                    }
                }
                toks.push((Tok::Str(s), tl, tc));
                col += j + 1 - i;
                i = j + 1;
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                if j < chars.len() && chars[j] == '.' && j + 1 < chars.len() && chars[j + 1].is_ascii_digit() {
                    let mut k = j + 1;
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                    let text: String = chars[i..k].iter().collect();
                    let r = rat_from_decimal(&text)
                        .ok_or_else(|| err(tl, tc, format!("bad decimal: {text}")))?;
                    toks.push((Tok::Dec(r), tl, tc));
                    col += k - i;
                    i = k;
                } else {
                    let text: String = chars[i..j].iter().collect();
                    let n: i64 = text
                        .parse()
                        .map_err(|_| err(tl, tc, format!("integer out of range: {text}")))?;
                    toks.push((Tok::Int(n), tl, tc));
                    col += j - i;
                    i = j;
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len()
                    && (chars[j].is_ascii_alphanumeric() || chars[j] == '_' || chars[j] == '\'')
                {
                    j += 1;
                }
                let word: String = chars[i..j].iter().collect();
                let tok = match word.as_str() {
                    "true" => Tok::KwTrue,
                    "freeze" => Tok::KwFreeze,
                    "as" => Tok::KwAs,
                    "U" => Tok::KwU,
                    "W" => Tok::KwW,
                    "F" => Tok::KwF,
                    "G" => Tok::KwG,
                    "inf" => Tok::KwInf,
                    _ => Tok::Ident(word),
                };
                toks.push((tok, tl, tc));
                col += j - i;
                i = j;
            }
            c => return Err(err(tl, tc, format!("unexpected character '{c}'"))),
        }
    }
    Ok(Lexer { toks, pos: 0, end: (line, col) })
}

impl Lexer {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1).map(|(t, _, _)| t)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map(|&(_, l, c)| (l, c)).unwrap_or(self.end)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError { line, col, msg: msg.into() }
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }
}

struct Parser {
    lx: Lexer,
    arities: BTreeMap<String, usize>,
}

impl Parser {
    // freeze level (loosest)
    fn phi(&mut self) -> Result<SugarForm, ParseError> {
        if self.lx.peek() == Some(&Tok::KwFreeze) {
            self.lx.next();
            let reg = self.ident("register name")?;
            self.lx.expect(Tok::KwAs, "'as'")?;
            let var = self.ident("variable name")?;
            self.lx.expect(Tok::Dot, "'.'")?;
            let body = self.phi()?;
            return Ok(SugarForm::Freeze { reg, var, body: Box::new(body) });
        }
        self.temporal()
    }

    fn temporal(&mut self) -> Result<SugarForm, ParseError> {
        match self.lx.peek() {
            Some(Tok::KwF) => {
                self.lx.next();
                let iv = self.interval()?;
                let body = self.phi()?;
                Ok(SugarForm::Eventually(iv, Box::new(body)))
            }
            Some(Tok::KwG) => {
                self.lx.next();
                let iv = if matches!(self.lx.peek(), Some(Tok::LBracket | Tok::LParen))
                    && self.starts_interval()
                {
                    self.interval()?
                } else {
                    Interval::zero_to_inf()
                };
                let body = self.phi()?;
                Ok(SugarForm::Always(iv, Box::new(body)))
            }
            _ => {
                let left = self.implication()?;
                match self.lx.peek() {
                    Some(Tok::KwU) => {
                        self.lx.next();
                        let iv = self.interval()?;
                        let right = self.temporal_or_prefix()?;
                        Ok(SugarForm::Until(iv, Box::new(left), Box::new(right)))
                    }
                    Some(Tok::KwW) => {
                        self.lx.next();
                        let right = self.temporal_or_prefix()?;
                        Ok(SugarForm::WeakUntil(Box::new(left), Box::new(right)))
                    }
                    _ => Ok(left),
                }
            }
        }
    }

    fn temporal_or_prefix(&mut self) -> Result<SugarForm, ParseError> {
        self.temporal()
    }

    /// A `(` or `[` starts an interval only when followed by a number.
    fn starts_interval(&self) -> bool {
        matches!(self.lx.peek2(), Some(Tok::Int(_) | Tok::Dec(_)))
    }

    fn implication(&mut self) -> Result<SugarForm, ParseError> {
        let left = self.disjunction()?;
        if self.lx.peek() == Some(&Tok::Arrow) {
            self.lx.next();
            // Right operand of an implication may itself start a prefix
            // temporal connective or an implication chain.
            let right = match self.lx.peek() {
                Some(Tok::KwF | Tok::KwG) => self.temporal()?,
                _ => self.implication()?,
            };
            return Ok(SugarForm::Implies(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn disjunction(&mut self) -> Result<SugarForm, ParseError> {
        let mut acc = self.conjunction()?;
        while self.lx.peek() == Some(&Tok::Pipe) {
            self.lx.next();
            let rhs = self.conjunction()?;
            acc = SugarForm::Or(Box::new(acc), Box::new(rhs));
        }
        Ok(acc)
    }

    fn conjunction(&mut self) -> Result<SugarForm, ParseError> {
        let mut acc = self.negation()?;
        while self.lx.peek() == Some(&Tok::Amp) {
            self.lx.next();
            let rhs = self.negation()?;
            acc = SugarForm::And(Box::new(acc), Box::new(rhs));
        }
        Ok(acc)
    }

    fn negation(&mut self) -> Result<SugarForm, ParseError> {
        match self.lx.peek() {
            Some(Tok::Bang) => {
                self.lx.next();
                let inner = self.negation()?;
                Ok(SugarForm::Not(Box::new(inner)))
            }
            Some(Tok::KwF | Tok::KwG) => self.temporal(),
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<SugarForm, ParseError> {
        match self.lx.peek().cloned() {
            Some(Tok::KwTrue) => {
                self.lx.next();
                Ok(SugarForm::True)
            }
            Some(Tok::LParen) => {
                self.lx.next();
                let inner = self.phi()?;
                self.lx.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if self.lx.peek2() == Some(&Tok::LParen) {
                    self.lx.next();
                    self.lx.next();
                    let mut args = Vec::new();
                    if self.lx.peek() != Some(&Tok::RParen) {
                        loop {
                            args.push(self.term()?);
                            if self.lx.peek() == Some(&Tok::Comma) {
                                self.lx.next();
                            } else {
                                break;
                            }
                        }
                    }
                    self.lx.expect(Tok::RParen, "')'")?;
                    if let Some(prev) = self.arities.get(&name) {
                        if *prev != args.len() {
                            return Err(self.lx.err(format!(
                                "arity mismatch for predicate '{name}': {} vs {}",
                                prev,
                                args.len()
                            )));
                        }
                    } else {
                        self.arities.insert(name.clone(), args.len());
                    }
                    Ok(SugarForm::Pred(name, args))
                } else {
                    let left = self.term()?;
                    self.cmp_tail(left)
                }
            }
            Some(Tok::Int(_)) | Some(Tok::Str(_)) => {
                let left = self.term()?;
                self.cmp_tail(left)
            }
            _ => Err(self.lx.err("expected a formula")),
        }
    }

    fn cmp_tail(&mut self, left: Term) -> Result<SugarForm, ParseError> {
        match self.lx.peek().cloned() {
            Some(Tok::Cmp(op)) => {
                self.lx.next();
                let right = self.term()?;
                Ok(SugarForm::Cmp(left, op, right))
            }
            _ => Err(self.lx.err("expected a comparison operator after a term")),
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.lx.next() {
            Some(Tok::Ident(x)) => Ok(Term::Var(x)),
            Some(Tok::Int(n)) => Ok(Term::Int(n)),
            Some(Tok::Str(s)) => Ok(Term::Str(s)),
            _ => Err(self.lx.err("expected a term")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.lx.next() {
            Some(Tok::Ident(x)) => Ok(x),
            _ => Err(self.lx.err(format!("expected {what}"))),
        }
    }

    fn interval(&mut self) -> Result<Interval, ParseError> {
        let lo_open = match self.lx.next() {
            Some(Tok::LBracket) => false,
            Some(Tok::LParen) => true,
            _ => return Err(self.lx.err("expected an interval")),
        };
        let lo = self.bound()?.ok_or_else(|| self.lx.err("interval left bound cannot be 'inf'"))?;
        self.lx.expect(Tok::Comma, "','")?;
        let hi = self.bound()?;
        let hi_open = match self.lx.next() {
            Some(Tok::RBracket) => false,
            Some(Tok::RParen) => true,
            _ => return Err(self.lx.err("expected ']' or ')'")),
        };
        if hi.is_none() && !hi_open {
            return Err(self.lx.err("'inf' requires a ')' bound"));
        }
        Interval::new(lo, lo_open, hi, hi_open)
            .map_err(|_| self.lx.err("malformed interval (empty or negative)"))
    }

    fn bound(&mut self) -> Result<Option<Rat>, ParseError> {
        match self.lx.next() {
            Some(Tok::Int(n)) if n >= 0 => Ok(Some(Rat::from_integer(n.into()))),
            Some(Tok::Int(_)) => Err(self.lx.err("interval bounds must be nonnegative")),
            Some(Tok::Dec(r)) => Ok(Some(r)),
            Some(Tok::KwInf) => Ok(None),
            _ => Err(self.lx.err("expected a bound")),
        }
    }
}

/// Parses the surface grammar into a syntax tree.
pub fn parse(input: &str) -> Result<SugarForm, ParseError> {
    let lx = lex(input)?;
    let mut p = Parser { lx, arities: BTreeMap::new() };
    let phi = p.phi()?;
    if p.lx.peek().is_some() {
        return Err(p.lx.err("trailing input after formula"));
    }
    Ok(phi)
}

/// Identifies one subformula occurrence in a [`Formula`].
///
/// Ids are assigned in a bottom-up traversal, so children always have
/// smaller ids than their parents and the root has the largest id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Primitive connectives; all sugar is desugared away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormulaKind {
    True,
    Pred { name: String, args: Vec<Term> },
    Cmp { left: Term, op: CmpOp, right: Term },
    Freeze { reg: String, var: String, body: NodeId },
    Not(NodeId),
    Or(NodeId, NodeId),
    Until { interval: Interval, left: NodeId, right: NodeId },
}

#[derive(Debug, Clone)]
struct FormulaNode {
    kind: FormulaKind,
    parent: Option<NodeId>,
    free: BTreeSet<String>,
}

/// A closed-world, occurrence-indexed formula: syntactically identical
/// subtrees at different positions are distinct nodes.
#[derive(Debug, Clone)]
pub struct Formula {
    nodes: Vec<FormulaNode>,
    root: NodeId,
}

impl Formula {
    /// Translates the sugared connectives into the primitive grammar:
    /// `a & b` to `!(!a | !b)`, `a -> b` to `!a | b`, `F_I a` to
    /// `true U_I a`, `G_I a` to `!(true U_I !a)`, and `a W b` to
    /// `(a U[0,inf) b) | G[0,inf) a`.
    pub fn desugar(s: &SugarForm) -> Formula {
        let mut nodes = Vec::new();
        let root = build(s, &mut nodes);
        let mut f = Formula { nodes, root };
        f.index();
        f
    }

    fn index(&mut self) {
        for id in 0..self.nodes.len() {
            let kind = self.nodes[id].kind.clone();
            for c in children_of(&kind) {
                self.nodes[c.0 as usize].parent = Some(NodeId(id as u32));
            }
            let free = match &kind {
                FormulaKind::True => BTreeSet::new(),
                FormulaKind::Pred { args, .. } => {
                    args.iter().filter_map(|t| t.var().map(str::to_owned)).collect()
                }
                FormulaKind::Cmp { left, right, .. } => [left, right]
                    .into_iter()
                    .filter_map(|t| t.var().map(str::to_owned))
                    .collect(),
                FormulaKind::Freeze { var, body, .. } => {
                    let mut s = self.nodes[body.0 as usize].free.clone();
                    s.remove(var);
                    s
                }
                FormulaKind::Not(a) => self.nodes[a.0 as usize].free.clone(),
                FormulaKind::Or(a, b) | FormulaKind::Until { left: a, right: b, .. } => {
                    let mut s = self.nodes[a.0 as usize].free.clone();
                    s.extend(self.nodes[b.0 as usize].free.iter().cloned());
                    s
                }
            };
            self.nodes[id].free = free;
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All subformula occurrences, children before parents.
    pub fn subformulas(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn kind(&self, id: NodeId) -> &FormulaKind {
        &self.nodes[id.0 as usize].kind
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0 as usize].parent
    }

    pub fn free_vars(&self, id: NodeId) -> &BTreeSet<String> {
        &self.nodes[id.0 as usize].free
    }

    pub fn is_closed(&self) -> bool {
        self.free_vars(self.root).is_empty()
    }

    pub fn is_atomic(&self, id: NodeId) -> bool {
        matches!(
            self.kind(id),
            FormulaKind::True | FormulaKind::Pred { .. } | FormulaKind::Cmp { .. }
        )
    }

    /// Predicate symbols with their arities.
    pub fn predicates(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            if let FormulaKind::Pred { name, args } = &n.kind {
                m.insert(name.clone(), args.len());
            }
        }
        m
    }

    /// Register names read by freeze quantifiers.
    pub fn registers(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                FormulaKind::Freeze { reg, .. } => Some(reg.clone()),
                _ => None,
            })
            .collect()
    }

    /// Child-index path from the root, e.g. `"."`, `".0"`, `".0.1"`.
    pub fn path(&self, id: NodeId) -> String {
        let mut segs = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            let idx = children_of(self.kind(p)).iter().position(|c| *c == cur).unwrap();
            segs.push(idx.to_string());
            cur = p;
        }
        segs.reverse();
        if segs.is_empty() {
            ".".to_string()
        } else {
            format!(".{}", segs.join("."))
        }
    }

    /// Renders the occurrence as primitive-syntax text.
    pub fn display_node(&self, id: NodeId) -> String {
        match self.kind(id) {
            FormulaKind::True => "true".into(),
            FormulaKind::Pred { name, args } => {
                let a: Vec<String> = args.iter().map(|t| t.to_string()).collect();
                format!("{name}({})", a.join(","))
            }
            FormulaKind::Cmp { left, op, right } => format!("{left} {op} {right}"),
            FormulaKind::Freeze { reg, var, body } => {
                format!("freeze {reg} as {var} . {}", self.display_node(*body))
            }
            FormulaKind::Not(a) => format!("!({})", self.display_node(*a)),
            FormulaKind::Or(a, b) => {
                format!("({}) | ({})", self.display_node(*a), self.display_node(*b))
            }
            FormulaKind::Until { interval, left, right } => format!(
                "({}) U{} ({})",
                self.display_node(*left),
                fmt_interval(interval),
                self.display_node(*right)
            ),
        }
    }
}

pub fn children_of(kind: &FormulaKind) -> Vec<NodeId> {
    match kind {
        FormulaKind::True | FormulaKind::Pred { .. } | FormulaKind::Cmp { .. } => vec![],
        FormulaKind::Freeze { body, .. } => vec![*body],
        FormulaKind::Not(a) => vec![*a],
        FormulaKind::Or(a, b) => vec![*a, *b],
        FormulaKind::Until { left, right, .. } => vec![*left, *right],
    }
}

fn push(nodes: &mut Vec<FormulaNode>, kind: FormulaKind) -> NodeId {
    nodes.push(FormulaNode { kind, parent: None, free: BTreeSet::new() });
    NodeId(nodes.len() as u32 - 1)
}

fn build(s: &SugarForm, nodes: &mut Vec<FormulaNode>) -> NodeId {
    match s {
        SugarForm::True => push(nodes, FormulaKind::True),
        SugarForm::Pred(name, args) => {
            push(nodes, FormulaKind::Pred { name: name.clone(), args: args.clone() })
        }
        SugarForm::Cmp(l, op, r) => {
            push(nodes, FormulaKind::Cmp { left: l.clone(), op: *op, right: r.clone() })
        }
        SugarForm::Not(a) => {
            let a = build(a, nodes);
            push(nodes, FormulaKind::Not(a))
        }
        SugarForm::Or(a, b) => {
            let a = build(a, nodes);
            let b = build(b, nodes);
            push(nodes, FormulaKind::Or(a, b))
        }
        SugarForm::And(a, b) => {
            // !( !a | !b )
            let a = build(a, nodes);
            let na = push(nodes, FormulaKind::Not(a));
            let b = build(b, nodes);
            let nb = push(nodes, FormulaKind::Not(b));
            let or = push(nodes, FormulaKind::Or(na, nb));
            push(nodes, FormulaKind::Not(or))
        }
        SugarForm::Implies(a, b) => {
            let a = build(a, nodes);
            let na = push(nodes, FormulaKind::Not(a));
            let b = build(b, nodes);
            push(nodes, FormulaKind::Or(na, b))
        }
        SugarForm::Freeze { reg, var, body } => {
            let b = build(body, nodes);
            push(nodes, FormulaKind::Freeze { reg: reg.clone(), var: var.clone(), body: b })
        }
        SugarForm::Until(iv, a, b) => {
            let a = build(a, nodes);
            let b = build(b, nodes);
            push(nodes, FormulaKind::Until { interval: iv.clone(), left: a, right: b })
        }
        SugarForm::Eventually(iv, a) => {
            let t = push(nodes, FormulaKind::True);
            let a = build(a, nodes);
            push(nodes, FormulaKind::Until { interval: iv.clone(), left: t, right: a })
        }
        SugarForm::Always(iv, a) => {
            // !(true U_I !a)
            let t = push(nodes, FormulaKind::True);
            let a = build(a, nodes);
            let na = push(nodes, FormulaKind::Not(a));
            let u = push(nodes, FormulaKind::Until { interval: iv.clone(), left: t, right: na });
            push(nodes, FormulaKind::Not(u))
        }
        SugarForm::WeakUntil(a, b) => {
            // (a U[0,inf) b) | G[0,inf) a, with a duplicated by occurrence.
            let full = Interval::zero_to_inf();
            let a1 = build(a, nodes);
            let b1 = build(b, nodes);
            let u = push(nodes, FormulaKind::Until { interval: full.clone(), left: a1, right: b1 });
            let t = push(nodes, FormulaKind::True);
            let a2 = build(a, nodes);
            let na = push(nodes, FormulaKind::Not(a2));
            let gu = push(nodes, FormulaKind::Until { interval: full, left: t, right: na });
            let g = push(nodes, FormulaKind::Not(gu));
            push(nodes, FormulaKind::Or(u, g))
        }
    }
}

/// Parses and desugars in one go.
pub fn parse_formula(input: &str) -> Result<Formula, ParseError> {
    Ok(Formula::desugar(&parse(input)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::rat;
    use proptest::prelude::*;

    #[test]
    fn parse_true() {
        assert_eq!(parse("true").unwrap(), SugarForm::True);
    }

    #[test]
    fn parse_policy_p1() {
        let text = "G (freeze cid as c . freeze tid as t . freeze sum as a . \
                    (trans(c,t,a) & a > 2000 -> F[0,3] report(t)))";
        let got = parse(text).unwrap();
        let expected = SugarForm::Always(
            Interval::zero_to_inf(),
            Box::new(SugarForm::Freeze {
                reg: "cid".into(),
                var: "c".into(),
                body: Box::new(SugarForm::Freeze {
                    reg: "tid".into(),
                    var: "t".into(),
                    body: Box::new(SugarForm::Freeze {
                        reg: "sum".into(),
                        var: "a".into(),
                        body: Box::new(SugarForm::Implies(
                            Box::new(SugarForm::And(
                                Box::new(SugarForm::Pred(
                                    "trans".into(),
                                    vec![Term::Var("c".into()), Term::Var("t".into()), Term::Var("a".into())],
                                )),
                                Box::new(SugarForm::Cmp(Term::Var("a".into()), CmpOp::Gt, Term::Int(2000))),
                            )),
                            Box::new(SugarForm::Eventually(
                                Interval::new(rat(0, 1), false, Some(rat(3, 1)), false).unwrap(),
                                Box::new(SugarForm::Pred("report".into(), vec![Term::Var("t".into())])),
                            )),
                        )),
                    }),
                }),
            }),
        );
        assert_eq!(got, expected);
    }

    #[test]
    fn parse_malformed_interval() {
        let err = parse("p() U[3,2] q()").unwrap_err();
        assert!(err.msg.contains("malformed interval"), "{err}");
    }

    #[test]
    fn parse_arity_mismatch() {
        let err = parse("p(x) | p(x,y)").unwrap_err();
        assert!(err.msg.contains("arity mismatch"), "{err}");
    }

    #[test]
    fn parse_inf_needs_open_bound() {
        let err = parse("p() U[0,inf] q()").unwrap_err();
        assert!(err.msg.contains("inf"), "{err}");
    }

    #[test]
    fn desugar_eventually() {
        let f = Formula::desugar(&parse("F[0,3] p()").unwrap());
        let root = f.kind(f.root());
        match root {
            FormulaKind::Until { interval, left, .. } => {
                assert!(matches!(f.kind(*left), FormulaKind::True));
                assert_eq!(interval.hi(), Some(&rat(3, 1)));
            }
            _ => panic!("expected an until at the root"),
        }
    }

    #[test]
    fn desugar_always() {
        let f = Formula::desugar(&parse("G p()").unwrap());
        match f.kind(f.root()) {
            FormulaKind::Not(inner) => match f.kind(*inner) {
                FormulaKind::Until { left, right, .. } => {
                    assert!(matches!(f.kind(*left), FormulaKind::True));
                    assert!(matches!(f.kind(*right), FormulaKind::Not(_)));
                }
                _ => panic!("expected until under the negation"),
            },
            _ => panic!("expected a negation at the root"),
        }
    }

    #[test]
    fn desugar_weak_until_matches_identity() {
        let w = Formula::desugar(&parse("p() W q()").unwrap());
        let direct = Formula::desugar(&parse("(p() U[0,inf) q()) | G (p())").unwrap());
        assert_eq!(w.len(), direct.len());
        for (a, b) in w.subformulas().zip(direct.subformulas()) {
            assert_eq!(
                std::mem::discriminant(w.kind(a)),
                std::mem::discriminant(direct.kind(b))
            );
        }
    }

    #[test]
    fn subformulas_bottom_up_and_occurrence_distinct() {
        let f = Formula::desugar(&parse("!p()").unwrap());
        assert_eq!(f.len(), 2);
        assert!(matches!(f.kind(NodeId(0)), FormulaKind::Pred { .. }));
        assert!(matches!(f.kind(NodeId(1)), FormulaKind::Not(_)));

        let g = Formula::desugar(&parse("p() | p()").unwrap());
        assert_eq!(g.len(), 3, "two distinct occurrences plus the disjunction");

        for id in g.subformulas() {
            for c in children_of(g.kind(id)) {
                assert!(c < id, "children come before parents");
            }
        }
    }

    #[test]
    fn p1_last_subformula_is_root_negation() {
        let text = "G (freeze cid as c . freeze tid as t . freeze sum as a . \
                    (trans(c,t,a) & a > 2000 -> F[0,3] report(t)))";
        let f = Formula::desugar(&parse(text).unwrap());
        let last = NodeId(f.len() as u32 - 1);
        assert_eq!(last, f.root());
        assert!(matches!(f.kind(last), FormulaKind::Not(_)), "outermost always is a negated until");
    }

    #[test]
    fn free_variables() {
        let f = Formula::desugar(&parse("p(x)").unwrap());
        assert_eq!(f.free_vars(f.root()).len(), 1);
        assert!(!f.is_closed());

        let g = Formula::desugar(&parse("freeze r as x . p(x)").unwrap());
        assert!(g.is_closed());

        let h = Formula::desugar(&parse("freeze r as x . p(x,y)").unwrap());
        let free: Vec<_> = h.free_vars(h.root()).iter().cloned().collect();
        assert_eq!(free, vec!["y".to_string()]);
    }

    #[test]
    fn desugar_size_bound_without_weak_until() {
        for text in ["G (p() & q() -> F[0,3] r())", "!p() | (q() U(0,1] p())", "G F[0,inf) p()"] {
            let s = parse(text).unwrap();
            let f = Formula::desugar(&s);
            assert!(f.len() <= 3 * s.node_count() + 1, "{text}: {} vs {}", f.len(), s.node_count());
        }
        // One weak-until costs a duplicated left operand plus five connectives.
        let s = parse("p() W q()").unwrap();
        let f = Formula::desugar(&s);
        assert!(f.len() <= 3 * s.node_count() + 8);
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        prop_oneof![
            "[a-c]".prop_map(Term::Var),
            (0i64..100).prop_map(Term::Int),
            "[a-z]{1,3}".prop_map(Term::Str),
        ]
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (0i64..8, 1i64..8, any::<bool>(), any::<bool>(), any::<bool>()).prop_map(
            |(lo, len, lo_open, hi_open, unbounded)| {
                if unbounded {
                    Interval::new(rat(lo, 2), lo_open, None, true).unwrap()
                } else if len == 0 {
                    Interval::singleton(rat(lo, 2))
                } else {
                    Interval::new(rat(lo, 2), lo_open, Some(rat(lo + len, 2)), hi_open).unwrap()
                }
            },
        )
    }

    fn arb_sugar() -> impl Strategy<Value = SugarForm> {
        let leaf = prop_oneof![
            Just(SugarForm::True),
            ("[p-r]", proptest::collection::vec(arb_term(), 0..3))
                .prop_map(|(n, a)| SugarForm::Pred(n, a)),
            (arb_term(), prop_oneof![
                Just(CmpOp::Gt), Just(CmpOp::Ge), Just(CmpOp::Lt),
                Just(CmpOp::Le), Just(CmpOp::Eq), Just(CmpOp::Ne)
            ], arb_term())
            .prop_map(|(l, op, r)| SugarForm::Cmp(l, op, r)),
        ];
        leaf.prop_recursive(6, 64, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| SugarForm::Not(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| SugarForm::And(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| SugarForm::Or(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| SugarForm::Implies(Box::new(a), Box::new(b))),
                ("[r-s]", "[x-z]", inner.clone()).prop_map(|(reg, var, body)| SugarForm::Freeze {
                    reg,
                    var,
                    body: Box::new(body)
                }),
                (arb_interval(), inner.clone(), inner.clone())
                    .prop_map(|(iv, a, b)| SugarForm::Until(iv, Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| SugarForm::WeakUntil(Box::new(a), Box::new(b))),
                (arb_interval(), inner.clone()).prop_map(|(iv, a)| SugarForm::Eventually(iv, Box::new(a))),
                (arb_interval(), inner).prop_map(|(iv, a)| SugarForm::Always(iv, Box::new(a))),
            ]
        })
    }

    fn consistent_arities(s: &SugarForm, seen: &mut BTreeMap<String, usize>) -> bool {
        match s {
            SugarForm::Pred(name, args) => match seen.get(name) {
                Some(a) => *a == args.len(),
                None => {
                    seen.insert(name.clone(), args.len());
                    true
                }
            },
            SugarForm::True | SugarForm::Cmp(..) => true,
            SugarForm::Not(a)
            | SugarForm::Freeze { body: a, .. }
            | SugarForm::Eventually(_, a)
            | SugarForm::Always(_, a) => consistent_arities(a, seen),
            SugarForm::And(a, b)
            | SugarForm::Or(a, b)
            | SugarForm::Implies(a, b)
            | SugarForm::Until(_, a, b)
            | SugarForm::WeakUntil(a, b) => {
                consistent_arities(a, seen) && consistent_arities(b, seen)
            }
        }
    }

    proptest! {
        #[test]
        fn pretty_print_round_trip(s in arb_sugar()) {
            let mut arities = BTreeMap::new();
            prop_assume!(consistent_arities(&s, &mut arities));
            let text = s.to_string();
            let reparsed = parse(&text).expect(&text);
            prop_assert_eq!(reparsed, s, "text: {}", text);
        }
    }
}
