//! Syntactically co-safe LTL: parsing, progression, simplification,
//! progression closure and a brute-force finite-trace evaluator.
//!
//! Concrete syntax (lowest to highest precedence):
//!
//! ```text
//! or      := and ( '|' and )*
//! and     := until ( '&' until )*
//! until   := unary ( 'U' until )?          right associative
//! unary   := '!' atom | 'X' unary | 'F' unary | primary
//! primary := 'true' | 'false' | atom | '(' or ')'
//! atom    := [a-z][a-z0-9_]*
//! ```
//!
//! Negation is only accepted directly above an atom, which keeps every
//! formula in the co-safe fragment.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default upper bound on the number of formulas in a progression closure.
pub const DEFAULT_CLOSURE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LtlError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("invalid proposition name {0:?}")]
    InvalidProposition(String),
    #[error("progression closure exceeded the cap of {cap} formulas")]
    ClosureOverflow { cap: usize },
}

/// An atomic proposition name matching `[a-z][a-z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Proposition(String);

impl Proposition {
    pub fn new(name: impl Into<String>) -> Result<Self, LtlError> {
        let name = name.into();
        if is_valid_name(&name) && !is_keyword(&name) {
            Ok(Self(name))
        } else {
            Err(LtlError::InvalidProposition(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for Proposition {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Proposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn is_keyword(name: &str) -> bool {
    name == "true" || name == "false"
}

/// The set of propositions that hold in one state.
pub type Label = BTreeSet<Proposition>;

/// Builds a label from proposition names. Panics on invalid names, so it is
/// meant for literals in tests and fixtures.
pub fn label<'a>(names: impl IntoIterator<Item = &'a str>) -> Label {
    names
        .into_iter()
        .map(|n| Proposition::new(n).expect("valid proposition name"))
        .collect()
}

/// sc-LTL abstract syntax. `Not` holds a proposition, never a subformula.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Formula {
    True,
    False,
    Atom(Proposition),
    Not(Proposition),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Next(Box<Formula>),
    Eventually(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn atom(name: &str) -> Self {
        Formula::Atom(Proposition::new(name).expect("valid proposition name"))
    }

    pub fn not(name: &str) -> Self {
        Formula::Not(Proposition::new(name).expect("valid proposition name"))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn next(a: Formula) -> Self {
        Formula::Next(Box::new(a))
    }

    pub fn eventually(a: Formula) -> Self {
        Formula::Eventually(Box::new(a))
    }

    pub fn until(a: Formula, b: Formula) -> Self {
        Formula::Until(Box::new(a), Box::new(b))
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Formula::True)
    }

    pub fn is_false(&self) -> bool {
        matches!(self, Formula::False)
    }

    /// True or False: nothing left to progress.
    pub fn is_decided(&self) -> bool {
        self.is_true() || self.is_false()
    }

    /// Nesting depth of temporal operators.
    pub fn temporal_depth(&self) -> usize {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) | Formula::Not(_) => 0,
            Formula::And(a, b) | Formula::Or(a, b) => a.temporal_depth().max(b.temporal_depth()),
            Formula::Next(a) | Formula::Eventually(a) => 1 + a.temporal_depth(),
            Formula::Until(a, b) => 1 + a.temporal_depth().max(b.temporal_depth()),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) | Formula::Not(_) => 1,
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Until(a, b) => 1 + a.size() + b.size(),
            Formula::Next(a) | Formula::Eventually(a) => 1 + a.size(),
        }
    }

    pub fn propositions(&self) -> BTreeSet<Proposition> {
        let mut out = BTreeSet::new();
        self.collect_propositions(&mut out);
        out
    }

    fn collect_propositions(&self, out: &mut BTreeSet<Proposition>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(p) | Formula::Not(p) => {
                out.insert(p.clone());
            }
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Until(a, b) => {
                a.collect_propositions(out);
                b.collect_propositions(out);
            }
            Formula::Next(a) | Formula::Eventually(a) => a.collect_propositions(out),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => f.write_str("true"),
            Formula::False => f.write_str("false"),
            Formula::Atom(p) => write!(f, "{p}"),
            Formula::Not(p) => write!(f, "!{p}"),
            Formula::And(a, b) => write!(f, "({a} & {b})"),
            Formula::Or(a, b) => write!(f, "({a} | {b})"),
            Formula::Next(a) => write!(f, "X {a}"),
            Formula::Eventually(a) => write!(f, "F {a}"),
            Formula::Until(a, b) => write!(f, "({a} U {b})"),
        }
    }
}

impl std::str::FromStr for Formula {
    type Err = LtlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for Formula {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    True,
    False,
    Bang,
    Amp,
    Bar,
    Next,
    Eventually,
    Until,
    LParen,
    RParen,
    End,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, LtlError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'!' => Tok::Bang,
            b'&' => Tok::Amp,
            b'|' => Tok::Bar,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'X' => Tok::Next,
            b'F' => Tok::Eventually,
            b'U' => Tok::Until,
            b'a'..=b'z' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_lowercase() || bytes[i].is_ascii_digit() || bytes[i] == b'_')
                {
                    i += 1;
                }
                let word = &text[start..i];
                toks.push((
                    match word {
                        "true" => Tok::True,
                        "false" => Tok::False,
                        _ => Tok::Ident(word.to_string()),
                    },
                    start,
                ));
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(LtlError::Syntax {
                    offset: start,
                    message: format!("unexpected character {ch:?}"),
                });
            }
        };
        toks.push((tok, start));
        i += 1;
    }
    toks.push((Tok::End, text.len()));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, LtlError> {
        Err(LtlError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn or(&mut self) -> Result<Formula, LtlError> {
        let mut lhs = self.and()?;
        while *self.peek() == Tok::Bar {
            self.bump();
            let rhs = self.and()?;
            lhs = Formula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Formula, LtlError> {
        let mut lhs = self.until()?;
        while *self.peek() == Tok::Amp {
            self.bump();
            let rhs = self.until()?;
            lhs = Formula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn until(&mut self) -> Result<Formula, LtlError> {
        let lhs = self.unary()?;
        if *self.peek() == Tok::Until {
            self.bump();
            let rhs = self.until()?;
            return Ok(Formula::until(lhs, rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula, LtlError> {
        match self.peek() {
            Tok::Bang => {
                self.bump();
                match self.peek().clone() {
                    Tok::Ident(name) => {
                        self.bump();
                        Ok(Formula::Not(Proposition(name)))
                    }
                    _ => self.error("negation may only be applied to an atomic proposition"),
                }
            }
            Tok::Next => {
                self.bump();
                Ok(Formula::next(self.unary()?))
            }
            Tok::Eventually => {
                self.bump();
                Ok(Formula::eventually(self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula, LtlError> {
        match self.peek().clone() {
            Tok::True => {
                self.bump();
                Ok(Formula::True)
            }
            Tok::False => {
                self.bump();
                Ok(Formula::False)
            }
            Tok::Ident(name) => {
                self.bump();
                Ok(Formula::Atom(Proposition(name)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or()?;
                if *self.peek() != Tok::RParen {
                    return self.error("expected ')'");
                }
                self.bump();
                Ok(inner)
            }
            Tok::End => self.error("unexpected end of input"),
            other => self.error(format!("unexpected token {other:?}")),
        }
    }
}

/// Parses the textual formula grammar.
pub fn parse(text: &str) -> Result<Formula, LtlError> {
    let mut parser = Parser { toks: lex(text)?, pos: 0 };
    let formula = parser.or()?;
    if *parser.peek() != Tok::End {
        return parser.error("trailing input");
    }
    Ok(formula)
}

// ---------------------------------------------------------------------------
// Progression

/// Progresses `phi` through one label and simplifies the result.
pub fn progress(phi: &Formula, sigma: &Label) -> Formula {
    simplify(&progress_raw(phi, sigma))
}

fn progress_raw(phi: &Formula, sigma: &Label) -> Formula {
    match phi {
        Formula::True => Formula::True,
        Formula::False => Formula::False,
        Formula::Atom(p) => bool_lit(sigma.contains(p)),
        Formula::Not(p) => bool_lit(!sigma.contains(p)),
        Formula::And(a, b) => Formula::and(progress_raw(a, sigma), progress_raw(b, sigma)),
        Formula::Or(a, b) => Formula::or(progress_raw(a, sigma), progress_raw(b, sigma)),
        Formula::Next(a) => (**a).clone(),
        Formula::Eventually(a) => Formula::or(progress_raw(a, sigma), phi.clone()),
        Formula::Until(a, b) => Formula::or(
            progress_raw(b, sigma),
            Formula::and(progress_raw(a, sigma), phi.clone()),
        ),
    }
}

fn bool_lit(b: bool) -> Formula {
    if b {
        Formula::True
    } else {
        Formula::False
    }
}

// ---------------------------------------------------------------------------
// Simplification

/// Boolean absorption plus canonical ordering of commutative operands.
///
/// Conjunctions and disjunctions are flattened, sorted by the structural
/// order of [`Formula`], deduplicated, and operands that are syntactically
/// subsumed by a sibling are dropped. The result is a fixed point.
pub fn simplify(phi: &Formula) -> Formula {
    match phi {
        Formula::True | Formula::False | Formula::Atom(_) | Formula::Not(_) => phi.clone(),
        Formula::Next(a) => match simplify(a) {
            s @ (Formula::True | Formula::False) => s,
            s => Formula::next(s),
        },
        Formula::Eventually(a) => match simplify(a) {
            s @ (Formula::True | Formula::False | Formula::Eventually(_)) => s,
            s => Formula::eventually(s),
        },
        Formula::Until(a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            match (&sa, &sb) {
                (_, Formula::True) | (_, Formula::False) => sb,
                (Formula::False, _) => sb,
                (Formula::True, _) => simplify(&Formula::eventually(sb)),
                _ => Formula::until(sa, sb),
            }
        }
        Formula::And(..) => {
            let mut parts = Vec::new();
            flatten_and(phi, &mut parts);
            let mut kept = Vec::with_capacity(parts.len());
            for p in parts {
                match simplify(&p) {
                    Formula::False => return Formula::False,
                    Formula::True => {}
                    s => flatten_and(&s, &mut kept),
                }
            }
            kept.sort();
            kept.dedup();
            // c_i is redundant when another conjunct already entails it.
            let kept = drop_subsumed(kept, |ci, cj| entails(cj, ci));
            rebuild(kept, Formula::True, Formula::and)
        }
        Formula::Or(..) => {
            let mut parts = Vec::new();
            flatten_or(phi, &mut parts);
            let mut kept = Vec::with_capacity(parts.len());
            for p in parts {
                match simplify(&p) {
                    Formula::True => return Formula::True,
                    Formula::False => {}
                    s => flatten_or(&s, &mut kept),
                }
            }
            kept.sort();
            kept.dedup();
            // d_i is redundant when it entails another disjunct.
            let kept = drop_subsumed(kept, entails);
            rebuild(kept, Formula::False, Formula::or)
        }
    }
}

fn flatten_and(phi: &Formula, out: &mut Vec<Formula>) {
    match phi {
        Formula::And(a, b) => {
            flatten_and(a, out);
            flatten_and(b, out);
        }
        other => out.push(other.clone()),
    }
}

fn flatten_or(phi: &Formula, out: &mut Vec<Formula>) {
    match phi {
        Formula::Or(a, b) => {
            flatten_or(a, out);
            flatten_or(b, out);
        }
        other => out.push(other.clone()),
    }
}

fn drop_subsumed(mut items: Vec<Formula>, redundant: impl Fn(&Formula, &Formula) -> bool) -> Vec<Formula> {
    let mut i = 0;
    while i < items.len() {
        let hit = (0..items.len()).any(|j| j != i && redundant(&items[i], &items[j]));
        if hit {
            items.remove(i);
        } else {
            i += 1;
        }
    }
    items
}

fn rebuild(items: Vec<Formula>, empty: Formula, join: fn(Formula, Formula) -> Formula) -> Formula {
    let mut iter = items.into_iter().rev();
    match iter.next() {
        None => empty,
        Some(last) => iter.fold(last, |acc, f| join(f, acc)),
    }
}

/// Sound (incomplete) syntactic entailment `b ⊨ a` under finite-trace
/// semantics.
pub fn entails(b: &Formula, a: &Formula) -> bool {
    if b == a || a.is_true() || b.is_false() {
        return true;
    }
    if let Formula::Or(b1, b2) = b {
        return entails(b1, a) && entails(b2, a);
    }
    if let Formula::And(a1, a2) = a {
        return entails(b, a1) && entails(b, a2);
    }
    if let Formula::And(b1, b2) = b {
        if entails(b1, a) || entails(b2, a) {
            return true;
        }
    }
    match a {
        Formula::Or(a1, a2) => entails(b, a1) || entails(b, a2),
        Formula::Eventually(inner) => {
            entails(b, inner)
                || match b {
                    Formula::Eventually(bi) | Formula::Next(bi) => entails(bi, a),
                    Formula::Until(_, b2) => entails(b2, a),
                    _ => false,
                }
        }
        Formula::Until(a1, a2) => {
            entails(b, a2)
                || matches!(b, Formula::Until(b1, b2) if entails(b1, a1) && entails(b2, a2))
        }
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Closure

/// Every label over `props`, i.e. the power set 2^Π.
pub fn all_labels(props: &[Proposition]) -> Vec<Label> {
    assert!(props.len() < 20, "power set too large");
    (0u32..(1 << props.len()))
        .map(|mask| {
            props
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, p)| p.clone())
                .collect()
        })
        .collect()
}

/// Smallest set containing `phi` closed under progression by every label
/// over `props`. Members are returned in discovery (BFS) order, so `phi`
/// comes first.
pub fn closure(phi: &Formula, props: &[Proposition], cap: usize) -> Result<Vec<Formula>, LtlError> {
    let labels = all_labels(props);
    let mut seen: HashSet<Formula> = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(phi.clone());
    order.push(phi.clone());
    queue.push_back(phi.clone());
    while let Some(f) = queue.pop_front() {
        for sigma in &labels {
            let next = progress(&f, sigma);
            if seen.insert(next.clone()) {
                if order.len() >= cap {
                    return Err(LtlError::ClosureOverflow { cap });
                }
                order.push(next.clone());
                queue.push_back(next);
            }
        }
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Finite-trace semantics

/// Whether `word` satisfies `phi` from position 0 under finite-trace
/// semantics: `F` and `U` need a witness inside the word, and past the last
/// position only obligations that need no further letter hold (see
/// [`holds_on_empty_suffix`]), so `X p` fails on a one-letter word while
/// `X true` holds.
pub fn evaluate(phi: &Formula, word: &[Label]) -> bool {
    holds_at(phi, word, 0)
}

/// Whether `phi` holds on every continuation without reading a letter:
/// built from `true` by conjunction, disjunction, `X`, `F`, and `U` with a
/// satisfied right operand.
fn holds_on_empty_suffix(phi: &Formula) -> bool {
    match phi {
        Formula::True => true,
        Formula::False | Formula::Atom(_) | Formula::Not(_) => false,
        Formula::And(a, b) => holds_on_empty_suffix(a) && holds_on_empty_suffix(b),
        Formula::Or(a, b) => holds_on_empty_suffix(a) || holds_on_empty_suffix(b),
        Formula::Next(a) | Formula::Eventually(a) => holds_on_empty_suffix(a),
        Formula::Until(_, b) => holds_on_empty_suffix(b),
    }
}

fn holds_at(phi: &Formula, word: &[Label], i: usize) -> bool {
    if i >= word.len() {
        return holds_on_empty_suffix(phi);
    }
    match phi {
        Formula::True => true,
        Formula::False => false,
        Formula::Atom(p) => word[i].contains(p),
        Formula::Not(p) => !word[i].contains(p),
        Formula::And(a, b) => holds_at(a, word, i) && holds_at(b, word, i),
        Formula::Or(a, b) => holds_at(a, word, i) || holds_at(b, word, i),
        Formula::Next(a) => holds_at(a, word, i + 1),
        Formula::Eventually(a) => (i..word.len()).any(|j| holds_at(a, word, j)),
        Formula::Until(a, b) => {
            for j in i..word.len() {
                if holds_at(b, word, j) {
                    return true;
                }
                if !holds_at(a, word, j) {
                    return false;
                }
            }
            false
        }
    }
}

/// Folds `progress` over `word` starting from `phi`.
pub fn progress_word(phi: &Formula, word: &[Label]) -> Formula {
    word.iter().fold(phi.clone(), |f, sigma| progress(&f, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toilet() -> Formula {
        parse("F(toilet_approached & F(lid_grasped & F lid_opened))").unwrap()
    }

    #[test]
    fn parses_nested_eventually() {
        let f = parse("F(a & F b)").unwrap();
        assert_eq!(
            f,
            Formula::eventually(Formula::and(Formula::atom("a"), Formula::eventually(Formula::atom("b"))))
        );
    }

    #[test]
    fn parses_example_task() {
        let expected = Formula::eventually(Formula::and(
            Formula::atom("toilet_approached"),
            Formula::eventually(Formula::and(
                Formula::atom("lid_grasped"),
                Formula::eventually(Formula::atom("lid_opened")),
            )),
        ));
        assert_eq!(toilet(), expected);
    }

    #[test]
    fn negation_of_compound_is_rejected() {
        match parse("!(a & b)") {
            Err(LtlError::Syntax { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(parse("!!a").is_err());
        assert!(parse("!true").is_err());
        assert_eq!(parse("!a").unwrap(), Formula::not("a"));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse("a & ") {
            Err(LtlError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match parse("a # b") {
            Err(LtlError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse("(a").is_err());
        assert!(parse("a b").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(
            parse("a | b & c").unwrap(),
            Formula::or(Formula::atom("a"), Formula::and(Formula::atom("b"), Formula::atom("c")))
        );
        assert_eq!(
            parse("a U b U c").unwrap(),
            Formula::until(Formula::atom("a"), Formula::until(Formula::atom("b"), Formula::atom("c")))
        );
        assert_eq!(
            parse("F a & X b").unwrap(),
            Formula::and(Formula::eventually(Formula::atom("a")), Formula::next(Formula::atom("b")))
        );
    }

    #[test]
    fn display_round_trips() {
        for text in ["F(a & F b)", "a U (b | !c)", "X X true", "(a | b) & F false", "!a U X b"] {
            let f = parse(text).unwrap();
            assert_eq!(parse(&f.to_string()).unwrap(), f, "{text}");
        }
    }

    #[test]
    fn progress_atom() {
        assert_eq!(progress(&Formula::atom("p"), &label(["p"])), Formula::True);
        assert_eq!(progress(&Formula::atom("p"), &label([])), Formula::False);
    }

    #[test]
    fn progress_example_task_first_event() {
        let next = progress(&toilet(), &label(["toilet_approached"]));
        assert_eq!(next, parse("F(lid_grasped & F lid_opened)").unwrap());
    }

    #[test]
    fn progress_eventually_without_witness_is_stable() {
        let f = parse("F p").unwrap();
        assert_eq!(progress(&f, &label([])), f);
        // Oracle cross-check on every word over {p} up to length 4.
        let props = vec![Proposition::new("p").unwrap()];
        let labels = all_labels(&props);
        for len in 1..=4usize {
            for idx in 0..labels.len().pow(len as u32) {
                let mut word = Vec::new();
                let mut k = idx;
                for _ in 0..len {
                    word.push(labels[k % labels.len()].clone());
                    k /= labels.len();
                }
                assert_eq!(progress_word(&f, &word).is_true(), evaluate(&f, &word));
            }
        }
    }

    #[test]
    fn literals_are_absorbing() {
        for sigma in [label([]), label(["a"])] {
            assert_eq!(progress(&Formula::True, &sigma), Formula::True);
            assert_eq!(progress(&Formula::False, &sigma), Formula::False);
        }
    }

    #[test]
    fn simplify_identities() {
        let fp = parse("F p").unwrap();
        assert_eq!(simplify(&Formula::and(Formula::True, fp.clone())), fp);
        assert_eq!(simplify(&Formula::or(Formula::False, Formula::False)), Formula::False);
        assert_eq!(simplify(&Formula::or(fp.clone(), fp.clone())), fp);
        assert_eq!(simplify(&Formula::and(Formula::False, fp.clone())), Formula::False);
        assert_eq!(simplify(&Formula::or(Formula::True, fp.clone())), Formula::True);
        assert_eq!(simplify(&Formula::and(fp.clone(), fp.clone())), fp);
    }

    #[test]
    fn simplify_orders_commutative_operands() {
        let ab = simplify(&parse("a & b").unwrap());
        let ba = simplify(&parse("b & a").unwrap());
        assert_eq!(ab, ba);
        let x = simplify(&parse("(c | a) | b").unwrap());
        let y = simplify(&parse("b | (a | c)").unwrap());
        assert_eq!(x, y);
    }

    #[test]
    fn closure_of_eventually() {
        let props = vec![Proposition::new("p").unwrap()];
        let cl = closure(&parse("F p").unwrap(), &props, DEFAULT_CLOSURE_CAP).unwrap();
        let set: HashSet<_> = cl.into_iter().collect();
        assert_eq!(set, HashSet::from([parse("F p").unwrap(), Formula::True]));
    }

    #[test]
    fn closure_of_true() {
        let props = vec![Proposition::new("p").unwrap()];
        assert_eq!(closure(&Formula::True, &props, 16).unwrap(), vec![Formula::True]);
    }

    #[test]
    fn closure_of_example_task() {
        let phi = toilet();
        let props: Vec<_> = phi.propositions().into_iter().collect();
        let cl = closure(&phi, &props, DEFAULT_CLOSURE_CAP).unwrap();
        assert_eq!(cl[0], phi);
        assert!(cl.contains(&parse("F(lid_grasped & F lid_opened)").unwrap()));
        assert!(cl.contains(&parse("F lid_opened").unwrap()));
        assert!(cl.contains(&Formula::True));
    }

    #[test]
    fn closure_overflow_is_reported() {
        let phi = toilet();
        let props: Vec<_> = phi.propositions().into_iter().collect();
        assert_eq!(closure(&phi, &props, 2), Err(LtlError::ClosureOverflow { cap: 2 }));
    }

    #[test]
    fn evaluate_examples() {
        let fp = parse("F p").unwrap();
        assert!(evaluate(&fp, &[label([]), label(["p"])]));
        assert!(!evaluate(&parse("X p").unwrap(), &[label(["p"])]));
        let word = [label(["toilet_approached"]), label(["lid_grasped"]), label(["lid_opened"])];
        assert!(evaluate(&toilet(), &word));
        let wrong_order = [label(["lid_grasped"]), label(["toilet_approached"]), label(["lid_opened"])];
        assert!(!evaluate(&toilet(), &wrong_order));
    }

    #[test]
    fn proposition_validation() {
        assert!(Proposition::new("lid_opened2").is_ok());
        assert!(Proposition::new("").is_err());
        assert!(Proposition::new("Lid").is_err());
        assert!(Proposition::new("2a").is_err());
        assert!(Proposition::new("true").is_err());
    }

    #[test]
    fn temporal_depth() {
        assert_eq!(toilet().temporal_depth(), 3);
        assert_eq!(parse("a & !b").unwrap().temporal_depth(), 0);
        assert_eq!(parse("(F a) U X b").unwrap().temporal_depth(), 2);
    }

    #[test]
    fn serde_uses_text_form() {
        let f = toilet();
        let json = serde_json::to_string(&f).unwrap();
        let back: Formula = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<Formula>("\"!(a & b)\"").is_err());
    }
}
