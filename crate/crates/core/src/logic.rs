//! Propositional formulas over a named vocabulary.
//!
//! Guards on Reward Machine edges are written in a small infix language:
//! `!` for negation, `&` for conjunction, `|` for disjunction, parentheses,
//! identifiers and the keywords `true` / `false`. Precedence is
//! `!` > `&` > `|`, and both binary operators associate to the left.
//!
//! [`to_dnf`] rewrites a formula into disjunctive normal form by pushing
//! negations to the atoms and distributing conjunction over disjunction.
//! The result is sorted and deduplicated but never minimized, so two
//! logically equivalent formulas may normalize to different clause sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on the number of intermediate clauses produced by [`to_dnf`].
pub const DEFAULT_CLAUSE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogicError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown atom `{0}`")]
    UnknownAtom(String),
    #[error("invalid atom name `{0}`")]
    InvalidAtom(String),
    #[error("duplicate atom `{0}` in vocabulary")]
    DuplicateAtom(String),
    #[error("DNF expansion exceeds {cap} clauses")]
    DnfTooLarge { cap: usize },
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A propositional symbol.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Atom(String);

impl Atom {
    pub fn new(name: impl Into<String>) -> Result<Self, LogicError> {
        let name = name.into();
        if !is_identifier(&name) || name == "true" || name == "false" {
            return Err(LogicError::InvalidAtom(name));
        }
        Ok(Atom(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Atom {
    type Error = LogicError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Atom::new(value)
    }
}

impl From<Atom> for String {
    fn from(a: Atom) -> String {
        a.0
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An ordered set of atoms. Order is significant for bitmask encodings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Atom>", into = "Vec<Atom>")]
pub struct Vocab {
    atoms: Vec<Atom>,
}

impl Vocab {
    pub fn new(atoms: Vec<Atom>) -> Result<Self, LogicError> {
        let mut seen = BTreeSet::new();
        for a in &atoms {
            if !seen.insert(a.clone()) {
                return Err(LogicError::DuplicateAtom(a.0.clone()));
            }
        }
        Ok(Vocab { atoms })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, LogicError> {
        let atoms = names
            .iter()
            .map(|n| Atom::new(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Vocab::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.as_str() == name)
    }

    pub fn get(&self, name: &str) -> Option<&Atom> {
        self.atoms.iter().find(|a| a.as_str() == name)
    }

    /// Same atoms, irrespective of order.
    pub fn same_atoms(&self, other: &Vocab) -> bool {
        let a: BTreeSet<_> = self.atoms.iter().collect();
        let b: BTreeSet<_> = other.atoms.iter().collect();
        a == b
    }

    /// The assignment whose true atoms are the set bits of `mask`.
    pub fn assignment_from_mask(&self, mask: u64) -> TruthAssignment {
        TruthAssignment(
            self.atoms
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, a)| a.clone())
                .collect(),
        )
    }

    /// Bitmask of `w` over this vocabulary; atoms outside the vocabulary are ignored.
    pub fn mask_of(&self, w: &TruthAssignment) -> u64 {
        self.atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| w.contains(a))
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    /// All `2^n` truth assignments, ordered by bitmask.
    pub fn all_assignments(&self) -> impl Iterator<Item = TruthAssignment> + '_ {
        assert!(self.atoms.len() < 64, "vocabulary too large to enumerate");
        (0..1u64 << self.atoms.len()).map(move |m| self.assignment_from_mask(m))
    }
}

impl TryFrom<Vec<Atom>> for Vocab {
    type Error = LogicError;
    fn try_from(value: Vec<Atom>) -> Result<Self, Self::Error> {
        Vocab::new(value)
    }
}

impl From<Vocab> for Vec<Atom> {
    fn from(v: Vocab) -> Self {
        v.atoms
    }
}

/// The set of atoms that hold; every other atom is false.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TruthAssignment(BTreeSet<Atom>);

impl TruthAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, atom: Atom) {
        self.0.insert(atom);
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        self.0.contains(atom)
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.0.iter().any(|a| a.as_str() == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Atom> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Build from names, checking each against `vocab`.
    pub fn from_names<S: AsRef<str>>(vocab: &Vocab, names: &[S]) -> Result<Self, LogicError> {
        let mut w = TruthAssignment::new();
        for n in names {
            let atom = vocab
                .get(n.as_ref())
                .ok_or_else(|| LogicError::UnknownAtom(n.as_ref().to_string()))?;
            w.insert(atom.clone());
        }
        Ok(w)
    }
}

impl FromIterator<Atom> for TruthAssignment {
    fn from_iter<T: IntoIterator<Item = Atom>>(iter: T) -> Self {
        TruthAssignment(iter.into_iter().collect())
    }
}

impl fmt::Display for TruthAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str("}")
    }
}

/// Propositional formula. `And` / `Or` always carry at least two children.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    True,
    False,
    Var(Atom),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

impl Formula {
    pub fn var(atom: Atom) -> Self {
        Formula::Var(atom)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    /// Conjunction; a single child is returned unchanged and no children give `True`.
    pub fn and(mut children: Vec<Formula>) -> Self {
        match children.len() {
            0 => Formula::True,
            1 => children.pop().unwrap(),
            _ => Formula::And(children),
        }
    }

    /// Disjunction; a single child is returned unchanged and no children give `False`.
    pub fn or(mut children: Vec<Formula>) -> Self {
        match children.len() {
            0 => Formula::False,
            1 => children.pop().unwrap(),
            _ => Formula::Or(children),
        }
    }

    pub fn eval(&self, w: &TruthAssignment) -> bool {
        match self {
            Formula::True => true,
            Formula::False => false,
            Formula::Var(a) => w.contains(a),
            Formula::Not(f) => !f.eval(w),
            Formula::And(fs) => fs.iter().all(|f| f.eval(w)),
            Formula::Or(fs) => fs.iter().any(|f| f.eval(w)),
        }
    }

    /// Atoms mentioned anywhere in the formula.
    pub fn atoms(&self) -> BTreeSet<Atom> {
        let mut out = BTreeSet::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut BTreeSet<Atom>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Var(a) => {
                out.insert(a.clone());
            }
            Formula::Not(f) => f.collect_atoms(out),
            Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|f| f.collect_atoms(out)),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Formula::Or(_) => 0,
            Formula::And(_) => 1,
            Formula::Not(_) => 2,
            _ => 3,
        }
    }

    fn fmt_child(&self, child: &Formula, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // same-precedence children are parenthesized so nesting round-trips
        if child.precedence() <= self.precedence() && child.precedence() < 2 {
            write!(f, "({child})")
        } else {
            write!(f, "{child}")
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => f.write_str("true"),
            Formula::False => f.write_str("false"),
            Formula::Var(a) => write!(f, "{a}"),
            Formula::Not(inner) => {
                f.write_str("!")?;
                if inner.precedence() < 2 {
                    write!(f, "({inner})")
                } else {
                    write!(f, "{inner}")
                }
            }
            Formula::And(fs) | Formula::Or(fs) => {
                let op = if matches!(self, Formula::And(_)) { " & " } else { " | " };
                for (i, c) in fs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    self.fmt_child(c, f)?;
                }
                Ok(())
            }
        }
    }
}

/// Standard propositional satisfaction under the closed-world assignment `w`.
pub fn evaluate(f: &Formula, w: &TruthAssignment) -> bool {
    f.eval(w)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    True,
    False,
    Not,
    And,
    Or,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, LogicError> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let tok = match c {
            ' ' | '\t' | '\r' | '\n' => {
                i += 1;
                continue;
            }
            '!' => Token::Not,
            '&' => Token::And,
            '|' => Token::Or,
            '(' => Token::LParen,
            ')' => Token::RParen,
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &text[start..i];
                if word.as_bytes()[0].is_ascii_digit() {
                    return Err(LogicError::Syntax {
                        position: start,
                        message: format!("identifier `{word}` starts with a digit"),
                    });
                }
                let tok = match word {
                    "true" => Token::True,
                    "false" => Token::False,
                    _ => Token::Ident(word.to_string()),
                };
                out.push((start, tok));
                continue;
            }
            _ => {
                return Err(LogicError::Syntax {
                    position: i,
                    message: format!("unexpected character `{}`", text[i..].chars().next().unwrap()),
                })
            }
        };
        out.push((i, tok));
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
    vocab: &'a Vocab,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn error(&self, message: impl Into<String>) -> LogicError {
        LogicError::Syntax {
            position: self.offset(),
            message: message.into(),
        }
    }

    fn parse_or(&mut self) -> Result<Formula, LogicError> {
        let mut children = vec![self.parse_and()?];
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            children.push(self.parse_and()?);
        }
        Ok(Formula::or(children))
    }

    fn parse_and(&mut self) -> Result<Formula, LogicError> {
        let mut children = vec![self.parse_unary()?];
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            children.push(self.parse_unary()?);
        }
        Ok(Formula::and(children))
    }

    fn parse_unary(&mut self) -> Result<Formula, LogicError> {
        if self.peek() == Some(&Token::Not) {
            self.pos += 1;
            return Ok(Formula::not(self.parse_unary()?));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Formula, LogicError> {
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return Err(self.error("unexpected end of formula")),
        };
        match tok {
            Token::True => {
                self.pos += 1;
                Ok(Formula::True)
            }
            Token::False => {
                self.pos += 1;
                Ok(Formula::False)
            }
            Token::Ident(name) => {
                let atom = self
                    .vocab
                    .get(&name)
                    .ok_or_else(|| LogicError::UnknownAtom(name.clone()))?
                    .clone();
                self.pos += 1;
                Ok(Formula::Var(atom))
            }
            Token::LParen => {
                self.pos += 1;
                let inner = self.parse_or()?;
                if self.peek() != Some(&Token::RParen) {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            other => Err(self.error(format!("unexpected token {other:?}"))),
        }
    }
}

/// Parse `text`, resolving every identifier against `vocab`.
pub fn parse_formula(text: &str, vocab: &Vocab) -> Result<Formula, LogicError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(LogicError::Syntax {
            position: 0,
            message: "empty formula".into(),
        });
    }
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
        vocab,
    };
    let f = p.parse_or()?;
    if p.pos != p.tokens.len() {
        return Err(p.error("trailing input after formula"));
    }
    Ok(f)
}

/// An atom or its negation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub atom: Atom,
    pub positive: bool,
}

impl Literal {
    pub fn pos(atom: Atom) -> Self {
        Literal { atom, positive: true }
    }

    pub fn neg(atom: Atom) -> Self {
        Literal { atom, positive: false }
    }

    pub fn eval(&self, w: &TruthAssignment) -> bool {
        w.contains(&self.atom) == self.positive
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.positive {
            write!(f, "{}", self.atom)
        } else {
            write!(f, "!{}", self.atom)
        }
    }
}

/// Conjunction of literals over distinct atoms, sorted by atom name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Clause {
    literals: Vec<Literal>,
}

impl Clause {
    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn eval(&self, w: &TruthAssignment) -> bool {
        self.literals.iter().all(|l| l.eval(w))
    }

    /// Whether some assignment satisfies both clauses.
    pub fn consistent_with(&self, other: &Clause) -> bool {
        self.literals.iter().all(|l| {
            other
                .literals
                .iter()
                .all(|m| m.atom != l.atom || m.positive == l.positive)
        })
    }

    fn to_formula(&self) -> Formula {
        Formula::and(
            self.literals
                .iter()
                .map(|l| {
                    let v = Formula::Var(l.atom.clone());
                    if l.positive {
                        v
                    } else {
                        Formula::not(v)
                    }
                })
                .collect(),
        )
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.literals.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Non-empty disjunction of non-empty, non-contradictory clauses.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DnfFormula {
    clauses: Vec<Clause>,
}

impl DnfFormula {
    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn eval(&self, w: &TruthAssignment) -> bool {
        self.clauses.iter().any(|c| c.eval(w))
    }

    pub fn to_formula(&self) -> Formula {
        Formula::or(self.clauses.iter().map(Clause::to_formula).collect())
    }
}

impl fmt::Display for DnfFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_formula())
    }
}

/// Result of DNF normalization. The constants are kept apart from
/// [`DnfFormula`] so no clause list is ever empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormalForm {
    True,
    False,
    Dnf(DnfFormula),
}

impl NormalForm {
    pub fn eval(&self, w: &TruthAssignment) -> bool {
        match self {
            NormalForm::True => true,
            NormalForm::False => false,
            NormalForm::Dnf(d) => d.eval(w),
        }
    }

    pub fn to_formula(&self) -> Formula {
        match self {
            NormalForm::True => Formula::True,
            NormalForm::False => Formula::False,
            NormalForm::Dnf(d) => d.to_formula(),
        }
    }

    /// Whether the two normal forms share a satisfying assignment.
    pub fn overlaps(&self, other: &NormalForm) -> bool {
        match (self, other) {
            (NormalForm::False, _) | (_, NormalForm::False) => false,
            (NormalForm::True, _) | (_, NormalForm::True) => true,
            (NormalForm::Dnf(a), NormalForm::Dnf(b)) => a
                .clauses
                .iter()
                .any(|x| b.clauses.iter().any(|y| x.consistent_with(y))),
        }
    }
}

impl fmt::Display for NormalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_formula())
    }
}

// Intermediate clause: atom -> polarity. An empty map is the true clause.
type RawClause = BTreeMap<Atom, bool>;

fn merge(a: &RawClause, b: &RawClause) -> Option<RawClause> {
    let mut out = a.clone();
    for (atom, &pol) in b {
        match out.get(atom) {
            Some(&p) if p != pol => return None,
            _ => {
                out.insert(atom.clone(), pol);
            }
        }
    }
    Some(out)
}

fn raw_dnf(f: &Formula, positive: bool, cap: usize) -> Result<Vec<RawClause>, LogicError> {
    let conjunctive = match f {
        Formula::True | Formula::False => {
            let is_true = matches!(f, Formula::True) == positive;
            return Ok(if is_true { vec![RawClause::new()] } else { vec![] });
        }
        Formula::Var(a) => return Ok(vec![RawClause::from([(a.clone(), positive)])]),
        Formula::Not(g) => return raw_dnf(g, !positive, cap),
        Formula::And(_) => positive,
        Formula::Or(_) => !positive,
    };
    let children = match f {
        Formula::And(fs) | Formula::Or(fs) => fs,
        _ => unreachable!(),
    };
    if conjunctive {
        let mut acc = vec![RawClause::new()];
        for child in children {
            let rhs = raw_dnf(child, positive, cap)?;
            let mut next = Vec::new();
            for a in &acc {
                for b in &rhs {
                    if let Some(m) = merge(a, b) {
                        next.push(m);
                        if next.len() > cap {
                            return Err(LogicError::DnfTooLarge { cap });
                        }
                    }
                }
            }
            next.sort();
            next.dedup();
            acc = next;
        }
        Ok(acc)
    } else {
        let mut acc = Vec::new();
        for child in children {
            acc.extend(raw_dnf(child, positive, cap)?);
            if acc.len() > cap {
                return Err(LogicError::DnfTooLarge { cap });
            }
        }
        Ok(acc)
    }
}

/// Normalize with the default clause cap.
pub fn to_dnf(f: &Formula) -> Result<NormalForm, LogicError> {
    to_dnf_with_cap(f, DEFAULT_CLAUSE_CAP)
}

pub fn to_dnf_with_cap(f: &Formula, cap: usize) -> Result<NormalForm, LogicError> {
    let raw = raw_dnf(f, true, cap)?;
    if raw.iter().any(|c| c.is_empty()) {
        return Ok(NormalForm::True);
    }
    let mut clauses: Vec<Clause> = raw
        .into_iter()
        .map(|c| Clause {
            literals: c
                .into_iter()
                .map(|(atom, positive)| Literal { atom, positive })
                .collect(),
        })
        .collect();
    clauses.sort();
    clauses.dedup();
    if clauses.is_empty() {
        Ok(NormalForm::False)
    } else {
        Ok(NormalForm::Dnf(DnfFormula { clauses }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo() -> Vocab {
        Vocab::from_names(&["red", "green", "blue", "triangle", "circle"]).unwrap()
    }

    fn v(name: &str) -> Formula {
        Formula::Var(Atom::new(name).unwrap())
    }

    fn w(names: &[&str]) -> TruthAssignment {
        TruthAssignment::from_names(&geo(), names).unwrap()
    }

    #[test]
    fn parses_negated_conjunction() {
        let vocab = Vocab::from_names(&["X", "Y"]).unwrap();
        let f = parse_formula("!X&Y", &vocab).unwrap();
        assert_eq!(f, Formula::And(vec![Formula::not(v("X")), v("Y")]));
    }

    #[test]
    fn parses_keywords_and_precedence() {
        assert_eq!(parse_formula("true", &geo()).unwrap(), Formula::True);
        assert_eq!(parse_formula("false", &geo()).unwrap(), Formula::False);
        let f = parse_formula("red & (triangle | circle)", &geo()).unwrap();
        assert_eq!(
            f,
            Formula::And(vec![v("red"), Formula::Or(vec![v("triangle"), v("circle")])])
        );
        let g = parse_formula("red & triangle | blue", &geo()).unwrap();
        assert_eq!(
            g,
            Formula::Or(vec![Formula::And(vec![v("red"), v("triangle")]), v("blue")])
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_formula("purple", &geo()),
            Err(LogicError::UnknownAtom(n)) if n == "purple"
        ));
        assert!(matches!(parse_formula("", &geo()), Err(LogicError::Syntax { position: 0, .. })));
        assert!(matches!(
            parse_formula("red &", &geo()),
            Err(LogicError::Syntax { position: 5, .. })
        ));
        assert!(matches!(
            parse_formula("(red", &geo()),
            Err(LogicError::Syntax { .. })
        ));
        assert!(matches!(
            parse_formula("red ) blue", &geo()),
            Err(LogicError::Syntax { position: 4, .. })
        ));
        assert!(matches!(parse_formula("red + blue", &geo()), Err(LogicError::Syntax { .. })));
    }

    #[test]
    fn atom_names_are_validated() {
        assert!(Atom::new("_x1").is_ok());
        assert!(Atom::new("1x").is_err());
        assert!(Atom::new("").is_err());
        assert!(Atom::new("true").is_err());
        assert!(Vocab::from_names(&["a", "a"]).is_err());
    }

    #[test]
    fn evaluation() {
        let f = Formula::And(vec![v("red"), Formula::not(v("triangle"))]);
        assert!(evaluate(&f, &w(&["red"])));
        assert!(!evaluate(&f, &w(&["red", "triangle"])));
        let any = Formula::Or(["red", "green", "blue", "triangle", "circle"].map(v).to_vec());
        assert!(!evaluate(&any, &w(&[])));
    }

    #[test]
    fn de_morgan() {
        let f = Formula::not(Formula::Or(vec![v("red"), v("green")]));
        let NormalForm::Dnf(d) = to_dnf(&f).unwrap() else { panic!() };
        assert_eq!(d.clauses().len(), 1);
        assert_eq!(d.to_string(), "!green & !red");
    }

    #[test]
    fn contradiction_is_false() {
        let f = Formula::And(vec![v("red"), Formula::not(v("red"))]);
        assert_eq!(to_dnf(&f).unwrap(), NormalForm::False);
        assert_eq!(to_dnf(&Formula::True).unwrap(), NormalForm::True);
        assert_eq!(to_dnf(&Formula::Or(vec![v("red"), Formula::True])).unwrap(), NormalForm::True);
    }

    #[test]
    fn already_dnf_guard_sorted() {
        let f = parse_formula("(red & triangle) | (blue & !triangle)", &geo()).unwrap();
        let NormalForm::Dnf(d) = to_dnf(&f).unwrap() else { panic!() };
        assert_eq!(d.to_string(), "blue & !triangle | red & triangle");
        assert_eq!(d.clauses().len(), 2);
    }

    #[test]
    fn clause_cap() {
        // (a1|b1) & ... & (a13|b13) has 2^13 clauses
        let names: Vec<String> = (0..13).flat_map(|i| [format!("a{i}"), format!("b{i}")]).collect();
        let vocab = Vocab::from_names(&names).unwrap();
        let text = (0..13).map(|i| format!("(a{i} | b{i})")).collect::<Vec<_>>().join(" & ");
        let f = parse_formula(&text, &vocab).unwrap();
        assert_eq!(to_dnf(&f), Err(LogicError::DnfTooLarge { cap: DEFAULT_CLAUSE_CAP }));
        assert!(to_dnf_with_cap(&f, 1 << 14).is_ok());
    }

    #[test]
    fn display_reparses() {
        let f = parse_formula("!(red | !blue) & (triangle | (circle & green))", &geo()).unwrap();
        assert_eq!(parse_formula(&f.to_string(), &geo()).unwrap(), f);
    }

    fn arb_formula() -> impl Strategy<Value = Formula> {
        let leaf = prop_oneof![
            Just(Formula::True),
            Just(Formula::False),
            prop::sample::select(vec!["red", "green", "blue", "triangle", "circle"]).prop_map(v),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(Formula::not),
                prop::collection::vec(inner.clone(), 2..4).prop_map(Formula::And),
                prop::collection::vec(inner, 2..4).prop_map(Formula::Or),
            ]
        })
    }

    proptest! {
        #[test]
        fn dnf_is_equivalent(f in arb_formula()) {
            let n = to_dnf(&f).unwrap();
            for a in geo().all_assignments() {
                prop_assert_eq!(n.eval(&a), f.eval(&a));
            }
        }

        #[test]
        fn dnf_is_idempotent(f in arb_formula()) {
            let n = to_dnf(&f).unwrap();
            prop_assert_eq!(to_dnf(&n.to_formula()).unwrap(), n);
        }

        #[test]
        fn display_round_trips(f in arb_formula()) {
            let back = parse_formula(&f.to_string(), &geo()).unwrap();
            for a in geo().all_assignments() {
                prop_assert_eq!(back.eval(&a), f.eval(&a));
            }
        }

        #[test]
        fn garbage_suffix_is_rejected(f in arb_formula(), junk in prop::sample::select(vec![")", " red", " (", " !", " true"])) {
            let text = format!("{f}{junk}");
            let is_syntax_error = matches!(parse_formula(&text, &geo()), Err(LogicError::Syntax { .. }));
            prop_assert!(is_syntax_error);
        }
    }
}
