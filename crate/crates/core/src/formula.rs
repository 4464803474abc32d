//! Logical forms over concept primitives.
//!
//! Search only ever produces formulas where `Not` wraps a literal (a
//! primitive or a `Neighbors` node); [`Formula::check_grammar`] and the parser
//! enforce that shape. Evaluation itself accepts any tree.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bitmask::Bitmask;
use crate::concepts::{ConceptId, ConceptStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    Primitive(ConceptId),
    Not(Box<Formula>),
    Neighbors(ConceptId),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
}

/// Binary connective used when composing a formula with a literal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connective {
    And,
    Or,
}

impl Formula {
    pub fn primitive(id: ConceptId) -> Self {
        Formula::Primitive(id)
    }

    pub fn neighbors(id: ConceptId) -> Self {
        Formula::Neighbors(id)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn compose(self, op: Connective, rhs: Formula) -> Self {
        match op {
            Connective::And => Formula::and(self, rhs),
            Connective::Or => Formula::or(self, rhs),
        }
    }

    /// Primitive or `Neighbors` node.
    pub fn is_literal(&self) -> bool {
        matches!(self, Formula::Primitive(_) | Formula::Neighbors(_))
    }

    /// Number of primitive and `Neighbors` leaves; `Not` adds nothing.
    pub fn length(&self) -> usize {
        match self {
            Formula::Primitive(_) | Formula::Neighbors(_) => 1,
            Formula::Not(f) => f.length(),
            Formula::And(a, b) | Formula::Or(a, b) => a.length() + b.length(),
        }
    }

    pub fn check_grammar(&self) -> Result<()> {
        match self {
            Formula::Primitive(_) | Formula::Neighbors(_) => Ok(()),
            Formula::Not(f) if f.is_literal() => Ok(()),
            Formula::Not(_) => Err(Error::InvalidOperator(
                "NOT applies only to primitives".into(),
            )),
            Formula::And(a, b) | Formula::Or(a, b) => {
                a.check_grammar()?;
                b.check_grammar()
            }
        }
    }

    /// Concept ids referenced by leaves, in left-to-right order.
    pub fn concept_ids(&self) -> Vec<ConceptId> {
        let mut out = Vec::new();
        self.collect_ids(&mut out);
        out
    }

    fn collect_ids(&self, out: &mut Vec<ConceptId>) {
        match self {
            Formula::Primitive(id) | Formula::Neighbors(id) => out.push(*id),
            Formula::Not(f) => f.collect_ids(out),
            Formula::And(a, b) | Formula::Or(a, b) => {
                a.collect_ids(out);
                b.collect_ids(out);
            }
        }
    }

    pub fn canonical_key(&self) -> CanonicalKey {
        let mut s = String::new();
        write_key(self, &mut s);
        CanonicalKey(s)
    }

    /// Parenthesized infix rendering using concept display names.
    pub fn render(&self, store: &ConceptStore) -> Result<String> {
        let mut out = String::new();
        render_into(self, &|id| store.name(id), &mut out)?;
        Ok(out)
    }

    pub fn render_with<'a, F>(&self, name_of: F) -> Result<String>
    where
        F: Fn(ConceptId) -> Result<&'a str>,
    {
        let mut out = String::new();
        render_into(self, &name_of, &mut out)?;
        Ok(out)
    }

    pub fn parse(input: &str, store: &ConceptStore) -> Result<Formula> {
        Self::parse_with(input, |name| {
            store
                .id_of(name)
                .ok_or_else(|| Error::MissingConcept(name.to_string()))
        })
    }

    /// Parses with a caller-supplied name resolver.
    pub fn parse_with<F>(input: &str, resolve: F) -> Result<Formula>
    where
        F: FnMut(&str) -> Result<ConceptId>,
    {
        let tokens = tokenize(input)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            resolve,
            input_len: input.len(),
        };
        let f = p.expr()?;
        if let Some(t) = p.tokens.get(p.pos) {
            return Err(Error::Parse {
                pos: t.pos,
                msg: format!("unexpected trailing token {:?}", t.kind),
            });
        }
        f.check_grammar()?;
        Ok(f)
    }

    /// Evaluates against `store`, consulting and filling `cache`.
    pub fn evaluate(&self, store: &ConceptStore, cache: &mut EvalCache) -> Result<Bitmask> {
        let key = self.canonical_key();
        if let Some(m) = cache.map.get(&key) {
            return Ok(m.clone());
        }
        let mask = match self {
            Formula::Primitive(id) => store.mask(*id)?.clone(),
            Formula::Neighbors(id) => store.neighbors_mask(*id)?.clone(),
            Formula::Not(f) => f.evaluate(store, cache)?.not(),
            Formula::And(a, b) => a.evaluate(store, cache)?.and(&b.evaluate(store, cache)?)?,
            Formula::Or(a, b) => a.evaluate(store, cache)?.or(&b.evaluate(store, cache)?)?,
        };
        cache.map.insert(key, mask.clone());
        Ok(mask)
    }
}

/// Memo of evaluated masks keyed by canonical form. Only affects speed.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: HashMap<CanonicalKey, Bitmask>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Normalized form: `And`/`Or` chains flattened and operands sorted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonicalKey(String);

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn write_key(f: &Formula, out: &mut String) {
    use std::fmt::Write;
    match f {
        Formula::Primitive(id) => {
            let _ = write!(out, "c{:010}", id.0);
        }
        Formula::Neighbors(id) => {
            let _ = write!(out, "nb(c{:010})", id.0);
        }
        Formula::Not(inner) => {
            out.push_str("not(");
            write_key(inner, out);
            out.push(')');
        }
        Formula::And(..) | Formula::Or(..) => {
            let (tag, is_and) = match f {
                Formula::And(..) => ("and(", true),
                _ => ("or(", false),
            };
            let mut operands = Vec::new();
            flatten(f, is_and, &mut operands);
            let mut keys: Vec<String> = operands
                .into_iter()
                .map(|op| {
                    let mut s = String::new();
                    write_key(op, &mut s);
                    s
                })
                .collect();
            keys.sort_unstable();
            out.push_str(tag);
            out.push_str(&keys.join(","));
            out.push(')');
        }
    }
}

fn flatten<'a>(f: &'a Formula, is_and: bool, out: &mut Vec<&'a Formula>) {
    match (f, is_and) {
        (Formula::And(a, b), true) | (Formula::Or(a, b), false) => {
            flatten(a, is_and, out);
            flatten(b, is_and, out);
        }
        _ => out.push(f),
    }
}

const KEYWORDS: [&str; 4] = ["AND", "OR", "NOT", "NEIGHBORS"];

fn needs_quoting(name: &str) -> bool {
    name.is_empty()
        || KEYWORDS.contains(&name)
        || name
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '(' | ')' | '"' | '\\'))
}

fn push_name(name: &str, out: &mut String) {
    if needs_quoting(name) {
        out.push('"');
        for c in name.chars() {
            if matches!(c, '"' | '\\') {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('"');
    } else {
        out.push_str(name);
    }
}

fn render_into<'a, F>(f: &Formula, name_of: &F, out: &mut String) -> Result<()>
where
    F: Fn(ConceptId) -> Result<&'a str>,
{
    match f {
        Formula::Primitive(id) => push_name(name_of(*id)?, out),
        Formula::Neighbors(id) => {
            out.push_str("NEIGHBORS(");
            push_name(name_of(*id)?, out);
            out.push(')');
        }
        Formula::Not(inner) => {
            out.push_str("NOT ");
            render_operand(inner, None, name_of, out)?;
        }
        Formula::And(a, b) | Formula::Or(a, b) => {
            let (op, word) = match f {
                Formula::And(..) => (Connective::And, " AND "),
                _ => (Connective::Or, " OR "),
            };
            render_operand(a, Some(op), name_of, out)?;
            out.push_str(word);
            render_operand(b, Some(op), name_of, out)?;
        }
    }
    Ok(())
}

/// Operands of `parent` are bare when they are literals, negations or chains
/// of the same connective; anything else gets parentheses.
fn render_operand<'a, F>(
    f: &Formula,
    parent: Option<Connective>,
    name_of: &F,
    out: &mut String,
) -> Result<()>
where
    F: Fn(ConceptId) -> Result<&'a str>,
{
    let bare = match f {
        Formula::Primitive(_) | Formula::Neighbors(_) => true,
        Formula::Not(_) => parent.is_some(),
        Formula::And(..) => parent == Some(Connective::And),
        Formula::Or(..) => parent == Some(Connective::Or),
    };
    if bare {
        render_into(f, name_of, out)
    } else {
        out.push('(');
        render_into(f, name_of, out)?;
        out.push(')');
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TokenKind {
    LParen,
    RParen,
    And,
    Or,
    Not,
    Neighbors,
    Name(String),
}

#[derive(Clone, Debug)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = input.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '(' || c == ')' {
            chars.next();
            let kind = if c == '(' {
                TokenKind::LParen
            } else {
                TokenKind::RParen
            };
            tokens.push(Token { kind, pos });
        } else if c == '"' {
            chars.next();
            let mut name = String::new();
            let mut closed = false;
            while let Some((_, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, e)) => name.push(e),
                        None => break,
                    },
                    '"' => {
                        closed = true;
                        break;
                    }
                    _ => name.push(c),
                }
            }
            if !closed {
                return Err(Error::Parse {
                    pos,
                    msg: "unterminated quoted name".into(),
                });
            }
            tokens.push(Token {
                kind: TokenKind::Name(name),
                pos,
            });
        } else {
            let mut word = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_whitespace() || matches!(c, '(' | ')' | '"') {
                    break;
                }
                word.push(c);
                chars.next();
            }
            let kind = match word.as_str() {
                "AND" => TokenKind::And,
                "OR" => TokenKind::Or,
                "NOT" => TokenKind::Not,
                "NEIGHBORS" => TokenKind::Neighbors,
                _ => TokenKind::Name(word),
            };
            tokens.push(Token { kind, pos });
        }
    }
    Ok(tokens)
}

struct Parser<F> {
    tokens: Vec<Token>,
    pos: usize,
    resolve: F,
    input_len: usize,
}

impl<F> Parser<F>
where
    F: FnMut(&str) -> Result<ConceptId>,
{
    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map_or(self.input_len, |t| t.pos)
    }

    fn expect(&mut self, kind: TokenKind) -> Result<()> {
        if self.peek() == Some(&kind) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse {
                pos: self.here(),
                msg: format!("expected {kind:?}, found {:?}", self.peek()),
            })
        }
    }

    fn expr(&mut self) -> Result<Formula> {
        let mut lhs = self.conjunction()?;
        while self.peek() == Some(&TokenKind::Or) {
            self.pos += 1;
            let rhs = self.conjunction()?;
            lhs = Formula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> Result<Formula> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&TokenKind::And) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Formula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula> {
        if self.peek() == Some(&TokenKind::Not) {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Formula::not(inner));
        }
        self.atom()
    }

    fn name(&mut self) -> Result<ConceptId> {
        match self.tokens.get(self.pos).map(|t| t.kind.clone()) {
            Some(TokenKind::Name(n)) => {
                self.pos += 1;
                (self.resolve)(&n)
            }
            other => Err(Error::Parse {
                pos: self.here(),
                msg: format!("expected concept name, found {other:?}"),
            }),
        }
    }

    fn atom(&mut self) -> Result<Formula> {
        match self.peek() {
            Some(TokenKind::LParen) => {
                self.pos += 1;
                let f = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(f)
            }
            Some(TokenKind::Neighbors) => {
                self.pos += 1;
                self.expect(TokenKind::LParen)?;
                let id = self.name()?;
                self.expect(TokenKind::RParen)?;
                Ok(Formula::Neighbors(id))
            }
            _ => self.name().map(Formula::Primitive),
        }
    }
}
