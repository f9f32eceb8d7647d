//! Per-token projectivity marking.
//!
//! Two sources are supported: a controlled grammar that covers the three
//! quantifiers with known projection rows (plus neutral determiners treated
//! as existential), and an ingestion path for externally computed rows, so
//! any polarity tagger can be bridged in via JSON.

use crate::error::{NatlogError, Result};
use crate::relations::{Projectivity, Relation, RELATION_TOKENS};
use serde::Deserialize;
use std::collections::BTreeSet;
use std::fmt;

/// Quantifier argument position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgPosition {
    Arg1,
    Arg2,
}

/// Determiners the controlled grammar understands.
///
/// `The` and `A` have no row of their own; they are treated as existential
/// and reuse the upward-monotone `some` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quantifier {
    All,
    Some,
    No,
    The,
    A,
}

pub const ALL_QUANTIFIERS: [Quantifier; 5] =
    [Quantifier::All, Quantifier::Some, Quantifier::No, Quantifier::The, Quantifier::A];

impl Quantifier {
    pub fn surface(self) -> &'static str {
        match self {
            Quantifier::All => "all",
            Quantifier::Some => "some",
            Quantifier::No => "no",
            Quantifier::The => "the",
            Quantifier::A => "a",
        }
    }

    pub fn from_surface(word: &str) -> Option<Quantifier> {
        match word {
            "all" | "every" => Some(Quantifier::All),
            "some" => Some(Quantifier::Some),
            "no" => Some(Quantifier::No),
            "the" => Some(Quantifier::The),
            "a" | "an" => Some(Quantifier::A),
            _ => None,
        }
    }

    /// Projection row for one argument position.
    pub fn row(self, pos: ArgPosition) -> Projectivity {
        match (self, pos) {
            (Quantifier::All, ArgPosition::Arg1) => Projectivity::ALL_ARG1,
            (Quantifier::All, ArgPosition::Arg2) => Projectivity::ALL_ARG2,
            (Quantifier::No, ArgPosition::Arg1) => Projectivity::NO_ARG1,
            (Quantifier::No, ArgPosition::Arg2) => Projectivity::NO_ARG2,
            (Quantifier::Some | Quantifier::The | Quantifier::A, ArgPosition::Arg1) => Projectivity::SOME_ARG1,
            (Quantifier::Some | Quantifier::The | Quantifier::A, ArgPosition::Arg2) => Projectivity::SOME_ARG2,
        }
    }

    /// Whether both argument rows preserve entailment direction.
    pub fn is_upward(self) -> bool {
        matches!(self, Quantifier::Some | Quantifier::The | Quantifier::A)
    }
}

/// Default projectivity for tokens with no governing quantifier: the
/// upward-monotone `some` row, which is the identity on the three
/// monotonicity relations.
pub const DEFAULT_ROW: Projectivity = Projectivity::SOME_ARG1;

/// A constituency tree over token indices. Leaves are the indices in
/// left-to-right order; internal nodes may have any arity until binarized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    Leaf(usize),
    Node(Vec<Tree>),
}

impl Tree {
    /// Leaf indices in traversal order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            Tree::Leaf(i) => out.push(*i),
            Tree::Node(children) => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// True when every internal node has exactly two children.
    pub fn is_binary(&self) -> bool {
        match self {
            Tree::Leaf(_) => true,
            Tree::Node(children) => children.len() == 2 && children.iter().all(Tree::is_binary),
        }
    }

    fn check_spanning(&self) -> Result<()> {
        let leaves = self.leaves();
        if leaves.is_empty() {
            return Err(NatlogError::Tree("tree has no leaves".into()));
        }
        for (expect, got) in leaves.iter().enumerate() {
            if *got != expect {
                return Err(NatlogError::Tree(format!(
                    "leaves must be the token indices 0..{} in order; found {got} at position {expect}",
                    leaves.len()
                )));
            }
        }
        Ok(())
    }

    /// Parse the bracketed form, e.g. `(0 ((1 2) (3 4)))`.
    pub fn parse(text: &str) -> Result<Tree> {
        let mut chars = text.chars().peekable();
        let tree = parse_tree(&mut chars)?;
        skip_ws(&mut chars);
        if chars.next().is_some() {
            return Err(NatlogError::Tree("trailing input after tree".into()));
        }
        Ok(tree)
    }
}

fn skip_ws(chars: &mut std::iter::Peekable<std::str::Chars<'_>>) {
    while chars.peek().is_some_and(|c| c.is_whitespace()) {
        chars.next();
    }
}

fn parse_tree(chars: &mut std::iter::Peekable<std::str::Chars<'_>>) -> Result<Tree> {
    skip_ws(chars);
    match chars.peek() {
        Some('(') => {
            chars.next();
            let mut children = Vec::new();
            loop {
                skip_ws(chars);
                match chars.peek() {
                    Some(')') => {
                        chars.next();
                        break;
                    }
                    Some(_) => children.push(parse_tree(chars)?),
                    None => return Err(NatlogError::Tree("unbalanced '('".into())),
                }
            }
            if children.is_empty() {
                return Err(NatlogError::Tree("empty node '()'".into()));
            }
            Ok(Tree::Node(children))
        }
        Some(c) if c.is_ascii_digit() => {
            let mut n = 0usize;
            while let Some(c) = chars.peek().copied() {
                if let Some(d) = c.to_digit(10) {
                    n = n * 10 + d as usize;
                    chars.next();
                } else {
                    break;
                }
            }
            Ok(Tree::Leaf(n))
        }
        Some(c) => Err(NatlogError::Tree(format!("unexpected character '{c}'"))),
        None => Err(NatlogError::Tree("empty input".into())),
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tree::Leaf(i) => write!(f, "{i}"),
            Tree::Node(children) => {
                write!(f, "(")?;
                for (k, c) in children.iter().enumerate() {
                    if k > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Right-branching binarization: nodes with more than two children become
/// `(first (rest...))` recursively; single-child nodes are unwrapped.
/// The input must span token indices `0..n` in order.
pub fn binarize(tree: &Tree) -> Result<Tree> {
    tree.check_spanning()?;
    Ok(binarize_unchecked(tree))
}

fn binarize_unchecked(tree: &Tree) -> Tree {
    match tree {
        Tree::Leaf(i) => Tree::Leaf(*i),
        Tree::Node(children) => {
            let kids: Vec<Tree> = children.iter().map(binarize_unchecked).collect();
            fold_right(kids)
        }
    }
}

fn fold_right(mut kids: Vec<Tree>) -> Tree {
    match kids.len() {
        1 => kids.pop().unwrap(),
        2 => {
            let right = kids.pop().unwrap();
            let left = kids.pop().unwrap();
            Tree::Node(vec![left, right])
        }
        _ => {
            let first = kids.remove(0);
            Tree::Node(vec![first, fold_right(kids)])
        }
    }
}

/// A right comb over `n` tokens: `(0 (1 (2 ...)))`.
pub fn right_comb(n: usize) -> Tree {
    assert!(n > 0);
    fold_right((0..n).map(Tree::Leaf).collect())
}

/// A tokenized sentence with one projectivity per token and an optional
/// binarized constituency parse.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub projectivities: Vec<Projectivity>,
    pub parse: Option<Tree>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lexical categories for the controlled grammar.
///
/// Sentence template: `Quantifier (Adj)* Noun (PostMod)* VP` where the VP is
/// either a plain verb or an auxiliary plus gerund, optionally followed by an
/// object noun phrase `(Adj)* Noun (PostMod)*`. A sentence that does not
/// start with a known quantifier is accepted whole with the default upward
/// row on every token.
#[derive(Debug, Clone, Default)]
pub struct ControlledGrammar {
    pub nouns: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub gerunds: BTreeSet<String>,
    pub post_modifiers: BTreeSet<String>,
}

const AUXILIARIES: [&str; 2] = ["are", "is"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cat {
    Noun,
    Adjective,
    Verb,
    Gerund,
    PostModifier,
    Auxiliary,
}

impl ControlledGrammar {
    fn category(&self, word: &str) -> Option<Cat> {
        if self.nouns.contains(word) {
            Some(Cat::Noun)
        } else if self.adjectives.contains(word) {
            Some(Cat::Adjective)
        } else if self.verbs.contains(word) {
            Some(Cat::Verb)
        } else if self.gerunds.contains(word) {
            Some(Cat::Gerund)
        } else if self.post_modifiers.contains(word) {
            Some(Cat::PostModifier)
        } else if AUXILIARIES.contains(&word) {
            Some(Cat::Auxiliary)
        } else {
            None
        }
    }
}

struct ParsedSentence {
    quantifier: Quantifier,
    // Token index ranges, end exclusive.
    arg1: (usize, usize),
    arg2: (usize, usize),
}

fn parse_controlled(tokens: &[String], grammar: &ControlledGrammar) -> Result<Option<ParsedSentence>> {
    let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let Some(quantifier) = Quantifier::from_surface(&lower[0]) else {
        return Ok(None);
    };
    let err = |position: usize, expected: &str| NatlogError::GrammarParse {
        token: tokens[position].clone(),
        position,
        expected: expected.to_string(),
    };
    let np_end = |mut i: usize, after: &str| -> Result<usize> {
        while i < lower.len() && grammar.category(&lower[i]) == Some(Cat::Adjective) {
            i += 1;
        }
        if i >= lower.len() || grammar.category(&lower[i]) != Some(Cat::Noun) {
            if i >= lower.len() {
                return Err(err(lower.len() - 1, "a noun to end the sentence"));
            }
            return Err(err(i, after));
        }
        i += 1;
        while i < lower.len() && grammar.category(&lower[i]) == Some(Cat::PostModifier) {
            i += 1;
        }
        Ok(i)
    };

    if lower.len() < 2 {
        return Err(err(0, "a noun phrase after the quantifier"));
    }
    let arg1_end = np_end(1, "a noun in the subject")?;
    if arg1_end >= lower.len() {
        return Err(err(arg1_end - 1, "a verb phrase after the subject"));
    }
    // Verb phrase: AUX GERUND | GERUND | VERB, then an optional object NP.
    let mut i = arg1_end;
    match grammar.category(&lower[i]) {
        Some(Cat::Auxiliary) => {
            i += 1;
            if i >= lower.len() || grammar.category(&lower[i]) != Some(Cat::Gerund) {
                if i >= lower.len() {
                    return Err(err(lower.len() - 1, "a gerund after the auxiliary"));
                }
                return Err(err(i, "a gerund after the auxiliary"));
            }
            i += 1;
        }
        Some(Cat::Verb) | Some(Cat::Gerund) => {
            i += 1;
        }
        _ => return Err(err(i, "a verb or auxiliary")),
    }
    if i < lower.len() {
        i = np_end(i, "an object noun")?;
    }
    if i != lower.len() {
        return Err(err(i, "end of sentence"));
    }
    Ok(Some(ParsedSentence {
        quantifier,
        arg1: (1, arg1_end),
        arg2: (arg1_end, lower.len()),
    }))
}

/// Assign projectivities from the controlled grammar.
///
/// Tokens in the quantifier's restrictor get its first-argument row, tokens
/// in the verb phrase its second-argument row, and everything else (the
/// quantifier itself, or all tokens when no quantifier is present) the
/// default upward row. Also builds a binarized `(Q (NP) (VP))` parse.
pub fn mark_polarity(tokens: &[String], grammar: &ControlledGrammar) -> Result<AnnotatedSentence> {
    if tokens.is_empty() {
        return Err(NatlogError::Contract("cannot mark an empty sentence".into()));
    }
    let parsed = parse_controlled(tokens, grammar)?;
    let mut projectivities = vec![DEFAULT_ROW; tokens.len()];
    let parse = match &parsed {
        Some(p) => {
            for i in p.arg1.0..p.arg1.1 {
                projectivities[i] = p.quantifier.row(ArgPosition::Arg1);
            }
            for i in p.arg2.0..p.arg2.1 {
                projectivities[i] = p.quantifier.row(ArgPosition::Arg2);
            }
            let np = Tree::Node((p.arg1.0..p.arg1.1).map(Tree::Leaf).collect());
            let vp = Tree::Node((p.arg2.0..p.arg2.1).map(Tree::Leaf).collect());
            Tree::Node(vec![Tree::Leaf(0), np, vp])
        }
        None => Tree::Node((0..tokens.len()).map(Tree::Leaf).collect()),
    };
    let parse = binarize(&parse)?;
    Ok(AnnotatedSentence {
        tokens: tokens.to_vec(),
        projectivities,
        parse: Some(parse),
    })
}

/// Argument-position span info for a token, as assigned by [`mark_polarity`].
/// Used by the dataset generator to label edit contexts.
pub fn token_contexts(tokens: &[String], grammar: &ControlledGrammar) -> Result<Vec<Option<(Quantifier, ArgPosition)>>> {
    let parsed = parse_controlled(tokens, grammar)?;
    let mut out = vec![None; tokens.len()];
    if let Some(p) = parsed {
        for ctx in out.iter_mut().take(p.arg1.1).skip(p.arg1.0) {
            *ctx = Some((p.quantifier, ArgPosition::Arg1));
        }
        for ctx in out.iter_mut().take(p.arg2.1).skip(p.arg2.0) {
            *ctx = Some((p.quantifier, ArgPosition::Arg2));
        }
    }
    Ok(out)
}

/// One token's row in the JSON annotation-ingestion format.
#[derive(Debug, Deserialize)]
pub struct TokenAnnotation {
    pub token: String,
    pub rho: std::collections::BTreeMap<String, String>,
}

/// Wrap externally computed projectivity rows.
///
/// Each row must be total over the seven relations and must fix equivalence,
/// so downstream identity guarantees hold for ingested sentences too.
pub fn ingest_annotations(tokens: &[String], rows: &[[Relation; 7]]) -> Result<AnnotatedSentence> {
    if tokens.len() != rows.len() {
        return Err(NatlogError::AnnotationLength {
            tokens: tokens.len(),
            rows: rows.len(),
        });
    }
    let mut projectivities = Vec::with_capacity(rows.len());
    for (index, row) in rows.iter().enumerate() {
        let rho = Projectivity::new(*row);
        if !rho.fixes_equivalence() {
            return Err(NatlogError::EquivalenceNotFixed { index });
        }
        projectivities.push(rho);
    }
    Ok(AnnotatedSentence {
        tokens: tokens.to_vec(),
        projectivities,
        parse: None,
    })
}

/// Parse the JSON ingestion format: an array of `{"token": .., "rho": {..}}`
/// objects, with `rho` a total relation-token to relation-token map.
pub fn ingest_annotations_json(json: &str) -> Result<AnnotatedSentence> {
    let entries: Vec<TokenAnnotation> = serde_json::from_str(json)?;
    let tokens: Vec<String> = entries.iter().map(|e| e.token.clone()).collect();
    let mut rows = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let mut row = [Relation::Equivalence; 7];
        for (i, tok) in RELATION_TOKENS.iter().enumerate() {
            let Some(target) = entry.rho.get(*tok) else {
                return Err(NatlogError::NonTotalRow {
                    index,
                    missing: tok.to_string(),
                });
            };
            row[i] = Relation::from_token(target)?;
        }
        rows.push(row);
    }
    ingest_annotations(&tokens, &rows)
}
