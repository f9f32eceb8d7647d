//! Synthetic 1-hop and 2-hop inference pairs over a controlled lexicon,
//! with gold per-step aggregation labels.
//!
//! A premise comes from the template `Quantifier (Adj)? Noun (PostMod)? VP`;
//! the hypothesis differs by one or two edits (modifier insertion, modifier
//! deletion, or word substitution). Every edit carries its lexical relation
//! and monotonicity context, so the gold aggregation trajectory and NLI
//! label re-derive exactly with the symbolic prover — generation and
//! validation share that single source of truth.
//!
//! Serialization is JSONL, one example per line.

use crate::error::{NatlogError, Result};
use crate::polarity::{token_contexts, ArgPosition, ControlledGrammar, Quantifier};
use crate::prover::{prove, state_sequence, LexicalRelations, ProofStep};
use crate::relations::{NliLabel, Projectivity, Relation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Lexicon
// ---------------------------------------------------------------------------

/// Relation-annotated words of one syntactic class.
#[derive(Debug, Clone, Default)]
pub struct WordFamily {
    /// Hyponym-to-hypernym chains; each adjacent or transitive pair is a
    /// forward entailment left to right.
    pub chains: Vec<Vec<String>>,
    /// Pairwise-disjoint sets (alternation).
    pub disjoint_sets: Vec<Vec<String>>,
    /// Equivalent pairs.
    pub synonyms: Vec<(String, String)>,
    /// Explicitly independent pairs.
    pub independent: Vec<(String, String)>,
}

impl WordFamily {
    pub fn members(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for chain in &self.chains {
            out.extend(chain.iter().cloned());
        }
        for set in &self.disjoint_sets {
            out.extend(set.iter().cloned());
        }
        for (a, b) in self.synonyms.iter().chain(&self.independent) {
            out.insert(a.clone());
            out.insert(b.clone());
        }
        out
    }

    /// The gold relation of an ordered pair, if declared.
    pub fn relation(&self, a: &str, b: &str) -> Option<Relation> {
        if a == b {
            return Some(Relation::Equivalence);
        }
        if self
            .synonyms
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
        {
            return Some(Relation::Equivalence);
        }
        for chain in &self.chains {
            let pa = chain.iter().position(|w| w == a);
            let pb = chain.iter().position(|w| w == b);
            if let (Some(pa), Some(pb)) = (pa, pb) {
                return Some(if pa < pb {
                    Relation::ForwardEntailment
                } else {
                    Relation::ReverseEntailment
                });
            }
        }
        for set in &self.disjoint_sets {
            if set.iter().any(|w| w == a) && set.iter().any(|w| w == b) {
                return Some(Relation::Alternation);
            }
        }
        if self
            .independent
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
        {
            return Some(Relation::Independence);
        }
        None
    }

    /// All ordered pairs `(a, b)` with `relation(a, b) == rel`, sorted.
    pub fn pairs_with(&self, rel: Relation) -> Vec<(String, String)> {
        let members: Vec<String> = self.members().into_iter().collect();
        let mut out = Vec::new();
        for a in &members {
            for b in &members {
                if a != b && self.relation(a, b) == Some(rel) {
                    out.push((a.clone(), b.clone()));
                }
            }
        }
        out
    }

    /// Partners of `word`: `(other, relation(word, other))`, sorted.
    pub fn partners(&self, word: &str) -> Vec<(String, Relation)> {
        self.members()
            .into_iter()
            .filter(|other| other != word)
            .filter_map(|other| self.relation(word, &other).map(|rel| (other, rel)))
            .collect()
    }

    /// No pair may be derivable with two different relations.
    pub fn check_consistency(&self) -> Result<()> {
        let members: Vec<String> = self.members().into_iter().collect();
        for a in &members {
            for b in &members {
                if a == b {
                    continue;
                }
                let mut found = BTreeSet::new();
                if self.synonyms.iter().any(|(x, y)| (x == a && y == b) || (x == b && y == a)) {
                    found.insert(Relation::Equivalence);
                }
                for chain in &self.chains {
                    let pa = chain.iter().position(|w| w == a);
                    let pb = chain.iter().position(|w| w == b);
                    if let (Some(pa), Some(pb)) = (pa, pb) {
                        found.insert(if pa < pb {
                            Relation::ForwardEntailment
                        } else {
                            Relation::ReverseEntailment
                        });
                    }
                }
                for set in &self.disjoint_sets {
                    if set.iter().any(|w| w == a) && set.iter().any(|w| w == b) {
                        found.insert(Relation::Alternation);
                    }
                }
                if self.independent.iter().any(|(x, y)| (x == a && y == b) || (x == b && y == a)) {
                    found.insert(Relation::Independence);
                }
                if found.len() > 1 {
                    return Err(NatlogError::Contract(format!(
                        "lexicon declares conflicting relations for ({a}, {b}): {found:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The generation lexicon: nouns, plain verbs, gerunds, and the modifier
/// inventory, all with declared gold relations.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub nouns: WordFamily,
    pub verbs: WordFamily,
    pub gerunds: WordFamily,
    pub adjectives: Vec<String>,
    pub post_modifiers: Vec<String>,
    /// Gerunds that take an object noun phrase. Not edit targets.
    pub transitive_gerunds: Vec<String>,
}

fn strs(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

impl Lexicon {
    /// The built-in desk-scale lexicon.
    pub fn builtin() -> Lexicon {
        let nouns = WordFamily {
            chains: vec![
                strs(&["kittens", "cats", "animals", "creatures"]),
                strs(&["puppies", "dogs", "animals", "creatures"]),
                strs(&["sparrows", "birds", "animals", "creatures"]),
                strs(&["pets", "animals"]),
                strs(&["roses", "flowers", "plants"]),
                strs(&["oaks", "trees", "plants"]),
                strs(&["students", "people"]),
                strs(&["dancers", "people"]),
            ],
            disjoint_sets: vec![
                strs(&["cats", "dogs", "birds"]),
                strs(&["kittens", "puppies", "sparrows"]),
                strs(&["flowers", "trees"]),
                strs(&["roses", "oaks"]),
                strs(&["animals", "plants"]),
                strs(&["people", "plants"]),
            ],
            synonyms: pairs(&[("cats", "felines"), ("dogs", "canines"), ("people", "humans")]),
            independent: pairs(&[
                ("cats", "pets"),
                ("dogs", "pets"),
                ("birds", "pets"),
                ("students", "dancers"),
            ]),
        };
        let verbs = WordFamily {
            chains: vec![
                strs(&["run", "move"]),
                strs(&["walk", "move"]),
                strs(&["sleep", "rest"]),
                strs(&["sing", "perform"]),
                strs(&["dance", "perform"]),
            ],
            disjoint_sets: vec![strs(&["run", "walk", "sleep"]), strs(&["dance", "sleep"])],
            synonyms: pairs(&[("run", "sprint")]),
            independent: pairs(&[("run", "sing"), ("dance", "move")]),
        };
        let gerunds = WordFamily {
            chains: vec![
                strs(&["playing", "moving"]),
                strs(&["running", "moving"]),
                strs(&["sleeping", "resting"]),
                strs(&["eating", "feeding"]),
            ],
            disjoint_sets: vec![strs(&["eating", "playing", "sleeping"]), strs(&["running", "sleeping"])],
            synonyms: pairs(&[("sleeping", "napping")]),
            independent: pairs(&[("playing", "watching"), ("eating", "moving")]),
        };
        Lexicon {
            nouns,
            verbs,
            gerunds,
            adjectives: strs(&["black", "small", "young", "wild", "happy", "hungry"]),
            post_modifiers: strs(&["outside", "indoors", "nearby"]),
            transitive_gerunds: strs(&["chasing", "watching", "feeding"]),
        }
    }

    /// The controlled grammar covering every word this lexicon can emit.
    pub fn grammar(&self) -> ControlledGrammar {
        let mut g = ControlledGrammar::default();
        g.nouns.extend(self.nouns.members());
        g.adjectives.extend(self.adjectives.iter().cloned());
        g.verbs.extend(self.verbs.members());
        g.gerunds.extend(self.gerunds.members());
        g.gerunds.extend(self.transitive_gerunds.iter().cloned());
        g.post_modifiers.extend(self.post_modifiers.iter().cloned());
        g
    }

    pub fn check_consistency(&self) -> Result<()> {
        self.nouns.check_consistency()?;
        self.verbs.check_consistency()?;
        self.gerunds.check_consistency()
    }
}

impl LexicalRelations for Lexicon {
    fn lexical_relation(&self, a: &str, b: &str) -> Option<Relation> {
        self.nouns
            .relation(a, b)
            .or_else(|| self.verbs.relation(a, b))
            .or_else(|| self.gerunds.relation(a, b))
    }
}

// ---------------------------------------------------------------------------
// Examples and edits
// ---------------------------------------------------------------------------

/// How a hypothesis differs from its premise at one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditType {
    #[serde(rename = "insertion")]
    Insertion,
    #[serde(rename = "deletion")]
    Deletion,
    #[serde(rename = "substitution")]
    Substitution,
}

/// Monotonicity context of an edit: the quantifier argument position
/// governing the edited tokens, or the unscoped default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditContext {
    Quantified { quantifier: Quantifier, position: ArgPosition },
    Default,
}

impl EditContext {
    pub fn row(&self) -> Projectivity {
        match self {
            EditContext::Quantified { quantifier, position } => quantifier.row(*position),
            EditContext::Default => crate::polarity::DEFAULT_ROW,
        }
    }

    /// Upward contexts preserve the direction of entailment.
    pub fn is_upward(&self) -> bool {
        self.row().project(Relation::ForwardEntailment) == Relation::ForwardEntailment
    }

    pub fn token(&self) -> String {
        match self {
            EditContext::Quantified { quantifier, position } => format!(
                "{}.{}",
                quantifier.surface(),
                match position {
                    ArgPosition::Arg1 => "arg1",
                    ArgPosition::Arg2 => "arg2",
                }
            ),
            EditContext::Default => "none".to_string(),
        }
    }

    pub fn from_token(tok: &str) -> Result<EditContext> {
        if tok == "none" {
            return Ok(EditContext::Default);
        }
        let (q, pos) = tok
            .split_once('.')
            .ok_or_else(|| NatlogError::Contract(format!("bad context token '{tok}'")))?;
        let quantifier = Quantifier::from_surface(q)
            .ok_or_else(|| NatlogError::Contract(format!("unknown quantifier '{q}'")))?;
        let position = match pos {
            "arg1" => ArgPosition::Arg1,
            "arg2" => ArgPosition::Arg2,
            _ => return Err(NatlogError::Contract(format!("bad argument position '{pos}'"))),
        };
        Ok(EditContext::Quantified { quantifier, position })
    }
}

/// One edit. Spans are token ranges, end exclusive: `span` in the
/// hypothesis (the position whose step carries the relation during
/// aggregation), `premise_span` the corresponding premise range. A deletion
/// anchors at the head word whose phrase shrank; an insertion's premise
/// span is empty at the insertion point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub span: (usize, usize),
    pub premise_span: (usize, usize),
    pub edit_type: EditType,
    /// Lexical relation before projection.
    pub relation: Relation,
    pub context: EditContext,
}

/// One premise/hypothesis pair with gold aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: NliLabel,
    /// Running aggregation state after each hop, hypothesis order.
    pub aggregation: Vec<Relation>,
    pub edits: Vec<Edit>,
}

/// Monotone direction of an example's edit contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upward,
    Downward,
    Mixed,
}

impl Example {
    fn proof_steps(&self) -> Vec<ProofStep> {
        let mut steps: Vec<ProofStep> = self
            .edits
            .iter()
            .map(|e| ProofStep {
                position: e.span.0,
                lexical: e.relation,
                rho: e.context.row(),
            })
            .collect();
        steps.sort_by_key(|s| s.position);
        steps
    }

    /// Recompute gold aggregation and label from the edits.
    pub fn derive_gold(&self) -> Result<(Vec<Relation>, NliLabel)> {
        let proof = prove(&self.proof_steps())?;
        Ok((proof.states, proof.label))
    }

    /// Per-hypothesis-position gold running states.
    pub fn gold_state_sequence(&self) -> Vec<Relation> {
        let steps = self.proof_steps();
        let states = match prove(&steps) {
            Ok(p) => p.states,
            Err(_) => return vec![Relation::Equivalence; self.hypothesis.len()],
        };
        state_sequence(&steps, &states, self.hypothesis.len())
    }

    pub fn direction(&self) -> Direction {
        let mut up = false;
        let mut down = false;
        for e in &self.edits {
            if e.context.is_upward() {
                up = true;
            } else {
                down = true;
            }
        }
        match (up, down) {
            (true, true) => Direction::Mixed,
            (false, true) => Direction::Downward,
            _ => Direction::Upward,
        }
    }

    /// Structural and semantic validity: spans in range, sorted, disjoint;
    /// aggregation length equals hop count; gold re-derivation agrees.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.premise.is_empty() || self.hypothesis.is_empty() {
            return Err("empty sentence".into());
        }
        let mut last_end = 0usize;
        let mut sorted = self.edits.clone();
        sorted.sort_by_key(|e| e.span.0);
        for e in &sorted {
            if e.span.1 > self.hypothesis.len() || e.span.0 >= e.span.1 {
                return Err(format!("edit span {:?} out of hypothesis range", e.span));
            }
            if e.premise_span.0 > self.premise.len() || e.premise_span.1 > self.premise.len() {
                return Err(format!("premise span {:?} out of range", e.premise_span));
            }
            if e.span.0 < last_end {
                return Err("edit spans overlap".into());
            }
            last_end = e.span.1;
        }
        if self.aggregation.len() != self.edits.len() {
            return Err(format!(
                "{} aggregation entries for {} edits",
                self.aggregation.len(),
                self.edits.len()
            ));
        }
        let (states, label) = self.derive_gold().map_err(|e| e.to_string())?;
        if states != self.aggregation {
            return Err(format!(
                "stored aggregation {:?} disagrees with symbolic re-derivation {:?}",
                self.aggregation, states
            ));
        }
        if label != self.label {
            return Err(format!(
                "stored label {} disagrees with re-derived label {}",
                self.label, label
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Verb-phrase shape of a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// `... run`
    PlainVerb { verb: String },
    /// `... are playing`
    Gerund { gerund: String },
    /// `... are chasing birds`
    Transitive { gerund: String, object: String },
}

/// A premise sentence in the controlled grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub quantifier: Quantifier,
    pub adjective: Option<String>,
    pub subject: String,
    pub post_modifier: Option<String>,
    pub frame: Frame,
}

impl Template {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![self.quantifier.surface().to_string()];
        if let Some(adj) = &self.adjective {
            out.push(adj.clone());
        }
        out.push(self.subject.clone());
        if let Some(pm) = &self.post_modifier {
            out.push(pm.clone());
        }
        match &self.frame {
            Frame::PlainVerb { verb } => out.push(verb.clone()),
            Frame::Gerund { gerund } => {
                out.push("are".to_string());
                out.push(gerund.clone());
            }
            Frame::Transitive { gerund, object } => {
                out.push("are".to_string());
                out.push(gerund.clone());
                out.push(object.clone());
            }
        }
        out
    }
}

fn choose<'a, T, R: Rng>(items: &'a [T], rng: &mut R) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Sample a premise template.
pub fn sample_template<R: Rng>(lexicon: &Lexicon, quantifiers: &[Quantifier], rng: &mut R) -> Template {
    let nouns: Vec<String> = lexicon.nouns.members().into_iter().collect();
    let verbs: Vec<String> = lexicon.verbs.members().into_iter().collect();
    let gerunds: Vec<String> = lexicon.gerunds.members().into_iter().collect();
    let quantifier = *choose(quantifiers, rng);
    let adjective = rng.gen_bool(0.4).then(|| choose(&lexicon.adjectives, rng).clone());
    let post_modifier = rng.gen_bool(0.3).then(|| choose(&lexicon.post_modifiers, rng).clone());
    let subject = choose(&nouns, rng).clone();
    let frame = match rng.gen_range(0..3) {
        0 => Frame::PlainVerb {
            verb: choose(&verbs, rng).clone(),
        },
        1 => Frame::Gerund {
            gerund: choose(&gerunds, rng).clone(),
        },
        _ => Frame::Transitive {
            gerund: choose(&lexicon.transitive_gerunds, rng).clone(),
            object: choose(&nouns, rng).clone(),
        },
    };
    Template {
        quantifier,
        adjective,
        subject,
        post_modifier,
        frame,
    }
}

// ---------------------------------------------------------------------------
// Edit construction
// ---------------------------------------------------------------------------

struct SiteMap {
    subject: usize,
    adjective: Option<usize>,
    post_modifier: Option<usize>,
    verb: Option<usize>,
    object: Option<usize>,
}

fn site_map(template: &Template) -> SiteMap {
    let mut pos = 1; // after the quantifier
    let adjective = template.adjective.as_ref().map(|_| {
        let p = pos;
        pos += 1;
        p
    });
    let subject = pos;
    pos += 1;
    let post_modifier = template.post_modifier.as_ref().map(|_| {
        let p = pos;
        pos += 1;
        p
    });
    let (verb, object) = match &template.frame {
        Frame::PlainVerb { .. } => (Some(pos), None),
        Frame::Gerund { .. } => (Some(pos + 1), None),
        Frame::Transitive { .. } => (None, Some(pos + 2)),
    };
    SiteMap {
        subject,
        adjective,
        post_modifier,
        verb,
        object,
    }
}

fn context_at(tokens: &[String], grammar: &ControlledGrammar, position: usize) -> Result<EditContext> {
    let contexts = token_contexts(tokens, grammar)?;
    Ok(match contexts[position] {
        Some((quantifier, position)) => EditContext::Quantified { quantifier, position },
        None => EditContext::Default,
    })
}

/// Build the example for a premise, hypothesis, and edit list (re-deriving
/// the gold trajectory and label from the edits).
fn finish_example(premise: Vec<String>, hypothesis: Vec<String>, mut edits: Vec<Edit>) -> Result<Example> {
    edits.sort_by_key(|e| e.span.0);
    let mut ex = Example {
        premise,
        hypothesis,
        label: NliLabel::Entailment,
        aggregation: Vec::new(),
        edits,
    };
    let (states, label) = ex.derive_gold()?;
    ex.aggregation = states;
    ex.label = label;
    Ok(ex)
}

/// An identity pair: no edits, every relation equivalence, entailment.
pub fn make_identity(template: &Template) -> Result<Example> {
    let tokens = template.tokens();
    finish_example(tokens.clone(), tokens, Vec::new())
}

/// Generate a single-edit example from a premise template.
pub fn make_1hop<R: Rng>(
    template: &Template,
    lexicon: &Lexicon,
    edit_type: EditType,
    rng: &mut R,
) -> Result<Example> {
    let grammar = lexicon.grammar();
    let premise = template.tokens();
    let sites = site_map(template);
    match edit_type {
        EditType::Insertion => {
            // Insert a subject modifier in the hypothesis: the premise
            // phrase covers the hypothesis phrase, reverse entailment.
            let mut hypothesis = premise.clone();
            let (insert_at, word) = if template.adjective.is_none() && rng.gen_bool(0.6) {
                (sites.subject, choose(&lexicon.adjectives, rng).clone())
            } else if template.post_modifier.is_none() {
                (sites.subject + 1, choose(&lexicon.post_modifiers, rng).clone())
            } else if template.adjective.is_none() {
                (sites.subject, choose(&lexicon.adjectives, rng).clone())
            } else {
                return Err(NatlogError::LexiconExhausted {
                    relation: "ent_r (no free modifier slot)".into(),
                });
            };
            hypothesis.insert(insert_at, word);
            let context = context_at(&hypothesis, &grammar, insert_at)?;
            let edit = Edit {
                span: (insert_at, insert_at + 1),
                premise_span: (insert_at, insert_at),
                edit_type,
                relation: Relation::ReverseEntailment,
                context,
            };
            finish_example(premise, hypothesis, vec![edit])
        }
        EditType::Deletion => {
            // Drop a premise modifier; the relation anchors at the head
            // noun, whose phrase grew to cover the premise phrase.
            let (del_at, head_premise) = if let Some(adj) = sites.adjective {
                (adj, sites.subject)
            } else if let Some(pm) = sites.post_modifier {
                (pm, sites.subject)
            } else {
                return Err(NatlogError::LexiconExhausted {
                    relation: "ent_f (no modifier to delete)".into(),
                });
            };
            let mut hypothesis = premise.clone();
            hypothesis.remove(del_at);
            let head_hyp = if del_at < head_premise { head_premise - 1 } else { head_premise };
            let lo = del_at.min(head_premise);
            let hi = del_at.max(head_premise) + 1;
            let context = context_at(&hypothesis, &grammar, head_hyp)?;
            let edit = Edit {
                span: (head_hyp, head_hyp + 1),
                premise_span: (lo, hi),
                edit_type,
                relation: Relation::ForwardEntailment,
                context,
            };
            finish_example(premise, hypothesis, vec![edit])
        }
        EditType::Substitution => {
            // Swap one content word for a lexicon partner.
            let mut candidates: Vec<(usize, &WordFamily, &String)> = Vec::new();
            candidates.push((sites.subject, &lexicon.nouns, &template.subject));
            match &template.frame {
                Frame::PlainVerb { verb } => candidates.push((sites.verb.unwrap(), &lexicon.verbs, verb)),
                Frame::Gerund { gerund } => candidates.push((sites.verb.unwrap(), &lexicon.gerunds, gerund)),
                Frame::Transitive { object, .. } => {
                    candidates.push((sites.object.unwrap(), &lexicon.nouns, object))
                }
            }
            let (position, family, word) = *choose(&candidates, rng);
            let partners = family.partners(word);
            if partners.is_empty() {
                return Err(NatlogError::LexiconExhausted {
                    relation: format!("any (no partner for '{word}')"),
                });
            }
            let (replacement, relation) = choose(&partners, rng).clone();
            let mut hypothesis = premise.clone();
            hypothesis[position] = replacement;
            let context = context_at(&hypothesis, &grammar, position)?;
            let edit = Edit {
                span: (position, position + 1),
                premise_span: (position, position + 1),
                edit_type,
                relation,
                context,
            };
            finish_example(premise, hypothesis, vec![edit])
        }
    }
}

/// Token alignment between premise and hypothesis given the edits:
/// `(premise_index, hypothesis_index)` pairs outside every edit span.
fn aligned_positions(ex: &Example) -> Vec<(usize, usize)> {
    let mut edits = ex.edits.clone();
    edits.sort_by_key(|e| e.span.0);
    let mut out = Vec::new();
    let mut p = 0usize;
    let mut h = 0usize;
    for e in &edits {
        while h < e.span.0 {
            out.push((p, h));
            p += 1;
            h += 1;
        }
        h = e.span.1;
        p = e.premise_span.1;
    }
    while h < ex.hypothesis.len() && p < ex.premise.len() {
        out.push((p, h));
        p += 1;
        h += 1;
    }
    out
}

/// Relations available for the second hop.
const SECOND_HOP_RELATIONS: [Relation; 5] = [
    Relation::Equivalence,
    Relation::ForwardEntailment,
    Relation::ReverseEntailment,
    Relation::Alternation,
    Relation::Independence,
];

/// Add a second hop: replace an unedited noun, on either the premise or
/// hypothesis side, with a lexicon partner. The site must lie outside every
/// existing edit span.
pub fn add_hop<R: Rng>(ex: &Example, lexicon: &Lexicon, rng: &mut R) -> Result<Example> {
    let grammar = lexicon.grammar();
    let noun_members = lexicon.nouns.members();
    let mut sites: Vec<(usize, usize)> = aligned_positions(ex)
        .into_iter()
        .filter(|(p, h)| ex.premise[*p] == ex.hypothesis[*h] && noun_members.contains(&ex.hypothesis[*h]))
        .collect();
    sites.retain(|(_, h)| {
        // The noun must not sit inside any existing edit span.
        ex.edits.iter().all(|e| *h < e.span.0 || *h >= e.span.1)
    });
    if sites.is_empty() {
        return Err(NatlogError::NoEligibleNoun);
    }
    let &(p_idx, h_idx) = choose(&sites, rng);
    let word = ex.hypothesis[h_idx].clone();
    let premise_side = rng.gen_bool(0.5);
    // Relation is always premise-word vs hypothesis-word.
    let partners: Vec<(String, Relation)> = lexicon
        .nouns
        .partners(&word)
        .into_iter()
        .filter_map(|(other, rel)| {
            let rel = if premise_side {
                // New premise word w': need relation(w', word).
                lexicon.nouns.relation(&other, &word)?
            } else {
                rel
            };
            SECOND_HOP_RELATIONS.contains(&rel).then_some((other, rel))
        })
        .collect();
    if partners.is_empty() {
        return Err(NatlogError::NoEligibleNoun);
    }
    let (replacement, relation) = choose(&partners, rng).clone();
    let mut premise = ex.premise.clone();
    let mut hypothesis = ex.hypothesis.clone();
    if premise_side {
        premise[p_idx] = replacement;
    } else {
        hypothesis[h_idx] = replacement;
    }
    let context = context_at(&hypothesis, &grammar, h_idx)?;
    let mut edits = ex.edits.clone();
    edits.push(Edit {
        span: (h_idx, h_idx + 1),
        premise_span: (p_idx, p_idx + 1),
        edit_type: EditType::Substitution,
        relation,
        context,
    });
    finish_example(premise, hypothesis, edits)
}

// ---------------------------------------------------------------------------
// Batch generation
// ---------------------------------------------------------------------------

/// Generation profile: hop count, edit-type mix, quantifier pool, optional
/// identity-pair share, label balancing, and a direction restriction.
#[derive(Debug, Clone)]
pub struct GenProfile {
    pub hops: u8,
    pub edit_types: Vec<EditType>,
    pub quantifiers: Vec<Quantifier>,
    /// Probability of emitting an identity pair instead of an edited one.
    pub identity_share: f64,
    pub balance_labels: bool,
    pub direction: Option<Direction>,
}

impl Default for GenProfile {
    fn default() -> Self {
        GenProfile {
            hops: 1,
            edit_types: vec![EditType::Insertion, EditType::Deletion, EditType::Substitution],
            quantifiers: vec![Quantifier::All, Quantifier::Some, Quantifier::No, Quantifier::The],
            identity_share: 0.0,
            balance_labels: false,
            direction: None,
        }
    }
}

/// Label counts of a generated batch.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LabelReport {
    pub entailment: usize,
    pub contradiction: usize,
    pub neutral: usize,
    pub total: usize,
}

impl LabelReport {
    pub fn count(&mut self, label: NliLabel) {
        match label {
            NliLabel::Entailment => self.entailment += 1,
            NliLabel::Contradiction => self.contradiction += 1,
            NliLabel::Neutral => self.neutral += 1,
        }
        self.total += 1;
    }

    pub fn of(&self, label: NliLabel) -> usize {
        match label {
            NliLabel::Entailment => self.entailment,
            NliLabel::Contradiction => self.contradiction,
            NliLabel::Neutral => self.neutral,
        }
    }
}

impl std::fmt::Display for LabelReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} examples: {} entailment, {} contradiction, {} neutral",
            self.total, self.entailment, self.contradiction, self.neutral
        )
    }
}

/// Generate `count` examples, fully determined by the seed.
pub fn generate(lexicon: &Lexicon, profile: &GenProfile, count: usize, seed: u64) -> Result<(Vec<Example>, LabelReport)> {
    if profile.hops == 0 || profile.hops > 2 {
        return Err(NatlogError::Contract("hops must be 1 or 2".into()));
    }
    if profile.edit_types.is_empty() || profile.quantifiers.is_empty() {
        return Err(NatlogError::Contract("edit type and quantifier pools must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut report = LabelReport::default();
    let per_label_cap = if profile.balance_labels {
        Some(count.div_ceil(3))
    } else {
        None
    };
    let mut attempts = 0usize;
    let max_attempts = count.saturating_mul(400).max(4000);
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(NatlogError::Contract(format!(
                "generation stalled after {attempts} attempts ({} of {count} built); relax the profile",
                out.len()
            )));
        }
        let template = sample_template(lexicon, &profile.quantifiers, &mut rng);
        let candidate = if profile.identity_share > 0.0 && rng.gen_bool(profile.identity_share) {
            make_identity(&template)
        } else {
            let edit_type = *choose(&profile.edit_types, &mut rng);
            let one = make_1hop(&template, lexicon, edit_type, &mut rng);
            match (profile.hops, one) {
                (2, Ok(ex)) => add_hop(&ex, lexicon, &mut rng),
                (_, result) => result,
            }
        };
        let Ok(example) = candidate else {
            continue; // template without the needed site; resample
        };
        if let Some(direction) = profile.direction {
            if !example.edits.is_empty() && example.direction() != direction {
                continue;
            }
        }
        if let Some(cap) = per_label_cap {
            if report.of(example.label) >= cap {
                continue;
            }
        }
        debug_assert!(example.validate().is_ok());
        report.count(example.label);
        out.push(example);
    }
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EditRecord {
    span: [usize; 2],
    premise_span: [usize; 2],
    #[serde(rename = "type")]
    edit_type: EditType,
    relation: Relation,
    context: String,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    premise: String,
    hypothesis: String,
    label: NliLabel,
    aggregation: Vec<Relation>,
    edits: Vec<EditRecord>,
}

impl Example {
    fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            premise: self.premise.join(" "),
            hypothesis: self.hypothesis.join(" "),
            label: self.label,
            aggregation: self.aggregation.clone(),
            edits: self
                .edits
                .iter()
                .map(|e| EditRecord {
                    span: [e.span.0, e.span.1],
                    premise_span: [e.premise_span.0, e.premise_span.1],
                    edit_type: e.edit_type,
                    relation: e.relation,
                    context: e.context.token(),
                })
                .collect(),
        }
    }

    fn from_record(record: ExampleRecord) -> Result<Example> {
        let edits = record
            .edits
            .into_iter()
            .map(|e| {
                Ok(Edit {
                    span: (e.span[0], e.span[1]),
                    premise_span: (e.premise_span[0], e.premise_span[1]),
                    edit_type: e.edit_type,
                    relation: e.relation,
                    context: EditContext::from_token(&e.context)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Example {
            premise: record.premise.split_whitespace().map(str::to_string).collect(),
            hypothesis: record.hypothesis.split_whitespace().map(str::to_string).collect(),
            label: record.label,
            aggregation: record.aggregation,
            edits,
        })
    }
}

/// Write one JSON object per line.
pub fn emit(examples: &[Example], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, &ex.to_record())?;
        writeln!(f)?;
    }
    Ok(())
}

/// Load and validate a JSONL dataset. Malformed or inconsistent lines are
/// rejected with their 1-based line number.
pub fn load(path: &Path) -> Result<Vec<Example>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(&line).map_err(|e| NatlogError::DatasetLine {
            line: lineno,
            reason: format!("invalid JSON: {e}"),
        })?;
        let example = Example::from_record(record).map_err(|e| NatlogError::DatasetLine {
            line: lineno,
            reason: e.to_string(),
        })?;
        example.validate().map_err(|reason| NatlogError::DatasetLine {
            line: lineno,
            reason,
        })?;
        out.push(example);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::Relation::*;

    fn template_all_cats_run(adjective: Option<&str>) -> Template {
        Template {
            quantifier: Quantifier::All,
            adjective: adjective.map(str::to_string),
            subject: "cats".into(),
            post_modifier: None,
            frame: Frame::PlainVerb { verb: "run".into() },
        }
    }

    #[test]
    fn builtin_lexicon_is_consistent() {
        let lexicon = Lexicon::builtin();
        lexicon.check_consistency().unwrap();
        assert_eq!(lexicon.nouns.relation("cats", "animals"), Some(ForwardEntailment));
        assert_eq!(lexicon.nouns.relation("animals", "cats"), Some(ReverseEntailment));
        assert_eq!(lexicon.nouns.relation("cats", "dogs"), Some(Alternation));
        assert_eq!(lexicon.nouns.relation("cats", "felines"), Some(Equivalence));
        assert_eq!(lexicon.nouns.relation("cats", "pets"), Some(Independence));
        assert_eq!(lexicon.nouns.relation("cats", "oaks"), None);
        assert_eq!(lexicon.gerunds.relation("eating", "playing"), Some(Alternation));
    }

    #[test]
    fn deletion_under_all_arg1_yields_neutral() {
        let template = template_all_cats_run(Some("black"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = make_1hop(&template, &Lexicon::builtin(), EditType::Deletion, &mut rng).unwrap();
        assert_eq!(ex.premise.join(" "), "all black cats run");
        assert_eq!(ex.hypothesis.join(" "), "all cats run");
        // Lexical forward entailment projects to reverse under all.arg1.
        assert_eq!(ex.edits[0].relation, ForwardEntailment);
        assert_eq!(ex.aggregation, vec![ReverseEntailment]);
        assert_eq!(ex.label, NliLabel::Neutral);
        // Anchored at the head noun in the hypothesis.
        assert_eq!(ex.edits[0].span, (1, 2));
        assert_eq!(ex.edits[0].premise_span, (1, 3));
        ex.validate().unwrap();
    }

    #[test]
    fn insertion_under_all_arg1_yields_entailment() {
        let template = template_all_cats_run(None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = make_1hop(&template, &Lexicon::builtin(), EditType::Insertion, &mut rng).unwrap();
        assert_eq!(ex.edits[0].relation, ReverseEntailment);
        assert_eq!(ex.aggregation, vec![ForwardEntailment]);
        assert_eq!(ex.label, NliLabel::Entailment);
        ex.validate().unwrap();
    }

    #[test]
    fn substitution_direction_depends_on_the_quantifier() {
        let lexicon = Lexicon::builtin();
        // Force a cats -> animals substitution under both quantifiers by
        // searching seeds; the relation is fixed, only the context varies.
        let mut find = |quantifier: Quantifier| -> Example {
            let template = Template {
                quantifier,
                ..template_all_cats_run(None)
            };
            for seed in 0..500 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ex = make_1hop(&template, &lexicon, EditType::Substitution, &mut rng).unwrap();
                if ex.hypothesis[1] == "animals" && ex.edits[0].span == (1, 2) {
                    return ex;
                }
            }
            panic!("no cats->animals substitution found");
        };
        let downward = find(Quantifier::All);
        assert_eq!(downward.edits[0].relation, ForwardEntailment);
        assert_eq!(downward.aggregation, vec![ReverseEntailment]);
        assert_eq!(downward.label, NliLabel::Neutral);
        assert_eq!(downward.direction(), Direction::Downward);

        let upward = find(Quantifier::Some);
        assert_eq!(upward.aggregation, vec![ForwardEntailment]);
        assert_eq!(upward.label, NliLabel::Entailment);
        assert_eq!(upward.direction(), Direction::Upward);
    }

    #[test]
    fn identity_pair_is_all_equivalence() {
        let ex = make_identity(&template_all_cats_run(None)).unwrap();
        assert!(ex.edits.is_empty());
        assert!(ex.aggregation.is_empty());
        assert_eq!(ex.label, NliLabel::Entailment);
        assert!(ex.gold_state_sequence().iter().all(|r| *r == Equivalence));
    }

    #[test]
    fn second_hop_composes_and_never_touches_the_first_span() {
        let lexicon = Lexicon::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen_two = 0;
        for seed in 0..200u64 {
            let mut trng = ChaCha8Rng::seed_from_u64(seed);
            let template = sample_template(&lexicon, &[Quantifier::All, Quantifier::Some, Quantifier::No], &mut trng);
            let Ok(one) = make_1hop(&template, &lexicon, EditType::Substitution, &mut rng) else {
                continue;
            };
            let Ok(two) = add_hop(&one, &lexicon, &mut rng) else {
                continue;
            };
            seen_two += 1;
            assert_eq!(two.edits.len(), 2);
            assert_eq!(two.aggregation.len(), 2);
            let spans: Vec<_> = two.edits.iter().map(|e| e.span).collect();
            assert_ne!(spans[0].0, spans[1].0);
            assert!(spans[0].1 <= spans[1].0 || spans[1].1 <= spans[0].0, "overlap {spans:?}");
            two.validate().unwrap();
        }
        assert!(seen_two > 20, "only {seen_two} two-hop examples");
    }

    #[test]
    fn known_two_hop_composition() {
        // First hop: run -> sleep (alternation) under all.arg2 stays
        // alternation. Second hop on the subject noun.
        let lexicon = Lexicon::builtin();
        let template = template_all_cats_run(None);
        let base = {
            let mut found = None;
            for seed in 0..500 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ex = make_1hop(&template, &lexicon, EditType::Substitution, &mut rng).unwrap();
                if ex.hypothesis.join(" ") == "all cats sleep" {
                    found = Some(ex);
                    break;
                }
            }
            found.expect("run->sleep substitution")
        };
        assert_eq!(base.aggregation, vec![Alternation]);
        assert_eq!(base.label, NliLabel::Contradiction);
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let two = add_hop(&base, &lexicon, &mut rng).unwrap();
            // The noun hop precedes the verb hop in hypothesis order, so the
            // fold is join(rho(noun_rel)) then alternation.
            assert_eq!(two.edits[0].span.0, 1);
            assert_eq!(two.edits[1].span.0, 2);
            let (states, label) = two.derive_gold().unwrap();
            assert_eq!(states, two.aggregation);
            assert_eq!(label, two.label);
            // Equivalence second relations leave the final state at the
            // other hop's value.
            if two.edits[0].relation == Equivalence {
                assert_eq!(two.aggregation[1], Alternation);
                assert_eq!(two.label, NliLabel::Contradiction);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let lexicon = Lexicon::builtin();
        let profile = GenProfile {
            hops: 2,
            ..GenProfile::default()
        };
        let (a, report) = generate(&lexicon, &profile, 200, 99).unwrap();
        let (b, _) = generate(&lexicon, &profile, 200, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.total, 200);
        for ex in &a {
            ex.validate().unwrap();
        }
    }

    #[test]
    fn balanced_generation_hits_the_caps() {
        let lexicon = Lexicon::builtin();
        let profile = GenProfile {
            hops: 1,
            balance_labels: true,
            identity_share: 0.05,
            ..GenProfile::default()
        };
        let (examples, report) = generate(&lexicon, &profile, 300, 5).unwrap();
        assert_eq!(examples.len(), 300);
        assert!(report.entailment <= 100 && report.contradiction <= 100 && report.neutral <= 100);
    }

    #[test]
    fn direction_restriction_filters_examples() {
        let lexicon = Lexicon::builtin();
        let up = GenProfile {
            hops: 1,
            edit_types: vec![EditType::Substitution],
            quantifiers: vec![Quantifier::Some, Quantifier::The],
            direction: Some(Direction::Upward),
            ..GenProfile::default()
        };
        let (ups, _) = generate(&lexicon, &up, 100, 11).unwrap();
        assert!(ups.iter().all(|e| e.direction() == Direction::Upward));
        let down = GenProfile {
            hops: 1,
            edit_types: vec![EditType::Substitution],
            quantifiers: vec![Quantifier::All, Quantifier::No],
            direction: Some(Direction::Downward),
            ..GenProfile::default()
        };
        let (downs, _) = generate(&lexicon, &down, 100, 13).unwrap();
        assert!(downs.iter().all(|e| e.direction() == Direction::Downward));
    }

    #[test]
    fn jsonl_round_trip_and_rejections() {
        let lexicon = Lexicon::builtin();
        let profile = GenProfile {
            hops: 2,
            identity_share: 0.1,
            ..GenProfile::default()
        };
        let (examples, _) = generate(&lexicon, &profile, 50, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        emit(&examples, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, examples);

        // Aggregation count mismatch.
        let mut bad = examples[0].to_record();
        bad.aggregation.push(Relation::Independence);
        let line = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, NatlogError::DatasetLine { line: 1, .. }), "{err}");

        // Label inconsistent with the aggregation fold.
        let mut ex = examples.iter().find(|e| !e.edits.is_empty()).unwrap().clone();
        ex.label = match ex.label {
            NliLabel::Entailment => NliLabel::Contradiction,
            _ => NliLabel::Entailment,
        };
        let line = serde_json::to_string(&ex.to_record()).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label"), "{msg}");

        // Unparseable JSON names the line.
        std::fs::write(&path, "{not json}\n").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn all_generated_sentences_parse_under_the_grammar() {
        let lexicon = Lexicon::builtin();
        let grammar = lexicon.grammar();
        let (examples, _) = generate(&lexicon, &GenProfile { hops: 2, ..GenProfile::default() }, 150, 17).unwrap();
        for ex in &examples {
            crate::polarity::mark_polarity(&ex.premise, &grammar).unwrap();
            crate::polarity::mark_polarity(&ex.hypothesis, &grammar).unwrap();
        }
    }
}
