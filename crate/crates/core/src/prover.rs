//! Exact symbolic inference: project lexical relations through their
//! contexts and fold them through the join table, left to right over the
//! hypothesis. This is the oracle the differentiable pipeline relaxes, the
//! re-checker for generated datasets, and the engine behind the CLI's
//! symbolic mode.

use crate::error::{NatlogError, Result};
use crate::polarity::{mark_polarity, AnnotatedSentence, ControlledGrammar};
use crate::relations::{join, NliLabel, Projectivity, Relation};

/// One non-equivalence step of a proof: a lexical relation observed at a
/// hypothesis position, with the projectivity of that position.
#[derive(Debug, Clone)]
pub struct ProofStep {
    pub position: usize,
    pub lexical: Relation,
    pub rho: Projectivity,
}

/// A completed derivation.
#[derive(Debug, Clone)]
pub struct Proof {
    /// Projected relation per step, in position order.
    pub projected: Vec<Relation>,
    /// Running aggregation state after each step.
    pub states: Vec<Relation>,
    pub final_relation: Relation,
    pub label: NliLabel,
}

/// Project and fold the steps. Steps must be sorted by position; positions
/// must be strictly increasing. No steps means equivalence.
pub fn prove(steps: &[ProofStep]) -> Result<Proof> {
    for pair in steps.windows(2) {
        if pair[1].position <= pair[0].position {
            return Err(NatlogError::Contract(
                "proof steps must have strictly increasing positions".into(),
            ));
        }
    }
    let mut projected = Vec::with_capacity(steps.len());
    let mut states = Vec::with_capacity(steps.len());
    let mut state = Relation::Equivalence;
    for step in steps {
        let p = step.rho.project(step.lexical);
        state = join(state, p);
        projected.push(p);
        states.push(state);
    }
    Ok(Proof {
        projected,
        states,
        final_relation: state,
        label: state.nli_label(),
    })
}

/// Expand a proof into one running state per hypothesis position
/// (positions between steps repeat the previous state; before the first
/// step the state is equivalence).
pub fn state_sequence(steps: &[ProofStep], states: &[Relation], len: usize) -> Vec<Relation> {
    let mut out = Vec::with_capacity(len);
    let mut cur = Relation::Equivalence;
    let mut next = 0;
    for pos in 0..len {
        if next < steps.len() && steps[next].position == pos {
            cur = states[next];
            next += 1;
        }
        out.push(cur);
    }
    out
}

/// A symbolic sentence-level inference.
#[derive(Debug, Clone)]
pub struct SymbolicResult {
    pub label: NliLabel,
    pub final_relation: Relation,
    /// Running state per hypothesis position.
    pub trajectory: Vec<Relation>,
    /// `(position, lexical, projected, state)` per differing pair.
    pub steps: Vec<(usize, Relation, Relation, Relation)>,
    pub annotation: AnnotatedSentence,
}

/// Look up the lexical relation of a word pair, if the source knows it.
pub trait LexicalRelations {
    fn lexical_relation(&self, premise_word: &str, hypothesis_word: &str) -> Option<Relation>;
}

/// Symbolic inference over a token-aligned premise/hypothesis pair.
///
/// Both sentences must have the same length; differing positions become
/// proof steps. Their lexical relations are taken from `relations` when
/// given (one per differing position, left to right), or looked up.
pub fn symbolic_infer(
    premise: &[String],
    hypothesis: &[String],
    relations: Option<&[Relation]>,
    lexicon: &dyn LexicalRelations,
    grammar: &ControlledGrammar,
) -> Result<SymbolicResult> {
    if premise.len() != hypothesis.len() {
        return Err(NatlogError::Contract(format!(
            "symbolic mode needs token-aligned sentences ({} vs {} tokens); supply explicit relations for edited pairs",
            premise.len(),
            hypothesis.len()
        )));
    }
    let annotation = mark_polarity(hypothesis, grammar)?;
    let mismatches: Vec<usize> = (0..premise.len())
        .filter(|&i| !premise[i].eq_ignore_ascii_case(&hypothesis[i]))
        .collect();
    let lexical: Vec<Relation> = match relations {
        Some(given) => {
            if given.len() != mismatches.len() {
                return Err(NatlogError::Contract(format!(
                    "{} relations given but the sentences differ at {} positions",
                    given.len(),
                    mismatches.len()
                )));
            }
            given.to_vec()
        }
        None => mismatches
            .iter()
            .map(|&i| {
                lexicon
                    .lexical_relation(&premise[i], &hypothesis[i])
                    .ok_or_else(|| {
                        NatlogError::Contract(format!(
                            "no known lexical relation for '{}' vs '{}'; supply explicit relations",
                            premise[i], hypothesis[i]
                        ))
                    })
            })
            .collect::<Result<_>>()?,
    };
    let steps: Vec<ProofStep> = mismatches
        .iter()
        .zip(&lexical)
        .map(|(&position, &lex)| ProofStep {
            position,
            lexical: lex,
            rho: annotation.projectivities[position],
        })
        .collect();
    let proof = prove(&steps)?;
    let trajectory = state_sequence(&steps, &proof.states, hypothesis.len());
    let steps_out = steps
        .iter()
        .zip(proof.projected.iter().zip(&proof.states))
        .map(|(s, (p, st))| (s.position, s.lexical, *p, *st))
        .collect();
    Ok(SymbolicResult {
        label: proof.label,
        final_relation: proof.final_relation,
        trajectory,
        steps: steps_out,
        annotation,
    })
}
