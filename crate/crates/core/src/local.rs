//! Local (per-aligned-pair) relation distributions.
//!
//! A bilinear scorer produces a distribution over the seven relations for
//! each hypothesis position. Forward and reverse entailment share one
//! matrix, used with the arguments swapped, so the two logits exchange
//! values exactly when the pair is reversed. Hard constraints then force
//! equivalence on exact-match alignments (as a stop-gradient substitution)
//! and suppress negation and cover, and the result is pushed through the
//! token's projectivity.

use crate::encoder::{Alignment, EncodedSentence};
use crate::error::{NatlogError, Result};
use crate::polarity::AnnotatedSentence;
use crate::relations::{Relation, RelationDistribution, NUM_RELATIONS};
use crate::tape::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::Rng;

/// Which local-relation constraints are active. Both default on; the
/// ablation rows disable them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintFlags {
    pub equivalence: bool,
    pub collapse: bool,
}

impl Default for ConstraintFlags {
    fn default() -> Self {
        ConstraintFlags {
            equivalence: true,
            collapse: true,
        }
    }
}

impl ConstraintFlags {
    pub const NONE: ConstraintFlags = ConstraintFlags {
        equivalence: false,
        collapse: false,
    };
}

/// Bilinear relation scorer. Six stored `d x d` slices: the reverse
/// entailment slice is the forward slice used with swapped arguments.
#[derive(Debug, Clone)]
pub struct BilinearParams {
    /// Per-relation matrix id, canonical order; entry 2 aliases entry 1.
    slices: [ParamId; NUM_RELATIONS],
}

impl BilinearParams {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> BilinearParams {
        let mut reg = |name: &str| store.register_glorot(&format!("bilinear.{name}"), dim, dim, rng);
        let eq = reg("eq");
        let fwd = reg("ent_f");
        let neg = reg("neg");
        let alt = reg("alt");
        let cov = reg("cov");
        let ind = reg("ind");
        BilinearParams {
            slices: [eq, fwd, fwd, neg, alt, cov, ind],
        }
    }

    /// Stored parameter ids (six distinct).
    pub fn stored_ids(&self) -> [ParamId; 6] {
        [
            self.slices[0],
            self.slices[1],
            self.slices[3],
            self.slices[4],
            self.slices[5],
            self.slices[6],
        ]
    }

    pub fn slice(&self, r: Relation) -> ParamId {
        self.slices[r.index()]
    }
}

/// The seven bilinear logits for one aligned pair: `logit_k = b̃ᵀ M_k b`,
/// except reverse entailment which reuses the forward matrix with swapped
/// arguments, so swapping the pair exchanges the two entailment logits
/// bit-exactly.
pub fn local_logits<T: Scalar>(tape: &mut Tape<'_, T>, summary: Var, b: Var, params: &BilinearParams) -> Var {
    let mut logits = Vec::with_capacity(NUM_RELATIONS);
    for k in 0..NUM_RELATIONS {
        let logit = if k == Relation::ReverseEntailment.index() {
            let mb = tape.matvec(params.slices[k], summary);
            tape.dot(b, mb)
        } else {
            let mb = tape.matvec(params.slices[k], b);
            tape.dot(summary, mb)
        };
        logits.push(logit);
    }
    tape.stack(&logits)
}

/// Score one aligned pair into a distribution over the seven relations:
/// the softmax of [`local_logits`].
pub fn score_local<T: Scalar>(tape: &mut Tape<'_, T>, summary: Var, b: Var, params: &BilinearParams) -> Var {
    let logits = local_logits(tape, summary, b, params);
    tape.softmax(logits)
}

/// Mask that zeroes negation and cover.
pub const COLLAPSE_MASK: [f64; NUM_RELATIONS] = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];

/// Apply the equivalence and collapse constraints on the tape.
///
/// An exact-match alignment replaces the distribution with a constant
/// one-hot equivalence (no gradient flows through the replacement). The
/// collapse zeroes negation and cover and renormalizes the remaining mass.
pub fn apply_constraints<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: Var,
    phi: bool,
    flags: ConstraintFlags,
) -> Result<Var> {
    if flags.equivalence && phi {
        let mut one_hot = [0.0; NUM_RELATIONS];
        one_hot[Relation::Equivalence.index()] = 1.0;
        return Ok(tape.constant_f64(&one_hot));
    }
    if flags.collapse {
        let masked = tape.mask_const(p, COLLAPSE_MASK.to_vec());
        return tape.normalize(masked, 0);
    }
    Ok(p)
}

/// Pure (non-tape) counterpart of [`apply_constraints`].
pub fn apply_constraints_dist(p: &RelationDistribution, phi: bool, flags: ConstraintFlags) -> Result<RelationDistribution> {
    if flags.equivalence && phi {
        return Ok(RelationDistribution::one_hot(Relation::Equivalence));
    }
    if !flags.collapse {
        return Ok(*p);
    }
    let mut out = *p.as_array();
    out[Relation::Negation.index()] = 0.0;
    out[Relation::Cover.index()] = 0.0;
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(NatlogError::Contract("no probability mass left after collapse".into()));
    }
    out.iter_mut().for_each(|x| *x /= total);
    RelationDistribution::new(out)
}

/// Output of the local stage: constrained local distributions and their
/// projections, one of each per hypothesis token.
#[derive(Debug, Clone)]
pub struct LocalStage {
    pub locals: Vec<Var>,
    pub projected: Vec<Var>,
}

/// Full local stage for every hypothesis position: score, constrain,
/// project.
pub fn local_pipeline<T: Scalar>(
    tape: &mut Tape<'_, T>,
    alignment: &Alignment,
    hypothesis: &EncodedSentence,
    annotated: &AnnotatedSentence,
    params: &BilinearParams,
    flags: ConstraintFlags,
) -> Result<LocalStage> {
    let n = hypothesis.vectors.len();
    if alignment.summaries.len() != n || annotated.projectivities.len() != n {
        return Err(NatlogError::Dimension {
            expected: n,
            got: alignment.summaries.len().min(annotated.projectivities.len()),
        });
    }
    let mut locals = Vec::with_capacity(n);
    let mut projected = Vec::with_capacity(n);
    for j in 0..n {
        let scored = score_local(tape, alignment.summaries[j], hypothesis.vectors[j], params);
        let constrained = apply_constraints(tape, scored, alignment.hard_indicator[j], flags)?;
        locals.push(constrained);
        projected.push(tape.project_dist(constrained, annotated.projectivities[j].target_indices()));
    }
    Ok(LocalStage { locals, projected })
}
