//! The seven-relation calculus: relation set, join (aggregation) table,
//! projection tables for quantifier contexts, and their soft
//! (distributional) counterparts.
//!
//! Everything downstream shares one vector layout: relations are indexed
//! `0..7` in the canonical order equivalence, forward entailment, reverse
//! entailment, negation, alternation, cover, independence. The join and
//! projection tables are stored as data constants, not computed; they are
//! definitions, and the test suite pins all 49 + 42 entries against
//! independently transcribed fixtures plus a checksum.

use crate::error::{NatlogError, Result};
use serde::{Deserialize, Serialize};

/// One of the seven basic semantic relations between two text spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    /// `x = y`, token `eq`.
    #[serde(rename = "eq")]
    Equivalence,
    /// `x ⊂ y`, token `ent_f`.
    #[serde(rename = "ent_f")]
    ForwardEntailment,
    /// `x ⊃ y`, token `ent_r`.
    #[serde(rename = "ent_r")]
    ReverseEntailment,
    /// Disjoint and jointly exhaustive, token `neg`.
    #[serde(rename = "neg")]
    Negation,
    /// Disjoint but not exhaustive, token `alt`.
    #[serde(rename = "alt")]
    Alternation,
    /// Overlapping and jointly exhaustive, token `cov`.
    #[serde(rename = "cov")]
    Cover,
    /// All other configurations, token `ind`.
    #[serde(rename = "ind")]
    Independence,
}

/// Number of basic relations.
pub const NUM_RELATIONS: usize = 7;

/// All relations in canonical index order.
pub const ALL_RELATIONS: [Relation; NUM_RELATIONS] = [
    Relation::Equivalence,
    Relation::ForwardEntailment,
    Relation::ReverseEntailment,
    Relation::Negation,
    Relation::Alternation,
    Relation::Cover,
    Relation::Independence,
];

/// ASCII serialization tokens, canonical order.
pub const RELATION_TOKENS: [&str; NUM_RELATIONS] = ["eq", "ent_f", "ent_r", "neg", "alt", "cov", "ind"];

impl Relation {
    /// Canonical index in `0..7`.
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Inverse of [`Relation::index`].
    #[inline]
    pub fn from_index(i: usize) -> Relation {
        ALL_RELATIONS[i]
    }

    /// ASCII token used in all file formats and trace output.
    pub fn token(self) -> &'static str {
        RELATION_TOKENS[self.index()]
    }

    /// Parse an ASCII token.
    pub fn from_token(tok: &str) -> Result<Relation> {
        RELATION_TOKENS
            .iter()
            .position(|t| *t == tok)
            .map(Relation::from_index)
            .ok_or_else(|| NatlogError::UnknownRelation(tok.to_string()))
    }

    /// Three-way NLI label this relation maps to at the sentence level.
    pub fn nli_label(self) -> NliLabel {
        match self {
            Relation::Equivalence | Relation::ForwardEntailment => NliLabel::Entailment,
            Relation::Negation | Relation::Alternation => NliLabel::Contradiction,
            Relation::ReverseEntailment | Relation::Cover | Relation::Independence => NliLabel::Neutral,
        }
    }
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Three-way natural language inference label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NliLabel {
    #[serde(rename = "entailment")]
    Entailment,
    #[serde(rename = "contradiction")]
    Contradiction,
    #[serde(rename = "neutral")]
    Neutral,
}

/// All labels, in the index order used by probability vectors.
pub const ALL_LABELS: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Contradiction, NliLabel::Neutral];

impl NliLabel {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        ["entailment", "contradiction", "neutral"][self.index()]
    }

    pub fn from_token(tok: &str) -> Result<NliLabel> {
        ALL_LABELS
            .iter()
            .copied()
            .find(|l| l.token() == tok)
            .ok_or_else(|| NatlogError::UnknownLabel(tok.to_string()))
    }
}

impl std::fmt::Display for NliLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Relation indices grouped per NLI label: entailment, contradiction, neutral.
pub const NLI_GROUPS: [&[usize]; 3] = [&[0, 1], &[3, 4], &[2, 5, 6]];

use Relation::{
    Alternation as Alt, Cover as Cov, Equivalence as Eqv, ForwardEntailment as Fwd,
    Independence as Ind, Negation as Neg, ReverseEntailment as Rev,
};

/// The 7x7 join table: `JOIN_TABLE[u][v] = u ⋈ v`.
///
/// Rows are the running (left) relation, columns the incoming relation.
pub const JOIN_TABLE: [[Relation; NUM_RELATIONS]; NUM_RELATIONS] = [
    [Eqv, Fwd, Rev, Neg, Alt, Cov, Ind],
    [Fwd, Fwd, Ind, Alt, Alt, Ind, Ind],
    [Rev, Ind, Rev, Cov, Ind, Cov, Ind],
    [Neg, Cov, Alt, Eqv, Rev, Fwd, Ind],
    [Alt, Ind, Alt, Fwd, Ind, Fwd, Ind],
    [Cov, Cov, Ind, Rev, Rev, Ind, Ind],
    [Ind, Ind, Ind, Ind, Ind, Ind, Ind],
];

/// Join (aggregate) two relations.
#[inline]
pub fn join(u: Relation, v: Relation) -> Relation {
    JOIN_TABLE[u.index()][v.index()]
}

/// Left-fold of [`join`] over a relation sequence, starting from equivalence.
///
/// This is the exact symbolic aggregation: the sentence-level relation of a
/// premise/hypothesis pair whose projected local relations are `rels`.
pub fn fold_join<I: IntoIterator<Item = Relation>>(rels: I) -> Relation {
    rels.into_iter().fold(Eqv, join)
}

/// A total map from relations to relations induced by one context
/// (one quantifier argument position, or the identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projectivity {
    map: [Relation; NUM_RELATIONS],
}

impl Projectivity {
    pub const fn new(map: [Relation; NUM_RELATIONS]) -> Self {
        Projectivity { map }
    }

    /// The identity map.
    pub const IDENTITY: Projectivity = Projectivity::new([Eqv, Fwd, Rev, Neg, Alt, Cov, Ind]);

    /// First argument of `all` (downward monotone).
    pub const ALL_ARG1: Projectivity = Projectivity::new([Eqv, Rev, Fwd, Alt, Ind, Alt, Ind]);
    /// Second argument of `all` (upward monotone).
    pub const ALL_ARG2: Projectivity = Projectivity::new([Eqv, Fwd, Rev, Alt, Alt, Ind, Ind]);
    /// First argument of `some` (upward monotone).
    pub const SOME_ARG1: Projectivity = Projectivity::new([Eqv, Fwd, Rev, Cov, Ind, Cov, Ind]);
    /// Second argument of `some` (upward monotone, same row as the first).
    pub const SOME_ARG2: Projectivity = Projectivity::new([Eqv, Fwd, Rev, Cov, Ind, Cov, Ind]);
    /// First argument of `no` (downward monotone).
    pub const NO_ARG1: Projectivity = Projectivity::new([Eqv, Rev, Fwd, Alt, Ind, Alt, Ind]);
    /// Second argument of `no` (downward monotone).
    pub const NO_ARG2: Projectivity = Projectivity::new([Eqv, Rev, Fwd, Alt, Ind, Alt, Ind]);

    /// Apply the map to one relation.
    #[inline]
    pub fn project(&self, r: Relation) -> Relation {
        self.map[r.index()]
    }

    /// The underlying 7-entry lookup, canonical input order.
    pub fn as_array(&self) -> &[Relation; NUM_RELATIONS] {
        &self.map
    }

    /// Per-input-relation target indices, for vectorized soft projection.
    pub fn target_indices(&self) -> [usize; NUM_RELATIONS] {
        let mut out = [0usize; NUM_RELATIONS];
        for (i, r) in self.map.iter().enumerate() {
            out[i] = r.index();
        }
        out
    }

    /// Whether equivalence is a fixed point (true for every table row).
    pub fn fixes_equivalence(&self) -> bool {
        self.project(Eqv) == Eqv
    }
}

/// Project an input relation through a context.
#[inline]
pub fn project(rho: &Projectivity, r: Relation) -> Relation {
    rho.project(r)
}

/// A probability distribution over the seven relations, canonical order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationDistribution {
    probs: [f64; NUM_RELATIONS],
}

impl RelationDistribution {
    /// Validates non-negativity and unit mass (tolerance 1e-6).
    pub fn new(probs: [f64; NUM_RELATIONS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NatlogError::Contract(
                "relation distribution entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(NatlogError::Contract(format!(
                "relation distribution mass {total} is not 1 within 1e-6"
            )));
        }
        Ok(RelationDistribution { probs })
    }

    /// All mass on a single relation.
    pub fn one_hot(r: Relation) -> Self {
        let mut probs = [0.0; NUM_RELATIONS];
        probs[r.index()] = 1.0;
        RelationDistribution { probs }
    }

    /// Uniform 1/7 mass.
    pub fn uniform() -> Self {
        RelationDistribution {
            probs: [1.0 / NUM_RELATIONS as f64; NUM_RELATIONS],
        }
    }

    #[inline]
    pub fn prob(&self, r: Relation) -> f64 {
        self.probs[r.index()]
    }

    pub fn as_array(&self) -> &[f64; NUM_RELATIONS] {
        &self.probs
    }

    /// Index of the most probable relation, ties broken by lowest index.
    pub fn argmax(&self) -> Relation {
        argmax_relation(&self.probs)
    }
}

/// Argmax over a 7-score vector, ties broken by lowest canonical index.
pub fn argmax_relation(scores: &[f64; NUM_RELATIONS]) -> Relation {
    let mut best = 0;
    for i in 1..NUM_RELATIONS {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Relation::from_index(best)
}

/// Soft projection: push a distribution through a projectivity by summing
/// the mass of every preimage, `p̄[k'] = Σ_k p[k]·1(ρ(k)=k')`.
pub fn soft_project(rho: &Projectivity, p: &RelationDistribution) -> RelationDistribution {
    let mut out = [0.0; NUM_RELATIONS];
    for k in 0..NUM_RELATIONS {
        out[rho.map[k].index()] += p.probs[k];
    }
    RelationDistribution { probs: out }
}

/// Gated marginalization of the Cartesian product `su ⊗ pv` through the join
/// table: `out[k] = Σ_{u,v: u⋈v=k} su[u]·pv[v]·gates[u*7+v]`.
///
/// With unit gates and one-hot inputs this reduces to the symbolic [`join`].
/// `gates` is indexed by ordered pairs `(u, v)` in row-major canonical order.
pub fn join_dist(
    su: &[f64; NUM_RELATIONS],
    pv: &RelationDistribution,
    gates: &[f64; NUM_RELATIONS * NUM_RELATIONS],
) -> Result<[f64; NUM_RELATIONS]> {
    if su.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(NatlogError::Contract("join_dist scores must be finite and non-negative".into()));
    }
    if gates.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(NatlogError::Contract("join_dist gates must be finite and non-negative".into()));
    }
    let mut out = [0.0; NUM_RELATIONS];
    for u in 0..NUM_RELATIONS {
        if su[u] == 0.0 {
            continue;
        }
        for v in 0..NUM_RELATIONS {
            let k = JOIN_TABLE[u][v].index();
            out[k] += su[u] * pv.probs[v] * gates[u * NUM_RELATIONS + v];
        }
    }
    Ok(out)
}

/// Pooling rule for mapping seven relation scores onto three NLI scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    /// Hard-EM style: the score of a label group is its maximum member.
    #[default]
    #[serde(rename = "max")]
    Max,
    /// Ablation variant: sum the group members.
    #[serde(rename = "sum")]
    Sum,
}

/// Group seven relation scores into (entailment, contradiction, neutral).
pub fn group_to_nli(s: &[f64; NUM_RELATIONS], pooling: Pooling) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (g, idxs) in NLI_GROUPS.iter().enumerate() {
        out[g] = match pooling {
            Pooling::Max => idxs.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max),
            Pooling::Sum => idxs.iter().map(|&i| s[i]).sum(),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    // Independently transcribed join fixture: "<u> <v> <u⋈v>" triples.
    const JOIN_FIXTURE: &str = "\
        eq eq eq; eq ent_f ent_f; eq ent_r ent_r; eq neg neg; eq alt alt; eq cov cov; eq ind ind; \
        ent_f eq ent_f; ent_f ent_f ent_f; ent_f ent_r ind; ent_f neg alt; ent_f alt alt; ent_f cov ind; ent_f ind ind; \
        ent_r eq ent_r; ent_r ent_f ind; ent_r ent_r ent_r; ent_r neg cov; ent_r alt ind; ent_r cov cov; ent_r ind ind; \
        neg eq neg; neg ent_f cov; neg ent_r alt; neg neg eq; neg alt ent_r; neg cov ent_f; neg ind ind; \
        alt eq alt; alt ent_f ind; alt ent_r alt; alt neg ent_f; alt alt ind; alt cov ent_f; alt ind ind; \
        cov eq cov; cov ent_f cov; cov ent_r ind; cov neg ent_r; cov alt ent_r; cov cov ind; cov ind ind; \
        ind eq ind; ind ent_f ind; ind ent_r ind; ind neg ind; ind alt ind; ind cov ind; ind ind ind";

    // Independently transcribed projection fixture: rows in input order
    // eq ent_f ent_r neg alt cov ind.
    const PROJECTION_FIXTURE: &[(&str, [&str; 7])] = &[
        ("all.arg1", ["eq", "ent_r", "ent_f", "alt", "ind", "alt", "ind"]),
        ("all.arg2", ["eq", "ent_f", "ent_r", "alt", "alt", "ind", "ind"]),
        ("some.arg1", ["eq", "ent_f", "ent_r", "cov", "ind", "cov", "ind"]),
        ("some.arg2", ["eq", "ent_f", "ent_r", "cov", "ind", "cov", "ind"]),
        ("no.arg1", ["eq", "ent_r", "ent_f", "alt", "ind", "alt", "ind"]),
        ("no.arg2", ["eq", "ent_r", "ent_f", "alt", "ind", "alt", "ind"]),
    ];

    fn fixture_rho(name: &str) -> Projectivity {
        match name {
            "all.arg1" => Projectivity::ALL_ARG1,
            "all.arg2" => Projectivity::ALL_ARG2,
            "some.arg1" => Projectivity::SOME_ARG1,
            "some.arg2" => Projectivity::SOME_ARG2,
            "no.arg1" => Projectivity::NO_ARG1,
            "no.arg2" => Projectivity::NO_ARG2,
            _ => unreachable!(),
        }
    }

    #[test]
    fn join_table_matches_fixture_all_49() {
        let mut count = 0;
        for triple in JOIN_FIXTURE.split(';') {
            let mut it = triple.split_whitespace();
            let u = Relation::from_token(it.next().unwrap()).unwrap();
            let v = Relation::from_token(it.next().unwrap()).unwrap();
            let expect = Relation::from_token(it.next().unwrap()).unwrap();
            assert_eq!(join(u, v), expect, "join({u}, {v})");
            count += 1;
        }
        assert_eq!(count, 49);
    }

    #[test]
    fn projection_table_matches_fixture_all_42() {
        let mut count = 0;
        for (name, row) in PROJECTION_FIXTURE {
            let rho = fixture_rho(name);
            for (i, expect) in row.iter().enumerate() {
                let r = Relation::from_index(i);
                assert_eq!(project(&rho, r), Relation::from_token(expect).unwrap(), "{name}({r})");
                count += 1;
            }
        }
        assert_eq!(count, 42);
    }

    #[test]
    fn table_constants_checksum() {
        let mut text = String::new();
        for row in &JOIN_TABLE {
            for r in row {
                text.push_str(r.token());
                text.push(' ');
            }
        }
        for rho in [
            Projectivity::ALL_ARG1,
            Projectivity::ALL_ARG2,
            Projectivity::SOME_ARG1,
            Projectivity::SOME_ARG2,
            Projectivity::NO_ARG1,
            Projectivity::NO_ARG2,
        ] {
            for r in rho.as_array() {
                text.push_str(r.token());
                text.push(' ');
            }
        }
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "917a1d58d2644da153dd09a8e708751ff5c8bf4a6110dcbc6de3c94caef77918");
    }

    #[test]
    fn equivalence_is_two_sided_identity_and_independence_absorbs() {
        for r in ALL_RELATIONS {
            assert_eq!(join(Eqv, r), r);
            assert_eq!(join(r, Eqv), r);
            assert_eq!(join(Ind, r), Ind);
            assert_eq!(join(r, Ind), Ind);
        }
    }

    #[test]
    fn spec_join_examples() {
        assert_eq!(join(Fwd, Fwd), Fwd);
        assert_eq!(join(Neg, Alt), Rev);
        // The section-3 derivation: forward entailment then alternation.
        assert_eq!(join(Fwd, Alt), Alt);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(&Projectivity::ALL_ARG1, Rev), Fwd);
        assert_eq!(project(&Projectivity::ALL_ARG2, Neg), Alt);
        assert_eq!(project(&Projectivity::SOME_ARG1, Eqv), Eqv);
        for rho in [
            Projectivity::IDENTITY,
            Projectivity::ALL_ARG1,
            Projectivity::ALL_ARG2,
            Projectivity::SOME_ARG1,
            Projectivity::SOME_ARG2,
            Projectivity::NO_ARG1,
            Projectivity::NO_ARG2,
        ] {
            assert!(rho.fixes_equivalence());
        }
    }

    #[test]
    fn soft_project_one_hot_equals_hard_project() {
        for (name, _) in PROJECTION_FIXTURE {
            let rho = fixture_rho(name);
            for r in ALL_RELATIONS {
                let p = RelationDistribution::one_hot(r);
                let projected = soft_project(&rho, &p);
                assert_eq!(projected, RelationDistribution::one_hot(project(&rho, r)), "{name}({r})");
            }
        }
    }

    #[test]
    fn soft_project_eq6_example() {
        // alt 0.8, neg 0.1, remaining 0.1 split over the other five.
        let rest = 0.1 / 5.0;
        let p = RelationDistribution::new([rest, rest, rest, 0.1, 0.8, rest, rest]).unwrap();
        let projected = soft_project(&Projectivity::ALL_ARG2, &p);
        // Both alternation and negation project to alternation: the projected
        // mass is exactly the float sum of the two inputs.
        assert_eq!(projected.prob(Alt), 0.8 + 0.1);
        assert!((projected.prob(Alt) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn soft_project_identity_and_uniform_examples() {
        let p = RelationDistribution::new([0.3, 0.2, 0.1, 0.05, 0.05, 0.1, 0.2]).unwrap();
        assert_eq!(soft_project(&Projectivity::IDENTITY, &p), p);

        let projected = soft_project(&Projectivity::ALL_ARG1, &RelationDistribution::uniform());
        let u = 1.0 / 7.0;
        // neg and cov merge onto alt; alt and ind merge onto ind.
        assert_eq!(projected.prob(Alt), u + u);
        assert_eq!(projected.prob(Ind), u + u);
        assert_eq!(projected.prob(Neg), 0.0);
        assert_eq!(projected.prob(Cov), 0.0);
    }

    #[test]
    fn join_dist_one_hot_matches_join_for_all_49_pairs() {
        let gates = [1.0; 49];
        for u in ALL_RELATIONS {
            for v in ALL_RELATIONS {
                let mut su = [0.0; 7];
                su[u.index()] = 1.0;
                let out = join_dist(&su, &RelationDistribution::one_hot(v), &gates).unwrap();
                let mut expect = [0.0; 7];
                expect[join(u, v).index()] = 1.0;
                assert_eq!(out, expect, "join_dist one-hot ({u}, {v})");
            }
        }
    }

    #[test]
    fn join_dist_examples() {
        let gates = [1.0; 49];
        // Uniform scores joined with equivalence stay uniform.
        let su = [1.0 / 7.0; 7];
        let out = join_dist(&su, &RelationDistribution::one_hot(Eqv), &gates).unwrap();
        for x in out {
            assert!((x - 1.0 / 7.0).abs() < 1e-15);
        }
        // Half forward, half reverse joined with negation: alt and cov.
        let mut su = [0.0; 7];
        su[Fwd.index()] = 0.5;
        su[Rev.index()] = 0.5;
        let out = join_dist(&su, &RelationDistribution::one_hot(Neg), &gates).unwrap();
        assert_eq!(out[Alt.index()], 0.5);
        assert_eq!(out[Cov.index()], 0.5);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn join_dist_rejects_negative_inputs() {
        let mut gates = [1.0; 49];
        let su = [1.0 / 7.0; 7];
        let pv = RelationDistribution::uniform();
        gates[3] = -0.5;
        assert!(join_dist(&su, &pv, &gates).is_err());
        let mut su_bad = su;
        su_bad[0] = -1.0;
        assert!(join_dist(&su_bad, &pv, &[1.0; 49]).is_err());
    }

    #[test]
    fn group_to_nli_examples() {
        let mut s = [0.0; 7];
        s[Alt.index()] = 1.0;
        assert_eq!(group_to_nli(&s, Pooling::Max), [0.0, 1.0, 0.0]);
        let mut s = [0.0; 7];
        s[Rev.index()] = 1.0;
        assert_eq!(group_to_nli(&s, Pooling::Max), [0.0, 0.0, 1.0]);
        let s = [1.0 / 7.0; 7];
        let g = group_to_nli(&s, Pooling::Max);
        assert_eq!(g, [1.0 / 7.0; 3]);
        // Sum pooling weighs group sizes.
        let g = group_to_nli(&s, Pooling::Sum);
        assert!((g[0] - 2.0 / 7.0).abs() < 1e-15);
        assert!((g[2] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn fold_join_worked_example() {
        // Projected relations of the running example: ent_f at the subject,
        // alt at the verb, everything else eq.
        let rels = [Eqv, Fwd, Eqv, Eqv, Alt];
        assert_eq!(fold_join(rels), Alt);
        assert_eq!(fold_join(rels).nli_label(), NliLabel::Contradiction);
        assert_eq!(fold_join([]), Eqv);
    }

    #[test]
    fn relation_token_round_trip() {
        for r in ALL_RELATIONS {
            assert_eq!(Relation::from_token(r.token()).unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.token()));
            assert_eq!(serde_json::from_str::<Relation>(&json).unwrap(), r);
        }
        assert!(Relation::from_token("entails").is_err());
    }

    proptest! {
        #[test]
        fn soft_project_conserves_mass(raw in proptest::array::uniform7(0.0f64..1.0), rho_idx in 0usize..6) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let mut probs = raw;
            for p in &mut probs {
                *p /= total;
            }
            let p = RelationDistribution::new(probs).unwrap();
            let rho = fixture_rho(PROJECTION_FIXTURE[rho_idx].0);
            let projected = soft_project(&rho, &p);
            let mass: f64 = projected.as_array().iter().sum();
            prop_assert!((mass - 1.0).abs() <= 1e-12);
            prop_assert!(projected.as_array().iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn join_dist_matches_brute_force_enumeration(
            su in proptest::array::uniform7(0.0f64..1.0),
            pv_raw in proptest::array::uniform7(0.0f64..1.0),
            gates_raw in proptest::collection::vec(0.0f64..1.0, 49),
        ) {
            let total: f64 = pv_raw.iter().sum();
            prop_assume!(total > 1e-3);
            let mut pv = pv_raw;
            for p in &mut pv {
                *p /= total;
            }
            let pv = RelationDistribution::new(pv).unwrap();
            let mut gates = [0.0; 49];
            gates.copy_from_slice(&gates_raw);
            let out = join_dist(&su, &pv, &gates).unwrap();
            // Brute force: enumerate all 49 pairs independently.
            let mut expect = [0.0; 7];
            for u in ALL_RELATIONS {
                for v in ALL_RELATIONS {
                    expect[join(u, v).index()] +=
                        su[u.index()] * pv.prob(v) * gates[u.index() * 7 + v.index()];
                }
            }
            for k in 0..7 {
                prop_assert!((out[k] - expect[k]).abs() < 1e-12);
            }
        }
    }
}
