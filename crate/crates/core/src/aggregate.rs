//! Memory-gated module-network aggregation.
//!
//! Each of the 49 join-table cells `u ⋈ v` owns a scalar gate, a linear map
//! plus sigmoid over the memory response `o_j`. A step marginalizes the
//! Cartesian product of the running state and the incoming projected
//! distribution through the join table, weighted by the gates, then
//! renormalizes (products of sub-unit gates would underflow over long
//! sequences otherwise; per-step argmax is unaffected). The memory network
//! stores a key and value vector per visited position and answers each
//! query with an attention-weighted sum of values.
//!
//! Aggregation runs left-to-right over the hypothesis or bottom-up over a
//! binarized constituency tree (post-order, left child first).

use crate::encoder::ScoreUpdate;
use crate::error::{NatlogError, Result};
use crate::polarity::Tree;
use crate::relations::{Relation, NUM_RELATIONS};
use crate::tape::{ParamId, ParamStore, Scalar, Shape, Tape, Var};
use rand::Rng;

/// Gate behavior: learned sigmoid gates, or the bypass used by the
/// symbolic-equivalence checks (every gate equal to one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    Bypass,
}

/// Options for one aggregation run.
#[derive(Debug, Clone, Copy, Default)]
pub struct AggregationOptions {
    pub gate_mode: GateMode,
    pub score_update: ScoreUpdate,
}

/// A two-layer feed-forward map with tanh in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> FeedForward {
        FeedForward {
            w1: store.register_glorot(&format!("{name}.w1"), out_dim, in_dim, rng),
            b1: store.register(&format!("{name}.b1"), Shape::Vector(out_dim)),
            w2: store.register_glorot(&format!("{name}.w2"), out_dim, out_dim, rng),
            b2: store.register(&format!("{name}.b2"), Shape::Vector(out_dim)),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = tape.matvec(self.w1, x);
        let b1 = tape.param(self.b1);
        let h = tape.add(h, b1);
        let h = tape.tanh(h);
        let y = tape.matvec(self.w2, h);
        let b2 = tape.param(self.b2);
        tape.add(y, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Parameters of the aggregation stage: the three memory maps and the 49
/// gate modules (a weight row and bias per ordered relation pair).
#[derive(Debug, Clone)]
pub struct AggregationParams {
    pub query: FeedForward,
    pub memory: FeedForward,
    pub output: FeedForward,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl AggregationParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        pair_dim: usize,
        memory_dim: usize,
        rng: &mut R,
    ) -> AggregationParams {
        AggregationParams {
            query: FeedForward::register(store, "mem.q", pair_dim, memory_dim, rng),
            memory: FeedForward::register(store, "mem.m", pair_dim, memory_dim, rng),
            output: FeedForward::register(store, "mem.c", pair_dim, memory_dim, rng),
            gate_w: store.register_glorot("gate.w", NUM_RELATIONS * NUM_RELATIONS, memory_dim, rng),
            gate_b: store.register("gate.b", Shape::Vector(NUM_RELATIONS * NUM_RELATIONS)),
        }
    }
}

/// Memory contents accumulated over visited positions.
#[derive(Debug, Clone, Default)]
pub struct MemoryVars {
    keys: Vec<Var>,
    values: Vec<Var>,
}

impl MemoryVars {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// One memory read: response vector and the attention over stored entries.
#[derive(Debug, Clone, Copy)]
pub struct MemoryResponse {
    pub response: Var,
    pub attention: Var,
}

/// Append this position's key/value, then query the memory (the current
/// position included) and return the attention-weighted response.
pub fn memory_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pair_repr: Var,
    state: &mut MemoryVars,
    params: &AggregationParams,
) -> MemoryResponse {
    let key = params.memory.apply(tape, pair_repr);
    let value = params.output.apply(tape, pair_repr);
    let query = params.query.apply(tape, pair_repr);
    state.keys.push(key);
    state.values.push(value);
    let matches: Vec<Var> = state.keys.iter().map(|k| tape.dot(query, *k)).collect();
    let stacked = tape.stack(&matches);
    let attention = tape.softmax(stacked);
    let response = tape.weighted_sum(attention, &state.values);
    MemoryResponse { response, attention }
}

/// All 49 gate values for one memory response, flattened row-major by
/// ordered pair `(u, v)`. Bypass mode returns constant ones.
pub fn gate_vector<T: Scalar>(
    tape: &mut Tape<'_, T>,
    response: Var,
    params: &AggregationParams,
    mode: GateMode,
) -> Var {
    match mode {
        GateMode::Bypass => tape.constant(vec![T::one(); NUM_RELATIONS * NUM_RELATIONS]),
        GateMode::Learned => {
            let scores = tape.matvec(params.gate_w, response);
            let bias = tape.param(params.gate_b);
            let scores = tape.add(scores, bias);
            tape.sigmoid(scores)
        }
    }
}

/// The gate for one ordered pair.
pub fn gate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    u: Relation,
    v: Relation,
    response: Var,
    params: &AggregationParams,
) -> Var {
    let all = gate_vector(tape, response, params, GateMode::Learned);
    tape.pick(all, u.index() * NUM_RELATIONS + v.index())
}

/// One aggregation step: gated join-table marginalization of the previous
/// state with the incoming projected distribution, then the score update.
/// Returns `(forwarded_state, reported_distribution)`.
pub fn step_sequential<T: Scalar>(
    tape: &mut Tape<'_, T>,
    prev: Var,
    projected: Var,
    gates: Var,
    score_update: ScoreUpdate,
    step: usize,
) -> Result<(Var, Var)> {
    let raw = tape.join_marginal(prev, projected, gates);
    match score_update {
        ScoreUpdate::Renormalize => {
            let normalized = tape.normalize(raw, step)?;
            Ok((normalized, normalized))
        }
        ScoreUpdate::SoftmaxLogits => {
            let reported = tape.softmax(raw);
            Ok((raw, reported))
        }
    }
}

/// Trace of one aggregation run.
#[derive(Debug, Clone)]
pub struct AggregationRun {
    /// Reported per-step state distributions (position-aligned).
    pub states: Vec<Var>,
    /// Attention over memory per step.
    pub alphas: Vec<Vec<f64>>,
    /// Gate vectors actually used per step; the first step aggregates
    /// nothing and has no gates.
    pub gates_used: Vec<Option<Vec<f64>>>,
}

impl AggregationRun {
    /// Final reported state.
    pub fn last(&self) -> Var {
        *self.states.last().expect("non-empty run")
    }

    pub fn state_values<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<[f64; NUM_RELATIONS]> {
        self.states
            .iter()
            .map(|s| {
                let mut out = [0.0; NUM_RELATIONS];
                for (o, v) in out.iter_mut().zip(tape.value(*s)) {
                    *o = v.as_f64();
                }
                out
            })
            .collect()
    }
}

/// Left-to-right aggregation over hypothesis positions. The first state is
/// initialized with the first projected distribution; every later step is a
/// gated marginalization informed by the memory response at that position.
pub fn run_sequential<T: Scalar>(
    tape: &mut Tape<'_, T>,
    projected: &[Var],
    pair_reprs: &[Var],
    params: &AggregationParams,
    opts: AggregationOptions,
) -> Result<AggregationRun> {
    if projected.is_empty() {
        return Err(NatlogError::Contract("aggregation needs at least one position".into()));
    }
    if projected.len() != pair_reprs.len() {
        return Err(NatlogError::Dimension {
            expected: projected.len(),
            got: pair_reprs.len(),
        });
    }
    let mut memory = MemoryVars::default();
    let mut states = Vec::with_capacity(projected.len());
    let mut alphas = Vec::with_capacity(projected.len());
    let mut gates_used = Vec::with_capacity(projected.len());

    let mut forwarded = projected[0];
    states.push(projected[0]);
    let first = memory_step(tape, pair_reprs[0], &mut memory, params);
    alphas.push(values_f64(tape, first.attention));
    gates_used.push(None);

    for j in 1..projected.len() {
        let mem = memory_step(tape, pair_reprs[j], &mut memory, params);
        alphas.push(values_f64(tape, mem.attention));
        let gates = gate_vector(tape, mem.response, params, opts.gate_mode);
        gates_used.push(Some(values_f64(tape, gates)));
        let (next, reported) = step_sequential(tape, forwarded, projected[j], gates, opts.score_update, j + 1)?;
        forwarded = next;
        states.push(reported);
    }
    Ok(AggregationRun {
        states,
        alphas,
        gates_used,
    })
}

/// Trace entry for one tree node, post-order.
#[derive(Debug, Clone)]
pub struct TreeNodeTrace {
    /// Covered token span, end exclusive.
    pub span: (usize, usize),
    pub is_leaf: bool,
    pub state: [f64; NUM_RELATIONS],
    pub alpha: Vec<f64>,
    pub gates: Option<Vec<f64>>,
}

/// Result of a tree aggregation run.
#[derive(Debug, Clone)]
pub struct TreeRun {
    pub root: Var,
    pub nodes: Vec<TreeNodeTrace>,
}

/// Bottom-up aggregation over a binarized constituency tree. Leaves take
/// their projected distributions; an internal node marginalizes its two
/// children through the gated join table, with the memory response computed
/// over all nodes already visited in post-order (left child first, current
/// node included). Internal node representations average their children.
pub fn run_tree<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tree: &Tree,
    projected: &[Var],
    pair_reprs: &[Var],
    params: &AggregationParams,
    opts: AggregationOptions,
) -> Result<TreeRun> {
    if !tree.is_binary() {
        return Err(NatlogError::Tree("tree aggregation requires a binarized tree".into()));
    }
    let leaves = tree.leaves();
    if leaves.len() != projected.len() || leaves.iter().enumerate().any(|(i, l)| *l != i) {
        return Err(NatlogError::Tree(format!(
            "tree must span leaf indices 0..{} in order",
            projected.len()
        )));
    }
    if projected.len() != pair_reprs.len() {
        return Err(NatlogError::Dimension {
            expected: projected.len(),
            got: pair_reprs.len(),
        });
    }
    let mut memory = MemoryVars::default();
    let mut nodes = Vec::new();
    let (root, _, _) = visit(tape, tree, projected, pair_reprs, params, opts, &mut memory, &mut nodes)?;
    Ok(TreeRun { root, nodes })
}

#[allow(clippy::too_many_arguments)]
fn visit<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tree: &Tree,
    projected: &[Var],
    pair_reprs: &[Var],
    params: &AggregationParams,
    opts: AggregationOptions,
    memory: &mut MemoryVars,
    nodes: &mut Vec<TreeNodeTrace>,
) -> Result<(Var, Var, (usize, usize))> {
    match tree {
        Tree::Leaf(i) => {
            let state = projected[*i];
            let repr = pair_reprs[*i];
            let mem = memory_step(tape, repr, memory, params);
            nodes.push(TreeNodeTrace {
                span: (*i, *i + 1),
                is_leaf: true,
                state: state_array(tape, state),
                alpha: values_f64(tape, mem.attention),
                gates: None,
            });
            Ok((state, repr, (*i, *i + 1)))
        }
        Tree::Node(children) => {
            debug_assert_eq!(children.len(), 2);
            let (left_state, left_repr, left_span) =
                visit(tape, &children[0], projected, pair_reprs, params, opts, memory, nodes)?;
            let (right_state, right_repr, right_span) =
                visit(tape, &children[1], projected, pair_reprs, params, opts, memory, nodes)?;
            let span = (left_span.0, right_span.1);
            let summed = tape.add(left_repr, right_repr);
            let repr_len = tape.len(summed);
            let repr = tape.mask_const(summed, vec![0.5; repr_len]);
            let mem = memory_step(tape, repr, memory, params);
            let gates = gate_vector(tape, mem.response, params, opts.gate_mode);
            let (state, reported) =
                step_sequential(tape, left_state, right_state, gates, opts.score_update, span.1)?;
            nodes.push(TreeNodeTrace {
                span,
                is_leaf: false,
                state: state_array(tape, reported),
                alpha: values_f64(tape, mem.attention),
                gates: Some(values_f64(tape, gates)),
            });
            Ok((state, repr, span))
        }
    }
}

fn values_f64<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> Vec<f64> {
    tape.value(v).iter().map(|x| x.as_f64()).collect()
}

fn state_array<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> [f64; NUM_RELATIONS] {
    let mut out = [0.0; NUM_RELATIONS];
    for (o, x) in out.iter_mut().zip(tape.value(v)) {
        *o = x.as_f64();
    }
    out
}
