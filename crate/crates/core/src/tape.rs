//! A small reverse-mode differentiation tape for the vector-sized
//! computations in this pipeline.
//!
//! Values are flat `Vec<T>` buffers (scalars have length 1). Each operation
//! appends a node recording its inputs; [`Tape::backward`] walks the node
//! list in reverse and accumulates parameter gradients into a caller-owned
//! [`Gradients`] buffer. The tape is generic over `f32` (training default)
//! and `f64` (gradient-check mode).
//!
//! Domain-specific linear maps — soft projection of a relation distribution
//! and gated join-table marginalization — are first-class ops so their
//! adjoints stay exact.

use crate::error::{NatlogError, Result};
use crate::relations::{JOIN_TABLE, NUM_RELATIONS};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar types the tape can run on.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of a parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    /// Row-major `rows x cols`.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Vector(n) => *n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    shape: Shape,
    data: Vec<T>,
}

/// Named, ordered parameter arrays. Registration order is the canonical
/// order for checkpoints and optimizer state, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a zero-initialized array.
    pub fn register(&mut self, name: &str, shape: Shape) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data: vec![T::zero(); shape.len()],
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Register with uniform init in `[-bound, bound]`.
    pub fn register_uniform<R: Rng>(&mut self, name: &str, shape: Shape, bound: f64, rng: &mut R) -> ParamId {
        let id = self.register(name, shape);
        for x in &mut self.entries[id.0].data {
            *x = T::from_f64(rng.gen_range(-bound..=bound));
        }
        id
    }

    /// Register with Glorot-style init for a `rows x cols` matrix.
    pub fn register_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.register_uniform(name, Shape::Matrix(rows, cols), bound, rng)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, Shape, &[T])> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.shape, e.data.as_slice()))
    }

    /// Convert every array to a different scalar type (used for the 64-bit
    /// gradient-check mode).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let id = out.register(&e.name, e.shape);
            for (dst, src) in out.entries[id.0].data.iter_mut().zip(&e.data) {
                *dst = U::from_f64(src.as_f64());
            }
        }
        out
    }
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    data: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            data: store.entries.iter().map(|e| vec![T::zero(); e.data.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    /// The whole parameter array as a vector.
    Param(ParamId),
    /// One row of a parameter matrix (embedding lookup).
    EmbedRow { table: ParamId, row: usize },
    /// y = W x for a parameter matrix W.
    MatVec { w: ParamId, x: Var },
    Add(Var, Var),
    /// Elementwise product with a constant mask (dropout, collapse).
    MaskConst { x: Var, mask: Vec<f64> },
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// y = x / sum(x).
    Normalize(Var),
    Dot(Var, Var),
    Concat(Var, Var),
    /// Scalars stacked into a vector.
    Stack(Vec<Var>),
    /// Scalar y = x[idx].
    Pick { x: Var, idx: usize },
    /// Scalar max over a subset; subgradient flows to the recorded argmax.
    MaxOver { x: Var, arg: usize },
    Ln(Var),
    Neg(Var),
    /// y = Σ_i w[i] * items[i].
    WeightedSum { w: Var, items: Vec<Var> },
    /// Soft projection: y[rho[k]] += x[k].
    ProjectDist { x: Var, rho: [usize; NUM_RELATIONS] },
    /// Gated join marginalization of s (7) x p (7) with gates (49).
    JoinMarginal { s: Var, p: Var, g: Var },
}

struct Node<T> {
    value: Vec<T>,
    op: Op,
}

/// The recording tape. Holds a read-only view of the parameters while a
/// forward pass is built.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn push(&mut self, value: Vec<T>, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tape value");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_f64(&mut self, value: &[f64]) -> Var {
        self.push(value.iter().map(|x| T::from_f64(*x)).collect(), Op::Const)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(vec![T::zero(); n], Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(self.params.values(id).to_vec(), Op::Param(id))
    }

    pub fn embed_row(&mut self, table: ParamId, row: usize) -> Var {
        let Shape::Matrix(rows, cols) = self.params.shape(table) else {
            panic!("embed_row on a vector parameter");
        };
        assert!(row < rows, "embedding row {row} out of {rows}");
        let data = self.params.values(table)[row * cols..(row + 1) * cols].to_vec();
        self.push(data, Op::EmbedRow { table, row })
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let Shape::Matrix(rows, cols) = self.params.shape(w) else {
            panic!("matvec on a vector parameter");
        };
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), cols, "matvec width mismatch for {}", self.params.name(w));
        let wv = self.params.values(w);
        let mut y = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            let mut acc = T::zero();
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            y[r] = acc;
        }
        self.push(y, Op::MatVec { w, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(x, z)| *x + *z).collect();
        self.push(y, Op::Add(a, b))
    }

    pub fn mask_const(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), mask.len());
        let y = xv.iter().zip(&mask).map(|(v, m)| *v * T::from_f64(*m)).collect();
        self.push(y, Op::MaskConst { x, mask })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(y, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|v| sigmoid(*v)).collect();
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_slice(&self.nodes[x.0].value);
        self.push(y, Op::Softmax(x))
    }

    /// Divide by the sum of entries. Errors when the mass is not positive.
    pub fn normalize(&mut self, x: Var, step: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let total = xv.iter().fold(T::zero(), |acc, v| acc + *v);
        if total <= T::zero() {
            return Err(NatlogError::DegenerateState { step });
        }
        let y = xv.iter().map(|v| *v / total).collect();
        Ok(self.push(y, Op::Normalize(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len());
        let mut acc = T::zero();
        for (x, z) in av.iter().zip(bv) {
            acc += *x * *z;
        }
        self.push(vec![acc], Op::Dot(a, b))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.nodes[a.0].value.clone();
        y.extend_from_slice(&self.nodes[b.0].value);
        self.push(y, Op::Concat(a, b))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let y = parts.iter().map(|p| self.scalar(*p)).collect();
        self.push(y, Op::Stack(parts.to_vec()))
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let v = self.nodes[x.0].value[idx];
        self.push(vec![v], Op::Pick { x, idx })
    }

    /// Max over a subset of indices; ties resolve to the lowest index.
    pub fn max_over(&mut self, x: Var, idxs: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut arg = idxs[0];
        for &i in &idxs[1..] {
            if xv[i] > xv[arg] {
                arg = i;
            }
        }
        let v = xv[arg];
        self.push(vec![v], Op::MaxOver { x, arg })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(y, Op::Ln(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|v| -*v).collect();
        self.push(y, Op::Neg(x))
    }

    pub fn weighted_sum(&mut self, w: Var, items: &[Var]) -> Var {
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.len(), items.len());
        let dim = self.nodes[items[0].0].value.len();
        let mut y = vec![T::zero(); dim];
        for (t, item) in items.iter().enumerate() {
            let iv = &self.nodes[item.0].value;
            let weight = wv[t];
            for (acc, v) in y.iter_mut().zip(iv) {
                *acc += weight * *v;
            }
        }
        self.push(y, Op::WeightedSum { w, items: items.to_vec() })
    }

    /// Soft projection of a 7-distribution: `y[rho[k]] += x[k]`.
    pub fn project_dist(&mut self, x: Var, rho: [usize; NUM_RELATIONS]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), NUM_RELATIONS);
        let mut y = vec![T::zero(); NUM_RELATIONS];
        for k in 0..NUM_RELATIONS {
            y[rho[k]] += xv[k];
        }
        self.push(y, Op::ProjectDist { x, rho })
    }

    /// Gated join marginalization:
    /// `y[k] = Σ_{u,v: u⋈v=k} s[u] · p[v] · g[u*7+v]`.
    pub fn join_marginal(&mut self, s: Var, p: Var, g: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        let pv = &self.nodes[p.0].value;
        let gv = &self.nodes[g.0].value;
        assert_eq!(sv.len(), NUM_RELATIONS);
        assert_eq!(pv.len(), NUM_RELATIONS);
        assert_eq!(gv.len(), NUM_RELATIONS * NUM_RELATIONS);
        let mut y = vec![T::zero(); NUM_RELATIONS];
        for u in 0..NUM_RELATIONS {
            let su = sv[u];
            if su == T::zero() {
                continue;
            }
            for v in 0..NUM_RELATIONS {
                let k = JOIN_TABLE[u][v].index();
                y[k] += su * pv[v] * gv[u * NUM_RELATIONS + v];
            }
        }
        self.push(y, Op::JoinMarginal { s, p, g })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Reverse pass from a scalar root. Parameter gradients are scaled by
    /// `scale` and accumulated into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Gradients<T>, scale: T) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Vec<T>> = self.nodes.iter().map(|n| vec![T::zero(); n.value.len()]).collect();
        adj[root.0][0] = T::one();

        for i in (0..self.nodes.len()).rev() {
            if adj[i].iter().all(|g| *g == T::zero()) {
                continue;
            }
            let dy = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let g = grads.get_mut(*id);
                    for (gd, d) in g.iter_mut().zip(&dy) {
                        *gd += scale * *d;
                    }
                }
                Op::EmbedRow { table, row } => {
                    let Shape::Matrix(_, cols) = self.params.shape(*table) else {
                        unreachable!()
                    };
                    let g = &mut grads.get_mut(*table)[row * cols..(row + 1) * cols];
                    for (gd, d) in g.iter_mut().zip(&dy) {
                        *gd += scale * *d;
                    }
                }
                Op::MatVec { w, x } => {
                    let Shape::Matrix(rows, cols) = self.params.shape(*w) else {
                        unreachable!()
                    };
                    let wv = self.params.values(*w);
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = grads.get_mut(*w);
                        for r in 0..rows {
                            let d = scale * dy[r];
                            if d == T::zero() {
                                continue;
                            }
                            let grow = &mut gw[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                grow[c] += d * xv[c];
                            }
                        }
                    }
                    let gx = &mut adj[x.0];
                    for r in 0..rows {
                        let d = dy[r];
                        if d == T::zero() {
                            continue;
                        }
                        let row = &wv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gx[c] += d * row[c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, d) in adj[a.0].iter_mut().zip(&dy) {
                        *g += *d;
                    }
                    for (g, d) in adj[b.0].iter_mut().zip(&dy) {
                        *g += *d;
                    }
                }
                Op::MaskConst { x, mask } => {
                    for ((g, d), m) in adj[x.0].iter_mut().zip(&dy).zip(mask) {
                        *g += *d * T::from_f64(*m);
                    }
                }
                Op::Tanh(x) => {
                    for ((g, d), y) in adj[x.0].iter_mut().zip(&dy).zip(&node.value) {
                        *g += *d * (T::one() - *y * *y);
                    }
                }
                Op::Sigmoid(x) => {
                    for ((g, d), y) in adj[x.0].iter_mut().zip(&dy).zip(&node.value) {
                        *g += *d * *y * (T::one() - *y);
                    }
                }
                Op::Softmax(x) => {
                    // dx = y ⊙ (dy − ⟨dy, y⟩)
                    let mut dot = T::zero();
                    for (d, y) in dy.iter().zip(&node.value) {
                        dot += *d * *y;
                    }
                    for ((g, d), y) in adj[x.0].iter_mut().zip(&dy).zip(&node.value) {
                        *g += *y * (*d - dot);
                    }
                }
                Op::Normalize(x) => {
                    // y = x / s with s = Σx:  dx_j = (dy_j − ⟨dy, y⟩) / s
                    let xv = &self.nodes[x.0].value;
                    let total = xv.iter().fold(T::zero(), |acc, v| acc + *v);
                    let mut dot = T::zero();
                    for (d, y) in dy.iter().zip(&node.value) {
                        dot += *d * *y;
                    }
                    for (g, d) in adj[x.0].iter_mut().zip(&dy) {
                        *g += (*d - dot) / total;
                    }
                }
                Op::Dot(a, b) => {
                    let d = dy[0];
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (g, v) in adj[a.0].iter_mut().zip(bv) {
                        *g += d * *v;
                    }
                    for (g, v) in adj[b.0].iter_mut().zip(av) {
                        *g += d * *v;
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    for (g, d) in adj[a.0].iter_mut().zip(&dy[..na]) {
                        *g += *d;
                    }
                    for (g, d) in adj[b.0].iter_mut().zip(&dy[na..]) {
                        *g += *d;
                    }
                }
                Op::Stack(parts) => {
                    for (k, p) in parts.iter().enumerate() {
                        adj[p.0][0] += dy[k];
                    }
                }
                Op::Pick { x, idx } => {
                    adj[x.0][*idx] += dy[0];
                }
                Op::MaxOver { x, arg, .. } => {
                    adj[x.0][*arg] += dy[0];
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.0].value;
                    for ((g, d), v) in adj[x.0].iter_mut().zip(&dy).zip(xv) {
                        *g += *d / *v;
                    }
                }
                Op::Neg(x) => {
                    for (g, d) in adj[x.0].iter_mut().zip(&dy) {
                        *g -= *d;
                    }
                }
                Op::WeightedSum { w, items } => {
                    let wv = &self.nodes[w.0].value;
                    for (t, item) in items.iter().enumerate() {
                        let iv = &self.nodes[item.0].value;
                        let mut dw = T::zero();
                        for (d, v) in dy.iter().zip(iv) {
                            dw += *d * *v;
                        }
                        adj[w.0][t] += dw;
                        let weight = wv[t];
                        for (g, d) in adj[item.0].iter_mut().zip(&dy) {
                            *g += weight * *d;
                        }
                    }
                }
                Op::ProjectDist { x, rho } => {
                    for k in 0..NUM_RELATIONS {
                        adj[x.0][k] += dy[rho[k]];
                    }
                }
                Op::JoinMarginal { s, p, g } => {
                    let sv = &self.nodes[s.0].value;
                    let pv = &self.nodes[p.0].value;
                    let gv = &self.nodes[g.0].value;
                    for u in 0..NUM_RELATIONS {
                        for v in 0..NUM_RELATIONS {
                            let k = JOIN_TABLE[u][v].index();
                            let d = dy[k];
                            if d == T::zero() {
                                continue;
                            }
                            let gate = gv[u * NUM_RELATIONS + v];
                            adj[s.0][u] += d * pv[v] * gate;
                            adj[p.0][v] += d * sv[u] * gate;
                            adj[g.0][u * NUM_RELATIONS + v] += d * sv[u] * pv[v];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|v| (*v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, v| acc + *v);
    exps.into_iter().map(|v| v / total).collect()
}
