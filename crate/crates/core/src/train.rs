//! End-to-end model assembly, training, and persistence.
//!
//! The full pipeline per example: encode both sentences, attend, score
//! local relations under constraints, project, aggregate (sequentially or
//! over the hypothesis parse), group the final state into three NLI scores
//! by max (hard-EM style), softmax, cross-entropy. Gradients come from the
//! crate's own reverse-mode tape; the optimizer is Adam with the standard
//! bias correction. Training is deterministic given a seed, and checkpoints
//! round-trip bit-exactly.

use crate::aggregate::{
    run_sequential, run_tree, AggregationOptions, AggregationParams, AggregationRun, GateMode, TreeRun,
};
use crate::dataset::Example;
use crate::encoder::{
    attend, encode_sentence, Alignment, EncodedSentence, Mode, ModelConfig, RecurrentEncoder,
    Vocab,
};
use crate::error::{NatlogError, Result};
use crate::local::{local_pipeline, BilinearParams, ConstraintFlags, LocalStage};
use crate::polarity::{mark_polarity, right_comb, AnnotatedSentence, ControlledGrammar};
use crate::relations::{
    argmax_relation, NliLabel, Pooling, Relation, ALL_LABELS, NLI_GROUPS, NUM_RELATIONS, RELATION_TOKENS,
};
use crate::tape::{Gradients, ParamId, ParamStore, Scalar, Shape, Tape, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Aggregation order for inference and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    #[serde(rename = "seq")]
    Sequential,
    #[serde(rename = "tree")]
    Tree,
}

/// The complete parameter set behind one model, generic over the scalar
/// type (`f32` for training, `f64` for gradient checking).
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub encoder: RecurrentEncoder,
    pub bilinear: BilinearParams,
    pub aggregation: AggregationParams,
}

impl<T: Scalar> Model<T> {
    /// Initialize all parameters from the config seed.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Model<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = RecurrentEncoder::register(&mut store, &config, vocab.len(), &mut rng);
        let bilinear = BilinearParams::register(&mut store, config.hidden_dim, &mut rng);
        let aggregation =
            AggregationParams::register(&mut store, 2 * config.hidden_dim, config.memory_dim, &mut rng);
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            bilinear,
            aggregation,
        })
    }

    /// Same parameters at a different precision.
    pub fn convert<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            vocab: self.vocab.clone(),
            store: self.store.convert(),
            encoder: self.encoder.clone(),
            bilinear: self.bilinear.clone(),
            aggregation: self.aggregation.clone(),
        }
    }

    fn constraint_flags(&self) -> ConstraintFlags {
        ConstraintFlags {
            equivalence: self.config.eq_constraint,
            collapse: self.config.collapse_constraint,
        }
    }

    /// Build the full forward graph for one example.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        input: &PredictInput<'_>,
        strategy: Strategy,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass> {
        if input.hypothesis.len() != input.annotation.len() {
            return Err(NatlogError::AnnotationLength {
                tokens: input.hypothesis.len(),
                rows: input.annotation.len(),
            });
        }
        let premise = encode_sentence(tape, &self.encoder, &self.vocab, input.premise, mode, rng)?;
        let hypothesis = encode_sentence(tape, &self.encoder, &self.vocab, input.hypothesis, mode, rng)?;
        let alignment = attend(tape, &premise, &hypothesis)?;
        let local = local_pipeline(
            tape,
            &alignment,
            &hypothesis,
            input.annotation,
            &self.bilinear,
            self.constraint_flags(),
        )?;
        let pair_reprs: Vec<Var> = (0..hypothesis.vectors.len())
            .map(|j| tape.concat(alignment.summaries[j], hypothesis.vectors[j]))
            .collect();
        let opts = AggregationOptions {
            gate_mode: GateMode::Learned,
            score_update: self.config.score_update,
        };
        let run = match strategy {
            Strategy::Sequential => {
                let run = run_sequential(tape, &local.projected, &pair_reprs, &self.aggregation, opts)?;
                RunOutput::Sequential(run)
            }
            Strategy::Tree => {
                let tree = match &input.annotation.parse {
                    Some(parse) => parse.clone(),
                    None => right_comb(input.hypothesis.len()),
                };
                let run = run_tree(tape, &tree, &local.projected, &pair_reprs, &self.aggregation, opts)?;
                RunOutput::Tree(run)
            }
        };
        let final_state = run.final_state();
        let grouped = group_state(tape, final_state, self.config.pooling);
        let probs = tape.softmax(grouped);
        Ok(ForwardPass {
            premise,
            hypothesis,
            alignment,
            local,
            run,
            final_state,
            probs,
        })
    }

    /// Run inference on one example.
    pub fn predict(&self, input: &PredictInput<'_>, strategy: Strategy) -> Result<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&self.store);
        let pass = self.forward(&mut tape, input, strategy, Mode::Eval, &mut rng)?;
        Ok(pass.into_prediction(&tape))
    }

    /// Loss of one example against a gold label.
    pub fn loss_on(
        &self,
        input: &PredictInput<'_>,
        gold: NliLabel,
        strategy: Strategy,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let pass = self.forward(&mut tape, input, strategy, mode, rng)?;
        let l = loss(&mut tape, pass.probs, gold);
        Ok(tape.scalar(l).as_f64())
    }
}

/// One example ready for the model.
#[derive(Debug, Clone)]
pub struct PredictInput<'a> {
    pub premise: &'a [String],
    pub hypothesis: &'a [String],
    pub annotation: &'a AnnotatedSentence,
}

/// Group a seven-relation state into three label scores. Max pooling is the
/// hard-EM rule; gradient flows through the selected element only.
pub fn group_state<T: Scalar>(tape: &mut Tape<'_, T>, state: Var, pooling: Pooling) -> Var {
    let mut parts = Vec::with_capacity(3);
    for idxs in NLI_GROUPS {
        let part = match pooling {
            Pooling::Max => tape.max_over(state, idxs),
            Pooling::Sum => {
                let mut acc = tape.pick(state, idxs[0]);
                for &i in &idxs[1..] {
                    let x = tape.pick(state, i);
                    acc = tape.add(acc, x);
                }
                acc
            }
        };
        parts.push(part);
    }
    tape.stack(&parts)
}

/// Cross-entropy of a three-way probability vector against a gold label.
pub fn loss<T: Scalar>(tape: &mut Tape<'_, T>, probs: Var, gold: NliLabel) -> Var {
    let p = tape.pick(probs, gold.index());
    let lp = tape.ln(p);
    tape.neg(lp)
}

/// Label decision: argmax with any tie (or a non-finite vector) resolved
/// to neutral.
pub fn label_from_probs(probs: &[f64; 3]) -> NliLabel {
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match probs.iter().filter(|p| **p == max).count() {
        1 => ALL_LABELS[probs.iter().position(|p| *p == max).unwrap()],
        _ => NliLabel::Neutral,
    }
}

/// Aggregation output of either strategy.
#[derive(Debug, Clone)]
pub enum RunOutput {
    Sequential(AggregationRun),
    Tree(TreeRun),
}

impl RunOutput {
    pub fn final_state(&self) -> Var {
        match self {
            RunOutput::Sequential(run) => run.last(),
            RunOutput::Tree(run) => run.root,
        }
    }
}

/// Everything a forward pass produced, by tape handle.
pub struct ForwardPass {
    pub premise: EncodedSentence,
    pub hypothesis: EncodedSentence,
    pub alignment: Alignment,
    pub local: LocalStage,
    pub run: RunOutput,
    pub final_state: Var,
    pub probs: Var,
}

/// A decoded prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: NliLabel,
    pub probs: [f64; 3],
    /// Per-step (sequential) or per-node (tree, post-order) argmax relations.
    pub trajectory: Vec<Relation>,
    pub trace: InferenceTrace,
}

impl ForwardPass {
    fn state_rows<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<[f64; NUM_RELATIONS]> {
        match &self.run {
            RunOutput::Sequential(run) => run.state_values(tape),
            RunOutput::Tree(run) => run.nodes.iter().map(|n| n.state).collect(),
        }
    }

    pub fn into_prediction<T: Scalar>(self, tape: &Tape<'_, T>) -> Prediction {
        let mut probs = [0.0; 3];
        for (p, v) in probs.iter_mut().zip(tape.value(self.probs)) {
            *p = v.as_f64();
        }
        let label = label_from_probs(&probs);
        let states = self.state_rows(tape);
        let trajectory: Vec<Relation> = states.iter().map(argmax_relation).collect();
        let trace = self.build_trace(tape, label, probs);
        Prediction {
            label,
            probs,
            trajectory,
            trace,
        }
    }

    fn build_trace<T: Scalar>(&self, tape: &Tape<'_, T>, label: NliLabel, probs: [f64; 3]) -> InferenceTrace {
        let n = self.hypothesis.vectors.len();
        let m = self.premise.vectors.len();
        // Attention as softmax weights, premise-major m x n.
        let mut attention = vec![vec![0.0; n]; m];
        for (j, w) in self.alignment.weights.iter().enumerate() {
            for (i, value) in tape.value(*w).iter().enumerate() {
                attention[i][j] = value.as_f64();
            }
        }
        let rows = |vars: &[Var]| -> Vec<Vec<f64>> {
            vars.iter()
                .map(|v| tape.value(*v).iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        let (mode, states, gates_used, alpha, tree_spans) = match &self.run {
            RunOutput::Sequential(run) => (
                "seq".to_string(),
                run.state_values(tape).iter().map(|s| s.to_vec()).collect(),
                run.gates_used.clone(),
                run.alphas.clone(),
                None,
            ),
            RunOutput::Tree(run) => (
                "tree".to_string(),
                run.nodes.iter().map(|n| n.state.to_vec()).collect::<Vec<_>>(),
                run.nodes.iter().map(|n| n.gates.clone()).collect(),
                run.nodes.iter().map(|n| n.alpha.clone()).collect(),
                Some(run.nodes.iter().map(|n| [n.span.0, n.span.1]).collect()),
            ),
        };
        InferenceTrace {
            premise_tokens: self.premise.tokens.clone(),
            hypothesis_tokens: self.hypothesis.tokens.clone(),
            relations: RELATION_TOKENS.iter().map(|s| s.to_string()).collect(),
            mode,
            attention,
            local_dists: rows(&self.local.locals),
            projected_dists: rows(&self.local.projected),
            states,
            gates_used,
            alpha,
            phi: self.alignment.hard_indicator.clone(),
            label: label.token().to_string(),
            probs,
            tree_spans,
        }
    }
}

/// The JSON trace emitted by inference: attention, local and projected
/// distributions, per-step states, gates, and memory attention, with the
/// relation axis labeled by ASCII tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub premise_tokens: Vec<String>,
    pub hypothesis_tokens: Vec<String>,
    pub relations: Vec<String>,
    pub mode: String,
    pub attention: Vec<Vec<f64>>,
    pub local_dists: Vec<Vec<f64>>,
    pub projected_dists: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub gates_used: Vec<Option<Vec<f64>>>,
    pub alpha: Vec<Vec<f64>>,
    pub phi: Vec<bool>,
    pub label: String,
    pub probs: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_spans: Option<Vec<[usize; 2]>>,
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> AdamState {
        AdamState {
            m: store.iter().map(|(_, _, _, data)| vec![0.0; data.len()]).collect(),
            v: store.iter().map(|(_, _, _, data)| vec![0.0; data.len()]).collect(),
            step: 0,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, opts: &TrainOptions) {
        self.step += 1;
        let lr = opts.learning_rate as f32;
        let b1 = opts.beta1 as f32;
        let b2 = opts.beta2 as f32;
        let eps = opts.adam_eps as f32;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.values_mut(id);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn arrays(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Stop once dev accuracy reaches this value (selection cannot improve).
    pub early_stop_dev_acc: Option<f64>,
    /// Global-norm gradient clip, guarding the f32 path against blowups
    /// from near-empty score masses.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 32,
            batch_size: 32,
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            strategy: Strategy::Sequential,
            early_stop_dev_acc: Some(1.0),
            max_grad_norm: Some(5.0),
        }
    }
}

/// Scale gradients down to the given global norm when they exceed it.
fn clip_gradients(grads: &mut Gradients<f32>, store: &ParamStore<f32>, max_norm: f64) {
    let mut total = 0.0f64;
    for (id, _, _, _) in store.iter() {
        for g in grads.get(id) {
            total += (*g as f64) * (*g as f64);
        }
    }
    let norm = total.sqrt();
    if !norm.is_finite() {
        // A blown-up example poisoned the batch; drop its update entirely.
        grads.zero();
    } else if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (id, _, _, _) in store.iter() {
            for g in grads.get_mut(id) {
                *g *= scale;
            }
        }
    }
}

/// A dataset example with its hypothesis annotation resolved.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub annotation: AnnotatedSentence,
    pub gold: NliLabel,
    /// Per-hypothesis-position gold aggregation states.
    pub gold_states: Vec<Relation>,
    /// Monotone direction of the example's edit contexts.
    pub direction: crate::dataset::Direction,
}

impl PreparedExample {
    pub fn input(&self) -> PredictInput<'_> {
        PredictInput {
            premise: &self.premise,
            hypothesis: &self.hypothesis,
            annotation: &self.annotation,
        }
    }
}

/// Annotate a dataset under a controlled grammar.
pub fn prepare(examples: &[Example], grammar: &ControlledGrammar) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|ex| {
            let annotation = mark_polarity(&ex.hypothesis, grammar)?;
            Ok(PreparedExample {
                premise: ex.premise.clone(),
                hypothesis: ex.hypothesis.clone(),
                annotation,
                gold: ex.label,
                gold_states: ex.gold_state_sequence(),
                direction: ex.direction(),
            })
        })
        .collect()
}

/// Per-epoch statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
}

/// A finished training run: the best-dev model plus its history.
pub struct TrainOutput {
    pub model: Model<f32>,
    pub optimizer: AdamState,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Train a model from scratch on prepared examples. Deterministic for a
/// fixed seed: shuffling, dropout, and initialization all derive from it.
/// When a dev set is given, the checkpoint with the best dev accuracy is
/// returned (ties keep the earlier epoch).
pub fn train(
    train_set: &[PreparedExample],
    dev_set: Option<&[PreparedExample]>,
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    if train_set.is_empty() {
        return Err(NatlogError::EmptyDataset);
    }
    let vocab = Vocab::from_corpus(
        train_set
            .iter()
            .flat_map(|ex| [ex.premise.as_slice(), ex.hypothesis.as_slice()]),
    );
    let mut model: Model<f32> = Model::new(config, vocab)?;
    let mut optimizer = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Gradients::zeros_like(&model.store);
    for epoch in 1..=opts.epochs {
        shuffle(&mut order, &mut rng);
        let mut total_loss = 0.0f64;
        for batch in order.chunks(opts.batch_size) {
            grads.zero();
            let scale = 1.0 / batch.len() as f32;
            for &idx in batch {
                let ex = &train_set[idx];
                let mut tape = Tape::new(&model.store);
                let pass = model.forward(&mut tape, &ex.input(), opts.strategy, Mode::Train, &mut rng)?;
                let l = loss(&mut tape, pass.probs, ex.gold);
                total_loss += tape.scalar(l).as_f64();
                tape.backward(l, &mut grads, scale);
            }
            if let Some(max_norm) = opts.max_grad_norm {
                clip_gradients(&mut grads, &model.store, max_norm);
            }
            optimizer.apply(&mut model.store, &grads, opts);
        }
        let train_loss = total_loss / train_set.len() as f64;
        let dev_accuracy = match dev_set {
            Some(dev) => Some(evaluate(&model, dev, opts.strategy)?.accuracy),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            dev_accuracy,
        });
        if let Some(acc) = dev_accuracy {
            let improved = best.as_ref().map(|(b, _, _)| acc > *b).unwrap_or(true);
            if improved {
                best = Some((acc, epoch, model.store.clone()));
            }
            if let Some(stop) = opts.early_stop_dev_acc {
                if acc >= stop {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => history.len(),
    };
    Ok(TrainOutput {
        model,
        optimizer,
        history,
        best_epoch,
    })
}

/// Fisher-Yates with the run's RNG, for deterministic epochs.
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Evaluation of a model over prepared examples.
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<NliLabel>,
    /// Per-example per-position argmax trajectories.
    pub trajectories: Vec<Vec<Relation>>,
}

pub fn evaluate(model: &Model<f32>, examples: &[PreparedExample], strategy: Strategy) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut trajectories = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    for ex in examples {
        let prediction = model.predict(&ex.input(), strategy)?;
        if prediction.label == ex.gold {
            correct += 1;
        }
        predictions.push(prediction.label);
        trajectories.push(prediction.trajectory);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / examples.len().max(1) as f64,
        predictions,
        trajectories,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"NLCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    epoch: u64,
    adam_step: Option<u64>,
}

/// Serialize a model (and optionally optimizer state) to a versioned
/// container: a JSON manifest followed by named, length-prefixed raw
/// little-endian `f32` arrays.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, epoch: u64, optimizer: Option<&AdamState>) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config,
        vocab: model.vocab.tokens().to_vec(),
        epoch,
        adam_step: optimizer.map(|o| o.step),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);

    let mut arrays: Vec<(String, Vec<f32>)> = model
        .store
        .iter()
        .map(|(_, name, _, data)| (name.to_string(), data.to_vec()))
        .collect();
    if let Some(opt) = optimizer {
        let (m, v) = opt.arrays();
        for (id, name, _, _) in model.store.iter() {
            arrays.push((format!("opt.m.{name}"), m[id.index()].clone()));
            arrays.push((format!("opt.v.{name}"), v[id.index()].clone()));
        }
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data) in &arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub model: Model<f32>,
    pub epoch: u64,
    pub optimizer: Option<AdamState>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| NatlogError::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NatlogError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let manifest_len = read_u64(&mut file)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| NatlogError::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(NatlogError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let vocab = Vocab::from_ordered(manifest.vocab.clone())?;
    let mut model: Model<f32> = Model::new(manifest.config, vocab)?;
    let mut optimizer = manifest.adam_step.map(|step| {
        let mut o = AdamState::new(&model.store);
        o.step = step;
        o
    });

    let count = read_u32(&mut file)?;
    for _ in 0..count {
        let name_len = read_u32(&mut file)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)
            .map_err(|_| NatlogError::Checkpoint("truncated array name".into()))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| NatlogError::Checkpoint("array name not utf-8".into()))?;
        let len = read_u64(&mut file)? as usize;
        let mut data = vec![0.0f32; len];
        let mut buf = vec![0u8; len * 4];
        file.read_exact(&mut buf)
            .map_err(|_| NatlogError::Checkpoint(format!("truncated array {name}")))?;
        for (x, chunk) in data.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        if let Some(rest) = name.strip_prefix("opt.m.") {
            if let (Some(opt), Some(id)) = (optimizer.as_mut(), model.store.id(rest)) {
                opt.m[id.index()] = data;
            }
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            if let (Some(opt), Some(id)) = (optimizer.as_mut(), model.store.id(rest)) {
                opt.v[id.index()] = data;
            }
        } else {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| NatlogError::Checkpoint(format!("unknown array {name}")))?;
            if model.store.values(id).len() != data.len() {
                return Err(NatlogError::Checkpoint(format!(
                    "array {name} has {} values, expected {}",
                    data.len(),
                    model.store.values(id).len()
                )));
            }
            model.store.values_mut(id).copy_from_slice(&data);
        }
    }
    Ok(Checkpoint {
        model,
        epoch: manifest.epoch,
        optimizer,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NatlogError::Checkpoint("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| NatlogError::Checkpoint("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Report for one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupGradReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Full gradient-check report.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupGradReport>,
    pub max_rel_err: f64,
    pub eps: f64,
}

fn group_of(name: &str) -> &'static str {
    if name == "embed" {
        "embeddings"
    } else if name.starts_with("enc.") {
        "encoder"
    } else if name.starts_with("bilinear.") {
        "bilinear"
    } else if name.starts_with("mem.") {
        "memory"
    } else if name.starts_with("gate.") {
        "gates"
    } else {
        "other"
    }
}

/// Compare analytic gradients against central finite differences in 64-bit
/// arithmetic, sampling up to `samples_per_group` entries per parameter
/// group. Relative error uses a denominator floor of 1e-6 so near-zero
/// gradient pairs compare absolutely.
pub fn grad_check(
    model: &Model<f64>,
    input: &PredictInput<'_>,
    gold: NliLabel,
    strategy: Strategy,
    eps: f64,
    samples_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_of = |store: &ParamStore<f64>| -> Result<f64> {
        let probe = Model {
            config: model.config,
            vocab: model.vocab.clone(),
            store: store.clone(),
            encoder: model.encoder.clone(),
            bilinear: model.bilinear.clone(),
            aggregation: model.aggregation.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        probe.loss_on(input, gold, strategy, Mode::Eval, &mut rng)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new(&model.store);
    let pass = model.forward(&mut tape, input, strategy, Mode::Eval, &mut rng)?;
    let l = loss(&mut tape, pass.probs, gold);
    let mut grads = Gradients::zeros_like(&model.store);
    tape.backward(l, &mut grads, 1.0);

    // Collect (param, index) slots per group.
    let mut groups: std::collections::BTreeMap<&'static str, Vec<(ParamId, usize)>> = Default::default();
    for (id, name, _, data) in model.store.iter() {
        let slots = groups.entry(group_of(name)).or_default();
        for idx in 0..data.len() {
            slots.push((id, idx));
        }
    }

    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut overall = 0.0f64;
    for (group, mut slots) in groups {
        if slots.len() > samples_per_group {
            for i in 0..samples_per_group {
                let j = sample_rng.gen_range(i..slots.len());
                slots.swap(i, j);
            }
            slots.truncate(samples_per_group);
        }
        let mut worst = GroupGradReport {
            group: group.to_string(),
            checked: slots.len(),
            max_rel_err: 0.0,
            worst_param: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for (id, idx) in slots {
            let mut plus = model.store.clone();
            plus.values_mut(id)[idx] += eps;
            let mut minus = model.store.clone();
            minus.values_mut(id)[idx] -= eps;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * eps);
            let analytic = grads.get(id)[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_param = format!("{}[{idx}]", model.store.name(id));
                worst.worst_analytic = analytic;
                worst.worst_numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_err);
        reports.push(worst);
    }
    Ok(GradCheckReport {
        groups: reports,
        max_rel_err: overall,
        eps,
    })
}

// ---------------------------------------------------------------------------
// Bag-of-embeddings baseline
// ---------------------------------------------------------------------------

/// A deliberately structure-blind baseline: mean premise embedding and mean
/// hypothesis embedding, concatenated, through one linear layer to three
/// label scores. The transfer harness uses it as the contrast model.
#[derive(Debug, Clone)]
pub struct BagBaseline {
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    embed: ParamId,
    w: ParamId,
    b: ParamId,
}

impl BagBaseline {
    pub fn new(vocab: Vocab, dim: usize, seed: u64) -> BagBaseline {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.register_uniform("bag.embed", Shape::Matrix(vocab.len(), dim), 0.1, &mut rng);
        let w = store.register_glorot("bag.w", 3, 2 * dim, &mut rng);
        let b = store.register("bag.b", Shape::Vector(3));
        BagBaseline {
            vocab,
            store,
            embed,
            w,
            b,
        }
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p, f32>, premise: &[String], hypothesis: &[String]) -> Var {
        let mean = |tape: &mut Tape<'p, f32>, tokens: &[String]| {
            let rows: Vec<Var> = tokens.iter().map(|t| tape.embed_row(self.embed, self.vocab.id(t))).collect();
            let uniform = tape.constant(vec![1.0 / rows.len() as f32; rows.len()]);
            tape.weighted_sum(uniform, &rows)
        };
        let p = mean(tape, premise);
        let h = mean(tape, hypothesis);
        let cat = tape.concat(p, h);
        let scores = tape.matvec(self.w, cat);
        let bias = tape.param(self.b);
        let scores = tape.add(scores, bias);
        tape.softmax(scores)
    }

    pub fn predict(&self, premise: &[String], hypothesis: &[String]) -> NliLabel {
        let mut tape = Tape::new(&self.store);
        let probs = self.forward(&mut tape, premise, hypothesis);
        let mut out = [0.0; 3];
        for (o, v) in out.iter_mut().zip(tape.value(probs)) {
            *o = v.as_f64();
        }
        label_from_probs(&out)
    }

    pub fn accuracy(&self, examples: &[PreparedExample]) -> f64 {
        let correct = examples
            .iter()
            .filter(|ex| self.predict(&ex.premise, &ex.hypothesis) == ex.gold)
            .count();
        correct as f64 / examples.len().max(1) as f64
    }
}

/// Train the bag baseline with the same optimizer settings as the model.
pub fn train_baseline(
    train_set: &[PreparedExample],
    dev_set: Option<&[PreparedExample]>,
    dim: usize,
    opts: &TrainOptions,
) -> Result<BagBaseline> {
    if train_set.is_empty() {
        return Err(NatlogError::EmptyDataset);
    }
    let vocab = Vocab::from_corpus(
        train_set
            .iter()
            .flat_map(|ex| [ex.premise.as_slice(), ex.hypothesis.as_slice()]),
    );
    let mut baseline = BagBaseline::new(vocab, dim, opts.seed);
    let mut optimizer = AdamState::new(&baseline.store);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Gradients::zeros_like(&baseline.store);
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    for _epoch in 1..=opts.epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(opts.batch_size) {
            grads.zero();
            let scale = 1.0 / batch.len() as f32;
            for &idx in batch {
                let ex = &train_set[idx];
                let mut tape = Tape::new(&baseline.store);
                let probs = baseline.forward(&mut tape, &ex.premise, &ex.hypothesis);
                let l = loss(&mut tape, probs, ex.gold);
                tape.backward(l, &mut grads, scale);
            }
            if let Some(max_norm) = opts.max_grad_norm {
                clip_gradients(&mut grads, &baseline.store, max_norm);
            }
            optimizer.apply(&mut baseline.store, &grads, opts);
        }
        if let Some(dev) = dev_set {
            let acc = baseline.accuracy(dev);
            let improved = best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true);
            if improved {
                best = Some((acc, baseline.store.clone()));
            }
            if let Some(stop) = opts.early_stop_dev_acc {
                if acc >= stop {
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        baseline.store = store;
    }
    Ok(baseline)
}
