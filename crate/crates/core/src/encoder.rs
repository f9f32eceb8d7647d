//! Sentence encoding and cross-sentence alignment.
//!
//! The default encoder is a single-layer bidirectional recurrent network
//! over trainable embeddings. It sits behind the [`SentenceEncoder`] trait
//! so alternative encoders can be injected without touching the rest of the
//! pipeline. Attention uses raw dot products `e_ij = a_i·b_j`; each
//! hypothesis position gets a soft premise summary and a hard alignment
//! indicator saying whether its best-attended premise token is the same
//! word type.

use crate::error::{NatlogError, Result};
use crate::relations::Pooling;
use crate::tape::{ParamId, ParamStore, Scalar, Shape, Tape, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// How aggregation turns raw module-network scores into a per-step
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreUpdate {
    /// Renormalize scores to unit mass at every step (default; keeps long
    /// sequences away from underflow, leaves per-step argmax unchanged).
    #[default]
    #[serde(rename = "renormalize")]
    Renormalize,
    /// Keep raw products and report softmax of the scores, treating them as
    /// logits.
    #[serde(rename = "softmax")]
    SoftmaxLogits,
}

/// Model hyperparameters and semantic flags. Persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word embedding width.
    pub embed_dim: usize,
    /// Encoder output width `d` (split across the two directions).
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    /// Memory network width; defaults to `hidden_dim`.
    pub memory_dim: usize,
    pub dropout_rate: f32,
    pub seed: u64,
    /// Force equivalence on exact-match aligned tokens.
    pub eq_constraint: bool,
    /// Suppress negation and cover in local distributions.
    pub collapse_constraint: bool,
    pub pooling: Pooling,
    pub score_update: ScoreUpdate,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            encoder_layers: 1,
            memory_dim: 64,
            dropout_rate: 0.5,
            seed: 42,
            eq_constraint: true,
            collapse_constraint: true,
            pooling: Pooling::Max,
            score_update: ScoreUpdate::Renormalize,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.memory_dim == 0 || self.encoder_layers == 0 {
            return Err(NatlogError::Config("dimensions and layer count must be positive".into()));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(NatlogError::Config("hidden_dim must be even (two directions)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NatlogError::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Token vocabulary with a reserved unknown slot at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut list: Vec<String> = tokens.into_iter().map(|t| t.to_lowercase()).collect();
        list.sort();
        list.dedup();
        list.retain(|t| t != UNK_TOKEN);
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(list);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Collect the vocabulary of an iterator of sentences.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a [String]>>(sentences: I) -> Vocab {
        Vocab::from_tokens(sentences.into_iter().flatten().cloned())
    }

    /// Rebuild from an already-ordered token list (checkpoint manifests,
    /// vocabulary files). The unknown token must be at index 0.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(NatlogError::Contract(format!(
                "ordered vocabulary must start with the {UNK_TOKEN} token"
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token, with unknown fallback.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Plain-text format: one token per line, in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        Vocab::from_ordered(tokens)
    }
}

/// A pluggable sentence encoder: token ids to one tape vector per token.
pub trait SentenceEncoder<T: Scalar> {
    fn encode(&self, tape: &mut Tape<'_, T>, token_ids: &[usize], mode: Mode, rng: &mut dyn RngCore) -> Vec<Var>;

    /// Output vector width.
    fn output_dim(&self) -> usize;
}

#[derive(Debug, Clone)]
struct Direction {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    fwd: Direction,
    bwd: Direction,
}

/// The default bidirectional recurrent encoder over trainable embeddings.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    pub embed: ParamId,
    layers: Vec<Layer>,
    hidden_dim: usize,
    dropout_rate: f64,
}

impl RecurrentEncoder {
    /// Register all encoder parameters.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> RecurrentEncoder {
        let half = config.hidden_dim / 2;
        let embed = store.register_uniform("embed", Shape::Matrix(vocab_size, config.embed_dim), 0.1, rng);
        let mut layers = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input_dim = if l == 0 { config.embed_dim } else { config.hidden_dim };
            let mut direction = |tag: &str| Direction {
                wx: store.register_glorot(&format!("enc.l{l}.{tag}.wx"), half, input_dim, rng),
                wh: store.register_glorot(&format!("enc.l{l}.{tag}.wh"), half, half, rng),
                bias: store.register(&format!("enc.l{l}.{tag}.b"), Shape::Vector(half)),
            };
            layers.push(Layer {
                fwd: direction("fwd"),
                bwd: direction("bwd"),
            });
        }
        RecurrentEncoder {
            embed,
            layers,
            hidden_dim: config.hidden_dim,
            dropout_rate: config.dropout_rate as f64,
        }
    }

    fn dropout_mask<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, rng: &mut dyn RngCore) -> Var {
        let keep = 1.0 - self.dropout_rate;
        let mask: Vec<f64> = (0..tape.len(x))
            .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mask_const(x, mask)
    }

    fn run_direction<T: Scalar>(&self, tape: &mut Tape<'_, T>, dir: &Direction, inputs: &[Var], reverse: bool) -> Vec<Var> {
        let half = self.hidden_dim / 2;
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        if reverse {
            order.reverse();
        }
        let mut states: Vec<Option<Var>> = vec![None; inputs.len()];
        let mut h = tape.zeros(half);
        for t in order {
            let wx = tape.matvec(dir.wx, inputs[t]);
            let wh = tape.matvec(dir.wh, h);
            let sum = tape.add(wx, wh);
            let bias = tape.param(dir.bias);
            let pre = tape.add(sum, bias);
            h = tape.tanh(pre);
            states[t] = Some(h);
        }
        states.into_iter().map(|s| s.expect("every position visited")).collect()
    }
}

impl<T: Scalar> SentenceEncoder<T> for RecurrentEncoder {
    fn encode(&self, tape: &mut Tape<'_, T>, token_ids: &[usize], mode: Mode, rng: &mut dyn RngCore) -> Vec<Var> {
        assert!(!token_ids.is_empty(), "cannot encode an empty sentence");
        let mut inputs: Vec<Var> = token_ids.iter().map(|&id| tape.embed_row(self.embed, id)).collect();
        if mode == Mode::Train && self.dropout_rate > 0.0 {
            inputs = inputs.into_iter().map(|x| self.dropout_mask(tape, x, rng)).collect();
        }
        for layer in &self.layers {
            let fwd = self.run_direction(tape, &layer.fwd, &inputs, false);
            let bwd = self.run_direction(tape, &layer.bwd, &inputs, true);
            inputs = fwd.into_iter().zip(bwd).map(|(f, b)| tape.concat(f, b)).collect();
        }
        if mode == Mode::Train && self.dropout_rate > 0.0 {
            inputs = inputs.into_iter().map(|x| self.dropout_mask(tape, x, rng)).collect();
        }
        inputs
    }

    fn output_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// A sentence with its per-token tape vectors.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub tokens: Vec<String>,
    pub vectors: Vec<Var>,
}

/// Encode a tokenized sentence through any [`SentenceEncoder`].
pub fn encode_sentence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    encoder: &dyn SentenceEncoder<T>,
    vocab: &Vocab,
    tokens: &[String],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<EncodedSentence> {
    if tokens.is_empty() {
        return Err(NatlogError::Contract("cannot encode an empty sentence".into()));
    }
    let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let vectors = encoder.encode(tape, &ids, mode, rng);
    Ok(EncodedSentence {
        tokens: tokens.to_vec(),
        vectors,
    })
}

/// Cross-sentence attention output for one premise/hypothesis pair.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// Raw attention scores `e[i][j] = a_i · b_j`, premise-major.
    pub scores: Vec<Vec<f64>>,
    /// Per-hypothesis-position softmax weights over premise tokens.
    pub weights: Vec<Var>,
    /// Soft premise summaries, one per hypothesis position.
    pub summaries: Vec<Var>,
    /// Hard alignment indicator per hypothesis position.
    pub hard_indicator: Vec<bool>,
}

/// Compute attention, soft premise summaries, and the hard alignment
/// indicator. The indicator is true when the argmax-attended premise token
/// (ties to the lowest index) is the same word type, case-insensitively.
pub fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    premise: &EncodedSentence,
    hypothesis: &EncodedSentence,
) -> Result<Alignment> {
    let m = premise.vectors.len();
    let n = hypothesis.vectors.len();
    if m == 0 || n == 0 {
        return Err(NatlogError::Contract("attention requires non-empty sentences".into()));
    }
    let mut score_vars = vec![Vec::with_capacity(n); m];
    for i in 0..m {
        for j in 0..n {
            let e = tape.dot(premise.vectors[i], hypothesis.vectors[j]);
            score_vars[i].push(e);
        }
    }
    let scores: Vec<Vec<f64>> = score_vars
        .iter()
        .map(|row| row.iter().map(|v| tape.scalar(*v).as_f64()).collect())
        .collect();

    let mut weights = Vec::with_capacity(n);
    let mut summaries = Vec::with_capacity(n);
    let mut hard_indicator = Vec::with_capacity(n);
    for j in 0..n {
        let column: Vec<Var> = (0..m).map(|i| score_vars[i][j]).collect();
        let stacked = tape.stack(&column);
        let w = tape.softmax(stacked);
        let summary = tape.weighted_sum(w, &premise.vectors);
        weights.push(w);
        summaries.push(summary);

        let mut best = 0;
        for (i, row) in scores.iter().enumerate().skip(1) {
            if row[j] > scores[best][j] {
                best = i;
            }
        }
        let same_type = premise.tokens[best].eq_ignore_ascii_case(&hypothesis.tokens[j]);
        hard_indicator.push(same_type);
    }
    Ok(Alignment {
        scores,
        weights,
        summaries,
        hard_indicator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden_dim: 8,
            memory_dim: 8,
            dropout_rate: 0.5,
            ..ModelConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamStore<f64>, RecurrentEncoder, Vocab) {
        let config = small_config();
        let vocab = Vocab::from_tokens(toks("all no some cats dogs animals run sleep").into_iter());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let encoder = RecurrentEncoder::register(&mut store, &config, vocab.len(), &mut rng);
        (store, encoder, vocab)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.hidden_dim = 63;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.encoder_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_and_shape_preserving() {
        let (store, encoder, vocab) = setup(3);
        let tokens = toks("all cats run");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let a = encode_sentence(&mut tape, &encoder, &vocab, &tokens, Mode::Eval, &mut rng).unwrap();
        let b = encode_sentence(&mut tape, &encoder, &vocab, &tokens, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.vectors.len(), 3);
        for (x, y) in a.vectors.iter().zip(&b.vectors) {
            assert_eq!(tape.value(*x), tape.value(*y));
        }
    }

    #[test]
    fn context_changes_token_vectors() {
        let (store, encoder, vocab) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let a = encode_sentence(&mut tape, &encoder, &vocab, &toks("all cats run"), Mode::Eval, &mut rng).unwrap();
        let b = encode_sentence(&mut tape, &encoder, &vocab, &toks("no cats run"), Mode::Eval, &mut rng).unwrap();
        // Same word, different context: the bidirectional pass must differ.
        assert_ne!(tape.value(a.vectors[1]), tape.value(b.vectors[1]));
    }

    #[test]
    fn unknown_tokens_fall_back_to_unk() {
        let (store, encoder, vocab) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let a = encode_sentence(&mut tape, &encoder, &vocab, &toks("zebras run"), Mode::Eval, &mut rng).unwrap();
        let b = encode_sentence(&mut tape, &encoder, &vocab, &toks("quokkas run"), Mode::Eval, &mut rng).unwrap();
        // Both unknown animals hit the same UNK row, so the encodings agree.
        assert_eq!(tape.value(a.vectors[0]), tape.value(b.vectors[0]));
    }

    #[test]
    fn attention_weights_are_distributions_and_summaries_convex() {
        let (store, encoder, vocab) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let p = encode_sentence(&mut tape, &encoder, &vocab, &toks("all animals run"), Mode::Eval, &mut rng).unwrap();
        let h = encode_sentence(&mut tape, &encoder, &vocab, &toks("all cats sleep"), Mode::Eval, &mut rng).unwrap();
        let align = attend(&mut tape, &p, &h).unwrap();
        for j in 0..3 {
            let w = tape.value(align.weights[j]);
            assert!(w.iter().all(|x| *x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // Summary equals the explicit convex combination.
            let dim = tape.value(p.vectors[0]).len();
            let mut expect = vec![0.0; dim];
            for i in 0..3 {
                let av = tape.value(p.vectors[i]).to_vec();
                for (e, v) in expect.iter_mut().zip(av) {
                    *e += w[i] * v;
                }
            }
            for (got, want) in tape.value(align.summaries[j]).iter().zip(expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_premise_summary_is_that_vector() {
        let (store, encoder, vocab) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&store);
        let p = encode_sentence(&mut tape, &encoder, &vocab, &toks("cats"), Mode::Eval, &mut rng).unwrap();
        let h = encode_sentence(&mut tape, &encoder, &vocab, &toks("some dogs sleep"), Mode::Eval, &mut rng).unwrap();
        let align = attend(&mut tape, &p, &h).unwrap();
        for j in 0..3 {
            assert_eq!(tape.value(align.summaries[j]), tape.value(p.vectors[0]));
        }
    }

    #[test]
    fn hard_indicator_is_scale_invariant_and_type_based() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let pa = tape.constant_f64(&[1.0, 0.0]);
        let pb = tape.constant_f64(&[0.0, 1.0]);
        let ha = tape.constant_f64(&[0.9, 0.1]);
        let hb = tape.constant_f64(&[0.2, 1.1]);
        let premise = EncodedSentence {
            tokens: toks("Cats sleep"),
            vectors: vec![pa, pb],
        };
        let hypothesis = EncodedSentence {
            tokens: toks("cats run"),
            vectors: vec![ha, hb],
        };
        let align = attend(&mut tape, &premise, &hypothesis).unwrap();
        assert_eq!(align.hard_indicator, vec![true, false]); // case-insensitive; "run" != "sleep"

        // Scale every vector by 3: argmax pattern, hence phi, is unchanged.
        let scale = |tape: &mut Tape<'_, f64>, v: Var| {
            let n = tape.len(v);
            tape.mask_const(v, vec![3.0; n])
        };
        let premise2 = EncodedSentence {
            tokens: premise.tokens.clone(),
            vectors: premise.vectors.iter().map(|v| scale(&mut tape, *v)).collect(),
        };
        let hypothesis2 = EncodedSentence {
            tokens: hypothesis.tokens.clone(),
            vectors: hypothesis.vectors.iter().map(|v| scale(&mut tape, *v)).collect(),
        };
        let align2 = attend(&mut tape, &premise2, &hypothesis2).unwrap();
        assert_eq!(align2.hard_indicator, align.hard_indicator);
    }

    #[test]
    fn vocab_round_trip_and_unk() {
        let vocab = Vocab::from_tokens(toks("Cats dogs CATS run").into_iter());
        assert_eq!(vocab.id("cats"), vocab.id("CATS"));
        assert_eq!(vocab.id("zebra"), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded, vocab);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let (store, encoder, vocab) = setup(11);
        let mut rng1 = ChaCha8Rng::seed_from_u64(1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new(&store);
        let a = encode_sentence(&mut tape, &encoder, &vocab, &toks("cats run"), Mode::Train, &mut rng1).unwrap();
        let b = encode_sentence(&mut tape, &encoder, &vocab, &toks("cats run"), Mode::Train, &mut rng2).unwrap();
        // Different dropout masks produce different encodings.
        assert_ne!(tape.value(a.vectors[0]), tape.value(b.vectors[0]));
    }
}
