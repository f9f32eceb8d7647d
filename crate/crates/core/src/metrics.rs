//! Evaluation: label accuracy, aggregation-path precision/recall/F1, and
//! the upward-to-downward transfer harness.
//!
//! An aggregation *event* happens at step `t` when the running relation
//! changes (`z_t != z_{t-1}`, with `z_0` equivalence, so an equivalence
//! first step is never counted). A predicted event is correct when the gold
//! sequence has an event at the same step with the same resulting relation.

use crate::dataset::Direction;
use crate::encoder::ModelConfig;
use crate::error::{NatlogError, Result};
use crate::relations::{NliLabel, Relation, ALL_LABELS};
use crate::train::{evaluate, train, train_baseline, Model, PreparedExample, TrainOptions};
use serde::Serialize;
use std::collections::BTreeMap;

/// Fraction of matching labels.
pub fn accuracy(predictions: &[NliLabel], golds: &[NliLabel]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(NatlogError::Dimension {
            expected: golds.len(),
            got: predictions.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Aggregation events of one state sequence: `(step, new_relation)` at
/// every change point. Steps are 1-based.
pub fn events(states: &[Relation]) -> Vec<(usize, Relation)> {
    let mut out = Vec::new();
    let mut prev = Relation::Equivalence;
    for (i, &z) in states.iter().enumerate() {
        if z != prev {
            out.push((i + 1, z));
            prev = z;
        }
    }
    out
}

/// Precision, recall, and F1 over aggregation events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted_events: usize,
    pub gold_events: usize,
    pub correct_events: usize,
}

/// Compare predicted per-step relation sequences with gold sequences.
/// An event counts as correct only when both its step and its resulting
/// relation match; 0/0 ratios are 0 by convention.
pub fn aggregation_prf(predicted: &[Vec<Relation>], gold: &[Vec<Relation>]) -> Result<PrfScores> {
    if predicted.len() != gold.len() {
        return Err(NatlogError::Dimension {
            expected: gold.len(),
            got: predicted.len(),
        });
    }
    let mut predicted_events = 0usize;
    let mut gold_events = 0usize;
    let mut correct = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(NatlogError::Dimension {
                expected: g.len(),
                got: p.len(),
            });
        }
        let pe = events(p);
        let ge = events(g);
        predicted_events += pe.len();
        gold_events += ge.len();
        correct += pe.iter().filter(|e| ge.contains(e)).count();
    }
    let precision = if predicted_events == 0 {
        0.0
    } else {
        correct as f64 / predicted_events as f64
    };
    let recall = if gold_events == 0 {
        0.0
    } else {
        correct as f64 / gold_events as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrfScores {
        precision,
        recall,
        f1,
        predicted_events,
        gold_events,
        correct_events: correct,
    })
}

/// Per-label tallies for an evaluation.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ClassCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// The JSON evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_counts: BTreeMap<String, ClassCounts>,
    pub up_dev_acc: Option<f64>,
    pub down_test_acc: Option<f64>,
}

/// Assemble the report from labels plus (optionally) trajectory scores.
pub fn eval_report(
    predictions: &[NliLabel],
    golds: &[NliLabel],
    prf: Option<PrfScores>,
) -> Result<EvalReport> {
    let acc = accuracy(predictions, golds)?;
    let mut per_class: BTreeMap<String, ClassCounts> = ALL_LABELS
        .iter()
        .map(|l| (l.token().to_string(), ClassCounts::default()))
        .collect();
    for (p, g) in predictions.iter().zip(golds) {
        per_class.get_mut(g.token()).unwrap().gold += 1;
        per_class.get_mut(p.token()).unwrap().predicted += 1;
        if p == g {
            per_class.get_mut(p.token()).unwrap().correct += 1;
        }
    }
    let prf = prf.unwrap_or(PrfScores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        predicted_events: 0,
        gold_events: 0,
        correct_events: 0,
    });
    Ok(EvalReport {
        accuracy: acc,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        per_class_counts: per_class,
        up_dev_acc: None,
        down_test_acc: None,
    })
}

/// Transfer harness output.
#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub up_dev_acc: f64,
    pub down_test_acc: f64,
    pub gap: f64,
    /// Downward accuracy of the bag-of-embeddings contrast model, when run.
    pub baseline_down_acc: Option<f64>,
}

/// Result of a transfer run: the trained model plus the report.
pub struct TransferOutcome {
    pub model: Model<f32>,
    pub report: TransferReport,
}

fn check_direction(examples: &[PreparedExample], want: Direction, split: &str) -> Result<()> {
    for ex in examples {
        if ex.direction != want {
            return Err(NatlogError::Contract(format!(
                "{split} split contains a {:?} example; expected {want:?}",
                ex.direction
            )));
        }
    }
    Ok(())
}

/// Train on upward-monotone data, select on upward dev, and test on the
/// downward split. Optionally trains the bag-of-embeddings baseline on the
/// same upward data for contrast.
pub fn transfer_eval(
    train_up: &[PreparedExample],
    dev_up: &[PreparedExample],
    test_down: &[PreparedExample],
    config: ModelConfig,
    opts: &TrainOptions,
    with_baseline: bool,
) -> Result<TransferOutcome> {
    check_direction(train_up, Direction::Upward, "train")?;
    check_direction(dev_up, Direction::Upward, "dev")?;
    check_direction(test_down, Direction::Downward, "test")?;

    let out = train(train_up, Some(dev_up), config, opts)?;
    let up_dev_acc = evaluate(&out.model, dev_up, opts.strategy)?.accuracy;
    let down_test_acc = evaluate(&out.model, test_down, opts.strategy)?.accuracy;
    let baseline_down_acc = if with_baseline {
        let baseline = train_baseline(train_up, Some(dev_up), config.embed_dim, opts)?;
        Some(baseline.accuracy(test_down))
    } else {
        None
    };
    Ok(TransferOutcome {
        model: out.model,
        report: TransferReport {
            up_dev_acc,
            down_test_acc,
            gap: up_dev_acc - down_test_acc,
            baseline_down_acc,
        },
    })
}
