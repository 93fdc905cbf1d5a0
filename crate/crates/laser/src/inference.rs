//! Test-time self-verification and (weighted) majority voting.

use crate::error::{LaserError, Result};
use crate::selfreward::ScoredSolution;
use serde::Serialize;
use std::collections::BTreeMap;

/// Threshold the self-rewarding score is compared against at test time.
pub const VERIFY_THRESHOLD: f64 = 0.5;

/// Self-verification outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// Verdict from comparing the score against 0.5. Exactly 0.5 counts as
/// incorrect.
pub fn self_verify(r_s: f64) -> Result<Verdict> {
    if !r_s.is_finite() {
        return Err(LaserError::NonFinite(format!("self-reward score {r_s}")));
    }
    if r_s > VERIFY_THRESHOLD {
        Ok(Verdict::Correct)
    } else {
        Ok(Verdict::Incorrect)
    }
}

/// Self-verification accuracy per class and their harmonic mean.
///
/// A class with zero members yields `None` for its accuracy and for the F1.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct F1Report {
    pub acc_correct: Option<f64>,
    pub acc_incorrect: Option<f64>,
    pub f1: Option<f64>,
    pub overall_acc: f64,
}

impl F1Report {
    /// F1 if defined, else the present class's accuracy. Keeps training
    /// metrics finite on one-class batches.
    pub fn f1_or_present_class(&self) -> f64 {
        self.f1
            .or(self.acc_correct)
            .or(self.acc_incorrect)
            .unwrap_or(0.0)
    }
}

/// Computes per-class self-verification accuracy and the F1 score over
/// solutions labeled by the verifier.
pub fn verification_f1(scored: &[ScoredSolution]) -> Result<F1Report> {
    if scored.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let mut n_c = 0usize;
    let mut n_i = 0usize;
    let mut hit_c = 0usize;
    let mut hit_i = 0usize;
    for s in scored {
        let verdict = self_verify(s.r_s)?;
        if s.r_v == 1.0 {
            n_c += 1;
            if verdict == Verdict::Correct {
                hit_c += 1;
            }
        } else {
            n_i += 1;
            if verdict == Verdict::Incorrect {
                hit_i += 1;
            }
        }
    }
    let acc_correct = (n_c > 0).then(|| hit_c as f64 / n_c as f64);
    let acc_incorrect = (n_i > 0).then(|| hit_i as f64 / n_i as f64);
    let f1 = match (acc_correct, acc_incorrect) {
        (Some(a), Some(b)) => Some(if a + b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) }),
        _ => None,
    };
    Ok(F1Report {
        acc_correct,
        acc_incorrect,
        f1,
        overall_acc: (hit_c + hit_i) as f64 / scored.len() as f64,
    })
}

/// One candidate solution entering a vote.
#[derive(Debug, Clone)]
pub struct VoteItem<'a> {
    pub answer: Option<&'a str>,
    pub r_s: f64,
}

/// Aggregated ballot for one distinct answer.
#[derive(Debug, Clone, Serialize)]
pub struct VoteBallot {
    pub answer: String,
    pub count: usize,
    pub weight_sum: f64,
}

fn clamp_weight(r_s: f64) -> f64 {
    r_s.clamp(0.0, 1.0)
}

/// Ballots for the distinct extracted answers, in ascending answer order.
/// Solutions without an answer are excluded; weights are the clamped
/// self-rewarding scores.
pub fn tally(items: &[VoteItem<'_>]) -> Vec<VoteBallot> {
    let mut map: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for item in items {
        if let Some(ans) = item.answer {
            let e = map.entry(ans).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += clamp_weight(item.r_s);
        }
    }
    map.into_iter()
        .map(|(answer, (count, weight_sum))| VoteBallot {
            answer: answer.to_string(),
            count,
            weight_sum,
        })
        .collect()
}

/// Most frequent answer; ties broken by higher total weight, then by the
/// lexicographically smallest answer. `None` when every answer is absent.
pub fn majority_vote(items: &[VoteItem<'_>]) -> Option<String> {
    let ballots = tally(items);
    ballots
        .into_iter()
        .reduce(|best, b| {
            if b.count > best.count || (b.count == best.count && b.weight_sum > best.weight_sum) {
                b
            } else {
                best
            }
        })
        .map(|b| b.answer)
}

/// Highest total clamped-score weight; ties broken by count, then by the
/// lexicographically smallest answer.
pub fn weighted_majority_vote(items: &[VoteItem<'_>]) -> Option<String> {
    let ballots = tally(items);
    ballots
        .into_iter()
        .reduce(|best, b| {
            if b.weight_sum > best.weight_sum
                || (b.weight_sum == best.weight_sum && b.count > best.count)
            {
                b
            } else {
                best
            }
        })
        .map(|b| b.answer)
}
