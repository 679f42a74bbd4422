//! Answer module: score choices against the memory output by cosine
//! similarity, softmax into a predicted distribution, train against the
//! uniform-over-correct target with KL divergence, and select top-N.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, VarId};

/// Concrete per-problem prediction record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub scores: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub p: Vec<f64>,
    pub selected: BTreeSet<usize>,
}

/// Cosine scores and softmax distribution over choice vectors, on the tape.
///
/// Returns (scores, p_hat) nodes.
pub fn score_choices(tape: &mut Tape, q_n: VarId, choices: &[VarId]) -> Result<(VarId, VarId)> {
    if choices.len() < 2 {
        return Err(Error::domain(
            "score_choices",
            format!("need at least 2 choices, got {}", choices.len()),
        ));
    }
    let mut cosines = Vec::with_capacity(choices.len());
    for &c in choices {
        cosines.push(tape.cosine(q_n, c)?);
    }
    let scores = tape.gather(&cosines)?;
    let p_hat = tape.softmax(scores)?;
    Ok((scores, p_hat))
}

/// Target distribution: 1/N on each correct choice, 0 elsewhere.
pub fn target_distribution(k: usize, correct: &BTreeSet<usize>) -> Result<Tensor> {
    let n = correct.len();
    if n == 0 || n >= k {
        return Err(Error::domain(
            "target_distribution",
            format!("need 1 <= |correct| < K, got {n} of {k}"),
        ));
    }
    if let Some(&bad) = correct.iter().find(|&&i| i >= k) {
        return Err(Error::domain("target_distribution", format!("index {bad} out of range")));
    }
    let mut p = vec![0.0; k];
    for &i in correct {
        p[i] = 1.0 / n as f64;
    }
    Ok(Tensor::vector(p))
}

/// Indices of the N largest entries, ties broken by ascending index.
pub fn select(p_hat: &[f64], n: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..p_hat.len()).collect();
    order.sort_by(|&a, &b| {
        p_hat[b]
            .partial_cmp(&p_hat[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.into_iter().take(n).collect()
}

/// KL training loss node for one problem.
pub fn loss(tape: &mut Tape, target: &Tensor, p_hat: VarId) -> Result<VarId> {
    tape.kl_to_target(target, p_hat)
}

/// A prediction is graded correct iff the selected set equals the
/// annotated correct set exactly (no partial credit).
pub fn grade(prediction: &BTreeSet<usize>, correct: &BTreeSet<usize>) -> bool {
    prediction == correct
}
