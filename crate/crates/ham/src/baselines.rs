//! Non-neural sanity baselines: question/choice similarity and a sliding
//! window over story sentences, both on averaged word vectors. The
//! attention-free Tree-LSTM baseline lives in the model itself
//! (`ModelKind::TreeLstmSum`).

use std::collections::BTreeSet;

use crate::answer;
use crate::encoder::EmbeddingTable;
use crate::numeric::{cosine, Tensor};
use crate::treebank::{DepTree, ProblemSet};

pub const DEFAULT_WINDOW: usize = 5;

/// Mean of word vectors over a token sequence; out-of-vocabulary tokens
/// contribute the unk row rather than being dropped.
pub fn averaged_vector(sentences: &[DepTree], table: &EmbeddingTable) -> Tensor {
    let d = table.dim();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for tree in sentences {
        for tok in tree.tokens() {
            for (s, v) in sum.iter_mut().zip(table.embed(tok)) {
                *s += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        for s in &mut sum {
            *s /= count as f64;
        }
    }
    Tensor::vector(sum)
}

fn choice_vectors(problem: &ProblemSet, table: &EmbeddingTable) -> Vec<Tensor> {
    problem
        .choices
        .iter()
        .map(|c| averaged_vector(c, table))
        .collect()
}

fn top_n_by_cosine(reference: &Tensor, choices: &[Tensor], n: usize) -> BTreeSet<usize> {
    let scores: Vec<f64> = choices
        .iter()
        .map(|c| cosine(reference, c).unwrap_or(0.0))
        .collect();
    answer::select(&scores, n)
}

/// Baseline (a): pick the top-N choices most similar to the question.
/// Ignores the story entirely.
pub fn baseline_question_choice(problem: &ProblemSet, table: &EmbeddingTable) -> BTreeSet<usize> {
    let q = averaged_vector(&problem.question, table);
    top_n_by_cosine(&q, &choice_vectors(problem, table), problem.num_answers())
}

/// Baseline (b): slide a window of `w` consecutive story sentences
/// (stride 1), pick the window most similar to the question, then the
/// top-N choices most similar to that window. Stories shorter than `w`
/// form a single whole-story window.
pub fn baseline_sliding_window(
    problem: &ProblemSet,
    table: &EmbeddingTable,
    w: usize,
) -> BTreeSet<usize> {
    let w = w.max(1);
    let q = averaged_vector(&problem.question, table);
    let story = &problem.story;
    let windows: Vec<Tensor> = if story.len() <= w {
        vec![averaged_vector(story, table)]
    } else {
        (0..=story.len() - w)
            .map(|start| averaged_vector(&story[start..start + w], table))
            .collect()
    };
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, win) in windows.iter().enumerate() {
        let score = cosine(&q, win).unwrap_or(0.0);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    top_n_by_cosine(&windows[best], &choice_vectors(problem, table), problem.num_answers())
}
