//! Full model: story/question/choice encoding, multi-hop attention,
//! and the KL-trained answer head, composed on one tape per problem.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{self, AnswerDistribution};
use crate::encoder::{self, EmbeddingTable, NodeStates, TreeLstmParams};
use crate::error::{Error, Result};
use crate::memory::{self, AttentionLevel, AttentionTrace, MemoryParams};
use crate::numeric::{Tape, VarId};
use crate::treebank::ProblemSet;

/// Which scoring path the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Multi-hop attention over the story memory set.
    Attention,
    /// Attention-free baseline: the story/question pair vector is the sum
    /// of all story and question root states, scored directly.
    TreeLstmSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_emb: usize,
    pub d_h: usize,
    pub d_mem: usize,
    pub hops: usize,
    pub level: AttentionLevel,
    /// Share one Tree-LSTM between story, question and choice encoding.
    pub tie_encoders: bool,
    pub train_embeddings: bool,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Attention,
            d_emb: 75,
            d_h: 75,
            d_mem: 75,
            hops: 2,
            level: AttentionLevel::Phrase,
            tie_encoders: true,
            train_embeddings: true,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_h == 0 || self.d_mem == 0 {
            return Err(Error::domain("config", "dimensions must be >= 1"));
        }
        // the answer head compares q_n to raw choice vectors
        if self.d_mem != self.d_h {
            return Err(Error::domain(
                "config",
                format!("d_mem ({}) must equal d_h ({})", self.d_mem, self.d_h),
            ));
        }
        if !(1..=3).contains(&self.hops) {
            return Err(Error::domain("config", format!("hops must be in 1..=3, got {}", self.hops)));
        }
        Ok(())
    }
}

/// All trainable tensors, addressable by stable names for checkpointing
/// and gradient keying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub tree: TreeLstmParams,
    /// Present only when encoders are untied.
    pub tree_question: Option<TreeLstmParams>,
    /// Present only when encoders are untied.
    pub tree_choice: Option<TreeLstmParams>,
    pub memory: MemoryParams,
}

impl ModelParams {
    /// Seeded random initialization over the given vocabulary, or around
    /// a supplied pretrained table.
    pub fn init<R: Rng>(
        config: &ModelConfig,
        vocab: &[String],
        pretrained: Option<EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let embeddings = match pretrained {
            Some(table) => {
                if table.dim() != config.d_emb {
                    return Err(Error::dimension(
                        "init",
                        format!("pretrained dim {} != configured d_emb {}", table.dim(), config.d_emb),
                    ));
                }
                table
            }
            None => EmbeddingTable::random(vocab, config.d_emb, rng),
        };
        let tree = TreeLstmParams::random(config.d_emb, config.d_h, rng, config.forget_bias);
        let (tree_question, tree_choice) = if config.tie_encoders {
            (None, None)
        } else {
            (
                Some(TreeLstmParams::random(config.d_emb, config.d_h, rng, config.forget_bias)),
                Some(TreeLstmParams::random(config.d_emb, config.d_h, rng, config.forget_bias)),
            )
        };
        let memory = MemoryParams::random(config.d_mem, config.d_h, rng);
        Ok(ModelParams { embeddings, tree, tree_question, tree_choice, memory })
    }

    /// Visit every named trainable tensor in a stable order.
    pub fn for_each_named_mut(&mut self, mut f: impl FnMut(&str, &mut crate::numeric::Tensor)) {
        let mut vectors = self.embeddings.vectors().clone();
        f("emb", &mut vectors);
        self.embeddings.set_vectors(vectors);
        for (prefix, params) in [
            ("tree", Some(&mut self.tree)),
            ("tree_q", self.tree_question.as_mut()),
            ("tree_c", self.tree_choice.as_mut()),
        ] {
            if let Some(p) = params {
                for (name, t) in [
                    ("w_i", &mut p.w_i),
                    ("u_i", &mut p.u_i),
                    ("b_i", &mut p.b_i),
                    ("w_o", &mut p.w_o),
                    ("u_o", &mut p.u_o),
                    ("b_o", &mut p.b_o),
                    ("w_f", &mut p.w_f),
                    ("u_f", &mut p.u_f),
                    ("b_f", &mut p.b_f),
                    ("w_u", &mut p.w_u),
                    ("u_u", &mut p.u_u),
                    ("b_u", &mut p.b_u),
                ] {
                    f(&format!("{prefix}.{name}"), t);
                }
            }
        }
        f("mem.w_m", &mut self.memory.w_m);
        f("mem.w_c", &mut self.memory.w_c);
        f("mem.w_q", &mut self.memory.w_q);
    }

    pub fn named_tensors(&self) -> Vec<(String, crate::numeric::Tensor)> {
        let mut out = Vec::new();
        let mut me = self.clone();
        me.for_each_named_mut(|name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Everything produced by one forward pass over one problem.
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: VarId,
    pub q_n: VarId,
    pub trace: AttentionTrace,
    pub distribution: AnswerDistribution,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }
}

/// Run the model end to end on one problem and record the tape.
pub fn forward(params: &ModelParams, config: &ModelConfig, problem: &ProblemSet) -> Result<ForwardPass> {
    problem.validate()?;
    let mut tape = Tape::new();
    let emb = tape.param("emb", params.embeddings.vectors().clone());
    let tree_vars = params.tree.register(&mut tape, "tree");
    let question_vars = match &params.tree_question {
        Some(p) => p.register(&mut tape, "tree_q"),
        None => tree_vars,
    };
    let choice_vars = match &params.tree_choice {
        Some(p) => p.register(&mut tape, "tree_c"),
        None => tree_vars,
    };
    let mem_vars = params.memory.register(&mut tape, "mem");

    let mut story_states: Vec<NodeStates> = Vec::with_capacity(problem.story.len());
    for sentence in &problem.story {
        story_states.push(encoder::encode_tree(&mut tape, sentence, &params.embeddings, emb, &tree_vars)?);
    }
    let v_q = encoder::encode_sentence_set(
        &mut tape,
        &problem.question,
        &params.embeddings,
        emb,
        &question_vars,
    )?;
    let (q_n, trace) = match config.kind {
        ModelKind::Attention => {
            let mem = memory::build_memory(&problem.story, &story_states, config.level)?;
            memory::run_hops(&mut tape, v_q, &mem, &mem_vars, config.hops)?
        }
        ModelKind::TreeLstmSum => {
            // pair vector: sum of every story root plus the question vector
            let _ = mem_vars; // registered for gradient keying, unused here
            let roots: Vec<VarId> = story_states.iter().map(|s| s.root_hidden()).collect();
            let story_sum = tape.add_n(&roots)?;
            let pair = tape.add(story_sum, v_q)?;
            (pair, AttentionTrace { entries: Vec::new(), hops: Vec::new() })
        }
    };

    let mut choice_vectors = Vec::with_capacity(problem.choices.len());
    for choice in &problem.choices {
        choice_vectors.push(encoder::encode_sentence_set(
            &mut tape,
            choice,
            &params.embeddings,
            emb,
            &choice_vars,
        )?);
    }
    let (scores, p_hat) = answer::score_choices(&mut tape, q_n, &choice_vectors)?;
    let target = answer::target_distribution(problem.num_choices(), &problem.correct)?;
    let loss = answer::loss(&mut tape, &target, p_hat)?;

    let p_hat_values = tape.value(p_hat).values().to_vec();
    let selected: BTreeSet<usize> = answer::select(&p_hat_values, problem.num_answers());
    let distribution = AnswerDistribution {
        scores: tape.value(scores).values().to_vec(),
        p_hat: p_hat_values,
        p: target.values().to_vec(),
        selected,
    };
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(ForwardPass { tape, loss, q_n, trace, distribution })
}

/// Predict without caring about the loss (still tapes the pass).
pub fn predict(params: &ModelParams, config: &ModelConfig, problem: &ProblemSet) -> Result<AnswerDistribution> {
    Ok(forward(params, config, problem)?.distribution)
}
