//! Memory module: phrase- or sentence-level memory sets over the story,
//! cosine-softmax attention, and multi-hop query refinement.
//!
//! For memory entries o_t, each hop computes
//!   m_t = W_m o_t,  c_t = W_c o_t,
//!   η_t = cos(q, m_t),  α = softmax(η),  s = Σ_t α_t c_t,
//! then advances the query with q ← q + s. The initial query is
//! q_0 = W_q V_Q.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{NodeStates, INIT_RANGE};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, VarId};
use crate::treebank::DepTree;

/// Granularity of the memory set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionLevel {
    /// One entry per tree node of every story sentence.
    Phrase,
    /// One entry per story sentence (root hidden state).
    Sentence,
}

impl std::str::FromStr for AttentionLevel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "phrase" => Ok(AttentionLevel::Phrase),
            "sentence" => Ok(AttentionLevel::Sentence),
            other => Err(format!("unknown attention level {other:?} (expected phrase|sentence)")),
        }
    }
}

impl std::fmt::Display for AttentionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionLevel::Phrase => write!(f, "phrase"),
            AttentionLevel::Sentence => write!(f, "sentence"),
        }
    }
}

/// The projection matrices of the memory module, shared across hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryParams {
    pub w_m: Tensor,
    pub w_c: Tensor,
    pub w_q: Tensor,
}

impl MemoryParams {
    pub fn random<R: Rng>(d_mem: usize, d_h: usize, rng: &mut R) -> Self {
        let mat = |rng: &mut R| {
            let values = (0..d_mem * d_h).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            Tensor::new(vec![d_mem, d_h], values).expect("consistent shape")
        };
        MemoryParams { w_m: mat(rng), w_c: mat(rng), w_q: mat(rng) }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> MemoryVars {
        MemoryVars {
            w_m: tape.param(&format!("{prefix}.w_m"), self.w_m.clone()),
            w_c: tape.param(&format!("{prefix}.w_c"), self.w_c.clone()),
            w_q: tape.param(&format!("{prefix}.w_q"), self.w_q.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub w_m: VarId,
    pub w_c: VarId,
    pub w_q: VarId,
}

/// Where a memory entry came from: a story sentence and either a tree
/// node (phrase level) or the sentence root (sentence level).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sentence: usize,
    /// `None` marks a sentence-level entry (the root).
    pub node: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub var: VarId,
    pub provenance: Provenance,
    /// Surface tokens of the subtree (whole sentence at sentence level).
    pub span: Vec<String>,
    /// Surface form of the head token of the span.
    pub head_token: String,
}

#[derive(Debug, Clone)]
pub struct MemorySet {
    pub entries: Vec<MemoryEntry>,
}

impl MemorySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Build the memory set from per-sentence encoder states, in
/// sentence-major then token-index order.
pub fn build_memory(
    story: &[DepTree],
    story_states: &[NodeStates],
    level: AttentionLevel,
) -> Result<MemorySet> {
    if story.is_empty() || story.len() != story_states.len() {
        return Err(Error::domain(
            "build_memory",
            format!("{} sentences with {} state sets", story.len(), story_states.len()),
        ));
    }
    let mut entries = Vec::new();
    for (si, (tree, states)) in story.iter().zip(story_states).enumerate() {
        match level {
            AttentionLevel::Phrase => {
                for j in 0..tree.len() {
                    let span = tree
                        .subtree_span(j)
                        .into_iter()
                        .map(|t| tree.tokens()[t].clone())
                        .collect();
                    entries.push(MemoryEntry {
                        var: states.hidden[j],
                        provenance: Provenance { sentence: si, node: Some(j) },
                        span,
                        head_token: tree.tokens()[j].clone(),
                    });
                }
            }
            AttentionLevel::Sentence => {
                entries.push(MemoryEntry {
                    var: states.root_hidden(),
                    provenance: Provenance { sentence: si, node: None },
                    span: tree.tokens().to_vec(),
                    head_token: tree.tokens()[tree.root_index()].clone(),
                });
            }
        }
    }
    Ok(MemorySet { entries })
}

/// One hop of the attention trace, as concrete values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HopTrace {
    pub query: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub story_vector: Vec<f64>,
}

/// Provenance-annotated record of every hop of one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub entries: Vec<TraceEntry>,
    pub hops: Vec<HopTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub provenance: Provenance,
    pub span: Vec<String>,
    pub head_token: String,
}

/// One attention step over the memory set.
///
/// Returns the attention weight node and the story vector node.
pub fn attend(
    tape: &mut Tape,
    q: VarId,
    mem: &MemorySet,
    vars: &MemoryVars,
) -> Result<(VarId, VarId)> {
    let (_, alpha, s) = attend_with_scores(tape, q, mem, vars)?;
    Ok((alpha, s))
}

/// Like [`attend`] but also returns the raw score node.
pub fn attend_with_scores(
    tape: &mut Tape,
    q: VarId,
    mem: &MemorySet,
    vars: &MemoryVars,
) -> Result<(VarId, VarId, VarId)> {
    if mem.is_empty() {
        return Err(Error::domain("attend", "empty memory set"));
    }
    let mut etas = Vec::with_capacity(mem.len());
    let mut evidence = Vec::with_capacity(mem.len());
    for entry in &mem.entries {
        let m_t = tape.matvec(vars.w_m, entry.var)?;
        let c_t = tape.matvec(vars.w_c, entry.var)?;
        etas.push(tape.cosine(q, m_t)?);
        evidence.push(c_t);
    }
    let scores = tape.gather(&etas)?;
    let alpha = tape.softmax(scores)?;
    let s = tape.weighted_sum(alpha, &evidence)?;
    Ok((scores, alpha, s))
}

/// Run `hops` rounds of attention starting from q_0 = W_q V_Q,
/// advancing q_{i+1} = q_i + s_i. Returns the final query node and the
/// full trace.
pub fn run_hops(
    tape: &mut Tape,
    v_q: VarId,
    mem: &MemorySet,
    vars: &MemoryVars,
    hops: usize,
) -> Result<(VarId, AttentionTrace)> {
    if hops < 1 {
        return Err(Error::domain("run_hops", "hop count must be >= 1"));
    }
    let mut q = tape.matvec(vars.w_q, v_q)?;
    let mut hop_traces = Vec::with_capacity(hops);
    for _ in 0..hops {
        let (scores, alpha, s) = attend_with_scores(tape, q, mem, vars)?;
        hop_traces.push(HopTrace {
            query: tape.value(q).values().to_vec(),
            scores: tape.value(scores).values().to_vec(),
            weights: tape.value(alpha).values().to_vec(),
            story_vector: tape.value(s).values().to_vec(),
        });
        q = tape.add(q, s)?;
    }
    let trace = AttentionTrace {
        entries: mem
            .entries
            .iter()
            .map(|e| TraceEntry {
                provenance: e.provenance.clone(),
                span: e.span.clone(),
                head_token: e.head_token.clone(),
            })
            .collect(),
        hops: hop_traces,
    };
    Ok((q, trace))
}

/// Top-k memory entries of one hop, by descending weight with ties
/// broken by ascending memory index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopAttention {
    pub index: usize,
    pub weight: f64,
    pub provenance: Provenance,
    pub span: Vec<String>,
    pub head_token: String,
}

pub fn top_k_attention(trace: &AttentionTrace, k: usize) -> Vec<Vec<TopAttention>> {
    trace
        .hops
        .iter()
        .map(|hop| {
            let mut order: Vec<usize> = (0..hop.weights.len()).collect();
            order.sort_by(|&a, &b| {
                hop.weights[b]
                    .partial_cmp(&hop.weights[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order
                .into_iter()
                .take(k)
                .map(|i| TopAttention {
                    index: i,
                    weight: hop.weights[i],
                    provenance: trace.entries[i].provenance.clone(),
                    span: trace.entries[i].span.clone(),
                    head_token: trace.entries[i].head_token.clone(),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mem_from_vectors(tape: &mut Tape, vectors: &[Vec<f64>]) -> MemorySet {
        let entries = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| MemoryEntry {
                var: tape.leaf(Tensor::vector(v.clone())),
                provenance: Provenance { sentence: i, node: None },
                span: vec![format!("tok{i}")],
                head_token: format!("tok{i}"),
            })
            .collect();
        MemorySet { entries }
    }

    fn identity_vars(tape: &mut Tape, d: usize) -> MemoryVars {
        MemoryVars {
            w_m: tape.param("mem.w_m", Tensor::identity(d)),
            w_c: tape.param("mem.w_c", Tensor::identity(d)),
            w_q: tape.param("mem.w_q", Tensor::identity(d)),
        }
    }

    #[test]
    fn attend_identical_memories_uniform() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let mem = mem_from_vectors(&mut tape, &vec![vec![1.0, 2.0]; 3]);
        let q = tape.leaf(Tensor::vector(vec![0.3, 0.7]));
        let (alpha, s) = attend(&mut tape, q, &mem, &vars).unwrap();
        for &a in tape.value(alpha).values() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for (sv, cv) in tape.value(s).values().iter().zip(&[1.0, 2.0]) {
            assert!((sv - cv).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_singleton() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let mem = mem_from_vectors(&mut tape, &[vec![0.5, -0.5]]);
        let q = tape.leaf(Tensor::vector(vec![9.0, 9.0]));
        let (alpha, s) = attend(&mut tape, q, &mem, &vars).unwrap();
        assert_eq!(tape.value(alpha).values(), &[1.0]);
        assert_eq!(tape.value(s).values(), &[0.5, -0.5]);
    }

    #[test]
    fn attend_orthonormal_memories() {
        // memories e1, e2, e3, query e2: eta = (0, 1, 0)
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 3);
        let mem = mem_from_vectors(
            &mut tape,
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        );
        let q = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let (alpha, _) = attend(&mut tape, q, &mem, &vars).unwrap();
        let a = tape.value(alpha).values();
        assert!((a[0] - 0.2119).abs() < 1e-4);
        assert!((a[1] - 0.5761).abs() < 1e-4);
        assert!((a[2] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn run_hops_single_hop_shape() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let mem = mem_from_vectors(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v_q = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let (q1, trace) = run_hops(&mut tape, v_q, &mem, &vars, 1).unwrap();
        assert_eq!(trace.hops.len(), 1);
        // q_1 = q_0 + s_0
        let q0 = &trace.hops[0].query;
        let s0 = &trace.hops[0].story_vector;
        for ((qv, q0v), s0v) in tape.value(q1).values().iter().zip(q0).zip(s0) {
            assert!((qv - (q0v + s0v)).abs() < 1e-12);
        }
    }

    #[test]
    fn run_hops_zero_evidence_keeps_query() {
        let mut tape = Tape::new();
        let vars = MemoryVars {
            w_m: tape.param("mem.w_m", Tensor::identity(2)),
            w_c: tape.param("mem.w_c", Tensor::zeros(&[2, 2])),
            w_q: tape.param("mem.w_q", Tensor::identity(2)),
        };
        let mem = mem_from_vectors(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v_q = tape.leaf(Tensor::vector(vec![0.4, 0.6]));
        let (q3, _) = run_hops(&mut tape, v_q, &mem, &vars, 3).unwrap();
        assert_eq!(tape.value(q3).values(), &[0.4, 0.6]);
    }

    #[test]
    fn run_hops_rejects_zero_hops() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let mem = mem_from_vectors(&mut tape, &[vec![1.0, 0.0]]);
        let v_q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(run_hops(&mut tape, v_q, &mem, &vars, 0).is_err());
    }

    #[test]
    fn two_hop_matches_step_by_step_recomputation() {
        // independent eager recomputation of the same recurrence
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let params = MemoryParams::random(d, d, &mut rng);
        let mems: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let vq: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, "mem");
        let mem = mem_from_vectors(&mut tape, &mems);
        let v_q = tape.leaf(Tensor::vector(vq.clone()));
        let (q2, _) = run_hops(&mut tape, v_q, &mem, &vars, 2).unwrap();

        // eager re-evaluation
        let zero = Tensor::zeros(&[d]);
        let mv = |w: &Tensor, x: &[f64]| {
            crate::numeric::affine(w, &Tensor::vector(x.to_vec()), &zero).unwrap()
        };
        let mut q = mv(&params.w_q, &vq).values().to_vec();
        for _ in 0..2 {
            let etas: Vec<f64> = mems
                .iter()
                .map(|o| {
                    crate::numeric::cosine(&Tensor::vector(q.clone()), &mv(&params.w_m, o)).unwrap()
                })
                .collect();
            let alpha = crate::numeric::softmax(&Tensor::vector(etas)).unwrap();
            let mut s = vec![0.0; d];
            for (t, o) in mems.iter().enumerate() {
                let c = mv(&params.w_c, o);
                for (sv, cv) in s.iter_mut().zip(c.values()) {
                    *sv += alpha.values()[t] * cv;
                }
            }
            for (qv, sv) in q.iter_mut().zip(&s) {
                *qv += sv;
            }
        }
        for (a, b) in tape.value(q2).values().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_tie_break_and_saturation() {
        let trace = AttentionTrace {
            entries: (0..3)
                .map(|i| TraceEntry {
                    provenance: Provenance { sentence: i, node: None },
                    span: vec![format!("s{i}")],
                    head_token: format!("s{i}"),
                })
                .collect(),
            hops: vec![
                HopTrace {
                    query: vec![],
                    scores: vec![],
                    weights: vec![1.0 / 3.0; 3],
                    story_vector: vec![],
                },
                HopTrace {
                    query: vec![],
                    scores: vec![],
                    weights: vec![0.1, 0.7, 0.2],
                    story_vector: vec![],
                },
            ],
        };
        let top = top_k_attention(&trace, 2);
        // uniform hop: tie-break keeps ascending indices
        assert_eq!(top[0][0].index, 0);
        assert_eq!(top[0][1].index, 1);
        // ordered hop
        assert_eq!(top[1][0].index, 1);
        assert_eq!(top[1][1].index, 2);
        // saturation
        let all = top_k_attention(&trace, 10);
        assert_eq!(all[1].len(), 3);
    }
}
