//! Word embeddings and the Child-Sum Tree-LSTM sentence encoder.
//!
//! Each tree node j computes, from its children C(j):
//!   h~_j = Σ_{k∈C(j)} h_k
//!   i_j  = σ(W_i x_j + U_i h~_j + b_i)
//!   o_j  = σ(W_o x_j + U_o h~_j + b_o)
//!   f_jk = σ(W_f x_j + U_f h_k  + b_f)   (one forget gate per child)
//!   u_j  = tanh(W_u x_j + U_u h~_j + b_u)
//!   c_j  = i_j * u_j + Σ_k f_jk * c_k
//!   h_j  = o_j * tanh(c_j)
//! Leaves use a zero child-sum, so the cell reduces to c_j = i_j * u_j.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, VarId};
use crate::treebank::DepTree;

pub const INIT_RANGE: f64 = 0.05;

/// Vocabulary plus embedding matrix. Lookups are lowercased; unknown
/// words map to a shared unk row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocabulary: BTreeMap<String, usize>,
    vectors: Tensor,
    unk_index: usize,
}

impl EmbeddingTable {
    pub fn new(vocabulary: BTreeMap<String, usize>, vectors: Tensor, unk_index: usize) -> Result<Self> {
        let (v, _) = vectors
            .dims2()
            .ok_or_else(|| Error::dimension("embedding", "vectors must be rank 2"))?;
        if unk_index >= v {
            return Err(Error::dimension("embedding", "unk_index out of range"));
        }
        if let Some((w, &i)) = vocabulary.iter().find(|(_, &i)| i >= v) {
            return Err(Error::dimension(
                "embedding",
                format!("vocabulary entry {:?} has row {} >= {}", w, i, v),
            ));
        }
        Ok(EmbeddingTable { vocabulary, vectors, unk_index })
    }

    /// Random table over `words` plus one unk row, uniform(-0.05, 0.05).
    pub fn random<R: Rng>(words: &[String], dim: usize, rng: &mut R) -> Self {
        let mut vocabulary = BTreeMap::new();
        for w in words {
            let next = vocabulary.len();
            vocabulary.entry(w.to_lowercase()).or_insert(next);
        }
        let v = vocabulary.len() + 1;
        let values: Vec<f64> = (0..v * dim).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        EmbeddingTable {
            unk_index: v - 1,
            vocabulary,
            vectors: Tensor::new(vec![v, dim], values).expect("consistent shape"),
        }
    }

    /// Load a pretrained-vector text file: one `word v1 v2 ... vd` line per
    /// word, space-separated. The first line fixes d; disagreeing lines are
    /// rejected. An unk row (mean of all vectors) is appended.
    pub fn load_pretrained(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut vocabulary = BTreeMap::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts
                .next()
                .ok_or_else(|| Error::Parse { line: idx + 1, detail: "empty line".into() })?;
            let vals: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        detail: format!("bad float {:?}", p),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        detail: format!("expected {} floats, got {}", d, vals.len()),
                    })
                }
                _ => {}
            }
            let next = vocabulary.len();
            vocabulary.entry(word.to_lowercase()).or_insert_with(|| {
                rows.extend_from_slice(&vals);
                next
            });
        }
        let d = dim.ok_or_else(|| Error::Parse { line: 0, detail: "empty vector file".into() })?;
        let v = vocabulary.len();
        if v == 0 || d == 0 {
            return Err(Error::Parse { line: 0, detail: "no usable vectors".into() });
        }
        let mut unk = vec![0.0; d];
        for r in 0..v {
            for j in 0..d {
                unk[j] += rows[r * d + j] / v as f64;
            }
        }
        rows.extend_from_slice(&unk);
        EmbeddingTable::new(vocabulary, Tensor::new(vec![v + 1, d], rows)?, v)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims2().expect("rank 2").1
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.dims2().expect("rank 2").0
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index_of(&self, word: &str) -> usize {
        *self
            .vocabulary
            .get(&word.to_lowercase())
            .unwrap_or(&self.unk_index)
    }

    /// Embedding row for `word` (unk row for out-of-vocabulary words).
    pub fn embed(&self, word: &str) -> &[f64] {
        self.vectors.row(self.index_of(word))
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn set_vectors(&mut self, vectors: Tensor) {
        debug_assert_eq!(vectors.shape(), self.vectors.shape());
        self.vectors = vectors;
    }
}

/// Gate weights of the Tree-LSTM: W (input), U (recurrent) and b per
/// gate i, o, f, u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeLstmParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_u: Tensor,
    pub u_u: Tensor,
    pub b_u: Tensor,
}

impl TreeLstmParams {
    /// Uniform(-0.05, 0.05) weights; forget bias 1.0, other biases 0.
    pub fn random<R: Rng>(d_emb: usize, d_h: usize, rng: &mut R, forget_bias: f64) -> Self {
        let mat = |r: usize, c: usize, rng: &mut R| {
            let values = (0..r * c).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            Tensor::new(vec![r, c], values).expect("consistent shape")
        };
        TreeLstmParams {
            w_i: mat(d_h, d_emb, rng),
            u_i: mat(d_h, d_h, rng),
            b_i: Tensor::zeros(&[d_h]),
            w_o: mat(d_h, d_emb, rng),
            u_o: mat(d_h, d_h, rng),
            b_o: Tensor::zeros(&[d_h]),
            w_f: mat(d_h, d_emb, rng),
            u_f: mat(d_h, d_h, rng),
            b_f: Tensor::vector(vec![forget_bias; d_h]),
            w_u: mat(d_h, d_emb, rng),
            u_u: mat(d_h, d_h, rng),
            b_u: Tensor::zeros(&[d_h]),
        }
    }

    pub fn zeros(d_emb: usize, d_h: usize) -> Self {
        TreeLstmParams {
            w_i: Tensor::zeros(&[d_h, d_emb]),
            u_i: Tensor::zeros(&[d_h, d_h]),
            b_i: Tensor::zeros(&[d_h]),
            w_o: Tensor::zeros(&[d_h, d_emb]),
            u_o: Tensor::zeros(&[d_h, d_h]),
            b_o: Tensor::zeros(&[d_h]),
            w_f: Tensor::zeros(&[d_h, d_emb]),
            u_f: Tensor::zeros(&[d_h, d_h]),
            b_f: Tensor::zeros(&[d_h]),
            w_u: Tensor::zeros(&[d_h, d_emb]),
            u_u: Tensor::zeros(&[d_h, d_h]),
            b_u: Tensor::zeros(&[d_h]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_i.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.dims2().expect("rank 2").1
    }
}

/// Tape handles for one registered [`TreeLstmParams`].
#[derive(Debug, Clone, Copy)]
pub struct TreeLstmVars {
    w_i: VarId,
    u_i: VarId,
    b_i: VarId,
    w_o: VarId,
    u_o: VarId,
    b_o: VarId,
    w_f: VarId,
    u_f: VarId,
    b_f: VarId,
    w_u: VarId,
    u_u: VarId,
    b_u: VarId,
}

impl TreeLstmParams {
    /// Register every gate tensor on the tape under `prefix`.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> TreeLstmVars {
        TreeLstmVars {
            w_i: tape.param(&format!("{prefix}.w_i"), self.w_i.clone()),
            u_i: tape.param(&format!("{prefix}.u_i"), self.u_i.clone()),
            b_i: tape.param(&format!("{prefix}.b_i"), self.b_i.clone()),
            w_o: tape.param(&format!("{prefix}.w_o"), self.w_o.clone()),
            u_o: tape.param(&format!("{prefix}.u_o"), self.u_o.clone()),
            b_o: tape.param(&format!("{prefix}.b_o"), self.b_o.clone()),
            w_f: tape.param(&format!("{prefix}.w_f"), self.w_f.clone()),
            u_f: tape.param(&format!("{prefix}.u_f"), self.u_f.clone()),
            b_f: tape.param(&format!("{prefix}.b_f"), self.b_f.clone()),
            w_u: tape.param(&format!("{prefix}.w_u"), self.w_u.clone()),
            u_u: tape.param(&format!("{prefix}.u_u"), self.u_u.clone()),
            b_u: tape.param(&format!("{prefix}.b_u"), self.b_u.clone()),
        }
    }
}

/// Per-node hidden and cell state handles for one encoded tree.
#[derive(Debug, Clone)]
pub struct NodeStates {
    pub hidden: Vec<VarId>,
    pub cell: Vec<VarId>,
    root: usize,
}

impl NodeStates {
    pub fn root_hidden(&self) -> VarId {
        self.hidden[self.root]
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

fn gate(
    tape: &mut Tape,
    w: VarId,
    x: VarId,
    u: VarId,
    h: VarId,
    b: VarId,
) -> Result<VarId> {
    let wx = tape.matvec(w, x)?;
    let uh = tape.matvec(u, h)?;
    let sum = tape.add(wx, uh)?;
    tape.add(sum, b)
}

/// Encode one dependency tree bottom-up.
pub fn encode_tree(
    tape: &mut Tape,
    tree: &DepTree,
    table: &EmbeddingTable,
    emb_var: VarId,
    vars: &TreeLstmVars,
) -> Result<NodeStates> {
    let d_h = tape.value(vars.b_i).len();
    let n = tree.len();
    let mut hidden: Vec<Option<VarId>> = vec![None; n];
    let mut cell: Vec<Option<VarId>> = vec![None; n];
    for j in tree.topological_order() {
        let x = tape.row(emb_var, table.index_of(&tree.tokens()[j]));
        let children = tree.children(j);
        let child_h: Vec<VarId> = children.iter().map(|&k| hidden[k].expect("bottom-up")).collect();
        let h_tilde = if child_h.is_empty() {
            tape.leaf(Tensor::zeros(&[d_h]))
        } else {
            tape.add_n(&child_h)?
        };
        let i_pre = gate(tape, vars.w_i, x, vars.u_i, h_tilde, vars.b_i)?;
        let i_gate = tape.sigmoid(i_pre);
        let o_pre = gate(tape, vars.w_o, x, vars.u_o, h_tilde, vars.b_o)?;
        let o_gate = tape.sigmoid(o_pre);
        let u_pre = gate(tape, vars.w_u, x, vars.u_u, h_tilde, vars.b_u)?;
        let u_val = tape.tanh(u_pre);

        let mut cell_terms = vec![tape.mul_elem(i_gate, u_val)?];
        for &k in &children {
            let f_pre = gate(tape, vars.w_f, x, vars.u_f, hidden[k].expect("bottom-up"), vars.b_f)?;
            let f_gate = tape.sigmoid(f_pre);
            cell_terms.push(tape.mul_elem(f_gate, cell[k].expect("bottom-up"))?);
        }
        let c = tape.add_n(&cell_terms)?;
        let c_tanh = tape.tanh(c);
        let h = tape.mul_elem(o_gate, c_tanh)?;
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite(format!("hidden state at node {j}")));
        }
        hidden[j] = Some(h);
        cell[j] = Some(c);
    }
    Ok(NodeStates {
        hidden: hidden.into_iter().map(|h| h.expect("all nodes visited")).collect(),
        cell: cell.into_iter().map(|c| c.expect("all nodes visited")).collect(),
        root: tree.root_index(),
    })
}

/// Sum of root hidden states over a sentence sequence (the question
/// vector, and likewise each choice vector).
pub fn encode_sentence_set(
    tape: &mut Tape,
    sentences: &[DepTree],
    table: &EmbeddingTable,
    emb_var: VarId,
    vars: &TreeLstmVars,
) -> Result<VarId> {
    if sentences.is_empty() {
        return Err(Error::domain("encode_sentence_set", "empty sentence sequence"));
    }
    let mut roots = Vec::with_capacity(sentences.len());
    for s in sentences {
        let states = encode_tree(tape, s, table, emb_var, vars)?;
        roots.push(states.root_hidden());
    }
    tape.add_n(&roots)
}
