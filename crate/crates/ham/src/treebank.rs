//! Dependency-tree ingestion: a CoNLL-U subset reader, tree validation,
//! and the JSONL problem-set interchange format.
//!
//! Only the FORM and HEAD columns of CoNLL-U are consumed. Heads are
//! 1-based with 0 marking the root, as in the standard format.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rooted dependency tree over a tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDepTree", into = "RawDepTree")]
pub struct DepTree {
    tokens: Vec<String>,
    heads: Vec<usize>,
    root_index: usize,
}

#[derive(Serialize, Deserialize)]
struct RawDepTree {
    tokens: Vec<String>,
    heads: Vec<usize>,
}

impl TryFrom<RawDepTree> for DepTree {
    type Error = Error;
    fn try_from(raw: RawDepTree) -> Result<DepTree> {
        validate(raw.tokens, raw.heads)
    }
}

impl From<DepTree> for RawDepTree {
    fn from(tree: DepTree) -> RawDepTree {
        RawDepTree { tokens: tree.tokens, heads: tree.heads }
    }
}

impl DepTree {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Children of node `j` in ascending token order.
    pub fn children(&self, j: usize) -> Vec<usize> {
        self.heads
            .iter()
            .enumerate()
            .filter(|(_, &h)| h == j + 1)
            .map(|(k, _)| k)
            .collect()
    }

    /// Bottom-up evaluation order: every node appears after all its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![(self.root_index, false)];
        while let Some((j, expanded)) = stack.pop() {
            if expanded {
                order.push(j);
            } else {
                stack.push((j, true));
                for k in self.children(j) {
                    stack.push((k, false));
                }
            }
        }
        order
    }

    /// Token indices of the subtree rooted at `j`, ascending.
    pub fn subtree_span(&self, j: usize) -> Vec<usize> {
        let mut span = Vec::new();
        let mut stack = vec![j];
        while let Some(n) = stack.pop() {
            span.push(n);
            stack.extend(self.children(n));
        }
        span.sort_unstable();
        span
    }
}

/// Check the tree invariants and build a [`DepTree`].
pub fn validate(tokens: Vec<String>, heads: Vec<usize>) -> Result<DepTree> {
    if tokens.is_empty() {
        return Err(Error::Structure("empty sentence".into()));
    }
    if tokens.len() != heads.len() {
        return Err(Error::Structure(format!(
            "{} tokens but {} heads",
            tokens.len(),
            heads.len()
        )));
    }
    let n = tokens.len();
    for (node, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(Error::HeadRange { node, head: h, len: n });
        }
    }
    let roots: Vec<usize> = heads
        .iter()
        .enumerate()
        .filter(|(_, &h)| h == 0)
        .map(|(i, _)| i)
        .collect();
    let root_index = match roots.as_slice() {
        [r] => *r,
        [] => return Err(Error::Structure("no root (no node with head 0)".into())),
        _ => {
            return Err(Error::Structure(format!(
                "multiple roots at token indices {:?}",
                roots
            )))
        }
    };
    // Walk up from every node; exceeding n steps means a cycle.
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while heads[cur] != 0 {
            cur = heads[cur] - 1;
            steps += 1;
            if steps > n {
                return Err(Error::Cycle(start));
            }
        }
    }
    Ok(DepTree { tokens, heads, root_index })
}

/// Parse a CoNLL-U document into one [`DepTree`] per sentence block.
///
/// Comment lines start with `#`; multiword-token ranges (`3-4`) and
/// empty nodes (`3.1`) are skipped. Only FORM and HEAD are retained.
pub fn parse_conllu(text: &str) -> Result<Vec<DepTree>> {
    let mut trees = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut heads: Vec<usize> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                trees.push(validate(std::mem::take(&mut tokens), std::mem::take(&mut heads))?);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 8 {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected at least 8 tab-separated fields, got {}", fields.len()),
            });
        }
        let id = fields[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        if id.parse::<usize>().is_err() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("bad token ID {:?}", id),
            });
        }
        let head: usize = fields[6].parse().map_err(|_| Error::Parse {
            line: lineno,
            detail: format!("bad HEAD field {:?}", fields[6]),
        })?;
        tokens.push(fields[1].to_string());
        heads.push(head);
    }
    if !tokens.is_empty() {
        trees.push(validate(tokens, heads)?);
    }
    Ok(trees)
}

/// Serialize trees back to the CoNLL-U subset (FORM and HEAD populated).
pub fn serialize_conllu(trees: &[DepTree]) -> String {
    let mut out = String::new();
    for tree in trees {
        for (i, (tok, head)) in tree.tokens().iter().zip(tree.heads()).enumerate() {
            out.push_str(&format!("{}\t{}\t_\t_\t_\t_\t{}\t_\t_\t_\n", i + 1, tok, head));
        }
        out.push('\n');
    }
    out
}

/// One multiple-choice comprehension problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub story: Vec<DepTree>,
    pub question: Vec<DepTree>,
    pub choices: Vec<Vec<DepTree>>,
    pub correct: BTreeSet<usize>,
}

impl ProblemSet {
    pub fn validate(&self) -> Result<()> {
        let k = self.choices.len();
        if k < 2 {
            return Err(Error::domain("problem", format!("need at least 2 choices, got {k}")));
        }
        let n = self.correct.len();
        if n == 0 || n >= k {
            return Err(Error::domain(
                "problem",
                format!("need 1 <= |correct| < K, got {n} of {k}"),
            ));
        }
        if let Some(&bad) = self.correct.iter().find(|&&i| i >= k) {
            return Err(Error::domain("problem", format!("correct index {bad} out of range")));
        }
        if self.story.is_empty() || self.question.is_empty() {
            return Err(Error::domain("problem", "story and question must be nonempty"));
        }
        for choice in &self.choices {
            if choice.is_empty() {
                return Err(Error::domain("problem", "every choice needs at least one sentence"));
            }
        }
        Ok(())
    }

    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn num_answers(&self) -> usize {
        self.correct.len()
    }
}

/// Read one JSON problem per line, validating each.
pub fn read_problems(path: &Path) -> Result<Vec<ProblemSet>> {
    let file = std::fs::File::open(path)?;
    let mut problems = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: ProblemSet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        problem.validate()?;
        problems.push(problem);
    }
    Ok(problems)
}

pub fn write_problems(path: &Path, problems: &[ProblemSet]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for p in problems {
        serde_json::to_writer(&mut file, p)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(words: &[&str], heads: &[usize]) -> DepTree {
        validate(words.iter().map(|s| s.to_string()).collect(), heads.to_vec()).unwrap()
    }

    #[test]
    fn parse_minimal_two_token_sentence() {
        let text = "1\tthe\t_\t_\t_\t_\t2\tdet\t_\t_\n2\tcat\t_\t_\t_\t_\t0\troot\t_\t_";
        let trees = parse_conllu(text).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].tokens(), &["the", "cat"]);
        assert_eq!(trees[0].heads(), &[2, 0]);
        assert_eq!(trees[0].root_index(), 1);
    }

    #[test]
    fn parse_empty_input() {
        assert!(parse_conllu("").unwrap().is_empty());
        assert!(parse_conllu("\n\n").unwrap().is_empty());
    }

    #[test]
    fn parse_bad_head_names_line() {
        let text = "1\tthe\t_\t_\t_\t_\tx\tdet\t_\t_";
        match parse_conllu(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn parse_skips_ranges_and_empty_nodes() {
        let text = "# comment\n1-2\tcan't\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    1\tcan\t_\t_\t_\t_\t0\troot\t_\t_\n\
                    1.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    2\tnot\t_\t_\t_\t_\t1\tadvmod\t_\t_";
        let trees = parse_conllu(text).unwrap();
        assert_eq!(trees[0].tokens(), &["can", "not"]);
    }

    #[test]
    fn validate_singleton() {
        let tree = t(&["a"], &[0]);
        assert_eq!(tree.root_index(), 0);
        assert!(tree.children(0).is_empty());
    }

    #[test]
    fn validate_no_root() {
        let r = validate(vec!["a".into(), "b".into()], vec![2, 1]);
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn validate_two_roots() {
        let r = validate(vec!["a".into(), "b".into()], vec![0, 0]);
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn validate_head_out_of_range() {
        let r = validate(vec!["a".into(), "b".into()], vec![0, 5]);
        assert!(matches!(r, Err(Error::HeadRange { .. })));
    }

    #[test]
    fn validate_cycle() {
        let r = validate(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0, 3, 2],
        );
        assert!(matches!(r, Err(Error::Cycle(_))));
    }

    #[test]
    fn children_of_chain() {
        // chain of 4: each token headed by the next
        let tree = t(&["a", "b", "c", "d"], &[2, 3, 4, 0]);
        for j in 1..4 {
            assert_eq!(tree.children(j).len(), 1);
        }
        assert!(tree.children(0).is_empty());
        let total: usize = (0..4).map(|j| tree.children(j).len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn conllu_round_trip() {
        let trees = vec![
            t(&["the", "cat", "sat"], &[2, 3, 0]),
            t(&["go"], &[0]),
        ];
        let text = serialize_conllu(&trees);
        assert_eq!(parse_conllu(&text).unwrap(), trees);
    }

    #[test]
    fn topological_order_is_bottom_up() {
        let tree = t(&["a", "b", "c", "d", "e"], &[3, 3, 0, 3, 4]);
        let order = tree.topological_order();
        assert_eq!(order.len(), 5);
        let pos = |j: usize| order.iter().position(|&x| x == j).unwrap();
        for j in 0..5 {
            for k in tree.children(j) {
                assert!(pos(k) < pos(j));
            }
        }
    }

    #[test]
    fn subtree_span() {
        let tree = t(&["a", "b", "c", "d"], &[2, 4, 4, 0]);
        assert_eq!(tree.subtree_span(1), vec![0, 1]);
        assert_eq!(tree.subtree_span(3), vec![0, 1, 2, 3]);
        assert_eq!(tree.subtree_span(2), vec![2]);
    }
}
