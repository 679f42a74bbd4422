//! Seeded synthetic multiple-choice comprehension tasks with known
//! ground truth.
//!
//! Two task kinds:
//! - `locate`: exactly one story sentence pairs the question entity with
//!   an attribute; distractor sentences pair other entities with the
//!   attributes used as wrong choices.
//! - `two-hop`: the answer requires chaining two sentences
//!   (entity -> link, link -> attribute); no single sentence determines it.
//!
//! Surface tokens are synthetic symbols (ent3, att1, lnk2, fil0), so no
//! pretrained vectors exist for them. Trees are right-branching chains
//! by default, or seeded random trees with `random_trees`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::treebank::{validate, DepTree, ProblemSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Locate,
    TwoHop,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "locate" => Ok(TaskKind::Locate),
            "two-hop" | "twohop" => Ok(TaskKind::TwoHop),
            other => Err(format!("unknown task {other:?} (expected locate|two-hop)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Locate => write!(f, "locate"),
            TaskKind::TwoHop => write!(f, "two-hop"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_problems: usize,
    /// Total synthetic content-word budget, split across the entity,
    /// attribute, link and filler pools.
    pub vocabulary: usize,
    /// Total story sentences per problem.
    pub story_len: usize,
    /// Extra filler tokens appended inside each pairing sentence.
    pub filler_range: (usize, usize),
    pub k: usize,
    pub n: usize,
    pub task: TaskKind,
    /// Distractor pairings (locate) or distractor chains (two-hop).
    pub distractors: usize,
    /// Seeded random trees instead of right-branching chains.
    pub random_trees: bool,
    /// Probability of replacing a story token with a noise symbol.
    pub token_dropout: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_problems: 100,
            vocabulary: 40,
            story_len: 6,
            filler_range: (0, 0),
            k: 4,
            n: 1,
            task: TaskKind::Locate,
            distractors: 4,
            random_trees: false,
            token_dropout: 0.0,
        }
    }
}

/// Sidecar record: which story sentences support the answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub problem: usize,
    pub support: Vec<usize>,
    pub entity: String,
    pub answers: Vec<String>,
}

struct Pools {
    entities: Vec<String>,
    attributes: Vec<String>,
    links: Vec<String>,
    fillers: Vec<String>,
}

fn pools(config: &SynthConfig) -> Result<Pools> {
    let quarter = config.vocabulary / 4;
    let p = Pools {
        entities: (0..quarter).map(|i| format!("ent{i}")).collect(),
        attributes: (0..quarter).map(|i| format!("att{i}")).collect(),
        links: (0..quarter).map(|i| format!("lnk{i}")).collect(),
        fillers: (0..config.vocabulary - 3 * quarter).map(|i| format!("fil{i}")).collect(),
    };
    let pairings = 1 + config.distractors;
    let need = |pool: &[String], needed: usize, what: &str| -> Result<()> {
        if pool.len() < needed {
            return Err(Error::Generation(format!(
                "vocabulary {} leaves only {} {what} but {} are needed; increase vocabulary",
                config.vocabulary,
                pool.len(),
                needed
            )));
        }
        Ok(())
    };
    need(&p.entities, pairings, "entities")?;
    need(&p.attributes, pairings, "attributes")?;
    if config.task == TaskKind::TwoHop {
        need(&p.links, pairings, "links")?;
    }
    if config.filler_range.1 > 0 {
        need(&p.fillers, 1, "fillers")?;
    }
    Ok(p)
}

fn check_config(config: &SynthConfig) -> Result<()> {
    if config.story_len < 2 {
        return Err(Error::Generation("story length must be >= 2".into()));
    }
    if config.k < 2 || config.n == 0 || config.n >= config.k {
        return Err(Error::Generation(format!(
            "need K >= 2 and 1 <= N < K, got K={} N={}",
            config.k, config.n
        )));
    }
    if config.distractors < config.k - config.n {
        return Err(Error::Generation(format!(
            "{} distractors cannot fill {} wrong choices",
            config.distractors,
            config.k - config.n
        )));
    }
    let support_sentences = match config.task {
        TaskKind::Locate => config.n + config.distractors,
        TaskKind::TwoHop => 2 * (config.n + config.distractors),
    };
    if config.story_len < support_sentences {
        return Err(Error::Generation(format!(
            "story length {} too short for {} pairing sentences",
            config.story_len, support_sentences
        )));
    }
    if config.filler_range.0 > config.filler_range.1 {
        return Err(Error::Generation("bad filler range".into()));
    }
    Ok(())
}

fn make_tree(tokens: Vec<String>, random_trees: bool, rng: &mut ChaCha8Rng) -> DepTree {
    let n = tokens.len();
    let heads = if random_trees && n > 1 {
        // attach each node (in a random order) to a uniformly chosen
        // earlier node of that order; the first is the root
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut heads = vec![0usize; n];
        for (pos, &node) in order.iter().enumerate() {
            if pos == 0 {
                heads[node] = 0;
            } else {
                let parent = order[rng.gen_range(0..pos)];
                heads[node] = parent + 1;
            }
        }
        heads
    } else {
        // right-branching chain: token i headed by i+1, last is root
        (0..n).map(|i| if i + 1 == n { 0 } else { i + 2 }).collect()
    };
    validate(tokens, heads).expect("generated heads form a tree")
}

fn pairing_sentence(
    subject: &str,
    verb: &str,
    object: &str,
    pools: &Pools,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut tokens = vec![subject.to_string(), verb.to_string(), object.to_string()];
    let extra = rng.gen_range(config.filler_range.0..=config.filler_range.1);
    for _ in 0..extra {
        let f = pools.fillers.choose(rng).expect("filler pool checked").clone();
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, f);
    }
    tokens
}

fn apply_dropout(tokens: &mut [String], p: f64, rng: &mut ChaCha8Rng) {
    if p <= 0.0 {
        return;
    }
    for tok in tokens {
        if rng.gen_bool(p) {
            *tok = "zzz".to_string();
        }
    }
}

/// Generate `num_problems` seeded problems with ground-truth metadata.
pub fn generate(config: &SynthConfig) -> Result<Vec<(ProblemSet, GroundTruth)>> {
    check_config(config)?;
    let pools = pools(config)?;
    let mut out = Vec::with_capacity(config.num_problems);
    for idx in 0..config.num_problems {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(idx as u64 + 1);
        out.push(generate_one(config, &pools, idx, &mut rng)?);
    }
    Ok(out)
}

fn generate_one(
    config: &SynthConfig,
    pools: &Pools,
    idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ProblemSet, GroundTruth)> {
    let pairings = config.n + config.distractors;
    let mut entities = pools.entities.clone();
    entities.shuffle(rng);
    let mut attributes = pools.attributes.clone();
    attributes.shuffle(rng);
    let mut links = pools.links.clone();
    links.shuffle(rng);

    // pairing 0..n-1 belong to the query entity (its N answers);
    // the rest are distractors with their own entities
    let query_entity = entities[0].clone();
    let entity_of = |i: usize| -> &str {
        if i < config.n {
            &query_entity
        } else {
            &entities[i - config.n + 1]
        }
    };

    let mut sentences: Vec<(Vec<String>, Option<usize>)> = Vec::new();
    for i in 0..pairings {
        match config.task {
            TaskKind::Locate => {
                let toks = pairing_sentence(entity_of(i), "has", &attributes[i], pools, config, rng);
                sentences.push((toks, Some(i)));
            }
            TaskKind::TwoHop => {
                let first = pairing_sentence(entity_of(i), "rel", &links[i], pools, config, rng);
                let second = pairing_sentence(&links[i], "has", &attributes[i], pools, config, rng);
                sentences.push((first, Some(i)));
                sentences.push((second, Some(i)));
            }
        }
    }
    while sentences.len() < config.story_len {
        let f1 = pools.fillers.choose(rng).cloned().unwrap_or_else(|| "fil0".to_string());
        let f2 = pools.fillers.choose(rng).cloned().unwrap_or_else(|| "fil0".to_string());
        sentences.push((vec![f1, f2], None));
    }
    sentences.shuffle(rng);

    let support: Vec<usize> = sentences
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| matches!(p, Some(i) if *i < config.n))
        .map(|(s, _)| s)
        .collect();

    let story: Vec<DepTree> = sentences
        .into_iter()
        .map(|(mut toks, _)| {
            apply_dropout(&mut toks, config.token_dropout, rng);
            make_tree(toks, config.random_trees, rng)
        })
        .collect();

    let question = vec![make_tree(
        vec!["q".to_string(), query_entity.clone()],
        config.random_trees,
        rng,
    )];

    // choices: the N correct attributes plus wrong ones drawn from the
    // distractor pairings, shuffled into place
    let mut choice_attrs: Vec<(String, bool)> =
        (0..config.n).map(|i| (attributes[i].clone(), true)).collect();
    let mut wrong: Vec<String> = (config.n..pairings).map(|i| attributes[i].clone()).collect();
    wrong.shuffle(rng);
    for a in wrong.into_iter().take(config.k - config.n) {
        choice_attrs.push((a, false));
    }
    choice_attrs.shuffle(rng);

    let correct: BTreeSet<usize> = choice_attrs
        .iter()
        .enumerate()
        .filter(|(_, (_, is_correct))| *is_correct)
        .map(|(i, _)| i)
        .collect();
    let answers: Vec<String> = choice_attrs
        .iter()
        .filter(|(_, c)| *c)
        .map(|(a, _)| a.clone())
        .collect();
    let choices: Vec<Vec<DepTree>> = choice_attrs
        .into_iter()
        .map(|(a, _)| vec![make_tree(vec![a], config.random_trees, rng)])
        .collect();

    let problem = ProblemSet { story, question, choices, correct };
    problem.validate()?;
    let truth = GroundTruth { problem: idx, support, entity: query_entity, answers };
    Ok((problem, truth))
}

/// Seeded shuffle then partition into train/dev/test.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("split", format!("ratios sum to {total}, not 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let cut1 = ((n as f64) * ratios.0).round() as usize;
    let cut2 = ((n as f64) * (ratios.0 + ratios.1)).round() as usize;
    let cut1 = cut1.min(n);
    let cut2 = cut2.clamp(cut1, n);
    let test = shuffled.split_off(cut2);
    let dev = shuffled.split_off(cut1);
    Ok((shuffled, dev, test))
}

/// Brute-force string-matching solver used to certify generated labels.
///
/// Works purely on surface tokens: it finds the story sentence mentioning
/// the question entity and reads off the attribute paired there. With
/// `allow_chaining` it may follow one link token (lnk*) to a second
/// sentence; without it, it is restricted to single sentences.
pub fn string_match_solver(problem: &ProblemSet, allow_chaining: bool) -> BTreeSet<usize> {
    let entity = problem
        .question
        .iter()
        .flat_map(|t| t.tokens())
        .find(|t| t.starts_with("ent"));
    let entity = match entity {
        Some(e) => e,
        None => return BTreeSet::new(),
    };
    let mut attrs: BTreeSet<&String> = BTreeSet::new();
    for tree in &problem.story {
        if !tree.tokens().iter().any(|t| t == entity) {
            continue;
        }
        attrs.extend(tree.tokens().iter().filter(|t| t.starts_with("att")));
        if allow_chaining {
            for link in tree.tokens().iter().filter(|t| t.starts_with("lnk")) {
                for other in &problem.story {
                    if other.tokens().iter().any(|t| t == link) {
                        attrs.extend(other.tokens().iter().filter(|t| t.starts_with("att")));
                    }
                }
            }
        }
    }
    problem
        .choices
        .iter()
        .enumerate()
        .filter(|(_, choice)| {
            choice
                .iter()
                .flat_map(|t| t.tokens())
                .any(|t| attrs.contains(t))
        })
        .map(|(i, _)| i)
        .collect()
}
