//! End-to-end acceptance checks. Each test prints a single PASS/FAIL
//! line (visible with `--nocapture`) and fails the build on FAIL.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ham::datagen::{self, SynthConfig, TaskKind};
use ham::encoder::{encode_tree, EmbeddingTable, TreeLstmParams};
use ham::memory::{attend_with_scores, MemoryEntry, MemoryParams, MemorySet, Provenance};
use ham::model::{forward, ModelConfig, ModelParams};
use ham::numeric::{kl_divergence, Tape, Tensor};
use ham::training::{self, evaluate, train, Checkpoint, TrainConfig};
use ham::treebank::{validate, DepTree, ProblemSet};

fn report(name: &str, ok: bool, detail: &str) {
    println!("acceptance: {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

#[test]
fn gradient_integrity_over_random_models() {
    let start = Instant::now();
    let reports = ham::cli::random_grad_checks(11, 50, 6, 1e-5).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let all_passed = reports.iter().all(|r| r.passed());
    report(
        "gradient integrity (50 models)",
        all_passed && elapsed.as_secs() < 60,
        &format!("max rel err {worst:.3e}, {:.1}s", elapsed.as_secs_f64()),
    );
}

/// Plain sequential LSTM, written independently of the tape machinery.
fn sequential_lstm(p: &TreeLstmParams, inputs: &[Vec<f64>]) -> Vec<f64> {
    let d = p.b_i.len();
    let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        let (r, c) = w.dims2().unwrap();
        (0..r).map(|i| (0..c).map(|j| w.at2(i, j) * x[j]).sum()).collect()
    };
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    for x in inputs {
        let wi = matvec(&p.w_i, x);
        let ui = matvec(&p.u_i, &h);
        let wo = matvec(&p.w_o, x);
        let uo = matvec(&p.u_o, &h);
        let wf = matvec(&p.w_f, x);
        let uf = matvec(&p.u_f, &h);
        let wu = matvec(&p.w_u, x);
        let uu = matvec(&p.u_u, &h);
        let mut c_next = vec![0.0; d];
        let mut h_next = vec![0.0; d];
        for j in 0..d {
            let i_g = sigmoid(wi[j] + ui[j] + p.b_i.values()[j]);
            let o_g = sigmoid(wo[j] + uo[j] + p.b_o.values()[j]);
            let f_g = sigmoid(wf[j] + uf[j] + p.b_f.values()[j]);
            let u_g = (wu[j] + uu[j] + p.b_u.values()[j]).tanh();
            c_next[j] = i_g * u_g + f_g * c[j];
            h_next[j] = o_g * c_next[j].tanh();
        }
        c = c_next;
        h = h_next;
    }
    h
}

fn chain_tree(tokens: Vec<String>) -> DepTree {
    let n = tokens.len();
    let heads = (0..n).map(|i| if i + 1 == n { 0 } else { i + 2 }).collect();
    validate(tokens, heads).unwrap()
}

#[test]
fn chain_trees_match_sequential_lstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0_f64;
    for draw in 0..50 {
        let len = 1 + draw % 10;
        let d_emb = 3 + draw % 3;
        let d_h = 3 + (draw / 3) % 4;
        let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        let table = EmbeddingTable::random(&words, d_emb, &mut rng);
        let params = TreeLstmParams::random(d_emb, d_h, &mut rng, 1.0);
        let tree = chain_tree(words.clone());

        let mut tape = Tape::new();
        let emb = tape.param("emb", table.vectors().clone());
        let vars = params.register(&mut tape, "tree");
        let states = encode_tree(&mut tape, &tree, &table, emb, &vars).unwrap();
        let tree_h = tape.value(states.root_hidden()).values().to_vec();

        let inputs: Vec<Vec<f64>> = words.iter().map(|w| table.embed(w).to_vec()).collect();
        let seq_h = sequential_lstm(&params, &inputs);

        assert_eq!(tree_h.len(), seq_h.len());
        for (a, b) in tree_h.iter().zip(&seq_h) {
            worst = worst.max((a - b).abs());
        }
    }
    report("chain trees match a sequential LSTM", worst < 1e-12, &format!("max abs diff {worst:.3e}"));
}

fn random_memory(tape: &mut Tape, rng: &mut ChaCha8Rng, t: usize, d: usize) -> MemorySet {
    let entries = (0..t)
        .map(|i| MemoryEntry {
            var: tape.leaf(Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())),
            provenance: Provenance { sentence: i, node: None },
            span: vec![format!("tok{i}")],
            head_token: format!("tok{i}"),
        })
        .collect();
    MemorySet { entries }
}

#[test]
fn attention_normalization_and_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // weights sum to 1 on every hop of real forward passes
    let mut worst_sum_err = 0.0_f64;
    for (i, level) in ["phrase", "sentence"].iter().enumerate() {
        let synth = SynthConfig {
            seed: 40 + i as u64,
            num_problems: 4,
            vocabulary: 16,
            story_len: 4,
            distractors: 3,
            ..SynthConfig::default()
        };
        let problems = datagen::generate(&synth).unwrap();
        let config = ModelConfig {
            d_emb: 6,
            d_h: 6,
            d_mem: 6,
            hops: 2,
            level: level.parse().unwrap(),
            ..ModelConfig::default()
        };
        for (problem, _) in &problems {
            let vocab: Vec<String> = problem
                .story
                .iter()
                .chain(&problem.question)
                .chain(problem.choices.iter().flatten())
                .flat_map(|t| t.tokens().iter().cloned())
                .collect();
            let params = ModelParams::init(&config, &vocab, None, &mut rng).unwrap();
            let pass = forward(&params, &config, problem).unwrap();
            for hop in &pass.trace.hops {
                let sum: f64 = hop.weights.iter().sum();
                worst_sum_err = worst_sum_err.max((sum - 1.0).abs());
                assert!(hop.weights.iter().all(|&w| w > 0.0));
            }
        }
    }

    // query scale invariance and memory permutation invariance
    let d = 5;
    let mut worst_inv = 0.0_f64;
    for _ in 0..20 {
        let mut tape = Tape::new();
        let vars = MemoryParams::random(d, d, &mut rng).register(&mut tape, "mem");
        let mem = random_memory(&mut tape, &mut rng, 6, d);
        let q = tape.leaf(Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let q_scaled = tape.scale(q, 7.25);
        let (sc_a, al_a, s_a) = attend_with_scores(&mut tape, q, &mem, &vars).unwrap();
        let (sc_b, al_b, s_b) = attend_with_scores(&mut tape, q_scaled, &mem, &vars).unwrap();
        for (x, y) in [(sc_a, sc_b), (al_a, al_b), (s_a, s_b)] {
            for (a, b) in tape.value(x).values().iter().zip(tape.value(y).values()) {
                worst_inv = worst_inv.max((a - b).abs());
            }
        }

        let reversed = MemorySet { entries: mem.entries.iter().rev().cloned().collect() };
        let (_, al_r, s_r) = attend_with_scores(&mut tape, q, &reversed, &vars).unwrap();
        let alpha: Vec<f64> = tape.value(al_a).values().to_vec();
        let alpha_r: Vec<f64> = tape.value(al_r).values().to_vec();
        for (a, b) in alpha.iter().zip(alpha_r.iter().rev()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
        for (a, b) in tape.value(s_a).values().iter().zip(tape.value(s_r).values()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
    }

    report(
        "attention normalization and invariance",
        worst_sum_err < 1e-9 && worst_inv < 1e-12,
        &format!("sum err {worst_sum_err:.3e}, invariance err {worst_inv:.3e}"),
    );
}

#[test]
fn divergence_unit_values() {
    let ln2 = kl_divergence(
        &Tensor::vector(vec![1.0, 0.0]),
        &Tensor::vector(vec![0.5, 0.5]),
    )
    .unwrap();
    let err2 = (ln2 - 2.0_f64.ln()).abs();

    let target = ham::answer::target_distribution(4, &BTreeSet::from([0])).unwrap();
    let ln4 = kl_divergence(&target, &Tensor::vector(vec![0.25; 4])).unwrap();
    let err4 = (ln4 - 4.0_f64.ln()).abs();

    report(
        "divergence unit values (ln 2, ln 4)",
        err2 < 1e-12 && err4 < 1e-12,
        &format!("errors {err2:.3e}, {err4:.3e}"),
    );
}

fn locate_dataset() -> (Vec<ProblemSet>, Vec<ProblemSet>) {
    let synth = SynthConfig {
        seed: 7,
        num_problems: 250,
        vocabulary: 16,
        story_len: 4,
        distractors: 3,
        k: 4,
        n: 1,
        task: TaskKind::Locate,
        ..SynthConfig::default()
    };
    let problems: Vec<ProblemSet> =
        datagen::generate(&synth).unwrap().into_iter().map(|(p, _)| p).collect();
    let (train_set, dev_set, _) = datagen::split(&problems, (0.8, 0.2, 0.0), 7).unwrap();
    (train_set, dev_set)
}

fn small_model(dim: usize, hops: usize, level: &str) -> ModelConfig {
    ModelConfig {
        d_emb: dim,
        d_h: dim,
        d_mem: dim,
        hops,
        level: level.parse().unwrap(),
        ..ModelConfig::default()
    }
}

#[test]
fn learns_single_support_task_end_to_end() {
    let start = Instant::now();
    let (train_set, dev_set) = locate_dataset();
    assert_eq!((train_set.len(), dev_set.len()), (200, 50));
    let config = TrainConfig {
        model: small_model(16, 1, "sentence"),
        learning_rate: 0.002,
        epochs: 300,
        seed: 3,
        patience: 300,
        clip_norm: None,
        full_batch: false,
    };
    let out = train(&config, &train_set, &dev_set).unwrap();
    let train_acc = evaluate(&out.params, &config.model, &train_set).unwrap().accuracy;
    let dev_acc = evaluate(&out.params, &config.model, &dev_set).unwrap().accuracy;
    let elapsed = start.elapsed();
    report(
        "single-support task learned end to end",
        train_acc >= 0.95 && dev_acc >= 0.70 && elapsed.as_secs() < 300,
        &format!("train {train_acc:.2}, dev {dev_acc:.2}, {:.0}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn second_hop_helps_on_two_hop_task() {
    let synth = SynthConfig {
        seed: 7,
        num_problems: 250,
        vocabulary: 8,
        story_len: 4,
        distractors: 1,
        k: 2,
        n: 1,
        task: TaskKind::TwoHop,
        ..SynthConfig::default()
    };
    let problems: Vec<ProblemSet> =
        datagen::generate(&synth).unwrap().into_iter().map(|(p, _)| p).collect();
    let (train_set, dev_set, _) = datagen::split(&problems, (0.8, 0.2, 0.0), 7).unwrap();

    let mean_dev = |hops: usize| -> f64 {
        let accs: Vec<f64> = (1..=5)
            .map(|seed| {
                let config = TrainConfig {
                    model: small_model(16, hops, "phrase"),
                    learning_rate: 0.01,
                    epochs: 300,
                    seed,
                    patience: 300,
                    clip_norm: None,
                    full_batch: false,
                };
                let out = train(&config, &train_set, &dev_set).unwrap();
                evaluate(&out.params, &config.model, &dev_set).unwrap().accuracy
            })
            .collect();
        let (mean, _) = training::multi_seed_summary(&accs);
        mean
    };
    let one_hop = mean_dev(1);
    let two_hop = mean_dev(2);
    report(
        "second hop helps on the two-hop task",
        two_hop >= one_hop + 0.05,
        &format!("mean dev over 5 seeds: 1 hop {one_hop:.3}, 2 hops {two_hop:.3}"),
    );
}

#[test]
fn shallow_baselines_stay_near_chance() {
    let (train_set, _) = locate_dataset();
    let vocab: Vec<String> = train_set
        .iter()
        .flat_map(|p| {
            p.story
                .iter()
                .chain(&p.question)
                .chain(p.choices.iter().flatten())
                .flat_map(|t| t.tokens().iter().cloned())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table = EmbeddingTable::random(&vocab, 50, &mut rng);

    let grade = |pick: &dyn Fn(&ProblemSet) -> BTreeSet<usize>| -> f64 {
        let hits = train_set.iter().filter(|p| pick(p) == p.correct).count();
        hits as f64 / train_set.len() as f64
    };
    let qc = grade(&|p| ham::baselines::baseline_question_choice(p, &table));
    let sw = grade(&|p| ham::baselines::baseline_sliding_window(p, &table, 5));
    let near = |acc: f64| (acc - 0.25).abs() <= 0.05;
    report(
        "shallow baselines stay near chance",
        near(qc) && near(sw),
        &format!("question-choice {qc:.3}, sliding-window {sw:.3} vs chance 0.25"),
    );
}

#[test]
fn determinism_and_checkpoint_round_trip() {
    let synth = SynthConfig {
        seed: 9,
        num_problems: 40,
        vocabulary: 16,
        story_len: 4,
        distractors: 3,
        ..SynthConfig::default()
    };
    let problems: Vec<ProblemSet> =
        datagen::generate(&synth).unwrap().into_iter().map(|(p, _)| p).collect();
    let (train_set, dev_set, _) = datagen::split(&problems, (0.8, 0.2, 0.0), 9).unwrap();
    let config = TrainConfig {
        model: small_model(8, 1, "sentence"),
        learning_rate: 0.002,
        epochs: 20,
        seed: 5,
        patience: 20,
        clip_norm: None,
        full_batch: false,
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> (Vec<u8>, training::TrainOutcome) {
        let out = train(&config, &train_set, &dev_set).unwrap();
        let path = dir.path().join(name);
        training::write_metrics_csv(&path, &out.metrics).unwrap();
        (std::fs::read(&path).unwrap(), out)
    };
    let (csv_a, out_a) = run("a.csv");
    let (csv_b, _) = run("b.csv");
    let identical_metrics = csv_a == csv_b;

    let ckpt_path = dir.path().join("model.ckpt");
    Checkpoint::new(config.model.clone(), config.seed, out_a.params.clone())
        .save(&ckpt_path)
        .unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let eval_a = evaluate(&out_a.params, &config.model, &dev_set).unwrap();
    let eval_b = evaluate(&loaded.params, &loaded.config, &dev_set).unwrap();
    let identical_eval = eval_a.accuracy == eval_b.accuracy
        && eval_a
            .records
            .iter()
            .zip(&eval_b.records)
            .all(|(x, y)| x.p_hat == y.p_hat && x.selected == y.selected);

    report(
        "determinism and checkpoint round trip",
        identical_metrics && identical_eval,
        &format!("metrics identical: {identical_metrics}, eval identical: {identical_eval}"),
    );
}

/// Independent validity oracle: exactly one root, heads in range, and
/// every node reachable from the root by following head links downward.
fn oracle_valid(heads: &[usize]) -> bool {
    let n = heads.len();
    if heads.iter().any(|&h| h > n) {
        return false;
    }
    let roots: Vec<usize> = (0..n).filter(|&i| heads[i] == 0).collect();
    if roots.len() != 1 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = vec![roots[0]];
    seen[roots[0]] = true;
    while let Some(j) = queue.pop() {
        for k in 0..n {
            if !seen[k] && heads[k] == j + 1 {
                seen[k] = true;
                queue.push(k);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[test]
fn tree_validation_matches_exhaustive_oracle() {
    let mut checked = 0usize;
    let mut agreed = 0usize;
    for n in 1..=6usize {
        let mut heads = vec![0usize; n];
        loop {
            let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let ours = validate(tokens, heads.clone()).is_ok();
            checked += 1;
            if ours == oracle_valid(&heads) {
                agreed += 1;
            }
            // odometer over head assignments in 0..=n
            let mut i = 0;
            loop {
                if i == n {
                    break;
                }
                heads[i] += 1;
                if heads[i] <= n {
                    break;
                }
                heads[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
    }
    report(
        "tree validation matches the exhaustive oracle",
        checked == agreed,
        &format!("{agreed}/{checked} head assignments agree"),
    );
}
