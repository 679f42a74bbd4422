//! AdaGrad optimization, the training loop with dev-split model
//! selection, evaluation, gradient checking, and checkpoint I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::treebank::ProblemSet;

pub const ADAGRAD_EPSILON: f64 = 1e-8;

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaGradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    accumulators: BTreeMap<String, Tensor>,
}

impl AdaGradState {
    pub fn new(learning_rate: f64) -> Self {
        AdaGradState { learning_rate, epsilon: ADAGRAD_EPSILON, accumulators: BTreeMap::new() }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.accumulators.get(name)
    }
}

/// One AdaGrad update: acc += g², θ -= η·g/(√acc + ε).
///
/// Every named parameter must have a gradient; parameters listed in
/// `frozen` keep their values but are still checked for presence.
pub fn adagrad_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdaGradState,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    let mut missing = Vec::new();
    params.for_each_named_mut(|name, tensor| {
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                missing.push(name.to_string());
                return;
            }
        };
        let acc = state
            .accumulators
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(tensor.shape()));
        if frozen.contains(name) {
            return;
        }
        for (i, (theta, gv)) in tensor
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .enumerate()
        {
            let a = &mut acc.values_mut()[i];
            *a += gv * gv;
            *theta -= state.learning_rate * gv / (a.sqrt() + state.epsilon);
        }
    });
    if !missing.is_empty() {
        return Err(Error::domain(
            "adagrad_step",
            format!("missing gradients for {:?}", missing),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Accumulate the mean gradient over the whole set before updating,
    /// instead of per-example updates.
    pub full_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 0.002,
            epochs: 100,
            seed: 0,
            patience: 25,
            clip_norm: None,
            full_batch: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub problem: usize,
    pub p_hat: Vec<f64>,
    pub selected: BTreeSet<usize>,
    pub correct_flag: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub records: Vec<PredictionRecord>,
}

/// Accuracy over a dataset plus per-problem prediction records.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, dataset: &[ProblemSet]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::domain("evaluate", "empty dataset"));
    }
    let mut records = Vec::with_capacity(dataset.len());
    let mut hits = 0usize;
    for (i, problem) in dataset.iter().enumerate() {
        let dist = crate::model::predict(params, config, problem)?;
        let correct_flag = answer::grade(&dist.selected, &problem.correct);
        if correct_flag {
            hits += 1;
        }
        records.push(PredictionRecord {
            problem: i,
            p_hat: dist.p_hat,
            selected: dist.selected,
            correct_flag,
        });
    }
    Ok(EvalReport { accuracy: hits as f64 / dataset.len() as f64, records })
}

/// Everything `train` returns.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (best dev accuracy).
    pub best_epoch: Option<usize>,
}

fn build_vocab(problems: &[&[ProblemSet]]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for set in problems {
        for p in *set {
            for tree in p
                .story
                .iter()
                .chain(&p.question)
                .chain(p.choices.iter().flatten())
            {
                for tok in tree.tokens() {
                    words.insert(tok.to_lowercase());
                }
            }
        }
    }
    words.into_iter().collect()
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm: f64 = grads
        .values()
        .flat_map(|t| t.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.values_mut() {
                *v *= scale;
            }
        }
    }
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in grads {
        let dst = acc.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (d, v) in dst.values_mut().iter_mut().zip(g.values()) {
            *d += scale * v;
        }
    }
}

/// Train with per-example (or full-batch) AdaGrad updates, tracking dev
/// accuracy per epoch and keeping the best-dev parameters. Deterministic
/// given (seed, config, data).
pub fn train(config: &TrainConfig, train_set: &[ProblemSet], dev_set: &[ProblemSet]) -> Result<TrainOutcome> {
    train_with_init(config, train_set, dev_set, None)
}

/// Like [`train`] but with externally supplied initial parameters
/// (e.g. a pretrained embedding table already folded in).
pub fn train_with_init(
    config: &TrainConfig,
    train_set: &[ProblemSet],
    dev_set: &[ProblemSet],
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::domain("train", "train and dev sets must be nonempty"));
    }
    config.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = match init {
        Some(p) => p,
        None => {
            let vocab = build_vocab(&[train_set, dev_set]);
            ModelParams::init(&config.model, &vocab, None, &mut rng)?
        }
    };
    let frozen: BTreeSet<String> = if config.model.train_embeddings {
        BTreeSet::new()
    } else {
        ["emb".to_string()].into_iter().collect()
    };
    let mut state = AdaGradState::new(config.learning_rate);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batch_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in &order {
            let pass = forward(&params, &config.model, &train_set[i]).map_err(|e| {
                Error::domain("train", format!("epoch {epoch}, example {i}: {e}"))
            })?;
            let loss = pass.loss_value();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, example {i}")));
            }
            epoch_loss += loss;
            let mut grads = pass.tape.backward_named(pass.loss)?;
            if config.full_batch {
                add_scaled(&mut batch_grads, &grads, 1.0 / train_set.len() as f64);
            } else {
                if let Some(max_norm) = config.clip_norm {
                    clip_grads(&mut grads, max_norm);
                }
                adagrad_step(&mut params, &grads, &mut state, &frozen)?;
            }
        }
        if config.full_batch {
            if let Some(max_norm) = config.clip_norm {
                clip_grads(&mut batch_grads, max_norm);
            }
            adagrad_step(&mut params, &batch_grads, &mut state, &frozen)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let dev_accuracy = evaluate(&params, &config.model, dev_set)?.accuracy;
        metrics.push(EpochMetrics { epoch, train_loss, dev_accuracy });

        let improved = best.as_ref().map_or(true, |(acc, _, _)| dev_accuracy > *acc);
        if improved {
            best = Some((dev_accuracy, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params, None),
    };
    Ok(TrainOutcome { params, metrics, best_epoch })
}

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter: BTreeMap<String, f64>,
    /// Entries exceeding the tolerance.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor: entries whose gradients are
/// below the floor are effectively compared absolutely, since central
/// differences carry roundoff noise of roughly machine epsilon over the
/// step size.
fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / denom
}

/// Five-point central finite difference of the loss w.r.t. one
/// parameter entry, step [`FD_STEP`]. The higher-order stencil keeps
/// truncation error negligible even where the loss surface is sharply
/// curved (cosine of small-norm vectors).
pub fn finite_difference_entry(
    params: &ModelParams,
    config: &ModelConfig,
    problem: &ProblemSet,
    name: &str,
    index: usize,
) -> Result<f64> {
    let mut scratch = params.clone();
    let eval = |delta: f64, scratch: &mut ModelParams| -> Result<f64> {
        scratch.for_each_named_mut(|n, t| {
            if n == name {
                t.values_mut()[index] += delta;
            }
        });
        let loss = forward(scratch, config, problem)?.loss_value();
        scratch.for_each_named_mut(|n, t| {
            if n == name {
                t.values_mut()[index] -= delta;
            }
        });
        Ok(loss)
    };
    let h = FD_STEP;
    let f1 = eval(-2.0 * h, &mut scratch)?;
    let f2 = eval(-h, &mut scratch)?;
    let f3 = eval(h, &mut scratch)?;
    let f4 = eval(2.0 * h, &mut scratch)?;
    Ok((f1 - 8.0 * f2 + 8.0 * f3 - f4) / (12.0 * h))
}

/// Compare analytic gradients against central finite differences for
/// every entry of every parameter on one problem.
pub fn grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    problem: &ProblemSet,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let pass = forward(params, config, problem)?;
    let analytic = pass.tape.backward_named(pass.loss)?;
    let mut per_parameter = BTreeMap::new();
    let mut failures = Vec::new();
    let mut max_err = 0.0_f64;

    let names: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    for (name, len) in names {
        let mut param_max = 0.0_f64;
        for idx in 0..len {
            let fd = finite_difference_entry(params, config, problem, &name, idx)?;
            let a = analytic
                .get(&name)
                .ok_or_else(|| Error::domain("grad_check", format!("no gradient for {name}")))?
                .values()[idx];
            let err = relative_error(a, fd);
            param_max = param_max.max(err);
            if err > tolerance {
                failures.push(GradCheckEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    finite_difference: fd,
                    relative_error: err,
                });
            }
        }
        max_err = max_err.max(param_max);
        per_parameter.insert(name, param_max);
    }
    Ok(GradCheckReport { max_relative_error: max_err, per_parameter, failures })
}

const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container of the full model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, seed: u64, params: ModelParams) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, config, seed, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Per-epoch metrics as CSV.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "epoch,train_loss,dev_accuracy")?;
    for m in metrics {
        writeln!(file, "{},{},{}", m.epoch, m.train_loss, m.dev_accuracy)?;
    }
    Ok(())
}

/// Mean and standard deviation of dev accuracy over several seeds.
pub fn multi_seed_summary(accuracies: &[f64]) -> (f64, f64) {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
