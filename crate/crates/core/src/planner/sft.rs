//! Supervised initialization from strategy-annotated dialogues.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{encode_features, FeatureLayout, FeatureVector};
use super::policy::{policy_distribution, PolicyParameters};
use super::PlannerError;
use crate::catalog::{Catalog, TaskKind};
use crate::dialogue::Utterance;
use crate::scalar::Scalar;
use crate::tom::TomMode;

/// One annotated decision point: the dialogue so far and the strategy the
/// annotated agent used next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub task: TaskKind,
    pub history: Vec<Utterance>,
    pub label: String,
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), PlannerError> {
    let file = std::fs::File::create(path).map_err(|e| PlannerError::Corpus(format!("{}: {e}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PlannerError::Corpus(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| PlannerError::Corpus(e.to_string()))?;
    }
    out.flush().map_err(|e| PlannerError::Corpus(e.to_string()))
}

/// Reads a JSON-lines corpus; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, PlannerError> {
    let file = std::fs::File::open(path).map_err(|e| PlannerError::Corpus(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PlannerError::Corpus(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| PlannerError::Corpus(format!("line {}: {e}", n + 1)))?);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftExample<T> {
    pub features: FeatureVector<T>,
    pub label: usize,
}

/// Encodes corpus records for `layout`, skipping records of other tasks.
pub fn corpus_examples<T: Scalar>(
    records: &[CorpusRecord],
    layout: &FeatureLayout,
    catalog: &Catalog,
    tom: &TomMode<'_>,
) -> Result<Vec<SftExample<T>>, PlannerError> {
    records
        .iter()
        .filter(|r| r.task == layout.task)
        .map(|r| {
            let label = catalog
                .strategy_index(r.task, &r.label)
                .map_err(|e| PlannerError::Corpus(e.to_string()))?;
            let (mental, _) = tom.infer(&r.history, r.task).map_err(|e| PlannerError::Corpus(e.to_string()))?;
            Ok(SftExample { features: encode_features(&r.history, &mental, layout, catalog), label })
        })
        .collect()
}

/// Adam with decoupled weight decay on the weight matrix (not the bias).
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &PolicyParameters<T>, lr: T, weight_decay: T) -> Self {
        let n = params.weights.len() + params.bias.len();
        AdamW {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay,
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    fn apply(&mut self, params: &mut PolicyParameters<T>, grad_w: &[T], grad_b: &[T]) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        let nw = params.weights.len();
        let decay = T::one() - self.lr * self.weight_decay;
        for (i, g) in grad_w.iter().chain(grad_b).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * *g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * *g * *g;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            if i < nw {
                params.weights[i] = params.weights[i] * decay - update;
            } else {
                params.bias[i - nw] = params.bias[i - nw] - update;
            }
        }
    }
}

/// Mean cross-entropy of the gold labels.
pub fn cross_entropy<T: Scalar>(params: &PolicyParameters<T>, examples: &[SftExample<T>]) -> Result<T, PlannerError> {
    if examples.is_empty() {
        return Err(PlannerError::EmptyBatch);
    }
    let mut total = T::zero();
    for ex in examples {
        let probs = policy_distribution(params, &ex.features)?;
        let p = *probs.get(ex.label).ok_or(PlannerError::InvalidLabel(ex.label))?;
        total = total - p.ln();
    }
    Ok(total / T::of(examples.len() as f64))
}

/// One optimizer step on the batch's mean cross-entropy. Returns the loss
/// before the update.
pub fn sft_step<T: Scalar>(
    params: &mut PolicyParameters<T>,
    optimizer: &mut AdamW<T>,
    batch: &[SftExample<T>],
) -> Result<T, PlannerError> {
    if batch.is_empty() {
        return Err(PlannerError::EmptyBatch);
    }
    let n = T::of(batch.len() as f64);
    let mut grad_w = vec![T::zero(); params.weights.len()];
    let mut grad_b = vec![T::zero(); params.bias.len()];
    let mut loss = T::zero();
    for ex in batch {
        if ex.label >= params.n_strategies {
            return Err(PlannerError::InvalidLabel(ex.label));
        }
        let probs = policy_distribution(params, &ex.features)?;
        loss = loss - probs[ex.label].ln();
        for (k, p) in probs.iter().enumerate() {
            let indicator = if k == ex.label { T::one() } else { T::zero() };
            let coeff = (*p - indicator) / n;
            grad_b[k] = grad_b[k] + coeff;
            let row = &mut grad_w[k * params.n_features..(k + 1) * params.n_features];
            for (g, x) in row.iter_mut().zip(&ex.features.values) {
                *g = *g + coeff * *x;
            }
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(PlannerError::Divergence(format!("non-finite loss {loss}")));
    }
    optimizer.apply(params, &grad_w, &grad_b);
    params.version += 1;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Share of examples held out for best-checkpoint selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 10, batch_size: 16, lr: 6e-6, weight_decay: 0.01, validation_fraction: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SftReport<T> {
    /// Pre-update loss of every step, in order.
    pub step_losses: Vec<T>,
    /// Full training-split cross-entropy after each epoch.
    pub epoch_train_loss: Vec<T>,
    /// Validation cross-entropy after each epoch (empty without a split).
    pub epoch_validation_loss: Vec<T>,
    /// 0-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best: PolicyParameters<T>,
    pub last: PolicyParameters<T>,
}

/// Mini-batch training with a seeded shuffle per epoch. Keeps the
/// checkpoint with the lowest validation loss (training loss when there is
/// no validation split).
pub fn train_sft<T: Scalar>(
    mut params: PolicyParameters<T>,
    examples: &[SftExample<T>],
    config: &SftConfig,
) -> Result<SftReport<T>, PlannerError> {
    if examples.is_empty() {
        return Err(PlannerError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64) * config.validation_fraction.clamp(0.0, 0.5)).floor() as usize;
    let n_val = if examples.len() - n_val == 0 { 0 } else { n_val };
    let validation: Vec<SftExample<T>> = order[..n_val].iter().map(|i| examples[*i].clone()).collect();
    let mut train: Vec<SftExample<T>> = order[n_val..].iter().map(|i| examples[*i].clone()).collect();

    let mut optimizer = AdamW::new(&params, T::of(config.lr), T::of(config.weight_decay));
    let batch_size = config.batch_size.max(1);
    let mut report = SftReport {
        step_losses: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_validation_loss: Vec::new(),
        best_epoch: 0,
        best: params.clone(),
        last: params.clone(),
    };
    let mut best_loss = T::infinity();
    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(batch_size) {
            report.step_losses.push(sft_step(&mut params, &mut optimizer, batch)?);
        }
        let train_loss = cross_entropy(&params, &train)?;
        report.epoch_train_loss.push(train_loss);
        let selection = if validation.is_empty() {
            train_loss
        } else {
            let v = cross_entropy(&params, &validation)?;
            report.epoch_validation_loss.push(v);
            v
        };
        if selection < best_loss {
            best_loss = selection;
            report.best_epoch = epoch;
            report.best = params.clone();
        }
    }
    report.last = params;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> (PolicyParameters<f64>, Vec<SftExample<f64>>) {
        let params = PolicyParameters::zeros_raw(TaskKind::CharityPersuasion, 4, 3, "toy".into());
        let examples = (0..n)
            .map(|i| {
                let label = i % 3;
                let mut x = vec![0.0; 4];
                x[label] = 1.0;
                x[3] = 0.5;
                SftExample { features: FeatureVector { values: x }, label }
            })
            .collect();
        (params, examples)
    }

    #[test]
    fn first_loss_is_ln_k() {
        let (mut p, ex) = toy(16);
        let mut opt = AdamW::new(&p, 0.01, 0.01);
        let loss = sft_step(&mut p, &mut opt, &ex).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_params_have_small_loss() {
        let (mut p, ex) = toy(6);
        for k in 0..3 {
            p.weights[k * 4 + k] = 20.0;
        }
        let mut opt = AdamW::new(&p, 0.0, 0.0);
        assert!(sft_step(&mut p, &mut opt, &ex).unwrap() < 1e-3);
    }

    #[test]
    fn loss_does_not_increase_on_a_fixed_batch() {
        let (mut p, ex) = toy(16);
        let mut opt = AdamW::new(&p, 0.01, 0.01);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = sft_step(&mut p, &mut opt, &ex).unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (mut p, ex) = toy(3);
        p.weights[0] = f64::NAN;
        let mut opt = AdamW::new(&p, 0.01, 0.01);
        assert!(matches!(sft_step(&mut p, &mut opt, &ex), Err(PlannerError::Divergence(_))));
    }

    #[test]
    fn train_keeps_best_checkpoint() {
        let (p, ex) = toy(40);
        let config = SftConfig { epochs: 5, lr: 0.05, ..SftConfig::default() };
        let report = train_sft(p, &ex, &config).unwrap();
        assert_eq!(report.epoch_train_loss.len(), 5);
        assert_eq!(report.epoch_validation_loss.len(), 5);
        let best = report.epoch_validation_loss[report.best_epoch];
        assert!(report.epoch_validation_loss.iter().all(|v| *v >= best));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = vec![CorpusRecord {
            task: TaskKind::CharityPersuasion,
            history: vec![],
            label: "Emotion Appeal".into(),
        }];
        save_corpus(&path, &records).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), records);
        let layout = FeatureLayout::for_task(TaskKind::CharityPersuasion, Catalog::bundled());
        let ex: Vec<SftExample<f64>> = corpus_examples(&records, &layout, Catalog::bundled(), &TomMode::Off).unwrap();
        assert_eq!(ex[0].label, Catalog::bundled().strategy_index(TaskKind::CharityPersuasion, "Emotion Appeal").unwrap());
    }
}
