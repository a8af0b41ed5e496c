//! Linear softmax policy over agent strategies.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureLayout, FeatureVector};
use super::PlannerError;
use crate::catalog::TaskKind;
use crate::scalar::Scalar;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// `weights` is row-major with one row per strategy:
/// `logit[k] = Σ_j weights[k·n_features + j]·x[j] + bias[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PolicyParameters<T> {
    pub task: TaskKind,
    pub n_features: usize,
    pub n_strategies: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub version: u64,
    pub layout_hash: String,
}

impl<T: Scalar> PolicyParameters<T> {
    pub fn zeros(layout: &FeatureLayout) -> Self {
        Self::zeros_raw(layout.task, layout.dim(), layout.n_strategies, layout.layout_hash())
    }

    pub fn zeros_raw(task: TaskKind, n_features: usize, n_strategies: usize, layout_hash: String) -> Self {
        PolicyParameters {
            task,
            n_features,
            n_strategies,
            weights: vec![T::zero(); n_features * n_strategies],
            bias: vec![T::zero(); n_strategies],
            version: 0,
            layout_hash,
        }
    }

    pub fn weight(&self, strategy: usize, feature: usize) -> T {
        self.weights[strategy * self.n_features + feature]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn check_shape(&self) -> Result<(), PlannerError> {
        if self.weights.len() != self.n_features * self.n_strategies || self.bias.len() != self.n_strategies {
            return Err(PlannerError::Dimension { expected: self.n_features * self.n_strategies, got: self.weights.len() });
        }
        Ok(())
    }

    pub fn logits(&self, features: &FeatureVector<T>) -> Result<Vec<T>, PlannerError> {
        if features.len() != self.n_features {
            return Err(PlannerError::Dimension { expected: self.n_features, got: features.len() });
        }
        Ok((0..self.n_strategies)
            .map(|k| {
                let row = &self.weights[k * self.n_features..(k + 1) * self.n_features];
                row.iter().zip(&features.values).fold(self.bias[k], |acc, (w, x)| acc + *w * *x)
            })
            .collect())
    }

    pub fn to_f64(&self) -> PolicyParameters<f64> {
        PolicyParameters {
            task: self.task,
            n_features: self.n_features,
            n_strategies: self.n_strategies,
            weights: self.weights.iter().map(|v| v.as_f64()).collect(),
            bias: self.bias.iter().map(|v| v.as_f64()).collect(),
            version: self.version,
            layout_hash: self.layout_hash.clone(),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

pub fn policy_distribution<T: Scalar>(params: &PolicyParameters<T>, features: &FeatureVector<T>) -> Result<Vec<T>, PlannerError> {
    Ok(softmax(&params.logits(features)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Greedy,
    Sample,
}

/// Argmax with ties going to the lowest index.
pub fn argmax<T: Scalar>(distribution: &[T]) -> usize {
    let mut best = 0;
    for (i, p) in distribution.iter().enumerate() {
        if *p > distribution[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; consumes exactly one uniform from `rng`.
pub fn sample_index<T: Scalar>(distribution: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in distribution.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Strategy index chosen from `distribution`. Greedy mode leaves `rng` untouched.
pub fn select_strategy<T: Scalar>(distribution: &[T], mode: SelectionMode, rng: &mut impl Rng) -> usize {
    match mode {
        SelectionMode::Greedy => argmax(distribution),
        SelectionMode::Sample => sample_index(distribution, rng),
    }
}

/// Gradient of `log π(action | x)`, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like(params: &PolicyParameters<T>) -> Self {
        Gradient { weights: vec![T::zero(); params.weights.len()], bias: vec![T::zero(); params.bias.len()] }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Adds `scale · ∇ log π(action | x)` to `grad`. Returns `log π(action | x)`.
pub fn accumulate_log_prob_gradient<T: Scalar>(
    params: &PolicyParameters<T>,
    features: &FeatureVector<T>,
    action: usize,
    scale: T,
    grad: &mut Gradient<T>,
) -> Result<T, PlannerError> {
    if action >= params.n_strategies {
        return Err(PlannerError::InvalidLabel(action));
    }
    let probs = policy_distribution(params, features)?;
    for (k, p) in probs.iter().enumerate() {
        let indicator = if k == action { T::one() } else { T::zero() };
        let coeff = scale * (indicator - *p);
        grad.bias[k] = grad.bias[k] + coeff;
        let row = &mut grad.weights[k * params.n_features..(k + 1) * params.n_features];
        for (g, x) in row.iter_mut().zip(&features.values) {
            *g = *g + coeff * *x;
        }
    }
    Ok(probs[action].ln())
}

pub fn log_prob_gradient<T: Scalar>(
    params: &PolicyParameters<T>,
    features: &FeatureVector<T>,
    action: usize,
) -> Result<Gradient<T>, PlannerError> {
    let mut grad = Gradient::zeros_like(params);
    accumulate_log_prob_gradient(params, features, action, T::one(), &mut grad)?;
    Ok(grad)
}

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
struct CheckpointFile<T> {
    schema_version: u32,
    params: PolicyParameters<T>,
}

impl<T: Scalar> PolicyParameters<T> {
    pub fn save(&self, path: &Path) -> Result<(), PlannerError> {
        let file = CheckpointFile { schema_version: CHECKPOINT_SCHEMA_VERSION, params: self.clone() };
        let text = serde_json::to_string(&file).map_err(|e| PlannerError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| PlannerError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Loads a checkpoint, refusing one written for a different feature layout.
    pub fn load(path: &Path, expected_layout: Option<&FeatureLayout>) -> Result<Self, PlannerError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PlannerError::Checkpoint(format!("{}: {e}", path.display())))?;
        let file: CheckpointFile<T> = serde_json::from_str(&text).map_err(|e| PlannerError::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(PlannerError::Checkpoint(format!("unsupported schema version {}", file.schema_version)));
        }
        let params = file.params;
        params.check_shape()?;
        if let Some(layout) = expected_layout {
            let expected = layout.layout_hash();
            if params.layout_hash != expected {
                return Err(PlannerError::LayoutMismatch { expected, found: params.layout_hash });
            }
            if params.n_features != layout.dim() || params.n_strategies != layout.n_strategies {
                return Err(PlannerError::Dimension { expected: layout.dim(), got: params.n_features });
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform() {
        let layout = FeatureLayout::for_task(TaskKind::PriceNegotiation, Catalog::bundled());
        let p = PolicyParameters::<f64>::zeros(&layout);
        let d = policy_distribution(&p, &FeatureVector::from_f64(&vec![0.3; layout.dim()])).unwrap();
        assert!(d.iter().all(|x| (*x - 1.0 / 11.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_strategies() {
        let d = softmax(&[2f64.ln(), 0.0]);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let p = PolicyParameters::<f64>::zeros_raw(TaskKind::CharityPersuasion, 3, 2, "x".into());
        assert!(matches!(
            policy_distribution(&p, &FeatureVector::from_f64(&[1.0])),
            Err(PlannerError::Dimension { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn selection_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_strategy(&[0.1, 0.7, 0.2], SelectionMode::Greedy, &mut rng), 1);
        assert_eq!(select_strategy(&[0.25f64; 4], SelectionMode::Greedy, &mut rng), 0);
        for _ in 0..200 {
            assert_eq!(select_strategy(&[0.0, 0.0, 1.0], SelectionMode::Sample, &mut rng), 2);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_layout_guard() {
        let layout = FeatureLayout::for_task(TaskKind::CharityPersuasion, Catalog::bundled());
        let mut p = PolicyParameters::<f64>::zeros(&layout);
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin() / 3.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        let q = PolicyParameters::<f64>::load(&path, Some(&layout)).unwrap();
        let x = FeatureVector::from_f64(&(0..layout.dim()).map(|i| (i as f64).cos()).collect::<Vec<_>>());
        assert_eq!(policy_distribution(&p, &x).unwrap(), policy_distribution(&q, &x).unwrap());
        let mut other = layout;
        other.hash_buckets = 8;
        assert!(matches!(PolicyParameters::<f64>::load(&path, Some(&other)), Err(PlannerError::LayoutMismatch { .. })));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
            let d = softmax(&logits);
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let e = softmax(&shifted);
            prop_assert_eq!(argmax(&d), argmax(&e));
            for (a, b) in d.iter().zip(&e) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
