//! Linear Bradley-Terry fitting on preference pairs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PreferencePair;
use crate::error::BtError;

/// P(win beats loss) = sigmoid(r_win - r_loss).
pub fn bt_probability(r_win: f64, r_loss: f64) -> f64 {
    let x = r_win - r_loss;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(sigmoid(x)) without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Maps a program (within its task) to a feature vector.
pub trait FeatureExtractor {
    fn features(&self, task_id: &str, code: &str) -> Option<Vec<f64>>;
}

impl<F: Fn(&str, &str) -> Option<Vec<f64>>> FeatureExtractor for F {
    fn features(&self, task_id: &str, code: &str) -> Option<Vec<f64>> {
        self(task_id, code)
    }
}

/// Precomputed features keyed by code text.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable(pub HashMap<String, Vec<f64>>);

impl FeatureExtractor for FeatureTable {
    fn features(&self, _task_id: &str, code: &str) -> Option<Vec<f64>> {
        self.0.get(code).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtFitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Initial weights are uniform in [-init_scale, init_scale].
    pub init_scale: f64,
}

impl Default for BtFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            seed: 0,
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtFit {
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    /// Mean log-likelihood before each epoch, then after the last one.
    pub history: Vec<f64>,
}

/// Mean of log sigmoid(w . d) over difference vectors d = phi(win) - phi(loss).
pub fn bt_log_likelihood(weights: &[f64], diffs: &[Vec<f64>]) -> f64 {
    let sum: f64 = diffs.iter().map(|d| log_sigmoid(dot(weights, d))).sum();
    sum / diffs.len() as f64
}

/// Gradient of [`bt_log_likelihood`]: mean of (1 - sigmoid(w . d)) d.
pub fn bt_gradient(weights: &[f64], diffs: &[Vec<f64>]) -> Vec<f64> {
    let mut g = vec![0.0; weights.len()];
    for d in diffs {
        let coef = 1.0 - bt_probability(dot(weights, d), 0.0);
        for (gi, di) in g.iter_mut().zip(d) {
            *gi += coef * di;
        }
    }
    let n = diffs.len() as f64;
    g.iter_mut().for_each(|x| *x /= n);
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch gradient ascent on precomputed difference vectors.
pub fn bt_fit_diffs(diffs: &[Vec<f64>], config: &BtFitConfig) -> Result<BtFit, BtError> {
    let dim = diffs.first().ok_or(BtError::NoPairs)?.len();
    if let Some(d) = diffs.iter().find(|d| d.len() != dim) {
        return Err(BtError::Dimension(dim, d.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..dim)
        .map(|_| {
            if config.init_scale > 0.0 {
                rng.gen_range(-config.init_scale..=config.init_scale)
            } else {
                0.0
            }
        })
        .collect();
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let ll = bt_log_likelihood(&w, diffs);
        if !ll.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(BtError::NonFinite {
                epoch,
                value: ll,
                weights: w,
            });
        }
        history.push(ll);
        if epoch == config.epochs {
            break;
        }
        let g = bt_gradient(&w, diffs);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi += config.learning_rate * gi;
        }
    }
    Ok(BtFit {
        log_likelihood: *history.last().expect("at least one evaluation"),
        weights: w,
        history,
    })
}

/// Fits weights so that w . phi(win) > w . phi(loss) on the given pairs.
pub fn bt_fit(
    pairs: &[PreferencePair],
    extractor: &dyn FeatureExtractor,
    config: &BtFitConfig,
) -> Result<BtFit, BtError> {
    if pairs.is_empty() {
        return Err(BtError::NoPairs);
    }
    let lookup = |code: &str, task: &str| {
        extractor
            .features(task, code)
            .ok_or_else(|| BtError::MissingFeatures(code.chars().take(60).collect()))
    };
    let diffs = pairs
        .iter()
        .map(|p| {
            let w = lookup(&p.win, &p.task_id)?;
            let l = lookup(&p.loss, &p.task_id)?;
            if w.len() != l.len() {
                return Err(BtError::Dimension(w.len(), l.len()));
            }
            Ok(w.iter().zip(&l).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, _>>()?;
    bt_fit_diffs(&diffs, config)
}
