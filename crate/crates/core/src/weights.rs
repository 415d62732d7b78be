//! Trajectory-aware behavior-cloning weights.
//!
//! For a trajectory with per-step terms `e_i = exp(alpha * R(s_i))` the
//! weight of step `i` is the discounted sum of all future terms, where steps
//! beyond the end of the (possibly incomplete) trajectory repeat its last
//! state. A single reverse scan evaluates the infinite sum exactly:
//! `W_n = e_n / (1 - gamma)` and `W_i = e_i + gamma * W_(i+1)`.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::discriminator::RewardField;
use crate::error::{Error, Result};

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} must lie in [0, 1)")));
    }
    Ok(())
}

/// Reverse-scan discounted sums of arbitrary positive per-step terms with
/// last-state padding.
pub fn discounted_with_padding(terms: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if terms.is_empty() {
        return Err(Error::Empty("trajectory has no steps".into()));
    }
    let n = terms.len();
    let mut w = vec![0.0; n];
    w[n - 1] = terms[n - 1] / (1.0 - gamma);
    for i in (0..n - 1).rev() {
        w[i] = terms[i] + gamma * w[i + 1];
    }
    Ok(w)
}

/// Weights of one trajectory from its per-step rewards.
pub fn compute_weights(rewards: &[f64], alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    let terms: Vec<f64> = rewards.iter().map(|r| (alpha * r).exp()).collect();
    discounted_with_padding(&terms, gamma)
}

/// Direct truncated evaluation of
/// `W_i = sum_{j=0..=horizon} gamma^j * exp(alpha * R_min(i+j, n-1))`.
pub fn brute_force_weights(rewards: &[f64], alpha: f64, gamma: f64, horizon: usize) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            let mut discount = 1.0;
            for j in 0..=horizon {
                let idx = (i + j).min(n - 1);
                total += discount * (alpha * rewards[idx]).exp();
                discount *= gamma;
            }
            total
        })
        .collect()
}

/// Per-step term entering the discounted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightTerm {
    /// `exp(alpha * R(s))`.
    ExpScore,
    /// `10 * c(s)` with `c(s) = sigmoid(R(s))`.
    ScaledProbability,
}

/// Per-(trajectory, step) weights for a task-agnostic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub raw: Vec<Vec<f64>>,
    /// Mean raw weight over every table entry.
    pub z: f64,
    /// Whether [`WeightTable::weight`] divides by `z`.
    pub normalized: bool,
}

impl WeightTable {
    pub fn from_raw(raw: Vec<Vec<f64>>, normalize: bool) -> Result<Self> {
        let count: usize = raw.iter().map(Vec::len).sum();
        if count == 0 {
            return Err(Error::Empty("weight table has no entries".into()));
        }
        let z = raw.iter().flatten().sum::<f64>() / count as f64;
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::NonFinite(format!("weight normalizer {z}")));
        }
        Ok(WeightTable {
            raw,
            z,
            normalized: normalize,
        })
    }

    /// All-ones table: plain behavior cloning.
    pub fn uniform(dataset: &Dataset) -> Self {
        WeightTable {
            raw: dataset.trajectories.iter().map(|t| vec![1.0; t.len()]).collect(),
            z: 1.0,
            normalized: true,
        }
    }

    pub fn weight(&self, trajectory: usize, step: usize) -> f64 {
        let w = self.raw[trajectory][step];
        if self.normalized {
            w / self.z
        } else {
            w
        }
    }

    /// Weights in flattened (trajectory, step) order.
    pub fn flat(&self) -> Vec<f64> {
        self.raw
            .iter()
            .enumerate()
            .flat_map(|(t, row)| (0..row.len()).map(move |i| (t, i)))
            .map(|(t, i)| self.weight(t, i))
            .collect()
    }

    pub fn covers(&self, dataset: &Dataset) -> bool {
        self.raw.len() == dataset.trajectories.len()
            && self
                .raw
                .iter()
                .zip(&dataset.trajectories)
                .all(|(w, t)| w.len() == t.len())
    }

    /// CSV with columns `trajectory_id,step,raw_W,normalized_W`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory_id,step,raw_W,normalized_W\n");
        for (t, row) in self.raw.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                writeln!(out, "{t},{i},{w},{}", w / self.z).expect("infallible");
            }
        }
        out
    }
}

/// Applies the reverse scan to every trajectory of `dataset`.
pub fn build_weight_table(
    field: &RewardField,
    dataset: &Dataset,
    alpha: f64,
    gamma: f64,
    normalize: bool,
    term: WeightTerm,
) -> Result<WeightTable> {
    let mut raw = Vec::with_capacity(dataset.trajectories.len());
    for (t, traj) in dataset.trajectories.iter().enumerate() {
        let terms = (0..traj.len())
            .map(|i| {
                let r = field.get(t, i).ok_or(Error::MissingReward {
                    trajectory: traj.id,
                    step: i,
                })?;
                Ok(match term {
                    WeightTerm::ExpScore => (alpha * r).exp(),
                    WeightTerm::ScaledProbability => 10.0 * crate::nn::sigmoid(r),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        raw.push(discounted_with_padding(&terms, gamma)?);
    }
    WeightTable::from_raw(raw, normalize)
}
