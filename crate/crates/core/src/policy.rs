//! Tanh-squashed diagonal Gaussian policy and weighted behavior cloning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{normalize_state, Dataset, MinibatchSampler, NormStats};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpCheckpoint, MlpGrads, MlpShape, OutputHead};
use crate::rng::{stream, Rng};
use crate::weights::WeightTable;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Actions are clamped to `(-1 + ACTION_EPS, 1 - ACTION_EPS)` before `atanh`.
pub const ACTION_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn policy_shape(state_dim: usize, action_dim: usize, hidden: &[usize]) -> MlpShape {
    MlpShape {
        input: state_dim,
        hidden: hidden.to_vec(),
        output: action_dim,
        activation: Activation::Relu,
        head: OutputHead::GaussianMean,
    }
}

/// Log-density of `a = tanh(u)` with `u ~ N(mean, exp(log_std)^2)`
/// componentwise.
pub fn squashed_gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&m, &ls), &ai) in mean.iter().zip(log_std).zip(a) {
        let ai = ai.clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS);
        let z = (ai.atanh() - m) / ls.exp();
        lp += -0.5 * z * z - ls - HALF_LN_2PI - (1.0 - ai * ai).ln();
    }
    lp
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub mean_net: Mlp,
    pub log_std: Vec<f64>,
    /// Statistics used to standardize raw states before the network.
    pub norm_stats: NormStats,
}

impl Policy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        norm_stats: NormStats,
        rng: &mut Rng,
    ) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::InvalidArgument("policy needs at least one action dimension".into()));
        }
        if norm_stats.dim() != state_dim {
            return Err(Error::Shape(format!(
                "normalization has {} dims, states have {state_dim}",
                norm_stats.dim()
            )));
        }
        Ok(Policy {
            mean_net: Mlp::init(&policy_shape(state_dim, action_dim, hidden), rng)?,
            log_std: vec![0.0; action_dim],
            norm_stats,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    fn standardize(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut x = raw.to_owned();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.norm_stats.mean[j]) / self.norm_stats.std[j];
            }
        }
        x
    }

    /// Squashed mean actions for a batch of raw states.
    pub fn act_batch(&self, raw_states: &Array2<f64>) -> Result<Array2<f64>> {
        let mut mu = self.mean_net.predict(&self.standardize(raw_states))?;
        mu.mapv_inplace(f64::tanh);
        Ok(mu)
    }

    /// Deterministic evaluation action: `tanh(mean_net(s))`.
    pub fn act(&self, raw_state: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, raw_state.len()), raw_state.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.act_batch(&x)?.row(0).to_vec())
    }

    /// Stochastic action, strictly inside `(-1, 1)^k`.
    pub fn sample(&self, raw_state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let x = normalize_state(raw_state, &self.norm_stats)?;
        let x = Array2::from_shape_vec((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let mu = self.mean_net.predict(&x)?;
        let bound = 1.0 - f64::EPSILON;
        Ok(mu
            .row(0)
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                (m + ls.exp() * eps).tanh().clamp(-bound, bound)
            })
            .collect())
    }

    /// `log pi(a | s)` for a raw state.
    pub fn log_prob(&self, raw_state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "action has {} dims, policy has {}",
                action.len(),
                self.action_dim()
            )));
        }
        let x = normalize_state(raw_state, &self.norm_stats)?;
        let x = Array2::from_shape_vec((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let mu = self.mean_net.predict(&x)?;
        let lp = squashed_gaussian_log_prob(mu.row(0).as_slice().expect("contiguous"), &self.log_std, action);
        if !lp.is_finite() {
            return Err(Error::NonFinite("policy log-probability".into()));
        }
        Ok(lp)
    }

    fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean_net.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }
}

/// Loss value with gradients for the mean network and `log_std`.
#[derive(Debug, Clone)]
pub struct WbcLoss {
    pub value: f64,
    pub mean_grads: MlpGrads,
    pub log_std_grad: Vec<f64>,
}

/// `-mean(W * log pi(a | s))` over a batch of standardized states.
pub fn wbc_loss(policy: &Policy, states: &Array2<f64>, actions: &Array2<f64>, weights: &[f64]) -> Result<WbcLoss> {
    let (b, k) = actions.dim();
    if states.nrows() != b || weights.len() != b {
        return Err(Error::Shape(format!(
            "{} states, {b} actions, {} weights",
            states.nrows(),
            weights.len()
        )));
    }
    if b == 0 {
        return Err(Error::Empty("empty behavior-cloning batch".into()));
    }
    if k != policy.action_dim() {
        return Err(Error::Shape(format!("actions have {k} dims, policy has {}", policy.action_dim())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("behavior-cloning weights must be nonnegative".into()));
    }
    if weights.iter().all(|&w| w == 0.0) {
        log::warn!("all behavior-cloning weights in the batch are zero; skipping gradient");
        return Ok(WbcLoss {
            value: 0.0,
            mean_grads: MlpGrads::zeros_like(&policy.mean_net),
            log_std_grad: vec![0.0; k],
        });
    }
    let (mu, cache) = policy.mean_net.forward(states)?;
    let mut upstream = Array2::zeros((b, k));
    let mut log_std_grad = vec![0.0; k];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for r in 0..b {
        let w = weights[r];
        let mut lp = 0.0;
        for i in 0..k {
            let ls = policy.log_std[i];
            let sigma = ls.exp();
            let a = actions[[r, i]].clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS);
            let z = (a.atanh() - mu[[r, i]]) / sigma;
            lp += -0.5 * z * z - ls - HALF_LN_2PI - (1.0 - a * a).ln();
            upstream[[r, i]] = -w * inv_b * z / sigma;
            log_std_grad[i] -= w * inv_b * (z * z - 1.0);
        }
        total += w * lp;
    }
    let value = -total * inv_b;
    if !value.is_finite() {
        return Err(Error::NonFinite("behavior-cloning loss".into()));
    }
    let (mean_grads, _) = policy.mean_net.backward(&cache, &upstream)?;
    Ok(WbcLoss {
        value,
        mean_grads,
        log_std_grad,
    })
}

/// Snapshot handed to the training callback.
pub struct Progress<'a> {
    /// Number of gradient steps taken so far.
    pub step: usize,
    pub policy: &'a Policy,
    /// Loss of the most recent step (NaN before the first).
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: Policy,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

impl TrainedPolicy {
    /// CSV with columns `step,loss` (1-based step count).
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{},{l}", i + 1).expect("infallible");
        }
        out
    }
}

/// Weighted behavior cloning on `ta`. `on_checkpoint` runs at step 0, every
/// `cfg.eval_interval` steps and after the last step.
pub fn train_policy(
    ta: &Dataset,
    weights: &WeightTable,
    cfg: &RunConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(&Progress) -> Result<()>,
) -> Result<TrainedPolicy> {
    if !weights.covers(ta) {
        return Err(Error::Shape("weight table does not cover the task-agnostic dataset".into()));
    }
    let flat = ta.flatten(&ta.norm_stats);
    let actions = flat
        .actions
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("behavior cloning needs actions".into()))?;
    let w = weights.flat();
    let mut policy = Policy::new(
        ta.state_dim,
        ta.action_dim,
        &cfg.policy_hidden,
        ta.norm_stats.clone(),
        &mut stream(seed, "policy-init"),
    )?;
    let mut sampler = MinibatchSampler::new(flat.len(), cfg.batch_bc, stream(seed, "bc-batches"))?;
    let mut net_adam = AdamState::new(&policy.mean_net.tensor_sizes());
    let mut std_adam = AdamState::new(&[policy.action_dim()]);
    let mut losses = Vec::with_capacity(cfg.steps_bc);
    on_checkpoint(&Progress {
        step: 0,
        policy: &policy,
        loss: f64::NAN,
    })?;
    for step in 0..cfg.steps_bc {
        let rows = sampler.next_rows();
        let s = flat.gather_states(&rows);
        let a = actions.select(ndarray::Axis(0), &rows);
        let bw: Vec<f64> = rows.iter().map(|&r| w[r]).collect();
        let loss = wbc_loss(&policy, &s, &a, &bw).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let tensors = loss.mean_grads.tensors();
        adam_step(
            &mut policy.mean_net.tensors_mut(),
            &tensors,
            &mut net_adam,
            cfg.lr_policy,
            cfg.weight_decay_policy,
        )
        .and_then(|()| {
            adam_step(
                &mut [("log_std".to_string(), policy.log_std.as_mut_slice())],
                &[&loss.log_std_grad],
                &mut std_adam,
                cfg.lr_policy,
                0.0,
            )
        })
        .map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        policy.clamp_log_std();
        losses.push(loss.value);
        let done = step + 1;
        let due = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
        if due || done == cfg.steps_bc {
            on_checkpoint(&Progress {
                step: done,
                policy: &policy,
                loss: loss.value,
            })?;
        }
    }
    Ok(TrainedPolicy { policy, losses })
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    version: u32,
    mean_net: MlpCheckpoint,
    log_std: Vec<f64>,
    norm_stats: NormStats,
}

pub fn policy_to_json(policy: &Policy) -> String {
    serde_json::to_string(&PolicyCheckpoint {
        format: "tailo-policy".into(),
        version: 1,
        mean_net: MlpCheckpoint::from(&policy.mean_net),
        log_std: policy.log_std.clone(),
        norm_stats: policy.norm_stats.clone(),
    })
    .expect("policy serializes")
}

pub fn policy_from_json(text: &str) -> Result<Policy> {
    let ck: PolicyCheckpoint =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.format != "tailo-policy" || ck.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
    }
    let mean_net = Mlp::try_from(ck.mean_net)?;
    if ck.log_std.len() != mean_net.output_dim() || ck.norm_stats.dim() != mean_net.input_dim() {
        return Err(Error::Checkpoint("policy parts disagree on dimensions".into()));
    }
    Ok(Policy {
        mean_net,
        log_std: ck.log_std,
        norm_stats: ck.norm_stats,
    })
}

pub fn save_policy(policy: &Policy, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, policy_to_json(policy)).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<Policy> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    policy_from_json(&text)
}
