//! SMODICE-KL baseline: a value function trained on the dual KL objective,
//! then exponentiated-advantage weights for behavior cloning.
//!
//! Transitions are `(s_t, a_t, s_t+1)` tuples inside each trajectory. The last
//! pair of a trajectory becomes an absorbing self-loop `(s_n, a_n, s_n)`, so
//! tuples and state-action pairs correspond one to one. Removing a tuple
//! leaves its next state reachable only as a successor, which is what drives
//! the value function to diverge.

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, Axis};

use crate::config::RunConfig;
use crate::data::{Dataset, FlatData, MinibatchSampler, Trajectory};
use crate::discriminator::{train_classifier, ClassifierSettings, discriminator_shape, Objective};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpShape, OutputHead};
use crate::rng::{stream, Rng};
use crate::weights::WeightTable;

/// Log-weights above this are clamped before exponentiation.
pub const MAX_LOG_WEIGHT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub trajectory: usize,
    /// Index of the pair within its trajectory.
    pub step: usize,
    /// Row of `s` in the flattened states.
    pub from: usize,
    /// Row of `s'`; equals `from` for the absorbing self-loop.
    pub next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub tuples: Vec<Transition>,
    /// Rows of the first state of every trajectory.
    pub initial: Vec<usize>,
    pub num_trajectories: usize,
}

impl Transitions {
    /// Every consecutive pair of every trajectory plus the terminal self-loop.
    pub fn from_flat(flat: &FlatData) -> Self {
        let mut tuples = Vec::with_capacity(flat.len());
        let mut initial = Vec::new();
        for (t, w) in flat.offsets.windows(2).enumerate() {
            if w[0] == w[1] {
                continue;
            }
            initial.push(w[0]);
            for row in w[0]..w[1] {
                tuples.push(Transition {
                    trajectory: t,
                    step: row - w[0],
                    from: row,
                    next: (row + 1).min(w[1] - 1),
                });
            }
        }
        Transitions {
            tuples,
            initial,
            num_trajectories: flat.offsets.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Drops tuples at indices `x-1, 2x-1, ...` within each trajectory, the
    /// same positions `corrupt_remove_every_x` removes from the pairs.
    pub fn remove_every_x(&self, x: usize) -> Result<Self> {
        if x < 2 {
            return Err(Error::InvalidArgument(format!("removal period x = {x} must be >= 2")));
        }
        Ok(Transitions {
            tuples: self
                .tuples
                .iter()
                .filter(|t| (t.step + 1) % x != 0)
                .copied()
                .collect(),
            initial: self.initial.clone(),
            num_trajectories: self.num_trajectories,
        })
    }

    /// The state-action pairs behind the kept tuples, as a dataset.
    pub fn kept_dataset(&self, source: &Dataset) -> Result<Dataset> {
        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut current: Option<usize> = None;
        for tr in &self.tuples {
            let src = &source.trajectories[tr.trajectory];
            if current != Some(tr.trajectory) {
                current = Some(tr.trajectory);
                trajectories.push(Trajectory::new(
                    src.source_tag,
                    Vec::new(),
                    src.actions.as_ref().map(|_| Vec::new()),
                ));
            }
            let out = trajectories.last_mut().expect("pushed above");
            out.states.push(src.states[tr.step].clone());
            if let (Some(dst), Some(acts)) = (out.actions.as_mut(), src.actions.as_ref()) {
                dst.push(acts[tr.step].clone());
            }
        }
        Dataset::new(source.kind, source.state_dim, source.action_dim, trajectories)
    }
}

/// Loss value and its gradient with respect to each `V` input.
#[derive(Debug, Clone)]
pub struct KlLoss {
    pub value: f64,
    pub grad_initial: Vec<f64>,
    pub grad_from: Vec<f64>,
    pub grad_next: Vec<f64>,
}

/// `(1 - gamma) * mean V(s0) + log mean exp(R(s) + gamma * V(s') - V(s))`.
pub fn smodice_kl_loss(
    v_initial: &[f64],
    v_from: &[f64],
    v_next: &[f64],
    rewards: &[f64],
    gamma: f64,
) -> Result<KlLoss> {
    let n = v_from.len();
    if v_initial.is_empty() || n == 0 {
        return Err(Error::Empty("value objective needs initial states and transitions".into()));
    }
    if v_next.len() != n || rewards.len() != n {
        return Err(Error::Shape(format!(
            "{n} source values, {} next values, {} rewards",
            v_next.len(),
            rewards.len()
        )));
    }
    let x: Vec<f64> = (0..n).map(|j| rewards[j] + gamma * v_next[j] - v_from[j]).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("value objective exponent".into()));
    }
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let lse = max + (sum / n as f64).ln();
    let n0 = v_initial.len() as f64;
    let value = (1.0 - gamma) * v_initial.iter().sum::<f64>() / n0 + lse;
    if !value.is_finite() {
        return Err(Error::NonFinite("value objective".into()));
    }
    let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
    Ok(KlLoss {
        value,
        grad_initial: vec![(1.0 - gamma) / n0; v_initial.len()],
        grad_from: p.iter().map(|p| -p).collect(),
        grad_next: p.iter().map(|p| gamma * p).collect(),
    })
}

pub fn value_shape(input: usize, hidden: &[usize]) -> MlpShape {
    MlpShape {
        input,
        hidden: hidden.to_vec(),
        output: 1,
        activation: Activation::Relu,
        head: OutputHead::ScalarLogit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorEntry {
    pub step: usize,
    pub max_abs_v: f64,
    pub min_v: f64,
    pub max_v: f64,
}

#[derive(Debug, Clone)]
pub struct ValueNet {
    pub net: Mlp,
    pub gamma: f64,
    /// Entry at step 0 and after every monitor interval.
    pub monitor: Vec<MonitorEntry>,
    /// Step at which the objective stopped being finite.
    pub diverged_at: Option<usize>,
    pub losses: Vec<f64>,
}

impl ValueNet {
    /// CSV with columns `step,max_abs_V,min_V,max_V`.
    pub fn monitor_csv(&self) -> String {
        let mut out = String::from("step,max_abs_V,min_V,max_V\n");
        for m in &self.monitor {
            writeln!(out, "{},{},{},{}", m.step, m.max_abs_v, m.min_v, m.max_v).expect("infallible");
        }
        out
    }

    pub fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(states.nrows());
        for start in (0..states.nrows()).step_by(4096) {
            let end = (start + 4096).min(states.nrows());
            let y = self
                .net
                .predict(&states.slice(ndarray::s![start..end, ..]).to_owned())?;
            out.extend(y.column(0).iter().copied());
        }
        Ok(out)
    }
}

fn monitor_entry(net: &Mlp, states: &Array2<f64>, step: usize) -> Result<MonitorEntry> {
    let v = net.predict(states)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut finite = true;
    for &x in v.iter() {
        finite &= x.is_finite();
        lo = lo.min(x);
        hi = hi.max(x);
    }
    Ok(if finite {
        MonitorEntry {
            step,
            max_abs_v: lo.abs().max(hi.abs()),
            min_v: lo,
            max_v: hi,
        }
    } else {
        MonitorEntry {
            step,
            max_abs_v: f64::INFINITY,
            min_v: f64::NAN,
            max_v: f64::NAN,
        }
    })
}

/// Trains `V` on the kept transitions. `states` are the standardized rows the
/// transitions index and `rewards` holds `R` per row. A non-finite objective
/// ends training and is reported through `diverged_at`.
pub fn train_value(
    states: &Array2<f64>,
    rewards: &[f64],
    transitions: &Transitions,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ValueNet> {
    if transitions.is_empty() || transitions.initial.is_empty() {
        return Err(Error::Empty("no transitions to train the value function on".into()));
    }
    if rewards.len() != states.nrows() {
        return Err(Error::Shape(format!(
            "{} rewards for {} states",
            rewards.len(),
            states.nrows()
        )));
    }
    let gamma = cfg.gamma_v;
    let mut net = Mlp::init(&value_shape(states.ncols(), &cfg.value_hidden), &mut stream(seed, "value-init"))?;
    let mut adam = AdamState::new(&net.tensor_sizes());
    let mut init_sampler =
        MinibatchSampler::new(transitions.initial.len(), cfg.batch_value, stream(seed, "value-initial"))?;
    let mut tuple_sampler =
        MinibatchSampler::new(transitions.len(), cfg.batch_value, stream(seed, "value-tuples"))?;
    let mut monitor = vec![monitor_entry(&net, states, 0)?];
    let mut losses = Vec::with_capacity(cfg.steps_value);
    let mut diverged_at = None;
    let b = cfg.batch_value;
    for step in 0..cfg.steps_value {
        let init_rows: Vec<usize> = init_sampler
            .next_rows()
            .into_iter()
            .map(|i| transitions.initial[i])
            .collect();
        let picked: Vec<Transition> = tuple_sampler
            .next_rows()
            .into_iter()
            .map(|i| transitions.tuples[i])
            .collect();
        let from: Vec<usize> = picked.iter().map(|t| t.from).collect();
        let next: Vec<usize> = picked.iter().map(|t| t.next).collect();
        let r: Vec<f64> = from.iter().map(|&i| rewards[i]).collect();
        let x = concatenate![
            Axis(0),
            states.select(Axis(0), &init_rows),
            states.select(Axis(0), &from),
            states.select(Axis(0), &next)
        ];
        let (out, cache) = net.forward(&x)?;
        let v = out.column(0).to_vec();
        let loss = match smodice_kl_loss(&v[..b], &v[b..2 * b], &v[2 * b..], &r, gamma) {
            Ok(l) => l,
            Err(e) => {
                log::warn!("value objective diverged at step {step}: {e}");
                diverged_at = Some(step);
                break;
            }
        };
        let upstream = Array2::from_shape_vec(
            (3 * b, 1),
            loss.grad_initial
                .iter()
                .chain(&loss.grad_from)
                .chain(&loss.grad_next)
                .copied()
                .collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        let (grads, _) = net.backward(&cache, &upstream)?;
        let tensors = grads.tensors();
        if let Err(e) = adam_step(&mut net.tensors_mut(), &tensors, &mut adam, cfg.lr_value, 0.0) {
            log::warn!("value update failed at step {step}: {e}");
            diverged_at = Some(step);
            break;
        }
        losses.push(loss.value);
        let done = step + 1;
        if done % cfg.monitor_interval == 0 {
            monitor.push(monitor_entry(&net, states, done)?);
        }
    }
    if let Some(step) = diverged_at {
        monitor.push(monitor_entry(&net, states, step)?);
    }
    Ok(ValueNet {
        net,
        gamma,
        monitor,
        diverged_at,
        losses,
    })
}

/// Behavior-cloning weights over the kept tuples, laid out like
/// [`Transitions::kept_dataset`].
#[derive(Debug, Clone)]
pub struct DiceWeights {
    pub table: WeightTable,
    /// Number of log-weights clamped at [`MAX_LOG_WEIGHT`].
    pub clamped: usize,
    /// Amount subtracted from every log-weight (0 unless all underflowed).
    pub shift: f64,
}

/// `exp(R(s) + gamma * V(s') - V(s))` per kept tuple, normalized to mean 1.
/// When every weight underflows, log-weights are first shifted so that the
/// largest is 0; normalized weights are unaffected by the shift.
pub fn extract_dice_weights(
    value: &ValueNet,
    states: &Array2<f64>,
    rewards: &[f64],
    transitions: &Transitions,
) -> Result<DiceWeights> {
    let v = value.values(states)?;
    let mut log_w: Vec<Vec<f64>> = Vec::new();
    let mut current = None;
    let mut clamped = 0;
    for tr in &transitions.tuples {
        let lw = rewards[tr.from] + value.gamma * v[tr.next] - v[tr.from];
        if lw.is_nan() {
            return Err(Error::NonFinite(format!(
                "weight of trajectory {} step {}",
                tr.trajectory, tr.step
            )));
        }
        let lw = if lw > MAX_LOG_WEIGHT {
            clamped += 1;
            MAX_LOG_WEIGHT
        } else {
            lw
        };
        if current != Some(tr.trajectory) {
            current = Some(tr.trajectory);
            log_w.push(Vec::new());
        }
        log_w.last_mut().expect("pushed above").push(lw);
    }
    if clamped > 0 {
        log::warn!("{clamped} value-derived weights clamped at exp({MAX_LOG_WEIGHT})");
    }
    let max = log_w.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut shift = 0.0;
    if !log_w.iter().flatten().any(|lw| lw.exp() > 0.0) && max.is_finite() {
        log::warn!("all value-derived weights underflow; shifting log-weights by {max}");
        shift = max;
    }
    let raw = log_w
        .into_iter()
        .map(|t| t.into_iter().map(|lw| (lw - shift).exp()).collect())
        .collect();
    Ok(DiceWeights {
        table: WeightTable::from_raw(raw, true)?,
        clamped,
        shift,
    })
}

/// Plain cross-entropy discriminator (task-specific vs task-agnostic states)
/// with gradient penalty, giving the reward of the value objective.
pub fn train_dice_discriminator(
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<Mlp> {
    let mut net = Mlp::init(&discriminator_shape(positives.ncols(), &cfg.disc_hidden), rng)?;
    train_classifier(
        &mut net,
        positives,
        negatives,
        Objective::CrossEntropy,
        &ClassifierSettings::from_config(cfg, cfg.steps_formal),
        rng,
    )?;
    Ok(net)
}
