//! Two-step positive-unlabeled discriminator training and the state score
//! `R(s) = log(c(s) / (1 - c(s)))`.
//!
//! Step one trains `c'` with the debiased positive-unlabeled objective,
//! using task-specific states as positives and every task-agnostic state as
//! unlabeled. The task-agnostic trajectories whose mean `R'` is lowest form
//! the safe-negative set. Step two trains `c` on positives versus safe
//! negatives with a `beta2`-mixture of the debiased objective and plain
//! cross-entropy. Both steps add a gradient penalty on the pre-sigmoid logit.
//!
//! All losses are evaluated on clamped logits `z`, with
//! `-log c = softplus(-z)` and `-log(1 - c) = softplus(z)`.

use std::fmt::Write as _;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng as _;

use crate::config::{LossVariant, RunConfig};
use crate::data::{Dataset, FlatData, MinibatchSampler, NormStats};
use crate::error::{Error, Result};
use crate::nn::{adam_step, sigmoid, Activation, AdamState, Mlp, MlpGrads, MlpShape, OutputHead};
use crate::rng::{stream, Rng};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss value plus its gradient with respect to each input logit.
#[derive(Debug, Clone)]
pub struct LogitLoss {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_u: Vec<f64>,
    /// Whether the max(0, .) term contributed (always false for unclamped
    /// and cross-entropy losses).
    pub clamp_active: bool,
}

fn mean(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
}

fn nonempty(p: &[f64], u: &[f64]) -> Result<()> {
    if p.is_empty() || u.is_empty() {
        return Err(Error::Empty("loss needs nonempty positive and unlabeled batches".into()));
    }
    Ok(())
}

/// Debiased positive-unlabeled loss on logits.
pub fn debiased_loss_logits(
    zp: &[f64],
    zu: &[f64],
    eta_p: f64,
    variant: LossVariant,
) -> Result<LogitLoss> {
    nonempty(zp, zu)?;
    let (np, nu) = (zp.len() as f64, zu.len() as f64);
    let pos_risk = mean(zp, |z| softplus(-z));
    let pos_as_neg = mean(zp, softplus);
    let unl_as_neg = mean(zu, softplus);
    // d/dz softplus(-z) = sigmoid(z) - 1, d/dz softplus(z) = sigmoid(z)
    let mut grad_p: Vec<f64> = zp.iter().map(|&z| eta_p * (sigmoid(z) - 1.0) / np).collect();
    let mut grad_u = vec![0.0; zu.len()];
    // Estimated negative risk and the sign with which it enters the loss.
    let neg_risk = unl_as_neg - eta_p * pos_as_neg;
    let (value, term_sign, active) = match variant {
        LossVariant::Nnpu => {
            let active = neg_risk > 0.0;
            (eta_p * pos_risk + neg_risk.max(0.0), 1.0, active)
        }
        LossVariant::PaperLiteral => {
            // -[eta_p E_P log c + max(0, E_U log(1-c) - eta_p E_P log(1-c))]
            let inner = -neg_risk;
            let active = inner > 0.0;
            (eta_p * pos_risk - inner.max(0.0), 1.0, active)
        }
        LossVariant::Unclamped => (eta_p * pos_risk + neg_risk, 1.0, true),
    };
    if active {
        for (g, &z) in grad_p.iter_mut().zip(zp) {
            *g -= term_sign * eta_p * sigmoid(z) / np;
        }
        for (g, &z) in grad_u.iter_mut().zip(zu) {
            *g += term_sign * sigmoid(z) / nu;
        }
    }
    Ok(LogitLoss {
        value,
        grad_p,
        grad_u,
        clamp_active: active && variant != LossVariant::Unclamped,
    })
}

/// Binary cross-entropy on logits: `-mean_P log c - mean_N log(1 - c)`.
pub fn cross_entropy_logits(zp: &[f64], zn: &[f64]) -> Result<LogitLoss> {
    nonempty(zp, zn)?;
    let (np, nn) = (zp.len() as f64, zn.len() as f64);
    Ok(LogitLoss {
        value: mean(zp, |z| softplus(-z)) + mean(zn, softplus),
        grad_p: zp.iter().map(|&z| (sigmoid(z) - 1.0) / np).collect(),
        grad_u: zn.iter().map(|&z| sigmoid(z) / nn).collect(),
        clamp_active: false,
    })
}

fn prob_to_logit(c: f64) -> Result<f64> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {c} outside (0, 1)")));
    }
    Ok((c / (1.0 - c)).ln())
}

/// Debiased loss evaluated on discriminator probabilities.
pub fn debiased_loss(
    c_on_p: &[f64],
    c_on_u: &[f64],
    eta_p: f64,
    variant: LossVariant,
) -> Result<f64> {
    nonempty(c_on_p, c_on_u)?;
    let neg_log = |c: f64| -c.ln();
    let neg_log1m = |c: f64| -(-c).ln_1p();
    for &c in c_on_p.iter().chain(c_on_u) {
        prob_to_logit(c)?;
    }
    let pos_risk = mean(c_on_p, neg_log);
    let neg_risk = mean(c_on_u, neg_log1m) - eta_p * mean(c_on_p, neg_log1m);
    Ok(match variant {
        LossVariant::Nnpu => eta_p * pos_risk + neg_risk.max(0.0),
        LossVariant::PaperLiteral => eta_p * pos_risk - (-neg_risk).max(0.0),
        LossVariant::Unclamped => eta_p * pos_risk + neg_risk,
    })
}

/// Cross-entropy evaluated on discriminator probabilities.
pub fn cross_entropy_loss(c_on_p: &[f64], c_on_n: &[f64]) -> Result<f64> {
    nonempty(c_on_p, c_on_n)?;
    for &c in c_on_p.iter().chain(c_on_n) {
        prob_to_logit(c)?;
    }
    Ok(mean(c_on_p, |c| -c.ln()) + mean(c_on_n, |c| -(-c).ln_1p()))
}

/// Pairwise interpolates `u * p_i + (1 - u) * q_i` with `u ~ Uniform(0, 1)`
/// drawn per pair.
pub fn interpolate(batch_p: &Array2<f64>, batch_u: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
    if batch_p.dim() != batch_u.dim() {
        return Err(Error::Shape(format!(
            "interpolation batches differ: {:?} vs {:?}",
            batch_p.dim(),
            batch_u.dim()
        )));
    }
    let mut out = batch_u.clone();
    for (mut row, p) in out.rows_mut().into_iter().zip(batch_p.rows()) {
        let u: f64 = rng.gen_range(0.0..1.0);
        row.zip_mut_with(&p, |q, &pv| *q = u * pv + (1.0 - u) * *q);
    }
    Ok(out)
}

/// `mean((|grad_x logit(x)| - 1)^2)` over the rows of `points`, with its
/// parameter gradient.
pub fn gradient_penalty_at(net: &Mlp, points: &Array2<f64>) -> Result<(f64, MlpGrads)> {
    if points.nrows() == 0 {
        return Ok((0.0, MlpGrads::zeros_like(net)));
    }
    let (g, cache) = net.input_gradients(points)?;
    let b = points.nrows() as f64;
    let mut gbar = Array2::zeros(g.raw_dim());
    let mut value = 0.0;
    for (i, row) in g.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        value += (norm - 1.0).powi(2);
        if norm > 0.0 {
            let scale = 2.0 * (norm - 1.0) / (norm * b);
            gbar.row_mut(i).assign(&row.mapv(|v| v * scale));
        }
    }
    let grads = net.input_gradients_backward(&cache, &gbar)?;
    Ok((value / b, grads))
}

/// Gradient penalty over random interpolates of two equal-size batches.
pub fn gradient_penalty(
    net: &Mlp,
    batch_p: &Array2<f64>,
    batch_u: &Array2<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let points = interpolate(batch_p, batch_u, rng)?;
    gradient_penalty_at(net, &points).map(|(v, _)| v)
}

/// Training objective of one discriminator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Debiased { eta_p: f64, variant: LossVariant },
    CrossEntropy,
    /// `beta2 * debiased + (1 - beta2) * cross-entropy`.
    Mixed {
        beta2: f64,
        eta_p: f64,
        variant: LossVariant,
    },
}

impl Objective {
    fn evaluate(&self, zp: &[f64], zu: &[f64]) -> Result<LogitLoss> {
        match *self {
            Objective::Debiased { eta_p, variant } => debiased_loss_logits(zp, zu, eta_p, variant),
            Objective::CrossEntropy => cross_entropy_logits(zp, zu),
            Objective::Mixed {
                beta2,
                eta_p,
                variant,
            } => {
                if beta2 == 0.0 {
                    return cross_entropy_logits(zp, zu);
                }
                if beta2 == 1.0 {
                    return debiased_loss_logits(zp, zu, eta_p, variant);
                }
                let a = debiased_loss_logits(zp, zu, eta_p, variant)?;
                let b = cross_entropy_logits(zp, zu)?;
                let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
                    x.iter().zip(y).map(|(x, y)| beta2 * x + (1.0 - beta2) * y).collect()
                };
                Ok(LogitLoss {
                    value: beta2 * a.value + (1.0 - beta2) * b.value,
                    grad_p: mix(&a.grad_p, &b.grad_p),
                    grad_u: mix(&a.grad_u, &b.grad_u),
                    clamp_active: a.clamp_active,
                })
            }
        }
    }
}

/// Per-step record of a discriminator run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStep {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
}

/// Hyperparameters of one classifier training run.
#[derive(Debug, Clone)]
pub struct ClassifierSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_penalty_coef: f64,
    pub logit_clamp: f64,
}

impl ClassifierSettings {
    pub fn from_config(cfg: &RunConfig, steps: usize) -> Self {
        ClassifierSettings {
            steps,
            batch: cfg.batch_disc,
            lr: cfg.lr_disc,
            grad_penalty_coef: cfg.grad_penalty_coef,
            logit_clamp: cfg.logit_clamp,
        }
    }
}

pub fn discriminator_shape(input: usize, hidden: &[usize]) -> MlpShape {
    MlpShape {
        input,
        hidden: hidden.to_vec(),
        output: 1,
        activation: Activation::Tanh,
        head: OutputHead::ScalarLogit,
    }
}

/// Runs `settings.steps` Adam steps of `objective + coef * penalty` on
/// standardized positive and unlabeled states. Returns the per-step log.
pub fn train_classifier(
    net: &mut Mlp,
    positives: &Array2<f64>,
    unlabeled: &Array2<f64>,
    objective: Objective,
    settings: &ClassifierSettings,
    rng: &mut Rng,
) -> Result<Vec<DiscStep>> {
    if positives.nrows() == 0 || unlabeled.nrows() == 0 {
        return Err(Error::Empty("discriminator training needs positive and unlabeled states".into()));
    }
    let mut adam = AdamState::new(&net.tensor_sizes());
    let mut log = Vec::with_capacity(settings.steps);
    let sampler_seed: u64 = rng.gen();
    let mut p_sampler = MinibatchSampler::new(positives.nrows(), settings.batch, crate::rng::seeded(sampler_seed))?;
    let mut u_sampler = MinibatchSampler::new(unlabeled.nrows(), settings.batch, crate::rng::seeded(sampler_seed ^ 0x5555))?;
    let b = settings.batch;
    let clamp = settings.logit_clamp;
    for step in 0..settings.steps {
        let bp = positives.select(Axis(0), &p_sampler.next_rows());
        let bu = unlabeled.select(Axis(0), &u_sampler.next_rows());
        let x = concatenate![Axis(0), bp, bu];
        let (out, cache) = net.forward(&x)?;
        let z: Vec<f64> = out.column(0).iter().map(|v| v.clamp(-clamp, clamp)).collect();
        let loss = objective.evaluate(&z[..b], &z[b..])?;
        let mut upstream = Array2::zeros((2 * b, 1));
        for (i, g) in loss.grad_p.iter().chain(&loss.grad_u).enumerate() {
            // the clamp passes no gradient outside its range
            if out[[i, 0]].abs() < clamp {
                upstream[[i, 0]] = *g;
            }
        }
        let (mut grads, _) = net.backward(&cache, &upstream)?;
        let mut penalty = 0.0;
        if settings.grad_penalty_coef != 0.0 {
            let points = interpolate(&bp, &bu, rng)?;
            let (value, g) = gradient_penalty_at(net, &points)?;
            penalty = value;
            grads.add_scaled(&g, settings.grad_penalty_coef);
        }
        let total = loss.value + settings.grad_penalty_coef * penalty;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} penalty {}", loss.value, penalty),
            });
        }
        let tensors = grads.tensors();
        adam_step(&mut net.tensors_mut(), &tensors, &mut adam, settings.lr, 0.0).map_err(|e| {
            Error::Diverged {
                step,
                detail: e.to_string(),
            }
        })?;
        log.push(DiscStep {
            step,
            loss: loss.value,
            penalty,
        });
    }
    Ok(log)
}

/// Clamped logits of every row.
pub fn clamped_logits(net: &Mlp, states: &Array2<f64>, clamp: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.nrows());
    // chunked to bound memory on large datasets
    for start in (0..states.nrows()).step_by(4096) {
        let end = (start + 4096).min(states.nrows());
        let y = net.predict(&states.slice(s![start..end, ..]).to_owned())?;
        out.extend(y.column(0).iter().map(|v| v.clamp(-clamp, clamp)));
    }
    Ok(out)
}

/// Pretrains `c'` on standardized task-specific positives versus every
/// standardized task-agnostic state with the debiased objective.
pub fn pretrain_cprime(
    positives: &Array2<f64>,
    unlabeled: &Array2<f64>,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(Mlp, Vec<DiscStep>)> {
    let mut net = Mlp::init(&discriminator_shape(positives.ncols(), &cfg.disc_hidden), rng)?;
    let log = train_classifier(
        &mut net,
        positives,
        unlabeled,
        Objective::Debiased {
            eta_p: cfg.eta_p,
            variant: cfg.loss_variant,
        },
        &ClassifierSettings::from_config(cfg, cfg.steps_pretrain),
        rng,
    )?;
    Ok((net, log))
}

/// Ids of the `floor(beta1 * m)` trajectories with the lowest mean score,
/// ties broken by ascending id. Returned in ascending id order.
pub fn select_lowest(trajectory_means: &[f64], beta1: f64) -> Result<Vec<u64>> {
    let m = trajectory_means.len();
    let k = (beta1 * m as f64).floor() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "beta1 = {beta1} selects no safe negatives out of {m} trajectories"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        trajectory_means[a]
            .total_cmp(&trajectory_means[b])
            .then(a.cmp(&b))
    });
    let mut ids: Vec<u64> = order[..k.min(m)].iter().map(|&i| i as u64).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-trajectory means of a per-row score.
pub fn trajectory_means(flat: &FlatData, scores: &[f64]) -> Vec<f64> {
    flat.offsets
        .windows(2)
        .map(|w| scores[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}

/// Safe negatives: trajectories of `ta` whose mean clamped `c'` logit is
/// among the lowest `beta1` fraction.
pub fn select_safe_negatives(
    c_prime: &Mlp,
    ta: &FlatData,
    beta1: f64,
    logit_clamp: f64,
) -> Result<Vec<u64>> {
    if !(beta1 > 0.0 && beta1 < 1.0) {
        return Err(Error::InvalidArgument("beta1 must lie in (0, 1)".into()));
    }
    let scores = clamped_logits(c_prime, &ta.states, logit_clamp)?;
    select_lowest(&trajectory_means(ta, &scores), beta1)
}

/// Rows of `flat` that belong to the given trajectories.
pub fn rows_of(flat: &FlatData, ids: &[u64]) -> Vec<usize> {
    ids.iter()
        .flat_map(|&id| flat.offsets[id as usize]..flat.offsets[id as usize + 1])
        .collect()
}

/// Formal training of `c` on positives versus safe negatives.
pub fn train_formal(
    positives: &Array2<f64>,
    safe_negatives: &Array2<f64>,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(Mlp, Vec<DiscStep>)> {
    if safe_negatives.nrows() == 0 {
        return Err(Error::Empty("no safe-negative states".into()));
    }
    let mut net = Mlp::init(&discriminator_shape(positives.ncols(), &cfg.disc_hidden), rng)?;
    let objective = Objective::Mixed {
        beta2: cfg.beta2,
        eta_p: cfg.eta_p,
        variant: cfg.loss_variant,
    };
    let log = train_classifier(
        &mut net,
        positives,
        safe_negatives,
        objective,
        &ClassifierSettings::from_config(cfg, cfg.steps_formal),
        rng,
    )?;
    Ok((net, log))
}

/// Both trained discriminators and the safe-negative selection.
#[derive(Debug, Clone)]
pub struct DiscriminatorPair {
    pub c_prime: Mlp,
    pub c: Mlp,
    pub safe_negative_ids: Vec<u64>,
    pub eta_p: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pretrain_log: Vec<DiscStep>,
    pub formal_log: Vec<DiscStep>,
}

/// Full two-step training. Inputs are standardized with `stats` (the
/// task-agnostic statistics).
pub fn train_two_step(
    ts: &Dataset,
    ta: &Dataset,
    stats: &NormStats,
    cfg: &RunConfig,
    seed: u64,
) -> Result<DiscriminatorPair> {
    let positives = ts.flatten(stats).states;
    let ta_flat = ta.flatten(stats);
    let (c_prime, pretrain_log) =
        pretrain_cprime(&positives, &ta_flat.states, cfg, &mut stream(seed, "disc-pretrain"))?;
    let safe = select_safe_negatives(&c_prime, &ta_flat, cfg.beta1, cfg.logit_clamp)?;
    let negatives = ta_flat.gather_states(&rows_of(&ta_flat, &safe));
    let (c, formal_log) = train_formal(&positives, &negatives, cfg, &mut stream(seed, "disc-formal"))?;
    Ok(DiscriminatorPair {
        c_prime,
        c,
        safe_negative_ids: safe,
        eta_p: cfg.eta_p,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        pretrain_log,
        formal_log,
    })
}

/// Per-(trajectory, step) state score.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardField {
    /// `values[trajectory][step]`.
    pub values: Vec<Vec<f64>>,
    pub clamp: f64,
}

impl RewardField {
    pub fn get(&self, trajectory: usize, step: usize) -> Option<f64> {
        self.values.get(trajectory).and_then(|t| t.get(step)).copied()
    }

    /// Discriminator probabilities `c(s) = sigmoid(R(s))`.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|t| t.iter().map(|&r| sigmoid(r)).collect())
            .collect()
    }

    /// CSV with columns `trajectory_id,step,R`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory_id,step,R\n");
        for (t, vals) in self.values.iter().enumerate() {
            for (i, r) in vals.iter().enumerate() {
                writeln!(out, "{t},{i},{r}").expect("infallible");
            }
        }
        out
    }
}

/// `R(s) = clamp(logit c(s), -clamp, clamp)` for every state of `ta`.
pub fn reward_field(c: &Mlp, ta: &FlatData, logit_clamp: f64) -> Result<RewardField> {
    let scores = clamped_logits(c, &ta.states, logit_clamp)?;
    let values = ta
        .offsets
        .windows(2)
        .map(|w| scores[w[0]..w[1]].to_vec())
        .collect();
    Ok(RewardField {
        values,
        clamp: logit_clamp,
    })
}

/// Reward from a clamped probability, for callers holding `c(s)` directly.
pub fn reward_from_probability(c: f64, logit_clamp: f64) -> Result<f64> {
    Ok(prob_to_logit(c)?.clamp(-logit_clamp, logit_clamp))
}
