//! Synthetic environments, scripted data generation, dataset corruption and
//! evaluation rollouts.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind, Direction, SourceTag, Trajectory};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::{stream, Rng};

pub const ACTION_GAIN: f64 = 0.1;
pub const DT: f64 = 0.1;

/// Point mass on the plane with state `(x, y, vx, vy)` and acceleration
/// actions in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointmazeEnv {
    pub horizon: usize,
    /// An episode succeeds once `x <= success_x` while `|y| <= lateral_slope * |x|`,
    /// i.e. the point has travelled far enough inside a cone around the
    /// leftward direction.
    pub success_x: f64,
    pub lateral_slope: f64,
    /// Half-width of the uniform box the start position is drawn from.
    pub start_jitter: f64,
}

impl Default for PointmazeEnv {
    fn default() -> Self {
        PointmazeEnv {
            horizon: 100,
            success_x: -5.0,
            lateral_slope: 0.5,
            start_jitter: 0.0,
        }
    }
}

impl PointmazeEnv {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;

    pub fn with_start_jitter(self, start_jitter: f64) -> Self {
        PointmazeEnv { start_jitter, ..self }
    }

    pub fn reset(&self, rng: &mut Rng) -> [f64; 4] {
        if self.start_jitter > 0.0 {
            let j = self.start_jitter;
            [rng.gen_range(-j..=j), rng.gen_range(-j..=j), 0.0, 0.0]
        } else {
            [0.0; 4]
        }
    }

    /// `v' = clip(v + 0.1 a, -1, 1)`, `p' = p + 0.1 v'`. Actions are clipped
    /// to `[-1, 1]` first.
    pub fn step(state: &[f64; 4], action: &[f64]) -> [f64; 4] {
        let mut next = [0.0; 4];
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            let v = (state[2 + i] + ACTION_GAIN * a).clamp(-1.0, 1.0);
            next[2 + i] = v;
            next[i] = state[i] + DT * v;
        }
        next
    }

    pub fn is_success(&self, state: &[f64; 4]) -> bool {
        state[0] <= self.success_x && state[1].abs() <= self.lateral_slope * state[0].abs()
    }
}

/// Anything that maps a batch of raw states to a batch of actions.
pub trait Actor {
    fn action_dim(&self) -> usize;
    fn act(&self, states: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>>;
}

/// Evaluation mode: squashed mean action, no sampling.
impl Actor for Policy {
    fn action_dim(&self) -> usize {
        Policy::action_dim(self)
    }

    fn act(&self, states: &Array2<f64>, _rng: &mut Rng) -> Result<Array2<f64>> {
        self.act_batch(states)
    }
}

/// Pushes along one direction with optional Gaussian action noise.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedExpert {
    pub direction: Direction,
    pub noise_std: f64,
}

impl Actor for ScriptedExpert {
    fn action_dim(&self) -> usize {
        2
    }

    fn act(&self, states: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        let unit = self.direction.unit();
        let noise = Normal::new(0.0, self.noise_std.max(0.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Array2::from_shape_fn((states.nrows(), 2), |(_, j)| {
            let n = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (unit[j] + n).clamp(-1.0, 1.0)
        }))
    }
}

/// Uniform actions on `[-1, 1]^k`.
#[derive(Debug, Clone, Copy)]
pub struct RandomActor {
    pub action_dim: usize,
}

impl Actor for RandomActor {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn act(&self, states: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((states.nrows(), self.action_dim), |_| rng.gen_range(-1.0..=1.0)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStats {
    pub success_rate: f64,
    /// Number of steps spent inside the success region, per episode.
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

/// Runs `n_episodes` episodes side by side. An episode whose state becomes
/// non-finite stops and counts as a failure.
pub fn rollout(actor: &dyn Actor, env: &PointmazeEnv, n_episodes: usize, rng: &mut Rng) -> Result<RolloutStats> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one episode".into()));
    }
    if actor.action_dim() != PointmazeEnv::ACTION_DIM {
        return Err(Error::Shape(format!(
            "actor has {} action dims, environment expects {}",
            actor.action_dim(),
            PointmazeEnv::ACTION_DIM
        )));
    }
    let mut states: Vec<[f64; 4]> = (0..n_episodes).map(|_| env.reset(rng)).collect();
    let mut alive = vec![true; n_episodes];
    let mut successes = vec![false; n_episodes];
    let mut returns = vec![0.0; n_episodes];
    for _ in 0..env.horizon {
        let live: Vec<usize> = (0..n_episodes).filter(|&i| alive[i]).collect();
        if live.is_empty() {
            break;
        }
        let batch = Array2::from_shape_fn((live.len(), 4), |(r, j)| states[live[r]][j]);
        let actions = actor.act(&batch, rng)?;
        for (r, &i) in live.iter().enumerate() {
            let a = [actions[[r, 0]], actions[[r, 1]]];
            if a.iter().any(|v| !v.is_finite()) {
                alive[i] = false;
                successes[i] = false;
                continue;
            }
            let next = PointmazeEnv::step(&states[i], &a);
            if next.iter().any(|v| !v.is_finite()) {
                alive[i] = false;
                successes[i] = false;
                continue;
            }
            states[i] = next;
            if env.is_success(&next) {
                successes[i] = true;
                returns[i] += 1.0;
            }
        }
    }
    for i in 0..n_episodes {
        if !alive[i] {
            returns[i] = 0.0;
        }
    }
    let success_rate = successes.iter().filter(|&&s| s).count() as f64 / n_episodes as f64;
    Ok(RolloutStats {
        success_rate,
        returns,
        successes,
    })
}

/// Records one trajectory of `actor` from the origin: `horizon` states with
/// the action taken in each.
pub fn record_trajectory(actor: &dyn Actor, env: &PointmazeEnv, tag: SourceTag, rng: &mut Rng) -> Result<Trajectory> {
    let mut s = [0.0; 4];
    let mut states = Vec::with_capacity(env.horizon);
    let mut actions = Vec::with_capacity(env.horizon);
    for _ in 0..env.horizon {
        let a = actor.act(&Array2::from_shape_vec((1, 4), s.to_vec()).expect("1x4"), rng)?;
        let a = vec![a[[0, 0]], a[[0, 1]]];
        states.push(s.to_vec());
        s = PointmazeEnv::step(&s, &a);
        actions.push(a);
    }
    Ok(Trajectory::new(tag, states, Some(actions)))
}

/// `4 * n_per_direction` scripted trajectories, directions interleaved
/// L, R, U, D. Each trajectory draws from its own seed derived from `rng`.
pub fn gen_pointmaze(n_per_direction: usize, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    if n_per_direction == 0 {
        return Err(Error::InvalidArgument("n_per_direction must be >= 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std = {noise_std}")));
    }
    let env = PointmazeEnv::default();
    let base: u64 = rng.gen();
    let trajectories = (0..4 * n_per_direction)
        .into_par_iter()
        .map(|index| {
            let direction = Direction::ALL[index % 4];
            let expert = ScriptedExpert { direction, noise_std };
            let mut trng = stream(base, &format!("trajectory-{index}"));
            record_trajectory(&expert, &env, SourceTag::ScriptedDirection(direction), &mut trng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(DatasetKind::TaskAgnostic, 4, 2, trajectories)
}

/// How much of each selected trajectory becomes task-specific data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleMode {
    Full,
    FinalState,
}

/// State-only examples from the trajectories carrying `tag`.
pub fn make_task_specific_examples(dataset: &Dataset, tag: SourceTag, mode: ExampleMode) -> Result<Dataset> {
    let trajectories: Vec<Trajectory> = dataset
        .trajectories
        .iter()
        .filter(|t| t.source_tag == tag)
        .map(|t| match mode {
            ExampleMode::Full => Trajectory::new(t.source_tag, t.states.clone(), None),
            ExampleMode::FinalState => Trajectory::new(t.source_tag, vec![t.last_state().to_vec()], None),
        })
        .collect();
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument(format!("no trajectory tagged {tag}")));
    }
    Dataset::new(DatasetKind::TaskSpecific, dataset.state_dim, 0, trajectories)
}

/// Result of [`corrupt_remove_every_x`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub dataset: Dataset,
    /// Trajectories left without any state.
    pub dropped: usize,
}

/// Removes pairs `x-1, 2x-1, ...` (0-based) inside every trajectory.
/// Applying it twice with different periods depends on the order.
pub fn corrupt_remove_every_x(dataset: &Dataset, x: usize) -> Result<Corrupted> {
    if x < 2 {
        return Err(Error::InvalidArgument(format!("removal period x = {x} must be >= 2")));
    }
    let keep = |i: &usize| !(i + 1).is_multiple_of(x);
    let mut dropped = 0;
    let mut trajectories = Vec::with_capacity(dataset.trajectories.len());
    for t in &dataset.trajectories {
        let idx: Vec<usize> = (0..t.len()).filter(keep).collect();
        if idx.is_empty() {
            dropped += 1;
            continue;
        }
        let states = idx.iter().map(|&i| t.states[i].clone()).collect();
        let actions = t
            .actions
            .as_ref()
            .map(|a| idx.iter().map(|&i| a[i].clone()).collect());
        trajectories.push(Trajectory::new(t.source_tag, states, actions));
    }
    Ok(Corrupted {
        dataset: Dataset::new(dataset.kind, dataset.state_dim, dataset.action_dim, trajectories)?,
        dropped,
    })
}

/// Keeps the first `head` and last `tail` states of every trajectory, as two
/// trajectories when a gap separates them.
pub fn truncate_head_tail(dataset: &Dataset, head: usize, tail: usize) -> Result<Dataset> {
    if head + tail == 0 {
        return Err(Error::InvalidArgument("head + tail must be >= 1".into()));
    }
    let mut out = Vec::new();
    for t in &dataset.trajectories {
        let n = t.len();
        if head + tail >= n {
            out.push(t.clone());
            continue;
        }
        let segment = |range: std::ops::Range<usize>| {
            Trajectory::new(
                t.source_tag,
                t.states[range.clone()].to_vec(),
                t.actions.as_ref().map(|a| a[range].to_vec()),
            )
        };
        if head > 0 {
            out.push(segment(0..head));
        }
        if tail > 0 {
            out.push(segment(n - tail..n));
        }
    }
    Dataset::new(dataset.kind, dataset.state_dim, dataset.action_dim, out)
}

/// Deterministic chain of `n` states on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMdp {
    pub n: usize,
}

impl ChainMdp {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("chain needs at least 3 states, got {n}")));
        }
        Ok(ChainMdp { n })
    }

    pub fn position(&self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }
}

/// `n_trajectories` right-walks over the whole chain; every action is `+1`.
pub fn gen_chain(n: usize, n_trajectories: usize) -> Result<Dataset> {
    let chain = ChainMdp::new(n)?;
    let walk = Trajectory::new(
        SourceTag::Other,
        (0..n).map(|i| vec![chain.position(i)]).collect(),
        Some(vec![vec![1.0]; n]),
    );
    Dataset::new(DatasetKind::TaskAgnostic, 1, 1, vec![walk; n_trajectories])
}
