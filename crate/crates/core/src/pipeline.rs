//! Experiment orchestration: scenario transforms, the per-method pipelines,
//! periodic evaluation and result files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LossVariant, RunConfig};
use crate::data::{Dataset, SourceTag};
use crate::dice::{extract_dice_weights, train_dice_discriminator, train_value, MonitorEntry, Transitions};
use crate::discriminator::{
    clamped_logits, discriminator_shape, reward_field, train_classifier, train_two_step, ClassifierSettings,
    Objective, RewardField,
};
use crate::envs::{corrupt_remove_every_x, rollout, truncate_head_tail, PointmazeEnv};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::{policy_to_json, train_policy, Policy};
use crate::report::{summarize, write_csv, CurveRow, SummaryRow};
use crate::rng::stream;
use crate::weights::{build_weight_table, WeightTable, WeightTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tailo,
    Bc,
    SmodiceKl,
    /// Two-step discriminator, `10 * c(s)` terms.
    OursV1,
    /// One-step unclamped discriminator, `exp(alpha * R)` terms.
    OursV2,
    /// One-step unclamped discriminator, `10 * c(s)` terms.
    OursV3,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Tailo,
        Method::Bc,
        Method::SmodiceKl,
        Method::OursV1,
        Method::OursV2,
        Method::OursV3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tailo => "tailo",
            Method::Bc => "bc",
            Method::SmodiceKl => "smodice_kl",
            Method::OursV1 => "ours_v1",
            Method::OursV2 => "ours_v2",
            Method::OursV3 => "ours_v3",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    /// Task-agnostic pairs removed every `x` steps.
    IncompleteTa,
    /// Task-specific trajectories cut to their head and tail.
    IncompleteTs,
    /// Task-specific data reduced to final states.
    ExampleBased,
    Ablation,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "standard" => Scenario::Standard,
            "incomplete_ta" => Scenario::IncompleteTa,
            "incomplete_ts" => Scenario::IncompleteTs,
            "example_based" => Scenario::ExampleBased,
            "ablation" => Scenario::Ablation,
            _ => return Err(Error::InvalidArgument(format!("unknown scenario {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub removal_x: Option<usize>,
    pub head: Option<usize>,
    pub tail: Option<usize>,
    /// Evaluation environment; `None` skips rollouts.
    pub env: Option<PointmazeEnv>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("at least one method is required".into()));
        }
        let has_ht = self.head.is_some() || self.tail.is_some();
        match self.scenario {
            Scenario::IncompleteTa if self.removal_x.is_none() => {
                Err(Error::InvalidArgument("incomplete_ta needs a removal period x".into()))
            }
            Scenario::IncompleteTs if !has_ht => {
                Err(Error::InvalidArgument("incomplete_ts needs head and/or tail".into()))
            }
            Scenario::Standard | Scenario::ExampleBased if self.removal_x.is_some() || has_ht => Err(
                Error::InvalidArgument("this scenario takes no corruption parameters".into()),
            ),
            _ => Ok(()),
        }
    }

    /// The task-specific data after the scenario's truncation.
    pub fn task_specific(&self, ts: &Dataset) -> Result<Dataset> {
        match self.scenario {
            Scenario::ExampleBased => truncate_head_tail(ts, 0, 1),
            _ if self.head.is_some() || self.tail.is_some() => {
                truncate_head_tail(ts, self.head.unwrap_or(0), self.tail.unwrap_or(0))
            }
            _ => Ok(ts.clone()),
        }
    }
}

/// One evaluation checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub success_rate: f64,
    pub loss: f64,
}

/// Everything one (method, seed) pair produced.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    /// Stage failure that zeroed the rest of the curve.
    pub aborted: Option<String>,
    /// The task-agnostic data behavior cloning saw.
    pub ta: Dataset,
    pub rewards: Option<RewardField>,
    pub weights: Option<WeightTable>,
    pub value_monitor: Option<Vec<MonitorEntry>>,
    pub value_diverged_at: Option<usize>,
    pub policy: Option<Policy>,
    /// Policy checkpoints as JSON, keyed by step.
    pub checkpoints: Vec<(usize, String)>,
}

/// Evaluation steps of a full run: 0, every interval, and the last step.
pub fn eval_steps(cfg: &RunConfig) -> Vec<usize> {
    let mut steps = vec![0];
    if cfg.eval_interval > 0 {
        steps.extend((1..=cfg.steps_bc / cfg.eval_interval).map(|k| k * cfg.eval_interval));
    }
    if *steps.last().expect("nonempty") != cfg.steps_bc {
        steps.push(cfg.steps_bc);
    }
    steps
}

fn is_abort(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::NonFinite(_))
}

/// Discriminators shared by several methods within one seed.
#[derive(Default)]
struct DiscCache {
    two_step: Option<Mlp>,
    one_step: Option<Mlp>,
}

fn one_step_discriminator(ts: &Dataset, ta: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Mlp> {
    let stats = &ta.norm_stats;
    let positives = ts.flatten(stats).states;
    let unlabeled = ta.flatten(stats).states;
    let mut rng = stream(seed, "disc-one-step");
    let mut net = Mlp::init(&discriminator_shape(positives.ncols(), &cfg.disc_hidden), &mut rng)?;
    let objective = Objective::Debiased {
        eta_p: cfg.eta_p,
        variant: LossVariant::Unclamped,
    };
    let settings = ClassifierSettings::from_config(cfg, cfg.steps_pretrain + cfg.steps_formal);
    train_classifier(&mut net, &positives, &unlabeled, objective, &settings, &mut rng)?;
    Ok(net)
}

struct Weighted {
    ta: Dataset,
    weights: WeightTable,
    rewards: Option<RewardField>,
    value_monitor: Option<Vec<MonitorEntry>>,
    value_diverged_at: Option<usize>,
}

/// A weighting failure, with whatever diagnostics were gathered before it.
struct StageError {
    error: Error,
    value_monitor: Option<Vec<MonitorEntry>>,
}

impl From<Error> for StageError {
    fn from(error: Error) -> Self {
        StageError {
            error,
            value_monitor: None,
        }
    }
}

fn weight_stage(
    method: Method,
    ts: &Dataset,
    ta_clean: &Dataset,
    ta: &Dataset,
    removal_x: Option<usize>,
    cfg: &RunConfig,
    seed: u64,
    cache: &mut DiscCache,
) -> std::result::Result<Weighted, StageError> {
    let plain = |weights, rewards| Weighted {
        ta: ta.clone(),
        weights,
        rewards,
        value_monitor: None,
        value_diverged_at: None,
    };
    let from_disc = |c: &Mlp, term: WeightTerm| -> Result<Weighted> {
        let field = reward_field(c, &ta.flatten(&ta.norm_stats), cfg.logit_clamp)?;
        let table = build_weight_table(&field, ta, cfg.alpha, cfg.gamma, cfg.normalize_weights, term)?;
        Ok(plain(table, Some(field)))
    };
    match method {
        Method::Bc => Ok(plain(WeightTable::uniform(ta), None)),
        Method::Tailo | Method::OursV1 => {
            if cache.two_step.is_none() {
                cache.two_step = Some(train_two_step(ts, ta, &ta.norm_stats, cfg, seed)?.c);
            }
            let term = if method == Method::Tailo {
                WeightTerm::ExpScore
            } else {
                WeightTerm::ScaledProbability
            };
            Ok(from_disc(cache.two_step.as_ref().expect("trained"), term)?)
        }
        Method::OursV2 | Method::OursV3 => {
            if cache.one_step.is_none() {
                cache.one_step = Some(one_step_discriminator(ts, ta, cfg, seed)?);
            }
            let term = if method == Method::OursV2 {
                WeightTerm::ExpScore
            } else {
                WeightTerm::ScaledProbability
            };
            Ok(from_disc(cache.one_step.as_ref().expect("trained"), term)?)
        }
        Method::SmodiceKl => {
            let stats = &ta_clean.norm_stats;
            let flat = ta_clean.flatten(stats);
            let mut transitions = Transitions::from_flat(&flat);
            if let Some(x) = removal_x {
                transitions = transitions.remove_every_x(x)?;
            }
            let kept = transitions.kept_dataset(ta_clean)?;
            let positives = ts.flatten(stats).states;
            let negatives = kept.flatten(stats).states;
            let c = train_dice_discriminator(&positives, &negatives, cfg, &mut stream(seed, "disc-dice"))?;
            let rewards = clamped_logits(&c, &flat.states, cfg.logit_clamp)?;
            let value = train_value(&flat.states, &rewards, &transitions, cfg, seed)?;
            let mut values: Vec<Vec<f64>> = Vec::new();
            let mut current = None;
            for t in &transitions.tuples {
                if current != Some(t.trajectory) {
                    current = Some(t.trajectory);
                    values.push(Vec::new());
                }
                values.last_mut().expect("pushed above").push(rewards[t.from]);
            }
            let field = RewardField {
                values,
                clamp: cfg.logit_clamp,
            };
            let monitor = value.monitor.clone();
            // the monitor series is the diagnostic of interest when V diverges
            let keep_monitor = |e: Error| StageError {
                error: e,
                value_monitor: Some(monitor.clone()),
            };
            if let Some(step) = value.diverged_at {
                return Err(keep_monitor(Error::Diverged {
                    step,
                    detail: "value function objective became non-finite".into(),
                }));
            }
            let weights =
                extract_dice_weights(&value, &flat.states, &rewards, &transitions).map_err(keep_monitor)?;
            Ok(Weighted {
                ta: kept,
                weights: weights.table,
                rewards: Some(field),
                value_monitor: Some(monitor),
                value_diverged_at: None,
            })
        }
    }
}

/// Runs one method for one seed. Training failures (divergence, non-finite
/// values) zero the remaining checkpoints instead of failing the run.
pub fn run_method(
    method: Method,
    ts: &Dataset,
    ta_clean: &Dataset,
    spec: &ExperimentSpec,
    seed: u64,
) -> Result<MethodRun> {
    let mut cache = DiscCache::default();
    run_method_cached(method, ts, ta_clean, spec, seed, &mut cache)
}

fn run_method_cached(
    method: Method,
    ts: &Dataset,
    ta_clean: &Dataset,
    spec: &ExperimentSpec,
    seed: u64,
    cache: &mut DiscCache,
) -> Result<MethodRun> {
    let cfg = &spec.config;
    let ta = match spec.removal_x {
        Some(x) => {
            let c = corrupt_remove_every_x(ta_clean, x)?;
            if c.dropped > 0 {
                log::warn!("{} trajectories dropped by pair removal", c.dropped);
            }
            c.dataset
        }
        None => ta_clean.clone(),
    };
    let grid = eval_steps(cfg);
    let mut run = MethodRun {
        method,
        seed,
        curve: Vec::with_capacity(grid.len()),
        aborted: None,
        ta: ta.clone(),
        rewards: None,
        weights: None,
        value_monitor: None,
        value_diverged_at: None,
        policy: None,
        checkpoints: Vec::new(),
    };
    let weighted = match weight_stage(method, ts, ta_clean, &ta, spec.removal_x, cfg, seed, cache) {
        Ok(w) => w,
        Err(StageError { error: e, value_monitor }) if is_abort(&e) => {
            log::warn!("{method} seed {seed}: weighting stage aborted: {e}");
            if let Error::Diverged { step, .. } = &e {
                if method == Method::SmodiceKl {
                    run.value_diverged_at = Some(*step);
                }
            }
            run.value_monitor = value_monitor;
            run.aborted = Some(e.to_string());
            run.curve = grid
                .iter()
                .map(|&step| CurvePoint {
                    step,
                    success_rate: 0.0,
                    loss: f64::NAN,
                })
                .collect();
            return Ok(run);
        }
        Err(e) => return Err(e.error),
    };
    run.ta = weighted.ta;
    run.rewards = weighted.rewards;
    run.value_monitor = weighted.value_monitor;
    run.value_diverged_at = weighted.value_diverged_at;
    let env = spec.env;
    let episodes = cfg.eval_episodes;
    let mut curve = Vec::with_capacity(grid.len());
    let mut checkpoints = Vec::with_capacity(grid.len());
    let trained = train_policy(&run.ta, &weighted.weights, cfg, seed, |p| {
        let success_rate = match env {
            Some(env) => {
                let mut rng = stream(seed, &format!("eval-{}", p.step));
                rollout(p.policy, &env, episodes, &mut rng)?.success_rate
            }
            None => f64::NAN,
        };
        curve.push(CurvePoint {
            step: p.step,
            success_rate,
            loss: p.loss,
        });
        checkpoints.push((p.step, policy_to_json(p.policy)));
        Ok(())
    });
    run.weights = Some(weighted.weights);
    match trained {
        Ok(t) => run.policy = Some(t.policy),
        Err(e) if is_abort(&e) => {
            log::warn!("{method} seed {seed}: behavior cloning aborted: {e}");
            run.aborted = Some(e.to_string());
            let done = curve.len();
            curve.extend(grid[done.min(grid.len())..].iter().map(|&step| CurvePoint {
                step,
                success_rate: 0.0,
                loss: f64::NAN,
            }));
        }
        Err(e) => return Err(e),
    }
    run.curve = curve;
    run.checkpoints = checkpoints;
    Ok(run)
}

/// Results of every (seed, method) pair, seed-major.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub runs: Vec<MethodRun>,
}

/// Applies the scenario to the inputs and runs every method for every seed.
/// `ts` and `ta` are the uncorrupted datasets.
pub fn run_experiment(spec: &ExperimentSpec, ts: &Dataset, ta: &Dataset) -> Result<ExperimentResult> {
    spec.validate()?;
    let ts = spec.task_specific(ts)?;
    // seeds are independent workers; collecting keeps seed-major order
    let per_seed: Vec<Vec<MethodRun>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut cache = DiscCache::default();
            spec.methods
                .iter()
                .map(|&method| {
                    log::info!("running {method} with seed {seed}");
                    run_method_cached(method, &ts, ta, spec, seed, &mut cache)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentResult {
        spec: spec.clone(),
        runs: per_seed.into_iter().flatten().collect(),
    })
}

impl ExperimentResult {
    pub fn curve_rows(&self) -> Vec<CurveRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.curve.iter().map(move |p| CurveRow {
                    method: r.method.name().to_string(),
                    seed: r.seed,
                    step: p.step,
                    success_rate: p.success_rate,
                    loss: p.loss,
                })
            })
            .collect()
    }

    pub fn summary(&self) -> (Vec<SummaryRow>, Vec<String>) {
        summarize(&self.curve_rows())
    }

    pub fn summary_csv(&self) -> Result<String> {
        write_csv(&self.summary().0)
    }

    /// Mean success rate over seeds at the last checkpoint.
    pub fn final_success(&self, method: Method) -> Option<f64> {
        let finals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.curve.last().map(|p| p.success_rate))
            .collect();
        (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64)
    }

    /// Rows of `weights.csv`.
    pub fn weight_rows(&self) -> Vec<WeightRow> {
        let mut rows = Vec::new();
        for r in &self.runs {
            let Some(w) = &r.weights else { continue };
            for (t, traj) in r.ta.trajectories.iter().enumerate() {
                for i in 0..traj.len() {
                    rows.push(WeightRow {
                        method: r.method.name().to_string(),
                        seed: r.seed,
                        trajectory_id: t as u64,
                        source_tag: traj.source_tag.to_string(),
                        step: i,
                        r: r.rewards.as_ref().and_then(|f| f.get(t, i)).unwrap_or(f64::NAN),
                        raw_w: w.raw[t][i],
                        normalized_w: w.raw[t][i] / w.z,
                    });
                }
            }
        }
        rows
    }

    /// Rows of `vmonitor.csv`.
    pub fn monitor_rows(&self) -> Vec<MonitorRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.value_monitor.iter().flatten().map(move |m| MonitorRow {
                    seed: r.seed,
                    step: m.step,
                    max_abs_v: m.max_abs_v,
                    min_v: m.min_v,
                    max_v: m.max_v,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub method: String,
    pub seed: u64,
    pub trajectory_id: u64,
    pub source_tag: String,
    pub step: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "raw_W")]
    pub raw_w: f64,
    #[serde(rename = "normalized_W")]
    pub normalized_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub seed: u64,
    pub step: usize,
    #[serde(rename = "max_abs_V")]
    pub max_abs_v: f64,
    #[serde(rename = "min_V")]
    pub min_v: f64,
    #[serde(rename = "max_V")]
    pub max_v: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Mean normalized weight of trajectories tagged `tag` divided by the mean
/// over all other trajectories.
pub fn weight_ratio(ta: &Dataset, weights: &WeightTable, tag: SourceTag) -> Option<f64> {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (t, traj) in ta.trajectories.iter().enumerate() {
        for i in 0..traj.len() {
            let w = weights.raw[t][i] / weights.z;
            if traj.source_tag == tag {
                a += w;
                na += 1;
            } else {
                b += w;
                nb += 1;
            }
        }
    }
    (na > 0 && nb > 0).then(|| (a / na as f64) / (b / nb as f64))
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<String> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(contents))
}

/// Refuses to reuse a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes curves, summary, weights, V-monitor, checkpoints and a manifest.
/// `inputs` maps input labels to their files, whose checksums are recorded.
pub fn write_results(
    result: &ExperimentResult,
    dir: &Path,
    inputs: &BTreeMap<String, PathBuf>,
    save_checkpoints: bool,
) -> Result<()> {
    let mut outputs = BTreeMap::new();
    let mut put = |name: &str, contents: &[u8]| -> Result<()> {
        let sum = write_file(&dir.join(name), contents)?;
        outputs.insert(name.to_string(), sum);
        Ok(())
    };
    put("curves.csv", write_csv(&result.curve_rows())?.as_bytes())?;
    let (summary, notes) = result.summary();
    put("summary.csv", write_csv(&summary)?.as_bytes())?;
    let weights = result.weight_rows();
    if !weights.is_empty() {
        put("weights.csv", write_csv(&weights)?.as_bytes())?;
    }
    let monitor = result.monitor_rows();
    if !monitor.is_empty() {
        put("vmonitor.csv", write_csv(&monitor)?.as_bytes())?;
    }
    if save_checkpoints {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        for r in &result.runs {
            for (step, json) in &r.checkpoints {
                put(
                    &format!("checkpoints/{}-seed{}-step{}.json", r.method, r.seed, step),
                    json.as_bytes(),
                )?;
            }
        }
    }
    let mut input_sums = BTreeMap::new();
    for (label, path) in inputs {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        input_sums.insert(
            label.clone(),
            serde_json::json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }),
        );
    }
    let aborted: Vec<_> = result
        .runs
        .iter()
        .filter_map(|r| {
            r.aborted
                .as_ref()
                .map(|a| serde_json::json!({"method": r.method, "seed": r.seed, "reason": a}))
        })
        .collect();
    let manifest = serde_json::json!({
        "command": "run",
        "spec": result.spec,
        "inputs": input_sums,
        "outputs": outputs,
        "aborted": aborted,
        "notes": notes,
    });
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Direction;
    use crate::envs::{gen_pointmaze, make_task_specific_examples, ExampleMode};
    use crate::rng::seeded;

    fn tiny_spec(methods: Vec<Method>) -> ExperimentSpec {
        ExperimentSpec {
            scenario: Scenario::Standard,
            config: RunConfig {
                disc_hidden: vec![8],
                policy_hidden: vec![8],
                value_hidden: vec![8],
                steps_pretrain: 5,
                steps_formal: 5,
                steps_bc: 20,
                steps_value: 10,
                batch_disc: 16,
                batch_bc: 16,
                batch_value: 16,
                eval_interval: 10,
                eval_episodes: 4,
                monitor_interval: 5,
                ..RunConfig::short_horizon()
            },
            seeds: vec![0, 1],
            methods,
            removal_x: None,
            head: None,
            tail: None,
            env: Some(PointmazeEnv::default().with_start_jitter(0.05)),
        }
    }

    fn data() -> (Dataset, Dataset) {
        let ta = gen_pointmaze(2, 0.2, &mut seeded(0)).unwrap();
        let ts = make_task_specific_examples(&ta, SourceTag::ScriptedDirection(Direction::Left), ExampleMode::FinalState)
            .unwrap();
        (ts, ta)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dice".parse::<Method>().is_err());
        assert_eq!("incomplete-ta".parse::<Scenario>().unwrap(), Scenario::IncompleteTa);
    }

    #[test]
    fn eval_grid() {
        let cfg = RunConfig {
            steps_bc: 2500,
            eval_interval: 1000,
            ..RunConfig::default()
        };
        assert_eq!(eval_steps(&cfg), vec![0, 1000, 2000, 2500]);
        let cfg = RunConfig {
            eval_interval: 0,
            ..cfg
        };
        assert_eq!(eval_steps(&cfg), vec![0, 2500]);
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec(vec![Method::Bc]);
        s.validate().unwrap();
        s.scenario = Scenario::IncompleteTa;
        assert!(s.validate().is_err());
        s.removal_x = Some(2);
        s.validate().unwrap();
        s.seeds.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn bc_only_skips_discriminator() {
        let (ts, ta) = data();
        let r = run_experiment(&tiny_spec(vec![Method::Bc]), &ts, &ta).unwrap();
        assert_eq!(r.runs.len(), 2);
        assert!(r.runs.iter().all(|m| m.rewards.is_none()));
        let seeds: std::collections::BTreeSet<u64> = r.curve_rows().iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 2);
        assert_eq!(r.runs[0].curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 10, 20]);
    }

    #[test]
    fn every_method_runs() {
        let (ts, ta) = data();
        let mut spec = tiny_spec(Method::ALL.to_vec());
        spec.seeds = vec![3];
        spec.scenario = Scenario::IncompleteTa;
        spec.removal_x = Some(2);
        let r = run_experiment(&spec, &ts, &ta).unwrap();
        assert_eq!(r.runs.len(), 6);
        for m in &r.runs {
            assert_eq!(m.curve.len(), 3, "{}", m.method);
            assert_eq!(m.ta.num_states(), 400, "{}", m.method);
            assert!(m.weights.as_ref().unwrap().covers(&m.ta));
        }
        assert!(!r.monitor_rows().is_empty());
    }

    #[test]
    fn writes_results() {
        let (ts, ta) = data();
        let r = run_experiment(&tiny_spec(vec![Method::Tailo]), &ts, &ta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("res");
        prepare_out_dir(&out, false).unwrap();
        write_results(&r, &out, &BTreeMap::new(), true).unwrap();
        for f in ["curves.csv", "summary.csv", "weights.csv", "manifest.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert!(out.join("checkpoints/tailo-seed0-step20.json").exists());
        assert!(prepare_out_dir(&out, false).is_err());
        prepare_out_dir(&out, true).unwrap();
    }
}
