//! Trajectories, datasets, normalization statistics and the JSON-Lines
//! dataset format.
//!
//! A dataset file starts with a header object
//! `{"kind","state_dim","action_dim","count"}` followed by one trajectory
//! object per line: `{"id","source_tag","states":[[..]],"actions":[[..]]}`.
//! Reals are written with 17 significant digits so that a save/load cycle
//! reproduces every value exactly.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Cardinal movement direction of a scripted pointmaze expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn letter(self) -> char {
        match self {
            Direction::Left => 'L',
            Direction::Right => 'R',
            Direction::Up => 'U',
            Direction::Down => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'L' => Some(Direction::Left),
            'R' => Some(Direction::Right),
            'U' => Some(Direction::Up),
            'D' => Some(Direction::Down),
            _ => None,
        }
    }

    /// Unit vector in the (x, y) plane.
    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::Left => [-1.0, 0.0],
            Direction::Right => [1.0, 0.0],
            Direction::Up => [0.0, 1.0],
            Direction::Down => [0.0, -1.0],
        }
    }
}

/// Provenance of a trajectory. Metadata only: training code never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceTag {
    Expert,
    Random,
    ScriptedDirection(Direction),
    Other,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Expert => f.write_str("expert"),
            SourceTag::Random => f.write_str("random"),
            SourceTag::ScriptedDirection(d) => write!(f, "scripted-direction-{}", d.letter()),
            SourceTag::Other => f.write_str("other"),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(SourceTag::Expert),
            "random" => Ok(SourceTag::Random),
            "other" => Ok(SourceTag::Other),
            _ => {
                let dir = s
                    .strip_prefix("scripted-direction-")
                    .filter(|rest| rest.len() == 1)
                    .and_then(|rest| rest.chars().next())
                    .and_then(Direction::from_letter);
                dir.map(SourceTag::ScriptedDirection)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown source tag {s:?}")))
            }
        }
    }
}

impl TryFrom<String> for SourceTag {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<SourceTag> for String {
    fn from(tag: SourceTag) -> Self {
        tag.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TaskSpecific,
    TaskAgnostic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub source_tag: SourceTag,
    pub states: Vec<Vec<f64>>,
    pub actions: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn new(source_tag: SourceTag, states: Vec<Vec<f64>>, actions: Option<Vec<Vec<f64>>>) -> Self {
        Trajectory {
            id: 0,
            source_tag,
            states,
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over every state of every trajectory. Dimensions
    /// with zero variance get std = 1.
    pub fn from_trajectories(dim: usize, trajectories: &[Trajectory]) -> Self {
        let n: usize = trajectories.iter().map(Trajectory::len).sum();
        if n == 0 {
            return NormStats::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for s in trajectories.iter().flat_map(|t| t.states.iter()) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for s in trajectories.iter().flat_map(|t| t.states.iter()) {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Standardizes `s` with `stats`: `(s - mean) / std` elementwise.
pub fn normalize_state(s: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    if s.len() != stats.dim() {
        return Err(Error::Shape(format!(
            "state has {} dims, stats have {}",
            s.len(),
            stats.dim()
        )));
    }
    Ok(s.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, sd))| (v - m) / sd)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub norm_stats: NormStats,
}

impl Dataset {
    /// Validates the trajectories, assigns ids by position and computes the
    /// normalization statistics.
    pub fn new(
        kind: DatasetKind,
        state_dim: usize,
        action_dim: usize,
        mut trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        if kind == DatasetKind::TaskSpecific && action_dim != 0 {
            return Err(Error::InvalidArgument(
                "task-specific datasets have action_dim 0".into(),
            ));
        }
        for (i, t) in trajectories.iter_mut().enumerate() {
            t.id = i as u64;
            validate_trajectory(t, kind, state_dim, action_dim)?;
        }
        let norm_stats = NormStats::from_trajectories(state_dim, &trajectories);
        Ok(Dataset {
            kind,
            state_dim,
            action_dim,
            trajectories,
            norm_stats,
        })
    }

    pub fn empty(kind: DatasetKind, state_dim: usize, action_dim: usize) -> Self {
        Dataset {
            kind,
            state_dim,
            action_dim,
            trajectories: Vec::new(),
            norm_stats: NormStats::identity(state_dim),
        }
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_states() == 0
    }

    /// Task-specific copy with actions stripped.
    pub fn strip_actions(&self) -> Result<Dataset> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory::new(t.source_tag, t.states.clone(), None))
            .collect();
        Dataset::new(DatasetKind::TaskSpecific, self.state_dim, 0, trajectories)
    }

    /// All states flattened in (trajectory, step) order and standardized
    /// with `stats`.
    pub fn flatten(&self, stats: &NormStats) -> FlatData {
        let n = self.num_states();
        let mut states = Array2::zeros((n, self.state_dim));
        let mut actions = (self.action_dim > 0).then(|| Array2::zeros((n, self.action_dim)));
        let mut index = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(self.trajectories.len() + 1);
        let mut row = 0;
        for (ti, t) in self.trajectories.iter().enumerate() {
            offsets.push(row);
            for (si, s) in t.states.iter().enumerate() {
                for (j, v) in s.iter().enumerate() {
                    states[[row, j]] = (v - stats.mean[j]) / stats.std[j];
                }
                if let (Some(out), Some(acts)) = (actions.as_mut(), t.actions.as_ref()) {
                    for (j, v) in acts[si].iter().enumerate() {
                        out[[row, j]] = *v;
                    }
                }
                index.push((ti, si));
                row += 1;
            }
        }
        offsets.push(row);
        FlatData {
            states,
            actions,
            index,
            offsets,
        }
    }
}

fn validate_trajectory(
    t: &Trajectory,
    kind: DatasetKind,
    state_dim: usize,
    action_dim: usize,
) -> Result<()> {
    if t.states.is_empty() {
        return Err(Error::Empty(format!("trajectory {} has no states", t.id)));
    }
    for s in &t.states {
        if s.len() != state_dim {
            return Err(Error::Dimension {
                trajectory: t.id,
                expected: state_dim,
                found: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state of trajectory {}", t.id)));
        }
    }
    match (kind, &t.actions) {
        (DatasetKind::TaskSpecific, Some(_)) => Err(Error::InvalidArgument(format!(
            "task-specific trajectory {} carries actions",
            t.id
        ))),
        (DatasetKind::TaskAgnostic, None) => Err(Error::InvalidArgument(format!(
            "task-agnostic trajectory {} has no actions",
            t.id
        ))),
        (DatasetKind::TaskAgnostic, Some(actions)) => {
            if actions.len() != t.states.len() {
                return Err(Error::Shape(format!(
                    "trajectory {}: {} actions for {} states",
                    t.id,
                    actions.len(),
                    t.states.len()
                )));
            }
            for a in actions {
                if a.len() != action_dim {
                    return Err(Error::Dimension {
                        trajectory: t.id,
                        expected: action_dim,
                        found: a.len(),
                    });
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("action of trajectory {}", t.id)));
                }
            }
            Ok(())
        }
        (DatasetKind::TaskSpecific, None) => Ok(()),
    }
}

/// Flattened, standardized view of a dataset.
#[derive(Debug, Clone)]
pub struct FlatData {
    pub states: Array2<f64>,
    pub actions: Option<Array2<f64>>,
    /// `(trajectory index, step)` of each row.
    pub index: Vec<(usize, usize)>,
    /// Row offset of each trajectory; the last entry is the row count.
    pub offsets: Vec<usize>,
}

impl FlatData {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn gather_states(&self, rows: &[usize]) -> Array2<f64> {
        self.states.select(ndarray::Axis(0), rows)
    }

    pub fn gather_actions(&self, rows: &[usize]) -> Option<Array2<f64>> {
        self.actions
            .as_ref()
            .map(|a| a.select(ndarray::Axis(0), rows))
    }

    pub fn row(&self, r: usize) -> Array1<f64> {
        self.states.row(r).to_owned()
    }
}

/// Uniform sampler with replacement over the flattened (state, action)
/// pairs of a dataset. Owns its generator state.
pub struct MinibatchSampler {
    rows: usize,
    batch: usize,
    rng: Rng,
}

impl MinibatchSampler {
    pub fn new(rows: usize, batch: usize, rng: Rng) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if rows == 0 {
            return Err(Error::Empty("cannot sample from an empty dataset".into()));
        }
        Ok(MinibatchSampler { rows, batch, rng })
    }

    pub fn next_rows(&mut self) -> Vec<usize> {
        (0..self.batch)
            .map(|_| self.rng.gen_range(0..self.rows))
            .collect()
    }
}

impl Iterator for MinibatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_rows())
    }
}

/// Stream of `(states, actions)` batches drawn uniformly with replacement
/// from `dataset`, standardized with `stats`.
pub fn minibatch_iter<'a>(
    dataset: &'a Dataset,
    stats: &NormStats,
    batch: usize,
    rng: Rng,
) -> Result<impl Iterator<Item = (Array2<f64>, Option<Array2<f64>>)> + 'a> {
    let flat = dataset.flatten(stats);
    let sampler = MinibatchSampler::new(flat.len(), batch, rng)?;
    Ok(sampler.map(move |rows| (flat.gather_states(&rows), flat.gather_actions(&rows))))
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: DatasetKind,
    state_dim: usize,
    action_dim: usize,
    count: usize,
}

#[derive(Deserialize)]
struct TrajectoryRecord {
    #[allow(dead_code)]
    id: u64,
    source_tag: SourceTag,
    states: Vec<Vec<f64>>,
    #[serde(default)]
    actions: Option<Vec<Vec<f64>>>,
}

pub(crate) fn fmt_real(out: &mut String, v: f64) {
    // 17 significant digits
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn write_matrix(out: &mut String, rows: &[Vec<f64>]) {
    out.push('[');
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            fmt_real(out, *v);
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes a dataset to the JSON-Lines format. Output is a pure function
/// of the dataset.
pub fn dataset_to_string(dataset: &Dataset) -> String {
    let header = Header {
        kind: dataset.kind,
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        count: dataset.trajectories.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in &dataset.trajectories {
        write!(out, "{{\"id\":{},\"source_tag\":\"{}\",\"states\":", t.id, t.source_tag)
            .expect("infallible");
        write_matrix(&mut out, &t.states);
        if let Some(actions) = &t.actions {
            out.push_str(",\"actions\":");
            write_matrix(&mut out, actions);
        }
        out.push_str("}\n");
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(dataset)).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let mut trajectories = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let id = trajectories.len() as u64;
        trajectories.push(Trajectory {
            id,
            source_tag: rec.source_tag,
            states: rec.states,
            actions: rec.actions,
        });
    }
    if trajectories.len() != header.count {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header declares {} trajectories, file has {}",
                header.count,
                trajectories.len()
            ),
        });
    }
    Dataset::new(header.kind, header.state_dim, header.action_dim, trajectories)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ta(trajs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>, d: usize, k: usize) -> Dataset {
        let trajectories = trajs
            .into_iter()
            .map(|(s, a)| Trajectory::new(SourceTag::Other, s, Some(a)))
            .collect();
        Dataset::new(DatasetKind::TaskAgnostic, d, k, trajectories).unwrap()
    }

    #[test]
    fn source_tag_strings() {
        for tag in [
            SourceTag::Expert,
            SourceTag::Random,
            SourceTag::Other,
            SourceTag::ScriptedDirection(Direction::Down),
        ] {
            assert_eq!(tag.to_string().parse::<SourceTag>().unwrap(), tag);
        }
        assert_eq!(
            SourceTag::ScriptedDirection(Direction::Left).to_string(),
            "scripted-direction-L"
        );
        assert!("scripted-direction-Q".parse::<SourceTag>().is_err());
    }

    #[test]
    fn load_two_trajectories() {
        let text = "{\"kind\":\"task_agnostic\",\"state_dim\":4,\"action_dim\":1,\"count\":2}\n\
            {\"id\":0,\"source_tag\":\"expert\",\"states\":[[1,2,3,4],[1,2,3,4],[0,0,0,0]],\"actions\":[[0.1],[0.2],[0.3]]}\n\
            {\"id\":1,\"source_tag\":\"random\",\"states\":[[1,2,3,4],[1,2,3,4],[0,0,0,0]],\"actions\":[[0.1],[0.2],[0.3]]}\n";
        let ds = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        assert_eq!(ds.state_dim, 4);
        assert_eq!(ds.trajectories[1].id, 1);
    }

    #[test]
    fn dimension_error_names_trajectory() {
        let text = "{\"kind\":\"task_specific\",\"state_dim\":4,\"action_dim\":0,\"count\":3}\n\
            {\"id\":0,\"source_tag\":\"expert\",\"states\":[[1,2,3,4]]}\n\
            {\"id\":1,\"source_tag\":\"expert\",\"states\":[[1,2,3,4]]}\n\
            {\"id\":2,\"source_tag\":\"expert\",\"states\":[[1,2,3,4],[1,2,3]]}\n";
        match parse_dataset(text.as_bytes()) {
            Err(Error::Dimension {
                trajectory, found, ..
            }) => {
                assert_eq!(trajectory, 2);
                assert_eq!(found, 3);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"kind\":\"task_specific\",\"state_dim\":1,\"action_dim\":0,\"count\":2}\n\
            {\"id\":0,\"source_tag\":\"expert\",\"states\":[[1]]}\n\
            {\"id\":1,\"source_tag\":\"expert\",\"states\":[[1]\n";
        match parse_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(DatasetKind::TaskSpecific, 3, 0, vec![]).unwrap();
        let text = dataset_to_string(&ds);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_dataset(text.as_bytes()).unwrap(), ds);
    }

    #[test]
    fn saved_actions_on_every_line() {
        let ds = ta(
            vec![
                (vec![vec![0.5], vec![0.25]], vec![vec![0.1], vec![-0.1]]),
                (vec![vec![1.0 / 3.0]], vec![vec![0.9]]),
            ],
            1,
            1,
        );
        let text = dataset_to_string(&ds);
        assert!(text.lines().skip(1).all(|l| l.contains("\"actions\"")));
        assert_eq!(text, dataset_to_string(&ds));
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ta(vec![(vec![vec![0.1, 1e-300]], vec![vec![-1.0]])], 2, 1);
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_dataset(&ds, &a).unwrap();
        save_dataset(&ds, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), ds);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats {
            mean: vec![1.0, 1.0],
            std: vec![2.0, 4.0],
        };
        assert_eq!(normalize_state(&[3.0, 5.0], &stats).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize_state(&[1.0, 1.0], &stats).unwrap(), vec![0.0, 0.0]);
        assert!(normalize_state(&[1.0], &stats).is_err());
    }

    #[test]
    fn zero_variance_dimension_gets_unit_std() {
        let ds = ta(
            vec![(vec![vec![1.0, 2.0], vec![3.0, 2.0]], vec![vec![0.0], vec![0.0]])],
            2,
            1,
        );
        assert_eq!(ds.norm_stats.mean, vec![2.0, 2.0]);
        assert_eq!(ds.norm_stats.std, vec![1.0, 1.0]);
    }

    #[test]
    fn sampler_single_pair_repeats() {
        let ds = ta(vec![(vec![vec![7.0]], vec![vec![0.5]])], 1, 1);
        let mut it = minibatch_iter(&ds, &NormStats::identity(1), 4, seeded(3)).unwrap();
        let (s, a) = it.next().unwrap();
        assert_eq!(s.shape(), &[4, 1]);
        assert!(s.iter().all(|&v| v == 7.0));
        assert!(a.unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sampler_errors() {
        assert!(MinibatchSampler::new(0, 4, seeded(0)).is_err());
        assert!(MinibatchSampler::new(4, 0, seeded(0)).is_err());
    }

    #[test]
    fn sampler_is_reproducible() {
        let a: Vec<_> = MinibatchSampler::new(100, 8, seeded(9)).unwrap().take(5).collect();
        let b: Vec<_> = MinibatchSampler::new(100, 8, seeded(9)).unwrap().take(5).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_balances_two_trajectories() {
        // Binomial(10000, 0.5) has sd 50; 300 is a 6-sigma band.
        let flat_rows = 20;
        let mut s = MinibatchSampler::new(flat_rows, 10_000, seeded(17)).unwrap();
        let rows = s.next_rows();
        let first = rows.iter().filter(|&&r| r < 10).count() as i64;
        assert!((first - 5000).abs() <= 300, "first trajectory drawn {first} times");
    }
}
