use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tailo_core::data::{load_dataset, save_dataset, Direction};
use tailo_core::envs::{
    corrupt_remove_every_x, gen_chain, gen_pointmaze, make_task_specific_examples, truncate_head_tail,
    ExampleMode, PointmazeEnv,
};
use tailo_core::pipeline::{
    prepare_out_dir, run_experiment, sha256_hex, write_results, ExperimentSpec, Method, MonitorRow, Scenario,
    WeightRow,
};
use tailo_core::report::{curves_svg, monitor_svg, read_csv, summarize, weights_svg, write_csv, CurveRow};
use tailo_core::rng::seeded;
use tailo_core::{Dataset, LossVariant, RunConfig, SourceTag};

#[derive(Parser)]
#[command(name = "tailo", version, about = "Trajectory-aware imitation learning experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task-agnostic dataset and its task-specific examples.
    GenData(GenData),
    /// Remove every x-th state-action pair inside each trajectory.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Keep the first `head` and last `tail` states of each trajectory.
    Truncate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 0)]
        tail: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate methods over seeds.
    Run(RunArgs),
    /// Run the Cartesian product of config values.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `field=v1,v2,...`; repeat for more fields.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
    /// Aggregate result directories into summary.csv and SVG plots.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(value_enum)]
    env: EnvKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pointmaze: trajectories per direction.
    #[arg(long, default_value_t = 150)]
    per_direction: usize,
    /// Pointmaze: std of the expert action noise.
    #[arg(long, default_value_t = 0.6)]
    noise: f64,
    /// Pointmaze: direction whose trajectories become task-specific data.
    #[arg(long, default_value = "L")]
    target: String,
    /// Chain: number of states.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Chain: number of walks.
    #[arg(long, default_value_t = 50)]
    trajectories: usize,
    /// Task-specific data as final states only or whole trajectories.
    #[arg(long, value_enum, default_value_t = TsMode::Final)]
    ts_mode: TsMode,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Pointmaze,
    Chain,
}

#[derive(Clone, Copy, ValueEnum)]
enum TsMode {
    Final,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Nnpu,
    PaperLiteral,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    ta: PathBuf,
    #[arg(long)]
    ts: PathBuf,
    /// Inferred from --x / --head / --tail when absent.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "tailo,bc")]
    method: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    /// TOML file overriding the defaults field by field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    x: Option<usize>,
    #[arg(long)]
    head: Option<usize>,
    #[arg(long)]
    tail: Option<usize>,
    #[arg(long, value_enum)]
    loss_variant: Option<VariantArg>,
    #[arg(long)]
    no_normalize_weights: bool,
    /// Skip writing policy checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Corrupt { input, x, out, force } => corrupt(&input, x, &out, force),
        Command::Truncate {
            input,
            head,
            tail,
            out,
            force,
        } => truncate(&input, head, tail, &out, force),
        Command::Run(args) => run(&args),
        Command::Ablate { run, grid } => ablate(&run, &grid),
        Command::Report { dirs, out, force } => report(&dirs, &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<String> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(sha256_hex(text.as_bytes()))
}

fn save_with_sum(dataset: &Dataset, path: &Path) -> Result<String> {
    save_dataset(dataset, path)?;
    Ok(sha256_hex(&fs::read(path)?))
}

fn gen_data(a: &GenData) -> Result<()> {
    prepare_out_dir(&a.out, a.force)?;
    let mode = match a.ts_mode {
        TsMode::Final => ExampleMode::FinalState,
        TsMode::Full => ExampleMode::Full,
    };
    let (ta, tag, params) = match a.env {
        EnvKind::Pointmaze => {
            let mut chars = a.target.chars();
            let direction = match (chars.next().and_then(Direction::from_letter), chars.next()) {
                (Some(d), None) => d,
                _ => bail!("--target must be one of L, R, U, D"),
            };
            let ta = gen_pointmaze(a.per_direction, a.noise, &mut seeded(a.seed))?;
            let params = json!({
                "per_direction": a.per_direction,
                "noise": a.noise,
                "target": a.target,
            });
            (ta, SourceTag::ScriptedDirection(direction), params)
        }
        EnvKind::Chain => {
            let ta = gen_chain(a.n, a.trajectories)?;
            (ta, SourceTag::Other, json!({ "n": a.n, "trajectories": a.trajectories }))
        }
    };
    let ts = make_task_specific_examples(&ta, tag, mode)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("ta.jsonl", save_with_sum(&ta, &a.out.join("ta.jsonl"))?);
    outputs.insert("ts.jsonl", save_with_sum(&ts, &a.out.join("ts.jsonl"))?);
    let env = match a.env {
        EnvKind::Pointmaze => "pointmaze",
        EnvKind::Chain => "chain",
    };
    let manifest = json!({
        "command": "gen-data",
        "env": env,
        "seed": a.seed,
        "parameters": params,
        "ts_mode": match a.ts_mode { TsMode::Final => "final", TsMode::Full => "full" },
        "trajectories": ta.trajectories.len(),
        "state_action_pairs": ta.num_states(),
        "outputs": outputs,
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} trajectories ({} pairs) and {} task-specific trajectories to {}",
        ta.trajectories.len(),
        ta.num_states(),
        ts.trajectories.len(),
        a.out.display()
    );
    Ok(())
}

fn refuse_existing(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        bail!("{} already exists (pass --force to overwrite)", out.display());
    }
    Ok(())
}

fn corrupt(input: &Path, x: usize, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    let ds = load_dataset(input)?;
    let c = corrupt_remove_every_x(&ds, x)?;
    save_dataset(&c.dataset, out)?;
    println!(
        "kept {} of {} pairs; {} trajectories dropped",
        c.dataset.num_states(),
        ds.num_states(),
        c.dropped
    );
    Ok(())
}

fn truncate(input: &Path, head: usize, tail: usize, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    let ds = load_dataset(input)?;
    let t = truncate_head_tail(&ds, head, tail)?;
    save_dataset(&t, out)?;
    println!(
        "{} trajectories with {} states -> {} trajectories with {} states",
        ds.trajectories.len(),
        ds.num_states(),
        t.trajectories.len(),
        t.num_states()
    );
    Ok(())
}

fn is_pointmaze(ta: &Dataset) -> bool {
    ta.state_dim == 4 && ta.action_dim == 2
}

struct Prepared {
    spec: ExperimentSpec,
    ts: Dataset,
    ta: Dataset,
    inputs: BTreeMap<String, PathBuf>,
    base_toml: String,
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let ta = load_dataset(&a.ta).with_context(|| format!("loading {}", a.ta.display()))?;
    let ts = load_dataset(&a.ts).with_context(|| format!("loading {}", a.ts.display()))?;
    let base = if is_pointmaze(&ta) {
        RunConfig::short_horizon()
    } else {
        RunConfig::default()
    };
    let mut inputs = BTreeMap::from([("ta".to_string(), a.ta.clone()), ("ts".to_string(), a.ts.clone())]);
    let base_toml = match &a.config {
        Some(path) => {
            inputs.insert("config".to_string(), path.clone());
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => String::new(),
    };
    let mut config = RunConfig::from_toml_with_base(&base_toml, &base)?;
    apply_flags(&mut config, a);
    let scenario = match &a.scenario {
        Some(s) => s.parse::<Scenario>()?,
        None if a.x.is_some() => Scenario::IncompleteTa,
        None if a.head.is_some() || a.tail.is_some() => Scenario::IncompleteTs,
        None => Scenario::Standard,
    };
    let methods = a
        .method
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<tailo_core::Result<Vec<_>>>()?;
    let env = is_pointmaze(&ta).then(|| PointmazeEnv::default().with_start_jitter(config.eval_start_jitter));
    if env.is_none() {
        log::warn!("no evaluation environment for state_dim {}; success rates are NaN", ta.state_dim);
    }
    let spec = ExperimentSpec {
        scenario,
        config,
        seeds: a.seed.clone(),
        methods,
        removal_x: a.x,
        head: a.head,
        tail: a.tail,
        env,
    };
    spec.validate()?;
    Ok(Prepared {
        spec,
        ts,
        ta,
        inputs,
        base_toml,
    })
}

fn apply_flags(config: &mut RunConfig, a: &RunArgs) {
    if let Some(v) = a.loss_variant {
        config.loss_variant = match v {
            VariantArg::Nnpu => LossVariant::Nnpu,
            VariantArg::PaperLiteral => LossVariant::PaperLiteral,
        };
    }
    if a.no_normalize_weights {
        config.normalize_weights = false;
    }
}

fn run(a: &RunArgs) -> Result<()> {
    prepare_out_dir(&a.out, a.force)?;
    let p = prepare(a)?;
    let result = run_experiment(&p.spec, &p.ts, &p.ta)?;
    write_results(&result, &a.out, &p.inputs, !a.no_checkpoints)?;
    for m in &p.spec.methods {
        if let Some(s) = result.final_success(*m) {
            println!("{m}: final success rate {s:.3} over {} seeds", p.spec.seeds.len());
        }
    }
    for r in result.runs.iter().filter(|r| r.aborted.is_some()) {
        println!("{} seed {} aborted: {}", r.method, r.seed, r.aborted.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn parse_grid(grid: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::new();
    for g in grid {
        let Some((field, values)) = g.split_once('=') else {
            bail!("grid entry {g:?} is not field=v1,v2,...");
        };
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if values.is_empty() {
            bail!("grid entry {g:?} lists no values");
        }
        axes.push((field.trim().to_string(), values));
    }
    if axes.is_empty() {
        bail!("ablation grid is empty");
    }
    Ok(axes)
}

fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (field, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c: Vec<(String, String)> = cell.clone();
                    c.push((field.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn ablate(a: &RunArgs, grid: &[String]) -> Result<()> {
    let axes = parse_grid(grid)?;
    prepare_out_dir(&a.out, a.force)?;
    let p = prepare(a)?;
    let base = if is_pointmaze(&p.ta) {
        RunConfig::short_horizon()
    } else {
        RunConfig::default()
    };
    let cells = cartesian(&axes);
    let mut header: Vec<String> = axes.iter().map(|(f, _)| f.clone()).collect();
    header.extend(["method", "step", "mean", "std", "n_seeds"].map(String::from));
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(&header)?;
    let mut cell_dirs = Vec::new();
    for (k, cell) in cells.iter().enumerate() {
        let mut config = RunConfig::from_toml_with_base(&overlay_toml(&p.base_toml, cell)?, &base)
            .with_context(|| format!("grid cell {}", describe(cell)))?;
        apply_flags(&mut config, a);
        let mut spec = p.spec.clone();
        spec.config = config;
        if spec.scenario == Scenario::Standard {
            spec.scenario = Scenario::Ablation;
        }
        log::info!("ablation cell {k}: {}", describe(cell));
        let result = run_experiment(&spec, &p.ts, &p.ta)?;
        let dir = a.out.join(format!("cell-{k}"));
        fs::create_dir_all(&dir)?;
        write_results(&result, &dir, &p.inputs, !a.no_checkpoints)?;
        for row in result.summary().0 {
            let mut rec: Vec<String> = cell.iter().map(|(_, v)| v.clone()).collect();
            rec.extend([
                row.method,
                row.step.to_string(),
                row.mean.to_string(),
                row.std.to_string(),
                row.n_seeds.to_string(),
            ]);
            table.write_record(&rec)?;
        }
        for m in &spec.methods {
            if let Some(s) = result.final_success(*m) {
                println!("{}: {m} final success rate {s:.3}", describe(cell));
            }
        }
        cell_dirs.push(json!({ "dir": format!("cell-{k}"), "params": cell_map(cell) }));
    }
    let text = table.into_inner().context("flushing ablation table")?;
    fs::write(a.out.join("summary.csv"), &text)?;
    write_json(
        &a.out.join("manifest.json"),
        &json!({
            "command": "ablate",
            "grid": axes.iter().map(|(f, v)| (f.clone(), v.clone())).collect::<BTreeMap<_, _>>(),
            "cells": cell_dirs,
            "outputs": { "summary.csv": sha256_hex(&text) },
        }),
    )?;
    Ok(())
}

/// The config file with the cell's values replacing any it sets itself.
fn overlay_toml(base_toml: &str, cell: &[(String, String)]) -> Result<String> {
    let mut table: toml::Table = base_toml.parse()?;
    for (field, value) in cell {
        let mut parsed: toml::Table = format!("v = {value}")
            .parse()
            .with_context(|| format!("value {value:?} for {field}"))?;
        table.insert(field.clone(), parsed.remove("v").expect("parsed above"));
    }
    Ok(toml::to_string(&table)?)
}

fn describe(cell: &[(String, String)]) -> String {
    cell.iter().map(|(f, v)| format!("{f}={v}")).collect::<Vec<_>>().join(" ")
}

fn cell_map(cell: &[(String, String)]) -> BTreeMap<String, String> {
    cell.iter().cloned().collect()
}

fn read_rows<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_csv(file).with_context(|| format!("reading {}", path.display()))?)
}

fn report(dirs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    let mut per_dir = Vec::new();
    for d in dirs {
        let path = d.join("curves.csv");
        if !path.exists() {
            bail!("{} has no curves.csv", d.display());
        }
        per_dir.push((d, read_rows::<CurveRow>(&path)?));
    }
    // the same method and seed in two directories are kept apart by prefixing
    let mut seen = BTreeMap::new();
    let mut clash = false;
    for (i, (_, rows)) in per_dir.iter().enumerate() {
        for r in rows {
            if *seen.entry((r.method.clone(), r.seed)).or_insert(i) != i {
                clash = true;
            }
        }
    }
    let mut rows = Vec::new();
    for (d, rs) in per_dir {
        let label = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.extend(rs.into_iter().map(|mut r| {
            if clash {
                r.method = format!("{label}/{}", r.method);
            }
            r
        }));
    }
    prepare_out_dir(out, force)?;
    let (summary, notes) = summarize(&rows);
    for n in &notes {
        eprintln!("note: {n}");
    }
    let mut outputs = BTreeMap::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        fs::write(out.join(name), &text)?;
        outputs.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    };
    put("summary.csv", write_csv(&summary)?)?;
    put("report.svg", curves_svg(&summary))?;
    let mut weights = Vec::new();
    let mut monitor = Vec::new();
    for d in dirs {
        let w = d.join("weights.csv");
        if w.exists() {
            weights.extend(read_rows::<WeightRow>(&w)?);
        }
        let m = d.join("vmonitor.csv");
        if m.exists() {
            monitor.extend(read_rows::<MonitorRow>(&m)?);
        }
    }
    if let Some(svg) = weights_svg(&weights) {
        put("weights.svg", svg)?;
    }
    if !monitor.is_empty() {
        put("vmonitor.svg", monitor_svg(&monitor))?;
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "report",
            "inputs": dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
            "outputs": outputs,
            "notes": notes,
        }),
    )?;
    println!("wrote {} summary rows to {}", summary.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let axes = parse_grid(&["alpha=0.75,1.25,2.0".into(), "gamma = 0, 0.98".into()]).unwrap();
        assert_eq!(axes[0].1.len(), 3);
        assert_eq!(axes[1], ("gamma".to_string(), vec!["0".to_string(), "0.98".to_string()]));
        assert!(parse_grid(&[]).is_err());
        assert!(parse_grid(&["alpha".into()]).is_err());
        assert!(parse_grid(&["alpha=".into()]).is_err());
    }

    #[test]
    fn grid_values_override_config_file() {
        let cell = vec![("alpha".to_string(), "2.0".to_string()), ("steps_bc".to_string(), "10".to_string())];
        let text = overlay_toml("alpha = 0.5\ngamma = 0.9\n", &cell).unwrap();
        let cfg = RunConfig::from_toml_with_base(&text, &RunConfig::default()).unwrap();
        assert_eq!((cfg.alpha, cfg.gamma, cfg.steps_bc), (2.0, 0.9, 10));
        assert!(overlay_toml("", &[("alpha".to_string(), "[oops".to_string())]).is_err());
    }

    #[test]
    fn cartesian_product_order() {
        let axes = vec![
            ("a".to_string(), vec!["1".to_string(), "2".to_string()]),
            ("b".to_string(), vec!["x".to_string(), "y".to_string(), "z".to_string()]),
        ];
        let cells = cartesian(&axes);
        assert_eq!(cells.len(), 6);
        assert_eq!(describe(&cells[0]), "a=1 b=x");
        assert_eq!(describe(&cells[5]), "a=2 b=z");
    }
}
