//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any of them fails.

use std::io::Write;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng as _;
use tailo_core::data::Direction;
use tailo_core::dice::{
    smodice_kl_loss, train_dice_discriminator, train_value, value_shape, Transitions,
};
use tailo_core::discriminator::{
    clamped_logits, cross_entropy_logits, cross_entropy_loss, debiased_loss, debiased_loss_logits,
    discriminator_shape, gradient_penalty_at, select_lowest,
};
use tailo_core::envs::{gen_chain, gen_pointmaze, make_task_specific_examples, ExampleMode, PointmazeEnv};
use tailo_core::nn::{finite_diff_check, FdOptions, Mlp, MlpGrads};
use tailo_core::pipeline::{run_experiment, weight_ratio, ExperimentResult, ExperimentSpec, Method, Scenario};
use tailo_core::policy::{wbc_loss, Policy};
use tailo_core::rng::{seeded, stream};
use tailo_core::weights::compute_weights;
use tailo_core::{Dataset, LossVariant, NormStats, RunConfig, SourceTag};

const SEEDS: [u64; 3] = [0, 1, 2];
const LEFT: SourceTag = SourceTag::ScriptedDirection(Direction::Left);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn weight_oracle() -> Outcome {
    let mut rng = seeded(101);
    let (alpha, gamma, horizon) = (1.25, 0.998, 20_000usize);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=50);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let fast = compute_weights(&r, alpha, gamma).unwrap();
        for i in 0..n {
            // Kahan-summed truncated series with last-state padding
            let (mut sum, mut comp, mut disc) = (0.0f64, 0.0f64, 1.0f64);
            for j in 0..=horizon {
                let term = disc * (alpha * r[(i + j).min(n - 1)]).exp() - comp;
                let t = sum + term;
                comp = (t - sum) - term;
                sum = t;
                disc *= gamma;
            }
            worst = worst.max((fast[i] - sum).abs() / sum.abs());
        }
    }
    outcome(worst < 1e-9, format!("max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn random_rows(rng: &mut tailo_core::rng::Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5))
}

fn fd_on_net(net: &Mlp, analytic: &MlpGrads, loss: impl Fn(&Mlp) -> f64) -> f64 {
    let mut probe = net.clone();
    finite_diff_check(
        |p| {
            probe.set_flat(p).unwrap();
            loss(&probe)
        },
        &net.to_flat(),
        &analytic.to_flat(),
        &FdOptions {
            coords: 256,
            ..FdOptions::default()
        },
    )
}

fn logit_loss_fd(objective: impl Fn(&[f64], &[f64]) -> tailo_core::discriminator::LogitLoss) -> f64 {
    let mut rng = seeded(201);
    let net = Mlp::init(&discriminator_shape(3, &[64, 64]), &mut rng).unwrap();
    let (p, u) = (random_rows(&mut rng, 12, 3), random_rows(&mut rng, 20, 3));
    let x = concatenate![Axis(0), p, u];
    let logits = |n: &Mlp| n.predict(&x).unwrap().column(0).to_vec();
    let z = logits(&net);
    let l = objective(&z[..12], &z[12..]);
    let upstream = Array2::from_shape_vec((32, 1), l.grad_p.iter().chain(&l.grad_u).copied().collect()).unwrap();
    let (_, cache) = net.forward(&x).unwrap();
    let (grads, _) = net.backward(&cache, &upstream).unwrap();
    fd_on_net(&net, &grads, |n| {
        let z = logits(n);
        objective(&z[..12], &z[12..]).value
    })
}

fn gradient_suite() -> Outcome {
    let mut errs = Vec::new();
    let mut worst_debiased = 0.0f64;
    for variant in [LossVariant::Nnpu, LossVariant::PaperLiteral, LossVariant::Unclamped] {
        for eta in [0.2, 0.5] {
            worst_debiased =
                worst_debiased.max(logit_loss_fd(|p, u| debiased_loss_logits(p, u, eta, variant).unwrap()));
        }
    }
    errs.push(("debiased", worst_debiased));
    errs.push(("cross-entropy", logit_loss_fd(|p, u| cross_entropy_logits(p, u).unwrap())));

    let mut rng = seeded(202);
    let net = Mlp::init(&discriminator_shape(3, &[32, 32]), &mut rng).unwrap();
    let points = random_rows(&mut rng, 10, 3);
    let (_, grads) = gradient_penalty_at(&net, &points).unwrap();
    errs.push((
        "gradient penalty",
        fd_on_net(&net, &grads, |n| gradient_penalty_at(n, &points).unwrap().0),
    ));

    let mut policy = Policy::new(3, 2, &[64, 64], NormStats::identity(3), &mut rng).unwrap();
    policy.log_std = vec![-0.4, 0.3];
    let states = random_rows(&mut rng, 16, 3);
    let mut actions = Array2::from_shape_fn((16, 2), |_| rng.gen_range(-0.95..0.95));
    actions[[0, 0]] = 0.9999;
    actions[[1, 1]] = -0.9999;
    let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..3.0)).collect();
    let l = wbc_loss(&policy, &states, &actions, &weights).unwrap();
    let mut analytic = l.mean_grads.to_flat();
    analytic.extend(&l.log_std_grad);
    let n_mean = policy.mean_net.num_params();
    let mut params = policy.mean_net.to_flat();
    params.extend(&policy.log_std);
    let mut probe = policy.clone();
    let wbc_err = finite_diff_check(
        |v| {
            probe.mean_net.set_flat(&v[..n_mean]).unwrap();
            probe.log_std.copy_from_slice(&v[n_mean..]);
            wbc_loss(&probe, &states, &actions, &weights).unwrap().value
        },
        &params,
        &analytic,
        &FdOptions {
            coords: 256,
            ..FdOptions::default()
        },
    );
    // log_std entries are the last two coordinates; always check them
    let ls_err = finite_diff_check(
        |v| {
            probe.mean_net.set_flat(&params[..n_mean]).unwrap();
            probe.log_std.copy_from_slice(v);
            wbc_loss(&probe, &states, &actions, &weights).unwrap().value
        },
        &policy.log_std,
        &l.log_std_grad,
        &FdOptions::default(),
    );
    errs.push(("weighted BC", wbc_err.max(ls_err)));

    let vnet = Mlp::init(&value_shape(2, &[64, 64]), &mut rng).unwrap();
    let s0 = random_rows(&mut rng, 4, 2);
    let s = random_rows(&mut rng, 16, 2);
    let s_next = random_rows(&mut rng, 16, 2);
    let r: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let all = concatenate![Axis(0), s0, s, s_next];
    let kl = |n: &Mlp| {
        let v = n.predict(&all).unwrap().column(0).to_vec();
        smodice_kl_loss(&v[..4], &v[4..20], &v[20..], &r, 0.99).unwrap()
    };
    let l = kl(&vnet);
    let upstream = Array2::from_shape_vec(
        (36, 1),
        l.grad_initial.iter().chain(&l.grad_from).chain(&l.grad_next).copied().collect(),
    )
    .unwrap();
    let (_, cache) = vnet.forward(&all).unwrap();
    let (grads, _) = vnet.backward(&cache, &upstream).unwrap();
    errs.push(("SMODICE-KL", fd_on_net(&vnet, &grads, |n| kl(n).value)));

    let pass = errs.iter().all(|(_, e)| *e < 1e-4);
    let detail = errs
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 3

fn analytic_losses() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut worst = 0.0f64;
    for eta in [0.0, 0.2, 0.5, 1.0] {
        let v = debiased_loss(&[0.5; 5], &[0.5; 9], eta, LossVariant::Nnpu).unwrap();
        worst = worst.max((v - ln2).abs());
    }
    let ce = cross_entropy_loss(&[0.5; 5], &[0.5; 9]).unwrap();
    let ce_err = (ce - 2.0 * ln2).abs();
    outcome(
        worst < 1e-9 && ce_err < 1e-9,
        format!("debiased max |loss - ln2| {worst:.1e}, cross-entropy |loss - 2 ln2| {ce_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn safe_negative_selection() -> Outcome {
    let mut rng = seeded(401);
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = rng.gen_range(2..80);
        // few distinct values so that ties are common
        let means: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect();
        let beta1 = rng.gen_range(1.0 / m as f64 + 1e-9..0.999);
        let k = (beta1 * m as f64).floor() as usize;
        let expected: Vec<u64> = (0..m)
            .filter(|&i| {
                let rank = (0..m)
                    .filter(|&j| means[j] < means[i] || (means[j] == means[i] && j < i))
                    .count();
                rank < k
            })
            .map(|i| i as u64)
            .collect();
        if select_lowest(&means, beta1).unwrap() != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/100 instances differ from the rank oracle"))
}

// ---------------------------------------------------------------- 5, 6, 8, 9, 10

fn pointmaze_config() -> RunConfig {
    RunConfig {
        disc_hidden: vec![64, 64],
        policy_hidden: vec![64, 64],
        value_hidden: vec![64, 64],
        steps_pretrain: 500,
        steps_formal: 1000,
        batch_disc: 128,
        steps_bc: 10_000,
        batch_bc: 256,
        lr_policy: 3e-4,
        eval_interval: 2000,
        eval_episodes: 100,
        ..RunConfig::short_horizon()
    }
}

fn pointmaze_data(mode: ExampleMode) -> (Dataset, Dataset) {
    let ta = gen_pointmaze(150, 0.6, &mut seeded(0)).unwrap();
    let ts = make_task_specific_examples(&ta, LEFT, mode).unwrap();
    (ts, ta)
}

fn pointmaze_spec(scenario: Scenario, config: RunConfig, methods: Vec<Method>) -> ExperimentSpec {
    ExperimentSpec {
        scenario,
        env: Some(PointmazeEnv::default().with_start_jitter(config.eval_start_jitter)),
        config,
        seeds: SEEDS.to_vec(),
        methods,
        removal_x: None,
        head: None,
        tail: None,
    }
}

fn standard_run() -> ExperimentResult {
    let (ts, ta) = pointmaze_data(ExampleMode::FinalState);
    let spec = pointmaze_spec(Scenario::Standard, pointmaze_config(), vec![Method::Tailo, Method::Bc]);
    run_experiment(&spec, &ts, &ta).unwrap()
}

fn tailo_final(spec: &ExperimentSpec, mode: ExampleMode) -> f64 {
    let (ts, ta) = pointmaze_data(mode);
    run_experiment(spec, &ts, &ta).unwrap().final_success(Method::Tailo).unwrap()
}

fn per_seed_finals(r: &ExperimentResult, method: Method) -> Vec<f64> {
    r.runs
        .iter()
        .filter(|x| x.method == method)
        .map(|x| x.curve.last().unwrap().success_rate)
        .collect()
}

// ---------------------------------------------------------------- 7

fn chain_monitor(remove_every: Option<usize>, seed: u64) -> Vec<f64> {
    let cfg = RunConfig {
        disc_hidden: vec![64, 64],
        value_hidden: vec![64, 64],
        steps_formal: 1000,
        batch_disc: 128,
        steps_value: 10_000,
        batch_value: 128,
        monitor_interval: 1000,
        ..RunConfig::default()
    };
    let ta = gen_chain(20, 50).unwrap();
    let ts = make_task_specific_examples(&ta, SourceTag::Other, ExampleMode::FinalState).unwrap();
    let stats = &ta.norm_stats;
    let flat = ta.flatten(stats);
    let mut transitions = Transitions::from_flat(&flat);
    if let Some(x) = remove_every {
        transitions = transitions.remove_every_x(x).unwrap();
    }
    let kept = transitions.kept_dataset(&ta).unwrap();
    let c = train_dice_discriminator(
        &ts.flatten(stats).states,
        &kept.flatten(stats).states,
        &cfg,
        &mut stream(seed, "disc-dice"),
    )
    .unwrap();
    let rewards = clamped_logits(&c, &flat.states, cfg.logit_clamp).unwrap();
    let value = train_value(&flat.states, &rewards, &transitions, &cfg, seed).unwrap();
    value.monitor.iter().map(|m| m.max_abs_v).collect()
}

fn dice_divergence() -> Outcome {
    // index 0 is the untrained network; the first checkpoint follows the
    // first monitor interval of training
    let ratio = |m: &[f64]| m[m.len() - 1] / m[1];
    let mut missing = Vec::new();
    let mut complete = Vec::new();
    let mut monotone = 0;
    for seed in SEEDS {
        let m = chain_monitor(Some(2), seed);
        if m[5..].windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
        missing.push(ratio(&m));
        let c = chain_monitor(None, seed);
        complete.push(c.iter().skip(1).copied().fold(0.0, f64::max) / c[1]);
    }
    let diverged = missing.iter().filter(|&&r| r >= 10.0).count();
    let bounded = complete.iter().all(|&r| r < 5.0);
    outcome(
        diverged >= 2 && bounded && monotone >= 2,
        format!(
            "missing-transition final/first {:?}, complete max/first {:?}, non-decreasing after step 5000 in {monotone}/3",
            missing.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>(),
            complete.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
        ),
    )
}

fn main() {
    let mut results: Vec<(String, Outcome, f64)> = Vec::new();
    let mut record = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let mut out = std::io::stdout().lock();
        writeln!(
            out,
            "{} {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        )
        .unwrap();
        out.flush().unwrap();
        results.push((name.to_string(), o, secs));
    };

    record("1 weight oracle", &mut weight_oracle);
    record("2 gradient suite", &mut gradient_suite);
    record("3 analytic loss values", &mut analytic_losses);
    record("4 safe-negative selection", &mut safe_negative_selection);

    let t = Instant::now();
    let standard = standard_run();
    let standard_secs = t.elapsed().as_secs_f64();
    let tailo = standard.final_success(Method::Tailo).unwrap();
    let bc = standard.final_success(Method::Bc).unwrap();
    record("5 pointmaze end-to-end", &mut || {
        outcome(
            tailo >= 0.8 && bc <= 0.4,
            format!(
                "TAILO {tailo:.3} {:?}, BC {bc:.3} {:?}, pipeline {standard_secs:.0}s",
                per_seed_finals(&standard, Method::Tailo),
                per_seed_finals(&standard, Method::Bc)
            ),
        )
    });

    record("6a incomplete task-agnostic data (x = 2)", &mut || {
        let mut spec = pointmaze_spec(Scenario::IncompleteTa, pointmaze_config(), vec![Method::Tailo]);
        spec.removal_x = Some(2);
        let v = tailo_final(&spec, ExampleMode::FinalState);
        outcome(tailo - v < 0.15, format!("TAILO {v:.3}, degradation {:.3}", tailo - v))
    });
    record("6b task-specific truncated to final state", &mut || {
        let spec = pointmaze_spec(Scenario::ExampleBased, pointmaze_config(), vec![Method::Tailo]);
        let v = tailo_final(&spec, ExampleMode::Full);
        outcome(tailo - v < 0.15, format!("TAILO {v:.3}, degradation {:.3}", tailo - v))
    });

    record("7 DICE divergence on the chain", &mut dice_divergence);

    record("8 weight discrimination", &mut || {
        let ratios: Vec<f64> = standard
            .runs
            .iter()
            .filter(|r| r.method == Method::Tailo)
            .map(|r| weight_ratio(&r.ta, r.weights.as_ref().unwrap(), LEFT).unwrap())
            .collect();
        let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        outcome(min >= 2.0, format!("expert/non-expert mean weight per seed {ratios:.2?}"))
    });

    record("9 gamma ablation", &mut || {
        let cfg = RunConfig {
            gamma: 0.0,
            ..pointmaze_config()
        };
        let spec = pointmaze_spec(Scenario::Standard, cfg, vec![Method::Tailo]);
        let v = tailo_final(&spec, ExampleMode::FinalState);
        outcome(
            tailo - v >= 0.2,
            format!("gamma 0.98 {tailo:.3}, gamma 0 {v:.3}, gap {:.3}", tailo - v),
        )
    });

    record("10 determinism", &mut || {
        let a = standard.summary_csv().unwrap();
        let b = standard_run().summary_csv().unwrap();
        outcome(a == b, format!("summary.csv identical: {}", a == b))
    });

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o, _)| !o.pass)
        .map(|(n, _, _)| n.as_str())
        .collect();
    let total: f64 = results.iter().map(|(_, _, s)| s).sum::<f64>() + standard_secs;
    println!(
        "{}/{} criteria passed in {total:.0}s",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join("; "));
        std::process::exit(1);
    }
}
