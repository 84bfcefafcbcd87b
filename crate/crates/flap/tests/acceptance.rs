//! Acceptance suite: one PASS/FAIL line per headline criterion, written
//! straight to stderr so it shows up even when the harness captures output.
//!
//! Expensive training runs are shared between criteria through `OnceLock`
//! fixtures, and a global lock keeps the criteria from running concurrently
//! so wall-clock measurements are not distorted.
//!
//! Navigation returns are negative, so "a fraction of a reference return" is
//! measured on the normalized scale where a uniformly random policy scores 0
//! and the reference scores 1.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use flap::experiments::{
    adapter_vs_gradient, eval_rng, evaluate_adapter, heldout_adapter_mse, oracle_returns,
    random_policy_return, split_returns, train_run, train_single_task, validate_adaptation,
    AdapterEvaluation, Comparison, SplitReturns, HELDOUT_EPISODES, SEQUENCE_K,
};
use flap::flap_core::adapter::{AdapterConfig, InputMode};
use flap::flap_core::env::{EnvConfig, Family, Split, TaskSpec};
use flap::flap_core::eval::{mean, normalized_score, std_dev, trailing_mean};
use flap::flap_core::meta::{meta_test_adapter, meta_test_gradient, MetaTrainer, TrainConfig};
use flap::flap_core::nn::{Activation, DenseNet, GradientBundle};
use flap::flap_core::sac::{SacConfig, TaskHead, UpdateScope};
use flap::metrics::{export_metrics, strip_columns, Format, WALL_CLOCK_COLUMNS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Share of the single-task oracle's normalized return the adapter must reach
/// in distribution.
const IN_DIST_FRACTION: f64 = 0.8;
/// Share of the in-distribution gain over random the OOD gain must keep.
const OOD_FRACTION: f64 = 0.6;
/// Gradient baseline must need this many times the adapter's test-task steps.
const SAMPLE_RATIO: f64 = 10.0;
/// Adapter wall-clock must be at most this share of the gradient baseline's.
const TIME_RATIO: f64 = 0.2;
const LOSS_WINDOW: usize = 50;
const LOSS_REFERENCE_STEP: usize = 10;
const LOSS_FRACTION: f64 = 0.2;
const GRAD_NETS: usize = 100;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_TIME_S: f64 = 60.0;
const SANITY_RETURN: f64 = -15.0;
const SANITY_STEPS: u64 = 200_000;
const SANITY_TIME_S: f64 = 600.0;
const RANDOM_EPISODES: usize = 200;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name} failed: {detail}");
}

fn note(line: &str) {
    let _ = std::io::stderr().write_all(format!("  {line}\n").as_bytes());
}

fn band(values: &[f64]) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "mean {:.3} std {:.3} [{:.3}, {:.3}]",
        mean(values).unwrap_or(f64::NAN),
        std_dev(values).unwrap_or(f64::NAN),
        lo,
        hi
    )
}

fn tasks_in(tasks: &[TaskSpec], split: Split) -> Vec<TaskSpec> {
    tasks.iter().filter(|t| t.split == split).copied().collect()
}

// ---------------------------------------------------------------------------
// Shared goal-navigation runs.

struct GoalSeed {
    trainer: MetaTrainer,
    eval: AdapterEvaluation,
    /// Diagnostic only: a five-tuple companion adapter trained on the same
    /// batches, at its own validated settings.
    sequence: SplitReturns,
    random_in: f64,
    random_ood: f64,
    oracle_in: Vec<f64>,
}

fn goal_runs() -> &'static [GoalSeed] {
    static RUNS: OnceLock<Vec<GoalSeed>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let base = TrainConfig::desk();
                let config = TrainConfig {
                    seed,
                    companion_adapters: vec![AdapterConfig {
                        k: SEQUENCE_K,
                        ..base.adapter.clone()
                    }],
                    ..base
                };
                let start = Instant::now();
                let run = train_run(config.clone(), "goal", |_| Ok(())).unwrap();
                let trained = start.elapsed().as_secs_f64();
                let trainer = run.trainer;
                let eval = evaluate_adapter(&trainer).unwrap();
                let env = trainer.config.env;
                let companion = &trainer.companions[0];
                let (seq_cfg, _) = validate_adaptation(&trainer, companion, &trainer.config.eval_adapt).unwrap();
                let sequence =
                    split_returns(&trainer.learner.policy, companion, &trainer.tasks, &env, &seq_cfg, seed).unwrap();
                let test_in = tasks_in(&trainer.tasks, Split::TestInDist);
                let test_ood = tasks_in(&trainer.tasks, Split::TestOod);
                let mut rng = eval_rng(seed);
                let random_in = random_policy_return(&test_in, &env, RANDOM_EPISODES, &mut rng).unwrap();
                let random_ood = random_policy_return(&test_ood, &env, RANDOM_EPISODES, &mut rng).unwrap();
                let start = Instant::now();
                let oracle_in: Vec<f64> = oracle_returns(&config, &test_in)
                    .unwrap()
                    .iter()
                    .map(|o| o.final_return)
                    .collect();
                let mut top = eval.validation.clone();
                top.sort_by(|a, b| b.mean_return.total_cmp(&a.mean_return));
                note(&format!(
                    "goal seed {seed}: meta-train {trained:.0}s, oracles {:.0}s, initial head {} and T_adapt {} (best train-task validation {})",
                    start.elapsed().as_secs_f64(),
                    eval.initial_head,
                    eval.adaptation_steps,
                    top.iter()
                        .take(3)
                        .map(|v| format!("head {} T {}: {:.2}", v.initial_head, v.adaptation_steps, v.mean_return))
                        .collect::<Vec<_>>()
                        .join(", ")
                ));
                GoalSeed {
                    trainer,
                    eval,
                    sequence,
                    random_in,
                    random_ood,
                    oracle_in,
                }
            })
            .collect()
    })
}

#[test]
fn meta_train_reaches_oracle_fraction() {
    let _g = serial();
    let runs = goal_runs();
    let mut scores = Vec::new();
    let mut sequence = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let oracle = mean(&r.oracle_in).unwrap();
        let s = normalized_score(r.eval.adapted.in_dist, r.random_in, oracle);
        let s5 = normalized_score(r.sequence.in_dist, r.random_in, oracle);
        note(&format!(
            "seed {seed}: adapted {:.2}, oracle {:.2} (per task {:.2?}), random {:.2}, normalized {:.3}; diagnostic k={SEQUENCE_K} companion {:.2} (normalized {s5:.3})",
            r.eval.adapted.in_dist, oracle, r.oracle_in, r.random_in, s, r.sequence.in_dist
        ));
        scores.push(s);
        sequence.push(s5);
    }
    note(&format!(
        "diagnostic k={SEQUENCE_K} companion normalized score {}",
        band(&sequence)
    ));
    let m = mean(&scores).unwrap();
    verdict(
        "meta-train adapter in-distribution >= 80% of single-task oracles",
        m >= IN_DIST_FRACTION,
        &format!(
            "normalized score {} (threshold {IN_DIST_FRACTION})",
            band(&scores)
        ),
    );
}

#[test]
fn ood_generalization() {
    let _g = serial();
    let runs = goal_runs();
    let mut ratios = Vec::new();
    let mut beats_zero_shot = true;
    for (seed, r) in SEEDS.iter().zip(runs) {
        let ratio = (r.eval.adapted.ood - r.random_ood) / (r.eval.adapted.in_dist - r.random_in);
        note(&format!(
            "seed {seed}: OOD adapted {:.2}, OOD zero-shot {:.2}, OOD random {:.2}; in-dist adapted {:.2}, random {:.2}; gain ratio {:.3}; diagnostic k={SEQUENCE_K} companion OOD {:.2}",
            r.eval.adapted.ood, r.eval.zero_shot.ood, r.random_ood, r.eval.adapted.in_dist, r.random_in, ratio, r.sequence.ood
        ));
        beats_zero_shot &= r.eval.adapted.ood > r.eval.zero_shot.ood;
        ratios.push(ratio);
    }
    let keeps = ratios.iter().all(|&x| x >= OOD_FRACTION);
    verdict(
        "OOD adapted >= 60% of in-distribution and above zero-shot on every seed",
        keeps && beats_zero_shot,
        &format!(
            "OOD/in-dist gain over random {} (threshold {OOD_FRACTION} every seed); above zero-shot on every seed: {beats_zero_shot}",
            band(&ratios)
        ),
    );
}

#[test]
fn adapter_loss_converges() {
    let _g = serial();
    let mut ratios = Vec::new();
    for (seed, r) in SEEDS.iter().zip(goal_runs()) {
        let trace = r.trainer.adapter_loss_trace();
        let smooth = trailing_mean(trace, LOSS_WINDOW);
        let ratio = smooth[smooth.len() - 1] / smooth[LOSS_REFERENCE_STEP];
        let per_iteration: Vec<f64> = trace
            .chunks(r.trainer.config.updates_per_iteration)
            .map(|c| mean(c).unwrap())
            .collect();
        let it_smooth = trailing_mean(&per_iteration, LOSS_WINDOW);
        note(&format!(
            "seed {seed}: smoothed loss at update {LOSS_REFERENCE_STEP} {:.3e}, at end {:.3e} ({} updates), ratio {ratio:.3}; per training iteration: at 10 {:.3e}, at end {:.3e}",
            smooth[LOSS_REFERENCE_STEP],
            smooth[smooth.len() - 1],
            trace.len(),
            it_smooth[LOSS_REFERENCE_STEP],
            it_smooth[it_smooth.len() - 1]
        ));
        ratios.push(ratio);
    }
    verdict(
        "adapter training loss converges (smoothed end < 20% of step 10)",
        ratios.iter().all(|&x| x < LOSS_FRACTION),
        &format!("end/step-10 ratio per seed {ratios:.3?} (threshold {LOSS_FRACTION})"),
    );
}

#[test]
fn adapter_beats_gradient_baseline() {
    let _g = serial();
    let r = &goal_runs()[0];
    let cmp: Comparison = adapter_vs_gradient(&r.trainer, 3).unwrap();
    let horizon = r.trainer.config.env.horizon as f64;
    let mut ratios = Vec::new();
    let (mut ta, mut tg) = (0.0, 0.0);
    for t in &cmp.tasks {
        let ratio = t.gradient_steps_to_band as f64 / t.adapter_env_steps as f64;
        note(&format!(
            "task {}: adapter {:.2} in {} steps ({:.2e}s); gradient {} band after {} steps (final {:.2}, {:.3}s)",
            t.task_id,
            t.adapter_return,
            t.adapter_env_steps,
            t.adapter_seconds,
            if t.gradient_reached_band { "reached" } else { "never reached" },
            t.gradient_steps_to_band,
            t.gradient_final_return,
            t.gradient_seconds
        ));
        assert_eq!(t.adapter_env_steps as f64, horizon);
        ratios.push(ratio);
        ta += t.adapter_seconds;
        tg += t.gradient_seconds;
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    verdict(
        "gradient baseline needs >= 10x the adapter's test-task steps; adapter wall-clock <= 1/5",
        median >= SAMPLE_RATIO && ta <= TIME_RATIO * tg,
        &format!(
            "band [{:.2}, {:.2}]; step ratio per task {ratios:.1?} (median {median:.1}, threshold {SAMPLE_RATIO}); wall-clock adapter {ta:.3e}s vs gradient {tg:.3}s (ratio {:.2e}, threshold {TIME_RATIO}); steps to band are censored at the budget when never reached",
            cmp.band.0,
            cmp.band.1,
            ta / tg
        ),
    );
}

// ---------------------------------------------------------------------------
// Paired-adapter runs: companions see exactly the main adapter's batches.

fn paired_runs(family: Family, main: AdapterConfig, companion: AdapterConfig) -> Vec<MetaTrainer> {
    SEEDS
        .iter()
        .map(|&seed| {
            let config = TrainConfig {
                seed,
                family,
                adapter: main.clone(),
                companion_adapters: vec![companion.clone()],
                ..TrainConfig::desk()
            };
            let start = Instant::now();
            let run = train_run(config, family_name(family), |_| Ok(())).unwrap();
            note(&format!(
                "{} seed {seed}: trained in {:.0}s",
                family_name(family),
                start.elapsed().as_secs_f64()
            ));
            run.trainer
        })
        .collect()
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::GoalNav => "goal_nav",
        Family::Direction => "direction",
        Family::SparseNav => "sparse_nav",
    }
}

#[test]
fn sars_beats_sas_on_direction() {
    let _g = serial();
    let base = TrainConfig::desk().adapter;
    let runs = paired_runs(
        Family::Direction,
        AdapterConfig {
            input_mode: InputMode::Sars,
            ..base.clone()
        },
        AdapterConfig {
            input_mode: InputMode::Sas,
            ..base
        },
    );
    let mut all = true;
    let mut pairs = Vec::new();
    for (seed, t) in SEEDS.iter().zip(&runs) {
        let c = &t.config;
        let mse = |a| {
            heldout_adapter_mse(
                &t.learner.policy,
                a,
                &t.tasks,
                &c.env,
                HELDOUT_EPISODES,
                &mut eval_rng(*seed),
            )
            .unwrap()
        };
        let sars = mse(t.adapter.as_ref().unwrap());
        let sas = mse(&t.companions[0]);
        all &= sars < sas;
        pairs.push((sars, sas));
    }
    verdict(
        "SARS adapter input has lower held-out MSE than SAS on direction, every seed",
        all,
        &format!(
            "(SARS, SAS) held-out MSE per seed: {}",
            pairs
                .iter()
                .map(|(a, b)| format!("({a:.3e}, {b:.3e})"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn sequence_input_on_sparse() {
    let _g = serial();
    let base = TrainConfig::desk().adapter;
    let runs = paired_runs(
        Family::SparseNav,
        AdapterConfig {
            k: 1,
            ..base.clone()
        },
        AdapterConfig {
            k: SEQUENCE_K,
            ..base
        },
    );
    let (mut k1, mut k5) = (Vec::new(), Vec::new());
    for (seed, t) in SEEDS.iter().zip(&runs) {
        let c = &t.config;
        let eval = |a| {
            let (cfg, _) = validate_adaptation(t, a, &c.eval_adapt).unwrap();
            let r = split_returns(&t.learner.policy, a, &t.tasks, &c.env, &cfg, c.seed).unwrap();
            (
                format!(
                    "head {:?}, T_adapt {}",
                    cfg.initial_head, cfg.adaptation_steps
                ),
                r.in_dist,
            )
        };
        let (s1, r1) = eval(t.adapter.as_ref().unwrap());
        let (s5, r5) = eval(&t.companions[0]);
        note(&format!(
            "seed {seed}: k=1 return {r1:.3} ({s1}); k={SEQUENCE_K} return {r5:.3} ({s5})"
        ));
        k1.push(r1);
        k5.push(r5);
    }
    let (m1, m5) = (mean(&k1).unwrap(), mean(&k5).unwrap());
    let (d1, d5) = (std_dev(&k1).unwrap(), std_dev(&k5).unwrap());
    verdict(
        "sequence input (k=5) on sparse_nav: cross-seed std <= and mean >= single tuple",
        d5 <= d1 && m5 >= m1,
        &format!("k=1 {}; k=5 {}", band(&k1), band(&k5)),
    );
}

// ---------------------------------------------------------------------------
// Self-contained criteria.

fn central_difference(
    net: &DenseNet,
    x: &[f64],
    batch: usize,
    og: &[f64],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let objective = |n: &DenseNet, xs: &[f64]| -> f64 {
        let y = n.forward_batch(xs, batch).unwrap();
        y.output().iter().zip(og).map(|(a, b)| a * b).sum()
    };
    let mut p = net.clone();
    let mut dp = Vec::with_capacity(net.param_count());
    for i in 0..net.param_count() {
        let v = p.params()[i];
        p.params_mut()[i] = v + h;
        let up = objective(&p, x);
        p.params_mut()[i] = v - h;
        let down = objective(&p, x);
        p.params_mut()[i] = v;
        dp.push((up - down) / (2.0 * h));
    }
    let mut xs = x.to_vec();
    let mut dx = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = xs[i];
        xs[i] = v + h;
        let up = objective(net, &xs);
        xs[i] = v - h;
        let down = objective(net, &xs);
        xs[i] = v;
        dx.push((up - down) / (2.0 * h));
    }
    (dp, dx)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn gradient_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let acts = [Activation::Relu, Activation::Tanh, Activation::Linear];
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..GRAD_NETS {
        let depth = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let hidden = acts[rng.random_range(0..3)];
        let output = acts[rng.random_range(1..3)];
        let net = DenseNet::new(&dims, hidden, output, &mut rng).unwrap();
        let batch = rng.random_range(1..=3);
        let x: Vec<f64> = (0..batch * dims[0])
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let og: Vec<f64> = (0..batch * dims[depth])
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let tape = net.forward_batch(&x, batch).unwrap();
        let mut grads = GradientBundle::zeros_like(&net);
        let gx = net
            .backward_batch(&tape, &og, Some(&mut grads), true)
            .unwrap()
            .unwrap();
        let (dp, dx) = central_difference(&net, &x, batch, &og, 1e-6);
        for (a, n) in grads.as_slice().iter().zip(&dp).chain(gx.iter().zip(&dx)) {
            worst = worst.max(rel_err(*a, *n));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "analytic gradients match central differences on 100 random networks",
        worst <= GRAD_REL_TOL && secs < GRAD_TIME_S,
        &format!("{checked} components, worst relative error {worst:.2e} (tolerance {GRAD_REL_TOL:.0e}), {secs:.2}s"),
    );
}

#[test]
fn sac_sanity_single_task() {
    let _g = serial();
    let horizon = 100;
    let lr = 1e-3;
    let config = TrainConfig {
        n_train_tasks: 1,
        env: EnvConfig::default().with_horizon(horizon),
        sac: SacConfig {
            policy_lr: lr,
            critic_lr: lr,
            alpha_lr: lr,
            ..SacConfig::desk(64)
        },
        iterations: (SANITY_STEPS / horizon as u64) as usize,
        updates_per_iteration: horizon,
        steps_per_task_per_iteration: horizon,
        warmup_steps_per_task: 10 * horizon,
        batch_size: 64,
        adapter_batch_size: 64,
        buffer_capacity: SANITY_STEPS as usize,
        ..TrainConfig::desk()
    };
    let task = config.sample_tasks().unwrap()[0];
    let random =
        random_policy_return(&[task], &config.env, RANDOM_EPISODES, &mut eval_rng(0)).unwrap();
    let start = Instant::now();
    let out = train_single_task(&config, &task, 0, Some(SANITY_RETURN)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "single-task SAC reaches -15 within 200k steps (horizon 100, 64-64-64 trunk)",
        out.final_return >= SANITY_RETURN && out.env_steps <= SANITY_STEPS && secs < SANITY_TIME_S,
        &format!(
            "return {:.2} after {} steps in {secs:.0}s (random policy {random:.2}, goal {:.2?})",
            out.final_return, out.env_steps, task.goal
        ),
    );
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        iterations: 6,
        updates_per_iteration: 10,
        eval_every: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn structural_invariants() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let mut trainer = MetaTrainer::new(small_config(11)).unwrap();
    trainer.train().unwrap();
    let ids: Vec<u32> = trainer.train_tasks().iter().map(|t| t.id).collect();

    // Head isolation: an update on one task's batch moves only that task's heads.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut learner = trainer.learner.clone();
    let before = learner.clone();
    let batch = trainer.buffers()[1].sample_batch(32, &mut rng).unwrap();
    learner
        .update(&[(ids[1], &batch)], UpdateScope::ALL, &mut rng)
        .unwrap();
    let isolated = (0..ids.len()).filter(|&i| i != 1).all(|i| {
        learner.policy.heads[i] == before.policy.heads[i]
            && (0..2).all(|q| learner.critic.online[q].heads[i] == before.critic.online[q].heads[i])
    });
    check(
        "head isolation",
        isolated && learner.policy.heads[1] != before.policy.heads[1],
    );

    // Trunk immutability at test time.
    let policy_trunk = trainer.learner.policy.trunk.clone();
    let critic = trainer.learner.critic.clone();
    let mut rng = eval_rng(1);
    let cfg = trainer.config.eval_adapt.clone();
    for task in trainer.tasks.iter().filter(|t| t.split != Split::Train) {
        meta_test_adapter(
            &trainer.learner.policy,
            trainer.adapter.as_ref().unwrap(),
            task,
            &trainer.config.env,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let mut g = cfg.clone();
        g.gradient.env_step_budget = 2 * trainer.config.env.horizon as u64;
        meta_test_gradient(&trainer.learner, task, &trainer.config.env, &g, &mut rng).unwrap();
    }
    check(
        "trunk immutability",
        trainer.learner.policy.trunk == policy_trunk && trainer.learner.critic == critic,
    );

    // Stop-gradient: the adapter's loss never reaches the policy or critic.
    let mut plain = MetaTrainer::new(TrainConfig {
        use_adapter: false,
        ..small_config(11)
    })
    .unwrap();
    plain.train().unwrap();
    check(
        "stop-gradient from adapter to policy",
        plain.learner == trainer.learner,
    );

    // Flatten/unflatten bijection on every trained head.
    let c = &trainer.config.sac;
    let bijective = trainer.learner.policy.heads.iter().all(|h| {
        TaskHead::from_flat(
            h.task_id,
            c.head_arch,
            c.feature_dim(),
            c.head_out_dim(),
            h.flatten(),
        )
        .unwrap()
            == *h
            && h.flatten().len() == c.head_flat_len()
    });
    check("flatten/unflatten bijection", bijective);

    // Buffer task purity.
    let pure = trainer
        .buffers()
        .iter()
        .all(|b| !b.is_empty() && b.iter().all(|t| t.task_id == b.task_id()));
    check("buffer task purity", pure);

    // Split disjointness, for every family.
    for family in [Family::GoalNav, Family::Direction, Family::SparseNav] {
        let tasks = TrainConfig {
            family,
            ..small_config(3)
        }
        .sample_tasks()
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        let unique = tasks.iter().all(|t| seen.insert(t.id));
        let regions = tasks.iter().all(|t| match t.split {
            Split::Train | Split::TestInDist => t.in_train_region(),
            Split::TestOod => !t.in_train_region(),
        });
        let no_shared_goal = tasks.iter().filter(|t| t.split == Split::Train).all(|a| {
            tasks
                .iter()
                .filter(|b| b.split != Split::Train)
                .all(|b| a.goal != b.goal)
        });
        check(
            &format!("split disjointness ({})", family_name(family)),
            unique && regions && no_shared_goal,
        );
    }

    verdict(
        "structural invariants",
        failures.is_empty(),
        &if failures.is_empty() {
            "head isolation, trunk immutability, stop-gradient, flatten bijection, buffer purity, split disjointness".to_string()
        } else {
            format!("violated: {}", failures.join(", "))
        },
    );
}

#[test]
fn determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let export = |seed: u64, name: &str| {
        let run = train_run(small_config(seed), "det", |_| Ok(())).unwrap();
        let path = dir.path().join(name);
        export_metrics(&run.rows, &path, Format::Csv).unwrap();
        strip_columns(
            &std::fs::read_to_string(&path).unwrap(),
            &WALL_CLOCK_COLUMNS,
        )
    };
    let a = export(7, "a.csv");
    let b = export(7, "b.csv");
    let other = export(8, "c.csv");
    verdict(
        "identical seed and config give identical metrics CSV bytes (wall-clock excluded)",
        a == b && a != other,
        &format!(
            "{} bytes compared; different seed differs: {}",
            a.len(),
            a != other
        ),
    );
}
