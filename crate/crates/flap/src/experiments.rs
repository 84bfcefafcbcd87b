//! Experiment runners shared by the command line and the acceptance suite:
//! timed meta-training, reference baselines (random policy, single-task SAC
//! oracles), held-out adapter error, and the named ablations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use flap_core::adapter::{AdapterConfig, AdapterNet, InputMode};
use flap_core::env::{EnvConfig, Family, PointEnv, RewardMode, Split, TaskSpec, Transition};
use flap_core::eval::{self, CurvePoint};
use flap_core::meta::{
    self, nonlinear_head_variant, rollout_head, test_reward_mode, AdaptConfig, InitialHead,
    MetaTrainer, TrainConfig,
};
use flap_core::replay::SarsWindow;
use flap_core::sac::{ActMode, MultiHeadPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::metrics::MetricsRow;
use crate::timing;

/// RNG for evaluation inside experiments, independent of training streams.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    rng
}

/// A finished meta-training run: the trainer (learner, adapters, buffers)
/// and its per-iteration metrics with cumulative wall-clock filled in.
pub struct TrainRun {
    pub trainer: MetaTrainer,
    pub rows: Vec<MetricsRow>,
}

/// Meta-trains `config`, handing every record to `sink` as it is produced.
pub fn train_run(
    config: TrainConfig,
    run: &str,
    mut sink: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainRun> {
    let seed = config.seed;
    let mut trainer = MetaTrainer::new(config)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(trainer.config.iterations);
    while trainer.iteration() < trainer.config.iterations as u64 {
        let mut record = trainer.run_iteration()?;
        record.wall_clock_s = start.elapsed().as_secs_f64();
        let row = MetricsRow {
            run: run.to_string(),
            seed,
            record,
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(TrainRun { trainer, rows })
}

/// Monte-Carlo return of uniformly random actions, averaged over tasks and
/// `episodes` episodes each, under the reward used at test time.
pub fn random_policy_return<R: Rng + ?Sized>(
    tasks: &[TaskSpec],
    env: &EnvConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut env = PointEnv::new(*task, *env, test_reward_mode(task.family));
        let mut total = 0.0;
        for _ in 0..episodes {
            env.reset();
            loop {
                let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                let t = env.step(&a).map_err(meta::MetaError::from)?;
                total += t.reward;
                if t.done {
                    break;
                }
            }
        }
        per_task.push(total / episodes as f64);
    }
    eval::mean(&per_task)
        .ok_or_else(|| FlapError::Config("no tasks for the random baseline".into()))
}

/// Result of training a single-task SAC agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskOutcome {
    pub task_id: u32,
    /// Deterministic return after the last iteration.
    pub final_return: f64,
    /// Deterministic return after every iteration against steps collected.
    pub curve: Vec<CurvePoint>,
    pub env_steps: u64,
}

/// Trains plain SAC on `task` alone with the schedule and networks of
/// `config` (the adapter is disabled), evaluating the mean-action policy
/// under the test reward after every iteration. Stops early once
/// `stop_at_return` is reached.
pub fn train_single_task(
    config: &TrainConfig,
    task: &TaskSpec,
    seed: u64,
    stop_at_return: Option<f64>,
) -> Result<SingleTaskOutcome> {
    let mut task = *task;
    task.split = Split::Train;
    let cfg = TrainConfig {
        family: task.family,
        n_train_tasks: 1,
        use_adapter: false,
        companion_adapters: Vec::new(),
        eval_every: 0,
        seed,
        ..config.clone()
    };
    let env = cfg.env;
    let mut trainer = MetaTrainer::with_tasks(cfg, vec![task])?;
    let mut curve = Vec::new();
    let mut last = f64::NEG_INFINITY;
    while trainer.iteration() < trainer.config.iterations as u64 {
        trainer.run_iteration()?;
        let policy = &trainer.learner.policy;
        last = rollout_head(
            policy,
            &policy.heads[0],
            &task,
            &env,
            test_reward_mode(task.family),
        )?;
        curve.push(CurvePoint {
            env_steps: trainer.env_steps_total(),
            episode_return: last,
        });
        if stop_at_return.is_some_and(|s| last >= s) {
            break;
        }
    }
    Ok(SingleTaskOutcome {
        task_id: task.id,
        final_return: last,
        env_steps: trainer.env_steps_total(),
        curve,
    })
}

/// Independently trained single-task oracles, one per task, with the same
/// budget as meta-training. Seeds are derived from `config.seed` and the
/// task id.
pub fn oracle_returns(config: &TrainConfig, tasks: &[TaskSpec]) -> Result<Vec<SingleTaskOutcome>> {
    tasks
        .iter()
        .map(|t| {
            let seed = config
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(u64::from(t.id) + 1);
            train_single_task(config, t, seed, None)
        })
        .collect()
}

/// Adapter regression error on fresh on-policy data: for every train task,
/// `episodes` new episodes with sampled actions from its own head, every
/// step's window paired with that head's current parameters.
pub fn heldout_adapter_mse<R: Rng + ?Sized>(
    policy: &MultiHeadPolicy,
    adapter: &AdapterNet,
    tasks: &[TaskSpec],
    env: &EnvConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut windows: Vec<(SarsWindow, Vec<f64>)> = Vec::new();
    for task in tasks.iter().filter(|t| t.split == Split::Train) {
        let target = policy
            .head(task.id)
            .map_err(meta::MetaError::from)?
            .flatten();
        let mut env = PointEnv::new(*task, *env, RewardMode::Dense);
        for _ in 0..episodes {
            let mut obs = env.reset();
            let mut trajectory: Vec<Transition> = Vec::with_capacity(env.config().horizon);
            loop {
                let (a, _) = policy
                    .act(task.id, &obs, ActMode::Sample, rng)
                    .map_err(meta::MetaError::from)?;
                let t = env.step(&[a[0], a[1]]).map_err(meta::MetaError::from)?;
                trajectory.push(t);
                windows.push((SarsWindow::padded(&trajectory, adapter.k), target.clone()));
                obs = t.next_state;
                if t.done {
                    break;
                }
            }
        }
    }
    let pairs: Vec<(&SarsWindow, &[f64])> =
        windows.iter().map(|(w, t)| (w, t.as_slice())).collect();
    if pairs.is_empty() {
        return Err(FlapError::Config(
            "no train tasks for held-out evaluation".into(),
        ));
    }
    Ok(adapter.mse(&pairs).map_err(meta::MetaError::from)?)
}

/// Mean adapted return on the in-distribution and OOD test tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReturns {
    pub in_dist: f64,
    pub ood: f64,
}

pub fn split_returns(
    policy: &MultiHeadPolicy,
    adapter: &AdapterNet,
    tasks: &[TaskSpec],
    env: &EnvConfig,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<SplitReturns> {
    let mut rng = eval_rng(seed);
    let mut out = [0.0; 2];
    for (slot, split) in [Split::TestInDist, Split::TestOod].into_iter().enumerate() {
        let ts: Vec<TaskSpec> = tasks.iter().filter(|t| t.split == split).copied().collect();
        out[slot] = meta::average_test_return(policy, adapter, &ts, env, cfg, &mut rng)?;
    }
    Ok(SplitReturns {
        in_dist: out[0],
        ood: out[1],
    })
}

/// Feedback-loop lengths tried when validating an adapter.
pub const ADAPTATION_STEP_CANDIDATES: [usize; 6] = [1, 2, 5, 10, 25, 50];

/// Mean train-task return of one (initial head, feedback-loop length) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub initial_head: usize,
    pub adaptation_steps: usize,
    pub mean_return: f64,
}

/// Picks the training head that seeds adaptation and the feedback-loop
/// length for `adapter` from the train tasks alone. Each train task is
/// treated as unseen; a head is never scored on its own task, since there it
/// would already be the answer. The best mean return wins, ties going to the
/// shorter loop and then the lower head index. Candidates beyond the horizon
/// are skipped. Test tasks are never consulted.
pub fn validate_adaptation(
    trainer: &MetaTrainer,
    adapter: &AdapterNet,
    base: &AdaptConfig,
) -> Result<(AdaptConfig, Vec<ValidationScore>)> {
    let c = &trainer.config;
    let held: Vec<TaskSpec> = trainer
        .train_tasks()
        .into_iter()
        .map(|mut t| {
            t.split = Split::TestInDist;
            t
        })
        .collect();
    let heads = &trainer.learner.policy.heads;
    let mut scores = Vec::new();
    for &steps in ADAPTATION_STEP_CANDIDATES
        .iter()
        .filter(|&&s| s <= c.env.horizon)
    {
        for (h, head) in heads.iter().enumerate() {
            let others: Vec<TaskSpec> = held
                .iter()
                .filter(|t| t.id != head.task_id)
                .copied()
                .collect();
            let tasks = if others.is_empty() { &held } else { &others };
            let cfg = AdaptConfig {
                adaptation_steps: steps,
                initial_head: InitialHead::Index(h),
                ..base.clone()
            };
            let r = meta::average_test_return(
                &trainer.learner.policy,
                adapter,
                tasks,
                &c.env,
                &cfg,
                &mut eval_rng(c.seed),
            )?;
            scores.push(ValidationScore {
                initial_head: h,
                adaptation_steps: steps,
                mean_return: r,
            });
        }
    }
    let best = scores
        .iter()
        .fold(None::<ValidationScore>, |acc, &v| match acc {
            Some(b) if b.mean_return >= v.mean_return => acc,
            _ => Some(v),
        })
        .ok_or_else(|| FlapError::Config("no feedback-loop length fits the horizon".into()))?;
    Ok((
        AdaptConfig {
            adaptation_steps: best.adaptation_steps,
            initial_head: InitialHead::Index(best.initial_head),
            ..base.clone()
        },
        scores,
    ))
}

/// Validated configs always name a head.
fn head_index(cfg: &AdaptConfig) -> usize {
    match cfg.initial_head {
        InitialHead::Index(i) => i,
        InitialHead::Random => usize::MAX,
    }
}

/// Returns of a trained run's main adapter with its validated initial head
/// and feedback-loop length, next to the zero-shot (no feedback) returns of
/// the same initial head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEvaluation {
    pub adaptation_steps: usize,
    pub initial_head: usize,
    /// Train-task validation return of every candidate pair.
    pub validation: Vec<ValidationScore>,
    pub adapted: SplitReturns,
    pub zero_shot: SplitReturns,
}

pub fn evaluate_adapter(trainer: &MetaTrainer) -> Result<AdapterEvaluation> {
    let adapter = trainer
        .adapter
        .as_ref()
        .ok_or_else(|| FlapError::Config("run has no adapter".into()))?;
    let c = &trainer.config;
    let (cfg, validation) = validate_adaptation(trainer, adapter, &c.eval_adapt)?;
    let adapted = split_returns(
        &trainer.learner.policy,
        adapter,
        &trainer.tasks,
        &c.env,
        &cfg,
        c.seed,
    )?;
    let zero = AdaptConfig {
        adaptation_steps: 0,
        ..cfg.clone()
    };
    let zero_shot = split_returns(
        &trainer.learner.policy,
        adapter,
        &trainer.tasks,
        &c.env,
        &zero,
        c.seed,
    )?;
    Ok(AdapterEvaluation {
        adaptation_steps: cfg.adaptation_steps,
        initial_head: head_index(&cfg),
        validation,
        adapted,
        zero_shot,
    })
}

/// The named ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Adapter feedback loop against head-only gradient adaptation.
    NoAdapter,
    /// (state, action, reward, next state) against (state, action, next
    /// state) adapter input.
    SasInput,
    /// Linear against two-layer output heads.
    NonlinearHead,
    /// Single tuple against a five-tuple window.
    SequenceInput,
    /// Dense-reward training, sparse-reward testing.
    Sparse,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoAdapter,
        Ablation::SasInput,
        Ablation::NonlinearHead,
        Ablation::SequenceInput,
        Ablation::Sparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoAdapter => "no-adapter",
            Ablation::SasInput => "sas-input",
            Ablation::NonlinearHead => "nonlinear-head",
            Ablation::SequenceInput => "sequence-input",
            Ablation::Sparse => "sparse",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                format!(
                    "unknown ablation `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// One measured quantity of one ablation variant on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub variant: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Window length of the sequence variant.
pub const SEQUENCE_K: usize = 5;

/// Held-out episodes per train task for adapter error estimates.
pub const HELDOUT_EPISODES: usize = 4;

struct Rows<'a> {
    ablation: Ablation,
    seed: u64,
    out: &'a mut Vec<AblationRow>,
}

impl Rows<'_> {
    fn push(&mut self, variant: &str, metric: &str, value: f64) {
        self.out.push(AblationRow {
            ablation: self.ablation.name().to_string(),
            variant: variant.to_string(),
            seed: self.seed,
            metric: metric.to_string(),
            value,
        });
    }
}

/// Runs one ablation on one seed. `base` is the experiment being ablated;
/// each variant changes exactly the ablated setting.
pub fn run_ablation(
    ablation: Ablation,
    base: &TrainConfig,
    seed: u64,
    progress: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    let mut rows = Rows {
        ablation,
        seed,
        out: &mut out,
    };
    let base = TrainConfig {
        seed,
        ..base.clone()
    };
    match ablation {
        Ablation::NoAdapter => {
            let run = train_run(base, "no-adapter", &mut *progress)?;
            let cmp = adapter_vs_gradient(&run.trainer, 1)?;
            for t in &cmp.tasks {
                rows.push("adapter", "return", t.adapter_return);
                rows.push("adapter", "env_steps", t.adapter_env_steps as f64);
                rows.push("adapter", "seconds", t.adapter_seconds);
                rows.push("gradient", "return", t.gradient_final_return);
                rows.push(
                    "gradient",
                    "env_steps_to_band",
                    t.gradient_steps_to_band as f64,
                );
                rows.push("gradient", "seconds", t.gradient_seconds);
            }
            rows.push("adapter", "band_low", cmp.band.0);
            rows.push("adapter", "band_high", cmp.band.1);
        }
        Ablation::SasInput => {
            let config = TrainConfig {
                adapter: AdapterConfig {
                    input_mode: InputMode::Sars,
                    ..base.adapter.clone()
                },
                companion_adapters: vec![AdapterConfig {
                    input_mode: InputMode::Sas,
                    ..base.adapter.clone()
                }],
                ..base
            };
            let run = train_run(config, "sas-input", &mut *progress)?;
            for (variant, adapter) in [
                ("sars", run.trainer.adapter.as_ref().unwrap()),
                ("sas", &run.trainer.companions[0]),
            ] {
                adapter_rows(
                    &mut rows,
                    variant,
                    &run.trainer,
                    adapter,
                    &run.trainer.config.eval_adapt,
                )?;
            }
        }
        Ablation::NonlinearHead => {
            let linear = train_run(base.clone(), "linear-head", &mut *progress)?;
            let nonlinear = train_run(
                nonlinear_head_variant(&base),
                "nonlinear-head",
                &mut *progress,
            )?;
            for (variant, run) in [("linear", &linear), ("nonlinear", &nonlinear)] {
                let t = &run.trainer;
                adapter_rows(
                    &mut rows,
                    variant,
                    t,
                    t.adapter.as_ref().unwrap(),
                    &t.config.eval_adapt,
                )?;
                rows.push(variant, "head_params", t.config.sac.head_flat_len() as f64);
            }
        }
        Ablation::SequenceInput | Ablation::Sparse => {
            let family = if ablation == Ablation::Sparse {
                Family::SparseNav
            } else {
                base.family
            };
            let single = AdapterConfig {
                k: 1,
                ..base.adapter.clone()
            };
            let config = TrainConfig {
                family,
                adapter: single.clone(),
                companion_adapters: vec![AdapterConfig {
                    k: SEQUENCE_K,
                    ..single
                }],
                ..base
            };
            let run = train_run(config, ablation.name(), &mut *progress)?;
            let t = &run.trainer;
            let ea = &t.config.eval_adapt;
            adapter_rows(&mut rows, "k1", t, t.adapter.as_ref().unwrap(), ea)?;
            adapter_rows(&mut rows, "k5", t, &t.companions[0], ea)?;
            let zero = evaluate_adapter(t)?.zero_shot;
            rows.push("zero_shot", "return_in_dist", zero.in_dist);
            rows.push("zero_shot", "return_ood", zero.ood);
            let tests: Vec<TaskSpec> = t
                .tasks
                .iter()
                .filter(|x| x.split != Split::Train)
                .copied()
                .collect();
            let random = random_policy_return(&tests, &t.config.env, 20, &mut eval_rng(seed))?;
            rows.push("random", "return", random);
        }
    }
    Ok(out)
}

fn adapter_rows(
    rows: &mut Rows<'_>,
    variant: &str,
    trainer: &MetaTrainer,
    adapter: &AdapterNet,
    cfg: &AdaptConfig,
) -> Result<()> {
    let c = &trainer.config;
    let (cfg, _) = validate_adaptation(trainer, adapter, cfg)?;
    let r = split_returns(
        &trainer.learner.policy,
        adapter,
        &trainer.tasks,
        &c.env,
        &cfg,
        c.seed,
    )?;
    rows.push(variant, "adaptation_steps", cfg.adaptation_steps as f64);
    rows.push(variant, "initial_head", head_index(&cfg) as f64);
    rows.push(variant, "return_in_dist", r.in_dist);
    rows.push(variant, "return_ood", r.ood);
    let mse = heldout_adapter_mse(
        &trainer.learner.policy,
        adapter,
        &trainer.tasks,
        &c.env,
        HELDOUT_EPISODES,
        &mut eval_rng(c.seed),
    )?;
    rows.push(variant, "heldout_mse", mse);
    Ok(())
}

/// Per-task comparison of the adapter feedback loop with head-only gradient
/// adaptation on the in-distribution test tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task_id: u32,
    pub adapter_return: f64,
    /// Test-task experience the adapter consumed: one episode.
    pub adapter_env_steps: u64,
    pub adapter_seconds: f64,
    pub gradient_final_return: f64,
    /// Collection steps until an evaluation first reached the band; the
    /// full budget when it never did.
    pub gradient_steps_to_band: u64,
    pub gradient_reached_band: bool,
    pub gradient_seconds: f64,
    pub gradient_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Adapter-mode return band across tasks: mean minus and plus one
    /// standard deviation.
    pub band: (f64, f64),
    pub tasks: Vec<TaskComparison>,
}

/// Runs both adaptation methods on every in-distribution test task. The
/// gradient baseline stops once it reaches the lower edge of the adapter
/// band or exhausts its budget; only its collection-and-update episodes are
/// timed.
pub fn adapter_vs_gradient(trainer: &MetaTrainer, repeats: usize) -> Result<Comparison> {
    let c = &trainer.config;
    let adapter = trainer
        .adapter
        .as_ref()
        .ok_or_else(|| FlapError::Config("run has no adapter".into()))?;
    let tasks = trainer.test_tasks(Split::TestInDist);
    let policy = &trainer.learner.policy;
    let (acfg, _) = validate_adaptation(trainer, adapter, &c.eval_adapt)?;
    let mut rng = eval_rng(c.seed);
    let outcomes: Vec<_> = tasks
        .iter()
        .map(|t| meta::meta_test_adapter(policy, adapter, t, &c.env, &acfg, &mut rng))
        .collect::<std::result::Result<_, _>>()?;
    let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
    let m = eval::mean(&returns).unwrap_or(0.0);
    let s = eval::std_dev(&returns).unwrap_or(0.0);
    let band = (m - s, m + s);
    let adapter_time = timing::time_adapter(policy, adapter, &tasks, &c.env, &acfg, repeats)?;
    let mut gcfg = c.eval_adapt.clone();
    gcfg.gradient.stop_at_return = Some(band.0);
    gcfg.gradient.batch_size = c.batch_size;
    let (gradient_time, grads) =
        timing::time_gradient(&trainer.learner, &tasks, &c.env, &gcfg, repeats, c.seed)?;
    let per_task = outcomes
        .iter()
        .zip(&grads)
        .enumerate()
        .map(|(i, (a, g))| {
            let reached = eval::steps_to_reach(&g.curve, band.0);
            TaskComparison {
                task_id: a.task_id,
                adapter_return: a.episode_return,
                adapter_env_steps: a.trajectory.len() as u64,
                adapter_seconds: adapter_time.seconds[i],
                gradient_final_return: g.curve.last().map_or(f64::NAN, |p| p.episode_return),
                gradient_steps_to_band: reached.unwrap_or(g.env_steps),
                gradient_reached_band: reached.is_some(),
                gradient_seconds: gradient_time.seconds[i],
                gradient_curve: g.curve.clone(),
            }
        })
        .collect();
    Ok(Comparison {
        band,
        tasks: per_task,
    })
}
