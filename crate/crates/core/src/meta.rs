//! Meta-training (multi-task SAC with a jointly trained adapter) and
//! meta-testing (adapter feedback loop, or head-only gradient adaptation).

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterError, AdapterNet};
use crate::env::{
    sample_task_set, EnvConfig, EnvError, Family, PointEnv, RewardMode, Split, TaskSpec,
    Transition, DEFAULT_SPARSITY_RADIUS,
};
use crate::eval::{self, CurvePoint, MetricsRecord};
use crate::nn::GradientBundle;
use crate::replay::{ReplayBuffer, ReplayError, SarsWindow, DEFAULT_CAPACITY};
use crate::sac::{
    ActMode, CriticStack, HeadArch, MultiHeadCritic, MultiHeadPolicy, SacConfig, SacError,
    SacLearner, TaskHead, UpdateScope,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("task {0} is not a test task")]
    NotATestTask(u32),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: u64 },
}

pub type Result<T> = core::result::Result<T, MetaError>;

/// Which training head seeds the first adaptation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialHead {
    Index(usize),
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Adapter,
    GradientBaseline,
}

/// Budget for head-only SAC adaptation on a test task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    /// Collection steps on the test task before giving up.
    pub env_step_budget: u64,
    pub updates_per_step: usize,
    pub batch_size: usize,
    /// A deterministic evaluation rollout (not counted as experience) after
    /// every this many collection episodes.
    pub eval_every_episodes: usize,
    /// Stop as soon as an evaluation reaches this return.
    pub stop_at_return: Option<f64>,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            env_step_budget: 20_000,
            updates_per_step: 1,
            batch_size: 256,
            eval_every_episodes: 1,
            stop_at_return: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Feedback-loop iterations before the head is frozen.
    pub adaptation_steps: usize,
    /// Independently adapted episodes per task when averaging returns.
    pub eval_episodes: usize,
    pub mode: AdaptMode,
    pub initial_head: InitialHead,
    pub gradient: GradientConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            adaptation_steps: 30,
            eval_episodes: 1,
            mode: AdaptMode::Adapter,
            initial_head: InitialHead::Index(0),
            gradient: GradientConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if self.adaptation_steps > env.horizon {
            return Err(MetaError::Config("adaptation steps exceed the horizon"));
        }
        if self.eval_episodes == 0 {
            return Err(MetaError::Config("eval_episodes must be positive"));
        }
        if self.gradient.batch_size == 0 || self.gradient.eval_every_episodes == 0 {
            return Err(MetaError::Config(
                "gradient batch size and eval cadence must be positive",
            ));
        }
        Ok(())
    }
}

/// Reward handed out at test time. Sparse navigation trains on the dense
/// reward and is evaluated on the sparse one.
pub fn test_reward_mode(family: Family) -> RewardMode {
    match family {
        Family::SparseNav => RewardMode::Sparse,
        _ => RewardMode::Dense,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub n_train_tasks: usize,
    pub n_test_in_dist: usize,
    pub n_test_ood: usize,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub adapter: AdapterConfig,
    pub use_adapter: bool,
    pub iterations: usize,
    pub updates_per_iteration: usize,
    /// Whole episodes only: must be a multiple of the horizon.
    pub steps_per_task_per_iteration: usize,
    /// Uniformly random actions for each task's first steps.
    pub warmup_steps_per_task: usize,
    pub batch_size: usize,
    pub adapter_batch_size: usize,
    pub buffer_capacity: usize,
    /// Evaluate on the test tasks every this many iterations (0: never).
    pub eval_every: usize,
    pub eval_adapt: AdaptConfig,
    pub seed: u64,
    /// Extra adapters trained on exactly the batches and targets the main
    /// adapter sees. Because the SAC learner does not depend on any adapter,
    /// each companion ends up identical to the main adapter of a separate run
    /// configured with it, at a fraction of the cost.
    #[serde(default)]
    pub companion_adapters: Vec<AdapterConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: Family::GoalNav,
            n_train_tasks: 10,
            n_test_in_dist: 5,
            n_test_ood: 5,
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            adapter: AdapterConfig::default(),
            use_adapter: true,
            iterations: 100,
            updates_per_iteration: 1000,
            steps_per_task_per_iteration: 400,
            warmup_steps_per_task: 400,
            batch_size: 256,
            adapter_batch_size: 256,
            buffer_capacity: DEFAULT_CAPACITY,
            eval_every: 10,
            eval_adapt: AdaptConfig::default(),
            seed: 0,
            companion_adapters: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Small networks and short episodes that train in seconds to minutes on
    /// one core.
    pub fn desk() -> Self {
        let horizon = 50;
        let lr = 1e-3;
        Self {
            env: EnvConfig::default().with_horizon(horizon),
            sac: SacConfig {
                policy_lr: lr,
                critic_lr: lr,
                alpha_lr: lr,
                ..SacConfig::desk(32)
            },
            adapter: AdapterConfig {
                hidden: vec![128, 128],
                learning_rate: lr,
                ..AdapterConfig::default()
            },
            iterations: 150,
            updates_per_iteration: 50,
            steps_per_task_per_iteration: horizon,
            warmup_steps_per_task: 2 * horizon,
            batch_size: 64,
            adapter_batch_size: 64,
            buffer_capacity: 20_000,
            eval_every: 10,
            eval_adapt: AdaptConfig {
                adaptation_steps: 1,
                gradient: GradientConfig {
                    env_step_budget: 5_000,
                    batch_size: 64,
                    ..GradientConfig::default()
                },
                ..AdaptConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sac.validate()?;
        self.eval_adapt.validate(&self.env)?;
        if self.n_train_tasks == 0 || self.n_test_in_dist == 0 || self.n_test_ood == 0 {
            return Err(MetaError::Config("task counts must be positive"));
        }
        if self.steps_per_task_per_iteration == 0
            || self.steps_per_task_per_iteration % self.env.horizon != 0
        {
            return Err(MetaError::Config(
                "steps per task per iteration must be a positive multiple of the horizon",
            ));
        }
        if self.batch_size == 0
            || self.adapter_batch_size == 0
            || self.adapter_batch_size > self.batch_size
        {
            return Err(MetaError::Config(
                "batch sizes must satisfy 0 < adapter batch <= batch",
            ));
        }
        if self.adapter.k == 0 || self.companion_adapters.iter().any(|a| a.k == 0) {
            return Err(MetaError::Config(
                "adapter window must hold at least one tuple",
            ));
        }
        if self.buffer_capacity == 0 {
            return Err(MetaError::Config("buffer capacity must be positive"));
        }
        Ok(())
    }

    /// Train, in-distribution and out-of-distribution tasks for this seed.
    /// Drawn from their own stream so the task set is independent of every
    /// training hyperparameter.
    pub fn sample_tasks(&self) -> Result<Vec<TaskSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        Ok(sample_task_set(
            self.family,
            self.n_train_tasks,
            self.n_test_in_dist,
            self.n_test_ood,
            if self.env.sparsity_radius > 0.0 {
                self.env.sparsity_radius
            } else {
                DEFAULT_SPARSITY_RADIUS
            },
            &mut rng,
        )?)
    }
}

/// Same experiment with a two-layer (50 hidden units) output head; the
/// adapter then predicts both layers.
pub fn nonlinear_head_variant(config: &TrainConfig) -> TrainConfig {
    let mut c = config.clone();
    c.sac.head_arch = HeadArch::TwoLayer { hidden: 50 };
    c
}

fn random_action<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

fn to_action(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

/// Runs multi-task training of the shared trunk, per-task heads and the
/// adapter, one iteration at a time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaTrainer {
    pub config: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    pub learner: SacLearner,
    pub adapter: Option<AdapterNet>,
    #[serde(default)]
    pub companions: Vec<AdapterNet>,
    buffers: Vec<ReplayBuffer>,
    rng: ChaCha8Rng,
    iteration: u64,
    env_steps_total: u64,
    updates_total: u64,
    steps_per_task: Vec<u64>,
    /// Adapter loss of every update, in order.
    #[serde(default)]
    adapter_losses: Vec<f64>,
}

impl MetaTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let tasks = config.sample_tasks()?;
        Self::with_tasks(config, tasks)
    }

    /// Trains on the train-split members of `tasks`; the rest are used for
    /// periodic evaluation.
    pub fn with_tasks(config: TrainConfig, tasks: Vec<TaskSpec>) -> Result<Self> {
        config.validate()?;
        for t in &tasks {
            t.validate()?;
        }
        let train_ids: Vec<u32> = tasks
            .iter()
            .filter(|t| t.split == Split::Train)
            .map(|t| t.id)
            .collect();
        if train_ids.is_empty() {
            return Err(MetaError::Config("no train tasks"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let learner = SacLearner::new(config.sac.clone(), &train_ids, &mut rng)?;
        // The adapter draws from its own stream and never touches `rng`
        // afterwards, so the SAC learner follows the same trajectory whatever
        // the adapter configuration, or without one.
        let init_adapter = |c: &AdapterConfig| {
            let mut arng = ChaCha8Rng::seed_from_u64(config.seed);
            arng.set_stream(3);
            AdapterNet::for_policy(c, &learner.policy, &mut arng)
        };
        let adapter = if config.use_adapter {
            Some(init_adapter(&config.adapter)?)
        } else {
            None
        };
        let companions = config
            .companion_adapters
            .iter()
            .map(init_adapter)
            .collect::<core::result::Result<Vec<_>, _>>()?;
        let buffers = train_ids
            .iter()
            .map(|&id| ReplayBuffer::new(id, config.buffer_capacity))
            .collect::<core::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            steps_per_task: vec![0; train_ids.len()],
            config,
            tasks,
            learner,
            adapter,
            companions,
            buffers,
            rng,
            iteration: 0,
            env_steps_total: 0,
            updates_total: 0,
            adapter_losses: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn env_steps_total(&self) -> u64 {
        self.env_steps_total
    }

    /// Per-update adapter training loss since construction.
    pub fn adapter_loss_trace(&self) -> &[f64] {
        &self.adapter_losses
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
    }

    pub fn train_tasks(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .filter(|t| t.split == Split::Train)
            .copied()
            .collect()
    }

    pub fn test_tasks(&self, split: Split) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .filter(|t| t.split == split)
            .copied()
            .collect()
    }

    /// Collects one episode per `horizon` steps on every train task. Returns
    /// per-task mean undiscounted and discounted returns.
    fn collect(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        let episodes = cfg.steps_per_task_per_iteration / cfg.env.horizon;
        let train = self.train_tasks();
        let mut returns = Vec::with_capacity(train.len());
        let mut discounted = Vec::with_capacity(train.len());
        for (i, task) in train.iter().enumerate() {
            let mut env = PointEnv::new(*task, cfg.env, RewardMode::Dense);
            let (mut total, mut total_disc) = (0.0, 0.0);
            for _ in 0..episodes {
                let mut obs = env.reset();
                let mut rewards = Vec::with_capacity(cfg.env.horizon);
                loop {
                    let action = if self.steps_per_task[i] < cfg.warmup_steps_per_task as u64 {
                        random_action(&mut self.rng)
                    } else {
                        let (a, _) = self.learner.policy.act(
                            task.id,
                            &obs,
                            ActMode::Sample,
                            &mut self.rng,
                        )?;
                        to_action(&a)
                    };
                    let t = env.step(&action)?;
                    self.buffers[i].push(t)?;
                    self.steps_per_task[i] += 1;
                    self.env_steps_total += 1;
                    rewards.push(t.reward);
                    obs = t.next_state;
                    if t.done {
                        break;
                    }
                }
                total += eval::undiscounted_return(&rewards);
                total_disc += eval::discounted_return(&rewards, cfg.sac.gamma);
            }
            returns.push(total / episodes as f64);
            discounted.push(total_disc / episodes as f64);
        }
        Ok((returns, discounted))
    }

    /// One summed SAC update over all train tasks, plus one adapter step on
    /// windows ending at the same sampled transitions, regressed onto the
    /// heads as they were when the losses were evaluated.
    fn update(&mut self) -> Result<(crate::sac::UpdateStats, Option<f64>)> {
        let cfg = &self.config;
        let mut batches: Vec<(u32, Vec<Transition>)> = Vec::with_capacity(self.buffers.len());
        let adapters: Vec<&AdapterNet> = self.adapter.iter().chain(&self.companions).collect();
        let mut steps: Vec<Option<(f64, GradientBundle)>> = vec![None; adapters.len()];
        for buf in &self.buffers {
            let idx = buf.sample_indices(cfg.batch_size, &mut self.rng)?;
            let batch: Vec<Transition> = idx.iter().map(|&i| *buf.get(i).unwrap()).collect();
            if !adapters.is_empty() {
                let target = self.learner.policy.head(buf.task_id())?.flatten();
                let n = cfg.adapter_batch_size;
                let mut targets = Vec::with_capacity(n * target.len());
                for _ in 0..n {
                    targets.extend_from_slice(&target);
                }
                for (adapter, step) in adapters.iter().zip(&mut steps) {
                    let mut inputs = Vec::with_capacity(n * adapter.input_dim());
                    for &end in &idx[..n] {
                        let w = buf.window_ending_at(end, adapter.k)?;
                        inputs.extend(adapter.encode_input(&w)?);
                    }
                    let (loss, grads) = adapter.loss_encoded(&inputs, &targets, n)?;
                    match step {
                        Some((l, g)) => {
                            *l += loss;
                            g.add_assign(&grads).map_err(AdapterError::from)?;
                        }
                        None => *step = Some((loss, grads)),
                    }
                }
            }
            batches.push((buf.task_id(), batch));
        }
        let refs: Vec<(u32, &[Transition])> =
            batches.iter().map(|(id, b)| (*id, b.as_slice())).collect();
        let stats = self
            .learner
            .update(&refs, UpdateScope::ALL, &mut self.rng)?;
        let n_tasks = self.buffers.len() as f64;
        let mut losses = Vec::with_capacity(steps.len());
        for (adapter, step) in self
            .adapter
            .iter_mut()
            .chain(&mut self.companions)
            .zip(steps)
        {
            if let Some((loss, grads)) = step {
                adapter.apply(&grads)?;
                losses.push(loss / n_tasks);
            }
        }
        self.updates_total += 1;
        let adapter_loss = if self.adapter.is_some() {
            losses.first().copied()
        } else {
            None
        };
        Ok((stats, adapter_loss))
    }

    /// Collection, `updates_per_iteration` updates, and (on schedule) test
    /// evaluation. Wall-clock is left at zero for the caller to fill in.
    pub fn run_iteration(&mut self) -> Result<MetricsRecord> {
        let (returns, discounted) = self.collect()?;
        let n_updates = self.config.updates_per_iteration;
        let mut sums = [0.0f64; 4];
        for _ in 0..n_updates {
            let (s, al) = self.update()?;
            sums[0] += s.actor_loss;
            sums[1] += s.critic_loss;
            sums[2] += s.entropy_loss;
            if let Some(l) = al {
                sums[3] += l;
                self.adapter_losses.push(l);
            }
        }
        let avg = |v: f64| (n_updates > 0).then(|| v / n_updates as f64);
        let iteration = self.iteration;
        self.iteration += 1;
        let eval_now = self.config.eval_every > 0
            && (self.iteration % self.config.eval_every as u64 == 0
                || self.iteration == self.config.iterations as u64);
        let (test_in, test_ood) = if eval_now {
            let (a, b) = self.evaluate()?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            iteration,
            env_steps_total: self.env_steps_total,
            updates_total: self.updates_total,
            mean_train_return: eval::mean(&returns).unwrap_or(0.0),
            mean_train_return_discounted: eval::mean(&discounted).unwrap_or(0.0),
            train_returns: returns,
            test_return_in_dist: test_in,
            test_return_ood: test_ood,
            actor_loss: avg(sums[0]),
            critic_loss: avg(sums[1]),
            entropy_loss: avg(sums[2]),
            adapter_loss: if self.adapter.is_some() {
                avg(sums[3])
            } else {
                None
            },
            alpha: self.learner.entropy.alpha(),
            wall_clock_s: 0.0,
        };
        if !record.all_finite() || !self.learner.policy.trunk.all_finite() {
            return Err(MetaError::NonFinite {
                what: "training metrics",
                iteration,
            });
        }
        Ok(record)
    }

    /// Average adapted return on the in-distribution and OOD test tasks,
    /// using the adapter when present and the zero-shot head otherwise.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 + self.iteration);
        let mut cfg = self.config.eval_adapt.clone();
        if self.adapter.is_none() {
            cfg.adaptation_steps = 0;
        }
        let fallback;
        let adapter = match &self.adapter {
            Some(a) => a,
            None => {
                fallback =
                    AdapterNet::for_policy(&self.config.adapter, &self.learner.policy, &mut rng)?;
                &fallback
            }
        };
        let mut out = [0.0; 2];
        for (slot, split) in [Split::TestInDist, Split::TestOod].into_iter().enumerate() {
            let tasks = self.test_tasks(split);
            out[slot] = average_test_return(
                &self.learner.policy,
                adapter,
                &tasks,
                &self.config.env,
                &cfg,
                &mut rng,
            )?;
        }
        Ok((out[0], out[1]))
    }

    /// Runs the configured number of iterations.
    pub fn train(&mut self) -> Result<Vec<MetricsRecord>> {
        let remaining = (self.config.iterations as u64).saturating_sub(self.iteration);
        (0..remaining).map(|_| self.run_iteration()).collect()
    }
}

/// Everything meta-training produces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub learner: SacLearner,
    pub adapter: Option<AdapterNet>,
    pub companions: Vec<AdapterNet>,
    pub tasks: Vec<TaskSpec>,
    pub metrics: Vec<MetricsRecord>,
}

pub fn meta_train(config: TrainConfig) -> Result<TrainOutput> {
    let mut trainer = MetaTrainer::new(config)?;
    let metrics = trainer.train()?;
    Ok(TrainOutput {
        learner: trainer.learner,
        adapter: trainer.adapter,
        companions: trainer.companions,
        tasks: trainer.tasks,
        metrics,
    })
}

fn pick_head<R: Rng + ?Sized>(n_heads: usize, initial: InitialHead, rng: &mut R) -> Result<usize> {
    match initial {
        InitialHead::Index(i) if i < n_heads => Ok(i),
        InitialHead::Index(_) => Err(MetaError::Config("initial head index out of range")),
        InitialHead::Random => Ok(rng.random_range(0..n_heads)),
    }
}

fn check_test_task(task: &TaskSpec) -> Result<()> {
    match task.split {
        Split::Train => Err(MetaError::NotATestTask(task.id)),
        _ => Ok(()),
    }
}

/// Result of one adapted test episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterOutcome {
    pub task_id: u32,
    /// Head in use after the feedback loop ended.
    pub head: TaskHead,
    pub trajectory: Vec<Transition>,
    /// Undiscounted return of the single adaptation episode.
    pub episode_return: f64,
    pub heads_predicted: usize,
}

/// One test episode driven by the adapter. [`AdapterSession::adapt`] runs the
/// feedback loop (act with the current head, feed the latest window to the
/// adapter, install the prediction); [`AdapterSession::finish`] rolls out the
/// rest of the episode with the last head frozen. Split so the loop alone can
/// be timed.
pub struct AdapterSession<'a> {
    policy: &'a MultiHeadPolicy,
    adapter: &'a AdapterNet,
    env: PointEnv,
    head: TaskHead,
    trajectory: Vec<Transition>,
    adaptation_steps: usize,
    heads_predicted: usize,
    obs: [f64; 2],
}

impl<'a> AdapterSession<'a> {
    pub fn new<R: Rng + ?Sized>(
        policy: &'a MultiHeadPolicy,
        adapter: &'a AdapterNet,
        task: &TaskSpec,
        env: &EnvConfig,
        cfg: &AdaptConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_test_task(task)?;
        cfg.validate(env)?;
        adapter.check_compatible(policy)?;
        let idx = pick_head(policy.heads.len(), cfg.initial_head, rng)?;
        let mut head = policy.heads[idx].clone();
        head.task_id = task.id;
        let mut env = PointEnv::new(*task, *env, test_reward_mode(task.family));
        let obs = env.reset();
        let trajectory = Vec::with_capacity(env.config().horizon);
        Ok(Self {
            policy,
            adapter,
            env,
            head,
            trajectory,
            adaptation_steps: cfg.adaptation_steps,
            heads_predicted: 0,
            obs,
        })
    }

    fn act(&mut self) -> Result<Transition> {
        let a = self
            .policy
            .pass(&self.head.net, &self.obs, 1, None)?
            .actions;
        let t = self.env.step(&to_action(&a))?;
        self.obs = t.next_state;
        self.trajectory.push(t);
        Ok(t)
    }

    pub fn adapt(&mut self) -> Result<()> {
        for _ in 0..self.adaptation_steps {
            self.act()?;
            let window = SarsWindow::padded(&self.trajectory, self.adapter.k);
            self.head = self.adapter.predict_head(&window, self.env.task().id)?;
            self.heads_predicted += 1;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<AdapterOutcome> {
        if self.heads_predicted < self.adaptation_steps {
            self.adapt()?;
        }
        while !self.env.state().done {
            self.act()?;
        }
        let rewards: Vec<f64> = self.trajectory.iter().map(|t| t.reward).collect();
        Ok(AdapterOutcome {
            task_id: self.env.task().id,
            head: self.head,
            episode_return: eval::undiscounted_return(&rewards),
            trajectory: self.trajectory,
            heads_predicted: self.heads_predicted,
        })
    }
}

/// Adapts to `task` within one episode and reports that episode.
pub fn meta_test_adapter<R: Rng + ?Sized>(
    policy: &MultiHeadPolicy,
    adapter: &AdapterNet,
    task: &TaskSpec,
    env: &EnvConfig,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<AdapterOutcome> {
    let mut s = AdapterSession::new(policy, adapter, task, env, cfg, rng)?;
    s.adapt()?;
    s.finish()
}

/// Mean over tasks of the mean over `eval_episodes` independently adapted
/// episodes.
pub fn average_test_return<R: Rng + ?Sized>(
    policy: &MultiHeadPolicy,
    adapter: &AdapterNet,
    tasks: &[TaskSpec],
    env: &EnvConfig,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(MetaError::Config("no test tasks"));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut returns = Vec::with_capacity(cfg.eval_episodes);
        for _ in 0..cfg.eval_episodes {
            returns.push(meta_test_adapter(policy, adapter, task, env, cfg, rng)?.episode_return);
        }
        per_task.push(eval::mean(&returns).unwrap());
    }
    Ok(eval::mean(&per_task).unwrap())
}

/// Deterministic rollout of a fixed head; the return of one episode.
pub fn rollout_head(
    policy: &MultiHeadPolicy,
    head: &TaskHead,
    task: &TaskSpec,
    env: &EnvConfig,
    mode: RewardMode,
) -> Result<f64> {
    let mut env = PointEnv::new(*task, *env, mode);
    let mut obs = env.reset();
    let mut total = 0.0;
    loop {
        let a = policy.pass(&head.net, &obs, 1, None)?.actions;
        let t = env.step(&to_action(&a))?;
        total += t.reward;
        obs = t.next_state;
        if t.done {
            return Ok(total);
        }
    }
}

/// Result of head-only gradient adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientOutcome {
    pub task_id: u32,
    pub head: TaskHead,
    /// Evaluation return against collection steps consumed; the first point
    /// is the initial head at zero steps.
    pub curve: Vec<CurvePoint>,
    pub env_steps: u64,
    pub updates: u64,
}

/// Head-only SAC on one test task: a single-head learner that shares the
/// frozen policy and critic trunks and the trained temperature, a fresh
/// replay buffer, and updates restricted to the heads.
pub struct GradientSession {
    learner: SacLearner,
    task: TaskSpec,
    env: EnvConfig,
    cfg: GradientConfig,
    buffer: ReplayBuffer,
    curve: Vec<CurvePoint>,
    env_steps: u64,
    updates: u64,
    episodes: usize,
}

impl GradientSession {
    pub fn new<R: Rng + ?Sized>(
        trained: &SacLearner,
        task: &TaskSpec,
        env: &EnvConfig,
        cfg: &AdaptConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_test_task(task)?;
        cfg.validate(env)?;
        let idx = pick_head(trained.policy.heads.len(), cfg.initial_head, rng)?;
        let policy = MultiHeadPolicy {
            trunk: trained.policy.trunk.clone(),
            heads: vec![TaskHead {
                task_id: task.id,
                net: trained.policy.heads[idx].net.clone(),
            }],
            action_dim: trained.policy.action_dim,
            log_std_bounds: trained.policy.log_std_bounds,
        };
        let single = |s: &CriticStack| CriticStack {
            trunk: s.trunk.clone(),
            heads: vec![s.heads[idx].clone()],
        };
        let critic = MultiHeadCritic {
            task_ids: vec![task.id],
            online: [
                single(&trained.critic.online[0]),
                single(&trained.critic.online[1]),
            ],
            target: [
                single(&trained.critic.target[0]),
                single(&trained.critic.target[1]),
            ],
        };
        let mut learner = SacLearner::from_parts(trained.config.clone(), policy, critic);
        learner.entropy = trained.entropy;
        let buffer = ReplayBuffer::new(task.id, (cfg.gradient.env_step_budget as usize).max(1))?;
        let mut s = Self {
            learner,
            task: *task,
            env: *env,
            cfg: cfg.gradient.clone(),
            buffer,
            curve: Vec::new(),
            env_steps: 0,
            updates: 0,
            episodes: 0,
        };
        s.record()?;
        Ok(s)
    }

    fn record(&mut self) -> Result<f64> {
        let r = rollout_head(
            &self.learner.policy,
            &self.learner.policy.heads[0],
            &self.task,
            &self.env,
            test_reward_mode(self.task.family),
        )?;
        self.curve.push(CurvePoint {
            env_steps: self.env_steps,
            episode_return: r,
        });
        Ok(r)
    }

    fn reached_stop(&self) -> bool {
        match (self.cfg.stop_at_return, self.curve.last()) {
            (Some(goal), Some(p)) => p.episode_return >= goal,
            _ => false,
        }
    }

    /// Whether the step budget is spent or the stop return was reached.
    pub fn done(&self) -> bool {
        self.env_steps >= self.cfg.env_step_budget || self.reached_stop()
    }

    /// Whether an evaluation is due after the episodes collected so far.
    pub fn evaluation_due(&self) -> bool {
        self.episodes > 0 && self.episodes % self.cfg.eval_every_episodes == 0
    }

    /// One collection episode with sampled actions and `updates_per_step`
    /// head-only updates after every step.
    pub fn collect_episode<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let mut env = PointEnv::new(self.task, self.env, test_reward_mode(self.task.family));
        let mut obs = env.reset();
        loop {
            let (a, _) = self
                .learner
                .policy
                .act(self.task.id, &obs, ActMode::Sample, rng)?;
            let t = env.step(&to_action(&a))?;
            self.buffer.push(t)?;
            self.env_steps += 1;
            obs = t.next_state;
            for _ in 0..self.cfg.updates_per_step {
                let batch = self.buffer.sample_batch(self.cfg.batch_size, rng)?;
                self.learner
                    .update(&[(self.task.id, &batch)], UpdateScope::HEADS_ONLY, rng)?;
                self.updates += 1;
            }
            if t.done {
                break;
            }
        }
        self.episodes += 1;
        Ok(())
    }

    /// Deterministic rollout of the current head, appended to the curve.
    pub fn evaluate(&mut self) -> Result<f64> {
        self.record()
    }

    /// Collects and trains one episode at a time until [`GradientSession::done`],
    /// evaluating on schedule.
    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        while !self.done() {
            self.collect_episode(rng)?;
            if self.evaluation_due() {
                self.evaluate()?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> GradientOutcome {
        GradientOutcome {
            task_id: self.task.id,
            head: self.learner.policy.heads[0].clone(),
            curve: self.curve,
            env_steps: self.env_steps,
            updates: self.updates,
        }
    }
}

pub fn meta_test_gradient<R: Rng + ?Sized>(
    trained: &SacLearner,
    task: &TaskSpec,
    env: &EnvConfig,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<GradientOutcome> {
    let mut s = GradientSession::new(trained, task, env, cfg, rng)?;
    s.run(rng)?;
    Ok(s.finish())
}
