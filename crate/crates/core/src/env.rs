//! Point-robot task families.
//!
//! A robot starts at the origin of the plane and moves by `dt * action` each
//! step, with the action clipped to the unit box. Tasks within a family share
//! these dynamics and differ only in their reward. Observations are the
//! position alone, so the task must be inferred from rewards.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use thiserror::Error;

pub const OBS_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 200;
pub const DEFAULT_SPARSITY_RADIUS: f64 = 0.2;

pub type Obs = [f64; OBS_DIM];
pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("task counts must all be at least 1 (train {train}, in-dist {in_dist}, ood {ood})")]
    InvalidCounts {
        train: usize,
        in_dist: usize,
        ood: usize,
    },
    #[error("episode is done after {0} steps; reset before stepping")]
    EpisodeDone(usize),
    #[error("invalid task {id}: {reason}")]
    InvalidTask { id: u32, reason: &'static str },
    #[error("invalid environment config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GoalNav,
    Direction,
    SparseNav,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestInDist,
    TestOod,
}

/// Which reward a sparse-navigation task hands out. Other families ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub family: Family,
    /// Goal position for the navigation families, unit heading for
    /// `Direction`.
    pub goal: [f64; 2],
    /// Only meaningful for `SparseNav`; zero elsewhere.
    pub sparsity_radius: f64,
    pub split: Split,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !self.goal.iter().all(|g| g.is_finite()) {
            return Err(EnvError::InvalidTask {
                id: self.id,
                reason: "goal is not finite",
            });
        }
        match self.family {
            Family::Direction => {
                let norm = math::hypot(self.goal[0], self.goal[1]);
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(EnvError::InvalidTask {
                        id: self.id,
                        reason: "direction vector must have unit norm",
                    });
                }
            }
            Family::SparseNav => {
                if !(self.sparsity_radius > 0.0) {
                    return Err(EnvError::InvalidTask {
                        id: self.id,
                        reason: "sparse radius must be positive",
                    });
                }
            }
            Family::GoalNav => {}
        }
        Ok(())
    }

    /// Whether the goal (or heading) lies in the training half-plane, the
    /// half-open sector of angles `[0, pi)`.
    pub fn in_train_region(&self) -> bool {
        in_upper_sector(self.goal)
    }
}

pub fn in_upper_sector(p: [f64; 2]) -> bool {
    p[1] > 0.0 || (p[1] == 0.0 && p[0] > 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: usize,
    pub sparsity_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            sparsity_radius: DEFAULT_SPARSITY_RADIUS,
        }
    }
}

impl EnvConfig {
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(EnvError::InvalidConfig("dt must be positive"));
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be positive"));
        }
        if !(self.sparsity_radius > 0.0) {
            return Err(EnvError::InvalidConfig("sparsity radius must be positive"));
        }
        Ok(())
    }
}

fn unit_at(angle: f64) -> [f64; 2] {
    [math::cos(angle), math::sin(angle)]
}

/// Angle in `[0, pi)`.
fn upper_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..core::f64::consts::PI)
}

/// Point strictly below the x-axis: the mirror of an upper angle in `(0, pi)`.
fn lower_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    loop {
        let a = upper_angle(rng);
        if a > 0.0 {
            let [x, y] = unit_at(a);
            return [x, -y];
        }
    }
}

/// Samples train, in-distribution test and out-of-distribution test tasks.
///
/// Train and in-distribution goals (or headings) lie on the upper half of the
/// unit circle, angles in `[0, pi)`; out-of-distribution ones lie strictly
/// below the x-axis. Ids run from 0 in the order train, in-dist, ood.
pub fn sample_task_set<R: Rng + ?Sized>(
    family: Family,
    n_train: usize,
    m_test_in: usize,
    m_test_ood: usize,
    sparsity_radius: f64,
    rng: &mut R,
) -> Result<Vec<TaskSpec>, EnvError> {
    if n_train == 0 || m_test_in == 0 || m_test_ood == 0 {
        return Err(EnvError::InvalidCounts {
            train: n_train,
            in_dist: m_test_in,
            ood: m_test_ood,
        });
    }
    let radius = match family {
        Family::SparseNav => sparsity_radius,
        _ => 0.0,
    };
    let mut tasks = Vec::with_capacity(n_train + m_test_in + m_test_ood);
    let splits = [
        (Split::Train, n_train),
        (Split::TestInDist, m_test_in),
        (Split::TestOod, m_test_ood),
    ];
    for (split, count) in splits {
        for _ in 0..count {
            let goal = match split {
                Split::TestOod => lower_unit(rng),
                _ => unit_at(upper_angle(rng)),
            };
            let task = TaskSpec {
                id: tasks.len() as u32,
                family,
                goal,
                sparsity_radius: radius,
                split,
            };
            task.validate()?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub step_index: usize,
    pub done: bool,
}

/// Every task starts at the origin.
pub fn reset(_task: &TaskSpec) -> EnvState {
    EnvState {
        position: [0.0, 0.0],
        step_index: 0,
        done: false,
    }
}

pub fn clip_action(action: &Action) -> Action {
    [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    math::hypot(a[0] - b[0], a[1] - b[1])
}

/// Reward for moving with (already clipped) `action` into `next_position`.
pub fn reward(task: &TaskSpec, action: &Action, next_position: [f64; 2], mode: RewardMode) -> f64 {
    match task.family {
        Family::GoalNav => -dist(next_position, task.goal),
        Family::Direction => action[0] * task.goal[0] + action[1] * task.goal[1],
        Family::SparseNav => {
            let d = dist(next_position, task.goal);
            match mode {
                RewardMode::Dense => -d,
                RewardMode::Sparse => (1.0 - d / task.sparsity_radius).max(0.0),
            }
        }
    }
}

/// Advances one step. The action is clipped to `[-1, 1]^2` first.
pub fn step(
    task: &TaskSpec,
    state: &EnvState,
    action: &Action,
    config: &EnvConfig,
    mode: RewardMode,
) -> Result<(EnvState, f64), EnvError> {
    if state.done || state.step_index >= config.horizon {
        return Err(EnvError::EpisodeDone(state.step_index));
    }
    let a = clip_action(action);
    let position = [
        state.position[0] + config.dt * a[0],
        state.position[1] + config.dt * a[1],
    ];
    let r = reward(task, &a, position, mode);
    let step_index = state.step_index + 1;
    Ok((
        EnvState {
            position,
            step_index,
            done: step_index == config.horizon,
        },
        r,
    ))
}

/// Observation: the position only. Task parameters are never observed.
pub fn state_vector(_task: &TaskSpec, state: &EnvState) -> Obs {
    state.position
}

/// One environment step as stored in replay and fed to the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub task_id: u32,
    /// Episode counter within the producing task's stream.
    pub episode: u64,
    /// Zero-based step index of `state` within its episode.
    pub step_index: u32,
    pub state: Obs,
    pub action: Action,
    /// Reward used by the learner.
    pub reward: f64,
    /// Reward shown to the adapter. It differs from `reward` only for sparse
    /// navigation, where the learner sees the dense shaping reward and the
    /// adapter the sparse one.
    pub context_reward: f64,
    pub next_state: Obs,
    /// True on the last step of an episode (time limit reached).
    pub done: bool,
}

/// Stateful wrapper that stamps episode and step indices onto transitions.
#[derive(Clone, Debug)]
pub struct PointEnv {
    task: TaskSpec,
    config: EnvConfig,
    mode: RewardMode,
    state: EnvState,
    episode: u64,
    started: bool,
}

impl PointEnv {
    pub fn new(task: TaskSpec, config: EnvConfig, mode: RewardMode) -> Self {
        Self {
            state: reset(&task),
            task,
            config,
            mode,
            episode: 0,
            started: false,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn observation(&self) -> Obs {
        state_vector(&self.task, &self.state)
    }

    pub fn reset(&mut self) -> Obs {
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        self.state = reset(&self.task);
        self.observation()
    }

    pub fn step(&mut self, action: &Action) -> Result<Transition, EnvError> {
        self.started = true;
        let obs = self.observation();
        let (next, r) = step(&self.task, &self.state, action, &self.config, self.mode)?;
        let context_reward = match self.task.family {
            Family::SparseNav => reward(
                &self.task,
                &clip_action(action),
                next.position,
                RewardMode::Sparse,
            ),
            _ => r,
        };
        let t = Transition {
            task_id: self.task.id,
            episode: self.episode,
            step_index: self.state.step_index as u32,
            state: obs,
            action: clip_action(action),
            reward: r,
            context_reward,
            next_state: next.position,
            done: next.done,
        };
        self.state = next;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn goal_task(goal: [f64; 2]) -> TaskSpec {
        TaskSpec {
            id: 0,
            family: Family::GoalNav,
            goal,
            sparsity_radius: 0.0,
            split: Split::Train,
        }
    }

    #[test]
    fn direction_train_tasks_are_upper_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tasks = sample_task_set(Family::Direction, 2, 1, 1, 0.2, &mut rng).unwrap();
        let train: Vec<_> = tasks.iter().filter(|t| t.split == Split::Train).collect();
        assert_eq!(train.len(), 2);
        for t in train {
            assert!((t.goal[0].hypot(t.goal[1]) - 1.0).abs() < 1e-9);
            assert!(t.goal[1] >= 0.0);
        }
    }

    #[test]
    fn splits_are_disjoint_for_many_seeds() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for family in [Family::GoalNav, Family::Direction, Family::SparseNav] {
                let tasks = sample_task_set(family, 5, 3, 3, 0.2, &mut rng).unwrap();
                for t in &tasks {
                    assert_eq!(t.in_train_region(), t.split != Split::TestOod, "{t:?}");
                }
            }
        }
    }

    #[test]
    fn monte_carlo_train_goals_stay_in_upper_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tasks = sample_task_set(Family::GoalNav, 1000, 1, 1, 0.2, &mut rng).unwrap();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for t in tasks.iter().filter(|t| t.split == Split::Train) {
            let deg = t.goal[1].atan2(t.goal[0]).to_degrees();
            lo = lo.min(deg);
            hi = hi.max(deg);
        }
        assert!(lo >= 0.0 && hi <= 180.0, "[{lo}, {hi}]");
        // uniform coverage: the extremes get close to the sector edges
        assert!(lo < 2.0 && hi > 178.0);
    }

    #[test]
    fn zero_counts_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_task_set(Family::GoalNav, 0, 1, 1, 0.2, &mut rng),
            Err(EnvError::InvalidCounts { .. })
        ));
    }

    #[test]
    fn ids_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tasks = sample_task_set(Family::SparseNav, 4, 2, 2, 0.2, &mut rng).unwrap();
        let ids: Vec<u32> = tasks.iter().map(|t| t.id).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        assert!(tasks.iter().all(|t| t.sparsity_radius == 0.2));
    }

    #[test]
    fn reset_is_origin_and_deterministic() {
        let t = goal_task([1.0, 0.0]);
        let a = reset(&t);
        assert_eq!(a, reset(&t));
        assert_eq!(a.position, [0.0, 0.0]);
        assert_eq!(a.step_index, 0);
        assert!(!a.done);
    }

    #[test]
    fn goal_nav_step_arithmetic() {
        let t = goal_task([1.0, 0.0]);
        let (s, r) = step(
            &t,
            &reset(&t),
            &[1.0, 0.0],
            &EnvConfig::default(),
            RewardMode::Dense,
        )
        .unwrap();
        assert!((s.position[0] - 0.1).abs() < 1e-15 && s.position[1] == 0.0);
        assert!((r + 0.9).abs() < 1e-12);
    }

    #[test]
    fn direction_reward() {
        let t = TaskSpec {
            family: Family::Direction,
            goal: [0.0, 1.0],
            ..goal_task([0.0, 1.0])
        };
        let (_, r) = step(
            &t,
            &reset(&t),
            &[0.0, 1.0],
            &EnvConfig::default(),
            RewardMode::Dense,
        )
        .unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn sparse_reward_zero_outside_radius() {
        let t = TaskSpec {
            family: Family::SparseNav,
            sparsity_radius: 0.2,
            ..goal_task([0.5, 0.0])
        };
        // staying at the origin keeps distance 0.5
        let (_, r) = step(
            &t,
            &reset(&t),
            &[0.0, 0.0],
            &EnvConfig::default(),
            RewardMode::Sparse,
        )
        .unwrap();
        assert_eq!(r, 0.0);
        let inside = reward(&t, &[0.0, 0.0], [0.45, 0.0], RewardMode::Sparse);
        assert!((inside - 0.75).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clipped() {
        let t = goal_task([1.0, 0.0]);
        let (s, _) = step(
            &t,
            &reset(&t),
            &[5.0, -3.0],
            &EnvConfig::default(),
            RewardMode::Dense,
        )
        .unwrap();
        assert_eq!(s.position, [0.1, -0.1]);
    }

    #[test]
    fn episode_ends_exactly_at_horizon() {
        let t = goal_task([1.0, 0.0]);
        let cfg = EnvConfig::default().with_horizon(5);
        let mut s = reset(&t);
        for i in 0..5 {
            assert!(!s.done);
            s = step(&t, &s, &[0.3, 0.3], &cfg, RewardMode::Dense)
                .unwrap()
                .0;
            assert_eq!(s.step_index, i + 1);
        }
        assert!(s.done);
        assert!(matches!(
            step(&t, &s, &[0.0, 0.0], &cfg, RewardMode::Dense),
            Err(EnvError::EpisodeDone(5))
        ));
    }

    #[test]
    fn observations_are_task_blind() {
        let a = goal_task([1.0, 0.0]);
        let b = goal_task([0.0, 1.0]);
        let s = EnvState {
            position: [0.3, -0.2],
            step_index: 3,
            done: false,
        };
        assert_eq!(state_vector(&a, &s), [0.3, -0.2]);
        assert_eq!(state_vector(&a, &s), state_vector(&b, &s));
    }

    #[test]
    fn goal_nav_rewards_bounded_by_horizon_reach() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = EnvConfig::default().with_horizon(50);
        let t = goal_task([0.0, 1.0]);
        let lower = -(1.0 + cfg.dt * cfg.horizon as f64 * core::f64::consts::SQRT_2);
        let mut env = PointEnv::new(t, cfg, RewardMode::Dense);
        env.reset();
        for _ in 0..50 {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let tr = env.step(&a).unwrap();
            assert!(tr.reward <= 0.0 && tr.reward >= lower);
        }
    }

    #[test]
    fn point_env_stamps_episodes_and_context_reward() {
        let t = TaskSpec {
            family: Family::SparseNav,
            sparsity_radius: 0.2,
            ..goal_task([0.0, 1.0])
        };
        let mut env = PointEnv::new(t, EnvConfig::default().with_horizon(3), RewardMode::Dense);
        env.reset();
        let first = env.step(&[0.0, 1.0]).unwrap();
        assert_eq!((first.episode, first.step_index), (0, 0));
        assert!(first.reward < 0.0);
        assert_eq!(first.context_reward, 0.0);
        env.step(&[0.0, 1.0]).unwrap();
        assert!(env.step(&[0.0, 1.0]).unwrap().done);
        env.reset();
        assert_eq!(env.step(&[0.0, 0.0]).unwrap().episode, 1);
    }
}
