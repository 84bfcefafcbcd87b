//! Multi-task soft actor-critic with shared trunks and per-task output heads.
//!
//! Policy: `obs -> trunk -> features (d1) -> head_i -> [mean | log_std]`, the
//! head being a linear layer (or a small two-layer net for the nonlinear
//! variant). Sampled actions are `tanh(mean + std * noise)`.
//!
//! Critic: two independent stacks, each `[obs, action] -> trunk -> head_i ->
//! Q`, plus Polyak-averaged target copies. One entropy temperature is shared
//! by all tasks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Transition;
use crate::math;
use crate::nn::{self, Activation, AdamState, DenseNet, GradientBundle, NnError, Tape};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = core::f64::consts::LN_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no head for task {0}")]
    UnknownTask(u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {what} loss ({value})")]
    NonFiniteLoss { what: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(&'static str),
}

pub type Result<T> = core::result::Result<T, SacError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadArch {
    Linear,
    /// `d1 -> hidden (relu) -> d2`.
    TwoLayer {
        hidden: usize,
    },
}

impl HeadArch {
    pub fn dims(self, d1: usize, d2: usize) -> Vec<usize> {
        match self {
            HeadArch::Linear => vec![d1, d2],
            HeadArch::TwoLayer { hidden } => vec![d1, hidden, d2],
        }
    }

    pub fn param_count(self, d1: usize, d2: usize) -> usize {
        nn::param_count_for(&self.dims(d1, d2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Policy trunk widths; the last one is the feature size d1.
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub head_arch: HeadArch,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub reward_scale: f64,
    pub init_log_alpha: f64,
    /// Half-width of the uniform initialization of the policy heads' last layer.
    pub head_init_scale: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            obs_dim: crate::env::OBS_DIM,
            action_dim: crate::env::ACTION_DIM,
            policy_hidden: vec![300, 300, 300],
            critic_hidden: vec![300, 300, 300],
            head_arch: HeadArch::Linear,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            reward_scale: 1.0,
            init_log_alpha: 0.0,
            head_init_scale: 1e-3,
        }
    }
}

impl SacConfig {
    /// Desk-scale preset with `width`-wide three-layer trunks.
    pub fn desk(width: usize) -> Self {
        Self {
            policy_hidden: vec![width; 3],
            critic_hidden: vec![width; 3],
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.policy_hidden.last().unwrap_or(&self.obs_dim)
    }

    pub fn critic_feature_dim(&self) -> usize {
        *self
            .critic_hidden
            .last()
            .unwrap_or(&(self.obs_dim + self.action_dim))
    }

    pub fn head_out_dim(&self) -> usize {
        2 * self.action_dim
    }

    pub fn head_flat_len(&self) -> usize {
        self.head_arch
            .param_count(self.feature_dim(), self.head_out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 {
            return Err(SacError::Config(
                "observation and action sizes must be positive",
            ));
        }
        if self.policy_hidden.is_empty() || self.critic_hidden.is_empty() {
            return Err(SacError::Config("trunks need at least one hidden layer"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SacError::Config("gamma must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SacError::Config("tau must lie in [0, 1]"));
        }
        if !(self.policy_lr > 0.0 && self.critic_lr > 0.0 && self.alpha_lr > 0.0) {
            return Err(SacError::Config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Per-task output layer: `w` is `d1 x d2`, `b` has `d2` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task_id: u32,
    pub net: DenseNet,
}

impl TaskHead {
    pub fn new<R: Rng + ?Sized>(
        task_id: u32,
        arch: HeadArch,
        d1: usize,
        d2: usize,
        last_layer_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = DenseNet::new(
            &arch.dims(d1, d2),
            Activation::Relu,
            Activation::Linear,
            rng,
        )?;
        net.reinit_last_layer(last_layer_scale, rng);
        Ok(Self { task_id, net })
    }

    pub fn from_parts(task_id: u32, d1: usize, d2: usize, w: &[f64], b: &[f64]) -> Result<Self> {
        let mut flat = Vec::with_capacity(w.len() + b.len());
        flat.extend_from_slice(w);
        flat.extend_from_slice(b);
        Self::from_flat(task_id, HeadArch::Linear, d1, d2, flat)
    }

    /// Inverse of [`TaskHead::flatten`].
    pub fn from_flat(
        task_id: u32,
        arch: HeadArch,
        d1: usize,
        d2: usize,
        flat: Vec<f64>,
    ) -> Result<Self> {
        let net = DenseNet::unflatten(
            &arch.dims(d1, d2),
            Activation::Relu,
            Activation::Linear,
            flat,
        )?;
        Ok(Self { task_id, net })
    }

    /// Matrix then bias, row-major, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.net.flatten()
    }

    /// Weight matrix of the output layer.
    pub fn w(&self) -> &[f64] {
        self.net.weights(self.net.num_layers() - 1)
    }

    pub fn b(&self) -> &[f64] {
        self.net.bias(self.net.num_layers() - 1)
    }

    pub fn arch(&self) -> HeadArch {
        match self.net.dims() {
            [_, _] => HeadArch::Linear,
            [_, h, _] => HeadArch::TwoLayer { hidden: *h },
            _ => unreachable!("heads have one or two layers"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadPolicy {
    pub trunk: DenseNet,
    pub heads: Vec<TaskHead>,
    pub action_dim: usize,
    pub log_std_bounds: [f64; 2],
}

/// Everything a batched policy evaluation needs for its backward pass.
#[derive(Clone, Debug)]
pub struct PolicyPass {
    pub batch: usize,
    pub action_dim: usize,
    trunk_tape: Tape,
    head_tape: Tape,
    log_std_clamped: Vec<bool>,
    std: Vec<f64>,
    noise: Vec<f64>,
    pre_tanh: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyPass {
    pub fn means(&self) -> Vec<f64> {
        let d = self.action_dim;
        self.head_tape
            .output()
            .chunks_exact(2 * d)
            .flat_map(|row| row[..d].iter().copied())
            .collect()
    }
}

fn log_prob_correction(u: f64) -> f64 {
    // ln(1 - tanh(u)^2), stable for large |u|
    2.0 * (LN_2 - u - math::softplus(-2.0 * u))
}

impl MultiHeadPolicy {
    pub fn new<R: Rng + ?Sized>(config: &SacConfig, task_ids: &[u32], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.obs_dim];
        dims.extend_from_slice(&config.policy_hidden);
        let trunk = DenseNet::new(&dims, Activation::Relu, Activation::Relu, rng)?;
        let heads = task_ids
            .iter()
            .map(|&id| {
                TaskHead::new(
                    id,
                    config.head_arch,
                    config.feature_dim(),
                    config.head_out_dim(),
                    config.head_init_scale,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trunk,
            heads,
            action_dim: config.action_dim,
            log_std_bounds: [LOG_STD_MIN, LOG_STD_MAX],
        })
    }

    pub fn head_index(&self, task_id: u32) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task_id == task_id)
            .ok_or(SacError::UnknownTask(task_id))
    }

    pub fn head(&self, task_id: u32) -> Result<&TaskHead> {
        Ok(&self.heads[self.head_index(task_id)?])
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Batched evaluation with an explicit head. `noise` holds one standard
    /// normal draw per action component; `None` evaluates the mean action.
    pub fn pass(
        &self,
        head: &DenseNet,
        obs: &[f64],
        batch: usize,
        noise: Option<Vec<f64>>,
    ) -> Result<PolicyPass> {
        let d = self.action_dim;
        let trunk_tape = self.trunk.forward_batch(obs, batch)?;
        let head_tape = head.forward_batch(trunk_tape.output(), batch)?;
        let noise = noise.unwrap_or_else(|| vec![0.0; batch * d]);
        let n = batch * d;
        let mut log_std_clamped = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        let mut pre_tanh = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(batch);
        let [lo, hi] = self.log_std_bounds;
        for (r, row) in head_tape.output().chunks_exact(2 * d).enumerate() {
            let mut lp = 0.0;
            for j in 0..d {
                let raw = row[d + j];
                let ls = raw.clamp(lo, hi);
                log_std_clamped.push(raw < lo || raw > hi);
                let s = math::exp(ls);
                let xi = noise[r * d + j];
                let u = row[j] + s * xi;
                let a = math::tanh(u);
                lp += -0.5 * xi * xi - ls - HALF_LN_2PI - log_prob_correction(u);
                std.push(s);
                pre_tanh.push(u);
                actions.push(a);
            }
            log_probs.push(lp);
        }
        Ok(PolicyPass {
            batch,
            action_dim: d,
            trunk_tape,
            head_tape,
            log_std_clamped,
            std,
            noise,
            pre_tanh,
            actions,
            log_probs,
        })
    }

    /// Backward through a pass given `dL/du` (per pre-tanh component) and
    /// `dL/dlog_std` (before clamping is accounted for).
    fn pass_backward(
        &self,
        head: &DenseNet,
        pass: &PolicyPass,
        d_pre_tanh: &[f64],
        d_log_std: &[f64],
        trunk_grads: Option<&mut GradientBundle>,
        head_grads: &mut GradientBundle,
    ) -> Result<()> {
        let d = self.action_dim;
        let mut out_grad = vec![0.0; pass.batch * 2 * d];
        for r in 0..pass.batch {
            for j in 0..d {
                let i = r * d + j;
                // u = mean + exp(log_std) * noise
                out_grad[r * 2 * d + j] = d_pre_tanh[i];
                let via_u = d_pre_tanh[i] * pass.std[i] * pass.noise[i];
                out_grad[r * 2 * d + d + j] = if pass.log_std_clamped[i] {
                    0.0
                } else {
                    via_u + d_log_std[i]
                };
            }
        }
        let feat_grad = head.backward_batch(
            &pass.head_tape,
            &out_grad,
            Some(head_grads),
            trunk_grads.is_some(),
        )?;
        if let (Some(tg), Some(fg)) = (trunk_grads, feat_grad) {
            self.trunk
                .backward_batch(&pass.trunk_tape, &fg, Some(tg), false)?;
        }
        Ok(())
    }

    /// Single-observation action with an explicit head.
    pub fn act_with_head<R: Rng + ?Sized>(
        &self,
        head: &DenseNet,
        obs: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let noise = match mode {
            ActMode::Mean => None,
            ActMode::Sample => Some(sample_noise(self.action_dim, rng)),
        };
        let pass = self.pass(head, obs, 1, noise)?;
        let lp = pass.log_probs[0];
        Ok((pass.actions, lp))
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        task_id: u32,
        obs: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let head = &self.head(task_id)?.net;
        self.act_with_head(head, obs, mode, rng)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self
                .heads
                .iter()
                .map(|h| h.net.param_count())
                .sum::<usize>()
    }
}

pub fn sample_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One Q-network stack: shared trunk plus a scalar head per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticStack {
    pub trunk: DenseNet,
    pub heads: Vec<DenseNet>,
}

impl CriticStack {
    fn new<R: Rng + ?Sized>(config: &SacConfig, n_heads: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![config.obs_dim + config.action_dim];
        dims.extend_from_slice(&config.critic_hidden);
        let trunk = DenseNet::new(&dims, Activation::Relu, Activation::Relu, rng)?;
        let d1 = config.critic_feature_dim();
        let heads = (0..n_heads)
            .map(|_| DenseNet::new(&[d1, 1], Activation::Relu, Activation::Linear, rng))
            .collect::<core::result::Result<Vec<_>, _>>()?;
        Ok(Self { trunk, heads })
    }

    fn forward(&self, head: usize, sa: &[f64], batch: usize) -> Result<(Tape, Tape)> {
        let t = self.trunk.forward_batch(sa, batch)?;
        let h = self.heads[head].forward_batch(t.output(), batch)?;
        Ok((t, h))
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.heads.iter().map(DenseNet::param_count).sum::<usize>()
    }

    pub fn polyak_from(&mut self, online: &CriticStack, tau: f64) -> Result<()> {
        self.trunk.polyak_update(&online.trunk, tau)?;
        for (t, o) in self.heads.iter_mut().zip(&online.heads) {
            t.polyak_update(o, tau)?;
        }
        Ok(())
    }

    /// Q values for one head.
    pub fn q_values(&self, head: usize, sa: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward(head, sa, batch)?.1.output().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadCritic {
    pub task_ids: Vec<u32>,
    pub online: [CriticStack; 2],
    pub target: [CriticStack; 2],
}

impl MultiHeadCritic {
    pub fn new<R: Rng + ?Sized>(config: &SacConfig, task_ids: &[u32], rng: &mut R) -> Result<Self> {
        let a = CriticStack::new(config, task_ids.len(), rng)?;
        let b = CriticStack::new(config, task_ids.len(), rng)?;
        Ok(Self {
            task_ids: task_ids.to_vec(),
            target: [a.clone(), b.clone()],
            online: [a, b],
        })
    }

    pub fn head_index(&self, task_id: u32) -> Result<usize> {
        self.task_ids
            .iter()
            .position(|&t| t == task_id)
            .ok_or(SacError::UnknownTask(task_id))
    }

    /// Online parameters of both stacks plus both target copies.
    pub fn param_count(&self) -> usize {
        self.online
            .iter()
            .chain(&self.target)
            .map(CriticStack::param_count)
            .sum()
    }

    pub fn online_param_count(&self) -> usize {
        self.online.iter().map(CriticStack::param_count).sum()
    }

    /// `target <- (1 - tau) target + tau online` for both stacks.
    pub fn polyak_update(&mut self, tau: f64) -> Result<()> {
        let [t0, t1] = &mut self.target;
        t0.polyak_from(&self.online[0], tau)?;
        t1.polyak_from(&self.online[1], tau)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyTuner {
    pub log_alpha: f64,
    pub target_entropy: f64,
}

impl EntropyTuner {
    pub fn new(action_dim: usize, init_log_alpha: f64) -> Self {
        Self {
            log_alpha: init_log_alpha,
            target_entropy: -(action_dim as f64),
        }
    }

    pub fn alpha(&self) -> f64 {
        math::exp(self.log_alpha)
    }

    /// `-log_alpha * mean(log_prob + target_entropy)` and its derivative with
    /// respect to `log_alpha`.
    pub fn loss(&self, log_probs: &[f64]) -> (f64, f64) {
        if log_probs.is_empty() {
            return (0.0, 0.0);
        }
        let m = log_probs
            .iter()
            .map(|lp| lp + self.target_entropy)
            .sum::<f64>()
            / log_probs.len() as f64;
        (-self.log_alpha * m, -m)
    }
}

fn state_action_batch(batch: &[Transition], actions: Option<&[f64]>, next: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len() * 4);
    for (i, t) in batch.iter().enumerate() {
        let s = if next { &t.next_state } else { &t.state };
        out.extend_from_slice(s);
        match actions {
            Some(a) => out.extend_from_slice(&a[i * t.action.len()..(i + 1) * t.action.len()]),
            None => out.extend_from_slice(&t.action),
        }
    }
    out
}

fn obs_batch(batch: &[Transition], next: bool) -> Vec<f64> {
    batch
        .iter()
        .flat_map(|t| if next { t.next_state } else { t.state })
        .collect()
}

/// Gradients for the policy: shared trunk plus any heads that were touched.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub trunk: GradientBundle,
    pub heads: Vec<Option<GradientBundle>>,
}

impl PolicyGrads {
    pub fn zeros(policy: &MultiHeadPolicy) -> Self {
        Self {
            trunk: GradientBundle::zeros_like(&policy.trunk),
            heads: vec![None; policy.heads.len()],
        }
    }

    fn head_mut(&mut self, idx: usize, like: &DenseNet) -> &mut GradientBundle {
        self.heads[idx].get_or_insert_with(|| GradientBundle::zeros_like(like))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticGrads {
    pub trunks: [GradientBundle; 2],
    pub heads: [Vec<Option<GradientBundle>>; 2],
}

impl CriticGrads {
    pub fn zeros(critic: &MultiHeadCritic) -> Self {
        let n = critic.task_ids.len();
        Self {
            trunks: [
                GradientBundle::zeros_like(&critic.online[0].trunk),
                GradientBundle::zeros_like(&critic.online[1].trunk),
            ],
            heads: [vec![None; n], vec![None; n]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticLossOutput {
    pub loss: f64,
    pub mean_q: f64,
}

/// Soft Bellman targets `r + gamma * (min(Q1', Q2')(s', a') - alpha * log pi(a'|s'))`
/// with `a'` drawn from the current policy. Episodes end only by time limit,
/// so every transition bootstraps.
pub fn soft_targets<R: Rng + ?Sized>(
    critic: &MultiHeadCritic,
    policy: &MultiHeadPolicy,
    batch: &[Transition],
    gamma: f64,
    alpha: f64,
    reward_scale: f64,
    task_id: u32,
    use_min: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let ph = &policy.head(task_id)?.net;
    let ch = critic.head_index(task_id)?;
    let next_obs = obs_batch(batch, true);
    let noise = sample_noise(n * policy.action_dim, rng);
    let next = policy.pass(ph, &next_obs, n, Some(noise))?;
    let sa = state_action_batch(batch, Some(&next.actions), true);
    let q1 = critic.target[0].q_values(ch, &sa, n)?;
    let q2 = critic.target[1].q_values(ch, &sa, n)?;
    Ok((0..n)
        .map(|i| {
            let q = if use_min {
                q1[i].min(q2[i])
            } else {
                q1[i].max(q2[i])
            };
            reward_scale * batch[i].reward + gamma * (q - alpha * next.log_probs[i])
        })
        .collect())
}

/// Mean squared TD error of both online critics on one task's batch.
/// Gradients for both trunks and the task's two critic heads are
/// accumulated into `grads`.
pub fn critic_loss<R: Rng + ?Sized>(
    critic: &MultiHeadCritic,
    policy: &MultiHeadPolicy,
    batch: &[Transition],
    gamma: f64,
    alpha: f64,
    task_id: u32,
    grads: &mut CriticGrads,
    rng: &mut R,
) -> Result<CriticLossOutput> {
    critic_loss_scaled(
        critic, policy, batch, gamma, alpha, 1.0, task_id, grads, rng,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn critic_loss_scaled<R: Rng + ?Sized>(
    critic: &MultiHeadCritic,
    policy: &MultiHeadPolicy,
    batch: &[Transition],
    gamma: f64,
    alpha: f64,
    reward_scale: f64,
    task_id: u32,
    grads: &mut CriticGrads,
    rng: &mut R,
) -> Result<CriticLossOutput> {
    if batch.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let n = batch.len();
    let ch = critic.head_index(task_id)?;
    let y = soft_targets(
        critic,
        policy,
        batch,
        gamma,
        alpha,
        reward_scale,
        task_id,
        true,
        rng,
    )?;
    let sa = state_action_batch(batch, None, false);
    let mut loss = 0.0;
    let mut q_sum = 0.0;
    for k in 0..2 {
        let stack = &critic.online[k];
        let (trunk_tape, head_tape) = stack.forward(ch, &sa, n)?;
        let q = head_tape.output();
        let mut dq = vec![0.0; n];
        for i in 0..n {
            let e = q[i] - y[i];
            loss += e * e / n as f64;
            dq[i] = 2.0 * e / n as f64;
            q_sum += q[i];
        }
        let head = &stack.heads[ch];
        let hg = grads.heads[k][ch].get_or_insert_with(|| GradientBundle::zeros_like(head));
        let fg = head
            .backward_batch(&head_tape, &dq, Some(hg), true)?
            .expect("input gradient requested");
        stack
            .trunk
            .backward_batch(&trunk_tape, &fg, Some(&mut grads.trunks[k]), false)?;
    }
    if !loss.is_finite() {
        return Err(SacError::NonFiniteLoss {
            what: "critic",
            value: loss,
        });
    }
    Ok(CriticLossOutput {
        loss,
        mean_q: q_sum / (2 * n) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorLossOutput {
    pub loss: f64,
    pub log_probs: Vec<f64>,
}

/// Reparameterized actor objective `mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a))`
/// for one task's batch, with caller-supplied noise. Gradients for the
/// policy trunk and the task's head are accumulated into `grads`.
pub fn actor_loss_with_noise(
    policy: &MultiHeadPolicy,
    critic: &MultiHeadCritic,
    batch: &[Transition],
    alpha: f64,
    task_id: u32,
    noise: Vec<f64>,
    grads: &mut PolicyGrads,
) -> Result<ActorLossOutput> {
    if batch.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let n = batch.len();
    let d = policy.action_dim;
    let hi = policy.head_index(task_id)?;
    let ch = critic.head_index(task_id)?;
    let head = &policy.heads[hi].net;
    let obs = obs_batch(batch, false);
    let pass = policy.pass(head, &obs, n, Some(noise))?;
    let sa = state_action_batch(batch, Some(&pass.actions), false);

    let (t0, h0) = critic.online[0].forward(ch, &sa, n)?;
    let (t1, h1) = critic.online[1].forward(ch, &sa, n)?;
    let (q0, q1) = (h0.output(), h1.output());
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dq = [vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (q, k) = if q0[i] <= q1[i] {
            (q0[i], 0)
        } else {
            (q1[i], 1)
        };
        loss += (alpha * pass.log_probs[i] - q) * inv_n;
        dq[k][i] = -inv_n;
    }
    if !loss.is_finite() {
        return Err(SacError::NonFiniteLoss {
            what: "actor",
            value: loss,
        });
    }
    // dL/da through whichever critic was the minimum for each sample
    let obs_dim = policy.obs_dim();
    let mut d_action = vec![0.0; n * d];
    for (k, (tt, ht)) in [(t0, h0), (t1, h1)].iter().enumerate() {
        if dq[k].iter().all(|&g| g == 0.0) {
            continue;
        }
        let stack = &critic.online[k];
        let fg = stack.heads[ch]
            .backward_batch(ht, &dq[k], None, true)?
            .expect("input gradient requested");
        let ig = stack
            .trunk
            .backward_batch(tt, &fg, None, true)?
            .expect("input gradient requested");
        for i in 0..n {
            for j in 0..d {
                d_action[i * d + j] += ig[i * (obs_dim + d) + obs_dim + j];
            }
        }
    }
    let mut d_u = vec![0.0; n * d];
    let mut d_ls = vec![0.0; n * d];
    for i in 0..n * d {
        let a = pass.actions[i];
        // log pi carries -ln(1 - tanh(u)^2), whose u-derivative is 2 tanh(u)
        d_u[i] = d_action[i] * (1.0 - a * a) + alpha * inv_n * 2.0 * math::tanh(pass.pre_tanh[i]);
        d_ls[i] = -alpha * inv_n;
    }
    let head_grads = grads.head_mut(hi, head);
    let mut hg = core::mem::replace(head_grads, GradientBundle::zeros(0));
    policy.pass_backward(head, &pass, &d_u, &d_ls, Some(&mut grads.trunk), &mut hg)?;
    grads.heads[hi] = Some(hg);
    Ok(ActorLossOutput {
        loss,
        log_probs: pass.log_probs,
    })
}

pub fn actor_loss<R: Rng + ?Sized>(
    policy: &MultiHeadPolicy,
    critic: &MultiHeadCritic,
    batch: &[Transition],
    alpha: f64,
    task_id: u32,
    grads: &mut PolicyGrads,
    rng: &mut R,
) -> Result<ActorLossOutput> {
    let noise = sample_noise(batch.len() * policy.action_dim, rng);
    actor_loss_with_noise(policy, critic, batch, alpha, task_id, noise, grads)
}

/// Which parameter groups an update may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateScope {
    pub trunks: bool,
    pub alpha: bool,
}

impl UpdateScope {
    pub const ALL: Self = Self {
        trunks: true,
        alpha: true,
    };
    /// Head-only adaptation: trunks and temperature frozen.
    pub const HEADS_ONLY: Self = Self {
        trunks: false,
        alpha: false,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupOptimizer {
    pub trunk: AdamState,
    pub heads: Vec<AdamState>,
}

impl GroupOptimizer {
    fn new(trunk: &DenseNet, heads: &[&DenseNet], lr: f64) -> Self {
        Self {
            trunk: AdamState::for_net(trunk, lr),
            heads: heads.iter().map(|h| AdamState::for_net(h, lr)).collect(),
        }
    }
}

/// Owns the networks and optimizer state of multi-task SAC and applies
/// summed per-task gradients once per update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacLearner {
    pub config: SacConfig,
    pub policy: MultiHeadPolicy,
    pub critic: MultiHeadCritic,
    pub entropy: EntropyTuner,
    pub policy_opt: GroupOptimizer,
    pub critic_opt: [GroupOptimizer; 2],
    pub alpha_opt: AdamState,
}

impl SacLearner {
    pub fn new<R: Rng + ?Sized>(config: SacConfig, task_ids: &[u32], rng: &mut R) -> Result<Self> {
        let policy = MultiHeadPolicy::new(&config, task_ids, rng)?;
        let critic = MultiHeadCritic::new(&config, task_ids, rng)?;
        Ok(Self::from_parts(config, policy, critic))
    }

    /// Fresh optimizer state around existing networks.
    pub fn from_parts(config: SacConfig, policy: MultiHeadPolicy, critic: MultiHeadCritic) -> Self {
        let ph: Vec<&DenseNet> = policy.heads.iter().map(|h| &h.net).collect();
        let policy_opt = GroupOptimizer::new(&policy.trunk, &ph, config.policy_lr);
        let critic_opt = [0, 1].map(|k| {
            let hs: Vec<&DenseNet> = critic.online[k].heads.iter().collect();
            GroupOptimizer::new(&critic.online[k].trunk, &hs, config.critic_lr)
        });
        Self {
            entropy: EntropyTuner::new(config.action_dim, config.init_log_alpha),
            alpha_opt: AdamState::new(1, config.alpha_lr),
            config,
            policy,
            critic,
            policy_opt,
            critic_opt,
        }
    }

    pub fn task_ids(&self) -> Vec<u32> {
        self.policy.heads.iter().map(|h| h.task_id).collect()
    }

    /// One gradient step over the given per-task batches. All losses are
    /// computed from the current parameters, their gradients summed over
    /// tasks, and every touched parameter group stepped once. Heads of tasks
    /// without a batch are left untouched.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batches: &[(u32, &[Transition])],
        scope: UpdateScope,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        if batches.is_empty() {
            return Err(SacError::EmptyBatch);
        }
        let alpha = self.entropy.alpha();
        let mut cg = CriticGrads::zeros(&self.critic);
        let mut pg = PolicyGrads::zeros(&self.policy);
        let mut stats = UpdateStats {
            alpha,
            ..UpdateStats::default()
        };
        let mut alpha_grad = 0.0;
        let mut n_lp = 0usize;
        for &(task_id, batch) in batches {
            let c = critic_loss_scaled(
                &self.critic,
                &self.policy,
                batch,
                self.config.gamma,
                alpha,
                self.config.reward_scale,
                task_id,
                &mut cg,
                rng,
            )?;
            let a = actor_loss(
                &self.policy,
                &self.critic,
                batch,
                alpha,
                task_id,
                &mut pg,
                rng,
            )?;
            let (el, eg) = self.entropy.loss(&a.log_probs);
            stats.critic_loss += c.loss;
            stats.mean_q += c.mean_q;
            stats.actor_loss += a.loss;
            stats.entropy_loss += el;
            alpha_grad += eg;
            stats.mean_log_prob += a.log_probs.iter().sum::<f64>();
            n_lp += a.log_probs.len();
        }
        let nt = batches.len() as f64;
        stats.critic_loss /= nt;
        stats.actor_loss /= nt;
        stats.entropy_loss /= nt;
        stats.mean_q /= nt;
        stats.mean_log_prob /= n_lp as f64;

        for k in 0..2 {
            let stack = &mut self.critic.online[k];
            let opt = &mut self.critic_opt[k];
            if scope.trunks {
                opt.trunk
                    .step(stack.trunk.params_mut(), cg.trunks[k].as_slice())?;
            }
            for (h, g) in cg.heads[k].iter().enumerate() {
                if let Some(g) = g {
                    opt.heads[h].step(stack.heads[h].params_mut(), g.as_slice())?;
                }
            }
        }
        if scope.trunks {
            self.policy_opt
                .trunk
                .step(self.policy.trunk.params_mut(), pg.trunk.as_slice())?;
        }
        for (h, g) in pg.heads.iter().enumerate() {
            if let Some(g) = g {
                self.policy_opt.heads[h]
                    .step(self.policy.heads[h].net.params_mut(), g.as_slice())?;
            }
        }
        if scope.alpha {
            let mut la = [self.entropy.log_alpha];
            self.alpha_opt.step(&mut la, &[alpha_grad])?;
            self.entropy.log_alpha = la[0];
        }
        self.critic.polyak_update(self.config.tau)?;
        Ok(stats)
    }
}

/// Number of policy parameters deployed for a single task: trunk plus one head.
pub fn single_task_policy_params(config: &SacConfig) -> usize {
    let mut dims = vec![config.obs_dim];
    dims.extend_from_slice(&config.policy_hidden);
    nn::param_count_for(&dims) + config.head_flat_len()
}
