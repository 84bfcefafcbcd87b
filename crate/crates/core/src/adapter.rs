//! The adapter: a feed-forward regressor from recent transitions to the
//! flattened parameters of a policy output head.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, AdamState, DenseNet, GradientBundle, NnError};
use crate::replay::SarsWindow;
use crate::sac::{HeadArch, MultiHeadPolicy, SacError, TaskHead};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error("window holds {got} tuples, adapter expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("target has length {got}, adapter predicts {expected} values")]
    TargetLength { expected: usize, got: usize },
    #[error("empty adapter batch")]
    EmptyBatch,
    #[error("adapter output size {adapter} does not match policy head size {head}")]
    HeadMismatch { adapter: usize, head: usize },
}

pub type Result<T> = core::result::Result<T, AdapterError>;

/// What each tuple contributes to the adapter input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `[s, a, r, s']`
    Sars,
    /// `[s, a, s']`, reward withheld
    Sas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub hidden: Vec<usize>,
    pub k: usize,
    pub input_mode: InputMode,
    pub learning_rate: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden: vec![600, 600, 600],
            k: 1,
            input_mode: InputMode::Sars,
            learning_rate: 3e-4,
        }
    }
}

pub fn tuple_len(mode: InputMode, obs_dim: usize, action_dim: usize) -> usize {
    match mode {
        InputMode::Sars => 2 * obs_dim + action_dim + 1,
        InputMode::Sas => 2 * obs_dim + action_dim,
    }
}

/// Flattened head parameters a prediction is regressed onto.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub task_id: u32,
    pub flat: Vec<f64>,
}

/// Current parameters of `task_id`'s policy head, flattened matrix-then-bias.
pub fn make_target(policy: &MultiHeadPolicy, task_id: u32) -> Result<AdapterTarget> {
    Ok(AdapterTarget {
        task_id,
        flat: policy.head(task_id)?.flatten(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterNet {
    pub net: DenseNet,
    pub k: usize,
    pub input_mode: InputMode,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub head_arch: HeadArch,
    pub feature_dim: usize,
    pub head_out_dim: usize,
    pub opt: AdamState,
}

impl AdapterNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        config: &AdapterConfig,
        obs_dim: usize,
        action_dim: usize,
        head_arch: HeadArch,
        feature_dim: usize,
        head_out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = config.k * tuple_len(config.input_mode, obs_dim, action_dim);
        let mut dims = vec![input];
        dims.extend_from_slice(&config.hidden);
        dims.push(head_arch.param_count(feature_dim, head_out_dim));
        let net = DenseNet::new(&dims, Activation::Relu, Activation::Linear, rng)?;
        let opt = AdamState::for_net(&net, config.learning_rate);
        Ok(Self {
            net,
            k: config.k,
            input_mode: config.input_mode,
            obs_dim,
            action_dim,
            head_arch,
            feature_dim,
            head_out_dim,
            opt,
        })
    }

    /// Adapter sized for `policy`'s heads.
    pub fn for_policy<R: Rng + ?Sized>(
        config: &AdapterConfig,
        policy: &MultiHeadPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let head = policy.heads.first().ok_or(SacError::UnknownTask(0))?;
        Self::new(
            config,
            policy.obs_dim(),
            policy.action_dim,
            head.arch(),
            policy.feature_dim(),
            2 * policy.action_dim,
            rng,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Checks that predictions can be installed as `policy`'s heads.
    pub fn check_compatible(&self, policy: &MultiHeadPolicy) -> Result<()> {
        let head = policy.heads.first().ok_or(SacError::UnknownTask(0))?;
        if head.net.param_count() != self.output_dim() {
            return Err(AdapterError::HeadMismatch {
                adapter: self.output_dim(),
                head: head.net.param_count(),
            });
        }
        Ok(())
    }

    /// Concatenates `[s, a, r, s']` (or `[s, a, s']`) per tuple in temporal
    /// order. The reward slot carries the transition's context reward.
    pub fn encode_input(&self, window: &SarsWindow) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.input_dim());
        self.encode_into(window, &mut out)?;
        Ok(out)
    }

    fn encode_into(&self, window: &SarsWindow, out: &mut Vec<f64>) -> Result<()> {
        if window.k() != self.k {
            return Err(AdapterError::WindowLength {
                expected: self.k,
                got: window.k(),
            });
        }
        for t in &window.tuples {
            out.extend_from_slice(&t.state);
            out.extend_from_slice(&t.action);
            if self.input_mode == InputMode::Sars {
                out.push(t.context_reward);
            }
            out.extend_from_slice(&t.next_state);
        }
        Ok(())
    }

    pub fn predict_flat(&self, window: &SarsWindow) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.encode_input(window)?)?)
    }

    /// Predicted output head, tagged with `task_id`.
    pub fn predict_head(&self, window: &SarsWindow, task_id: u32) -> Result<TaskHead> {
        let flat = self.predict_flat(window)?;
        Ok(TaskHead::from_flat(
            task_id,
            self.head_arch,
            self.feature_dim,
            self.head_out_dim,
            flat,
        )?)
    }

    /// Mean squared error over every output component and batch entry, with
    /// its gradient with respect to the adapter's parameters. Targets are
    /// plain values, so nothing flows back into the policy.
    pub fn loss(&self, pairs: &[(&SarsWindow, &[f64])]) -> Result<(f64, GradientBundle)> {
        if pairs.is_empty() {
            return Err(AdapterError::EmptyBatch);
        }
        let out_dim = self.output_dim();
        let mut inputs = Vec::with_capacity(pairs.len() * self.input_dim());
        let mut targets = Vec::with_capacity(pairs.len() * out_dim);
        for (w, t) in pairs {
            if t.len() != out_dim {
                return Err(AdapterError::TargetLength {
                    expected: out_dim,
                    got: t.len(),
                });
            }
            self.encode_into(w, &mut inputs)?;
            targets.extend_from_slice(t);
        }
        self.loss_encoded(&inputs, &targets, pairs.len())
    }

    /// [`AdapterNet::loss`] on pre-encoded inputs (row-major).
    pub fn loss_encoded(
        &self,
        inputs: &[f64],
        targets: &[f64],
        batch: usize,
    ) -> Result<(f64, GradientBundle)> {
        if batch == 0 {
            return Err(AdapterError::EmptyBatch);
        }
        let tape = self.net.forward_batch(inputs, batch)?;
        let pred = tape.output();
        if targets.len() != pred.len() {
            return Err(AdapterError::TargetLength {
                expected: pred.len(),
                got: targets.len(),
            });
        }
        let scale = 1.0 / pred.len() as f64;
        let mut loss = 0.0;
        let mut dout = vec![0.0; pred.len()];
        for ((d, p), t) in dout.iter_mut().zip(pred).zip(targets) {
            let e = p - t;
            loss += e * e * scale;
            *d = 2.0 * e * scale;
        }
        let mut grads = GradientBundle::zeros_like(&self.net);
        self.net
            .backward_batch(&tape, &dout, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    /// One Adam step on an accumulated gradient.
    pub fn apply(&mut self, grads: &GradientBundle) -> Result<()> {
        self.opt.step(self.net.params_mut(), grads.as_slice())?;
        Ok(())
    }

    /// MSE without gradients, for held-out evaluation.
    pub fn mse(&self, pairs: &[(&SarsWindow, &[f64])]) -> Result<f64> {
        Ok(self.loss(pairs)?.0)
    }
}
