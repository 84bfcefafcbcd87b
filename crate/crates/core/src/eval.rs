//! Evaluation quantities: returns, per-iteration metrics, score
//! normalization, and parameter accounting.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterNet;
use crate::sac::SacLearner;

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    total
}

/// Plain reward sum: the reported evaluation return.
pub fn undiscounted_return(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Population standard deviation; `None` for an empty slice.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(crate::math::sqrt(var))
}

/// Places `value` on a scale where `floor` maps to 0 and `reference` to 1.
///
/// Returns are negative for the navigation families, so "a fraction of a
/// reference return" is only meaningful after anchoring at a floor such as a
/// uniformly random policy.
pub fn normalized_score(value: f64, floor: f64, reference: f64) -> f64 {
    (value - floor) / (reference - floor)
}

/// Trailing moving average: entry `i` is the mean of the last `window`
/// values up to and including `i` (fewer at the start).
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// One point of a return-versus-experience curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub episode_return: f64,
}

/// Environment steps at which `curve` first reaches `threshold`.
pub fn steps_to_reach(curve: &[CurvePoint], threshold: f64) -> Option<u64> {
    curve
        .iter()
        .find(|p| p.episode_return >= threshold)
        .map(|p| p.env_steps)
}

/// Per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub env_steps_total: u64,
    pub updates_total: u64,
    /// Mean undiscounted return of this iteration's collection episodes, per
    /// train task in task order.
    pub train_returns: Vec<f64>,
    pub mean_train_return: f64,
    pub mean_train_return_discounted: f64,
    pub test_return_in_dist: Option<f64>,
    pub test_return_ood: Option<f64>,
    /// Losses are means over the iteration's updates; absent without updates.
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub entropy_loss: Option<f64>,
    pub adapter_loss: Option<f64>,
    pub alpha: f64,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub fn all_finite(&self) -> bool {
        let opt = [
            self.test_return_in_dist,
            self.test_return_ood,
            self.actor_loss,
            self.critic_loss,
            self.entropy_loss,
            self.adapter_loss,
        ];
        self.train_returns.iter().all(|v| v.is_finite())
            && self.mean_train_return.is_finite()
            && self.mean_train_return_discounted.is_finite()
            && self.alpha.is_finite()
            && self.wall_clock_s.is_finite()
            && opt.iter().flatten().all(|v| v.is_finite())
    }
}

/// Parameters that must ship to a device to adapt to a new task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Policy trunk plus one output head.
    pub policy_params: usize,
    /// Adapter network, zero without one.
    pub model_params: usize,
    pub total: usize,
}

impl MemoryReport {
    pub fn new(policy_params: usize, model_params: usize) -> Self {
        Self {
            policy_params,
            model_params,
            total: policy_params + model_params,
        }
    }
}

/// Counts what adaptation needs: the trunk, one head and the adapter. The
/// per-task training heads and the critics stay behind.
pub fn count_parameters(learner: &SacLearner, adapter: Option<&AdapterNet>) -> MemoryReport {
    let head = learner
        .policy
        .heads
        .first()
        .map_or(0, |h| h.net.param_count());
    MemoryReport::new(
        learner.policy.trunk.param_count() + head,
        adapter.map_or(0, |a| a.net.param_count()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::{HeadArch, SacConfig};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometric_sum() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(discounted_return(&[], 0.9), 0.0);
        assert_eq!(undiscounted_return(&[]), 0.0);
    }

    #[test]
    fn discounted_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..1.0)).collect();
        let gamma: f64 = 0.99;
        let direct: f64 = r
            .iter()
            .enumerate()
            .map(|(t, x)| gamma.powi(t as i32) * x)
            .sum();
        assert!((discounted_return(&r, gamma) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        let plain: f64 = r.iter().sum();
        assert_eq!(discounted_return(&r, 1.0), plain);
    }

    #[test]
    fn normalization_anchors() {
        assert_eq!(normalized_score(-90.0, -90.0, -10.0), 0.0);
        assert_eq!(normalized_score(-10.0, -90.0, -10.0), 1.0);
        assert_eq!(normalized_score(-26.0, -90.0, -10.0), 0.8);
    }

    #[test]
    fn trailing_mean_by_hand() {
        assert_eq!(
            trailing_mean(&[2.0, 4.0, 6.0, 8.0], 2),
            vec![2.0, 3.0, 5.0, 7.0]
        );
        assert_eq!(trailing_mean(&[1.0, 2.0], 1), vec![1.0, 2.0]);
        assert!(trailing_mean(&[], 5).is_empty());
    }

    #[test]
    fn steps_to_reach_first_crossing() {
        let c = [(0, -50.0), (100, -20.0), (200, -8.0), (300, -12.0)].map(|(s, r)| CurvePoint {
            env_steps: s,
            episode_return: r,
        });
        assert_eq!(steps_to_reach(&c, -10.0), Some(200));
        assert_eq!(steps_to_reach(&c, -1.0), None);
    }

    #[test]
    fn memory_counts_small_net() {
        let cfg = SacConfig {
            obs_dim: 2,
            action_dim: 1,
            policy_hidden: vec![3],
            critic_hidden: vec![3],
            head_arch: HeadArch::Linear,
            ..SacConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = SacLearner::new(cfg, &[0, 1, 2], &mut rng).unwrap();
        let m = count_parameters(&l, None);
        assert_eq!(m.policy_params, 9 + 8);
        assert_eq!(m.model_params, 0);
        assert_eq!(m.total, 17);
    }

    proptest! {
        #[test]
        fn average_ignores_task_order(mut v in proptest::collection::vec(-100.0f64..0.0, 1..20)) {
            let a = mean(&v).unwrap();
            v.reverse();
            let b = mean(&v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
