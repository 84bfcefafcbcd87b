//! Adaptation wall-clock. Only the adaptation loop is timed: for the adapter
//! that is session setup plus the feedback steps (environment stepping and
//! head prediction); for the gradient baseline it is the collection episodes
//! with their updates. Evaluation rollouts are excluded from both.

use std::time::Instant;

use flap_core::adapter::AdapterNet;
use flap_core::env::{EnvConfig, TaskSpec};
use flap_core::meta::{AdaptConfig, AdapterSession, GradientOutcome, GradientSession};
use flap_core::sac::{MultiHeadPolicy, SacLearner};

use crate::error::Result;
use crate::experiments::eval_rng;
use crate::metrics::RuntimeReport;

pub const ADAPTER_METHOD: &str = "adapter";
pub const GRADIENT_METHOD: &str = "gradient_baseline";

pub fn time_adapter(
    policy: &MultiHeadPolicy,
    adapter: &AdapterNet,
    tasks: &[TaskSpec],
    env: &EnvConfig,
    cfg: &AdaptConfig,
    repeats: usize,
) -> Result<RuntimeReport> {
    let mut rng = eval_rng(0);
    let mut samples = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut per = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let mut s = AdapterSession::new(policy, adapter, task, env, cfg, &mut rng)?;
            s.adapt()?;
            per.push(start.elapsed().as_secs_f64());
            s.finish()?;
        }
        samples.push(per);
    }
    Ok(RuntimeReport::from_samples(ADAPTER_METHOD, &samples))
}

/// Times head-only gradient adaptation per task and returns the outcomes of
/// the first repeat. Every repeat replays the same random stream, so repeats
/// differ only in timing.
pub fn time_gradient(
    learner: &SacLearner,
    tasks: &[TaskSpec],
    env: &EnvConfig,
    cfg: &AdaptConfig,
    repeats: usize,
    seed: u64,
) -> Result<(RuntimeReport, Vec<GradientOutcome>)> {
    let mut samples = Vec::with_capacity(tasks.len());
    let mut outcomes = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut per = Vec::with_capacity(repeats);
        for r in 0..repeats.max(1) {
            let mut rng = eval_rng(seed.wrapping_add(i as u64));
            let mut s = GradientSession::new(learner, task, env, cfg, &mut rng)?;
            let mut elapsed = 0.0;
            while !s.done() {
                let start = Instant::now();
                s.collect_episode(&mut rng)?;
                elapsed += start.elapsed().as_secs_f64();
                if s.evaluation_due() {
                    s.evaluate()?;
                }
            }
            if r < repeats {
                per.push(elapsed);
            }
            if r == 0 {
                outcomes.push(s.finish());
            }
        }
        samples.push(per);
    }
    Ok((
        RuntimeReport::from_samples(GRADIENT_METHOD, &samples),
        outcomes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flap_core::env::Split;
    use flap_core::meta::{meta_train, TrainConfig};

    #[test]
    fn zero_tasks_give_an_empty_report() {
        let c = TrainConfig {
            iterations: 0,
            ..TrainConfig::desk()
        };
        let out = meta_train(c.clone()).unwrap();
        let r = time_adapter(
            &out.learner.policy,
            out.adapter.as_ref().unwrap(),
            &[],
            &c.env,
            &c.eval_adapt,
            3,
        )
        .unwrap();
        assert!(r.seconds.is_empty());
        assert_eq!((r.mean_s, r.std_s), (0.0, 0.0));
        let (g, o) = time_gradient(&out.learner, &[], &c.env, &c.eval_adapt, 3, 0).unwrap();
        assert!(g.seconds.is_empty() && o.is_empty());
    }

    #[test]
    fn times_are_nonnegative_per_task() {
        let mut c = TrainConfig {
            iterations: 0,
            ..TrainConfig::desk()
        };
        c.eval_adapt.gradient.env_step_budget = c.env.horizon as u64;
        let out = meta_train(c.clone()).unwrap();
        let tasks: Vec<_> = out
            .tasks
            .iter()
            .filter(|t| t.split == Split::TestInDist)
            .copied()
            .collect();
        let r = time_adapter(
            &out.learner.policy,
            out.adapter.as_ref().unwrap(),
            &tasks,
            &c.env,
            &c.eval_adapt,
            2,
        )
        .unwrap();
        assert_eq!(r.seconds.len(), tasks.len());
        assert_eq!(r.repeats, 2);
        assert!(r.seconds.iter().all(|s| *s >= 0.0) && r.repeat_std_s >= 0.0);
        let (g, o) = time_gradient(&out.learner, &tasks, &c.env, &c.eval_adapt, 2, 0).unwrap();
        assert_eq!(g.seconds.len(), tasks.len());
        assert!(o.iter().all(|x| x.env_steps == c.env.horizon as u64));
    }
}
