//! Threaded fan-out for evaluation and search.
//!
//! Both operations are embarrassingly parallel with per-item determinism
//! (per-trial seeds, pure predictors), so the only care taken here is to
//! reduce results in a fixed order regardless of scheduling.

use gridcast_core::baselines::score_example;
use gridcast_core::data::{MovieDataset, TARGET_FRAMES};
use gridcast_core::hypertune::{TrialOutcome, TrialPlan, TrialRunner};
use gridcast_core::tensor::Tensor;
use gridcast_core::Error;
use rayon::prelude::*;

use crate::{CliError, Result};

/// Builds a pool of exactly `threads` workers.
pub fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))
}

/// Parallel counterpart of `gridcast_core::baselines::evaluate`: scores
/// `(day, slot)` examples across the pool, then reduces the per-channel
/// sums in example order.
pub fn evaluate_parallel<F>(
    pool: &rayon::ThreadPool,
    predict: F,
    dataset: &MovieDataset,
    days: &[usize],
    slots: &[usize],
) -> gridcast_core::Result<Vec<f64>>
where
    F: Fn(&MovieDataset, usize, usize) -> gridcast_core::Result<Tensor> + Sync,
{
    if days.is_empty() || slots.is_empty() {
        return Err(Error::config("evaluation needs at least one day and slot"));
    }
    let pairs: Vec<(usize, usize)> = days
        .iter()
        .flat_map(|&d| slots.iter().map(move |&s| (d, s)))
        .collect();

    let scored: gridcast_core::Result<Vec<(Vec<f64>, usize)>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(day, slot)| {
                let pred = predict(dataset, day, slot)?;
                let start = dataset.frame_index(day, slot);
                let targets = dataset.frames_tensor(start, start + TARGET_FRAMES)?;
                score_example(&pred, &targets)
            })
            .collect()
    });

    let mut sums = vec![0.0; dataset.channels()];
    let mut count = 0usize;
    for (s, n) in scored? {
        for (acc, v) in sums.iter_mut().zip(&s) {
            *acc += v;
        }
        count += n;
    }
    Ok(sums.iter().map(|s| s / count as f64 * 1e3).collect())
}

/// Runs each rung's trials across the pool. Determinism comes from the
/// per-trial seeds; outcomes are collected back in plan order.
pub struct PooledRunner<'a, F> {
    pool: &'a rayon::ThreadPool,
    run_one: F,
}

impl<'a, F> PooledRunner<'a, F>
where
    F: Fn(&TrialPlan) -> gridcast_core::Result<TrialOutcome> + Sync,
{
    pub fn new(pool: &'a rayon::ThreadPool, run_one: F) -> Self {
        PooledRunner { pool, run_one }
    }
}

impl<F> TrialRunner for PooledRunner<'_, F>
where
    F: Fn(&TrialPlan) -> gridcast_core::Result<TrialOutcome> + Sync,
{
    fn run_batch(&mut self, plans: &[TrialPlan]) -> gridcast_core::Result<Vec<TrialOutcome>> {
        self.pool
            .install(|| plans.par_iter().map(&self.run_one).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridcast_core::baselines::{baseline_predictor, evaluate, BaselineKind};
    use gridcast_core::synth::{synthesize_city, SynthSpec};

    #[test]
    fn parallel_evaluation_matches_sequential_bitwise() {
        let mut spec = SynthSpec::new(12, 12, 3, 4, 3);
        spec.interval_minutes = 30;
        let ds = synthesize_city(&spec).unwrap();
        let days = [0usize, 1, 2, 3];
        let slots = [4usize, 16, 28, 40];

        let sequential = evaluate(
            baseline_predictor(BaselineKind::Naive),
            &ds,
            &days,
            &slots,
        )
        .unwrap();
        for threads in [1usize, 2, 4] {
            let pool = make_pool(threads).unwrap();
            let parallel = evaluate_parallel(
                &pool,
                baseline_predictor(BaselineKind::Naive),
                &ds,
                &days,
                &slots,
            )
            .unwrap();
            assert_eq!(parallel, sequential, "threads = {threads}");
        }
    }

    #[test]
    fn pooled_runner_preserves_plan_order() {
        use gridcast_core::hypertune::{run_search, trace_to_csv, FnRunner, SearchSpace};

        let stub = |plan: &TrialPlan| {
            Ok(TrialOutcome::Loss(
                (plan.seed % 1000) as f64 / 1000.0 + plan.budget_epochs as f64 * 1e-6,
            ))
        };
        let mut sequential = FnRunner(stub);
        let a = run_search(&SearchSpace::default(), 9, 3, 5, &mut sequential).unwrap();

        let pool = make_pool(4).unwrap();
        let mut pooled = PooledRunner::new(&pool, stub);
        let b = run_search(&SearchSpace::default(), 9, 3, 5, &mut pooled).unwrap();

        assert_eq!(trace_to_csv(&a.trace), trace_to_csv(&b.trace));
    }
}
