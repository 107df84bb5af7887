//! HyperBand search over the forecasting hyperparameters.
//!
//! HyperBand runs several successive-halving brackets: each starts many
//! randomly sampled configurations at a small epoch budget, keeps the
//! lowest-loss fraction, and retries the survivors from scratch at an
//! eta-fold larger budget. Brackets trade breadth for starting budget,
//! from `s_max = floor(log_eta R)` down to a single full-budget rung.
//!
//! Search order never affects results: configurations are sampled
//! up front from the master seed and every trial trains from its own
//! derived seed, so trials within a rung can run in any order or in
//! parallel.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MovieDataset;
use crate::error::Error;
use crate::models::{BiasCombo, TrConfig};
use crate::tape::Activation;
use crate::train::{train, ModelInit, TrainConfig};
use crate::Result;

/// The searched hyperparameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// Log-uniform learning-rate range `(low, high)`.
    pub learning_rate: (f64, f64),
    pub n_layers: Vec<usize>,
    pub hidden_channels: Vec<usize>,
    pub kernel_size: Vec<usize>,
    pub history: Vec<usize>,
    pub bias_combos: Vec<BiasCombo>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: (1e-4, 1e-1),
            n_layers: alloc::vec![1, 2, 3],
            hidden_channels: alloc::vec![8, 16, 32],
            kernel_size: alloc::vec![1],
            history: alloc::vec![2, 4, 8],
            bias_combos: alloc::vec![BiasCombo::ALL, BiasCombo::NONE],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("learning-rate range must be positive and ordered"));
        }
        if self.n_layers.is_empty()
            || self.hidden_channels.is_empty()
            || self.kernel_size.is_empty()
            || self.history.is_empty()
            || self.bias_combos.is_empty()
        {
            return Err(Error::config("every search dimension needs at least one value"));
        }
        if self.kernel_size.iter().any(|k| *k == 0 || k % 2 == 0) {
            return Err(Error::config("kernel sizes must be odd"));
        }
        Ok(())
    }
}

/// One sampled configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialConfig {
    pub learning_rate: f64,
    pub n_layers: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub history: usize,
    pub combo: BiasCombo,
}

/// Samples one configuration: the learning rate log-uniformly, the
/// discrete dimensions uniformly.
pub fn sample_config(space: &SearchSpace, rng: &mut ChaCha8Rng) -> TrialConfig {
    let (lo, hi) = space.learning_rate;
    let lr = libm::exp(rng.gen_range(libm::log(lo)..=libm::log(hi)));
    let pick = |set: &[usize], rng: &mut ChaCha8Rng| set[rng.gen_range(0..set.len())];
    TrialConfig {
        learning_rate: lr,
        n_layers: pick(&space.n_layers, rng),
        hidden_channels: pick(&space.hidden_channels, rng),
        kernel_size: pick(&space.kernel_size, rng),
        history: pick(&space.history, rng),
        combo: space.bias_combos[rng.gen_range(0..space.bias_combos.len())],
    }
}

// ── Schedule ───────────────────────────────────────────────────────────

/// One successive-halving stage: `n_configs` evaluated at
/// `budget_epochs` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rung {
    pub n_configs: usize,
    pub budget_epochs: usize,
}

/// One bracket: stage index `s` plus its rungs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    /// Total trial evaluations in this bracket.
    pub fn trial_count(&self) -> usize {
        self.rungs.iter().map(|r| r.n_configs).sum()
    }

    /// Total epochs the bracket consumes.
    pub fn epoch_budget(&self) -> usize {
        self.rungs.iter().map(|r| r.n_configs * r.budget_epochs).sum()
    }
}

fn int_pow(base: usize, exp: usize) -> usize {
    (0..exp).fold(1usize, |acc, _| acc.saturating_mul(base))
}

/// The bracket schedule for maximum budget `r_max` (epochs) and
/// reduction factor `eta`: brackets `s = s_max .. 0`, where bracket `s`
/// starts `ceil((s_max+1)/(s+1) * eta^s)` configurations at
/// `r_max / eta^s` epochs and multiplies the budget by `eta` per rung
/// while keeping the best `floor(n / eta^k)`.
pub fn hyperband_schedule(r_max: usize, eta: usize) -> Result<Vec<Bracket>> {
    if r_max == 0 {
        return Err(Error::config("max budget must be >= 1"));
    }
    if eta < 2 {
        return Err(Error::config("eta must be >= 2"));
    }
    let mut s_max = 0;
    while int_pow(eta, s_max + 1) <= r_max {
        s_max += 1;
    }

    let mut brackets = Vec::with_capacity(s_max + 1);
    for s in (0..=s_max).rev() {
        let pow_s = int_pow(eta, s);
        // n = ceil((s_max + 1) / (s + 1) * eta^s)
        let n = ((s_max + 1) * pow_s).div_ceil(s + 1);
        let rungs = (0..=s)
            .map(|k| Rung {
                n_configs: n / int_pow(eta, k),
                budget_epochs: (r_max * int_pow(eta, k) / pow_s).max(1),
            })
            .collect();
        brackets.push(Bracket { s, rungs });
    }
    Ok(brackets)
}

/// Deterministic per-trial seed (splitmix-style mix of the master seed
/// and the trial id).
pub fn derive_seed(master_seed: u64, trial_id: u64) -> u64 {
    let mut z = master_seed ^ trial_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Execution ──────────────────────────────────────────────────────────

/// Work order for one trial evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialPlan {
    pub trial_id: u64,
    pub config: TrialConfig,
    pub budget_epochs: usize,
    pub seed: u64,
}

/// Result of one trial evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrialOutcome {
    /// Achieved validation loss.
    Loss(f64),
    Diverged,
}

/// Executes batches of independent trials. Implementations may run them
/// in any order or concurrently; every plan carries its own seed.
pub trait TrialRunner {
    fn run_batch(&mut self, plans: &[TrialPlan]) -> Result<Vec<TrialOutcome>>;
}

/// Runs trials sequentially through a closure.
pub struct FnRunner<F>(pub F);

impl<F> TrialRunner for FnRunner<F>
where
    F: FnMut(&TrialPlan) -> Result<TrialOutcome>,
{
    fn run_batch(&mut self, plans: &[TrialPlan]) -> Result<Vec<TrialOutcome>> {
        plans.iter().map(&mut self.0).collect()
    }
}

/// Evaluates a trial by training the configured model on the given
/// splits, truncated at the trial's epoch budget, scored by best
/// validation MSE. Divergence becomes [`TrialOutcome::Diverged`].
pub fn training_trial_runner<'a>(
    dataset: &'a MovieDataset,
    train_days: &'a [usize],
    val_days: &'a [usize],
    target_slots: &'a [usize],
    n_hour_bins: usize,
    activation: Activation,
    base: TrainConfig,
) -> impl Fn(&TrialPlan) -> Result<TrialOutcome> + 'a {
    move |plan| {
        let config = TrConfig {
            n_layers: plan.config.n_layers,
            hidden_channels: plan.config.hidden_channels,
            history: plan.config.history,
            activation,
            kernel_size: plan.config.kernel_size,
        };
        let init = ModelInit::Trb {
            config,
            combo: plan.config.combo,
        };
        let cfg = TrainConfig {
            learning_rate: plan.config.learning_rate,
            max_epochs: plan.budget_epochs,
            seed: plan.seed,
            ..base
        };
        match train(init, dataset, train_days, val_days, target_slots, n_hour_bins, &cfg) {
            Ok((_, log)) => {
                let loss = log.best_val_mse();
                if loss.is_finite() {
                    Ok(TrialOutcome::Loss(loss))
                } else {
                    Ok(TrialOutcome::Diverged)
                }
            }
            Err(Error::Diverged { .. })
            | Err(Error::NonFiniteGradient { .. })
            | Err(Error::NonFinite { .. }) => Ok(TrialOutcome::Diverged),
            Err(other) => Err(other),
        }
    }
}

/// One row of the search trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub bracket: usize,
    pub rung: usize,
    pub budget_epochs: usize,
    pub config: TrialConfig,
    pub seed: u64,
    /// Infinity for diverged trials, which sort last and are never
    /// promoted.
    pub val_mse: f64,
    pub diverged: bool,
}

/// Outcome of a search: the best record plus the complete trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: TrialRecord,
    pub trace: Vec<TrialRecord>,
}

/// Runs every bracket of the HyperBand schedule. Rung promotion keeps
/// the lowest-loss configurations, ties broken by ascending trial id;
/// promoted configurations retrain from scratch at the larger budget
/// under the same derived seed.
pub fn run_search(
    space: &SearchSpace,
    r_max: usize,
    eta: usize,
    master_seed: u64,
    runner: &mut dyn TrialRunner,
) -> Result<SearchResult> {
    space.validate()?;
    let schedule = hyperband_schedule(r_max, eta)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut next_id: u64 = 0;
    let mut trace: Vec<TrialRecord> = Vec::new();

    for bracket in &schedule {
        let mut alive: Vec<(u64, TrialConfig)> = (0..bracket.rungs[0].n_configs)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                (id, sample_config(space, &mut sample_rng))
            })
            .collect();

        for (rung_idx, rung) in bracket.rungs.iter().enumerate() {
            alive.truncate(rung.n_configs);
            let plans: Vec<TrialPlan> = alive
                .iter()
                .map(|&(trial_id, config)| TrialPlan {
                    trial_id,
                    config,
                    budget_epochs: rung.budget_epochs,
                    seed: derive_seed(master_seed, trial_id),
                })
                .collect();
            let outcomes = runner.run_batch(&plans)?;
            if outcomes.len() != plans.len() {
                return Err(Error::LengthMismatch {
                    expected: plans.len(),
                    got: outcomes.len(),
                });
            }

            let mut scored: Vec<(f64, u64, TrialConfig)> = Vec::with_capacity(plans.len());
            for (plan, outcome) in plans.iter().zip(&outcomes) {
                let (val_mse, diverged) = match *outcome {
                    TrialOutcome::Loss(l) if l.is_finite() => (l, false),
                    _ => (f64::INFINITY, true),
                };
                trace.push(TrialRecord {
                    trial_id: plan.trial_id,
                    bracket: bracket.s,
                    rung: rung_idx,
                    budget_epochs: rung.budget_epochs,
                    config: plan.config,
                    seed: plan.seed,
                    val_mse,
                    diverged,
                });
                scored.push((val_mse, plan.trial_id, plan.config));
            }
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            alive = scored.into_iter().map(|(_, id, c)| (id, c)).collect();
        }
    }

    let best = trace
        .iter()
        .filter(|r| !r.diverged)
        .min_by(|a, b| {
            a.val_mse
                .partial_cmp(&b.val_mse)
                .unwrap()
                .then(a.trial_id.cmp(&b.trial_id))
        })
        .cloned()
        .ok_or(Error::AllTrialsDiverged)?;

    Ok(SearchResult { best, trace })
}

/// Renders the trace in its CSV schema.
pub fn trace_to_csv(trace: &[TrialRecord]) -> String {
    let mut out = String::from(
        "trial_id,bracket,rung,budget_epochs,lr,n_layers,hidden_channels,kernel_size,history,bias_combination,val_mse,status\n",
    );
    for r in trace {
        out.push_str(&alloc::format!(
            "{},{},{},{},{:.10e},{},{},{},{},{},{},{}\n",
            r.trial_id,
            r.bracket,
            r.rung,
            r.budget_epochs,
            r.config.learning_rate,
            r.config.n_layers,
            r.config.hidden_channels,
            r.config.kernel_size,
            r.config.history,
            r.config.combo.label(),
            if r.diverged {
                String::from("inf")
            } else {
                alloc::format!("{:.10e}", r.val_mse)
            },
            if r.diverged { "diverged" } else { "ok" }
        ));
    }
    out
}
