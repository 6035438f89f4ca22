//! Poisoned-data generation: the direct finite-difference method and the
//! generative autoencoder method, plus the shared round state and
//! instrumentation.

pub mod direct;
pub mod generative;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use direct::{fd_poison_gradient, group_loss, poison_round, run_direct_attack};
pub use generative::{
    generator_step, pretrain_generator, run_generative_attack, weighted_gradient, GeneratorConfig,
    RewardSignal,
};

/// Whether each poison injection steps from the pristine base model or from
/// the already-poisoned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonMode {
    Cumulative,
    Reset,
}

/// Loss-difference termination rule. The absolute form stops once the loss
/// stops moving in either direction; the signed form stops at the first
/// non-improving round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AbsDiff,
    SignedDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Generating rate: the sign-ascent step applied to the poisoned sample.
    pub alpha: f64,
    /// Loss-difference termination threshold.
    pub loss_threshold: f64,
    /// Hard round cap; termination by threshold may come earlier.
    pub max_rounds: usize,
    /// Finite-difference perturbation applied per element.
    pub fd_delta: f64,
    /// Learning rate of the target-model update when the poison is injected.
    pub poison_lr: f64,
    pub poison_mode: PoisonMode,
    /// Keep the poisoned sample inside [0,1]^d.
    pub clip_inputs: bool,
    pub termination: Termination,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            loss_threshold: 1e-4,
            max_rounds: 200,
            fd_delta: 1e-3,
            poison_lr: 10.0,
            poison_mode: PoisonMode::Cumulative,
            clip_inputs: true,
            termination: Termination::AbsDiff,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument("alpha must be non-negative".into()));
        }
        if self.loss_threshold <= 0.0 {
            return Err(Error::InvalidArgument("loss_threshold must be positive".into()));
        }
        if self.fd_delta <= 0.0 || self.fd_delta >= 1.0 {
            return Err(Error::InvalidArgument("fd_delta must lie in (0,1)".into()));
        }
        if self.poison_lr < 0.0 {
            return Err(Error::InvalidArgument("poison_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Why an attack loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossConverged,
    MaxRounds,
}

/// Per-round instrumentation. `poison_evals` counts target-model parameter
/// updates performed on scratch copies for gradient estimation plus the real
/// injection; `target_forwards` and `input_grad_backwards` count passes
/// through the target model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCost {
    pub poison_evals: usize,
    pub target_updates: usize,
    pub target_forwards: usize,
    pub input_grad_backwards: usize,
}

/// Full record of one attack campaign. Index 0 of every history is the
/// pre-attack baseline; index t is the state after poisoning round t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackState {
    pub round: usize,
    pub x_p: Tensor,
    pub t_p: Tensor,
    pub loss_history: Vec<f64>,
    pub accuracy_history: Vec<f64>,
    pub per_round_seconds: Vec<f64>,
    pub round_costs: Vec<RoundCost>,
    pub snapshots: Option<Vec<Tensor>>,
    pub stop_reason: StopReason,
}

impl AttackState {
    pub(crate) fn new(x_p0: Tensor, t_p: Tensor, keep_snapshots: bool) -> Self {
        Self {
            round: 0,
            x_p: x_p0.clone(),
            t_p,
            loss_history: Vec::new(),
            accuracy_history: Vec::new(),
            per_round_seconds: Vec::new(),
            round_costs: Vec::new(),
            snapshots: keep_snapshots.then(|| vec![x_p0]),
            stop_reason: StopReason::MaxRounds,
        }
    }

    /// Loss/accuracy/time/cost vectors all cover rounds 0..=round.
    pub fn assert_consistent(&self) {
        assert_eq!(self.loss_history.len(), self.round + 1);
        assert_eq!(self.accuracy_history.len(), self.round + 1);
        assert_eq!(self.per_round_seconds.len(), self.round + 1);
        assert_eq!(self.round_costs.len(), self.round + 1);
    }
}

/// Map `f` over 0..n, in parallel when the `parallel` feature is enabled.
/// Results come back in index order either way, so downstream reductions are
/// deterministic regardless of worker count.
pub fn maybe_par_map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`maybe_par_map_indices`]; exists so benchmarks can
/// compare both code paths in one build.
pub fn seq_map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
