//! Direct gradient poisoning: element-wise finite-difference estimation of
//! the poisoned-sample gradient followed by sign-ascent updates.
//!
//! Each gradient component requires injecting a perturbed copy of the
//! poisoned sample into a scratch copy of the target and re-evaluating the
//! group loss, so one round costs d+1 poisoning evaluations for a
//! d-dimensional input. That cost is the whole point of the generative
//! method next door.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::data::{LabeledDataset, NormalGroup};
use crate::net::FeedForwardNet;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{maybe_par_map_indices, AttackConfig, AttackState, PoisonMode, RoundCost, StopReason, Termination};

/// One poison injection: a single SGD step on the (x_p, t_p) pair. Reset
/// mode steps from the pristine `base`; cumulative mode steps from the
/// already-poisoned `current`. Neither input net is mutated.
pub fn poison_round(
    current: &FeedForwardNet,
    x_p: &Tensor,
    t_p: &Tensor,
    poison_lr: f64,
    poison_mode: PoisonMode,
    base: &FeedForwardNet,
) -> Result<FeedForwardNet> {
    let start = match poison_mode {
        PoisonMode::Cumulative => current,
        PoisonMode::Reset => base,
    };
    let mut poisoned = start.clone();
    poisoned.sgd_step_on_sample(x_p, t_p, poison_lr)?;
    Ok(poisoned)
}

/// Sum of per-sample losses over the group under the net's loss kind.
pub fn group_loss(
    net: &FeedForwardNet,
    dataset: &LabeledDataset,
    group: &NormalGroup,
) -> Result<f64> {
    validate_group(dataset, group)?;
    let losses = maybe_par_map_indices(group.len(), |i| {
        let idx = group.indices()[i];
        // dimensions validated above
        net.forward_loss(dataset.input(idx), dataset.label(idx)).expect("validated shapes")
    });
    Ok(losses.iter().sum())
}

fn group_loss_seq(net: &FeedForwardNet, dataset: &LabeledDataset, group: &NormalGroup) -> f64 {
    group
        .indices()
        .iter()
        .map(|&idx| {
            net.forward_loss(dataset.input(idx), dataset.label(idx)).expect("validated shapes")
        })
        .sum()
}

fn validate_group(dataset: &LabeledDataset, group: &NormalGroup) -> Result<()> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("group must be nonempty".into()));
    }
    if group.indices().iter().any(|&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument("group index out of dataset range".into()));
    }
    Ok(())
}

/// Inject `x` into a scratch copy of `start` and return the resulting group
/// loss. The building block of the finite-difference quotient.
fn poisoned_group_loss(
    start: &FeedForwardNet,
    x: &Tensor,
    t_p: &Tensor,
    poison_lr: f64,
    dataset: &LabeledDataset,
    group: &NormalGroup,
    evals: &AtomicUsize,
) -> f64 {
    let mut net = start.clone();
    net.sgd_step_on_sample(x, t_p, poison_lr).expect("validated shapes");
    evals.fetch_add(1, Ordering::Relaxed);
    group_loss_seq(&net, dataset, group)
}

/// Forward-difference estimate of the gradient of the post-injection group
/// loss w.r.t. each element of the poisoned sample. `start` is the net the
/// poisoning step begins from this round (pristine base in reset mode,
/// current net in cumulative mode) and is never mutated.
///
/// Returns the gradient and the number of poisoning evaluations spent,
/// which is always `x_p.len() + 1` (the +1 is the unperturbed baseline).
pub fn fd_poison_gradient(
    start: &FeedForwardNet,
    dataset: &LabeledDataset,
    group: &NormalGroup,
    x_p: &Tensor,
    t_p: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    validate_group(dataset, group)?;
    if x_p.len() != start.input_dim() || t_p.len() != start.output_dim() {
        return Err(Error::Shape("poison pair does not match net dimensions".into()));
    }
    let evals = AtomicUsize::new(0);
    let base_loss =
        poisoned_group_loss(start, x_p, t_p, cfg.poison_lr, dataset, group, &evals);
    let grad = maybe_par_map_indices(x_p.len(), |k| {
        let mut perturbed = x_p.clone();
        perturbed.data_mut()[k] += cfg.fd_delta;
        let loss =
            poisoned_group_loss(start, &perturbed, t_p, cfg.poison_lr, dataset, group, &evals);
        (loss - base_loss) / cfg.fd_delta
    });
    Ok((Tensor::vector(grad), evals.into_inner()))
}

/// Sequential twin of [`fd_poison_gradient`] used by the benchmark suite to
/// compare against the parallel path. Identical arithmetic and reduction
/// order.
pub fn fd_poison_gradient_seq(
    start: &FeedForwardNet,
    dataset: &LabeledDataset,
    group: &NormalGroup,
    x_p: &Tensor,
    t_p: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    validate_group(dataset, group)?;
    let evals = AtomicUsize::new(0);
    let base_loss =
        poisoned_group_loss(start, x_p, t_p, cfg.poison_lr, dataset, group, &evals);
    let grad = super::seq_map_indices(x_p.len(), |k| {
        let mut perturbed = x_p.clone();
        perturbed.data_mut()[k] += cfg.fd_delta;
        let loss =
            poisoned_group_loss(start, &perturbed, t_p, cfg.poison_lr, dataset, group, &evals);
        (loss - base_loss) / cfg.fd_delta
    });
    Ok(Tensor::vector(grad))
}

/// Full direct-gradient attack loop. Histories are indexed by round with the
/// pre-attack baseline at index 0. `eval` is the dataset accuracy is
/// reported against (falls back to `dataset`). Returns the final state and
/// the poisoned target model.
#[allow(clippy::too_many_arguments)]
pub fn run_direct_attack(
    target: &FeedForwardNet,
    dataset: &LabeledDataset,
    group: &NormalGroup,
    x_p0: &Tensor,
    t_p: &Tensor,
    cfg: &AttackConfig,
    eval: Option<&LabeledDataset>,
    keep_snapshots: bool,
) -> Result<(AttackState, FeedForwardNet)> {
    cfg.validate()?;
    validate_group(dataset, group)?;
    if cfg.clip_inputs && x_p0.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("x_p0 must lie in [0,1]^d".into()));
    }
    let eval_set = eval.unwrap_or(dataset);
    let mut state = AttackState::new(x_p0.clone(), t_p.clone(), keep_snapshots);
    let mut current = target.clone();

    state.loss_history.push(group_loss(&current, dataset, group)?);
    state.accuracy_history.push(current.accuracy(eval_set)?);
    state.per_round_seconds.push(0.0);
    state.round_costs.push(RoundCost::default());

    for round in 1..=cfg.max_rounds {
        let timer = Instant::now();
        let start_net = match cfg.poison_mode {
            PoisonMode::Cumulative => current.clone(),
            PoisonMode::Reset => target.clone(),
        };
        let (grad, evals) =
            fd_poison_gradient(&start_net, dataset, group, &state.x_p, t_p, cfg)?;
        for (x, g) in state.x_p.data_mut().iter_mut().zip(grad.data()) {
            *x += cfg.alpha * sign(*g);
        }
        if cfg.clip_inputs {
            state.x_p.clip(0.0, 1.0);
        }
        current = poison_round(&start_net, &state.x_p, t_p, cfg.poison_lr, PoisonMode::Cumulative, target)?;
        let loss = group_loss(&current, dataset, group)?;
        let elapsed = timer.elapsed().as_secs_f64();

        state.round = round;
        state.loss_history.push(loss);
        state.accuracy_history.push(current.accuracy(eval_set)?);
        state.per_round_seconds.push(elapsed);
        state.round_costs.push(RoundCost {
            poison_evals: evals,
            target_updates: 1,
            target_forwards: group.len() + 1,
            input_grad_backwards: 0,
        });
        if let Some(snaps) = state.snapshots.as_mut() {
            snaps.push(state.x_p.clone());
        }

        if round >= 2 {
            let diff = loss - state.loss_history[round - 1];
            let stop = match cfg.termination {
                Termination::AbsDiff => diff.abs() < cfg.loss_threshold,
                Termination::SignedDiff => diff < cfg.loss_threshold,
            };
            if stop {
                state.stop_reason = StopReason::LossConverged;
                break;
            }
        }
    }
    state.assert_consistent();
    Ok((state, current))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, PoisonInit};
    use crate::net::LossKind;

    fn toy() -> (FeedForwardNet, LabeledDataset, NormalGroup) {
        let ds = data::make_synthetic(2, 2, 50, 0.05, 5).unwrap();
        let mut net = FeedForwardNet::sigmoid_stack(&[2, 3, 2], LossKind::Mse, 42).unwrap();
        net.train(&ds, 200, 1.0, 10, 3).unwrap();
        let group = data::sample_group(&ds, 20, 9).unwrap();
        (net, ds, group)
    }

    #[test]
    fn zero_poison_lr_leaves_net_unchanged() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let poisoned =
            poison_round(&net, &x_p, &t_p, 0.0, PoisonMode::Cumulative, &net).unwrap();
        assert_eq!(poisoned, net);
        drop(group);
    }

    #[test]
    fn perfectly_classified_pair_gives_zero_update() {
        // single identity layer reproducing its input: loss 0, gradient 0
        let net = FeedForwardNet::new(
            vec![crate::net::LayerSpec::new(2, 2, crate::net::Activation::Identity)],
            LossKind::Mse,
            0,
        )
        .unwrap();
        let x = Tensor::vector(vec![0.3, 0.7]);
        let out = net.output(&x).unwrap();
        let poisoned =
            poison_round(&net, &x, &out, 0.5, PoisonMode::Cumulative, &net).unwrap();
        assert_eq!(poisoned, net);
    }

    #[test]
    fn group_loss_matches_straight_line_summation() {
        let (net, ds, group) = toy();
        let total = group_loss(&net, &ds, &group).unwrap();
        let mut manual = 0.0;
        for &i in group.indices() {
            manual += net.forward_loss(ds.input(i), ds.label(i)).unwrap();
        }
        assert!((total - manual).abs() < 1e-12);
        assert!(total >= 0.0);
    }

    #[test]
    fn singleton_group_equals_forward_loss() {
        let (net, ds, _) = toy();
        let group = data::sample_group(&ds, 1, 4).unwrap();
        let idx = group.indices()[0];
        let total = group_loss(&net, &ds, &group).unwrap();
        let single = net.forward_loss(ds.input(idx), ds.label(idx)).unwrap();
        assert_eq!(total, single);
    }

    #[test]
    fn fd_gradient_zero_when_poison_lr_zero() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let mut cfg = AttackConfig::default();
        cfg.poison_lr = 0.0;
        let (grad, evals) = fd_poison_gradient(&net, &ds, &group, &x_p, &t_p, &cfg).unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(evals, x_p.len() + 1);
    }

    #[test]
    fn fd_gradient_has_input_dimension_and_counts_evals() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::UniformRandom, 1, 2).unwrap();
        let cfg = AttackConfig { poison_lr: 1.0, ..AttackConfig::default() };
        let (grad, evals) = fd_poison_gradient(&net, &ds, &group, &x_p, &t_p, &cfg).unwrap();
        assert_eq!(grad.len(), x_p.len());
        assert_eq!(evals, x_p.len() + 1);
    }

    #[test]
    fn fd_gradient_does_not_mutate_start_net() {
        let (net, ds, group) = toy();
        let before = net.clone();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig { poison_lr: 2.0, ..AttackConfig::default() };
        fd_poison_gradient(&net, &ds, &group, &x_p, &t_p, &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn parallel_and_sequential_fd_gradients_are_bit_identical() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig { poison_lr: 1.5, ..AttackConfig::default() };
        let (par, _) = fd_poison_gradient(&net, &ds, &group, &x_p, &t_p, &cfg).unwrap();
        let seq = fd_poison_gradient_seq(&net, &ds, &group, &x_p, &t_p, &cfg).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn alpha_zero_terminates_quickly_in_reset_mode() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig {
            alpha: 0.0,
            poison_lr: 1.0,
            poison_mode: PoisonMode::Reset,
            max_rounds: 50,
            ..AttackConfig::default()
        };
        let (state, _) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        // with a constant x_p the injected losses repeat from the first
        // poisoning round on, so the loss-difference rule fires as early as
        // it can
        assert_eq!(state.stop_reason, StopReason::LossConverged);
        assert_eq!(state.round, 2);
    }

    #[test]
    fn sign_update_geometry_bounded_by_alpha() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig {
            poison_lr: 1.0,
            max_rounds: 5,
            clip_inputs: false,
            ..AttackConfig::default()
        };
        let (state, _) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, true).unwrap();
        let snaps = state.snapshots.unwrap();
        for pair in snaps.windows(2) {
            assert!(pair[1].linf_distance(&pair[0]) <= cfg.alpha + 1e-15);
        }
    }

    #[test]
    fn clipping_keeps_poison_in_unit_box() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::UniformRandom, 0, 3).unwrap();
        let cfg = AttackConfig { poison_lr: 2.0, max_rounds: 15, ..AttackConfig::default() };
        let (state, _) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, true).unwrap();
        for snap in state.snapshots.unwrap() {
            assert!(snap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reset_mode_never_mutates_the_base_net() {
        let (net, ds, group) = toy();
        let before = net.clone();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig {
            poison_lr: 2.0,
            poison_mode: PoisonMode::Reset,
            max_rounds: 8,
            ..AttackConfig::default()
        };
        run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn group_loss_nondecreasing_on_smooth_toy() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig {
            alpha: 0.02,
            poison_lr: 0.5,
            max_rounds: 12,
            loss_threshold: 1e-12,
            ..AttackConfig::default()
        };
        let (state, _) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        assert!(state.round >= 10, "toy attack terminated too early");
        for pair in state.loss_history[1..11].windows(2) {
            assert!(pair[1] >= pair[0] - 1e-6, "loss decreased: {pair:?}");
        }
    }

    #[test]
    fn per_round_cost_is_dimension_plus_one() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig { poison_lr: 1.0, max_rounds: 3, ..AttackConfig::default() };
        let (state, _) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        let d = ds.dim();
        for cost in &state.round_costs[1..] {
            assert_eq!(cost.poison_evals, d + 1);
            assert_eq!(cost.target_updates, 1);
        }
    }

    #[test]
    fn attack_is_deterministic() {
        let (net, ds, group) = toy();
        let (x_p, t_p) = data::pick_poison_seed(&ds, PoisonInit::NormalSample, 0, 1).unwrap();
        let cfg = AttackConfig { poison_lr: 1.0, max_rounds: 6, ..AttackConfig::default() };
        let (a, na) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        let (b, nb) =
            run_direct_attack(&net, &ds, &group, &x_p, &t_p, &cfg, None, false).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.accuracy_history, b.accuracy_history);
        assert_eq!(a.x_p, b.x_p);
        assert_eq!(na, nb);
    }
}
