//! Loss-based poisoning detection: per-sample loss thresholding, warning
//! accumulation, and a validation-accuracy audit once warnings pile up. The
//! only per-sample cost added to the training pipeline is one forward loss.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::maybe_par_map_indices;
use crate::data::LabeledDataset;
use crate::net::FeedForwardNet;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One observed training sample, as recorded by the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserveEvent {
    pub sample_id: usize,
    pub loss: f64,
    pub warned: bool,
    pub warning_count: usize,
    pub audit_triggered: bool,
    pub alarmed: bool,
}

/// Outcome of a single `observe` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserveOutcome {
    Clean,
    Warned,
    AuditCleared,
    Alarmed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionMonitor {
    pub loss_threshold: f64,
    pub warning_threshold: usize,
    pub warning_count: usize,
    pub alarm: bool,
    pub audit_accuracy_floor: f64,
    pub event_log: Vec<ObserveEvent>,
    next_sample_id: usize,
    audit_count: usize,
}

impl DetectionMonitor {
    pub fn new(loss_threshold: f64, warning_threshold: usize, audit_accuracy_floor: f64) -> Result<Self> {
        if loss_threshold <= 0.0 {
            return Err(Error::InvalidArgument("loss_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&audit_accuracy_floor) {
            return Err(Error::InvalidArgument("audit_accuracy_floor must lie in (0,1)".into()));
        }
        Ok(Self {
            loss_threshold,
            warning_threshold,
            warning_count: 0,
            alarm: false,
            audit_accuracy_floor,
            event_log: Vec::new(),
            next_sample_id: 0,
            audit_count: 0,
        })
    }

    /// Number of full validation-accuracy audits run so far. Bounded above
    /// by ceil(warnings / warning_threshold).
    pub fn audit_count(&self) -> usize {
        self.audit_count
    }

    /// Process one incoming training sample. The loss is measured on the net
    /// as passed in — by default callers should measure before letting the
    /// model update on the sample. A loss above the threshold records a
    /// warning; once warnings exceed the warning threshold, validation
    /// accuracy is audited: below the floor raises the alarm, otherwise the
    /// warning counter is cleared.
    pub fn observe(
        &mut self,
        net: &FeedForwardNet,
        x: &Tensor,
        t_label: &Tensor,
        validation: &LabeledDataset,
    ) -> Result<ObserveOutcome> {
        if self.alarm {
            return Err(Error::AlreadyAlarmed);
        }
        let loss = net.forward_loss(x, t_label)?;
        let warned = loss > self.loss_threshold;
        let mut audit_triggered = false;
        let mut outcome = ObserveOutcome::Clean;
        if warned {
            self.warning_count += 1;
            outcome = ObserveOutcome::Warned;
        }
        if self.warning_count > self.warning_threshold {
            audit_triggered = true;
            self.audit_count += 1;
            let acc = net.accuracy(validation)?;
            if acc < self.audit_accuracy_floor {
                self.alarm = true;
                outcome = ObserveOutcome::Alarmed;
            } else {
                self.warning_count = 0;
                outcome = ObserveOutcome::AuditCleared;
            }
        }
        self.event_log.push(ObserveEvent {
            sample_id: self.next_sample_id,
            loss,
            warned,
            warning_count: self.warning_count,
            audit_triggered,
            alarmed: self.alarm,
        });
        self.next_sample_id += 1;
        Ok(outcome)
    }

    /// Write the event log as CSV:
    /// `sample_id,loss,warned,warning_count,audit_triggered,alarmed`.
    pub fn export_event_log(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,loss,warned,warning_count,audit_triggered,alarmed\n");
        for e in &self.event_log {
            out.push_str(&format!(
                "{},{:?},{},{},{},{}\n",
                e.sample_id, e.loss, e.warned, e.warning_count, e.audit_triggered, e.alarmed
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

/// Per-sample losses of the whole dataset under `net`, in dataset order.
pub fn per_sample_losses(net: &FeedForwardNet, dataset: &LabeledDataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(maybe_par_map_indices(dataset.len(), |i| {
        net.forward_loss(dataset.input(i), dataset.label(i)).expect("validated shapes")
    }))
}

/// Pick a loss threshold as the given quantile of clean-data losses, times a
/// 1.5 safety factor. Quantile 1.0 means the maximum observed loss.
pub fn calibrate_threshold(net: &FeedForwardNet, dataset: &LabeledDataset, quantile: f64) -> Result<f64> {
    if !(0.0 < quantile && quantile <= 1.0) {
        return Err(Error::InvalidArgument("quantile must lie in (0,1]".into()));
    }
    let mut losses = per_sample_losses(net, dataset)?;
    losses.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let idx = ((quantile * losses.len() as f64).ceil() as usize).clamp(1, losses.len()) - 1;
    Ok(losses[idx] * 1.5)
}

/// Paired losses from the gap experiment: for each selected clean sample,
/// its loss under its true label, and the loss of a poisoned (input, label)
/// pair produced by the attack runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossGapReport {
    pub normal_losses: Vec<f64>,
    pub poisoned_losses: Vec<f64>,
    pub gap: f64,
}

impl LossGapReport {
    pub fn pair_count(&self) -> usize {
        self.normal_losses.len()
    }
}

/// Compare the losses of `n_samples` clean (input, true-label) pairs against
/// poisoned pairs produced by `attack_runner` (which maps a sample index to
/// a poisoned input plus its artificial label). The gap is
/// `min(poisoned) - max(normal)`; positive means a threshold can separate
/// the two populations perfectly.
pub fn loss_gap_experiment<F>(
    net: &FeedForwardNet,
    dataset: &LabeledDataset,
    n_samples: usize,
    mut attack_runner: F,
) -> Result<LossGapReport>
where
    F: FnMut(usize) -> Result<(Tensor, Tensor)>,
{
    if n_samples == 0 || n_samples > dataset.len() {
        return Err(Error::InvalidArgument("n_samples must lie in 1..=len".into()));
    }
    let mut normal_losses = Vec::with_capacity(n_samples);
    let mut poisoned_losses = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        normal_losses.push(net.forward_loss(dataset.input(i), dataset.label(i))?);
        let (x_p, t_p) = attack_runner(i)?;
        poisoned_losses.push(net.forward_loss(&x_p, &t_p)?);
    }
    let max_normal = normal_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_poisoned = poisoned_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LossGapReport { normal_losses, poisoned_losses, gap: min_poisoned - max_normal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::net::LossKind;

    fn trained() -> (FeedForwardNet, LabeledDataset) {
        let ds = data::make_synthetic(3, 4, 60, 0.04, 11).unwrap();
        let mut net = FeedForwardNet::sigmoid_stack(&[4, 6, 3], LossKind::Mse, 21).unwrap();
        net.train(&ds, 200, 1.0, 10, 5).unwrap();
        (net, ds)
    }

    #[test]
    fn low_loss_sample_raises_no_warning() {
        let (net, ds) = trained();
        let mut mon = DetectionMonitor::new(10.0, 3, 0.5).unwrap();
        let out = mon.observe(&net, ds.input(0), ds.label(0), &ds).unwrap();
        assert_eq!(out, ObserveOutcome::Clean);
        assert_eq!(mon.warning_count, 0);
        assert!(!mon.alarm);
        assert!(!mon.event_log[0].warned);
    }

    #[test]
    fn zero_warning_threshold_audits_and_clears_on_healthy_net() {
        let (net, ds) = trained();
        // threshold tiny so any sample warns; net is healthy, so the audit
        // clears the counter and leaves the alarm off
        let mut mon = DetectionMonitor::new(1e-12, 0, 0.5).unwrap();
        let out = mon.observe(&net, ds.input(0), ds.label(0), &ds).unwrap();
        assert_eq!(out, ObserveOutcome::AuditCleared);
        assert_eq!(mon.warning_count, 0);
        assert!(!mon.alarm);
        assert_eq!(mon.audit_count(), 1);
        assert!(mon.event_log[0].audit_triggered);
    }

    #[test]
    fn degraded_net_trips_alarm_and_rejects_further_observations() {
        let (net, ds) = trained();
        // an untrained net fails the audit
        let bad = FeedForwardNet::sigmoid_stack(&[4, 6, 3], LossKind::Mse, 99).unwrap();
        let floor = net.accuracy(&ds).unwrap() - 0.05;
        let mut mon = DetectionMonitor::new(1e-12, 0, floor).unwrap();
        let out = mon.observe(&bad, ds.input(0), ds.label(0), &ds).unwrap();
        assert_eq!(out, ObserveOutcome::Alarmed);
        assert!(mon.alarm);
        assert!(matches!(
            mon.observe(&bad, ds.input(0), ds.label(0), &ds),
            Err(Error::AlreadyAlarmed)
        ));
    }

    #[test]
    fn warning_count_monotone_except_audit_clear() {
        let (net, ds) = trained();
        let th = calibrate_threshold(&net, &ds, 0.5).unwrap();
        let mut mon = DetectionMonitor::new(th, 1000, 0.5).unwrap();
        let mut prev = 0usize;
        for i in 0..ds.len() {
            mon.observe(&net, ds.input(i), ds.label(i), &ds).unwrap();
            let e = mon.event_log.last().unwrap();
            assert!(e.warning_count >= prev || e.audit_triggered);
            prev = e.warning_count;
        }
        // audit cost bound
        let warnings = mon.event_log.iter().filter(|e| e.warned).count();
        assert!(mon.audit_count() <= warnings.div_ceil(mon.warning_threshold.max(1)));
    }

    #[test]
    fn calibration_constant_losses() {
        // identity 1-layer net, loss is identical for every sample
        let inputs = vec![Tensor::vector(vec![0.2, 0.8]); 4];
        let labels = vec![Tensor::one_hot(2, 0).unwrap(); 4];
        let ds = LabeledDataset::from_parts(inputs, labels, 2).unwrap();
        let net = FeedForwardNet::sigmoid_stack(&[2, 3, 2], LossKind::Mse, 5).unwrap();
        let c = net.forward_loss(ds.input(0), ds.label(0)).unwrap();
        let th = calibrate_threshold(&net, &ds, 1.0).unwrap();
        assert!((th - 1.5 * c).abs() < 1e-15);
    }

    #[test]
    fn calibration_quantile_orders_thresholds() {
        let (net, ds) = trained();
        let lo = calibrate_threshold(&net, &ds, 0.5).unwrap();
        let hi = calibrate_threshold(&net, &ds, 1.0).unwrap();
        assert!(lo <= hi);
        assert!(calibrate_threshold(&net, &ds, 0.0).is_err());
        assert!(calibrate_threshold(&net, &ds, 1.5).is_err());
    }

    #[test]
    fn clean_stream_with_calibrated_threshold_never_alarms() {
        let (net, ds) = trained();
        let th = calibrate_threshold(&net, &ds, 1.0).unwrap();
        let mut mon = DetectionMonitor::new(th, 5, 0.5).unwrap();
        for i in 0..ds.len() {
            let out = mon.observe(&net, ds.input(i), ds.label(i), &ds).unwrap();
            assert_eq!(out, ObserveOutcome::Clean);
        }
        assert!(!mon.alarm);
        assert_eq!(mon.audit_count(), 0);
    }

    #[test]
    fn gap_experiment_single_pair_and_label_flip_positive_gap() {
        let (net, ds) = trained();
        let single = loss_gap_experiment(&net, &ds, 1, |i| {
            let wrong = (ds.class_of(i) + 1) % ds.class_count();
            Ok((ds.input(i).clone(), Tensor::one_hot(ds.class_count(), wrong)?))
        })
        .unwrap();
        assert_eq!(single.pair_count(), 1);
        let report = loss_gap_experiment(&net, &ds, 20, |i| {
            let wrong = (ds.class_of(i) + 1) % ds.class_count();
            Ok((ds.input(i).clone(), Tensor::one_hot(ds.class_count(), wrong)?))
        })
        .unwrap();
        // a well-trained net assigns far higher loss to mislabeled pairs
        assert!(report.gap > 0.0, "gap {}", report.gap);
    }

    #[test]
    fn event_log_round_trips_through_csv() {
        let (net, ds) = trained();
        let mut mon = DetectionMonitor::new(1e-12, 100, 0.5).unwrap();
        for i in 0..5 {
            mon.observe(&net, ds.input(i), ds.label(i), &ds).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        mon.export_event_log(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,loss,warned,warning_count,audit_triggered,alarmed"
        );
        for (e, line) in mon.event_log.iter().zip(lines) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), e.sample_id);
            assert_eq!(cols[1].parse::<f64>().unwrap(), e.loss);
            assert_eq!(cols[2].parse::<bool>().unwrap(), e.warned);
        }
    }
}
