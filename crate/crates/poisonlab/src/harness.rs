//! Campaign harness: loads a campaign spec from TOML, trains or loads the
//! target, runs the configured attack(s) with wall-clock instrumentation,
//! and persists reports, CSV curves, model checkpoints, and PGM snapshots.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackState, GeneratorConfig};
use crate::data::{self, LabeledDataset, PoisonInit};
use crate::net::{FeedForwardNet, LossKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Derive a stream-specific seed from the campaign master seed, so e.g. the
/// group sampler and the weight initializer never share randomness.
/// FNV-1a over the label, mixed with the master seed.
pub fn subseed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ master;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        noise: f64,
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Load this checkpoint instead of training when it exists; freshly
    /// trained models are saved here.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Direct,
    Generative,
    Both,
}

impl MethodChoice {
    fn methods(self) -> Vec<&'static str> {
        match self {
            MethodChoice::Direct => vec!["direct"],
            MethodChoice::Generative => vec!["generative"],
            MethodChoice::Both => vec!["direct", "generative"],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub method: MethodChoice,
    pub group_size: usize,
    pub init: PoisonInit,
    pub attack_label: usize,
    #[serde(default)]
    pub config: AttackConfig,
    /// Export per-round poison snapshots as PGM images (square inputs only).
    #[serde(default)]
    pub save_snapshots: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub target: TargetSpec,
    pub attack: AttackSection,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

impl CampaignSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: CampaignSpec =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate_paths()?;
        Ok(spec)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate_paths(&self) -> Result<()> {
        if let DatasetSpec::Mnist { train_images, train_labels, test_images, test_labels } =
            &self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.exists() {
                    return Err(Error::InvalidArgument(format!(
                        "dataset path does not exist: {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetSpec::Mnist { train_images, train_labels, test_images, test_labels } => Ok((
                data::load_mnist(train_images, train_labels)?,
                data::load_mnist(test_images, test_labels)?,
            )),
            DatasetSpec::Synthetic { classes, dim, per_class, noise, test_per_class } => {
                // one generation keeps the class centers shared; split each
                // class block into train and held-out samples
                let full = data::make_synthetic(
                    *classes,
                    *dim,
                    per_class + test_per_class,
                    *noise,
                    subseed(self.seed, "synthetic"),
                )?;
                let block = per_class + test_per_class;
                let mut train_inputs = Vec::new();
                let mut train_labels = Vec::new();
                let mut test_inputs = Vec::new();
                let mut test_labels = Vec::new();
                for i in 0..full.len() {
                    if i % block < *per_class {
                        train_inputs.push(full.input(i).clone());
                        train_labels.push(full.label(i).clone());
                    } else {
                        test_inputs.push(full.input(i).clone());
                        test_labels.push(full.label(i).clone());
                    }
                }
                Ok((
                    LabeledDataset::from_parts(train_inputs, train_labels, *classes)?,
                    LabeledDataset::from_parts(test_inputs, test_labels, *classes)?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub wall_seconds: f64,
    pub group_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Mean and std of per-round wall seconds over poisoning rounds
    /// (baseline row excluded).
    pub time_mean_seconds: f64,
    pub time_std_seconds: f64,
    pub min_accuracy: f64,
    pub final_accuracy: f64,
    /// Both loss conventions, since sum-vs-mean over the group is a
    /// reporting choice: the peak summed group loss and the same peak
    /// divided by the group size.
    pub max_group_loss_sum: f64,
    pub max_group_loss_mean: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub method: String,
    pub dataset_descriptor: String,
    pub target_descriptor: String,
    pub group_size: usize,
    pub seed: u64,
    pub timestamp_unix: u64,
    pub host: String,
    pub records: Vec<RoundRecord>,
    pub summary: ReportSummary,
}

impl CampaignReport {
    pub fn from_state(
        method: &str,
        dataset_descriptor: String,
        target_descriptor: String,
        group_size: usize,
        seed: u64,
        state: &AttackState,
    ) -> Self {
        let records: Vec<RoundRecord> = (0..=state.round)
            .map(|r| RoundRecord {
                round: r,
                wall_seconds: state.per_round_seconds[r],
                group_loss: state.loss_history[r],
                val_accuracy: state.accuracy_history[r],
            })
            .collect();
        let summary = summarize(&records, group_size);
        Self {
            method: method.to_string(),
            dataset_descriptor,
            target_descriptor,
            group_size,
            seed,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            host: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            records,
            summary,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn summarize(records: &[RoundRecord], group_size: usize) -> ReportSummary {
    let rounds = records.len().saturating_sub(1);
    let times: Vec<f64> = records.iter().skip(1).map(|r| r.wall_seconds).collect();
    let mean = if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    let std = if times.len() < 2 {
        0.0
    } else {
        (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (times.len() - 1) as f64)
            .sqrt()
    };
    let min_acc = records.iter().map(|r| r.val_accuracy).fold(f64::INFINITY, f64::min);
    let max_loss = records.iter().map(|r| r.group_loss).fold(f64::NEG_INFINITY, f64::max);
    ReportSummary {
        time_mean_seconds: mean,
        time_std_seconds: std,
        min_accuracy: min_acc,
        final_accuracy: records.last().map(|r| r.val_accuracy).unwrap_or(f64::NAN),
        max_group_loss_sum: max_loss,
        max_group_loss_mean: max_loss / group_size as f64,
        rounds,
    }
}

/// Train the target for the campaign, or load it from the configured
/// checkpoint when one already exists on disk.
pub fn prepare_target(
    spec: &CampaignSpec,
    train: &LabeledDataset,
) -> Result<FeedForwardNet> {
    if let Some(ckpt) = &spec.target.checkpoint {
        if ckpt.exists() {
            return FeedForwardNet::load(ckpt);
        }
    }
    let mut dims = vec![train.dim()];
    dims.extend_from_slice(&spec.target.hidden);
    dims.push(train.class_count());
    let mut net =
        FeedForwardNet::sigmoid_stack(&dims, LossKind::Mse, subseed(spec.seed, "target-init"))?;
    net.train(
        train,
        spec.target.epochs,
        spec.target.lr,
        spec.target.batch,
        subseed(spec.seed, "target-shuffle"),
    )?;
    if let Some(ckpt) = &spec.target.checkpoint {
        if let Some(parent) = ckpt.parent() {
            std::fs::create_dir_all(parent)?;
        }
        net.save(ckpt)?;
    }
    Ok(net)
}

fn descriptor(spec: &CampaignSpec, train: &LabeledDataset) -> (String, String) {
    let ds = match &spec.dataset {
        DatasetSpec::Mnist { .. } => format!("mnist-{}x{}", train.len(), train.dim()),
        DatasetSpec::Synthetic { classes, dim, .. } => format!("synthetic-c{classes}-d{dim}"),
    };
    let mut dims = vec![train.dim()];
    dims.extend_from_slice(&spec.target.hidden);
    dims.push(train.class_count());
    let target = dims.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
    (ds, target)
}

/// Run the configured attack campaign(s). Returns one report per method and
/// writes all artifacts (report JSON, curve CSVs, checkpoints, optional PGM
/// snapshots) into the output directory.
pub fn run_campaign(spec: &CampaignSpec) -> Result<Vec<CampaignReport>> {
    std::fs::create_dir_all(&spec.output_dir)?;
    let (train, test) = spec.load_datasets()?;
    if spec.attack.group_size == 0 || spec.attack.group_size > train.len() {
        return Err(Error::InvalidArgument("group_size must lie in 1..=train size".into()));
    }
    let target = prepare_target(spec, &train)?;
    // fixed validation subset so accuracy evaluation cost stays constant
    let eval = test.head(test.len().min(1000));
    let group = data::sample_group(&train, spec.attack.group_size, subseed(spec.seed, "group"))?;
    let (x_p0, t_p) = data::pick_poison_seed(
        &train,
        spec.attack.init,
        spec.attack.attack_label,
        subseed(spec.seed, "poison-seed"),
    )?;
    let (ds_descr, target_descr) = descriptor(spec, &train);

    let mut reports = Vec::new();
    for method in spec.attack.method.methods() {
        let state = match method {
            "direct" => {
                let (state, poisoned) = attack::run_direct_attack(
                    &target,
                    &train,
                    &group,
                    &x_p0,
                    &t_p,
                    &spec.attack.config,
                    Some(&eval),
                    spec.attack.save_snapshots,
                )?;
                poisoned.save(&spec.output_dir.join("target_poisoned_direct.json"))?;
                state
            }
            "generative" => {
                let gen_cfg = spec
                    .generator
                    .clone()
                    .unwrap_or_else(|| GeneratorConfig::for_input_dim(train.dim()));
                let generator =
                    attack::pretrain_generator(&train, &gen_cfg, subseed(spec.seed, "generator"))?;
                let (state, poisoned, final_gen) = attack::run_generative_attack(
                    &target,
                    &train,
                    &group,
                    &x_p0,
                    &t_p,
                    &generator,
                    &gen_cfg,
                    &spec.attack.config,
                    Some(&eval),
                    spec.attack.save_snapshots,
                )?;
                poisoned.save(&spec.output_dir.join("target_poisoned_generative.json"))?;
                final_gen.save(&spec.output_dir.join("generator_final.json"))?;
                state
            }
            _ => unreachable!(),
        };
        let report = CampaignReport::from_state(
            method,
            ds_descr.clone(),
            target_descr.clone(),
            spec.attack.group_size,
            spec.seed,
            &state,
        );
        report.save(&spec.output_dir.join(format!("report_{method}.json")))?;
        emit_curves(&report, &spec.output_dir.join(format!("curves_{method}.csv")))?;
        if let Some(snaps) = &state.snapshots {
            save_snapshot_pgms(snaps, &spec.output_dir, method)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// One row of the method-comparison grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group_size: usize,
    pub baseline_method: String,
    pub other_method: String,
    pub baseline_time_mean: f64,
    pub baseline_time_std: f64,
    pub other_time_mean: f64,
    pub other_time_std: f64,
    pub baseline_min_accuracy: f64,
    pub other_min_accuracy: f64,
    pub baseline_max_loss_sum: f64,
    pub other_max_loss_sum: f64,
    /// baseline per-round time / other per-round time.
    pub time_ratio: f64,
    /// other min accuracy / baseline min accuracy.
    pub accuracy_ratio: f64,
    pub loss_ratio: f64,
}

/// Build the comparison grid from ≥2 reports over the same dataset and
/// target. Reports are paired by group size in the order given; the first
/// of each pair is the baseline (the direct method in the intended use).
pub fn compare_methods(reports: &[CampaignReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument("need at least two reports to compare".into()));
    }
    let (ds, tg) = (&reports[0].dataset_descriptor, &reports[0].target_descriptor);
    for r in reports {
        if &r.dataset_descriptor != ds || &r.target_descriptor != tg {
            return Err(Error::InvalidArgument(format!(
                "reports disagree on dataset/target: {}/{} vs {}/{}",
                ds, tg, r.dataset_descriptor, r.target_descriptor
            )));
        }
    }
    let mut rows = Vec::new();
    let mut used = vec![false; reports.len()];
    for i in 0..reports.len() {
        if used[i] {
            continue;
        }
        let Some(j) = (i + 1..reports.len())
            .find(|&j| !used[j] && reports[j].group_size == reports[i].group_size)
        else {
            continue;
        };
        used[i] = true;
        used[j] = true;
        let (a, b) = (&reports[i], &reports[j]);
        rows.push(ComparisonRow {
            group_size: a.group_size,
            baseline_method: a.method.clone(),
            other_method: b.method.clone(),
            baseline_time_mean: a.summary.time_mean_seconds,
            baseline_time_std: a.summary.time_std_seconds,
            other_time_mean: b.summary.time_mean_seconds,
            other_time_std: b.summary.time_std_seconds,
            baseline_min_accuracy: a.summary.min_accuracy,
            other_min_accuracy: b.summary.min_accuracy,
            baseline_max_loss_sum: a.summary.max_group_loss_sum,
            other_max_loss_sum: b.summary.max_group_loss_sum,
            time_ratio: a.summary.time_mean_seconds / b.summary.time_mean_seconds,
            accuracy_ratio: b.summary.min_accuracy / a.summary.min_accuracy,
            loss_ratio: b.summary.max_group_loss_sum / a.summary.max_group_loss_sum,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no two reports share a group size".into()));
    }
    Ok(rows)
}

/// Render comparison rows as a plain-text grid.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    out.push_str("group  method        time/round (s)      min acc   max loss (sum)\n");
    for row in rows {
        out.push_str(&format!(
            "{:<6} {:<13} {:>8.4}±{:<8.4} {:>8.4}  {:>12.4}\n",
            row.group_size,
            row.baseline_method,
            row.baseline_time_mean,
            row.baseline_time_std,
            row.baseline_min_accuracy,
            row.baseline_max_loss_sum,
        ));
        out.push_str(&format!(
            "{:<6} {:<13} {:>8.4}±{:<8.4} {:>8.4}  {:>12.4}\n",
            row.group_size,
            row.other_method,
            row.other_time_mean,
            row.other_time_std,
            row.other_min_accuracy,
            row.other_max_loss_sum,
        ));
        out.push_str(&format!(
            "{:<6} improve: time {:.2}x, accuracy {:.2}x, loss {:.2}x\n",
            row.group_size, row.time_ratio, row.accuracy_ratio, row.loss_ratio
        ));
    }
    out
}

/// Write the per-round records as CSV with full 64-bit precision (Rust's
/// shortest round-trip float formatting). Deterministic: the same report
/// always produces byte-identical output.
pub fn emit_curves(report: &CampaignReport, path: &Path) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::InvalidArgument("report has no records".into()));
    }
    let mut out = String::from("round,loss,accuracy,seconds\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.round, r.group_loss, r.val_accuracy, r.wall_seconds
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a curves CSV back into round records.
pub fn parse_curves(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("round,loss,accuracy,seconds") => {}
        other => return Err(Error::Parse(format!("unexpected CSV header: {other:?}"))),
    }
    let mut records = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Parse(format!("bad CSV row: {line}")));
        }
        records.push(RoundRecord {
            round: cols[0].parse().map_err(|e| Error::Parse(format!("{e}: {line}")))?,
            group_loss: cols[1].parse().map_err(|e| Error::Parse(format!("{e}: {line}")))?,
            val_accuracy: cols[2].parse().map_err(|e| Error::Parse(format!("{e}: {line}")))?,
            wall_seconds: cols[3].parse().map_err(|e| Error::Parse(format!("{e}: {line}")))?,
        });
    }
    Ok(records)
}

/// Write a [0,1]-valued square tensor as a binary (P5) PGM image.
pub fn save_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let side = (image.len() as f64).sqrt() as usize;
    if side * side != image.len() {
        return Err(Error::Shape(format!("{} pixels is not a square image", image.len())));
    }
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

fn save_snapshot_pgms(snaps: &[Tensor], dir: &Path, method: &str) -> Result<()> {
    let side = (snaps[0].len() as f64).sqrt() as usize;
    if side * side != snaps[0].len() {
        return Ok(()); // non-square inputs have no natural image form
    }
    let snap_dir = dir.join(format!("snapshots_{method}"));
    std::fs::create_dir_all(&snap_dir)?;
    for (i, snap) in snaps.iter().enumerate() {
        save_pgm(snap, &snap_dir.join(format!("round_{i:04}.pgm")))?;
    }
    Ok(())
}
