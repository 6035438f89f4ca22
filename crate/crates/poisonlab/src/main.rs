use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poisonlab::attack;
use poisonlab::data::{self, PoisonInit};
use poisonlab::detect::{self, DetectionMonitor, ObserveOutcome};
use poisonlab::harness::{self, CampaignReport, CampaignSpec};
use poisonlab::Result;

#[derive(Parser)]
#[command(name = "poisonlab", about = "Data-poisoning attack and detection laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the target model from a campaign spec and report its
    /// train/test accuracy.
    Train {
        /// Campaign spec in TOML format.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the attack campaign(s) described by a spec; writes reports,
    /// curves, and checkpoints to the spec's output directory.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Calibrate a loss monitor on clean data, stream a direct attack
    /// against it, and run the normal-vs-poisoned loss-gap experiment.
    Detect {
        #[arg(long)]
        config: PathBuf,
        /// Quantile of clean losses used for threshold calibration.
        #[arg(long, default_value_t = 0.999)]
        quantile: f64,
        /// Warnings tolerated before an accuracy audit.
        #[arg(long, default_value_t = 5)]
        warning_threshold: usize,
        /// Sample pairs in the loss-gap experiment.
        #[arg(long, default_value_t = 20)]
        gap_samples: usize,
    },
    /// Compare two or more campaign reports (JSON) as a method grid.
    Compare {
        /// Report files; pairs sharing a group size are compared in order.
        reports: Vec<PathBuf>,
    },
    /// Re-emit the per-round CSV curves from a saved report.
    Curves {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_train(config: &PathBuf) -> Result<()> {
    let spec = CampaignSpec::from_toml_file(config)?;
    let (train, test) = spec.load_datasets()?;
    let net = harness::prepare_target(&spec, &train)?;
    println!("train accuracy: {:.4}", net.accuracy(&train)?);
    println!("test accuracy:  {:.4}", net.accuracy(&test)?);
    Ok(())
}

fn cmd_attack(config: &PathBuf) -> Result<()> {
    let spec = CampaignSpec::from_toml_file(config)?;
    let reports = harness::run_campaign(&spec)?;
    for r in &reports {
        println!(
            "{}: {} rounds, time/round {:.4}±{:.4}s, min accuracy {:.4}, max group loss {:.4}",
            r.method,
            r.summary.rounds,
            r.summary.time_mean_seconds,
            r.summary.time_std_seconds,
            r.summary.min_accuracy,
            r.summary.max_group_loss_sum,
        );
    }
    if reports.len() >= 2 {
        print!("{}", harness::format_comparison(&harness::compare_methods(&reports)?));
    }
    println!("artifacts written to {}", spec.output_dir.display());
    Ok(())
}

fn cmd_detect(
    config: &PathBuf,
    quantile: f64,
    warning_threshold: usize,
    gap_samples: usize,
) -> Result<()> {
    let spec = CampaignSpec::from_toml_file(config)?;
    let (train, test) = spec.load_datasets()?;
    let net = harness::prepare_target(&spec, &train)?;
    let threshold = detect::calibrate_threshold(&net, &train, quantile)?;
    let baseline = net.accuracy(&test)?;
    let floor = (baseline - 0.05).max(0.01);
    println!("loss threshold: {threshold:.6} (quantile {quantile})");
    println!("audit floor:    {floor:.4} (baseline {baseline:.4})");

    // stream a direct attack's poison sequence through a fresh monitor,
    // letting the target degrade as the attack would in the wild
    let group =
        data::sample_group(&train, spec.attack.group_size, harness::subseed(spec.seed, "group"))?;
    let (x_p0, t_p) = data::pick_poison_seed(
        &train,
        spec.attack.init,
        spec.attack.attack_label,
        harness::subseed(spec.seed, "poison-seed"),
    )?;
    let (state, _) = attack::run_direct_attack(
        &net,
        &train,
        &group,
        &x_p0,
        &t_p,
        &spec.attack.config,
        Some(&test),
        true,
    )?;
    let snapshots = state.snapshots.expect("requested");
    let mut monitor = DetectionMonitor::new(threshold, warning_threshold, floor)?;
    let mut poisoned_net = net.clone();
    let mut alarmed_at = None;
    for (i, x_p) in snapshots.iter().enumerate().skip(1) {
        let outcome = monitor.observe(&poisoned_net, x_p, &t_p, &test)?;
        poisoned_net.sgd_step_on_sample(x_p, &t_p, spec.attack.config.poison_lr)?;
        if outcome == ObserveOutcome::Alarmed {
            alarmed_at = Some(i);
            break;
        }
    }
    match alarmed_at {
        Some(i) => println!("alarm raised after {i} poisoned observations"),
        None => println!("no alarm over {} poisoned observations", snapshots.len() - 1),
    }
    let log_path = spec.output_dir.join("detection_events.csv");
    std::fs::create_dir_all(&spec.output_dir)?;
    monitor.export_event_log(&log_path)?;
    println!("event log: {}", log_path.display());

    let classes = train.class_count();
    let flip = detect::loss_gap_experiment(&net, &train, gap_samples, |i| {
        let wrong = (train.class_of(i) + 1) % classes;
        Ok((train.input(i).clone(), poisonlab::Tensor::one_hot(classes, wrong)?))
    })?;
    println!("label-flip loss gap:      {:.6}", flip.gap);
    let uniform = detect::loss_gap_experiment(&net, &train, gap_samples, |i| {
        data::pick_poison_seed(
            &train,
            PoisonInit::UniformRandom,
            i % classes,
            harness::subseed(spec.seed, &format!("gap-{i}")),
        )
    })?;
    println!("uniform-random loss gap:  {:.6}", uniform.gap);
    Ok(())
}

fn cmd_compare(paths: &[PathBuf]) -> Result<()> {
    let reports: Vec<CampaignReport> =
        paths.iter().map(|p| CampaignReport::load(p)).collect::<Result<_>>()?;
    let rows = harness::compare_methods(&reports)?;
    print!("{}", harness::format_comparison(&rows));
    Ok(())
}

fn cmd_curves(report: &PathBuf, out: &PathBuf) -> Result<()> {
    let report = CampaignReport::load(report)?;
    harness::emit_curves(&report, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Attack { config } => cmd_attack(config),
        Command::Detect { config, quantile, warning_threshold, gap_samples } => {
            cmd_detect(config, *quantile, *warning_threshold, *gap_samples)
        }
        Command::Compare { reports } => cmd_compare(reports),
        Command::Curves { report, out } => cmd_curves(report, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
