use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fmchest::bench::{self, emit_csv, Estimator, ExperimentSpec, PilotSpec};
use fmchest::channel::{build_dataset, load_dataset, save_dataset, ChannelModelConfig, SplitSizes, StorageDtype};
use fmchest::flow::{self, load_flow_model, save_flow_model};
use fmchest::nn::NetworkConfig;
use fmchest::pilot::{ls_estimate, make_pilots, measure, snr_to_sigma};
use fmchest::sampler::{euler_estimate_batch, SamplerConfig, UpdateRule};
use fmchest::score::{dsm_train, LangevinConfig, NoiseLadder, ScoreModel};
use fmchest::train::{write_training_log, TrainConfig};
use fmchest::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "fmchest", version, about = "Flow-matching MIMO channel estimation")]
struct Cli {
    /// JSON settings file for the subcommand; explicit flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the settings file
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate channels and write an FMCHEST1 dataset
    GenerateData(GenerateArgs),
    /// Train the flow-matching velocity network
    TrainFm(TrainArgs),
    /// Train the score-matching baseline network
    TrainSm(TrainSmArgs),
    /// Estimate test channels from simulated measurements
    Estimate(EstimateArgs),
    /// Run an experiment file and write the CSV report
    Sweep(SweepArgs),
    /// Compare total sampling time of the estimators
    Timing(TimingArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    rays: Option<usize>,
    /// Per-cluster angular spread in degrees
    #[arg(long)]
    spread: Option<f64>,
    /// Antenna spacing in wavelengths
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

/// Settings file of `generate-data`.
#[derive(Deserialize, Default)]
#[serde(default)]
struct GenerateFile {
    channel: Option<ChannelModelConfig>,
    splits: Option<SplitSizes>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sigma_tilde: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Channel multiplier per level, e.g. 1,2,2
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Wall-clock limit in seconds
    #[arg(long)]
    time_budget: Option<f64>,
    /// Use the full-scale optimiser settings (100 epochs, batch 128, lr 1e-5)
    #[arg(long)]
    full_scale: bool,
    /// Per-epoch CSV log
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSmArgs {
    #[command(flatten)]
    common: TrainArgs,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    sigma_floor: Option<f64>,
}

/// Settings file of `train-fm` and `train-sm`.
#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainFile {
    network: Option<NetworkConfig>,
    train: Option<TrainConfig>,
    ladder: Option<NoiseLadder>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// FMCKPT01 checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Number of test channels to estimate
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    pilot_slots: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pilot_power: f64,
    /// Scale step s by s*dt instead of dt
    #[arg(long)]
    step_scaled: bool,
    /// CSV of step versus NMSE to the truth, averaged over the channels
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    sm_checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,20,100")]
    fm_steps: Vec<usize>,
    /// K,L of the Langevin sampler
    #[arg(long, value_delimiter = ',', default_value = "500,3")]
    sm_kl: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    /// Test channels to time over (default: the whole test split)
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    pilot_slots: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad settings file {}: {e}", path.display())))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let file: GenerateFile = read_json(cli.config.as_deref())?;
    let mut cfg = file.channel.unwrap_or_default();
    let mut sizes = file.splits.unwrap_or(SplitSizes::new(1000, 100, 100));
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(cfg.m_rx, a.m);
    set!(cfg.n_tx, a.n);
    set!(cfg.n_clusters, a.clusters);
    set!(cfg.rays_per_cluster, a.rays);
    set!(cfg.angular_spread_deg, a.spread);
    set!(cfg.antenna_spacing, a.spacing);
    set!(cfg.seed, cli.seed);
    set!(sizes.train, a.train);
    set!(sizes.val, a.val);
    set!(sizes.test, a.test);
    let dtype = match a.dtype {
        Dtype::F32 => StorageDtype::F32,
        Dtype::F64 => StorageDtype::F64,
    };
    let ds = build_dataset(&cfg, sizes, dtype)?;
    save_dataset(&a.out, &ds)?;
    println!(
        "wrote {} ({}x{}, {} train / {} val / {} test, mean entry power {:.4})",
        a.out.display(),
        cfg.m_rx,
        cfg.n_tx,
        sizes.train,
        sizes.val,
        sizes.test,
        ds.mean_entry_power()
    );
    Ok(())
}

fn train_settings(cli: &Cli, a: &TrainArgs) -> Result<(NetworkConfig, TrainConfig, Option<NoiseLadder>)> {
    let file: TrainFile = read_json(cli.config.as_deref())?;
    let mut net = file.network.unwrap_or_default();
    let mut cfg = match (file.train, a.full_scale) {
        (_, true) => TrainConfig::full_scale(),
        (Some(t), false) => t,
        (None, false) => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = a.sigma_tilde {
        cfg.flow.sigma_tilde = v;
    }
    if let Some(v) = a.sigma_min {
        cfg.flow.sigma_min = v;
    }
    if let Some(v) = a.time_budget {
        cfg.time_budget_s = Some(v);
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
        net.seed = v;
    }
    if let Some(v) = a.base_channels {
        net.base_channels = v;
    }
    if let Some(v) = &a.levels {
        net.level_multipliers = v.clone();
    }
    net.validate()?;
    cfg.validate()?;
    Ok((net, cfg, file.ladder))
}

fn report_training(history: &[fmchest::train::EpochRecord], best: usize, log: Option<&Path>) -> Result<()> {
    for r in history {
        let train = r.train_loss.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!("epoch {:>4}  train {train:>10}  val {:.5}  {:.1}s", r.epoch, r.val_loss, r.wall_seconds);
    }
    println!("best epoch {best}");
    if let Some(p) = log {
        write_training_log(p, history)?;
    }
    Ok(())
}

fn train_fm(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (net, cfg, _) = train_settings(cli, a)?;
    let ds = load_dataset(&a.data)?;
    let out = flow::train(&ds, net, &cfg)?;
    save_flow_model(&a.out, &out.model, &cfg.flow)?;
    report_training(&out.history, out.best_epoch, a.log.as_deref())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_sm(cli: &Cli, a: &TrainSmArgs) -> Result<()> {
    let (net, cfg, ladder) = train_settings(cli, &a.common)?;
    let defaults = LangevinConfig::default();
    let mut ladder = ladder.unwrap_or_else(|| defaults.ladder());
    if let Some(v) = a.sigma_max {
        ladder.sigma_max = v;
    }
    if let Some(v) = a.sigma_floor {
        ladder.sigma_min = v;
    }
    let ds = load_dataset(&a.common.data)?;
    let out = dsm_train(&ds, net, ladder, &cfg)?;
    out.model.save(&a.common.out)?;
    report_training(&out.run.history, out.run.best_epoch, a.common.log.as_deref())?;
    println!("wrote {}", a.common.out.display());
    Ok(())
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (model, _) = load_flow_model(&a.checkpoint).map_err(|e| Error::Config(e.to_string()))?;
    let (m, n) = ds.shape();
    model.config().check_input(m, n).map_err(|e| Error::Config(e.to_string()))?;
    let count = a.count.clamp(1, ds.test.len());
    let pilots = make_pilots(&PilotSpec {
        n,
        t: a.pilot_slots.unwrap_or(n),
        power: a.pilot_power,
    }
    .config(cli.seed.unwrap_or(0)))?;
    let sigma = snr_to_sigma(a.snr, a.pilot_power);
    let mut rng = Rng::new(cli.seed.unwrap_or(0));
    let truths = &ds.test[..count];
    let ls = truths
        .iter()
        .map(|h| ls_estimate(&measure(h, &pilots, sigma, &mut rng)?, a.pilot_power))
        .collect::<Result<Vec<_>>>()?;
    let sampler = SamplerConfig {
        steps: a.steps,
        update_rule: if a.step_scaled {
            UpdateRule::StepScaled
        } else {
            UpdateRule::StandardEuler
        },
        record_trajectory: true,
    };
    let out = euler_estimate_batch(&model, &ls, &sampler)?;
    let mut curve = Vec::with_capacity(out.trajectory.len());
    for states in &out.trajectory {
        let mut acc = bench::NmseAccumulator::default();
        for (e, h) in states.iter().zip(truths) {
            acc.push(e, h)?;
        }
        curve.push(acc.db());
    }
    println!("LS NMSE {:.3} dB", curve[0]);
    println!("FM NMSE {:.3} dB after {} steps", curve[curve.len() - 1], a.steps);
    if let Some(path) = &a.trajectory {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        w.write_record(["step", "nmse_db"]).map_err(Error::from)?;
        for (s, v) in curve.iter().enumerate() {
            w.write_record([s.to_string(), v.to_string()]).map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs --config <experiment.json>".into()))?;
    let mut spec = ExperimentSpec::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let report = bench::run_sweep(&spec)?;
    emit_csv(&report, &a.out)?;
    for r in &report.rows {
        println!(
            "{:>6} snr {:>5.1} steps {:>5}  nmse {:>8.3} dB (+/- {:.3})  {:.3}s",
            r.estimator, r.snr_db, r.steps, r.nmse_db, r.nmse_stderr_db, r.wall_s
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn timing(cli: &Cli, a: &TimingArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (_, n) = ds.shape();
    let mut estimators = Vec::new();
    if let Some(p) = &a.fm_checkpoint {
        let (model, _) = load_flow_model(p).map_err(|e| Error::Config(e.to_string()))?;
        for &s in &a.fm_steps {
            estimators.push(Estimator::fm(model.clone(), s));
        }
    }
    if let Some(p) = &a.sm_checkpoint {
        let &[k, l] = a.sm_kl.as_slice() else {
            return Err(Error::Config("--sm-kl takes exactly two values, K,L".into()));
        };
        let model = ScoreModel::load(p).map_err(|e| Error::Config(e.to_string()))?;
        let langevin = LangevinConfig {
            n_levels: k,
            steps_per_level: l,
            sigma_max: model.ladder.sigma_max,
            sigma_min: model.ladder.sigma_min,
            ..LangevinConfig::default()
        };
        estimators.push(Estimator::sm(model, langevin));
    }
    if estimators.is_empty() {
        return Err(Error::Config("give --fm-checkpoint and/or --sm-checkpoint".into()));
    }
    let samples = a.samples.unwrap_or(ds.test.len()).clamp(1, ds.test.len());
    let pilots = PilotSpec {
        n,
        t: a.pilot_slots.unwrap_or(n),
        power: 1.0,
    };
    let rows = bench::timing(&ds.test[..samples], pilots, a.snr, &estimators, 50, cli.seed.unwrap_or(0))?;
    println!("{:<8} {:>8} {:>12} {:>14}", "method", "steps", "evals/sample", "total time (s)");
    for r in &rows {
        println!("{:<8} {:>8} {:>12} {:>14.3}", r.method, r.steps, r.evals_per_sample, r.total_s);
    }
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        for r in &rows {
            w.serialize(r).map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => generate(cli, a),
        Command::TrainFm(a) => train_fm(cli, a),
        Command::TrainSm(a) => train_sm(cli, a),
        Command::Estimate(a) => estimate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Timing(a) => timing(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
