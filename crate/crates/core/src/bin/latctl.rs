use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use latctl::dataset::{collect, split, Dataset};
use latctl::driver::{load_model, AnyModel, ExpertDriver, LearnedDriver, SupervisedDriver};
use latctl::episode::{run_episode, EpisodeConfig, TrajectoryLog};
use latctl::experiment::{evaluate, tune_pid, write_outputs, ExperimentConfig, TuneGrid};
use latctl::forest::{fit_forest, save_forest, ForestConfig};
use latctl::manifest::Manifest;
use latctl::mlp::{save_mlp, train, TrainConfig};
use latctl::supervisor::{calibrate_threshold, Calibration, SupervisorConfig};
use latctl::telemetry::{serve, TelemetryConfig, Thresholds};
use latctl::trackgen::resolve_track;
use latctl::Error;

#[derive(Parser)]
#[command(name = "latctl", version, about = "Learned lateral control: data, training, evaluation, live telemetry")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override for the subcommand's random choices.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the PID expert and record a LIDAR/steering dataset.
    GenData {
        #[arg(long)]
        track: Option<String>,
        #[arg(long)]
        laps: Option<usize>,
    },
    /// Fit the random forest on a dataset.
    TrainRf {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the MLP baseline on a dataset.
    TrainMlp {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Set the supervisor's CoV thresholds from held-out scans.
    Calibrate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Drive one lap with a model (or the expert) and write the trajectory log.
    Drive {
        /// Model file; omit to drive the PID expert.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        track: Option<String>,
        /// Arbitrate forest steering with the CoV supervisor.
        #[arg(long)]
        supervised: bool,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the cross-track generalization experiment.
    Evaluate,
    /// Run a live supervised episode with WebSocket telemetry.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        track: Option<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Wait for a client before starting.
        #[arg(long)]
        wait: bool,
    },
    /// Print the effective experiment config as TOML.
    ShowConfig,
    /// Grid-search the expert's lateral gains on a track.
    TunePid {
        #[arg(long)]
        track: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn require(path: &Path, producer: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        }
        .into());
    }
    Ok(())
}

fn finish(manifest: &mut Manifest, out: &Path) -> anyhow::Result<()> {
    let path = manifest.write(out)?;
    let bad = manifest.verify(out);
    if !bad.is_empty() {
        bail!("artifacts failed validation: {}", bad.join(", "));
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn write_log(log: &TrajectoryLog, out: &Path, stem: &str, m: &mut Manifest) -> anyhow::Result<()> {
    let csv = format!("{stem}.csv");
    let summary = format!("{stem}.summary.json");
    log.write_csv(out.join(&csv))?;
    log.write_summary(out.join(&summary))?;
    m.add_output(out, &csv)?;
    m.add_output(out, &summary)?;
    info!(
        "{}: {} lap_fraction {:.3} max|d| {:.3}",
        log.summary.track,
        log.summary.terminal.as_str(),
        log.summary.lap_fraction,
        log.summary.max_abs_d
    );
    Ok(())
}

fn load_calibration(path: &Path) -> anyhow::Result<Calibration> {
    require(path, "calibrate")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if matches!(cli.command, Command::ShowConfig) {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = cli.common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cli.common.seed;
    let episode = EpisodeConfig {
        initial_speed: cfg.target_speed_mps,
        ..cfg.episode.clone()
    };
    let data_default = out.join("dataset.csv");
    let forest_default = out.join("forest.json");
    let calibration_default = out.join("calibration.json");

    match cli.command {
        Command::GenData { track, laps } => {
            let track = resolve_track(track.as_deref().unwrap_or(&cfg.train_track))?;
            let mut cc = cfg.collect.clone();
            cc.target_speed_mps = cfg.target_speed_mps;
            if let Some(s) = seed {
                cc.seed = s;
            }
            if let Some(l) = laps {
                cc.laps = l;
            }
            let mut m = Manifest::new("gen-data", Some(cc.seed));
            m.set_config(toml::to_string(&cc)?);
            let data = collect(&track, &cfg.expert, &cc, &EpisodeConfig { record_every: 0, ..episode })?;
            data.save(&data_default)?;
            info!("collected {} samples on {}", data.len(), track.name());
            m.add_output(&out, "dataset.csv")?;
            m.add_output(&out, "dataset.meta.json")?;
            finish(&mut m, &out)
        }
        Command::TrainRf { data } => {
            let path = data.unwrap_or(data_default);
            require(&path, "gen-data")?;
            let ds = Dataset::load(&path)?;
            let fc = ForestConfig {
                seed: seed.unwrap_or(cfg.forest.seed),
                ..cfg.forest.clone()
            };
            let mut m = Manifest::new("train-rf", Some(fc.seed));
            m.set_config(toml::to_string(&fc)?);
            m.add_input(&path)?;
            let forest = fit_forest(&ds, &fc)?;
            save_forest(&forest, &forest_default)?;
            m.add_output(&out, "forest.json")?;
            finish(&mut m, &out)
        }
        Command::TrainMlp { data } => {
            let path = data.unwrap_or(data_default);
            require(&path, "gen-data")?;
            let ds = Dataset::load(&path)?;
            let tc = TrainConfig {
                seed: seed.unwrap_or(cfg.mlp.seed),
                ..cfg.mlp.clone()
            };
            let mut m = Manifest::new("train-mlp", Some(tc.seed));
            m.set_config(toml::to_string(&tc)?);
            m.add_input(&path)?;
            let (mlp, history) = train(&ds, &tc)?;
            info!(
                "best epoch {} of {}, validation MSE {:.3e}",
                history.best_epoch,
                history.epochs.len(),
                history.best_val_mse
            );
            save_mlp(&mlp, out.join("mlp.json"))?;
            std::fs::write(out.join("mlp_history.json"), serde_json::to_string_pretty(&history)?)?;
            m.add_output(&out, "mlp.json")?;
            m.add_output(&out, "mlp_history.json")?;
            finish(&mut m, &out)
        }
        Command::Calibrate { model, data } => {
            let model = model.unwrap_or(forest_default);
            let data = data.unwrap_or(data_default);
            require(&model, "train-rf")?;
            require(&data, "gen-data")?;
            let AnyModel::Forest(forest) = load_model(&model)? else {
                bail!("calibration needs a random forest model");
            };
            let ds = Dataset::load(&data)?;
            let split_seed = seed.unwrap_or(ds.meta.seed);
            let (_, holdout) = split(&ds, 1.0 - cfg.holdout_fraction, split_seed)?;
            let cal = calibrate_threshold(&forest, &holdout, cfg.supervisor.quantile, cfg.supervisor.eps)?;
            info!("cov_on {:.4} cov_off {:.4} from {} scans", cal.cov_on, cal.cov_off, cal.samples);
            let mut m = Manifest::new("calibrate", Some(split_seed));
            m.add_input(&model)?;
            m.add_input(&data)?;
            std::fs::write(&calibration_default, serde_json::to_string_pretty(&cal)?)?;
            m.add_output(&out, "calibration.json")?;
            finish(&mut m, &out)
        }
        Command::Drive {
            model,
            track,
            supervised,
            calibration,
        } => {
            let track = resolve_track(track.as_deref().unwrap_or(&cfg.train_track))?;
            let mut m = Manifest::new("drive", seed);
            let speed = cfg.target_speed_mps;
            let eps = cfg.supervisor.eps;
            let (log, label) = match model {
                None => (
                    run_episode(&mut ExpertDriver::new(cfg.expert.clone(), speed), &track, &episode)?,
                    "expert",
                ),
                Some(path) => {
                    require(&path, "train-rf` or `latctl train-mlp")?;
                    m.add_input(&path)?;
                    match (load_model(&path)?, supervised) {
                        (AnyModel::Forest(f), true) => {
                            let cal_path = calibration.unwrap_or(calibration_default);
                            let cal = load_calibration(&cal_path)?;
                            m.add_input(&cal_path)?;
                            let sup = SupervisorConfig {
                                cov_on: cal.cov_on,
                                cov_off: cal.cov_off,
                                min_fallback_steps: cfg.supervisor.min_fallback_steps,
                                eps,
                            };
                            let mut d = SupervisedDriver::new(Arc::new(f), cfg.expert.clone(), speed, sup)?;
                            let log = run_episode(&mut d, &track, &episode)?;
                            let stats = d.into_run_stats();
                            info!(
                                "interventions {} total odd counts {}",
                                stats.interventions, stats.total_odd_counts
                            );
                            (log, "supervised_forest")
                        }
                        (AnyModel::Forest(f), false) => (
                            run_episode(&mut LearnedDriver::new(f, cfg.expert.clone(), speed, eps), &track, &episode)?,
                            "random_forest",
                        ),
                        (AnyModel::Mlp(_), true) => bail!("--supervised needs a random forest model"),
                        (AnyModel::Mlp(mlp), false) => (
                            run_episode(&mut LearnedDriver::new(mlp, cfg.expert.clone(), speed, eps), &track, &episode)?,
                            "mlp",
                        ),
                    }
                }
            };
            write_log(&log, &out, &format!("drive_{}_{}", track.name(), label), &mut m)?;
            finish(&mut m, &out)
        }
        Command::Evaluate => {
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let result = evaluate(&cfg)?;
            print!("{}", result.report.markdown_table());
            let mut m = write_outputs(&result, &cfg, &out)?;
            finish(&mut m, &out)
        }
        Command::Serve {
            model,
            track,
            calibration,
            bind,
            time_scale,
            wait,
        } => {
            let model = model.unwrap_or(forest_default);
            require(&model, "train-rf")?;
            let AnyModel::Forest(forest) = load_model(&model)? else {
                bail!("serve needs a random forest model");
            };
            let cal_path = calibration.unwrap_or(calibration_default);
            let cal = load_calibration(&cal_path)?;
            let track = resolve_track(track.as_deref().unwrap_or(&cfg.train_track))?;
            let sup = SupervisorConfig {
                cov_on: cal.cov_on,
                cov_off: cal.cov_off,
                min_fallback_steps: cfg.supervisor.min_fallback_steps,
                eps: cfg.supervisor.eps,
            };
            let mut driver = SupervisedDriver::new(Arc::new(forest), cfg.expert.clone(), cfg.target_speed_mps, sup)?;
            let tc = TelemetryConfig {
                bind,
                time_scale,
                wait_for_client: wait,
                ..TelemetryConfig::default()
            };
            let thresholds = Thresholds {
                cov_on: Some(cal.cov_on),
                cov_off: Some(cal.cov_off),
            };
            let mut m = Manifest::new("serve", seed);
            m.add_input(&model)?;
            m.add_input(&cal_path)?;
            let report = serve(&mut driver, &track, &episode, &tc, thresholds)?;
            info!(
                "clients {} overrides {} malformed {}",
                report.clients,
                report.overrides.len(),
                report.malformed
            );
            write_log(&report.log, &out, &format!("serve_{}", track.name()), &mut m)?;
            std::fs::write(out.join("serve_stats.json"), serde_json::to_string_pretty(&report.stats)?)?;
            std::fs::write(out.join("serve_overrides.json"), serde_json::to_string_pretty(&report.overrides)?)?;
            m.add_output(&out, "serve_stats.json")?;
            m.add_output(&out, "serve_overrides.json")?;
            finish(&mut m, &out)
        }
        Command::ShowConfig => unreachable!(),
        Command::TunePid { track } => {
            let track = resolve_track(track.as_deref().unwrap_or(&cfg.train_track))?;
            let mut grid = TuneGrid::default();
            if let Some(s) = seed {
                grid.seed = s;
            }
            let result = tune_pid(&track, &cfg.expert, &grid, cfg.target_speed_mps)?;
            for c in &result.candidates {
                info!(
                    "kp {:.2} kd {:.2} k_psi {:.2}: completed {} max|d| {:.3} rms {:.4}",
                    c.kp, c.kd, c.k_psi, c.completed, c.nominal_max_abs_d, c.tracking_rms_m
                );
            }
            let mut m = Manifest::new("tune-pid", Some(grid.seed));
            m.set_config(toml::to_string(&grid)?);
            std::fs::write(out.join("expert_gains.toml"), toml::to_string(&result.best)?)?;
            std::fs::write(out.join("tune_candidates.json"), serde_json::to_string_pretty(&result.candidates)?)?;
            m.add_output(&out, "expert_gains.toml")?;
            m.add_output(&out, "tune_candidates.json")?;
            finish(&mut m, &out)
        }
    }
}
