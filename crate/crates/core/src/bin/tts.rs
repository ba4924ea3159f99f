use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use causalcast::anomaly::{self, AeConfig, AeSidecar, FeatureAutoencoder, ScoreSpace};
use causalcast::diffkit::Checkpoint;
use causalcast::error::{Error, Result};
use causalcast::eval::{self, AdjacencyPair, Report};
use causalcast::synth::{self, GroundTruthGraph, Lorenz96Config, VarConfig};
use causalcast::tensor::{LoadOptions, NormStats, SplitSpec, TensorSeries};
use causalcast::trainer::{self, Forecaster, RunConfig, RunManifest};

#[derive(Parser)]
#[command(name = "tts", version, about = "Causal discovery, forecasting and anomaly scoring on tensor time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print shape and axis metadata of a TTS file.
    Inspect {
        file: PathBuf,
        /// Forward-fill non-finite values instead of rejecting the file.
        #[arg(long)]
        forward_fill: bool,
    },
    /// Generate a synthetic series with a known causal graph.
    Simulate {
        #[arg(value_enum)]
        system: System,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 500)]
        t: usize,
        /// Lorenz-96 forcing.
        #[arg(long, default_value_t = 10.0)]
        f: f64,
        #[arg(long)]
        seed: u64,
        /// VAR lag order.
        #[arg(long, default_value_t = 2)]
        lags: usize,
        /// VAR parents per variable.
        #[arg(long, default_value_t = 2)]
        parents: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit the feature autoencoder on the training range of a series.
    PretrainAe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        train: f64,
        #[arg(long, default_value_t = 0.1)]
        validation: f64,
        #[arg(long)]
        h_dim: Option<usize>,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.995)]
        quantile: f64,
    },
    /// Score a series (observed or forecast) for extreme events.
    Detect {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long, default_value = "ae.ckpt")]
        ae: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Space::Decoded)]
        space: Space,
        /// Override the threshold stored with the autoencoder.
        #[arg(long)]
        threshold: Option<f64>,
        /// Include per-cell scores in the report.
        #[arg(long)]
        scores: bool,
    },
    /// Run the full pipeline from a TOML config.
    #[command(alias = "run")]
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Forecast the steps following an input series.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Build a versioned report from a run manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        include_diagonal: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Lorenz96,
    Var,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Decoded,
    Latent,
}

fn load(path: &Path) -> Result<TensorSeries> {
    Ok(TensorSeries::load(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Inspect { file, forward_fill } => {
            let ts = TensorSeries::load_with(&file, LoadOptions { forward_fill })?;
            let (n, d, t) = ts.shape();
            let meta = ts.meta();
            println!("shape: N={n} D={d} T={t}");
            println!("locations: {}", meta.location_ids.join(", "));
            println!("features: {}", meta.feature_names.join(", "));
            if let (Some(a), Some(b)) = (meta.timestamps.first(), meta.timestamps.last()) {
                let step = meta.timestamps.get(1).map_or(0, |s| s - a);
                println!("timestamps: {a} .. {b} (step {step})");
            }
        }
        Command::Simulate { system, p, t, f, seed, lags, parents, out, truth } => {
            let (ts, graph) = match system {
                System::Lorenz96 => synth::simulate_lorenz96(&Lorenz96Config { p, t, forcing: f, seed, ..Default::default() })?,
                System::Var => {
                    let coefs = synth::random_sparse_var(p, lags, parents, 0.9, seed);
                    synth::simulate_var(&VarConfig::new(coefs, t, 1.0, seed))?
                }
            };
            ts.save(&out)?;
            if let Some(path) = truth {
                std::fs::write(path, graph.to_json())?;
            }
        }
        Command::PretrainAe { input, out, seed, train, validation, h_dim, hidden, epochs, quantile } => {
            let ts = load(&input)?;
            let split = SplitSpec::chronological(ts.t(), train, validation)?;
            let (norm, warnings) = NormStats::fit(&ts, &split.train);
            for w in warnings {
                log::warn!("{w:?}");
            }
            let z = norm.normalize(&ts);
            let config = AeConfig { h_dim, hidden, epochs, ..Default::default() };
            let (ae, report) = anomaly::pretrain(&z, &split.train, &split.validation, &config, seed)?;
            let mut val_scores = Vec::new();
            for &(a, b) in &split.validation {
                val_scores.extend(anomaly::score_cells(&ae, &z.slice_time(a, b), ScoreSpace::Decoded)?.into_iter().flatten());
            }
            let threshold = anomaly::fit_threshold(&val_scores, quantile);
            ae.checkpoint().save(&out)?;
            let sidecar = AeSidecar { config, norm, train: split.train, validation: split.validation, quantile, threshold, report };
            write_json(&out.with_extension("json"), &sidecar)?;
        }
        Command::Detect { forecast, ae, labels, report, space, threshold, scores } => {
            let sidecar: AeSidecar = serde_json::from_str(&std::fs::read_to_string(ae.with_extension("json"))?)?;
            let model = FeatureAutoencoder::from_checkpoint(&Checkpoint::load(&ae)?, sidecar.config.activation)?;
            let ts = load(&forecast)?;
            let z = sidecar.norm.normalize(&ts);
            let grid = match labels {
                Some(p) => Some(anomaly::read_labels(&std::fs::read_to_string(p)?, ts.meta())?),
                None => None,
            };
            let (space, input) = match space {
                Space::Decoded => (ScoreSpace::Decoded, z),
                Space::Latent => (ScoreSpace::Latent, anomaly::encode(&model, &z)?.values),
            };
            let th = threshold.or(if space == ScoreSpace::Decoded { sidecar.threshold } else { None });
            let rep = anomaly::score_anomalies(&model, &input, space, grid.as_deref(), th, scores)?;
            if let Some(auc) = rep.auc_roc {
                println!("auc_roc {auc:.6}");
            }
            write_json(&report, &rep)?;
        }
        Command::Train { config } => {
            let cfg = RunConfig::from_toml(&std::fs::read_to_string(&config)?)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let manifest = trainer::run_from_config(&cfg, &base)?;
            for (k, v) in &manifest.metrics.test_mae {
                println!("test_mae {k} {v:.6}");
            }
            if let Some(a) = manifest.metrics.structure.as_ref().and_then(|s| s.auroc) {
                println!("structure_auroc {a:.6}");
            }
        }
        Command::Forecast { model, input, out, horizon } => {
            let f = Forecaster::load(&model)?;
            f.predict(&load(&input)?, horizon)?.save(&out)?;
        }
        Command::Eval { manifest, truth, report, include_diagonal } => {
            let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest)?)?;
            let mut r = Report::new();
            r.config_hash = Some(m.config_hash.clone());
            r.forecast = m.metrics.test_forecast.clone();
            r.blend = m.metrics.blend.clone();
            r.anomaly = m.metrics.anomaly.clone();
            r.structure = m.metrics.structure.clone();
            if let Some(path) = truth {
                let g = GroundTruthGraph::from_json(&std::fs::read_to_string(path)?)?;
                let rows = &m.metrics.granger_scores;
                let n = rows.len();
                if n == 0 {
                    return Err(Error::Contract("manifest carries no Granger scores".into()));
                }
                let scores = causalcast::diffkit::Tensor2::from_fn(n, n, |j, i| rows[j][i]);
                r.structure = Some(eval::score_structure(&scores, &g, include_diagonal, None)?);
            }
            for (round, epochs) in m.metrics.outer_epochs.iter().enumerate() {
                r.loss_curves.insert(format!("outer_train_round{round}"), epochs.iter().map(|e| e.train_mae).collect());
                r.loss_curves.insert(format!("outer_val_round{round}"), epochs.iter().filter_map(|e| e.val_mae).collect());
            }
            if !m.metrics.ae_train_mse.is_empty() {
                r.loss_curves.insert("ae_train".into(), m.metrics.ae_train_mse.clone());
                r.loss_curves.insert("ae_val".into(), m.metrics.ae_val_mse.clone());
            }
            let snaps = manifest.with_file_name("snapshots.tts");
            if snaps.exists() {
                let s = load(&snaps)?;
                if s.t() >= 2 {
                    let ts = &s.meta().timestamps;
                    r.adjacency_pair = Some(AdjacencyPair::new(ts[0] as usize, s.frame(0), ts[1] as usize, s.frame(1))?);
                }
            }
            for name in eval::emit_report(&r, &report)? {
                println!("{}", report.join(name).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
