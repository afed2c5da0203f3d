//! `mixagg`: synthesize datasets, train descriptor models, extract and
//! evaluate descriptors, and inspect trained weights.
//!
//! Exit codes: 0 on success, 1 for command-line usage errors, 2 for
//! data or runtime errors. Set `MIXAGG_THREADS` to parallelize the
//! matrix kernels (default 1).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use mixagg::aggregator::{
    aggregate, count_params, export_first_layer_weights, per_block_params,
};
use mixagg::data_io::{self, SynthConfig};
use mixagg::retrieval::{self, DescriptorDb};
use mixagg::tensor::{stack_rows, Tensor};
use mixagg::trainer::{fit, FitOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "mixagg", version, about = "Feature-map descriptor toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic geotagged dataset with known structure
    Synth {
        /// Number of distinct places
        #[arg(long)]
        places: usize,
        /// Views per place
        #[arg(long)]
        views: usize,
        /// Output directory (manifest.jsonl plus tensors/)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Feature-map channels
        #[arg(long, default_value_t = 1024)]
        channels: usize,
        /// Feature-map height
        #[arg(long, default_value_t = 20)]
        height: usize,
        /// Feature-map width
        #[arg(long, default_value_t = 20)]
        width: usize,
    },
    /// Train a model on a manifest and write a checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Flat key=value training config
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Optional loss-curve CSV (epoch,step,loss)
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Cap on total optimization steps across epochs
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Compute a descriptor for every manifest entry
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output database directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval of queries against references
    Eval {
        /// Query database directory
        #[arg(long)]
        queries: PathBuf,
        /// Reference database directory
        #[arg(long)]
        refs: PathBuf,
        /// Positive radius in meters
        #[arg(long, default_value_t = retrieval::DEFAULT_RADIUS_M)]
        radius: f64,
        /// Comma-separated recall cutoffs
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        /// JSON report output path
        #[arg(long)]
        report: PathBuf,
    },
    /// Report parameter counts for a model configuration
    Paramcount {
        /// Flat key=value config (training or model keys)
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure per-descriptor aggregation latency
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Timed samples per pass
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Untimed warmup iterations
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump first-layer weight rows as PGM images
    ExportWeights {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for neuron_<idx>.pgm files
        #[arg(long)]
        out: PathBuf,
        /// Cap on the number of images (default: every row)
        #[arg(long)]
        count: Option<usize>,
    },
}

enum CliError {
    Usage(String),
    Run(mixagg::Error),
}

impl From<mixagg::Error> for CliError {
    fn from(e: mixagg::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(mixagg::Error::Io(e))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Hex SHA-256 of a settings text, stamped into reports so results can
/// be traced back to the exact configuration that produced them.
fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { places, views, out, seed, channels, height, width } => {
            if places == 0 || views == 0 {
                return Err(usage("--places and --views must be >= 1"));
            }
            if channels == 0 || height == 0 || width == 0 {
                return Err(usage("--channels, --height, and --width must be >= 1"));
            }
            let cfg = SynthConfig {
                num_places: places,
                views_per_place: views,
                channels,
                height,
                width,
                seed,
            };
            let manifest = data_io::synth_generate(&cfg, &out)?;
            println!("records {}", manifest.len());
            println!("manifest {}", out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::Train { manifest, config, out, curve, max_steps } => {
            let text = fs::read_to_string(&config)?;
            let tc = TrainConfig::from_text(&text)?;
            let data = data_io::load_manifest(&manifest)?;
            let mut optim = tc.optim_state();
            let opts = FitOptions {
                max_steps,
                checkpoint_path: Some(out.clone()),
                curve_path: curve,
            };
            let result = fit(&data, &tc.model, &tc.batch, &tc.loss, &mut optim, tc.seed, &opts)?;
            println!("config_hash {}", config_hash(&text));
            println!("steps {}", result.curve.len());
            for (epoch, mean) in result.epoch_mean_loss.iter().enumerate() {
                println!("epoch {epoch} mean_loss {mean}");
            }
            println!("checkpoint {}", out.display());
            Ok(())
        }
        Command::Extract { manifest, ckpt, out } => {
            let data = data_io::load_manifest(&manifest)?;
            if data.is_empty() {
                return Err(CliError::Run(mixagg::Error::Data(
                    "manifest has no records to extract".into(),
                )));
            }
            let params = data_io::load_model(&ckpt)?;
            let mut rows: Vec<Tensor<f32>> = Vec::with_capacity(data.len());
            let mut ids = Vec::with_capacity(data.len());
            let mut geo = Vec::with_capacity(data.len());
            for record in &data.records {
                let maps = data_io::read_tensor(&data.tensor_path(record))?;
                rows.push(aggregate(&params, &maps)?);
                ids.push(record.id.clone());
                geo.push(Some((record.lat, record.lon)));
            }
            let refs: Vec<&Tensor<f32>> = rows.iter().collect();
            let matrix = stack_rows(&refs)?;
            let db = DescriptorDb::new(ids, &matrix, geo)?;
            retrieval::save_db(&db, &out)?;
            println!("descriptors {}", db.len());
            println!("dim {}", db.dim());
            println!("database {}", out.display());
            Ok(())
        }
        Command::Eval { queries, refs, radius, ks, report } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(usage("--ks needs at least one cutoff, all >= 1"));
            }
            if !(radius >= 0.0) || !radius.is_finite() {
                return Err(usage(format!("--radius must be finite and >= 0, got {radius}")));
            }
            let qdb = retrieval::load_db(&queries)?;
            let rdb = retrieval::load_db(&refs)?;
            let truth = retrieval::ground_truth(&qdb, &rdb, radius)?;
            let mut result = retrieval::recall_at_k(&qdb, &rdb, &truth, &ks)?;
            let ks_text: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
            let settings = format!("radius={radius}\nks={}\n", ks_text.join(","));
            result.config_hash = Some(config_hash(&settings));
            fs::write(&report, format!("{:#}\n", result.to_json()))?;
            for (k, r) in &result.recalls {
                println!("recall@{k} {r}");
            }
            println!("num_queries {}", result.num_queries);
            println!("excluded_queries {}", result.excluded_queries);
            println!("report {}", report.display());
            Ok(())
        }
        Command::Paramcount { config } => {
            let text = fs::read_to_string(&config)?;
            let model = TrainConfig::from_text(&text)?.model;
            println!("total_params {}", count_params(&model));
            println!("per_block_params {}", per_block_params(&model));
            println!("config_hash {}", config_hash(&text));
            Ok(())
        }
        Command::Bench { ckpt, n, warmup, seed } => {
            if n == 0 {
                return Err(usage("--n must be >= 1"));
            }
            let params = data_io::load_model(&ckpt)?;
            let stats = retrieval::bench_latency(&params, n, warmup, seed)?;
            println!("config_hash {}", config_hash(&params.config.to_text()));
            println!("mean_ms {}", stats.mean_ms);
            println!("p50_ms {}", stats.p50_ms);
            println!("p95_ms {}", stats.p95_ms);
            println!("samples {}", stats.samples);
            println!("pass_ratio {}", stats.pass_ratio);
            println!("noisy {}", stats.noisy);
            Ok(())
        }
        Command::ExportWeights { ckpt, out, count } => {
            if count == Some(0) {
                return Err(usage("--count must be >= 1"));
            }
            let params = data_io::load_model(&ckpt)?;
            let files = export_first_layer_weights(&params, &out, count)?;
            println!("images {}", files.len());
            println!("directory {}", out.display());
            Ok(())
        }
    }
}
