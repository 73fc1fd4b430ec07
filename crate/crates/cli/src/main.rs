use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uvtok_cli::compare::compare_uncertainty;
use uvtok_cli::config::{apply_overrides, parse_text, RawConfig, RunConfig, OUT_DIR_ENV};
use uvtok_cli::pipeline::{run_loaded, Model};
use uvtok_cli::spectrum::{run_spectrum, SpectrumSweep};
use uvtok_cli::stats_cmd::run_stats;
use uvtok_cli::validate::{run_validation, InjectedFault};
use uvtok_cli::{exit, exit_code_for};
use uvtok_core::encoder::{init_params, save_checkpoint, LayerRange};
use uvtok_core::netpbm::read_image;
use uvtok_core::synth::synthetic_image;
use uvtok_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "uvtok", version, about = "Adversarial uncertainty masks for visual tokens of a toy ViT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set attack.k=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `run.output_dir`).
    #[arg(long, env = OUT_DIR_ENV, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (`run.parallelism`).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Global seed (`run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Encoder checkpoint (`model.checkpoint`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized encoder checkpoint.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        /// Initialization seed (`model.seed`).
        #[arg(long)]
        model_seed: Option<u64>,
    },
    /// Attack, build uncertainty maps and masks, and run the masked encoder.
    Pipeline {
        images: Vec<PathBuf>,
        /// Also process N generated test images.
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
        /// Leave the report timestamp empty.
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Run the self-check suite; exits 1 if any property fails.
    Validate {
        #[arg(long, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
    /// Rank-correlate adversarial uncertainty with MC-dropout variance.
    CompareUncertainty {
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
        /// Correlate the adversarial map with itself (wiring check).
        #[arg(long, hide = true)]
        self_compare: bool,
    },
    /// Statistics over a JSON input file.
    Stats {
        #[arg(value_parser = ["spearman", "wilcoxon", "chair", "classification", "binned"])]
        test: String,
        #[arg(long)]
        input: PathBuf,
        /// Where to write the CSV table (binned only).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Deviation spectra, entropy-bound gaps and moment probes.
    Spectrum {
        /// Image to probe; a generated one when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        synthetic_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        budgets: Vec<f64>,
        /// Hidden-state indices (0 = embeddings), e.g. `0-4`.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

enum Failure {
    Config(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut raw: RawConfig = match &common.config {
        Some(path) => {
            parse_text(&std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)?
        }
        None => RawConfig::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(dir) = &common.out_dir {
        overrides.push(format!("run.output_dir={}", dir.display()));
    }
    if let Some(p) = common.parallelism {
        overrides.push(format!("run.parallelism={p}"));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(c) = &common.checkpoint {
        overrides.push(format!("model.checkpoint={}", c.display()));
    }
    overrides.extend_from_slice(extra);
    apply_overrides(&mut raw, &overrides)?;
    RunConfig::resolve(&raw).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

fn gather_images(paths: &[PathBuf], synthetic: usize, model: &Model) -> (Vec<PathBuf>, Vec<Result<Tensor>>) {
    let mut names: Vec<PathBuf> = paths.to_vec();
    let mut images: Vec<Result<Tensor>> = paths.iter().map(read_image).collect();
    for i in 0..synthetic {
        names.push(PathBuf::from(format!("synthetic-{i}")));
        images.push(synthetic_image(&model.config, i as u64));
    }
    (names, images)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn unix_time() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

fn run(cli: Cli) -> std::result::Result<u8, Failure> {
    let extra = match &cli.command {
        Command::InitModel { model_seed: Some(s), .. } => vec![format!("model.seed={s}")],
        _ => vec![],
    };
    let rc = resolve(&cli.common, &extra).map_err(Failure::Config)?;
    let model = Model::load(&rc)?;
    let out = rc.output_dir.clone();

    match cli.command {
        Command::InitModel { out: path, .. } => {
            let params = init_params(&rc.encoder, rc.model_seed)?;
            save_checkpoint(&path, &rc.encoder, &params)?;
            println!("wrote {} ({} parameters)", path.display(), params.num_parameters());
            Ok(exit::SUCCESS)
        }
        Command::Pipeline { images, synthetic, no_timestamp } => {
            let (names, loaded) = gather_images(&images, synthetic, &model);
            if names.is_empty() {
                return Err(Failure::Config(Error::Config("no images given".into())));
            }
            let report = run_loaded(&rc, &model, &names, loaded, &out, (!no_timestamp).then(unix_time))?;
            write(&out.join("report.json"), &report.to_json())?;
            let a = &report.aggregate;
            println!("{} ok, {} failed; report at {}", a.images_ok, a.images_failed, out.join("report.json").display());
            Ok(if report.all_failed() { exit::FAILURE } else { exit::SUCCESS })
        }
        Command::Validate { inject_fault } => {
            let report = run_validation(&model, inject_fault);
            for p in &report.properties {
                println!("{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
            }
            write(&out.join("validation.json"), &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"))?;
            Ok(if report.passed { exit::SUCCESS } else { exit::FAILURE })
        }
        Command::CompareUncertainty { images, synthetic, self_compare } => {
            let (names, loaded) = gather_images(&images, synthetic, &model);
            if names.is_empty() {
                return Err(Failure::Config(Error::Config("no images given".into())));
            }
            let report = compare_uncertainty(&rc, &model, &names, loaded, self_compare)?;
            write(&out.join("compare.json"), &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"))?;
            match report.median_rho {
                Some(m) => println!(
                    "median rho {m:.4}; adversarial {:.2}s, dropout {:.2}s",
                    report.adversarial_seconds, report.dropout_seconds
                ),
                None => println!("no defined correlations"),
            }
            Ok(if report.all_failed() { exit::FAILURE } else { exit::SUCCESS })
        }
        Command::Stats { test, input, csv } => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", input.display()))))?;
            let result = run_stats(&test, &text)?;
            println!("{}", serde_json::to_string_pretty(&result.json).expect("serializes"));
            if let (Some(path), Some(table)) = (csv, result.csv) {
                write(&path, &table)?;
            }
            Ok(exit::SUCCESS)
        }
        Command::Spectrum { image, synthetic_seed, budgets, layers, samples } => {
            let img = match image {
                Some(p) => read_image(p)?,
                None => synthetic_image(&model.config, synthetic_seed)?,
            };
            let layers: Vec<usize> = match layers {
                None => (0..=model.config.num_layers).collect(),
                Some(s) => s.parse::<LayerRange>().map_err(Failure::Config)?.iter().collect(),
            };
            if let Some(&bad) = layers.iter().find(|&&l| l > model.config.num_layers) {
                return Err(Failure::Config(Error::Config(format!(
                    "layer {bad} outside 0..={}",
                    model.config.num_layers
                ))));
            }
            let sweep = SpectrumSweep { budgets, layers, num_samples: samples, seed: rc.seed };
            let summary = run_spectrum(&model, &img, &sweep)?;
            write(&out.join("spectrum.json"), &(serde_json::to_string_pretty(&summary).expect("serializes") + "\n"))?;
            write(&out.join("spectrum.csv"), &summary.to_csv())?;
            println!("{} sites; min entropy gap {:.3e}", summary.sites.len(), summary.min_entropy_gap);
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("uvtok: {e}");
            ExitCode::from(exit::CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("uvtok: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
