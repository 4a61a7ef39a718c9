//! `iag`: generate data, train, evaluate, run ablations and verify
//! gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use iag_core::backbone::{BackboneConfig, ModelParams};
use iag_core::baselines::{Variant, VariantConfig};
use iag_core::data::{generate_dataset, load_dataset, GeneratorParams};
use iag_core::evaluation::{emit_report, evaluate, load_report, MetricsReport};
use iag_core::experiment::{run_variant, subset_training_set, VariantScore};
use iag_core::gradcheck::{run_gradcheck, GradCheckConfig};
use iag_core::separation::SeparationCost;
use iag_core::training::{train, TrainConfig};
use iag_core::Error;

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "iag", version, about = "Attention-guided MIL training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (volumes + manifest).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainCmd),
    /// Evaluate a model file on a dataset directory.
    Eval(EvalArgs),
    /// Train and evaluate one or more variants over several seeds.
    Ablate(AblateArgs),
    /// Check analytic gradients of the full objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-read an emitted report and print its summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    num: usize,
    #[arg(long, default_value_t = 0.5)]
    pos_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    labeled_frac: f64,
    /// Volume size as D,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [12, 24, 24])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 20.0)]
    beta: f64,
    /// Initial learning rate (default: 1e-5, or 1e-2 for global_only).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.99)]
    decay_gamma: f64,
    /// Iterations between decays (default: iters / 100).
    #[arg(long)]
    decay_interval: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Heavy-ball momentum (default: 0.9, or 0 for global_only).
    #[arg(long)]
    momentum: Option<f64>,
    /// Clip the gradient to this global L2 norm (default: 1000, none for
    /// global_only).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long, conflicts_with = "clip_norm")]
    no_clip: bool,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 1.0)]
    lambda_const: f64,
    /// Feature channels C.
    #[arg(long)]
    width: Option<usize>,
    /// Number of conv layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, default_value = "l1")]
    separation_cost: SeparationCost,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        self.config_for(self.variant)
    }

    /// Flags given on the command line override the variant's defaults.
    fn config_for(&self, variant: Variant) -> TrainConfig {
        let d = TrainConfig::for_variant(variant);
        TrainConfig {
            beta: self.beta,
            lr: self.lr.unwrap_or(d.lr),
            decay_gamma: self.decay_gamma,
            decay_interval: self.decay_interval,
            max_iters: self.iters.unwrap_or(d.max_iters),
            seed: self.seed,
            slice_interval_range: d.slice_interval_range,
            variant: VariantConfig {
                variant,
                lambda_const: self.lambda_const,
            },
            momentum: self.momentum.unwrap_or(d.momentum),
            clip_norm: if self.no_clip { None } else { self.clip_norm.or(d.clip_norm) },
            backbone: BackboneConfig {
                depth: self.layers.unwrap_or(d.backbone.depth),
                width: self.width.unwrap_or(d.backbone.width),
                kernel: self.kernel.unwrap_or(d.backbone.kernel),
            },
            separation_cost: self.separation_cost,
        }
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV to write.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report directory (summary.json + cases.csv).
    #[arg(long)]
    out: PathBuf,
    /// Variant the model was trained as; selects pooling and decoding.
    #[arg(long, default_value = "full")]
    variant: Variant,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Test dataset directory.
    #[arg(long)]
    test: PathBuf,
    /// Variants to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    variants: Vec<Variant>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Keep only this many voxel-labeled positives.
    #[arg(long)]
    labeled_count: Option<usize>,
    /// Keep only this many image-label-only positives.
    #[arg(long)]
    unlabeled_count: Option<usize>,
    /// Output directory: one report per run plus `ablation.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 4)]
    width: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IAG_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage, 2 io / format, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) => 1,
        Error::Shape { .. } | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::NonFinite { .. } | Error::Degenerate { .. } => 3,
    }
}

fn log_config<T: serde::Serialize>(command: &str, config: &T) -> iag_core::Result<()> {
    info!("{command} config: {}", serde_json::to_string(config)?);
    Ok(())
}

fn run(command: Command) -> iag_core::Result<()> {
    match command {
        Command::GenData(a) => {
            if a.dims.len() != 3 {
                return Err(Error::Invalid(format!("--dims takes D,H,W, got {} values", a.dims.len())));
            }
            let params = GeneratorParams {
                num: a.num,
                pos_frac: a.pos_frac,
                labeled_frac: a.labeled_frac,
                dims: [a.dims[0], a.dims[1], a.dims[2]],
                seed: a.seed,
            };
            log_config("gen-data", &params)?;
            let manifest = generate_dataset(&params, &a.out)?;
            println!(
                "wrote {} volumes ({} positive, {} voxel-labeled) to {}",
                manifest.samples.len(),
                manifest.positives(),
                manifest.labeled(),
                a.out.display()
            );
            Ok(())
        }
        Command::Train(a) => {
            let config = a.train.config();
            log_config("train", &config)?;
            let (_, samples) = load_dataset(&a.data)?;
            let state = train(&samples, &config)?;
            state.params.save(&a.out)?;
            if let Some(h) = &a.history {
                state.write_history_csv(h)?;
            }
            if state.skipped_degenerate > 0 {
                warn!("{} iterations skipped the unlabeled term on a flat attention field", state.skipped_degenerate);
            }
            println!(
                "trained {} iterations ({} unlabeled-branch updates); model written to {}",
                state.iteration,
                state.unlabeled_branch_count,
                a.out.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let config = serde_json::json!({
                "model": a.model,
                "data": a.data,
                "variant": a.variant,
            });
            log_config("eval", &config)?;
            let params = ModelParams::load(&a.model)?;
            let (_, samples) = load_dataset(&a.data)?;
            let vc = VariantConfig::new(a.variant);
            let report = evaluate(&params, &samples, vc.loss_paths().pool, vc.segmentation_rule(), config)?;
            emit_report(&report, &a.out)?;
            println!("{}", report.table_row());
            Ok(())
        }
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => {
            let config = GradCheckConfig {
                seed: a.seed,
                step: a.step,
                backbone: BackboneConfig {
                    width: a.width,
                    ..GradCheckConfig::default().backbone
                },
                ..Default::default()
            };
            log_config("gradcheck", &config)?;
            let r = run_gradcheck(&config)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if r.max_rel_error >= GRADCHECK_TOLERANCE || r.nonsmooth > 0 {
                return Err(Error::NonFinite {
                    iteration: 0,
                    detail: format!(
                        "gradient check failed: max relative error {:.3e} at {}[{}], {} unscored entries",
                        r.max_rel_error, r.worst_param, r.worst_index, r.nonsmooth
                    ),
                });
            }
            Ok(())
        }
        Command::Report(a) => {
            let report = load_report(&a.dir)?;
            print_report(&a.dir, &report);
            Ok(())
        }
    }
}

fn print_report(dir: &Path, report: &MetricsReport) {
    println!("{}: {} cases", dir.display(), report.cases.len());
    println!("{}", report.table_row());
    let c = report.classification.confusion;
    println!("TP {} FN {} TN {} FP {}", c.tp, c.fn_, c.tn, c.fp);
}

fn ablate(a: AblateArgs) -> iag_core::Result<()> {
    if a.seeds.is_empty() || a.variants.is_empty() {
        return Err(Error::Invalid("ablate needs at least one seed and one variant".into()));
    }
    let configs: Vec<TrainConfig> = a.variants.iter().map(|&v| a.train.config_for(v)).collect();
    log_config(
        "ablate",
        &serde_json::json!({
            "train": configs,
            "variants": a.variants,
            "seeds": a.seeds,
            "labeled_count": a.labeled_count,
            "unlabeled_count": a.unlabeled_count,
        }),
    )?;
    let (_, train_all) = load_dataset(&a.data)?;
    let (_, test) = load_dataset(&a.test)?;
    let train_set = subset_training_set(&train_all, a.labeled_count, a.unlabeled_count)?;
    fs::create_dir_all(&a.out)?;

    let mut scores: Vec<VariantScore> = Vec::new();
    for &seed in &a.seeds {
        for c in &configs {
            let config = TrainConfig { seed, ..c.clone() };
            let outcome = run_variant(&train_set, &test, &config)?;
            let score = VariantScore::of(&config, &outcome);
            emit_report(&outcome.report, &a.out.join(format!("{}_seed{seed}", score.variant)))?;
            println!("seed {seed} {:<13} {}", score.variant.to_string(), outcome.report.table_row());
            scores.push(score);
        }
    }
    println!("mean test DSC across seeds:");
    for v in &a.variants {
        let dscs: Vec<f64> = scores.iter().filter(|s| s.variant == *v).filter_map(|s| s.mean_dsc).collect();
        let mean = if dscs.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.2}", 100.0 * dscs.iter().sum::<f64>() / dscs.len() as f64)
        };
        println!("  {:<13} {mean}", v.to_string());
    }
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&scores)?)?;
    Ok(())
}
