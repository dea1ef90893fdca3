//! `ciml`: train, evaluate, and interrogate the code-exchange segmentation
//! ensemble from the command line.
//!
//! Exit codes: 0 success, 1 caller mistake (bad flags caught by the run, bad
//! config, mismatched dataset), 2 runtime failure (I/O, numerics), 64 usage
//! errors caught by the argument parser.

mod demo;
mod png;
mod viz;

use ciml_core::config::{FileConfig, RegionSet};
use ciml_core::data::{generate_synthetic_volumes, Dataset, SyntheticSpec, WEAK_STEP};
use ciml_core::oracle::{
    decomposition_terms, optimal_readout, optimal_reference, random_readout, random_reference,
    verify_bound_directions, DiscreteBayesNet, NetSizes,
};
use ciml_core::training::{append_records, load_all, Trainer};
use ciml_core::{CimlError, Result};
use clap::{Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ciml", version, about = "multimodal segmentation with mutual code exchange")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact checks of the information decomposition behind the training loss
    Oracle {
        #[command(subcommand)]
        cmd: OracleCmd,
    },
    /// Small self-contained studies
    Demo {
        #[command(subcommand)]
        cmd: DemoCmd,
    },
    /// Synthetic dataset generation
    Synth {
        #[command(subcommand)]
        cmd: SynthCmd,
    },
    /// Train the ensemble described by a config file on a stored dataset
    Train(TrainCmd),
    /// Score a checkpoint on a stored dataset
    Eval(EvalCmd),
    /// Render where each sender's code pushed a region's score
    VizCam(VizCamCmd),
    /// Average sender contribution shares over a dataset
    VizWeights(VizWeightsCmd),
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Check the decomposition identity and both bound directions on random
    /// discrete models
    Verify {
        /// How many random models to draw
        #[arg(long, default_value_t = 50)]
        nets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Two-shape 2D study: a penalized code keeps only what the auxiliary
    /// image adds
    Shapes(ShapesCmd),
}

#[derive(clap::Args)]
struct ShapesCmd {
    /// Directory for the dataset, checkpoint, log, and figures
    #[arg(long, default_value = "shapes_demo")]
    out: PathBuf,
    /// Number of image pairs
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training epochs
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    /// Draw the image pairs and store them under OUT/dataset
    #[arg(long)]
    generate: bool,
    /// Fit the two-pathway model on the training split
    #[arg(long)]
    train: bool,
    /// Report held-out overlap and localization scores
    #[arg(long)]
    evaluate: bool,
    /// Write PNG panels for a few held-out pairs
    #[arg(long)]
    export_figures: bool,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Draw nested-ellipsoid volumes where chosen modalities carry each
    /// region's boundary contrast
    Generate(SynthGenCmd),
}

#[derive(clap::Args)]
struct SynthGenCmd {
    /// Directory to write the dataset into
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    cases: usize,
    /// Cubic edge length; must be a multiple of 16
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    modalities: usize,
    /// Comma-separated contrast carrier per region, outermost first
    /// (default: modalities 1,2,3 modulo the modality count)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    contrast: Option<Vec<usize>>,
    /// Boundary step in non-carrier modalities (default keeps the 3:1
    /// contrast; near-zero makes regions visible only to their carrier)
    #[arg(long, default_value_t = WEAK_STEP)]
    weak_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainCmd {
    /// Run configuration (.toml or .json)
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (holds manifest.json)
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint and training log
    #[arg(long)]
    out: PathBuf,
    /// Override the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count from the config file
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(clap::Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Emit the summary as JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct VizCamCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the PNG maps and weights.json
    #[arg(long)]
    out: PathBuf,
    /// Explain only this case id
    #[arg(long)]
    case: Option<String>,
}

#[derive(clap::Args)]
struct VizWeightsCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the bar chart and weights.json
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("CIML-ERR: {msg}");
        std::process::exit(i32::from(e.exit_code()));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Oracle { cmd: OracleCmd::Verify { nets, seed } } => oracle_verify(nets, seed),
        Cmd::Demo { cmd: DemoCmd::Shapes(args) } => demo::run(&demo::ShapesArgs {
            out: args.out,
            n: args.n,
            image_size: args.image_size,
            seed: args.seed,
            epochs: args.epochs,
            generate: args.generate,
            train: args.train,
            evaluate: args.evaluate,
            export_figures: args.export_figures,
        }),
        Cmd::Synth { cmd: SynthCmd::Generate(args) } => synth_generate(&args),
        Cmd::Train(args) => train(&args),
        Cmd::Eval(args) => eval(&args),
        Cmd::VizCam(args) => viz::run_cam(&viz::CamArgs {
            checkpoint: args.checkpoint,
            data: args.data,
            out: args.out,
            case: args.case,
        }),
        Cmd::VizWeights(args) => viz::run_weights(&viz::WeightsArgs {
            checkpoint: args.checkpoint,
            data: args.data,
            out: args.out,
        }),
    }
}

/// A checkpointed model only makes sense against a dataset that uses the
/// same modality and region vocabulary, in the same order.
pub(crate) fn check_vocab(trainer: &Trainer, ds: &Dataset) -> Result<()> {
    if trainer.modalities.names() != ds.manifest.modalities.as_slice() {
        return Err(CimlError::Validation(format!(
            "checkpoint modalities {:?} do not match dataset modalities {:?}",
            trainer.modalities.names(),
            ds.manifest.modalities
        )));
    }
    if trainer.regions.decls() != ds.manifest.regions {
        return Err(CimlError::Validation(
            "checkpoint regions do not match the dataset's region declarations".into(),
        ));
    }
    Ok(())
}

fn oracle_verify(nets: usize, seed: u64) -> Result<()> {
    if nets == 0 {
        return Err(CimlError::Validation("--nets must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual: f64 = 0.0;
    let mut max_tight_upper: f64 = 0.0;
    let mut max_tight_lower: f64 = 0.0;
    let mut min_rand_upper = f64::INFINITY;
    let mut min_rand_lower = f64::INFINITY;
    for _ in 0..nets {
        let dim = |rng: &mut ChaCha8Rng| rng.random_range(2..=4usize);
        let sizes = NetSizes {
            x: dim(&mut rng),
            x1: dim(&mut rng),
            x2: dim(&mut rng),
            y1: dim(&mut rng),
            k2: dim(&mut rng),
        };
        let net = DiscreteBayesNet::random(&mut rng, sizes)?;
        let terms = decomposition_terms(&net)?;
        max_residual = max_residual.max(terms.residual().abs());
        let tight =
            verify_bound_directions(&net, &optimal_reference(&net)?, &optimal_readout(&net)?)?;
        max_tight_upper = max_tight_upper.max(tight.upper_gap().abs());
        max_tight_lower = max_tight_lower.max(tight.lower_gap().abs());
        let loose = verify_bound_directions(
            &net,
            &random_reference(&mut rng, sizes),
            &random_readout(&mut rng, sizes),
        )?;
        min_rand_upper = min_rand_upper.min(loose.upper_gap());
        min_rand_lower = min_rand_lower.min(loose.lower_gap());
    }
    println!("information decomposition on {nets} random discrete models (seed {seed})");
    println!("  max |I1 - (I2+I3+I4)|      {max_residual:10.3e}");
    println!("  max |tight upper gap|      {max_tight_upper:10.3e}");
    println!("  max |tight lower gap|      {max_tight_lower:10.3e}");
    println!("  min random upper gap       {min_rand_upper:10.3e}");
    println!("  min random lower gap       {min_rand_lower:10.3e}");
    let tol = 1e-9;
    if max_residual > tol || max_tight_upper > tol || max_tight_lower > tol {
        return Err(CimlError::Numeric(format!(
            "decomposition identity or tightness violated beyond {tol:.0e}"
        )));
    }
    if min_rand_upper < -tol || min_rand_lower < -tol {
        return Err(CimlError::Numeric(format!(
            "a surrogate bound pointed the wrong way beyond {tol:.0e}"
        )));
    }
    println!("all identities hold and both bounds point the right way");
    Ok(())
}

fn synth_generate(args: &SynthGenCmd) -> Result<()> {
    let m = args.modalities;
    if m == 0 {
        return Err(CimlError::Validation("--modalities must be at least 1".into()));
    }
    let contrast = args
        .contrast
        .clone()
        .unwrap_or_else(|| vec![1 % m, 2 % m, 3 % m]);
    let spec = SyntheticSpec {
        n_cases: args.cases,
        size: args.size,
        n_modalities: m,
        contrast_modality: contrast,
        weak_step: args.weak_step,
        seed: args.seed,
    };
    let manifest = generate_synthetic_volumes(&args.out, &spec)?;
    println!(
        "wrote {} cases of {}^3 voxels x {} modalities to {}",
        manifest.cases.len(),
        args.size,
        m,
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainCmd) -> Result<()> {
    // A missing or malformed config is the caller's mistake, not a runtime
    // failure.
    let cfg = FileConfig::load(&args.config).map_err(|e| match e {
        CimlError::Io { path, message } => CimlError::Validation(format!("{path}: {message}")),
        other => other,
    })?;
    cfg.validate_sections()?;
    let ds = Dataset::open(&args.data)?;
    let regions = RegionSet::new(&ds.manifest.regions)?;
    let (modalities, assignment) = cfg.resolve_assignment(&regions)?;
    if modalities.names() != ds.manifest.modalities.as_slice() {
        return Err(CimlError::Validation(format!(
            "config modalities {:?} do not match dataset modalities {:?}",
            modalities.names(),
            ds.manifest.modalities
        )));
    }
    let mut train_cfg = cfg.training.clone();
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        train_cfg.max_epochs = epochs;
    }
    let data = load_all(&ds)?;
    let mut trainer =
        Trainer::new(cfg.architecture.clone(), train_cfg, modalities, regions, assignment)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CimlError::io(&args.out, &e))?;
    let log = args.out.join("train_log.jsonl");
    match std::fs::remove_file(&log) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(CimlError::io(&log, &e)),
    }
    println!(
        "{} networks, {} regions, {} cases; training to epoch {}",
        trainer.modalities.len(),
        trainer.regions.len(),
        data.len(),
        trainer.train.max_epochs
    );
    while trainer.epoch < trainer.train.max_epochs {
        let records = trainer.train_epoch(&data)?;
        append_records(&log, &records)?;
        let mut sums = [0.0f64; 4]; // ce, dice, kl, total
        let mut count = 0usize;
        for rec in &records {
            for b in &rec.per_segmentor {
                sums[0] += b.ce;
                sums[1] += b.dice_loss;
                sums[2] += b.kl;
                sums[3] += b.total;
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let lr = records.last().map_or(0.0, |r| r.lr);
        println!(
            "epoch {:>3}/{}  lr {:.3e}  loss {:.4} (ce {:.4}  dice {:.4}  kl {:.4})",
            trainer.epoch,
            trainer.train.max_epochs,
            lr,
            sums[3] / n,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n
        );
    }
    let ckpt = args.out.join("model.ckpt");
    trainer.save_checkpoint(&ckpt)?;
    println!("saved checkpoint to {}", ckpt.display());
    Ok(())
}

fn eval(args: &EvalCmd) -> Result<()> {
    let mut trainer = Trainer::from_checkpoint(&args.checkpoint)?;
    let ds = Dataset::open(&args.data)?;
    check_vocab(&trainer, &ds)?;
    let data = load_all(&ds)?;
    let summary = trainer.evaluate_cases(&data)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary)
                .map_err(|e| CimlError::Numeric(format!("summary serialization failed: {e}")))?
        );
        return Ok(());
    }
    println!("{:<12} {:>8} {:>8}", "region", "dice", "hd95");
    for r in &summary.per_region {
        let hd = r.mean_hd95.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!("{:<12} {:>8.4} {:>8}", r.region, r.mean_dice, hd);
    }
    println!("{:<12} {:>8.4}", "mean", summary.mean_dice);
    Ok(())
}
