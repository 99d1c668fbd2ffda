//! Command-line front end for the face generation/editing pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use faceforge_core::condition::ConditionImage;
use faceforge_core::pipeline::{
    cmd_build_dataset, cmd_edit, cmd_evaluate, cmd_generate, cmd_train, default_registry,
    write_synthetic_source, EditRequest, GenerationRequest, Modality, MuseTask, RunConfig,
    TrainOutcome, TrainStage, VqKind,
};

#[derive(Parser)]
#[command(
    name = "faceforge",
    about = "Text-to-condition-to-face generation, editing, dataset building and evaluation",
    version
)]
struct Cli {
    /// Path to the run configuration (JSON).
    #[arg(long, global = true, default_value = "configs/toy.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory that holds checkpoints.
    #[arg(long, default_value = "runs/ckpts")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the image tokenizer for one image kind.
    TrainVq {
        #[command(flatten)]
        train: TrainArgs,
        /// face, mask or landmarks
        #[arg(long)]
        kind: String,
    },
    /// Train the masked condition-grid transformer.
    TrainMuse {
        #[command(flatten)]
        train: TrainArgs,
        /// base, segmentation or landmarks
        #[arg(long)]
        task: String,
        /// Branch from an existing checkpoint (e.g. the base model).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the control branch of the conditional diffusion model.
    TrainControlnet {
        #[command(flatten)]
        train: TrainArgs,
        /// mask or landmarks
        #[arg(long)]
        modality: String,
    },
    /// Generate a condition and a face image from text.
    Generate {
        #[arg(long, default_value = "runs/ckpts")]
        ckpts: PathBuf,
        #[arg(long, default_value = "runs/generate")]
        out: PathBuf,
        #[arg(long)]
        prompt: String,
        /// mask or landmarks
        #[arg(long)]
        modality: String,
        /// Supply a condition image and skip stage 1.
        #[arg(long)]
        condition: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diffusion sampling steps override.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Masked-decoding steps override.
        #[arg(long)]
        decode_steps: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// ddim or ddpm (defaults to the config's sampler).
        #[arg(long)]
        sampler: Option<String>,
    },
    /// Edit a face: inpaint the condition tokens, then a single-pass edit.
    Edit {
        #[arg(long, default_value = "runs/ckpts")]
        ckpts: PathBuf,
        #[arg(long, default_value = "runs/edit")]
        out: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        condition: PathBuf,
        /// mask or landmarks
        #[arg(long)]
        modality: String,
        #[arg(long)]
        prompt: String,
        /// Edit strength: 0 reconstructs, 1 is the full target prompt.
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        /// PNG at token resolution; nonzero pixels mark the edit region.
        #[arg(long)]
        region: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build or extend the corpus from a raw source directory.
    BuildDataset {
        /// Directory of {id}.png plus {id}.json (anchors and attributes).
        #[arg(long)]
        source: PathBuf,
    },
    /// Compute metrics for generated outputs paired with the corpus by id.
    Evaluate {
        /// Directory of {id}.png (and optional {id}-seg.png,
        /// {id}-landmarks.json) files.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Write a synthetic raw source directory (demo input for
    /// build-dataset).
    SynthSource {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        raw_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_train(outcome: &TrainOutcome) {
    println!(
        "checkpoint {} at step {} ({} new step(s){})",
        outcome.checkpoint.display(),
        outcome.final_step,
        outcome.steps_run,
        match outcome.final_loss {
            Some(l) => format!(", last loss {l:.5}"),
            None => String::new(),
        }
    );
    println!("hash {}", outcome.hash);
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::from_file(&cli.config)?;
    let registry = default_registry(&cfg);
    match cli.command {
        Command::TrainVq { train, kind } => {
            let stage = TrainStage::Vq(VqKind::parse(&kind)?);
            print_train(&cmd_train(&cfg, stage, &train.out, None, &registry)?);
        }
        Command::TrainMuse { train, task, from } => {
            let stage = TrainStage::Muse(MuseTask::parse(&task)?);
            print_train(&cmd_train(&cfg, stage, &train.out, from.as_deref(), &registry)?);
        }
        Command::TrainControlnet { train, modality } => {
            let stage = TrainStage::ControlNet(Modality::parse(&modality)?);
            print_train(&cmd_train(&cfg, stage, &train.out, None, &registry)?);
        }
        Command::Generate {
            ckpts,
            out,
            prompt,
            modality,
            condition,
            seed,
            steps,
            cfg_scale,
            decode_steps,
            temperature,
            sampler,
        } => {
            let req = GenerationRequest {
                prompt,
                modality: Modality::parse(&modality)?,
                condition,
                seed,
                cfg_scale,
                sample_steps: steps,
                decode_steps,
                temperature,
                sampler,
            };
            let output = cmd_generate(&cfg, &ckpts, &req, &out, &registry)?;
            for path in &output.provenance.outputs {
                println!("wrote {path}");
            }
        }
        Command::Edit {
            ckpts,
            out,
            image,
            condition,
            modality,
            prompt,
            alpha,
            region,
            seed,
        } => {
            let modality = Modality::parse(&modality)?;
            let region_img = ConditionImage::load_png(&region)?;
            let edit_region: Vec<bool> = region_img
                .pixels()
                .chunks(3)
                .map(|px| px.iter().any(|&v| v > 127))
                .collect();
            let req = EditRequest {
                image,
                condition,
                modality,
                prompt,
                alpha,
                edit_region,
                seed,
            };
            let output = cmd_edit(&cfg, &ckpts, &req, &out, &registry)?;
            for path in &output.provenance.outputs {
                println!("wrote {path}");
            }
        }
        Command::BuildDataset { source } => {
            let outcome = cmd_build_dataset(&cfg, &source)?;
            println!(
                "processed {} record(s), skipped {} existing, rejected {} (blur {}, pose {}, occlusion {})",
                outcome.processed,
                outcome.skipped_existing,
                outcome.rejected.total() - outcome.rejected.kept,
                outcome.rejected.blur,
                outcome.rejected.extreme_pose,
                outcome.rejected.occlusion
            );
            println!("manifest: {}", outcome.manifest_path.display());
        }
        Command::Evaluate { generated, out } => {
            let outcome = cmd_evaluate(&cfg, &generated, &out, &registry)?;
            print!("{}", outcome.table);
            println!("csv: {}", outcome.csv_path.display());
        }
        Command::SynthSource {
            out,
            count,
            raw_size,
            seed,
        } => {
            write_synthetic_source(&out, count, raw_size, seed)?;
            println!("wrote {count} synthetic record(s) to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
