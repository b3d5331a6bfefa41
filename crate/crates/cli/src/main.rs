use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ssv2a_core::data::{load_manifest, save_manifest, SourcePairDataset, Split};
use ssv2a_core::pipeline::{
    analyze, curate, evaluate, generate, load_scenes, save_scenes, synth, train_manifold_stage, train_remixer_stage,
    train_ta_stage, Checkpoint, GenerationReport, PipelineConfig,
};
use ssv2a_core::temporal::{load_frames, save_frames};
use ssv2a_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ssv2a", version, about = "Source-aware audio embedding pipeline")]
struct Cli {
    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Manifold,
    Remixer,
    Ta,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, frame sequences and scene files.
    Synth,
    /// Filter noisy pairs out of a manifest.
    Curate {
        #[arg(long)]
        dataset: PathBuf,
        /// Manifold checkpoint used as teacher; trained on the clean pairs when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        manifold: Option<PathBuf>,
        /// Frame records for the temporal stage; synthetic when omitted.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Generate audio embeddings for scene records.
    Generate {
        #[arg(long)]
        manifold: PathBuf,
        #[arg(long)]
        remixer: PathBuf,
        #[arg(long)]
        ta: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Score a generation report against ground-truth pairs.
    Evaluate {
        #[arg(long)]
        generation: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifold: PathBuf,
    },
    /// Cross-modal diagnostics of a trained manifold.
    Analyze {
        #[arg(long)]
        manifold: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this stage")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_seed(cli.seed);
    cfg.validate()?;
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    let dims = Some(cfg.scale.dims());
    match &cli.command {
        Command::Synth => {
            let s = synth(&cfg)?;
            save_manifest(&s.dataset, out.join("dataset.jsonl"))?;
            let test = SourcePairDataset::new(s.dataset.split(Split::Test).into_iter().cloned().collect());
            save_manifest(&test, out.join("test.jsonl"))?;
            save_frames(&s.frames, out.join("frames.jsonl"))?;
            save_scenes(&s.scenes, out.join("scenes.jsonl"))?;
            save_scenes(&s.mixes, out.join("mixes.jsonl"))?;
            write_json(&out.join("config.json"), &cfg)?;
        }
        Command::Curate { dataset, teacher } => {
            let data = load_manifest(dataset, dims)?;
            let teacher = teacher.as_ref().map(|p| Checkpoint::load(p)?.into_manifold()).transpose()?;
            let c = curate(&cfg, &data, teacher.as_ref())?;
            save_manifest(&c.dataset, out.join("curated.jsonl"))?;
            if let Some(t) = &c.teacher {
                Checkpoint::manifold(t, cfg.echo()).save(out.join("teacher.ckpt"))?;
            }
            write_json(&out.join("curate.json"), &json!({ "report": c.report, "config": cfg.echo() }))?;
        }
        Command::Train {
            stage,
            dataset,
            manifold,
            frames,
        } => match stage {
            Stage::Manifold => {
                let data = load_manifest(required(dataset, "dataset")?, dims)?;
                let o = train_manifold_stage(&cfg, &data)?;
                Checkpoint::manifold(&o.model, cfg.echo()).save(out.join("manifold.ckpt"))?;
                write_json(
                    &out.join("manifold_log.json"),
                    &json!({ "log": o.log, "filter": o.filter, "config": cfg.echo() }),
                )?;
            }
            Stage::Remixer => {
                let data = load_manifest(required(dataset, "dataset")?, dims)?;
                let m = Checkpoint::load(required(manifold, "manifold")?)?.into_manifold()?;
                let o = train_remixer_stage(&cfg, &m, &data)?;
                Checkpoint::remixer(&o.model, cfg.echo()).save(out.join("remixer.ckpt"))?;
                write_json(&out.join("remixer_log.json"), &json!({ "log": o.log, "config": cfg.echo() }))?;
            }
            Stage::Ta => {
                let records = frames.as_ref().map(load_frames).transpose()?;
                let o = train_ta_stage(&cfg, records.as_deref())?;
                Checkpoint::ta(&o.model, cfg.echo()).save(out.join("ta.ckpt"))?;
                write_json(&out.join("ta_log.json"), &json!({ "log": o.log, "config": cfg.echo() }))?;
            }
        },
        Command::Generate {
            manifold,
            remixer,
            ta,
            scenes,
        } => {
            let m = Checkpoint::load(manifold)?.into_manifold()?;
            let r = Checkpoint::load(remixer)?.into_remixer()?;
            let t = ta.as_ref().map(|p| Checkpoint::load(p)?.into_ta()).transpose()?;
            let records = load_scenes(scenes)?;
            let report = generate(&cfg, &m, &r, t.as_ref(), &records)?;
            write_json(&out.join("generation.json"), &report)?;
        }
        Command::Evaluate {
            generation,
            gt,
            manifold,
        } => {
            let text = fs::read_to_string(generation)?;
            let report: GenerationReport =
                serde_json::from_str(&text).map_err(|e| Error::Input(format!("bad generation report: {e}")))?;
            let truth = load_manifest(gt, dims)?;
            let m = Checkpoint::load(manifold)?.into_manifold()?;
            write_json(&out.join("metrics.json"), &evaluate(&cfg, &report, &truth, &m)?)?;
        }
        Command::Analyze { manifold, dataset } => {
            let m = Checkpoint::load(manifold)?.into_manifold()?;
            let data = load_manifest(dataset, dims)?;
            write_json(&out.join("analysis.json"), &analyze(&cfg, &m, &data)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
