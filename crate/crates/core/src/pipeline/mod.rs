//! Orchestration: configuration, checkpoints, adapters and the stage
//! functions behind the command-line verbs.

pub mod adapter;
pub mod checkpoint;
pub mod commands;
pub mod config;

pub use adapter::{AdapterBinding, Role, ADAPTER_PATH_ENV};
pub use checkpoint::{Checkpoint, ModelKind, CHECKPOINT_FORMAT};
pub use commands::{
    analyze, curate, evaluate, generate, synth, train_manifold_stage, train_remixer_stage, train_ta_stage,
    AnalysisReport, CurateOutput, CurateReport, Diagnostics, GenerationReport, GenerationResult, SceneRecord,
    SynthOutputs, load_scenes, read_scenes, save_scenes, write_scenes,
};
pub use config::{PipelineConfig, Scale, CONFIG_VERSION};
