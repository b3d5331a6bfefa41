//! The pipeline stages behind each CLI verb, as library functions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::adapter::{classifier, AdapterBinding, Role};
use super::config::PipelineConfig;
use crate::cyclemix::{cycle_mix, track_semantics, CycleMixOutput};
use crate::data::{derive_seed, seeded, stack_rows, SceneManifest, SceneSource, SourcePair, SourcePairDataset, Split};
use crate::error::{Error, Result};
use crate::manifold::train::embed_pairs;
use crate::manifold::{
    filter_noisy_pairs, train_manifold, FilterSummary, ManifoldEpochLog, ManifoldModel, MeanTeacherConfig,
};
use crate::metrics::{
    frechet_distance, label_predict, labeled_retrieval_accuracy, modality_gap, partition_coefficient, pca_align,
    per_class_probe_breakdown, ssms, unit_rows, MetricReport, PrototypeClassifier, RawBaseline,
};
use crate::remixer::{assemble_tokens, pair_scenes, synth_scenes, train_remixer, RemixerModel, RemixerTrainOutput};
use crate::temporal::{synth_frames, ta_forward, train_ta, FrameRecord, FrameSequence, TaModel, TaTrainOutput};

/// One generation request: a single scene, or one scene per video frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<SceneManifest>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
}

pub fn write_scenes<W: Write>(records: &[SceneRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_scenes(records: &[SceneRecord], path: impl AsRef<Path>) -> Result<()> {
    write_scenes(records, BufWriter::new(File::create(path)?))
}

/// Parses JSON-Lines scene records; blank lines are skipped.
pub fn read_scenes<R: BufRead>(r: R) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.scene.is_some() == rec.frames.is_some() {
            return Err(Error::Schema {
                line: i + 1,
                message: "exactly one of `scene` and `frames` is required".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    read_scenes(BufReader::new(File::open(path)?))
}

/// Everything `synth` produces for the synthetic backend.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutputs {
    pub dataset: SourcePairDataset,
    pub frames: Vec<FrameRecord>,
    /// One single-source scene per test pair, keyed by pair id.
    pub scenes: Vec<SceneRecord>,
    /// Multi-source scenes over test pairs.
    pub mixes: Vec<SceneRecord>,
}

pub fn synth(cfg: &PipelineConfig) -> Result<SynthOutputs> {
    let world = cfg.world()?;
    let dataset = crate::data::synth_dataset(&world, cfg.world.pairs_per_class, cfg.world.noisy_fraction)?;
    let frames = synth_frames(&world, cfg.world.videos, derive_seed(cfg.seed, 201))?;
    let test: Vec<SourcePair> = dataset.split(Split::Test).into_iter().cloned().collect();
    let scenes = test
        .iter()
        .map(|p| SceneRecord {
            id: p.id.clone(),
            scene: Some(SceneManifest::new(vec![SceneSource::visual(p.visual.0.clone())])),
            frames: None,
            classes: vec![p.class_label.clone()],
        })
        .collect();
    let sources = cfg.remixer.sources_per_scene.min(world.num_classes());
    let mixes = synth_scenes(&world, &test, cfg.world.eval_multi_source_scenes, sources, 0.0, derive_seed(cfg.seed, 202))?
        .into_iter()
        .enumerate()
        .map(|(i, s)| SceneRecord {
            id: format!("mix_{i:05}"),
            scene: Some(s.scene),
            frames: None,
            classes: s.classes,
        })
        .collect();
    Ok(SynthOutputs {
        dataset,
        frames,
        scenes,
        mixes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurateReport {
    pub clean: usize,
    pub kept: usize,
    pub discarded: usize,
    pub knee_similarity: Option<f64>,
    pub teacher_trained: bool,
    pub discarded_ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CurateOutput {
    pub dataset: SourcePairDataset,
    pub report: CurateReport,
    /// The teacher fitted here when none was supplied.
    pub teacher: Option<ManifoldModel<f32>>,
}

/// Filters the noisy train pairs of `dataset` with `teacher`. Without a
/// teacher, one is first trained on the clean train pairs.
pub fn curate(cfg: &PipelineConfig, dataset: &SourcePairDataset, teacher: Option<&ManifoldModel<f32>>) -> Result<CurateOutput> {
    let noisy: Vec<SourcePair> = dataset
        .pairs
        .iter()
        .filter(|p| p.split == Split::Train && p.provenance.is_noisy())
        .cloned()
        .collect();
    let clean = dataset.pairs.iter().filter(|p| p.split == Split::Train && !p.provenance.is_noisy()).count();
    let mut trained = None;
    let teacher = match teacher {
        Some(t) => t,
        None if noisy.is_empty() => {
            let report = CurateReport {
                clean,
                kept: 0,
                discarded: 0,
                knee_similarity: None,
                teacher_trained: false,
                discarded_ids: vec![],
            };
            return Ok(CurateOutput {
                dataset: dataset.clone(),
                report,
                teacher: None,
            });
        }
        None => {
            let clean_only = SourcePairDataset::new(dataset.pairs.iter().filter(|p| !p.provenance.is_noisy()).cloned().collect());
            let mut tc = cfg.manifold.clone();
            tc.mean_teacher = MeanTeacherConfig {
                enabled: false,
                ..tc.mean_teacher
            };
            trained = Some(train_manifold(&clean_only, &cfg.scale.manifold_arch(), &tc)?.model);
            trained.as_ref().expect("just set")
        }
    };
    let outcome = filter_noisy_pairs(teacher, &noisy)?;
    let dropped: std::collections::HashSet<&str> = outcome.discarded.iter().map(|p| p.id.as_str()).collect();
    let kept_pairs = dataset.pairs.iter().filter(|p| !dropped.contains(p.id.as_str())).cloned().collect();
    let report = CurateReport {
        clean,
        kept: outcome.kept.len(),
        discarded: outcome.discarded.len(),
        knee_similarity: outcome.knee_similarity,
        teacher_trained: trained.is_some(),
        discarded_ids: outcome.discarded.iter().map(|p| p.id.clone()).collect(),
    };
    Ok(CurateOutput {
        dataset: SourcePairDataset::new(kept_pairs),
        report,
        teacher: trained,
    })
}

#[derive(Clone, Debug)]
pub struct ManifoldStageOutput {
    pub model: ManifoldModel<f32>,
    pub log: Vec<ManifoldEpochLog>,
    pub filter: Option<FilterSummary>,
}

pub fn train_manifold_stage(cfg: &PipelineConfig, dataset: &SourcePairDataset) -> Result<ManifoldStageOutput> {
    let out = train_manifold(dataset, &cfg.scale.manifold_arch(), &cfg.manifold)?;
    Ok(ManifoldStageOutput {
        model: out.model,
        log: out.log,
        filter: out.filter,
    })
}

/// Single-source scenes from the train pairs plus synthetic multi-source
/// scenes; scored on single-source scenes from the test pairs.
pub fn train_remixer_stage(
    cfg: &PipelineConfig,
    manifold: &ManifoldModel<f32>,
    dataset: &SourcePairDataset,
) -> Result<RemixerTrainOutput> {
    let world = cfg.world()?;
    let train: Vec<SourcePair> = dataset.split(Split::Train).into_iter().cloned().collect();
    let test: Vec<SourcePair> = dataset.split(Split::Test).into_iter().cloned().collect();
    let mut scenes = pair_scenes(&train, Some(&world))?;
    let known = train.iter().filter(|p| world.class_index(&p.class_label).is_some()).count();
    if cfg.remixer.multi_source_scenes > 0 && known == train.len() {
        scenes.extend(synth_scenes(
            &world,
            &train,
            cfg.remixer.multi_source_scenes,
            cfg.remixer.sources_per_scene,
            cfg.remixer.audio_fraction,
            derive_seed(cfg.seed, 203),
        )?);
    }
    let eval = pair_scenes(&test, Some(&world))?;
    train_remixer(manifold, &scenes, &eval, &cfg.scale.remixer_arch(), &cfg.remixer.train)
}

/// Trains on `frames`, or on synthetic frame sequences when none are given.
pub fn train_ta_stage(cfg: &PipelineConfig, frames: Option<&[FrameRecord]>) -> Result<TaTrainOutput> {
    let synthetic;
    let records = match frames {
        Some(f) => f,
        None => {
            synthetic = synth_frames(&cfg.world()?, cfg.world.videos, derive_seed(cfg.seed, 201))?;
            &synthetic
        }
    };
    train_ta(records, &cfg.scale.ta_arch(), &cfg.ta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub id: String,
    pub a_mix: Vec<f32>,
    pub score: f64,
    pub trace: Vec<f64>,
    pub track_semantics: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub results: Vec<GenerationResult>,
    pub config: Value,
}

fn mix_scene(
    cfg: &PipelineConfig,
    manifold: &ManifoldModel<f32>,
    remixer: &RemixerModel<f32>,
    scene: &SceneManifest,
    seed: u64,
) -> Result<(CycleMixOutput, Vec<Vec<f32>>)> {
    let seq = assemble_tokens(manifold, scene, false, &mut seeded(seed))?;
    let sources = seq.source_manifold_embeddings(manifold.arch.manifold_width);
    let mut cm = cfg.cyclemix.clone();
    cm.seed = seed;
    let out = cycle_mix(manifold, remixer, &seq, &sources, &cm)?;
    let semantics = track_semantics(manifold, &sources, false, &mut seeded(seed))?;
    Ok((out, semantics))
}

/// Runs Cycle Mix on each scene (and temporal aggregation over the frames
/// of video records). Scene `i` uses a seed derived from the Cycle Mix seed
/// and `i`, so results do not depend on batch composition order.
pub fn generate(
    cfg: &PipelineConfig,
    manifold: &ManifoldModel<f32>,
    remixer: &RemixerModel<f32>,
    ta: Option<&TaModel<f32>>,
    records: &[SceneRecord],
) -> Result<GenerationReport> {
    let generator = cfg.binding(Role::AudioGenerator);
    let mut results = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let seed = derive_seed(cfg.cyclemix.seed, i as u64);
        let mut result = match (&rec.scene, &rec.frames) {
            (Some(scene), None) => {
                let (out, semantics) = mix_scene(cfg, manifold, remixer, scene, seed)?;
                GenerationResult {
                    id: rec.id.clone(),
                    a_mix: out.best,
                    score: out.score,
                    trace: out.trace,
                    track_semantics: semantics,
                    frame_scores: None,
                    artifact: None,
                }
            }
            (None, Some(frames)) => {
                let ta = ta.ok_or_else(|| Error::Config("video records need a temporal aggregation checkpoint".into()))?;
                let mut per_frame = Vec::with_capacity(frames.len());
                let mut scores = Vec::with_capacity(frames.len());
                let mut semantics = Vec::new();
                for (f, scene) in frames.iter().enumerate() {
                    let (out, sem) = mix_scene(cfg, manifold, remixer, scene, derive_seed(seed, f as u64))?;
                    per_frame.push(out.best);
                    scores.push(out.score);
                    semantics.extend(sem);
                }
                let seq = FrameSequence::new(per_frame)?;
                let a = ta_forward(ta, &seq, &mut seeded(seed), false)?;
                GenerationResult {
                    id: rec.id.clone(),
                    a_mix: a.values,
                    score: scores.iter().sum::<f64>() / scores.len() as f64,
                    trace: vec![],
                    track_semantics: semantics,
                    frame_scores: Some(scores),
                    artifact: None,
                }
            }
            _ => {
                return Err(Error::Input(format!(
                    "record `{}` must have exactly one of `scene` and `frames`",
                    rec.id
                )))
            }
        };
        if let Some(binding @ AdapterBinding::ExternalCommand { .. }) = generator {
            let out = binding.call(Role::AudioGenerator, json!({ "id": rec.id, "a_mix": result.a_mix }))?;
            result.artifact = out.get("artifact").and_then(Value::as_str).map(str::to_string);
        }
        results.push(result);
    }
    Ok(GenerationReport {
        results,
        config: cfg.echo(),
    })
}

/// Cross-modal statistics of paired visual/audio embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub pc: f64,
    pub modality_gap: f64,
    pub probe_misclassification: f64,
    pub probe_per_class: Vec<(String, f64)>,
    pub retrieval_top1: f64,
}

pub fn diagnostics(ev: &Array2<f64>, ea: &Array2<f64>, labels: &[&str], cfg: &PipelineConfig) -> Result<Diagnostics> {
    let (ev, ea) = (unit_rows(ev), unit_rows(ea));
    let both = concatenate(Axis(0), &[ev.view(), ea.view()]).map_err(|e| Error::Numeric(e.to_string()))?;
    let both_labels: Vec<&str> = labels.iter().chain(labels).copied().collect();
    let per_class = per_class_probe_breakdown(&ev, &ea, labels, &cfg.evaluate.probe)?;
    Ok(Diagnostics {
        pc: partition_coefficient(&both, &both_labels)?,
        modality_gap: modality_gap(&ev, &ea)?,
        probe_misclassification: per_class.iter().map(|(_, m)| m).sum::<f64>() / per_class.len() as f64,
        probe_per_class: per_class,
        retrieval_top1: labeled_retrieval_accuracy(&ev, &ea, labels, labels, 1)?,
    })
}

fn raw_matrices(pairs: &[SourcePair]) -> Result<(Array2<f64>, Array2<f64>)> {
    let dims = SourcePairDataset::new(pairs.to_vec())
        .dims()
        .ok_or_else(|| Error::Precondition("no pairs to analyse".into()))?;
    let v = stack_rows(pairs.iter().map(|p| p.visual.0.as_slice()), dims.visual).mapv(f64::from);
    let a = stack_rows(pairs.iter().map(|p| p.audio.values.as_slice()), dims.audio).mapv(f64::from);
    let v = if dims.visual > dims.audio { pca_align(&v, dims.audio)? } else { v };
    let a = if dims.audio > dims.visual { pca_align(&a, dims.visual)? } else { a };
    Ok((v, a))
}

/// Manifold and width-aligned raw diagnostics over `pairs`.
pub fn manifold_and_raw(
    cfg: &PipelineConfig,
    manifold: &ManifoldModel<f32>,
    pairs: &[SourcePair],
) -> Result<(Diagnostics, Diagnostics)> {
    let labels: Vec<&str> = pairs.iter().map(|p| p.class_label.as_str()).collect();
    let (ev, ea) = embed_pairs(manifold, pairs)?;
    let m = diagnostics(&ev.mapv(f64::from), &ea.mapv(f64::from), &labels, cfg)?;
    let (rv, ra) = raw_matrices(pairs)?;
    let r = diagnostics(&rv, &ra, &labels, cfg)?;
    Ok((m, r))
}

fn synthetic_classifier(cfg: &PipelineConfig) -> Result<PrototypeClassifier> {
    let world = cfg.world()?;
    Ok(PrototypeClassifier {
        labels: world.labels(),
        prototypes: world.prototypes_a.clone(),
    })
}

fn clip_scores(binding: &AdapterBinding, results: &[&GenerationResult], gt: &[&SourcePair]) -> Result<f64> {
    let role = Role::ImageMapper;
    let mut total = 0.0;
    let doc = match binding {
        AdapterBinding::File { .. } => Some(binding.call(role, Value::Null)?),
        _ => None,
    };
    for (r, p) in results.iter().zip(gt) {
        let out = match &doc {
            Some(d) => d.get("scores").and_then(|s| s.get(&r.id)).cloned(),
            None => binding
                .call(role, json!({ "id": r.id, "audio": r.a_mix, "visual": p.visual.0 }))?
                .get("score")
                .cloned(),
        };
        total += out.and_then(|v| v.as_f64()).ok_or_else(|| Error::Adapter {
            role: role.name().into(),
            message: format!("no score for `{}`", r.id),
        })?;
    }
    Ok(total / results.len().max(1) as f64)
}

/// Scores generated embeddings against the ground-truth pairs with the same
/// ids, and reports manifold diagnostics over those pairs next to the raw
/// baseline.
pub fn evaluate(
    cfg: &PipelineConfig,
    generation: &GenerationReport,
    gt: &SourcePairDataset,
    manifold: &ManifoldModel<f32>,
) -> Result<MetricReport> {
    if generation.results.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} generated items but {} ground-truth pairs",
            generation.results.len(),
            gt.len()
        )));
    }
    let by_id: HashMap<&str, &SourcePair> = gt.pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != gt.len() {
        return Err(Error::Input("ground-truth ids are not unique".into()));
    }
    let aligned: Vec<&SourcePair> = generation
        .results
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("generated item `{}` has no ground-truth pair", r.id)))
        })
        .collect::<Result<_>>()?;
    let results: Vec<&GenerationResult> = generation.results.iter().collect();
    let classifier = classifier(cfg.require(Role::AudioClassifier)?, synthetic_classifier(cfg)?)?;
    let n = cfg.evaluate.top_n;
    let mut f1 = 0.0;
    for (r, p) in results.iter().zip(&aligned) {
        let truth = label_predict(Some(classifier.as_ref()), &p.audio.values, n)?;
        let predicted = label_predict(Some(classifier.as_ref()), &r.a_mix, n)?;
        f1 += ssms(&truth, &predicted).f1;
    }
    let f1 = f1 / results.len().max(1) as f64;
    let audio_width = aligned.first().map(|p| p.audio.values.len()).unwrap_or(0);
    let gen = stack_rows(results.iter().map(|r| r.a_mix.as_slice()), audio_width).mapv(f64::from);
    let truth = stack_rows(aligned.iter().map(|p| p.audio.values.as_slice()), audio_width).mapv(f64::from);
    let fad = frechet_distance(&gen, &truth)?;
    let cs = cfg
        .binding(Role::ImageMapper)
        .map(|b| clip_scores(b, &results, &aligned))
        .transpose()?;
    let pairs: Vec<SourcePair> = aligned.iter().map(|&p| p.clone()).collect();
    let (m, raw) = manifold_and_raw(cfg, manifold, &pairs)?;
    let report = MetricReport {
        ssms: f1,
        ssms_display: 10.0 * f1,
        fad,
        cs,
        pc: m.pc,
        retrieval_top1: m.retrieval_top1,
        modality_gap: m.modality_gap,
        probe_misclassification: m.probe_misclassification,
        raw: Some(RawBaseline {
            pc: raw.pc,
            modality_gap: raw.modality_gap,
            probe_misclassification: raw.probe_misclassification,
            retrieval_top1: raw.retrieval_top1,
        }),
        config: cfg.echo(),
    };
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pairs: usize,
    pub classes: usize,
    pub chance_retrieval: f64,
    pub manifold: Diagnostics,
    pub raw: Diagnostics,
    /// Partition coefficient of the reconstructed audio semantics of both
    /// modalities.
    pub reconstructed_pc: f64,
    pub config: Value,
}

/// Diagnostics over the test split (or every pair when there is none).
pub fn analyze(cfg: &PipelineConfig, manifold: &ManifoldModel<f32>, dataset: &SourcePairDataset) -> Result<AnalysisReport> {
    let mut pairs: Vec<SourcePair> = dataset.split(Split::Test).into_iter().cloned().collect();
    if pairs.is_empty() {
        pairs = dataset.pairs.clone();
    }
    let (m, raw) = manifold_and_raw(cfg, manifold, &pairs)?;
    let labels: Vec<&str> = pairs.iter().map(|p| p.class_label.as_str()).collect();
    let (ev, ea) = embed_pairs(manifold, &pairs)?;
    let mut rng = seeded(0);
    let rv = manifold.reconstruct_batch(&ev, false, &mut rng)?.mapv(f64::from);
    let ra = manifold.reconstruct_batch(&ea, false, &mut rng)?.mapv(f64::from);
    let both = concatenate(Axis(0), &[unit_rows(&rv).view(), unit_rows(&ra).view()]).map_err(|e| Error::Numeric(e.to_string()))?;
    let both_labels: Vec<&str> = labels.iter().chain(&labels).copied().collect();
    let classes = SourcePairDataset::new(pairs.clone()).classes().len();
    Ok(AnalysisReport {
        pairs: pairs.len(),
        classes,
        chance_retrieval: 1.0 / classes.max(1) as f64,
        manifold: m,
        raw,
        reconstructed_pc: partition_coefficient(&both, &both_labels)?,
        config: cfg.echo(),
    })
}
