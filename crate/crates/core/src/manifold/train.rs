//! Alternating manifold training, Mean-Teacher supervision and noisy-pair
//! filtering.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kneedle::{kneedle_knee, CurveShape};
use super::loss::{build_fold, CcmrConfig, DEFAULT_LAMBDA1};
use super::{ManifoldArch, ManifoldModel, CLAP_PREFIX, CLIP_PREFIX, LOG_TEMPERATURE, RECON_PREFIX};
use crate::data::{cosine_sim, derive_seed, seeded, stack_rows, SourcePair, SourcePairDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::labeled_retrieval_accuracy;
use crate::nn::{AdamW, AdamWConfig, Graph, ParamSet, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanTeacherConfig {
    pub enabled: bool,
    pub ema_beta: f64,
    pub consistency_weight: f64,
    pub filter_enabled: bool,
    /// Epochs for fitting the teacher on clean pairs; `None` reuses `epochs`.
    pub teacher_epochs: Option<usize>,
}

impl Default for MeanTeacherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ema_beta: 0.999,
            consistency_weight: 0.1,
            filter_enabled: true,
            teacher_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// `None` trains without the CCMR mask.
    pub ccmr: Option<CcmrConfig>,
    pub lambda1: f64,
    pub mean_teacher: MeanTeacherConfig,
    pub seed: u64,
}

impl Default for ManifoldTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            ccmr: Some(CcmrConfig::default()),
            lambda1: DEFAULT_LAMBDA1,
            mean_teacher: MeanTeacherConfig::default(),
            seed: 0,
        }
    }
}

impl ManifoldTrainConfig {
    /// Settings for the small synthetic world: 100 epochs at lr 1e-3.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldEpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub recon: f64,
    pub kl: f64,
    pub consistency: f64,
    pub retrieval_top1: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub kept: usize,
    pub discarded: usize,
    pub knee_similarity: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ManifoldTrainOutput {
    pub model: ManifoldModel<f32>,
    pub teacher: Option<ManifoldModel<f32>>,
    pub log: Vec<ManifoldEpochLog>,
    pub filter: Option<FilterSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SourcePair>,
    pub discarded: Vec<SourcePair>,
    /// Similarity of the last kept pair when a knee was found.
    pub knee_similarity: Option<f64>,
}

impl FilterOutcome {
    pub fn summary(&self) -> FilterSummary {
        FilterSummary {
            kept: self.kept.len(),
            discarded: self.discarded.len(),
            knee_similarity: self.knee_similarity,
        }
    }
}

/// `teacher <- beta * teacher + (1 - beta) * student`, tensor by tensor.
pub fn ema_update<F: Real>(teacher: &mut ParamSet<F>, student: &ParamSet<F>, beta: f64) {
    let b = F::of(beta);
    let rest = F::one() - b;
    for (name, t) in teacher.iter_mut() {
        if let Some(s) = student.get(name) {
            ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = b * *t + rest * s);
        }
    }
}

/// Keeps pairs down to the knee of the descending similarity curve.
/// Fewer than three pairs, or a curve without a knee, pass through intact.
pub fn filter_by_similarity(pairs: &[SourcePair], sims: &[f64]) -> Result<FilterOutcome> {
    if pairs.len() != sims.len() {
        return Err(Error::dim("filter similarities", pairs.len(), sims.len()));
    }
    let keep_all = || FilterOutcome {
        kept: pairs.to_vec(),
        discarded: Vec::new(),
        knee_similarity: None,
    };
    if pairs.len() < 3 {
        return Ok(keep_all());
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| sims[i]).collect();
    let Some(knee) = kneedle_knee(&sorted, CurveShape::Concave)? else {
        return Ok(keep_all());
    };
    let mut keep = vec![false; pairs.len()];
    for &i in &order[..=knee] {
        keep[i] = true;
    }
    let (kept, discarded): (Vec<_>, Vec<_>) = pairs.iter().cloned().zip(keep).partition(|(_, k)| *k);
    Ok(FilterOutcome {
        kept: kept.into_iter().map(|(p, _)| p).collect(),
        discarded: discarded.into_iter().map(|(p, _)| p).collect(),
        knee_similarity: Some(sorted[knee]),
    })
}

/// Eval-mode manifold similarity `sim(upsilon(v), phi(a))` of each pair.
pub fn pair_similarities(teacher: &ManifoldModel<f32>, pairs: &[SourcePair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (v, a) = pair_matrices(pairs, &teacher.arch);
    let mut rng = seeded(0);
    let ev = teacher.project_visual_batch(&v, false, &mut rng)?;
    let ea = teacher.project_audio_batch(&a, false, &mut rng)?;
    ev.rows()
        .into_iter()
        .zip(ea.rows())
        .map(|(x, y)| cosine_sim(&x.to_vec(), &y.to_vec()))
        .collect()
}

/// Scores every pair with the teacher and discards the low-similarity tail
/// beyond the Kneedle knee.
pub fn filter_noisy_pairs(teacher: &ManifoldModel<f32>, pairs: &[SourcePair]) -> Result<FilterOutcome> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs to filter".into()));
    }
    let sims = pair_similarities(teacher, pairs)?;
    filter_by_similarity(pairs, &sims)
}

pub(crate) fn pair_matrices(pairs: &[SourcePair], arch: &ManifoldArch) -> (Array2<f32>, Array2<f32>) {
    (
        stack_rows(pairs.iter().map(|p| p.visual.0.as_slice()), arch.dims.visual),
        stack_rows(pairs.iter().map(|p| p.audio.values.as_slice()), arch.dims.audio),
    )
}

/// Eval-mode manifold embeddings `(upsilon(V), phi(A))` of `pairs`.
pub fn embed_pairs(model: &ManifoldModel<f32>, pairs: &[SourcePair]) -> Result<(Array2<f32>, Array2<f32>)> {
    let (v, a) = pair_matrices(pairs, &model.arch);
    let mut rng = seeded(0);
    Ok((
        model.project_visual_batch(&v, false, &mut rng)?,
        model.project_audio_batch(&a, false, &mut rng)?,
    ))
}

/// Class-level top-1 visual-to-audio retrieval in manifold space.
pub fn manifold_retrieval(model: &ManifoldModel<f32>, pairs: &[SourcePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let (ev, ea) = embed_pairs(model, pairs)?;
    let labels: Vec<&str> = pairs.iter().map(|p| p.class_label.as_str()).collect();
    labeled_retrieval_accuracy(&ev.mapv(f64::from), &ea.mapv(f64::from), &labels, &labels, 1)
}

struct Teacher<'a> {
    model: &'a mut ManifoldModel<f32>,
    beta: f64,
    consistency_weight: f64,
}

fn is_projector(name: &str) -> bool {
    name.starts_with(CLIP_PREFIX) || name.starts_with(CLAP_PREFIX) || name == LOG_TEMPERATURE
}

fn is_reconstructor(name: &str) -> bool {
    name.starts_with(RECON_PREFIX)
}

/// Weighted mean of `1 - cos(e_i, t_i)` over rows with non-zero weight.
fn consistency_term(g: &mut Graph<f32>, e: Var, target: &Array2<f32>, weights: &[f32]) -> Var {
    let total: f32 = weights.iter().sum();
    let mut tw = target.clone();
    for (mut row, &w) in tw.rows_mut().into_iter().zip(weights) {
        let n = row.dot(&row).sqrt().max(f32::MIN_POSITIVE);
        row.mapv_inplace(|x| x * w / n);
    }
    let en = g.row_normalize(e);
    let prod = g.mul_const(en, tw);
    let s = g.sum(prod);
    let neg = g.scale(s, -1.0 / total);
    g.add_scalar(neg, 1.0)
}

fn diverged(stage: &str, epoch: usize, last_good: &ParamSet<f32>) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        epoch,
        last_good: Some(Box::new(last_good.clone())),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase<R: Rng>(
    phase: &str,
    model: &mut ManifoldModel<f32>,
    pairs: &[SourcePair],
    eval: &[SourcePair],
    cfg: &ManifoldTrainConfig,
    epochs: usize,
    mut teacher: Option<Teacher<'_>>,
    rng: &mut R,
    log: &mut Vec<ManifoldEpochLog>,
) -> Result<()> {
    let mut opt_proj = AdamW::<f32>::new(cfg.optimizer.clone());
    let mut opt_rec = AdamW::<f32>::new(cfg.optimizer.clone());
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SourcePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (v, a) = pair_matrices(&batch, &model.arch);
            let mask = cfg.ccmr.map(|c| c.prepare(&v, &a)).transpose()?;
            let last_good = model.params.clone();

            // Projectors (and temperature) on L_fold with the reconstructor frozen.
            let mut g = Graph::new();
            let fold = build_fold(&mut g, model, &model.params, &v, &a, mask.as_ref(), cfg.lambda1, true, rng)?;
            let mut loss = fold.total;
            let mut consistency = 0.0;
            if let Some(t) = teacher.as_ref() {
                let weights: Vec<f32> = batch.iter().map(|p| if p.provenance.is_noisy() { 1.0 } else { 0.0 }).collect();
                if t.consistency_weight > 0.0 && weights.iter().any(|&w| w > 0.0) {
                    let mut trng = seeded(0);
                    let tv = t.model.project_visual_batch(&v, false, &mut trng)?;
                    let ta = t.model.project_audio_batch(&a, false, &mut trng)?;
                    let cv = consistency_term(&mut g, fold.e_clip, &tv, &weights);
                    let ca = consistency_term(&mut g, fold.e_clap, &ta, &weights);
                    let c = g.add(cv, ca);
                    let c = g.scale(c, 0.5);
                    consistency = g.scalar(c) as f64;
                    let wc = g.scale(c, t.consistency_weight as f32);
                    loss = g.add(loss, wc);
                }
            }
            if g.check_finite().is_err() {
                return Err(diverged(phase, epoch, &last_good));
            }
            let b = fold.breakdown(&g);
            let grads = g.backward(loss);
            if opt_proj.step(&mut model.params, &grads, is_projector).is_err() {
                return Err(diverged(phase, epoch, &last_good));
            }
            model.clamp_temperature();

            // Reconstructor on L_r + lambda1 * KL(chi) with the projectors frozen.
            let mut g = Graph::new();
            let fold_b = build_fold(&mut g, model, &model.params, &v, &a, mask.as_ref(), cfg.lambda1, true, rng)?;
            let kl = g.scale(fold_b.kl_reconstructor, cfg.lambda1 as f32);
            let loss_b = g.add(fold_b.recon, kl);
            if g.check_finite().is_err() {
                return Err(diverged(phase, epoch, &last_good));
            }
            let grads = g.backward(loss_b);
            if opt_rec.step(&mut model.params, &grads, is_reconstructor).is_err() {
                return Err(diverged(phase, epoch, &last_good));
            }

            if let Some(t) = teacher.as_mut() {
                ema_update(&mut t.model.params, &model.params, t.beta);
            }
            for (s, x) in sums.iter_mut().zip([b.total, b.contrastive, b.recon, b.kl, consistency]) {
                *s += x;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.push(ManifoldEpochLog {
            phase: phase.to_string(),
            epoch,
            loss: sums[0] / n,
            contrastive: sums[1] / n,
            recon: sums[2] / n,
            kl: sums[3] / n,
            consistency: sums[4] / n,
            retrieval_top1: manifold_retrieval(model, eval)?,
            temperature: model.temperature(),
        });
    }
    Ok(())
}

/// Trains the manifold on the train split of `dataset`.
///
/// Each batch runs two steps: the projectors and temperature on `L_fold`
/// with the reconstructor frozen, then the reconstructor on
/// `L_r + lambda1 * KL(chi)` with the projectors frozen. When Mean-Teacher is
/// enabled and the train split mixes clean and noisy pairs, a teacher is
/// first fit on the clean pairs, optionally filters the noisy ones, and then
/// tracks the student by EMA while supervising it on the noisy pairs.
pub fn train_manifold(
    dataset: &SourcePairDataset,
    arch: &ManifoldArch,
    cfg: &ManifoldTrainConfig,
) -> Result<ManifoldTrainOutput> {
    let train: Vec<SourcePair> = dataset.split(Split::Train).into_iter().cloned().collect();
    let classes = SourcePairDataset::new(train.clone()).classes();
    if classes.len() < 2 {
        return Err(Error::Precondition("manifold training needs at least 2 classes in the train split".into()));
    }
    if let Some(d) = dataset.dims() {
        if d != arch.dims {
            return Err(Error::dim("dataset visual width", arch.dims.visual, d.visual));
        }
    }
    let mut eval: Vec<SourcePair> = dataset.split(Split::Test).into_iter().cloned().collect();
    if eval.is_empty() {
        eval = train.clone();
    }
    let mut init_rng = seeded(derive_seed(cfg.seed, 1));
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut log = Vec::new();

    let (clean, noisy): (Vec<SourcePair>, Vec<SourcePair>) = train.iter().cloned().partition(|p| !p.provenance.is_noisy());
    let mt = &cfg.mean_teacher;
    if mt.enabled && !clean.is_empty() && !noisy.is_empty() {
        let mut teacher = ManifoldModel::<f32>::new(arch.clone(), &mut init_rng)?;
        let teacher_epochs = mt.teacher_epochs.unwrap_or(cfg.epochs);
        run_phase("teacher", &mut teacher, &clean, &eval, cfg, teacher_epochs, None, &mut rng, &mut log)?;
        let filter = if mt.filter_enabled {
            Some(filter_noisy_pairs(&teacher, &noisy)?)
        } else {
            None
        };
        let kept_noisy = filter.as_ref().map(|f| f.kept.clone()).unwrap_or(noisy);
        let student_pairs: Vec<SourcePair> = clean.into_iter().chain(kept_noisy).collect();
        let mut student = teacher.clone();
        let handle = Teacher {
            model: &mut teacher,
            beta: mt.ema_beta,
            consistency_weight: mt.consistency_weight,
        };
        run_phase("student", &mut student, &student_pairs, &eval, cfg, cfg.epochs, Some(handle), &mut rng, &mut log)?;
        return Ok(ManifoldTrainOutput {
            model: student,
            teacher: Some(teacher),
            log,
            filter: filter.map(|f| f.summary()),
        });
    }

    let mut model = ManifoldModel::<f32>::new(arch.clone(), &mut init_rng)?;
    run_phase("main", &mut model, &train, &eval, cfg, cfg.epochs, None, &mut rng, &mut log)?;
    Ok(ManifoldTrainOutput {
        model,
        teacher: None,
        log,
        filter: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, AudioEmbedding, EmbeddingDims, Provenance, SyntheticWorld, VisualEmbedding, WorldConfig};
    use crate::manifold::fold_loss;
    use crate::nn::tensor::normal_matrix;

    fn pair(i: usize) -> SourcePair {
        SourcePair {
            id: format!("p{i}"),
            class_label: "c".into(),
            visual: VisualEmbedding(vec![1.0]),
            audio: AudioEmbedding::new(vec![1.0]),
            provenance: Provenance::Curated,
            split: Split::Train,
        }
    }

    #[test]
    fn two_tier_similarities_keep_the_high_tier() {
        let pairs: Vec<SourcePair> = (0..15).map(pair).collect();
        // Interleave the tiers so the filter has to sort.
        let sims: Vec<f64> = (0..15).map(|i| if i % 3 == 2 { 0.1 } else { 0.95 }).collect();
        let out = filter_by_similarity(&pairs, &sims).unwrap();
        assert_eq!(out.kept.len(), 10);
        assert_eq!(out.discarded.len(), 5);
        assert!(out.discarded.iter().all(|p| p.id.trim_start_matches('p').parse::<usize>().unwrap() % 3 == 2));
        assert_eq!(out.knee_similarity, Some(0.95));
    }

    #[test]
    fn identical_similarities_keep_everything() {
        let pairs: Vec<SourcePair> = (0..6).map(pair).collect();
        let out = filter_by_similarity(&pairs, &[0.5; 6]).unwrap();
        assert_eq!(out.kept.len(), 6);
    }

    #[test]
    fn fewer_than_three_pairs_pass_through() {
        let model = ManifoldModel::<f32>::new(ManifoldArch::tiny(), &mut seeded(0)).unwrap();
        let mk = |i| SourcePair {
            visual: VisualEmbedding(vec![0.1 * i as f32 + 0.1; 5]),
            audio: AudioEmbedding::new(vec![0.5; 4]),
            ..pair(i)
        };
        let out = filter_noisy_pairs(&model, &[mk(0), mk(1)]).unwrap();
        assert_eq!(out.kept.len(), 2);
        assert!(filter_noisy_pairs(&model, &[]).is_err());
    }

    #[test]
    fn ema_matches_closed_form_trajectory() {
        let beta = 0.9;
        let mut r = seeded(3);
        let t0 = normal_matrix::<f64, _>(2, 3, &mut r);
        let mut teacher = ParamSet::new();
        teacher.insert("w", t0.clone());
        let students: Vec<Array2<f64>> = (0..6).map(|_| normal_matrix(2, 3, &mut r)).collect();
        for s in &students {
            let mut sp = ParamSet::new();
            sp.insert("w", s.clone());
            ema_update(&mut teacher, &sp, beta);
        }
        // beta^n t0 + sum_k (1 - beta) beta^(n-k) s_k
        let n = students.len() as i32;
        let mut closed = &t0 * beta.powi(n);
        for (k, s) in students.iter().enumerate() {
            closed = closed + s * ((1.0 - beta) * beta.powi(n - 1 - k as i32));
        }
        for (a, b) in teacher.get("w").unwrap().iter().zip(closed.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny_dataset(noisy: f64) -> SourcePairDataset {
        let world = SyntheticWorld::new(WorldConfig {
            num_classes: 4,
            dims: EmbeddingDims { visual: 5, audio: 4 },
            noise_sigma: 0.1,
            seed: 2,
        })
        .unwrap();
        synth_dataset(&world, 4, noisy).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_weights_and_losses_unchanged() {
        let ds = tiny_dataset(0.0);
        let train = SourcePairDataset::new(ds.split(Split::Train).into_iter().take(8).cloned().collect());
        let mut cfg = ManifoldTrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        cfg.optimizer.lr = 0.0;
        let arch = ManifoldArch::tiny();
        let out = train_manifold(&train, &arch, &cfg).unwrap();
        let init = ManifoldModel::<f32>::new(arch.clone(), &mut seeded(derive_seed(cfg.seed, 1))).unwrap();
        assert_eq!(out.model.params, init.params);
        let (v, a) = pair_matrices(&train.pairs, &arch);
        let before = fold_loss(&init, &v, &a, cfg.ccmr, cfg.lambda1, &mut seeded(4)).unwrap();
        let after = fold_loss(&out.model, &v, &a, cfg.ccmr, cfg.lambda1, &mut seeded(4)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let mut ds = tiny_dataset(0.0);
        ds.pairs.retain(|p| p.class_label == "class_00");
        assert!(train_manifold(&ds, &ManifoldArch::tiny(), &ManifoldTrainConfig::default()).is_err());
    }

    #[test]
    fn mean_teacher_runs_teacher_then_student() {
        let ds = tiny_dataset(0.5);
        let cfg = ManifoldTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train_manifold(&ds, &ManifoldArch::tiny(), &cfg).unwrap();
        assert!(out.teacher.is_some());
        assert!(out.filter.is_some());
        let phases: Vec<&str> = out.log.iter().map(|l| l.phase.as_str()).collect();
        assert_eq!(phases, ["teacher", "teacher", "student", "student"]);
        assert!(out.log.iter().all(|l| l.loss.is_finite()));
    }
}
