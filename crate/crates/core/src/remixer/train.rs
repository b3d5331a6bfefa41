//! Remixer training on scenes built from source pairs, with the manifold
//! frozen.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_tokens, cfg_dropout_with, mix_terms, CfgDropMode, remix, RemixerArch, RemixerModel, TokenSequence};
use super::{DEFAULT_CFG_DROPOUT, DEFAULT_LAMBDA2};
use crate::data::{cosine_sim, derive_seed, seeded, SceneManifest, SceneSource, SourcePair, SyntheticWorld};
use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::nn::{reparameterize, AdamW, AdamWConfig, Graph};

/// One training scene: its sources, the observed mixture audio and, when
/// known, the noise-free mixture used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RemixScene {
    pub scene: SceneManifest,
    pub classes: Vec<String>,
    pub target: Vec<f32>,
    pub reference: Option<Vec<f32>>,
}

impl RemixScene {
    pub fn eval_target(&self) -> &[f32] {
        self.reference.as_deref().unwrap_or(&self.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemixerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cfg_dropout: f64,
    pub cfg_drop_mode: CfgDropMode,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for RemixerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            cfg_dropout: DEFAULT_CFG_DROPOUT,
            cfg_drop_mode: CfgDropMode::Token,
            lambda2: DEFAULT_LAMBDA2,
            seed: 0,
        }
    }
}

impl RemixerTrainConfig {
    /// Settings for the small synthetic world: lr 1e-3.
    pub fn desk() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemixerEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mix: f64,
    pub kl: f64,
    pub eval_similarity: f64,
}

#[derive(Clone, Debug)]
pub struct RemixerTrainOutput {
    pub model: RemixerModel<f32>,
    pub log: Vec<RemixerEpochLog>,
}

/// One single-source scene per pair. The target is the pair's audio; the
/// reference is the class prototype when `world` knows the class.
pub fn pair_scenes(pairs: &[SourcePair], world: Option<&SyntheticWorld>) -> Result<Vec<RemixScene>> {
    pairs
        .iter()
        .map(|p| {
            let reference = world
                .and_then(|w| w.class_index(&p.class_label).map(|c| w.mixed_audio(&[c])))
                .transpose()?;
            Ok(RemixScene {
                scene: SceneManifest::new(vec![SceneSource::visual(p.visual.0.clone())]),
                classes: vec![p.class_label.clone()],
                target: p.audio.values.clone(),
                reference,
            })
        })
        .collect()
}

/// `count` scenes of `sources` distinct classes drawn from `pairs`. Each
/// source is a random pair of its class, given as audio with probability
/// `audio_fraction` and as visual otherwise. Targets are noisy observations
/// of the prototype mixture.
pub fn synth_scenes(
    world: &SyntheticWorld,
    pairs: &[SourcePair],
    count: usize,
    sources: usize,
    audio_fraction: f64,
    seed: u64,
) -> Result<Vec<RemixScene>> {
    let mut by_class: Vec<Vec<&SourcePair>> = vec![Vec::new(); world.num_classes()];
    for p in pairs {
        if let Some(c) = world.class_index(&p.class_label) {
            by_class[c].push(p);
        }
    }
    let available: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if sources == 0 || sources > available.len() {
        return Err(Error::Precondition(format!(
            "cannot draw {sources} distinct classes from {} available",
            available.len()
        )));
    }
    if !(0.0..=1.0).contains(&audio_fraction) {
        return Err(Error::Config(format!("audio fraction {audio_fraction} outside [0, 1]")));
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let classes: Vec<usize> = available.choose_multiple(&mut rng, sources).copied().collect();
        let scene_sources = classes
            .iter()
            .map(|&c| {
                let p = by_class[c].choose(&mut rng).expect("non-empty class");
                if rng.random::<f64>() < audio_fraction {
                    SceneSource::audio(p.audio.values.clone())
                } else {
                    SceneSource::visual(p.visual.0.clone())
                }
            })
            .collect();
        out.push(RemixScene {
            scene: SceneManifest::new(scene_sources),
            classes: classes.iter().map(|&c| SyntheticWorld::class_label(c)).collect(),
            target: world.sample_mixed_audio(&classes, &mut rng)?,
            reference: Some(world.mixed_audio(&classes)?),
        });
    }
    Ok(out)
}

fn scene_tokens(manifold: &ManifoldModel<f32>, scenes: &[RemixScene]) -> Result<Vec<TokenSequence>> {
    let mut rng = seeded(0);
    scenes
        .iter()
        .map(|s| assemble_tokens(manifold, &s.scene, false, &mut rng))
        .collect()
}

fn mean_over_tokens(model: &RemixerModel<f32>, tokens: &[TokenSequence], scenes: &[RemixScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut rng = seeded(0);
    let mut total = 0.0;
    for (seq, s) in tokens.iter().zip(scenes) {
        let a = remix(model, seq, &mut rng, false, None)?;
        total += cosine_sim(&a.values, s.eval_target())?;
    }
    Ok(total / scenes.len() as f64)
}

/// Mean cosine between the eval-mode remix of each scene and its reference
/// (or target when no reference is known).
pub fn mean_similarity(model: &RemixerModel<f32>, manifold: &ManifoldModel<f32>, scenes: &[RemixScene]) -> Result<f64> {
    mean_over_tokens(model, &scene_tokens(manifold, scenes)?, scenes)
}

/// Trains a fresh remixer on `train` with the manifold frozen in eval mode.
/// `eval` scenes are scored after each epoch.
pub fn train_remixer(
    manifold: &ManifoldModel<f32>,
    train: &[RemixScene],
    eval: &[RemixScene],
    arch: &RemixerArch,
    cfg: &RemixerTrainConfig,
) -> Result<RemixerTrainOutput> {
    if train.is_empty() {
        return Err(Error::Precondition("remixer training needs at least one scene".into()));
    }
    if arch.manifold_width != manifold.arch.manifold_width || arch.dims() != manifold.arch.dims {
        return Err(Error::dim("remixer token width", manifold.arch.manifold_width + manifold.arch.dims.visual, arch.token_width()));
    }
    for s in train {
        if s.target.len() != arch.audio_width {
            return Err(Error::dim("remix target", arch.audio_width, s.target.len()));
        }
    }
    let train_tokens = scene_tokens(manifold, train)?;
    let eval_tokens = scene_tokens(manifold, eval)?;
    let mut model = RemixerModel::<f32>::new(arch.clone(), &mut seeded(derive_seed(cfg.seed, 3)))?;
    let mut rng = seeded(derive_seed(cfg.seed, 4));
    let mut opt = AdamW::<f32>::new(cfg.optimizer.clone());
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let seqs = chunk
                .iter()
                .map(|&i| cfg_dropout_with(&train_tokens[i], cfg.cfg_dropout, cfg.cfg_drop_mode, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let target = Array2::from_shape_fn((chunk.len(), arch.audio_width), |(r, j)| train[chunk[r]].target[j]);
            let last_good = model.params.clone();
            let mut g = Graph::new();
            let post = model.posterior(&mut g, &model.params, &seqs)?;
            let a_mix = reparameterize(&mut g, post.mu, post.logvar, &mut rng);
            let (total, mix, kl) = mix_terms(&mut g, post, a_mix, &target, cfg.lambda2)?;
            let diverged = || Error::Diverged {
                stage: "remixer".into(),
                epoch,
                last_good: Some(Box::new(last_good.clone())),
            };
            if g.check_finite().is_err() {
                return Err(diverged());
            }
            let grads = g.backward(total);
            if opt.step(&mut model.params, &grads, |_| true).is_err() {
                return Err(diverged());
            }
            for (s, v) in sums.iter_mut().zip([total, mix, kl]) {
                *s += g.scalar(v) as f64;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.push(RemixerEpochLog {
            epoch,
            loss: sums[0] / n,
            mix: sums[1] / n,
            kl: sums[2] / n,
            eval_similarity: mean_over_tokens(&model, &eval_tokens, eval)?,
        });
    }
    Ok(RemixerTrainOutput { model, log })
}
