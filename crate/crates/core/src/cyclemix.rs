//! Cycle Mix: iterative best-of-N refinement of the remixed embedding,
//! scored against the reconstructed semantics of each source.

use serde::{Deserialize, Serialize};

use crate::data::{cosine_sim, seeded, AudioEmbedding};
use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::remixer::{finish_sample, RemixerModel, TokenSequence, FEEDBACK_SLOT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleMixConfig {
    pub iterations: usize,
    pub sample_size: usize,
    pub seed: u64,
    pub cfg_scale: Option<f64>,
    /// Compute the track semantics once instead of every iteration.
    pub hoist_track_semantics: bool,
    /// Draw the track semantics from the reconstructor instead of taking its
    /// mean.
    pub sample_track_semantics: bool,
}

impl Default for CycleMixConfig {
    fn default() -> Self {
        Self {
            iterations: 64,
            sample_size: 64,
            seed: 0,
            cfg_scale: None,
            hoist_track_semantics: false,
            sample_track_semantics: false,
        }
    }
}

impl CycleMixConfig {
    /// One iteration of one sample: the plain remixer output.
    pub fn single() -> Self {
        Self {
            iterations: 1,
            sample_size: 1,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.sample_size == 0 {
            return Err(Error::Config(format!(
                "cycle mix needs iterations and sample_size >= 1, got {} and {}",
                self.iterations, self.sample_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMixOutput {
    pub best: Vec<f32>,
    pub score: f64,
    /// Running best score after each iteration.
    pub trace: Vec<f64>,
}

impl CycleMixOutput {
    pub fn embedding(&self) -> AudioEmbedding {
        AudioEmbedding {
            values: self.best.clone(),
            unit_norm: true,
        }
    }
}

/// `chi(e_m)` for each source embedding.
pub fn track_semantics<R: rand::Rng + ?Sized>(
    manifold: &ManifoldModel<f32>,
    sources: &[Vec<f32>],
    sample: bool,
    rng: &mut R,
) -> Result<Vec<Vec<f32>>> {
    sources
        .iter()
        .map(|e| Ok(manifold.reconstruct(e, rng, sample)?.values))
        .collect()
}

/// Mean cosine similarity of `a` to each track semantic.
pub fn track_score(a: &[f32], semantics: &[Vec<f32>]) -> Result<f64> {
    if semantics.is_empty() {
        return Err(Error::Precondition("no track semantics to score against".into()));
    }
    let mut total = 0.0;
    for s in semantics {
        total += cosine_sim(a, s)?;
    }
    Ok(total / semantics.len() as f64)
}

/// Runs Cycle Mix on `seq`, whose feedback slot must be empty. `sources` are
/// the manifold embeddings of the scene's sources.
///
/// Each iteration draws `sample_size` remixes; when the best beats the
/// running best it becomes the answer and is fed back through the audio
/// projector into the feedback slot.
pub fn cycle_mix(
    manifold: &ManifoldModel<f32>,
    remixer: &RemixerModel<f32>,
    seq: &TokenSequence,
    sources: &[Vec<f32>],
    cfg: &CycleMixConfig,
) -> Result<CycleMixOutput> {
    cfg.validate()?;
    if seq.tokens.get(FEEDBACK_SLOT).is_some_and(|t| t.valid) {
        return Err(Error::Precondition("feedback slot is already occupied".into()));
    }
    if sources.is_empty() {
        return Err(Error::Precondition("cycle mix needs at least one source embedding".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut seq = seq.clone();
    let hoisted = if cfg.hoist_track_semantics {
        Some(track_semantics(manifold, sources, cfg.sample_track_semantics, &mut rng)?)
    } else {
        None
    };
    let mut best: Option<Vec<f32>> = None;
    let mut score = f64::NEG_INFINITY;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let semantics = match &hoisted {
            Some(s) => s.clone(),
            None => track_semantics(manifold, sources, cfg.sample_track_semantics, &mut rng)?,
        };
        let (mu, logvar) = remixer.guided_posterior(&seq, cfg.cfg_scale)?;
        let mut round: Option<(Vec<f32>, f64)> = None;
        for _ in 0..cfg.sample_size {
            let a = finish_sample(&mu, &logvar, true, &mut rng)?.values;
            let d = track_score(&a, &semantics)?;
            if round.as_ref().is_none_or(|(_, r)| d > *r) {
                round = Some((a, d));
            }
        }
        let (candidate, d) = round.expect("sample_size >= 1");
        if d > score {
            let mut token = manifold.project_audio(&candidate, &mut rng, false)?;
            token.resize(seq.width(), 0.0);
            seq.set_feedback(token)?;
            best = Some(candidate);
            score = d;
        }
        trace.push(score);
    }
    let best = best.ok_or_else(|| Error::NonFinite("every cycle mix score was NaN".into()))?;
    Ok(CycleMixOutput { best, score, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{l2_normalize, SceneManifest, SceneSource};
    use crate::manifold::ManifoldArch;
    use crate::nn::reparameterize_array;
    use crate::remixer::{assemble_tokens, remix, RemixerArch};
    use rand::Rng;

    fn models() -> (ManifoldModel<f32>, RemixerModel<f32>) {
        (
            ManifoldModel::new(ManifoldArch::tiny(), &mut seeded(1)).unwrap(),
            RemixerModel::new(RemixerArch::tiny(), &mut seeded(2)).unwrap(),
        )
    }

    fn scene_tokens(m: &ManifoldModel<f32>, n: usize, seed: u64) -> (TokenSequence, Vec<Vec<f32>>) {
        let mut r = seeded(seed);
        let sources = (0..n)
            .map(|_| SceneSource::visual((0..5).map(|_| r.random::<f32>() - 0.5).collect()))
            .collect();
        let seq = assemble_tokens(m, &SceneManifest::new(sources), false, &mut seeded(0)).unwrap();
        let embs = seq.source_manifold_embeddings(m.arch.manifold_width);
        (seq, embs)
    }

    #[test]
    fn single_draw_is_the_plain_remix_sample() {
        let (m, r) = models();
        for seed in 0..5 {
            let (seq, embs) = scene_tokens(&m, 3, seed);
            let cfg = CycleMixConfig {
                seed,
                ..CycleMixConfig::single()
            };
            let out = cycle_mix(&m, &r, &seq, &embs, &cfg).unwrap();
            let plain = remix(&r, &seq, &mut seeded(seed), true, None).unwrap();
            assert_eq!(out.best, plain.values);
            assert_eq!(out.trace.len(), 1);
        }
    }

    #[test]
    fn trace_never_decreases() {
        let (m, r) = models();
        for seed in 0..100 {
            let (seq, embs) = scene_tokens(&m, 1 + (seed as usize % 4), 100 + seed);
            let cfg = CycleMixConfig {
                iterations: 6,
                sample_size: 3,
                seed,
                ..CycleMixConfig::default()
            };
            let out = cycle_mix(&m, &r, &seq, &embs, &cfg).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", out.trace);
            assert_eq!(*out.trace.last().unwrap(), out.score);
            assert!((crate::data::l2_norm(&out.best) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn matches_step_by_step_replay() {
        let (m, r) = models();
        let (seq, embs) = scene_tokens(&m, 3, 42);
        let cfg = CycleMixConfig {
            iterations: 2,
            sample_size: 4,
            seed: 9,
            ..CycleMixConfig::default()
        };
        let out = cycle_mix(&m, &r, &seq, &embs, &cfg).unwrap();

        let mut rng = seeded(9);
        let mut tokens = seq.clone();
        let mut best = Vec::new();
        let mut s = f64::NEG_INFINITY;
        let mut trace = Vec::new();
        for _ in 0..2 {
            let semantics: Vec<Vec<f32>> = embs
                .iter()
                .map(|e| m.reconstruct(e, &mut rng, false).unwrap().values)
                .collect();
            let (mu, lv) = r.posterior_arrays(&tokens).unwrap();
            let draws: Vec<Vec<f32>> = (0..4)
                .map(|_| l2_normalize(&reparameterize_array(&mu, &lv, &mut rng).iter().copied().collect::<Vec<_>>()).unwrap())
                .collect();
            let d: Vec<f64> = draws
                .iter()
                .map(|a| semantics.iter().map(|t| cosine_sim(a, t).unwrap()).sum::<f64>() / semantics.len() as f64)
                .collect();
            let mut k = 0;
            for i in 1..4 {
                if d[i] > d[k] {
                    k = i;
                }
            }
            if d[k] > s {
                s = d[k];
                best = draws[k].clone();
                let mut fb = m.project_audio(&best, &mut rng, false).unwrap();
                fb.extend(vec![0.0; 5]);
                tokens.tokens[FEEDBACK_SLOT].values = fb;
                tokens.tokens[FEEDBACK_SLOT].valid = true;
            }
            trace.push(s);
        }
        assert_eq!(out.best, best);
        assert_eq!(out.trace, trace);
    }

    #[test]
    fn hoisting_eval_semantics_changes_nothing() {
        let (m, r) = models();
        let (seq, embs) = scene_tokens(&m, 2, 5);
        let cfg = CycleMixConfig {
            iterations: 4,
            sample_size: 4,
            ..CycleMixConfig::default()
        };
        let a = cycle_mix(&m, &r, &seq, &embs, &cfg).unwrap();
        let b = cycle_mix(&m, &r, &seq, &embs, &CycleMixConfig { hoist_track_semantics: true, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_and_inputs() {
        let (m, r) = models();
        let (mut seq, embs) = scene_tokens(&m, 2, 5);
        for (t, n) in [(0, 1), (1, 0)] {
            let cfg = CycleMixConfig {
                iterations: t,
                sample_size: n,
                ..CycleMixConfig::default()
            };
            assert!(matches!(cycle_mix(&m, &r, &seq, &embs, &cfg), Err(Error::Config(_))));
        }
        assert!(cycle_mix(&m, &r, &seq, &[], &CycleMixConfig::single()).is_err());
        seq.set_feedback(vec![0.0; 10]).unwrap();
        assert!(matches!(
            cycle_mix(&m, &r, &seq, &embs, &CycleMixConfig::single()),
            Err(Error::Precondition(_))
        ));
    }
}
