//! Sound source remixer: mixes per-source tokens into one audio-semantic
//! vector through an efficient-attention block and variational heads.

pub mod train;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{l2_normalize, AudioEmbedding, EmbeddingDims, Modality, SceneManifest, MAX_SCENE_SOURCES};
use crate::error::{Error, Result};
use crate::manifold::{ManifoldArch, ManifoldModel};
use crate::nn::{cosine_kl_terms, reparameterize_array, ClsPooler, Graph, ParamSet, Posterior, Real, Var};
#[cfg(test)]
use crate::nn::tensor::normal_matrix;

pub use train::{
    mean_similarity, pair_scenes, synth_scenes, train_remixer, RemixScene, RemixerEpochLog, RemixerTrainConfig,
    RemixerTrainOutput,
};

/// Token slots after padding; the last one is reserved for Cycle Mix feedback.
pub const MAX_TOKENS: usize = MAX_SCENE_SOURCES + 1;
pub const FEEDBACK_SLOT: usize = MAX_TOKENS - 1;
pub const DEFAULT_CFG_DROPOUT: f64 = 0.2;
pub const DEFAULT_LAMBDA2: f64 = 1e-3;
const PREFIX: &str = "remixer";
pub const CLS_TOKEN: &str = "remixer.cls";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemixerArch {
    pub manifold_width: usize,
    pub visual_width: usize,
    pub audio_width: usize,
    /// Widths of each head MLP; the last equals `audio_width`.
    pub head_layers: Vec<usize>,
    pub ff_hidden: usize,
}

impl RemixerArch {
    /// 768-wide manifold and CLIP halves, heads 768/640/512.
    pub fn full() -> Self {
        Self {
            manifold_width: 768,
            visual_width: 768,
            audio_width: 512,
            head_layers: vec![768, 640, 512],
            ff_hidden: 1536,
        }
    }

    /// Matches `ManifoldArch::desk`, heads 64/56/48.
    pub fn desk() -> Self {
        Self::for_manifold(&ManifoldArch::desk(), vec![64, 56, 48])
    }

    pub fn tiny() -> Self {
        Self::for_manifold(&ManifoldArch::tiny(), vec![6, 5, 4])
    }

    pub fn for_manifold(arch: &ManifoldArch, head_layers: Vec<usize>) -> Self {
        let token = arch.manifold_width + arch.dims.visual;
        Self {
            manifold_width: arch.manifold_width,
            visual_width: arch.dims.visual,
            audio_width: arch.dims.audio,
            head_layers,
            ff_hidden: token,
        }
    }

    pub fn token_width(&self) -> usize {
        self.manifold_width + self.visual_width
    }

    pub fn dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            visual: self.visual_width,
            audio: self.audio_width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.manifold_width == 0 || self.visual_width == 0 || self.audio_width == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("remixer widths must be positive".into()));
        }
        match self.head_layers.last() {
            Some(&w) if w == self.audio_width => Ok(()),
            Some(&w) => Err(Error::Config(format!(
                "remixer head ends at width {w}, audio width is {}",
                self.audio_width
            ))),
            None => Err(Error::Config("remixer heads need at least one layer".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceToken {
    pub values: Vec<f32>,
    pub valid: bool,
}

/// Exactly `MAX_TOKENS` tokens; unused slots are zero and invalid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<SourceToken>,
}

impl TokenSequence {
    pub fn empty(width: usize) -> Self {
        Self {
            tokens: vec![
                SourceToken {
                    values: vec![0.0; width],
                    valid: false,
                };
                MAX_TOKENS
            ],
        }
    }

    /// Packs source tokens into the leading slots.
    pub fn from_sources(sources: Vec<Vec<f32>>, width: usize) -> Result<Self> {
        if sources.len() > MAX_SCENE_SOURCES {
            return Err(Error::Capacity {
                count: sources.len(),
                max: MAX_SCENE_SOURCES,
            });
        }
        let mut seq = Self::empty(width);
        for (slot, values) in seq.tokens.iter_mut().zip(sources) {
            if values.len() != width {
                return Err(Error::dim("source token", width, values.len()));
            }
            *slot = SourceToken { values, valid: true };
        }
        Ok(seq)
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map(|t| t.values.len()).unwrap_or(0)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.valid).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.valid).count()
    }

    pub fn matrix<F: Real>(&self) -> Array2<F> {
        let w = self.width();
        Array2::from_shape_fn((self.tokens.len(), w), |(i, j)| F::of(self.tokens[i].values[j] as f64))
    }

    /// Valid tokens only, in slot order. Padding never reaches the [cls]
    /// output, so the remixer attends over these rows alone.
    pub fn valid_matrix<F: Real>(&self) -> Array2<F> {
        let valid: Vec<&SourceToken> = self.tokens.iter().filter(|t| t.valid).collect();
        Array2::from_shape_fn((valid.len(), self.width()), |(i, j)| F::of(valid[i].values[j] as f64))
    }

    /// Writes `values` into the reserved feedback slot.
    pub fn set_feedback(&mut self, values: Vec<f32>) -> Result<()> {
        if values.len() != self.width() {
            return Err(Error::dim("feedback token", self.width(), values.len()));
        }
        self.tokens[FEEDBACK_SLOT] = SourceToken { values, valid: true };
        Ok(())
    }

    /// Manifold halves of the valid source tokens, feedback slot excluded.
    pub fn source_manifold_embeddings(&self, manifold_width: usize) -> Vec<Vec<f32>> {
        self.tokens[..FEEDBACK_SLOT]
            .iter()
            .filter(|t| t.valid)
            .map(|t| t.values[..manifold_width].to_vec())
            .collect()
    }

    /// The null condition: every token zero-valued, validity unchanged.
    pub fn unconditional(&self) -> Self {
        let mut out = self.clone();
        for t in out.tokens.iter_mut() {
            t.values.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }
}

/// Tokens `e || v` for visual and text-translated sources and `e || 0` for
/// audio sources, padded to `MAX_TOKENS`.
pub fn assemble_tokens<R: Rng + ?Sized>(
    manifold: &ManifoldModel<f32>,
    scene: &SceneManifest,
    sample: bool,
    rng: &mut R,
) -> Result<TokenSequence> {
    scene.validate(manifold.arch.dims)?;
    let width = manifold.arch.manifold_width + manifold.arch.dims.visual;
    let mut sources = Vec::with_capacity(scene.sources.len());
    for s in &scene.sources {
        let token = match s.modality {
            Modality::Visual | Modality::TextTranslated => {
                let v = &s.visual.as_ref().expect("validated").0;
                let mut t = manifold.project_visual(v, rng, sample)?;
                t.extend_from_slice(v);
                t
            }
            Modality::Audio => {
                let a = s.audio.as_ref().expect("validated");
                let mut t = manifold.project_audio(a, rng, sample)?;
                t.resize(width, 0.0);
                t
            }
        };
        sources.push(token);
    }
    TokenSequence::from_sources(sources, width)
}

/// How classifier-free dropout picks tokens to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfgDropMode {
    /// Each valid token independently.
    #[default]
    Token,
    /// All valid tokens together, one draw per sequence.
    Joint,
}

/// Zeroes each valid token with probability `p`; dropped tokens stay
/// attendable.
pub fn cfg_dropout<R: Rng + ?Sized>(seq: &TokenSequence, p: f64, rng: &mut R) -> Result<TokenSequence> {
    cfg_dropout_with(seq, p, CfgDropMode::Token, rng)
}

pub fn cfg_dropout_with<R: Rng + ?Sized>(
    seq: &TokenSequence,
    p: f64,
    mode: CfgDropMode,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("cfg dropout {p} outside [0, 1]")));
    }
    let mut out = seq.clone();
    if p == 0.0 {
        return Ok(out);
    }
    match mode {
        CfgDropMode::Token => {
            for t in out.tokens.iter_mut().filter(|t| t.valid) {
                if rng.random::<f64>() < p {
                    t.values.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        CfgDropMode::Joint => {
            if rng.random::<f64>() < p {
                out = seq.unconditional();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemixerModel<F: Real = f32> {
    pub arch: RemixerArch,
    pub params: ParamSet<F>,
    pub pooler: ClsPooler,
}

impl<F: Real> RemixerModel<F> {
    fn pooler(arch: &RemixerArch) -> ClsPooler {
        ClsPooler::new(PREFIX, arch.token_width(), arch.ff_hidden, &arch.head_layers)
    }

    pub fn new<R: Rng + ?Sized>(arch: RemixerArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let pooler = Self::pooler(&arch);
        let mut params = ParamSet::new();
        pooler.init(&mut params, rng);
        Ok(Self { arch, params, pooler })
    }

    /// Rebuilds a model around loaded parameters, checking every tensor.
    pub fn from_params(arch: RemixerArch, params: ParamSet<F>) -> Result<Self> {
        arch.validate()?;
        let reference = Self::new(arch.clone(), &mut crate::data::seeded(0))?;
        crate::manifold::check_tensors(&reference.params, &params)?;
        let pooler = Self::pooler(&arch);
        Ok(Self { arch, params, pooler })
    }

    pub fn cast<G: Real>(&self) -> RemixerModel<G> {
        RemixerModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
            pooler: self.pooler.clone(),
        }
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.tokens.len() != MAX_TOKENS {
            return Err(Error::dim("token sequence length", MAX_TOKENS, seq.tokens.len()));
        }
        if seq.width() != self.arch.token_width() {
            return Err(Error::dim("token width", self.arch.token_width(), seq.width()));
        }
        if seq.valid_count() == 0 {
            return Err(Error::DegenerateInput("token sequence has no valid tokens".into()));
        }
        Ok(())
    }

    /// Posterior of a batch of sequences on `g`; row `b` belongs to `seqs[b]`.
    /// Only valid tokens are attended.
    pub fn posterior(&self, g: &mut Graph<F>, params: &ParamSet<F>, seqs: &[TokenSequence]) -> Result<Posterior> {
        if seqs.is_empty() {
            return Err(Error::Precondition("empty remixer batch".into()));
        }
        let inputs = seqs
            .iter()
            .map(|s| {
                self.check(s)?;
                Ok(s.valid_matrix())
            })
            .collect::<Result<Vec<_>>>()?;
        self.pooler.posterior(g, params, &inputs)
    }

    /// Eval-mode posterior `(mu, logvar)` of one sequence, each `1 x audio`.
    pub fn posterior_arrays(&self, seq: &TokenSequence) -> Result<(Array2<F>, Array2<F>)> {
        let mut g = Graph::new();
        let p = self.posterior(&mut g, &self.params, std::slice::from_ref(seq))?;
        g.check_finite()?;
        Ok((g.value(p.mu).clone(), g.value(p.logvar).clone()))
    }

    /// Posterior with classifier-free guidance on the mean:
    /// `mu_u + s * (mu_c - mu_u)`, keeping the conditional log-variance.
    pub fn guided_posterior(&self, seq: &TokenSequence, cfg_scale: Option<f64>) -> Result<(Array2<F>, Array2<F>)> {
        let (mu, lv) = self.posterior_arrays(seq)?;
        match cfg_scale {
            Some(s) if s != 1.0 => {
                let (mu_u, _) = self.posterior_arrays(&seq.unconditional())?;
                let s = F::of(s);
                let guided = ndarray::Zip::from(&mu).and(&mu_u).map_collect(|&c, &u| u + s * (c - u));
                Ok((guided, lv))
            }
            _ => Ok((mu, lv)),
        }
    }
}

/// Draws (or takes the mean of) a `1 x audio` posterior and l2-normalises it.
pub fn finish_sample<R: Rng + ?Sized>(
    mu: &Array2<f32>,
    logvar: &Array2<f32>,
    sample: bool,
    rng: &mut R,
) -> Result<AudioEmbedding> {
    let raw = if sample {
        reparameterize_array(mu, logvar, rng)
    } else {
        mu.clone()
    };
    AudioEmbedding::normalized(raw.iter().copied().collect())
}

/// `a_mix = normalize(psi(x_1..x_M))`.
pub fn remix<R: Rng + ?Sized>(
    model: &RemixerModel<f32>,
    seq: &TokenSequence,
    rng: &mut R,
    sample: bool,
    cfg_scale: Option<f64>,
) -> Result<AudioEmbedding> {
    let (mu, lv) = model.guided_posterior(seq, cfg_scale)?;
    finish_sample(&mu, &lv, sample, rng)
}

/// Per-batch `mean(1 - sim(a, a_mix)) + lambda2 * KL` on `g`. Returns the
/// total and its two terms.
pub fn mix_terms<F: Real>(
    g: &mut Graph<F>,
    posterior: Posterior,
    a_mix: Var,
    target: &Array2<F>,
    lambda2: f64,
) -> Result<(Var, Var, Var)> {
    cosine_kl_terms(g, posterior, a_mix, target, lambda2)
}

/// Train-mode `L_mix` of one sequence against `target`.
pub fn mix_loss<F: Real, R: Rng + ?Sized>(
    model: &RemixerModel<F>,
    seq: &TokenSequence,
    target: &[f32],
    lambda2: f64,
    rng: &mut R,
) -> Result<f64> {
    l2_normalize(target)?;
    let mut g = Graph::new();
    let p = model.posterior(&mut g, &model.params, std::slice::from_ref(seq))?;
    let a_mix = crate::nn::reparameterize(&mut g, p.mu, p.logvar, rng);
    let t = Array2::from_shape_fn((1, target.len()), |(_, j)| F::of(target[j] as f64));
    let (total, _, _) = mix_terms(&mut g, p, a_mix, &t, lambda2)?;
    g.check_finite()?;
    Ok(g.scalar(total).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{seeded, SceneSource};
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::seq::SliceRandom;

    fn tiny_models() -> (ManifoldModel<f32>, RemixerModel<f32>) {
        let m = ManifoldModel::new(ManifoldArch::tiny(), &mut seeded(1)).unwrap();
        let r = RemixerModel::new(RemixerArch::tiny(), &mut seeded(2)).unwrap();
        (m, r)
    }

    fn scene(n: usize, seed: u64) -> SceneManifest {
        let mut r = seeded(seed);
        let sources = (0..n)
            .map(|i| {
                if i % 3 == 2 {
                    SceneSource::audio((0..4).map(|_| r.random::<f32>() - 0.5).collect())
                } else {
                    SceneSource::visual((0..5).map(|_| r.random::<f32>() - 0.5).collect())
                }
            })
            .collect();
        SceneManifest::new(sources)
    }

    #[test]
    fn one_visual_source_fills_one_slot() {
        let (m, _) = tiny_models();
        let seq = assemble_tokens(&m, &scene(1, 3), false, &mut seeded(0)).unwrap();
        assert_eq!(seq.tokens.len(), MAX_TOKENS);
        assert_eq!(seq.valid_count(), 1);
        assert!(seq.tokens[1..].iter().all(|t| !t.valid && t.values.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn audio_tokens_carry_zero_visual_half() {
        let (m, _) = tiny_models();
        let seq = assemble_tokens(&m, &scene(3, 4), false, &mut seeded(0)).unwrap();
        let audio = &seq.tokens[2];
        assert!(audio.valid);
        assert!(audio.values[5..].iter().all(|&x| x == 0.0));
        assert_eq!(audio.values[5..].len(), 5);
    }

    #[test]
    fn permuting_the_scene_permutes_tokens() {
        let (m, _) = tiny_models();
        let s = scene(5, 5);
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut seeded(9));
        let permuted = SceneManifest::new(order.iter().map(|&i| s.sources[i].clone()).collect());
        let a = assemble_tokens(&m, &s, false, &mut seeded(0)).unwrap();
        let b = assemble_tokens(&m, &permuted, false, &mut seeded(0)).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(b.tokens[k], a.tokens[i]);
        }
    }

    #[test]
    fn scene_size_limits() {
        let (m, _) = tiny_models();
        assert!(matches!(
            assemble_tokens(&m, &SceneManifest::new(vec![]), false, &mut seeded(0)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            assemble_tokens(&m, &scene(64, 1), false, &mut seeded(0)),
            Err(Error::Capacity { count: 64, .. })
        ));
        assert_eq!(assemble_tokens(&m, &scene(63, 1), false, &mut seeded(0)).unwrap().valid_count(), 63);
    }

    #[test]
    fn remix_output_is_unit_norm() {
        let (m, r) = tiny_models();
        let mut rng = seeded(4);
        for n in [1, 2, 7] {
            let seq = assemble_tokens(&m, &scene(n, n as u64), false, &mut rng).unwrap();
            for (sample, cfg) in [(false, None), (true, None), (true, Some(3.0))] {
                let a = remix(&r, &seq, &mut rng, sample, cfg).unwrap();
                assert!((a.norm() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn eval_remix_is_invariant_to_token_order() {
        let (m, r) = tiny_models();
        let s = scene(6, 8);
        let seq = assemble_tokens(&m, &s, false, &mut seeded(0)).unwrap();
        let base = remix(&r, &seq, &mut seeded(0), false, None).unwrap();
        let mut perm = seq.clone();
        perm.tokens[..6].reverse();
        perm.tokens.swap(0, 40);
        assert_eq!(remix(&r, &perm, &mut seeded(0), false, None).unwrap(), base);
    }

    #[test]
    fn cfg_scale_one_is_the_conditional_output() {
        let (m, r) = tiny_models();
        let seq = assemble_tokens(&m, &scene(3, 2), false, &mut seeded(0)).unwrap();
        let plain = remix(&r, &seq, &mut seeded(5), true, None).unwrap();
        assert_eq!(remix(&r, &seq, &mut seeded(5), true, Some(1.0)).unwrap(), plain);
        assert_ne!(remix(&r, &seq, &mut seeded(5), true, Some(2.0)).unwrap(), plain);
    }

    #[test]
    fn all_invalid_sequence_is_degenerate() {
        let (_, r) = tiny_models();
        let seq = TokenSequence::empty(10);
        assert!(matches!(remix(&r, &seq, &mut seeded(0), false, None), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cfg_dropout_extremes_and_rate() {
        let (m, _) = tiny_models();
        let seq = assemble_tokens(&m, &scene(4, 2), false, &mut seeded(0)).unwrap();
        assert_eq!(cfg_dropout(&seq, 0.0, &mut seeded(1)).unwrap(), seq);
        let all = cfg_dropout(&seq, 1.0, &mut seeded(1)).unwrap();
        assert_eq!(all.mask(), seq.mask());
        assert!(all.tokens.iter().all(|t| t.values.iter().all(|&x| x == 0.0)));
        assert!(cfg_dropout(&seq, 1.5, &mut seeded(1)).is_err());

        let one = TokenSequence::from_sources(vec![vec![1.0; 3]], 3).unwrap();
        let mut rng = seeded(11);
        let trials = 10_000;
        let dropped = (0..trials)
            .filter(|_| cfg_dropout(&one, 0.2, &mut rng).unwrap().tokens[0].values[0] == 0.0)
            .count();
        assert!((dropped as f64 / trials as f64 - 0.2).abs() < 0.02);
    }

    #[test]
    fn joint_dropout_zeroes_all_or_nothing() {
        let seq = TokenSequence::from_sources(vec![vec![1.0; 3]; 4], 3).unwrap();
        let mut rng = seeded(2);
        let mut dropped = 0;
        for _ in 0..2000 {
            let out = cfg_dropout_with(&seq, 0.2, CfgDropMode::Joint, &mut rng).unwrap();
            let zeros = out.tokens[..4].iter().filter(|t| t.values[0] == 0.0).count();
            assert!(zeros == 0 || zeros == 4);
            dropped += usize::from(zeros == 4);
        }
        assert!((dropped as f64 / 2000.0 - 0.2).abs() < 0.03);
    }

    #[test]
    fn padding_never_reaches_the_output() {
        let (m, r) = tiny_models();
        let seq = assemble_tokens(&m, &scene(3, 12), false, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let cls = g.param(&r.params, CLS_TOKEN).unwrap();
        let x = g.constant(seq.matrix());
        let full = g.concat_rows(cls, x);
        let mut mask = vec![true];
        mask.extend(seq.mask());
        let y = r.pooler.block.forward(&mut g, &r.params, full, &mask).unwrap();
        let head = g.rows(y, 0, 1);
        let mu = r.pooler.mean_head.forward(&mut g, &r.params, head).unwrap();
        let padded = g.value(mu).clone();
        let (compact, _) = r.posterior_arrays(&seq).unwrap();
        for (a, b) in padded.iter().zip(compact.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn mix_loss_closed_forms() {
        let mut g = Graph::<f64>::new();
        let target = ndarray::array![[0.6, 0.8], [1.0, 0.0]];
        let mu = g.constant(Array2::zeros((2, 2)));
        let lv = g.constant(Array2::zeros((2, 2)));
        let p = Posterior { mu, logvar: lv };
        let same = g.constant(target.clone());
        let (zero, _, _) = mix_terms(&mut g, p, same, &target, 0.0).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        let flipped = g.constant(-&target);
        let (two, _, _) = mix_terms(&mut g, p, flipped, &target, 0.0).unwrap();
        assert!((g.scalar(two) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mix_loss_is_non_negative() {
        let (m, r) = tiny_models();
        let seq = assemble_tokens(&m, &scene(2, 6), false, &mut seeded(0)).unwrap();
        let l = mix_loss(&r, &seq, &[0.1, -0.2, 0.3, 0.4], 1e-3, &mut seeded(3)).unwrap();
        assert!(l >= 0.0);
        assert!(mix_loss(&r, &seq, &[0.0; 4], 1e-3, &mut seeded(3)).is_err());
    }

    #[test]
    fn mix_gradient_passes_grad_check() {
        let (m, r) = tiny_models();
        let r64 = r.cast::<f64>();
        let seqs: Vec<TokenSequence> = (0..4)
            .map(|i| assemble_tokens(&m, &scene(1 + i, 20 + i as u64), false, &mut seeded(0)).unwrap())
            .collect();
        let target = normal_matrix::<f64, _>(4, 4, &mut seeded(7));
        let report = grad_check(&r64.params, &GradCheckOptions::default(), |g, p| {
            let post = r64.posterior(g, p, &seqs)?;
            let a = crate::nn::reparameterize(g, post.mu, post.logvar, &mut seeded(13));
            Ok(mix_terms(g, post, a, &target, 1e-3)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let (_, r) = tiny_models();
        assert!(RemixerModel::from_params(r.arch.clone(), r.params.clone()).is_ok());
        let mut bad = r.params.clone();
        bad.insert(CLS_TOKEN, Array2::zeros((1, 3)));
        assert!(RemixerModel::from_params(r.arch.clone(), bad).is_err());
        let mut arch = r.arch.clone();
        arch.head_layers = vec![6, 3];
        assert!(matches!(RemixerModel::<f32>::new(arch, &mut seeded(0)), Err(Error::Config(_))));
    }
}
