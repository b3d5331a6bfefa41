//! Cross-modal sound-source manifold.
//!
//! Two variational projectors map visual and audio embeddings into a shared
//! manifold; a variational reconstructor maps manifold points back to the
//! audio embedding space.

pub mod kneedle;
pub mod loss;
pub mod train;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AudioEmbedding, EmbeddingDims};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, Posterior, Real, ResidualMlp, ResidualMlpConfig, Var, VariationalHead};

pub use kneedle::{kneedle_knee, CurveShape};
pub use loss::{ccmr_mask, contrastive_loss, fold_loss, recon_loss, CcmrConfig, FoldBreakdown, LogitMask, MaskApplication};
pub use train::{
    embed_pairs, ema_update, filter_noisy_pairs, FilterSummary, train_manifold, FilterOutcome, ManifoldEpochLog, ManifoldTrainConfig,
    ManifoldTrainOutput, MeanTeacherConfig,
};

pub const LOG_TEMPERATURE: &str = "log_temperature";
pub const CLIP_PREFIX: &str = "clip_projector";
pub const CLAP_PREFIX: &str = "clap_projector";
pub const RECON_PREFIX: &str = "reconstructor";
/// Initial temperature 1/0.07.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;
pub const MIN_TEMPERATURE: f64 = 1.0;
pub const MAX_TEMPERATURE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldArch {
    pub dims: EmbeddingDims,
    pub manifold_width: usize,
    pub projector_layers: Vec<usize>,
    pub reconstructor_layers: Vec<usize>,
    pub dropout_p: f64,
}

impl ManifoldArch {
    /// CLIP 768 / CLAP 512 widths, manifold 768, projector layers
    /// 768x2, 1536x2, 3072x2, reconstructor 768x2, 896x2, 1024x2, 2048x2.
    pub fn full() -> Self {
        Self {
            dims: EmbeddingDims::CLIP_CLAP,
            manifold_width: 768,
            projector_layers: groups(&[(768, 2), (1536, 2), (3072, 2)]),
            reconstructor_layers: groups(&[(768, 2), (896, 2), (1024, 2), (2048, 2)]),
            dropout_p: 0.2,
        }
    }

    /// The full layout scaled down by 12 for single-core CPU runs.
    pub fn desk() -> Self {
        Self {
            dims: EmbeddingDims { visual: 64, audio: 48 },
            manifold_width: 64,
            projector_layers: groups(&[(64, 2), (128, 2), (256, 2)]),
            reconstructor_layers: groups(&[(64, 2), (80, 2), (96, 2), (160, 2)]),
            dropout_p: 0.2,
        }
    }

    /// Minimal layout used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            dims: EmbeddingDims { visual: 5, audio: 4 },
            manifold_width: 5,
            projector_layers: groups(&[(5, 2), (6, 2)]),
            reconstructor_layers: groups(&[(5, 2), (7, 2)]),
            dropout_p: 0.2,
        }
    }

    fn projector_config(&self, input: usize) -> ResidualMlpConfig {
        ResidualMlpConfig {
            input_width: input,
            layer_widths: self.projector_layers.clone(),
            dropout_p: self.dropout_p,
        }
    }

    fn reconstructor_config(&self) -> ResidualMlpConfig {
        ResidualMlpConfig {
            input_width: self.manifold_width,
            layer_widths: self.reconstructor_layers.clone(),
            dropout_p: self.dropout_p,
        }
    }
}

fn groups(g: &[(usize, usize)]) -> Vec<usize> {
    ResidualMlpConfig::from_groups(0, g).layer_widths
}

/// One variational module: residual MLP trunk plus mean/log-variance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalMlp {
    pub trunk: ResidualMlp,
    pub head: VariationalHead,
}

impl VariationalMlp {
    fn new(prefix: &str, config: ResidualMlpConfig, output: usize) -> Self {
        let width = config.output_width();
        Self {
            trunk: ResidualMlp::new(&format!("{prefix}.trunk"), config),
            head: VariationalHead::new(&format!("{prefix}.head"), width, output),
        }
    }

    fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        self.trunk.init(params, rng);
        self.head.init(params, rng);
    }

    pub fn posterior<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Posterior> {
        let h = self.trunk.forward(g, params, x, train, rng)?;
        self.head.forward(g, params, h)
    }
}

/// Visual projector, audio projector, reconstructor and log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldModel<F: Real = f32> {
    pub arch: ManifoldArch,
    pub params: ParamSet<F>,
    pub clip_projector: VariationalMlp,
    pub clap_projector: VariationalMlp,
    pub reconstructor: VariationalMlp,
}

/// Output of one module pass on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub value: Var,
    pub posterior: Posterior,
}

impl<F: Real> ManifoldModel<F> {
    fn modules(arch: &ManifoldArch) -> (VariationalMlp, VariationalMlp, VariationalMlp) {
        (
            VariationalMlp::new(CLIP_PREFIX, arch.projector_config(arch.dims.visual), arch.manifold_width),
            VariationalMlp::new(CLAP_PREFIX, arch.projector_config(arch.dims.audio), arch.manifold_width),
            VariationalMlp::new(RECON_PREFIX, arch.reconstructor_config(), arch.dims.audio),
        )
    }

    pub fn new<R: Rng + ?Sized>(arch: ManifoldArch, rng: &mut R) -> Result<Self> {
        validate_arch(&arch)?;
        let (clip, clap, recon) = Self::modules(&arch);
        let mut params = ParamSet::new();
        clip.init(&mut params, rng);
        clap.init(&mut params, rng);
        recon.init(&mut params, rng);
        params.insert(LOG_TEMPERATURE, Array2::from_elem((1, 1), F::of(INIT_TEMPERATURE.ln())));
        Ok(Self {
            arch,
            params,
            clip_projector: clip,
            clap_projector: clap,
            reconstructor: recon,
        })
    }

    /// Rebuilds a model around existing tensors (e.g. from a checkpoint).
    pub fn from_params(arch: ManifoldArch, params: ParamSet<F>) -> Result<Self> {
        validate_arch(&arch)?;
        let (clip, clap, recon) = Self::modules(&arch);
        let mut probe = ParamSet::<F>::new();
        let mut rng = crate::data::seeded(0);
        clip.init(&mut probe, &mut rng);
        clap.init(&mut probe, &mut rng);
        recon.init(&mut probe, &mut rng);
        probe.insert(LOG_TEMPERATURE, Array2::zeros((1, 1)));
        check_tensors(&probe, &params)?;
        Ok(Self {
            arch,
            params,
            clip_projector: clip,
            clap_projector: clap,
            reconstructor: recon,
        })
    }

    pub fn cast<G: Real>(&self) -> ManifoldModel<G> {
        ManifoldModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
            clip_projector: self.clip_projector.clone(),
            clap_projector: self.clap_projector.clone(),
            reconstructor: self.reconstructor.clone(),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.params
            .get(LOG_TEMPERATURE)
            .map(|t| t[[0, 0]].as_f64().exp())
            .unwrap_or(INIT_TEMPERATURE)
    }

    /// Keeps the temperature within `[MIN_TEMPERATURE, MAX_TEMPERATURE]`.
    pub fn clamp_temperature(&mut self) {
        if let Some(t) = self.params.get_mut(LOG_TEMPERATURE) {
            let lo = F::of(MIN_TEMPERATURE.ln());
            let hi = F::of(MAX_TEMPERATURE.ln());
            t.mapv_inplace(|x| x.max(lo).min(hi));
        }
    }

    pub fn encode_visual<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        v: Var,
        train: bool,
        sample: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let posterior = self.clip_projector.posterior(g, params, v, train, rng)?;
        let value = posterior.draw(g, sample, rng);
        Ok(Encoded { value, posterior })
    }

    pub fn encode_audio<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        a: Var,
        train: bool,
        sample: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let posterior = self.clap_projector.posterior(g, params, a, train, rng)?;
        let value = posterior.draw(g, sample, rng);
        Ok(Encoded { value, posterior })
    }

    pub fn decode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        e: Var,
        train: bool,
        sample: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let posterior = self.reconstructor.posterior(g, params, e, train, rng)?;
        let value = posterior.draw(g, sample, rng);
        Ok(Encoded { value, posterior })
    }

    fn run_batch<R: Rng + ?Sized>(
        &self,
        x: &Array2<F>,
        expected: usize,
        context: &str,
        sample: bool,
        rng: &mut R,
        module: impl Fn(&Self, &mut Graph<F>, Var, bool, &mut R) -> Result<Encoded>,
    ) -> Result<Array2<F>> {
        if x.ncols() != expected {
            return Err(Error::dim(context, expected, x.ncols()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = module(self, &mut g, xv, sample, rng)?;
        g.check_finite()?;
        Ok(g.value(out.value).clone())
    }

    /// Eval-mode visual projection of a batch (rows are embeddings).
    pub fn project_visual_batch<R: Rng + ?Sized>(&self, v: &Array2<F>, sample: bool, rng: &mut R) -> Result<Array2<F>> {
        self.run_batch(v, self.arch.dims.visual, "visual projector input", sample, rng, |m, g, x, s, r| {
            m.encode_visual(g, &m.params, x, false, s, r)
        })
    }

    pub fn project_audio_batch<R: Rng + ?Sized>(&self, a: &Array2<F>, sample: bool, rng: &mut R) -> Result<Array2<F>> {
        self.run_batch(a, self.arch.dims.audio, "audio projector input", sample, rng, |m, g, x, s, r| {
            m.encode_audio(g, &m.params, x, false, s, r)
        })
    }

    pub fn reconstruct_batch<R: Rng + ?Sized>(&self, e: &Array2<F>, sample: bool, rng: &mut R) -> Result<Array2<F>> {
        self.run_batch(e, self.arch.manifold_width, "reconstructor input", sample, rng, |m, g, x, s, r| {
            m.decode(g, &m.params, x, false, s, r)
        })
    }
}

fn row<F: Real>(v: &[F]) -> Array2<F> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl ManifoldModel<f32> {
    /// `e = upsilon(v)`: the mean head output, or a reparameterised sample.
    pub fn project_visual<R: Rng + ?Sized>(&self, v: &[f32], rng: &mut R, sample: bool) -> Result<Vec<f32>> {
        Ok(self.project_visual_batch(&row(v), sample, rng)?.into_raw_vec_and_offset().0)
    }

    /// `e = phi(a)`.
    pub fn project_audio<R: Rng + ?Sized>(&self, a: &[f32], rng: &mut R, sample: bool) -> Result<Vec<f32>> {
        Ok(self.project_audio_batch(&row(a), sample, rng)?.into_raw_vec_and_offset().0)
    }

    /// `chi(e)` mapped back to audio-embedding width (not normalised).
    pub fn reconstruct<R: Rng + ?Sized>(&self, e: &[f32], rng: &mut R, sample: bool) -> Result<AudioEmbedding> {
        let out = self.reconstruct_batch(&row(e), sample, rng)?;
        Ok(AudioEmbedding::new(out.into_raw_vec_and_offset().0))
    }
}

fn validate_arch(arch: &ManifoldArch) -> Result<()> {
    if arch.dims.visual == 0 || arch.dims.audio == 0 || arch.manifold_width == 0 {
        return Err(Error::Config("manifold widths must be positive".into()));
    }
    if arch.projector_layers.is_empty() || arch.reconstructor_layers.is_empty() {
        return Err(Error::Config("manifold modules need at least one layer".into()));
    }
    if !(0.0..1.0).contains(&arch.dropout_p) {
        return Err(Error::Config("dropout must lie in [0, 1)".into()));
    }
    Ok(())
}

/// Every expected tensor is present with the expected shape.
pub(crate) fn check_tensors<F: Real>(expected: &ParamSet<F>, got: &ParamSet<F>) -> Result<()> {
    for (name, t) in expected.iter() {
        let have = got.require(name)?;
        if have.dim() != t.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                have.dim(),
                t.dim()
            )));
        }
    }
    if got.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    Ok(())
}
