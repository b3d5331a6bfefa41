//! Contrastive, reconstruction and folded objectives, plus the CCMR mask.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ManifoldModel, LOG_TEMPERATURE};
use crate::error::{Error, Result};
use crate::nn::{kl_standard_normal, Graph, ParamSet, Real, Var};

pub const DEFAULT_ALPHA: f64 = 0.35;
pub const DEFAULT_LAMBDA1: f64 = 1e-3;

/// How the mask enters the contrastive logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskApplication {
    /// Scales each softmax term: `exp(C_ij) * M_ij`, i.e. `C_ij + ln M_ij`.
    #[default]
    Weight,
    /// Scales the logits themselves: `C_ij * M_ij`.
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcmrConfig {
    pub alpha: f64,
    #[serde(default)]
    pub application: MaskApplication,
}

impl Default for CcmrConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            application: MaskApplication::Weight,
        }
    }
}

impl CcmrConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    /// Mask of one batch, ready to apply to its logits.
    pub fn prepare<F: Real>(&self, v: &Array2<F>, a: &Array2<F>) -> Result<LogitMask<F>> {
        let m = ccmr_mask(v, a, self.alpha)?;
        Ok(match self.application {
            MaskApplication::Weight => LogitMask::Shift(m.mapv(|x| x.ln())),
            MaskApplication::Logit => LogitMask::Scale(m),
        })
    }
}

/// A prepared batch mask.
#[derive(Clone, Debug, PartialEq)]
pub enum LogitMask<F> {
    /// Added to the logits (`ln M`).
    Shift(Array2<F>),
    /// Multiplied into the logits (`M`).
    Scale(Array2<F>),
}

impl<F: Real> LogitMask<F> {
    fn dim(&self) -> (usize, usize) {
        match self {
            LogitMask::Shift(m) | LogitMask::Scale(m) => m.dim(),
        }
    }
}

fn normalized_rows_f64<F: Real>(x: &Array2<F>) -> Array2<f64> {
    let mut out = x.mapv(|v| v.as_f64());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// `M_ij = exp(-alpha * clamp(simV_ij * simA_ij)^alpha)` with clamp to
/// `[0, 1]`. `alpha = 0` gives the all-ones mask.
pub fn ccmr_mask<F: Real>(v: &Array2<F>, a: &Array2<F>, alpha: f64) -> Result<Array2<F>> {
    if v.nrows() != a.nrows() {
        return Err(Error::dim("ccmr_mask batch", v.nrows(), a.nrows()));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Config("CCMR alpha must be non-negative".into()));
    }
    let vn = normalized_rows_f64(v);
    let an = normalized_rows_f64(a);
    let sim_v = vn.dot(&vn.t());
    let sim_a = an.dot(&an.t());
    Ok(ndarray::Zip::from(&sim_v)
        .and(&sim_a)
        .map_collect(|&x, &y| F::of(ccmr_entry(x * y, alpha))))
}

/// Mask value for one (unclamped) similarity product.
pub fn ccmr_entry(product: f64, alpha: f64) -> f64 {
    let p = product.clamp(0.0, 1.0);
    (-alpha * p.powf(alpha)).exp()
}

/// Symmetric InfoNCE on `C = tau * z_clip z_clap^T` (rows l2-normalised),
/// optionally masked element-wise. Returns the negated mean log-likelihood
/// of the diagonal, averaged over both directions.
pub fn contrastive_terms<F: Real>(
    g: &mut Graph<F>,
    e_clip: Var,
    e_clap: Var,
    log_tau: Var,
    mask: Option<&LogitMask<F>>,
) -> Result<Var> {
    let (n, d) = g.shape(e_clip);
    let (n2, d2) = g.shape(e_clap);
    if n != n2 || d != d2 {
        return Err(Error::dim("contrastive batch", n, n2));
    }
    let zc = g.row_normalize(e_clip);
    let za = g.row_normalize(e_clap);
    let zat = g.transpose(za);
    let s = g.matmul(zc, zat);
    let tau = g.exp(log_tau);
    let mut c = g.scale_by(s, tau);
    if let Some(m) = mask {
        if m.dim() != (n, n) {
            return Err(Error::dim("contrastive mask", n, m.dim().0));
        }
        c = match m {
            LogitMask::Shift(s) => {
                let s = g.constant(s.clone());
                g.add(c, s)
            }
            LogitMask::Scale(s) => g.mul_const(c, s.clone()),
        };
    }
    let rows = g.log_softmax_rows(c);
    let d_clip = g.diag(rows);
    let ct = g.transpose(c);
    let cols = g.log_softmax_rows(ct);
    let d_clap = g.diag(cols);
    let both = g.add(d_clip, d_clap);
    let total = g.sum(both);
    Ok(g.scale(total, F::of(-0.5 / n as f64)))
}

/// Mean over the batch of `((1 - sim(a, r1)) + (1 - sim(a, r2))) / 2`.
pub fn recon_terms<F: Real>(g: &mut Graph<F>, target: &Array2<F>, rec_a: Var, rec_b: Var) -> Result<Var> {
    let n = target.nrows();
    let mut tn = target.clone();
    for mut row in tn.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == F::zero() {
            return Err(Error::Domain("reconstruction target is a zero vector".into()));
        }
        row.mapv_inplace(|x| x / norm);
    }
    let mut sims = Vec::with_capacity(2);
    for r in [rec_a, rec_b] {
        if g.shape(r) != target.dim() {
            return Err(Error::dim("reconstruction width", target.ncols(), g.shape(r).1));
        }
        if g.value(r).rows().into_iter().any(|row| row.iter().all(|&x| x == F::zero())) {
            return Err(Error::Domain("cosine similarity of a zero reconstruction".into()));
        }
        let rn = g.row_normalize(r);
        let prod = g.mul_const(rn, tn.clone());
        sims.push(g.sum_rows(prod));
    }
    let both = g.add(sims[0], sims[1]);
    let total = g.sum(both);
    let neg = g.scale(total, F::of(-0.5 / n as f64));
    Ok(g.add_scalar(neg, F::one()))
}

/// Loss nodes of one folded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FoldGraph {
    pub total: Var,
    pub contrastive: Var,
    pub recon: Var,
    /// KL of both projectors plus the reconstructor.
    pub kl: Var,
    /// KL of the reconstructor alone.
    pub kl_reconstructor: Var,
    pub e_clip: Var,
    pub e_clap: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub recon: f64,
    pub kl: f64,
}

impl FoldGraph {
    pub fn breakdown<F: Real>(&self, g: &Graph<F>) -> FoldBreakdown {
        FoldBreakdown {
            total: g.scalar(self.total).as_f64(),
            contrastive: g.scalar(self.contrastive).as_f64(),
            recon: g.scalar(self.recon).as_f64(),
            kl: g.scalar(self.kl).as_f64(),
        }
    }
}

/// Records `L_fold = L_c + L_r + lambda1 * L_kl` on `g`.
///
/// Randomness is consumed in a fixed order: visual projector, audio
/// projector, reconstructor on the audio side, reconstructor on the visual
/// side. The reconstructor's KL is the mean over its two applications.
#[allow(clippy::too_many_arguments)]
pub fn build_fold<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    model: &ManifoldModel<F>,
    params: &ParamSet<F>,
    v: &Array2<F>,
    a: &Array2<F>,
    mask: Option<&LogitMask<F>>,
    lambda1: f64,
    train: bool,
    rng: &mut R,
) -> Result<FoldGraph> {
    if v.nrows() != a.nrows() {
        return Err(Error::dim("fold batch", v.nrows(), a.nrows()));
    }
    if v.nrows() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let sample = train;
    let vx = g.constant(v.clone());
    let ax = g.constant(a.clone());
    let clip = model.encode_visual(g, params, vx, train, sample, rng)?;
    let clap = model.encode_audio(g, params, ax, train, sample, rng)?;
    let rec_clap = model.decode(g, params, clap.value, train, sample, rng)?;
    let rec_clip = model.decode(g, params, clip.value, train, sample, rng)?;

    let log_tau = g.param(params, LOG_TEMPERATURE)?;
    let contrastive = contrastive_terms(g, clip.value, clap.value, log_tau, mask)?;
    let recon = recon_terms(g, a, rec_clap.value, rec_clip.value)?;

    let kl_v = kl_standard_normal(g, clip.posterior.mu, clip.posterior.logvar);
    let kl_a = kl_standard_normal(g, clap.posterior.mu, clap.posterior.logvar);
    let kl_r1 = kl_standard_normal(g, rec_clap.posterior.mu, rec_clap.posterior.logvar);
    let kl_r2 = kl_standard_normal(g, rec_clip.posterior.mu, rec_clip.posterior.logvar);
    let kl_r = g.add(kl_r1, kl_r2);
    let kl_r = g.scale(kl_r, F::of(0.5));
    let kl_proj = g.add(kl_v, kl_a);
    let kl = g.add(kl_proj, kl_r);

    let cr = g.add(contrastive, recon);
    let weighted = g.scale(kl, F::of(lambda1));
    let total = g.add(cr, weighted);
    Ok(FoldGraph {
        total,
        contrastive,
        recon,
        kl,
        kl_reconstructor: kl_r,
        e_clip: clip.value,
        e_clap: clap.value,
    })
}

/// Train-mode (sampled) `L_fold` and its terms. `ccmr = None` runs the
/// mask-free objective.
pub fn fold_loss<F: Real, R: Rng + ?Sized>(
    model: &ManifoldModel<F>,
    v: &Array2<F>,
    a: &Array2<F>,
    ccmr: Option<CcmrConfig>,
    lambda1: f64,
    rng: &mut R,
) -> Result<FoldBreakdown> {
    let mask = ccmr.map(|c| c.prepare(v, a)).transpose()?;
    let mut g = Graph::new();
    let fold = build_fold(&mut g, model, &model.params, v, a, mask.as_ref(), lambda1, true, rng)?;
    g.check_finite()?;
    Ok(fold.breakdown(&g))
}

/// `L_c` on sampled manifold embeddings of a batch.
pub fn contrastive_loss<F: Real, R: Rng + ?Sized>(
    model: &ManifoldModel<F>,
    v: &Array2<F>,
    a: &Array2<F>,
    mask: Option<&LogitMask<F>>,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let vx = g.constant(v.clone());
    let ax = g.constant(a.clone());
    let clip = model.encode_visual(&mut g, &model.params, vx, true, true, rng)?;
    let clap = model.encode_audio(&mut g, &model.params, ax, true, true, rng)?;
    let log_tau = g.param(&model.params, LOG_TEMPERATURE)?;
    let l = contrastive_terms(&mut g, clip.value, clap.value, log_tau, mask)?;
    g.check_finite()?;
    Ok(g.scalar(l).as_f64())
}

/// `L_r` with both reconstructions sampled in train mode.
pub fn recon_loss<F: Real, R: Rng + ?Sized>(
    model: &ManifoldModel<F>,
    v: &Array2<F>,
    a: &Array2<F>,
    rng: &mut R,
) -> Result<f64> {
    if a.nrows() == 0 {
        return Err(Error::Precondition("recon_loss needs at least one pair".into()));
    }
    let mut g = Graph::new();
    let fold = build_fold(&mut g, model, &model.params, v, a, None, 0.0, true, rng)?;
    g.check_finite()?;
    Ok(g.scalar(fold.recon).as_f64())
}
