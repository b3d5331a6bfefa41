//! A learned [cls] token attending over a set of rows, read out through
//! variational mean and log-variance heads.

use ndarray::Array2;
use rand::Rng;

use super::attention::AttentionBlock;
use super::graph::{Graph, Var};
use super::layers::{Mlp, Posterior};
use super::tensor::{normal_matrix, ParamSet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClsPooler {
    pub cls: String,
    pub width: usize,
    pub block: AttentionBlock,
    pub mean_head: Mlp,
    pub logvar_head: Mlp,
}

impl ClsPooler {
    /// Parameters live under `{prefix}.cls`, `{prefix}.block`,
    /// `{prefix}.mean_head` and `{prefix}.logvar_head`.
    pub fn new(prefix: &str, width: usize, ff_hidden: usize, head_layers: &[usize]) -> Self {
        Self {
            cls: format!("{prefix}.cls"),
            width,
            block: AttentionBlock::new(&format!("{prefix}.block"), width, ff_hidden),
            mean_head: Mlp::new(&format!("{prefix}.mean_head"), width, head_layers),
            logvar_head: Mlp::new(&format!("{prefix}.logvar_head"), width, head_layers),
        }
    }

    pub fn output_width(&self) -> usize {
        self.mean_head.output_width()
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        params.insert(self.cls.clone(), normal_matrix::<F, _>(1, self.width, rng).mapv(|x| x * F::of(0.02)));
        self.block.init(params, rng);
        self.mean_head.init(params, rng);
        self.logvar_head.init(params, rng);
    }

    /// One posterior row per input; every row of every input is attended.
    pub fn posterior<F: Real>(&self, g: &mut Graph<F>, params: &ParamSet<F>, inputs: &[Array2<F>]) -> Result<Posterior> {
        if inputs.is_empty() {
            return Err(Error::Precondition("empty pooling batch".into()));
        }
        let cls = g.param(params, &self.cls)?;
        let mut rows: Option<Var> = None;
        for x in inputs {
            if x.ncols() != self.width {
                return Err(Error::dim("pooled token width", self.width, x.ncols()));
            }
            if x.nrows() == 0 {
                return Err(Error::DegenerateInput("no tokens to pool".into()));
            }
            let x = g.constant(x.clone());
            let full = g.concat_rows(cls, x);
            let mask = vec![true; g.shape(full).0];
            let y = self.block.forward(g, params, full, &mask)?;
            let head = g.rows(y, 0, 1);
            rows = Some(match rows {
                Some(r) => g.concat_rows(r, head),
                None => head,
            });
        }
        let h = rows.expect("non-empty batch");
        let mu = self.mean_head.forward(g, params, h)?;
        let logvar = self.logvar_head.forward(g, params, h)?;
        Ok(Posterior { mu, logvar })
    }

    /// Eval-mode `(mu, logvar)` for one input, each `1 x output_width`.
    pub fn posterior_arrays<F: Real>(&self, params: &ParamSet<F>, input: &Array2<F>) -> Result<(Array2<F>, Array2<F>)> {
        let mut g = Graph::new();
        let p = self.posterior(&mut g, params, std::slice::from_ref(input))?;
        g.check_finite()?;
        Ok((g.value(p.mu).clone(), g.value(p.logvar).clone()))
    }
}

/// Per-batch `mean(1 - sim(target, out)) + kl_weight * KL`; returns the
/// total and its two terms. Targets are l2-normalised row by row.
pub fn cosine_kl_terms<F: Real>(
    g: &mut Graph<F>,
    posterior: Posterior,
    out: Var,
    target: &Array2<F>,
    kl_weight: f64,
) -> Result<(Var, Var, Var)> {
    let (n, d) = g.shape(out);
    if target.dim() != (n, d) {
        return Err(Error::dim("target width", d, target.ncols()));
    }
    let mut tn = target.clone();
    for mut row in tn.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == F::zero() {
            return Err(Error::Domain("zero target embedding".into()));
        }
        row.mapv_inplace(|x| x / norm);
    }
    let on = g.row_normalize(out);
    let prod = g.mul_const(on, tn);
    let s = g.sum(prod);
    let neg = g.scale(s, F::of(-1.0 / n as f64));
    let cos = g.add_scalar(neg, F::one());
    let kl = super::layers::kl_standard_normal(g, posterior.mu, posterior.logvar);
    let wkl = g.scale(kl, F::of(kl_weight));
    let total = g.add(cos, wkl);
    Ok((total, cos, kl))
}
