use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::Linear;
use super::tensor::{ParamSet, Real};
use crate::error::{Error, Result};

/// Free-function form of [`Graph::efficient_attention`].
pub fn efficient_attention<F: Real>(g: &mut Graph<F>, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
    g.efficient_attention(q, k, v, key_mask)
}

/// One attention module: efficient attention with a residual, a two-layer
/// feed-forward network, and a closing ELU. Invalid tokens leave the block
/// as zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub width: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

impl AttentionBlock {
    pub fn new(prefix: &str, width: usize, ff_hidden: usize) -> Self {
        Self {
            width,
            query: Linear::new(format!("{prefix}.query"), width, width),
            key: Linear::new(format!("{prefix}.key"), width, width),
            value: Linear::new(format!("{prefix}.value"), width, width),
            out: Linear::new(format!("{prefix}.out"), width, width),
            ff_in: Linear::new(format!("{prefix}.ff.0"), width, ff_hidden),
            ff_out: Linear::new(format!("{prefix}.ff.1"), ff_hidden, width),
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        for l in [&self.query, &self.key, &self.value, &self.out, &self.ff_in, &self.ff_out] {
            l.init(params, rng);
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamSet<F>, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, w) = g.shape(x);
        if w != self.width {
            return Err(Error::dim("attention block token width", self.width, w));
        }
        let q = self.query.forward(g, params, x)?;
        let k = self.key.forward(g, params, x)?;
        let v = self.value.forward(g, params, x)?;
        let a = g.efficient_attention(q, k, v, mask)?;
        let a = self.out.forward(g, params, a)?;
        let h = g.add(x, a);
        let f = self.ff_in.forward(g, params, h)?;
        let f = g.elu(f);
        let f = self.ff_out.forward(g, params, f)?;
        let y = g.add(h, f);
        let y = g.elu(y);
        let keep = Array2::from_shape_fn((n, w), |(i, _)| if mask[i] { F::one() } else { F::zero() });
        Ok(g.mul_const(y, keep))
    }
}
