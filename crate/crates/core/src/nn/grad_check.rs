//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_per_tensor: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_tensor: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares backprop gradients of `loss` against central differences.
///
/// `loss` must rebuild the same computation from scratch on every call
/// (including re-seeding any randomness) so that it is a deterministic
/// function of the parameters. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<L>(params: &ParamSet<f64>, opts: &GradCheckOptions, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    g.check_finite()?;
    let grads = g.backward(l);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.scalar(l))
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let analytic = grads.get(name).map(|a| a.as_standard_layout()[(idx / a.ncols(), idx % a.ncols())]).unwrap_or(0.0);
            let orig = value.as_slice().unwrap()[idx];
            let set = |p: &mut ParamSet<f64>, x: f64| {
                p.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = x;
            };
            set(&mut probe, orig + opts.eps);
            let plus = eval(&probe)?;
            set(&mut probe, orig - opts.eps);
            let minus = eval(&probe)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of `{name}`[{idx}]")));
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
