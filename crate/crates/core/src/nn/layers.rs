//! Dense layers, residual MLP stacks and variational heads.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{normal_matrix, ParamSet, Real};
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Fully connected layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Kaiming-uniform weights (negative slope sqrt(5), i.e. bound
    /// `1/sqrt(fan_in)`), zero bias.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        let bound = (1.0 / self.input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((self.input, self.output), || {
            F::of(rng.random_range(-bound..bound))
        });
        params.insert(self.weight_name(), w);
        params.insert(self.bias_name(), Array2::zeros((1, self.output)));
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamSet<F>, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.input {
            return Err(Error::dim(format!("linear `{}` input", self.name), self.input, width));
        }
        let w = g.param(params, &self.weight_name())?;
        let b = g.param(params, &self.bias_name())?;
        let xw = g.matmul(x, w);
        Ok(g.add_row(xw, b))
    }
}

/// Inverted dropout. A no-op (and consumes no randomness) when `p == 0` or
/// outside training.
pub fn dropout<F: Real, R: Rng + ?Sized>(g: &mut Graph<F>, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
    if !train || p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let scale = if keep > 0.0 { F::of(1.0 / keep) } else { F::zero() };
    let (r, c) = g.shape(x);
    let mask = Array2::from_shape_simple_fn((r, c), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            scale
        }
    });
    g.mul_const(x, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualMlpConfig {
    pub input_width: usize,
    /// Output width of each linear layer, in order.
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl ResidualMlpConfig {
    pub fn new(input_width: usize, layer_widths: Vec<usize>) -> Self {
        Self {
            input_width,
            layer_widths,
            dropout_p: DEFAULT_DROPOUT,
        }
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&self.input_width)
    }

    /// Widths given as `(width, repeat)` groups, e.g. `[(768, 2), (1536, 2)]`.
    pub fn from_groups(input_width: usize, groups: &[(usize, usize)]) -> Self {
        let widths = groups
            .iter()
            .flat_map(|&(w, n)| std::iter::repeat_n(w, n))
            .collect();
        Self::new(input_width, widths)
    }
}

/// ELU MLP with a residual connection every two layers.
///
/// Layers are consumed in equal-width pairs. A pair maps `h` to
/// `skip + act(L2(act(L1(h))))`, where `skip` is `h` itself when the widths
/// agree and the first layer's activation otherwise. A trailing unpaired
/// layer is applied without a skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub config: ResidualMlpConfig,
    layers: Vec<Linear>,
}

impl ResidualMlp {
    pub fn new(prefix: &str, config: ResidualMlpConfig) -> Self {
        let mut input = config.input_width;
        let layers = config
            .layer_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(format!("{prefix}.layers.{i}"), input, w);
                input = w;
                l
            })
            .collect();
        Self { config, layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward<F: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.config.input_width {
            return Err(Error::dim("residual MLP input", self.config.input_width, width));
        }
        let p = self.config.dropout_p;
        let mut h = x;
        let mut k = 0;
        while k < self.layers.len() {
            let paired = k + 1 < self.layers.len() && self.layers[k].output == self.layers[k + 1].output;
            let a = self.layers[k].forward(g, params, h)?;
            let a = g.elu(a);
            let a = dropout(g, a, p, train, rng);
            if paired {
                let b = self.layers[k + 1].forward(g, params, a)?;
                let b = g.elu(b);
                let b = dropout(g, b, p, train, rng);
                let skip = if g.shape(h).1 == self.layers[k + 1].output { h } else { a };
                h = g.add(skip, b);
                k += 2;
            } else {
                h = a;
                k += 1;
            }
        }
        Ok(h)
    }
}

/// Plain ELU MLP: activations between layers, none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, widths: &[usize]) -> Self {
        let mut prev = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(format!("{prefix}.{i}"), prev, w);
                prev = w;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamSet<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, params, h)?;
            if i + 1 < self.layers.len() {
                h = g.elu(h);
            }
        }
        Ok(h)
    }
}

/// Mean and log-variance heads reading the same features.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalHead {
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub output_dim: usize,
}

impl VariationalHead {
    pub fn new(prefix: &str, input: usize, output_dim: usize) -> Self {
        Self {
            mean_head: Linear::new(format!("{prefix}.mean"), input, output_dim),
            logvar_head: Linear::new(format!("{prefix}.logvar"), input, output_dim),
            output_dim,
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) {
        self.mean_head.init(params, rng);
        self.logvar_head.init(params, rng);
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamSet<F>, h: Var) -> Result<Posterior> {
        let mu = self.mean_head.forward(g, params, h)?;
        let logvar = self.logvar_head.forward(g, params, h)?;
        Ok(Posterior { mu, logvar })
    }
}

/// Diagonal Gaussian parameters living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub logvar: Var,
}

impl Posterior {
    /// Reparameterised sample when `sample` is set, otherwise the mean.
    pub fn draw<F: Real, R: Rng + ?Sized>(&self, g: &mut Graph<F>, sample: bool, rng: &mut R) -> Var {
        if sample {
            reparameterize(g, self.mu, self.logvar, rng)
        } else {
            self.mu
        }
    }
}

/// `mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn row-major from `rng`.
pub fn reparameterize<F: Real, R: Rng + ?Sized>(g: &mut Graph<F>, mu: Var, logvar: Var, rng: &mut R) -> Var {
    assert_eq!(g.shape(mu), g.shape(logvar), "reparameterize shape");
    let (r, c) = g.shape(mu);
    let eps = normal_matrix::<F, _>(r, c, rng);
    let half = g.scale(logvar, F::of(0.5));
    let std = g.exp(half);
    let noise = g.mul_const(std, eps);
    g.add(mu, noise)
}

/// Same arithmetic as [`reparameterize`] on plain arrays.
pub fn reparameterize_array<F: Real, R: Rng + ?Sized>(mu: &Array2<F>, logvar: &Array2<F>, rng: &mut R) -> Array2<F> {
    let (r, c) = mu.dim();
    let eps = normal_matrix::<F, _>(r, c, rng);
    let half = F::of(0.5);
    let noise = logvar.mapv(|x| (x * half).exp()) * &eps;
    mu + &noise
}

/// Batch mean of `-1/2 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_standard_normal<F: Real>(g: &mut Graph<F>, mu: Var, logvar: Var) -> Var {
    let batch = g.shape(mu).0.max(1);
    let one_plus = g.add_scalar(logvar, F::one());
    let mu2 = g.square(mu);
    let ev = g.exp(logvar);
    let t = g.sub(one_plus, mu2);
    let t = g.sub(t, ev);
    let s = g.sum(t);
    g.scale(s, F::of(-0.5 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weight_identity_width_passes_input_through() {
        let mlp = ResidualMlp::new("m", ResidualMlpConfig::new(4, vec![4, 4]));
        let mut params = ParamSet::<f64>::new();
        mlp.init(&mut params, &mut rng(0));
        for (_, t) in params.iter_mut() {
            t.fill(0.0);
        }
        let x = ndarray::array![[0.3, -1.2, 2.0, 0.0], [5.0, 1.0, -3.0, 0.25]];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp.forward(&mut g, &params, xv, false, &mut rng(1)).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_dropout_train_and_eval_agree() {
        let mut cfg = ResidualMlpConfig::new(5, vec![6, 6, 3]);
        cfg.dropout_p = 0.0;
        let mlp = ResidualMlp::new("m", cfg);
        let mut params = ParamSet::<f32>::new();
        mlp.init(&mut params, &mut rng(3));
        let x = normal_matrix::<f32, _>(3, 5, &mut rng(4));
        let run = |train| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = mlp.forward(&mut g, &params, xv, train, &mut rng(9)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn input_width_mismatch_is_a_dimension_error() {
        let mlp = ResidualMlp::new("m", ResidualMlpConfig::new(5, vec![5, 5]));
        let mut params = ParamSet::<f32>::new();
        mlp.init(&mut params, &mut rng(0));
        let mut g = Graph::new();
        let x = g.constant(Array2::zeros((2, 4)));
        let err = mlp.forward(&mut g, &params, x, false, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 5, got: 4, .. }));
    }

    #[test]
    fn residual_mlp_jvp_matches_central_differences() {
        // Directional derivative of a random residual MLP (with dropout active
        // under a fixed mask) against central differences at step 1e-5.
        let mlp = ResidualMlp::new("m", ResidualMlpConfig::new(4, vec![4, 4, 6, 6, 3]));
        let mut params = ParamSet::<f64>::new();
        mlp.init(&mut params, &mut rng(11));
        let x = normal_matrix::<f64, _>(3, 4, &mut rng(12));
        let dir = normal_matrix::<f64, _>(3, 4, &mut rng(13));
        let probe = normal_matrix::<f64, _>(3, 3, &mut rng(14));
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = mlp.forward(&mut g, &params, xv, true, &mut rng(15)).unwrap();
            g.value(y).clone()
        };
        // Analytic J v through the probe: d/dt <probe, f(x + t v)> = <J^T probe, v>.
        let mut ps = params.clone();
        ps.insert("x", x.clone());
        let mut g = Graph::new();
        let xv = g.param(&ps, "x").unwrap();
        let y = mlp.forward(&mut g, &ps, xv, true, &mut rng(15)).unwrap();
        let yp = g.mul_const(y, probe.clone());
        let loss = g.sum(yp);
        let gx = g.backward(loss).get("x").unwrap().clone();
        let analytic: f64 = (&gx * &dir).sum();
        let h = 1e-5;
        let plus = eval(&(&x + &(&dir * h)));
        let minus = eval(&(&x - &(&dir * h)));
        let jvp = (&plus - &minus) / (2.0 * h);
        let numeric: f64 = (&jvp * &probe).sum();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn zero_variance_eval_returns_mean() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(ndarray::array![[0.5, -2.0]]);
        let lv = g.constant(ndarray::array![[f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        let post = Posterior { mu, logvar: lv };
        let out = post.draw(&mut g, false, &mut rng(0));
        assert_eq!(g.value(out), g.value(mu));
        // Sampling with -inf log-variance also collapses onto the mean.
        let s = reparameterize_array(g.value(mu), g.value(lv), &mut rng(0));
        assert_eq!(&s, g.value(mu));
    }

    #[test]
    fn reparameterize_is_seed_deterministic_and_matches_array_path() {
        let mu = normal_matrix::<f32, _>(2, 3, &mut rng(1));
        let lv = normal_matrix::<f32, _>(2, 3, &mut rng(2));
        let draw = || {
            let mut g = Graph::new();
            let m = g.constant(mu.clone());
            let l = g.constant(lv.clone());
            let s = reparameterize(&mut g, m, l, &mut rng(7));
            g.value(s).clone()
        };
        assert_eq!(draw(), draw());
        assert_eq!(draw(), reparameterize_array(&mu, &lv, &mut rng(7)));
    }

    #[test]
    fn reparameterize_monte_carlo_mean_is_near_zero() {
        let n = 100_000;
        let mu = Array2::<f64>::zeros((n, 3));
        let lv = Array2::<f64>::zeros((n, 3));
        let s = reparameterize_array(&mu, &lv, &mut rng(21));
        for m in s.mean_axis(ndarray::Axis(0)).unwrap() {
            assert!(m.abs() < 0.02, "coordinate mean {m}");
        }
    }

    #[test]
    fn kl_closed_forms() {
        let d = 5;
        let mut g = Graph::<f64>::new();
        let mu0 = g.constant(Array2::zeros((3, d)));
        let lv0 = g.constant(Array2::zeros((3, d)));
        let k0 = kl_standard_normal(&mut g, mu0, lv0);
        assert_eq!(g.scalar(k0), 0.0);
        let mu1 = g.constant(Array2::ones((3, d)));
        let k1 = kl_standard_normal(&mut g, mu1, lv0);
        assert!((g.scalar(k1) - d as f64 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_passes_grad_check() {
        let mut params = ParamSet::<f64>::new();
        params.insert("mu", normal_matrix(4, 3, &mut rng(5)));
        params.insert("logvar", normal_matrix(4, 3, &mut rng(6)));
        let report = grad_check(&params, &GradCheckOptions::default(), |g, p| {
            let mu = g.param(p, "mu")?;
            let lv = g.param(p, "logvar")?;
            Ok(kl_standard_normal(g, mu, lv))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
