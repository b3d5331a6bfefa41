//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] replays the tape in reverse and returns gradients for
//! every parameter leaf that was read through [`Graph::param`].

use std::cmp::Ordering;
use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{s, Array2, Axis};

use super::tensor::{all_finite, ParamSet, Real};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionCache<F> {
    q: Var,
    k: Var,
    v: Var,
    valid: Vec<usize>,
    weights: Array2<F>,
    context: Array2<F>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<F>),
    Scale(Var, F),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Elu(Var),
    Exp(Var),
    Square(Var),
    Transpose(Var),
    Sum(Var),
    SumRows(Var),
    RowNormalize(Var),
    LogSoftmaxRows(Var),
    Diag(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Rows(Var, usize),
    Attention(Box<AttentionCache<F>>),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    leaf_names: HashMap<usize, String>,
    first_non_finite: Option<&'static str>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F: Real> {
    grads: IndexMap<String, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Array2<F>) {
        self.grads.insert(name.into(), g);
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<F>, weight: F) {
        for (k, g) in other.iter() {
            match self.grads.get_mut(k) {
                Some(acc) => acc.scaled_add(weight, g),
                None => {
                    self.grads.insert(k.clone(), g.mapv(|x| x * weight));
                }
            }
        }
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_names: HashMap::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, name: &'static str) -> Var {
        if self.first_non_finite.is_none() && !all_finite(&value) {
            self.first_non_finite = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Fails if any recorded op produced NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite(format!("output of `{op}`"))),
            None => Ok(()),
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    /// Reads parameter `name`; repeated reads share one leaf.
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.require(name)?.clone();
        let v = self.push(value, Op::Leaf, "param");
        self.params.insert(name.to_string(), v);
        self.leaf_names.insert(v.0, name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), "add")
    }

    /// `a + b` where `b` is a `1 x m` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a single-row bias");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<F>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const shape");
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c), "mul_const")
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddScalar(a), "add_scalar")
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a).mapv(|x| x * k);
        self.push(value, Op::ScaleBy(a, s), "scale_by")
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > F::zero() { x } else { x.exp() - F::one() });
        self.push(value, Op::Elu(a), "elu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), "square")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Per-row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a), "sum_rows")
    }

    /// Scales every row to unit l2 norm. A zero row yields NaN and is caught
    /// by [`Graph::check_finite`].
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        self.push(value, Op::RowNormalize(a), "row_normalize")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(F::zero(), |acc, &x| acc + (x - max).exp()).ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.dim();
        assert_eq!(r, c, "diag of non-square matrix");
        let value = Array2::from_shape_fn((r, 1), |(i, _)| m[[i, i]]);
        self.push(value, Op::Diag(a), "diag")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row counts match");
        self.push(value, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows column counts match");
        self.push(value, Op::ConcatRows(a, b), "concat_rows")
    }

    /// Rows `start..start+len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::Rows(a, start), "rows")
    }

    /// Single-head efficient attention.
    ///
    /// The keys are softmax-normalised over the valid tokens (per key
    /// channel), folded into a global context `G = softmax(K)^T V`, and each
    /// valid token emits `q_i G`. Invalid tokens get zero weight and a zero
    /// output row. Context sums run over the valid tokens in a canonical
    /// order (lexicographic on the key/value rows), so the result is
    /// bit-identical under any permutation of the tokens.
    pub fn efficient_attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let (n, dk) = self.shape(q);
        let (nk, dk2) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if nk != n || nv != n {
            return Err(Error::dim("efficient_attention token count", n, if nk != n { nk } else { nv }));
        }
        if dk2 != dk {
            return Err(Error::dim("efficient_attention key width", dk, dk2));
        }
        if mask.len() != n {
            return Err(Error::dim("efficient_attention mask length", n, mask.len()));
        }
        let mut valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Err(Error::DegenerateInput("all attention tokens are masked".into()));
        }
        let kv = self.value(k);
        let vv = self.value(v);
        valid.sort_by(|&a, &b| {
            lexicographic(kv.row(a).iter(), kv.row(b).iter())
                .then_with(|| lexicographic(vv.row(a).iter(), vv.row(b).iter()))
        });

        let mut weights = Array2::<F>::zeros((n, dk));
        for c in 0..dk {
            let max = valid.iter().fold(F::neg_infinity(), |m, &j| m.max(kv[[j, c]]));
            let mut total = F::zero();
            for &j in &valid {
                let e = (kv[[j, c]] - max).exp();
                weights[[j, c]] = e;
                total = total + e;
            }
            for &j in &valid {
                weights[[j, c]] = weights[[j, c]] / total;
            }
        }
        let mut context = Array2::<F>::zeros((dk, dv));
        for &j in &valid {
            for c in 0..dk {
                let w = weights[[j, c]];
                let vrow = vv.row(j);
                let mut crow = context.row_mut(c);
                crow.zip_mut_with(&vrow, |acc, &x| *acc = *acc + w * x);
            }
        }
        let qv = self.value(q);
        let mut out = Array2::<F>::zeros((n, dv));
        for &i in &valid {
            let row = qv.row(i).dot(&context);
            out.row_mut(i).assign(&row);
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            valid,
            weights,
            context,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), "efficient_attention"))
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = self.leaf_names.get(&i) {
                        out.grads.insert(name.clone(), g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs = (&g * self.value(*a)).iter().fold(F::zero(), |t, &x| t + x);
                    acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                    acc(&mut grads, *a, g.mapv(|x| x * k));
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(x)
                        .and(&node.value)
                        .for_each(|gv, &xv, &yv| {
                            if xv <= F::zero() {
                                *gv = *gv * (yv + F::one());
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Square(a) => {
                    let two = F::of(2.0);
                    let ga = &g * &self.value(*a).mapv(|x| two * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), gv));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]));
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g;
                    for ((mut grow, yrow), xrow) in ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows()) {
                        let norm = xrow.dot(&xrow).sqrt();
                        let proj = yrow.dot(&grow);
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - yv * proj) / norm);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total = grow.iter().fold(F::zero(), |t, &x| t + x);
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = *gv - yv.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let (r, _) = self.shape(*a);
                    let mut ga = Array2::zeros((r, r));
                    for k in 0..r {
                        ga[[k, k]] = g[[k, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.shape(*a).0;
                    acc(&mut grads, *a, g.slice(s![..ra, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(s![ra.., ..]).to_owned());
                }
                Op::Rows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let len = g.nrows();
                    ga.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = attention_backward(self, cache, &g);
                    acc(&mut grads, cache.q, gq);
                    acc(&mut grads, cache.k, gk);
                    acc(&mut grads, cache.v, gv);
                }
            }
        }
        out
    }
}

fn attention_backward<F: Real>(
    graph: &Graph<F>,
    cache: &AttentionCache<F>,
    g: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let q = graph.value(cache.q);
    let v = graph.value(cache.v);
    let (n, dk) = q.dim();
    let dv = v.ncols();
    let w = &cache.weights;

    let mut gq = Array2::zeros((n, dk));
    let mut g_context = Array2::<F>::zeros((dk, dv));
    for &i in &cache.valid {
        gq.row_mut(i).assign(&cache.context.dot(&g.row(i)));
        for c in 0..dk {
            let qc = q[[i, c]];
            g_context
                .row_mut(c)
                .zip_mut_with(&g.row(i), |acc, &x| *acc = *acc + qc * x);
        }
    }
    // dL/dw[j, c] = V_j . dG[c, :]
    let gw = v.dot(&g_context.t());
    let mut gk = Array2::zeros((n, dk));
    let mut gv = Array2::zeros((n, dv));
    for c in 0..dk {
        let inner = cache
            .valid
            .iter()
            .fold(F::zero(), |t, &j| t + w[[j, c]] * gw[[j, c]]);
        for &j in &cache.valid {
            gk[[j, c]] = w[[j, c]] * (gw[[j, c]] - inner);
        }
    }
    for &j in &cache.valid {
        gv.row_mut(j).assign(&w.row(j).dot(&g_context));
    }
    (gq, gk, gv)
}

fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn lexicographic<'a, F: Real>(
    a: impl Iterator<Item = &'a F>,
    b: impl Iterator<Item = &'a F>,
) -> Ordering {
    for (x, y) in a.zip(b) {
        let o = x.partial_cmp(y).unwrap_or(Ordering::Equal);
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}
