//! Evaluation and manifold diagnostics.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-N label count used for SSMS.
pub const DEFAULT_TOP_N: usize = 10;
/// Diagonal jitter added to rank-deficient covariance fits.
pub const COVARIANCE_JITTER: f64 = 1e-6;
pub const DEFAULT_PROBE_FOLDS: usize = 5;

pub type LabelSet = BTreeSet<String>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ssms {
    pub f1: f64,
    /// `f1 * 10`, the scale reports print.
    pub display: f64,
}

/// F1 over two label sets; two empty sets score 1.
pub fn ssms(gt: &LabelSet, gen: &LabelSet) -> Ssms {
    let tp = gt.intersection(gen).count();
    let fn_ = gt.len() - tp;
    let fp = gen.len() - tp;
    let f1 = if tp + fn_ + fp == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ssms { f1, display: 10.0 * f1 }
}

/// Scores an embedding against a fixed label vocabulary.
pub trait LabelClassifier {
    fn scores(&self, embedding: &[f32]) -> Result<Vec<(String, f64)>>;
}

/// Top-`n` labels by classifier score, ties broken lexicographically.
pub fn label_predict(classifier: Option<&dyn LabelClassifier>, embedding: &[f32], n: usize) -> Result<LabelSet> {
    let classifier = classifier.ok_or_else(|| Error::Config("no label classifier bound".into()))?;
    let mut scored = classifier.scores(embedding)?;
    if scored.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite("classifier scores".into()));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(n).map(|(l, _)| l).collect())
}

/// Scores labels by negative Euclidean distance to class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeClassifier {
    pub labels: Vec<String>,
    pub prototypes: Vec<Vec<f32>>,
}

impl LabelClassifier for PrototypeClassifier {
    fn scores(&self, embedding: &[f32]) -> Result<Vec<(String, f64)>> {
        self.labels
            .iter()
            .zip(&self.prototypes)
            .map(|(l, p)| {
                if p.len() != embedding.len() {
                    return Err(Error::dim("classifier input", p.len(), embedding.len()));
                }
                let d2: f64 = p.iter().zip(embedding).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                Ok((l.clone(), -d2.sqrt()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl GaussianFit {
    /// Sample mean and unbiased covariance; rank-deficient fits
    /// (`n <= d`) get `COVARIANCE_JITTER * I`.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::Precondition("a Gaussian fit needs at least 2 samples".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian fit samples".into()));
        }
        let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
        let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.mean()));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        if n <= d {
            for i in 0..d {
                covariance[(i, i)] += COVARIANCE_JITTER;
            }
        }
        Ok(Self {
            mean,
            covariance,
            sample_count: n,
        })
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_x - mu_y|^2 + Tr(S_x + S_y - 2 (S_x S_y)^(1/2))` between Gaussian
/// fits of two sample sets; the trace of the product root is taken as
/// `Tr((S_x^(1/2) S_y S_x^(1/2))^(1/2))`.
pub fn frechet_distance(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::dim("frechet_distance width", x.ncols(), y.ncols()));
    }
    let fx = GaussianFit::fit(x)?;
    let fy = GaussianFit::fit(y)?;
    frechet_between(&fx, &fy)
}

pub fn frechet_between(fx: &GaussianFit, fy: &GaussianFit) -> Result<f64> {
    let diff = &fx.mean - &fy.mean;
    let sx = sqrt_psd(&fx.covariance)?;
    let inner = &sx * &fy.covariance * &sx;
    let cross = sqrt_psd(&inner)?.trace();
    let d = diff.norm_squared() + fx.covariance.trace() + fy.covariance.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

fn row_cos(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

fn class_centroids(samples: &Array2<f64>, labels: &[&str]) -> Result<(Vec<String>, Vec<Array2<f64>>)> {
    if samples.nrows() != labels.len() {
        return Err(Error::dim("labels", samples.nrows(), labels.len()));
    }
    let classes: Vec<String> = labels.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut centroids = Vec::with_capacity(classes.len());
    for c in &classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let sel = samples.select(Axis(0), &idx);
        centroids.push(sel.mean_axis(Axis(0)).expect("class is non-empty").insert_axis(Axis(0)));
    }
    Ok((classes, centroids))
}

/// Mean over samples of the summed squared memberships, with membership the
/// cosine to each class centroid rescaled to `[0, 1]`.
pub fn partition_coefficient(samples: &Array2<f64>, labels: &[&str]) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Precondition("partition coefficient of an empty set".into()));
    }
    let (_, centroids) = class_centroids(samples, labels)?;
    let mut total = 0.0;
    for row in samples.rows() {
        for c in &centroids {
            let u = (row_cos(row, c.row(0))? + 1.0) / 2.0;
            total += u * u;
        }
    }
    Ok(total / samples.nrows() as f64)
}

/// Distance between the centroids of two embedding sets.
pub fn modality_gap(ev: &Array2<f64>, ea: &Array2<f64>) -> Result<f64> {
    if ev.nrows() == 0 || ea.nrows() == 0 {
        return Err(Error::Precondition("modality gap of an empty set".into()));
    }
    if ev.ncols() != ea.ncols() {
        return Err(Error::dim("modality_gap width", ev.ncols(), ea.ncols()));
    }
    let d = ev.mean_axis(Axis(0)).unwrap() - ea.mean_axis(Axis(0)).unwrap();
    Ok(d.dot(&d).sqrt())
}

/// Rows scaled to unit length; zero rows are left as they are.
pub fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Projects `x` onto its top `width` principal axes. The data mean is kept in
/// the projection so that offsets between sets survive the reduction.
pub fn pca_align(x: &Array2<f64>, width: usize) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if width == 0 || width > d {
        return Err(Error::dim("pca target width", d, width));
    }
    if n < 2 {
        return Err(Error::Precondition("pca needs at least 2 samples".into()));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let m = DMatrix::from_row_iterator(d, d, cov.iter().copied());
    let eig = SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Array2::<f64>::zeros((d, width));
    for (j, &k) in order.iter().take(width).enumerate() {
        let col = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, j]] = s * col[i];
        }
    }
    Ok(x.dot(&basis))
}

/// Newton iterations on the mean logistic loss plus `L2 / 2 * |w|^2`; the
/// bias is the last coordinate and is not penalised.
fn fit_logistic(x: &Array2<f64>, y: &[f64], l2: f64) -> Result<(Vec<f64>, f64)> {
    const ITERS: usize = 50;
    let (n, d) = x.dim();
    let xb = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let t = DVector::from_column_slice(y);
    let mut w = DVector::<f64>::zeros(d + 1);
    let mut reg = DVector::from_element(d + 1, l2);
    reg[d] = 1e-9;
    for _ in 0..ITERS {
        let p = (&xb * &w).map(|z| 1.0 / (1.0 + (-z).exp()));
        let grad = xb.transpose() * (&p - &t) / n as f64 + reg.component_mul(&w);
        let s = p.map(|q| q * (1.0 - q));
        let mut weighted = xb.clone();
        for (mut row, &si) in weighted.row_iter_mut().zip(s.iter()) {
            row *= si;
        }
        let hess = xb.transpose() * weighted / n as f64 + DMatrix::from_diagonal(&reg);
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numeric("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok((w.rows(0, d).iter().copied().collect(), w[d]))
}

/// Linear modality probe settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub folds: usize,
    /// Inverse ridge strength on the summed logistic loss.
    pub inverse_regularization: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_PROBE_FOLDS,
            inverse_regularization: 1.0,
        }
    }
}

/// k-fold cross-validated misclassification of a linear probe predicting
/// which modality each embedding came from.
pub fn discriminant_probe(ev: &Array2<f64>, ea: &Array2<f64>, folds: usize) -> Result<f64> {
    discriminant_probe_with(
        ev,
        ea,
        &ProbeConfig {
            folds,
            ..ProbeConfig::default()
        },
    )
}

pub fn discriminant_probe_with(ev: &Array2<f64>, ea: &Array2<f64>, cfg: &ProbeConfig) -> Result<f64> {
    let folds = cfg.folds;
    if ev.ncols() != ea.ncols() {
        return Err(Error::dim("probe width", ev.ncols(), ea.ncols()));
    }
    if ev.nrows() != ea.nrows() {
        return Err(Error::Precondition("discriminant probe needs balanced sets".into()));
    }
    if cfg.inverse_regularization.is_nan() || cfg.inverse_regularization <= 0.0 {
        return Err(Error::Config("probe inverse_regularization must be positive".into()));
    }
    let n = ev.nrows();
    if folds < 2 || n < folds {
        return Err(Error::Config(format!("{folds} folds over {n} samples per modality")));
    }
    let x = ndarray::concatenate(Axis(0), &[ev.view(), ea.view()]).expect("widths match");
    let y: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
    let fold_of = |i: usize| (i % n) % folds;
    let mut wrong = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..2 * n).filter(|&i| fold_of(i) != f).collect();
        let test: Vec<usize> = (0..2 * n).filter(|&i| fold_of(i) == f).collect();
        let (xtr, xte) = (x.select(Axis(0), &train), x.select(Axis(0), &test));
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let l2 = 1.0 / (cfg.inverse_regularization * train.len() as f64);
        let (w, b) = fit_logistic(&xtr, &ytr, l2)?;
        let w = ndarray::Array1::from(w);
        for (row, &i) in xte.rows().into_iter().zip(&test) {
            let pred = if row.dot(&w) + b > 0.0 { 1.0 } else { 0.0 };
            if pred != y[i] {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / (2 * n) as f64)
}

/// Mean over classes of the probe run on each class's pairs alone. Rows of
/// `ev` and `ea` are paired and share `labels`.
pub fn per_class_probe(ev: &Array2<f64>, ea: &Array2<f64>, labels: &[&str], cfg: &ProbeConfig) -> Result<f64> {
    let per_class = per_class_probe_breakdown(ev, ea, labels, cfg)?;
    Ok(per_class.iter().map(|(_, m)| m).sum::<f64>() / per_class.len() as f64)
}

/// Probe misclassification within each class, in label order.
pub fn per_class_probe_breakdown(
    ev: &Array2<f64>,
    ea: &Array2<f64>,
    labels: &[&str],
    cfg: &ProbeConfig,
) -> Result<Vec<(String, f64)>> {
    if ev.nrows() != labels.len() || ea.nrows() != labels.len() {
        return Err(Error::dim("probe labels", ev.nrows(), labels.len()));
    }
    let classes: BTreeSet<&str> = labels.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::Precondition("probe over an empty set".into()));
    }
    classes
        .iter()
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *c).collect();
            let m = discriminant_probe_with(&ev.select(Axis(0), &idx), &ea.select(Axis(0), &idx), cfg)?;
            Ok((c.to_string(), m))
        })
        .collect()
}

fn cosine_matrix(q: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != g.ncols() {
        return Err(Error::dim("retrieval width", q.ncols(), g.ncols()));
    }
    Ok(unit_rows(q).dot(&unit_rows(g).t()))
}

/// Fraction of visual queries whose paired audio ranks in the top `k` by
/// cosine. Ties count against the query.
pub fn retrieval_accuracy(ev: &Array2<f64>, ea: &Array2<f64>, k: usize) -> Result<f64> {
    if ev.nrows() != ea.nrows() {
        return Err(Error::dim("paired retrieval sets", ev.nrows(), ea.nrows()));
    }
    if ev.nrows() == 0 {
        return Ok(0.0);
    }
    let sims = cosine_matrix(ev, ea)?;
    let hits = sims
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().filter(|&(j, &s)| j != *i && s >= row[*i]).count() < k)
        .count();
    Ok(hits as f64 / ev.nrows() as f64)
}

/// Fraction of queries with a same-label item among the top `k` gallery
/// items by cosine; ties go to the lower gallery index.
pub fn labeled_retrieval_accuracy(
    queries: &Array2<f64>,
    gallery: &Array2<f64>,
    query_labels: &[&str],
    gallery_labels: &[&str],
    k: usize,
) -> Result<f64> {
    if queries.nrows() != query_labels.len() {
        return Err(Error::dim("query labels", queries.nrows(), query_labels.len()));
    }
    if gallery.nrows() != gallery_labels.len() {
        return Err(Error::dim("gallery labels", gallery.nrows(), gallery_labels.len()));
    }
    if queries.nrows() == 0 {
        return Ok(0.0);
    }
    let sims = cosine_matrix(queries, gallery)?;
    let mut hits = 0usize;
    for (i, row) in sims.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if order.iter().take(k).any(|&j| gallery_labels[j] == query_labels[i]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.nrows() as f64)
}

/// The same diagnostics computed on width-aligned raw embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawBaseline {
    pub pc: f64,
    pub modality_gap: f64,
    pub probe_misclassification: f64,
    pub retrieval_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssms: f64,
    pub ssms_display: f64,
    pub fad: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cs: Option<f64>,
    pub pc: f64,
    pub retrieval_top1: f64,
    pub modality_gap: f64,
    pub probe_misclassification: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawBaseline>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let mut fields = vec![
            ("ssms", self.ssms),
            ("ssms_display", self.ssms_display),
            ("fad", self.fad),
            ("pc", self.pc),
            ("retrieval_top1", self.retrieval_top1),
            ("modality_gap", self.modality_gap),
            ("probe_misclassification", self.probe_misclassification),
        ];
        if let Some(cs) = self.cs {
            fields.push(("cs", cs));
        }
        if let Some(r) = &self.raw {
            fields.extend([
                ("raw.pc", r.pc),
                ("raw.modality_gap", r.modality_gap),
                ("raw.probe_misclassification", r.probe_misclassification),
                ("raw.retrieval_top1", r.retrieval_top1),
            ]);
        }
        match fields.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(format!("metric `{name}`"))),
            None => Ok(()),
        }
    }
}

/// JSON schema of the serialized `MetricReport`.
pub const METRIC_REPORT_SCHEMA: &str = include_str!("../schemas/metric_report.schema.json");
