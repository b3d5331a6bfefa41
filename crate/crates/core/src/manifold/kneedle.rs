//! Kneedle knee detection on descending sequences.

use crate::error::{Error, Result};

/// Shape of the descending curve being searched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CurveShape {
    /// Flat head followed by a drop (the shape of sorted pair similarities).
    #[default]
    Concave,
    /// Steep head flattening into a tail, e.g. `1/(x+1)`.
    Convex,
}

const SENSITIVITY: f64 = 1.0;

/// Index of the knee of a non-increasing sequence, or `None` when the
/// difference curve shows no knee (constant or linear input).
///
/// Both axes are min-max normalised, the curve is mapped onto the increasing
/// concave case, and local maxima of `y - x` are accepted once the
/// difference curve drops below `max - S * mean(dx)` before the next
/// maximum. Of the accepted maxima the largest one wins.
pub fn kneedle_knee(values: &[f64], shape: CurveShape) -> Result<Option<usize>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Precondition("kneedle needs at least 3 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("kneedle input must be finite".into()));
    }
    if values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Precondition("kneedle input must be sorted descending".into()));
    }
    let (max, min) = (values[0], values[n - 1]);
    if max == min {
        return Ok(None);
    }
    let step = 1.0 / (n - 1) as f64;
    let y: Vec<f64> = values.iter().map(|v| (v - min) / (max - min)).collect();
    let transformed: Vec<f64> = match shape {
        CurveShape::Concave => y.iter().rev().copied().collect(),
        CurveShape::Convex => y.iter().map(|v| 1.0 - v).collect(),
    };
    let diff: Vec<f64> = transformed
        .iter()
        .enumerate()
        .map(|(i, v)| v - i as f64 * step)
        .collect();

    let maxima: Vec<usize> = (1..n - 1)
        .filter(|&i| diff[i] > diff[i - 1] && diff[i] >= diff[i + 1] && diff[i] > 0.0)
        .collect();
    let mut best: Option<usize> = None;
    for (k, &m) in maxima.iter().enumerate() {
        let threshold = diff[m] - SENSITIVITY * step;
        let stop = maxima.get(k + 1).copied().unwrap_or(n);
        if (m + 1..stop).any(|j| diff[j] < threshold) && best.is_none_or(|b| diff[m] > diff[b]) {
            best = Some(m);
        }
    }
    Ok(best.map(|i| match shape {
        CurveShape::Concave => n - 1 - i,
        CurveShape::Convex => i,
    }))
}
