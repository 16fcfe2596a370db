//! Euclidean projection onto the ℓ1 ball and the shrink/clip operators built
//! on top of it.

use nalgebra::DMatrix;

use crate::bounds::AccumulatorBudget;
use crate::error::{QuantError, Result};
use crate::numeric::{AffineQuantizer, RoundingMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub projected: Vec<f64>,
    /// Lagrange multiplier of the ℓ1 constraint; 0 when the input is inside the ball.
    pub lambda: f64,
    /// Number of nonzero entries in `projected`.
    pub support: usize,
    /// Input magnitudes, sorted descending (ties by original index).
    pub sorted_mags: Vec<f64>,
}

/// `sign(x) * max(|x| - lambda, 0)`
#[inline]
pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    let shrunk = x.abs() - lambda;
    if shrunk > 0.0 {
        shrunk.copysign(x)
    } else {
        0.0
    }
}

/// `clip(x; a, b)`, or `None` when the interval is empty.
#[inline]
pub fn range_clip(x: f64, a: f64, b: f64) -> Option<f64> {
    if a > b {
        None
    } else {
        Some(x.max(a).min(b))
    }
}

/// Projects `w` onto `{v : ||v||_1 <= radius}`.
///
/// Sort-based: with magnitudes `mu` sorted descending, `rho` is the largest
/// index with `mu_rho > (sum_{i<=rho} mu_i - radius) / rho`, and
/// `lambda = (sum_{i<=rho} mu_i - radius) / rho`.
pub fn l1_project(w: &[f64], radius: f64) -> Result<ProjectionResult> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(QuantError::InvalidArgument(format!(
            "ℓ1 radius must be finite and non-negative, got {radius}"
        )));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(*bad));
    }

    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| w[j].abs().total_cmp(&w[i].abs()));
    let sorted_mags: Vec<f64> = order.iter().map(|&i| w[i].abs()).collect();
    let l1: f64 = sorted_mags.iter().sum();

    if l1 <= radius {
        return Ok(ProjectionResult {
            projected: w.to_vec(),
            lambda: 0.0,
            support: w.iter().filter(|v| **v != 0.0).count(),
            sorted_mags,
        });
    }
    if radius == 0.0 {
        return Ok(ProjectionResult {
            projected: vec![0.0; w.len()],
            lambda: sorted_mags.first().copied().unwrap_or(0.0),
            support: 0,
            sorted_mags,
        });
    }

    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut rho_sum = 0.0;
    for (idx, &mu) in sorted_mags.iter().enumerate() {
        cumsum += mu;
        let count = (idx + 1) as f64;
        if mu - (cumsum - radius) / count > 0.0 {
            rho = idx + 1;
            rho_sum = cumsum;
        }
    }
    let lambda = ((rho_sum - radius) / rho as f64).max(0.0);
    let projected: Vec<f64> = w.iter().map(|&x| soft_threshold(x, lambda)).collect();
    let support = projected.iter().filter(|v| **v != 0.0).count();
    Ok(ProjectionResult {
        projected,
        lambda,
        support,
        sorted_mags,
    })
}

/// Lagrangian soft threshold for one channel, in code units.
pub fn derive_threshold(codes_domain: &[f64], radius: f64) -> Result<f64> {
    Ok(l1_project(codes_domain, radius)?.lambda)
}

/// Projection-then-round-to-zero baseline.
///
/// Each channel `j` of `w` (K×C) is scaled to code units by its quantizer,
/// projected onto the ℓ1 ball of radius `budget.soft_budget` (per tile when
/// the budget is tiled) and truncated. The resulting integer codes satisfy
/// `sum |q_i| <= Z` per tile.
pub fn ep_init(
    w: &DMatrix<f64>,
    quantizers: &[AffineQuantizer],
    budget: &AccumulatorBudget,
) -> Result<DMatrix<i64>> {
    let (k, c) = w.shape();
    if quantizers.len() != c {
        return Err(QuantError::Shape(format!(
            "{} quantizers for {c} channels",
            quantizers.len()
        )));
    }
    for q in quantizers {
        if q.zero_point != 0 || q.rounding != RoundingMode::ToZero {
            return Err(QuantError::InvalidArgument(
                "EP-init requires symmetric round-to-zero weight quantizers".into(),
            ));
        }
    }
    let mut out = DMatrix::<i64>::zeros(k, c);
    for (j, q) in quantizers.iter().enumerate() {
        for (start, end) in budget.tiles(k) {
            let scaled: Vec<f64> = (start..end).map(|i| w[(i, j)] / q.scale).collect();
            let proj = l1_project(&scaled, budget.soft_budget)?;
            for (offset, v) in proj.projected.iter().enumerate() {
                out[(start + offset, j)] = q.quantize_code_units(*v);
            }
        }
    }
    Ok(out)
}
