//! OPTQ (GPTQ) and its accumulator-aware variant.
//!
//! Inputs are processed in descending order of the Hessian-proxy diagonal.
//! Tiles for the accumulator budget are contiguous ranges of that order.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bounds::AccumulatorBudget;
use crate::constraint::BudgetTracker;
use crate::error::{QuantError, Result};
use crate::numeric::AffineQuantizer;

/// Relative dampening added to the proxy diagonal.
pub const DAMPENING: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct HessianFactor {
    /// Upper Cholesky factor `U` of `(2 Xq Xqᵀ + ηI)⁻¹ = Uᵀ U`, in
    /// processing order.
    pub hinv_chol: DMatrix<f64>,
    /// `perm[p]` is the input index processed at position `p`.
    pub perm: Vec<usize>,
    pub eta: f64,
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(QuantError::Shape(format!(
            "Cholesky of non-square {:?}",
            a.shape()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(QuantError::Factorization {
                pivot: j,
                reason: format!("non-positive pivot {d:e}"),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of `L Lᵀ` given lower-triangular `L`.
fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // L⁻¹ by forward substitution, then (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        linv[(col, col)] = 1.0 / l[(col, col)];
        for i in (col + 1)..n {
            let mut s = 0.0;
            for k in col..i {
                s -= l[(i, k)] * linv[(k, col)];
            }
            linv[(i, col)] = s / l[(i, i)];
        }
    }
    let inv = linv.transpose() * &linv;
    (&inv + inv.transpose()) * 0.5
}

pub fn optq_prepare(xq: &DMatrix<f64>) -> Result<HessianFactor> {
    let k = xq.nrows();
    if k == 0 {
        return Err(QuantError::InvalidArgument(
            "empty calibration matrix".into(),
        ));
    }
    let proxy = (xq * xq.transpose()) * 2.0;
    let diag: Vec<f64> = (0..k).map(|i| proxy[(i, i)]).collect();
    let eta = DAMPENING * diag.iter().sum::<f64>() / k as f64;

    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| diag[b].total_cmp(&diag[a]));

    let damped = DMatrix::from_fn(k, k, |r, c| {
        proxy[(perm[r], perm[c])] + if r == c { eta } else { 0.0 }
    });
    let l = cholesky_lower(&damped)?;
    let inv = inverse_from_cholesky(&l);
    let hinv_chol = cholesky_lower(&inv)?.transpose();
    Ok(HessianFactor {
        hinv_chol,
        perm,
        eta,
    })
}

/// Quantizes one channel; `w` is in original input order and real units.
pub fn optq_channel(
    w: &[f64],
    factor: &HessianFactor,
    quantizer: &AffineQuantizer,
    constraint: Option<(&AccumulatorBudget, bool)>,
) -> Result<Vec<i64>> {
    let k = factor.perm.len();
    if w.len() != k {
        return Err(QuantError::Shape(format!(
            "channel has {} weights, factor has {k} inputs",
            w.len()
        )));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(*bad));
    }
    let u = &factor.hinv_chol;
    let mut work: Vec<f64> = factor
        .perm
        .iter()
        .map(|&i| w[i] / quantizer.scale)
        .collect();
    let mut tracker = match constraint {
        Some((budget, soft)) => Some(BudgetTracker::new(budget, &work, soft)?),
        None => None,
    };
    let mut codes = vec![0i64; k];
    for p in 0..k {
        let v = match tracker.as_mut() {
            Some(t) => t.constrain(p, work[p]),
            None => work[p],
        };
        let code = quantizer.quantize_code_units(v);
        if let Some(t) = tracker.as_mut() {
            t.commit(code);
        }
        // error against the unprojected weight
        let err = (work[p] - code as f64) / u[(p, p)];
        for r in (p + 1)..k {
            work[r] -= err * u[(p, r)];
        }
        codes[factor.perm[p]] = code;
    }
    Ok(codes)
}

/// Quantizes every column of `w` (K×C), channels in parallel.
pub fn optq_quantize_layer(
    w: &DMatrix<f64>,
    factor: &HessianFactor,
    quantizers: &[AffineQuantizer],
    budget: Option<&AccumulatorBudget>,
    soft: bool,
) -> Result<DMatrix<i64>> {
    let (k, c) = w.shape();
    if k != factor.perm.len() || quantizers.len() != c {
        return Err(QuantError::Shape(format!(
            "weights {k}×{c} with {} quantizers against {} inputs",
            quantizers.len(),
            factor.perm.len()
        )));
    }
    let columns: Vec<Vec<i64>> = (0..c)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = w.column(j).iter().copied().collect();
            optq_channel(&col, factor, &quantizers[j], budget.map(|b| (b, soft)))
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(k, c, |i, j| columns[j][i]))
}
