//! Greedy path-following quantization (GPFQ), its sparse and
//! accumulator-aware variants, and the square-matrix reformulation.
//!
//! Weights are laid out `K × C` (input neurons by output channels) and
//! calibration data `K × D` (input neurons by samples). Each channel runs
//!
//! ```text
//! t_i    = <Xq_i, u + w_i X_i> / (||Xq_i||^2 * s)      (code units)
//! q_i    = Q(Ψ_{a,b}(Π_λ(t_i)))                       (constrained)
//! u     += w_i X_i - s q_i Xq_i
//! ```
//!
//! Channels share nothing but the read-only calibration data.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::bounds::AccumulatorBudget;
use crate::constraint::BudgetTracker;
use crate::error::{QuantError, Result};
use crate::numeric::AffineQuantizer;

/// Squared row norms at or below this fraction of the largest one are dead
/// inputs.
const DEAD_ROW_RTOL: f64 = 1e-12;

/// Calibration data prepared for repeated per-channel GPFQ runs.
#[derive(Debug, Clone)]
pub struct GpfqLayer {
    /// Row `i` of `X`, stored as column `i`.
    xt: DMatrix<f64>,
    xqt: DMatrix<f64>,
    xq_norm2: Vec<f64>,
    /// `<Xq_i, X_i>`
    cross: Vec<f64>,
    dead: Vec<bool>,
}

/// Output of one channel.
#[derive(Debug, Clone)]
pub struct ChannelRun {
    pub codes: Vec<i64>,
    /// Unconstrained quantizer argument at each step, in code units.
    pub args: Vec<f64>,
    /// Final running error `u_K` (length D).
    pub error: Vec<f64>,
    /// Per-tile soft thresholds actually used (empty when unconstrained).
    pub lambdas: Vec<f64>,
}

impl GpfqLayer {
    pub fn new(x: &DMatrix<f64>, xq: &DMatrix<f64>) -> Result<Self> {
        if x.shape() != xq.shape() {
            return Err(QuantError::Shape(format!(
                "X is {:?} but quantized X is {:?}",
                x.shape(),
                xq.shape()
            )));
        }
        let xt = x.transpose();
        let xqt = xq.transpose();
        let k = x.nrows();
        let xq_norm2: Vec<f64> = (0..k).map(|i| xqt.column(i).norm_squared()).collect();
        let cross: Vec<f64> = (0..k).map(|i| xqt.column(i).dot(&xt.column(i))).collect();
        let max_norm2 = xq_norm2.iter().copied().fold(0.0, f64::max);
        let dead = xq_norm2
            .iter()
            .map(|&n| n <= DEAD_ROW_RTOL * max_norm2 || n == 0.0)
            .collect();
        Ok(Self {
            xt,
            xqt,
            xq_norm2,
            cross,
            dead,
        })
    }

    pub fn inputs(&self) -> usize {
        self.xt.ncols()
    }

    pub fn samples(&self) -> usize {
        self.xt.nrows()
    }

    /// Runs one channel; `constraint` enables the accumulator-aware variant
    /// (`(budget, soft)`).
    #[allow(clippy::needless_range_loop)]
    pub fn run_channel(
        &self,
        w: &[f64],
        quantizer: &AffineQuantizer,
        constraint: Option<(&AccumulatorBudget, bool)>,
    ) -> Result<ChannelRun> {
        let k = self.inputs();
        if w.len() != k {
            return Err(QuantError::Shape(format!(
                "channel has {} weights but layer has {k} inputs",
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite(*bad));
        }
        let s = quantizer.scale;
        let mut tracker = match constraint {
            Some((budget, soft)) => {
                let scaled: Vec<f64> = w.iter().map(|v| v / s).collect();
                Some(BudgetTracker::new(budget, &scaled, soft)?)
            }
            None => None,
        };

        let mut u = vec![0.0; self.samples()];
        let mut codes = Vec::with_capacity(k);
        let mut args = Vec::with_capacity(k);
        for i in 0..k {
            let xi = self.xt.column(i);
            let xqi = self.xqt.column(i);
            let code = if self.dead[i] {
                args.push(0.0);
                if let Some(t) = tracker.as_mut() {
                    t.constrain(i, 0.0);
                }
                0
            } else {
                let proj: f64 = xqi.iter().zip(&u).map(|(a, b)| a * b).sum();
                let t = (proj + w[i] * self.cross[i]) / (self.xq_norm2[i] * s);
                args.push(t);
                let v = match tracker.as_mut() {
                    Some(tr) => tr.constrain(i, t),
                    None => t,
                };
                quantizer.quantize_code_units(v)
            };
            if let Some(t) = tracker.as_mut() {
                t.commit(code);
            }
            let deq = s * code as f64;
            for ((ud, x), xq) in u.iter_mut().zip(xi.iter()).zip(xqi.iter()) {
                *ud += w[i] * x - deq * xq;
            }
            codes.push(code);
        }
        Ok(ChannelRun {
            codes,
            args,
            error: u,
            lambdas: tracker.map(|t| t.lambdas().to_vec()).unwrap_or_default(),
        })
    }

    /// Quantizes every column of `w` (K×C), channels in parallel.
    pub fn quantize_layer(
        &self,
        w: &DMatrix<f64>,
        quantizers: &[AffineQuantizer],
        budget: Option<&AccumulatorBudget>,
        soft: bool,
    ) -> Result<DMatrix<i64>> {
        let (k, c) = w.shape();
        if k != self.inputs() || quantizers.len() != c {
            return Err(QuantError::Shape(format!(
                "weights {k}×{c} with {} quantizers against {} inputs",
                quantizers.len(),
                self.inputs()
            )));
        }
        let columns: Vec<Vec<i64>> = (0..c)
            .into_par_iter()
            .map(|j| {
                let col: Vec<f64> = w.column(j).iter().copied().collect();
                self.run_channel(&col, &quantizers[j], budget.map(|b| (b, soft)))
                    .map(|r| r.codes)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(k, c, |i, j| columns[j][i]))
    }
}

/// Plain GPFQ on one channel.
pub fn gpfq_channel(
    w: &[f64],
    x: &DMatrix<f64>,
    xq: &DMatrix<f64>,
    quantizer: &AffineQuantizer,
) -> Result<Vec<i64>> {
    Ok(GpfqLayer::new(x, xq)?
        .run_channel(w, quantizer, None)?
        .codes)
}

/// Accumulator-aware GPFQ on one channel. `soft` enables the ℓ1 soft
/// threshold in addition to the strict running-sum clip.
pub fn gpfq_axe_channel(
    w: &[f64],
    x: &DMatrix<f64>,
    xq: &DMatrix<f64>,
    quantizer: &AffineQuantizer,
    budget: &AccumulatorBudget,
    soft: bool,
) -> Result<Vec<i64>> {
    Ok(GpfqLayer::new(x, xq)?
        .run_channel(w, quantizer, Some((budget, soft)))?
        .codes)
}

/// Square `K × K` stand-ins for `(X, Xq)` that give identical GPFQ output:
/// `H = (Xq Xqᵀ)^(1/2)` and `G H⁻¹` with `G = X Xqᵀ`.
#[derive(Debug, Clone)]
pub struct MemoryEfficientOperands {
    pub h: DMatrix<f64>,
    pub gh_inv: DMatrix<f64>,
    /// Eigenvalues of `Xq Xqᵀ` treated as zero (pseudo-inverse null space).
    pub null_dim: usize,
}

impl MemoryEfficientOperands {
    /// Reals held by the operands.
    pub fn footprint(&self) -> usize {
        self.h.len() + self.gh_inv.len()
    }

    pub fn layer(&self) -> Result<GpfqLayer> {
        GpfqLayer::new(&self.gh_inv, &self.h)
    }
}

/// Reals held by the standard path: both `K × D` sample matrices plus the
/// `D × C` running error.
pub fn standard_footprint(k: usize, d: usize, c: usize) -> usize {
    d * (2 * k + c)
}

/// Reals held by the square path: `H`, `G H⁻¹` and a `K × C` running error.
pub fn memory_efficient_footprint(k: usize, c: usize) -> usize {
    k * (2 * k + c)
}

pub fn gpfq_memory_efficient_precompute(
    x: &DMatrix<f64>,
    xq: &DMatrix<f64>,
) -> Result<MemoryEfficientOperands> {
    if x.shape() != xq.shape() {
        return Err(QuantError::Shape(format!(
            "X is {:?} but quantized X is {:?}",
            x.shape(),
            xq.shape()
        )));
    }
    let k = x.nrows();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut g = DMatrix::<f64>::zeros(k, k);
    // stream one sample at a time
    for col in 0..xq.ncols() {
        let xq_s = xq.column(col);
        let x_s = x.column(col);
        gram.ger(1.0, &xq_s, &xq_s, 1.0);
        g.ger(1.0, &x_s, &xq_s, 1.0);
    }
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = max_ev * (k as f64) * f64::EPSILON;
    let mut null_dim = 0;
    let sqrt_ev: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let inv_sqrt: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l > tol {
                1.0 / l.sqrt()
            } else {
                null_dim += 1;
                0.0
            }
        })
        .collect();
    let v = &eig.eigenvectors;
    let scaled = |diag: &[f64]| {
        let mut vd = v.clone();
        for (j, d) in diag.iter().enumerate() {
            vd.column_mut(j).scale_mut(*d);
        }
        &vd * v.transpose()
    };
    let h = scaled(&sqrt_ev);
    let h = (&h + h.transpose()) * 0.5;
    let h_pinv = scaled(&inv_sqrt);
    if null_dim > 0 {
        warn!("Xq Xqᵀ is rank deficient: null space dimension {null_dim} of {k}");
    }
    Ok(MemoryEfficientOperands {
        h,
        gh_inv: g * h_pinv,
        null_dim,
    })
}
