//! Grid sweeps over (P, M, N) with per-cell error isolation.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::AccumulatorRepr;
use crate::error::{QuantError, Result};
use crate::numeric::RoundingMode;
use crate::pipeline::{quantize_layer, Algorithm, LayerJob, QuantConfig, SyntheticLayer, Variant};
use crate::tensor_io::read_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSource {
    /// `weights` is `K × C`, `calib` is `K × D`, both in the tensor format.
    Files {
        weights: PathBuf,
        calib: PathBuf,
    },
    Synthetic(SyntheticLayer),
}

impl LayerSource {
    /// Relative file paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            LayerSource::Files { weights, calib } => Ok((
                read_matrix(base.join(weights))?,
                read_matrix(base.join(calib))?,
            )),
            LayerSource::Synthetic(s) => Ok(s.generate()),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_percentile() -> f64 {
    99.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub weight_bits: Vec<u32>,
    pub act_bits: Vec<u32>,
    pub acc_bits: Vec<u32>,
    pub algorithm: Algorithm,
    pub variant: Variant,
    #[serde(default)]
    pub tile: Option<usize>,
    #[serde(default)]
    pub rounding: RoundingMode,
    #[serde(default = "default_true")]
    pub soft_constraint: bool,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub accumulator: AccumulatorRepr,
    pub layers: Vec<LayerSource>,
}

impl SweepGrid {
    /// Cells in row-major `(P, M, N)` order.
    pub fn cells(&self) -> Vec<QuantConfig> {
        let mut out = Vec::new();
        for &p in &self.acc_bits {
            for &m in &self.weight_bits {
                for &n in &self.act_bits {
                    out.push(QuantConfig {
                        weight_bits: m,
                        act_bits: n,
                        acc_bits: Some(p),
                        tile: self.tile,
                        algorithm: self.algorithm,
                        variant: self.variant,
                        rounding: self.rounding,
                        soft_constraint: self.soft_constraint,
                        percentile: self.percentile,
                        accumulator: self.accumulator,
                        memory_efficient: false,
                    });
                }
            }
        }
        out
    }
}

/// Sweep cells must satisfy `3 <= M <= 8` and `M <= N <= 8`.
pub fn check_sweep_cell(cfg: &QuantConfig) -> Result<()> {
    let (m, n) = (cfg.weight_bits, cfg.act_bits);
    if !(3..=8).contains(&m) || !(m..=8).contains(&n) {
        return Err(QuantError::InvalidArgument(format!(
            "sweep cell needs 3 <= M <= N <= 8, got M={m}, N={n}"
        )));
    }
    cfg.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub acc_bits: u32,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub recon_error: Option<f64>,
    pub sparsity: Option<f64>,
    pub pass: bool,
    pub status: String,
    /// Lowest error among passing rows with the same `P`.
    pub best_for_p: bool,
    /// Not dominated in (P, error) by any other passing row.
    pub pareto: bool,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok" && self.pass && self.recon_error.is_some()
    }
}

fn run_cell(jobs: &[(DMatrix<f64>, DMatrix<f64>)], cfg: &QuantConfig) -> SweepRow {
    let mut row = SweepRow {
        acc_bits: cfg.acc_bits.unwrap_or(0),
        weight_bits: cfg.weight_bits,
        act_bits: cfg.act_bits,
        recon_error: None,
        sparsity: None,
        pass: false,
        status: "ok".into(),
        best_for_p: false,
        pareto: false,
    };
    let outcome = check_sweep_cell(cfg).and_then(|_| {
        let mut err = 0.0;
        let mut zeros = 0.0;
        let mut total = 0usize;
        let mut pass = true;
        for (w, x) in jobs {
            let job = LayerJob {
                weights: w.clone(),
                calib_float: x.clone(),
                config: cfg.clone(),
            };
            let (codes, rep) = quantize_layer(&job)?;
            err += rep.recon_error;
            zeros += rep.sparsity * codes.len() as f64;
            total += codes.len();
            pass &= rep.pass();
        }
        Ok((
            err,
            if total == 0 {
                0.0
            } else {
                zeros / total as f64
            },
            pass,
        ))
    });
    match outcome {
        Ok((err, sp, pass)) => {
            row.recon_error = Some(err);
            row.sparsity = Some(sp);
            row.pass = pass;
            if !pass {
                row.status = "certificate-failed".into();
            }
        }
        Err(QuantError::InfeasibleBudget { .. }) => row.status = "infeasible".into(),
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Marks `best_for_p` and `pareto` among rows that completed and passed.
pub fn mark_frontier(rows: &mut [SweepRow]) {
    let ok: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].ok()).collect();
    let err = |i: usize| rows[i].recon_error.unwrap_or(f64::INFINITY);
    let mut best = vec![false; rows.len()];
    let mut pareto = vec![false; rows.len()];
    for &i in &ok {
        best[i] = ok
            .iter()
            .filter(|&&j| rows[j].acc_bits == rows[i].acc_bits)
            .all(|&j| err(j) > err(i) || (err(j) == err(i) && j >= i));
        pareto[i] = !ok.iter().any(|&j| {
            j != i
                && rows[j].acc_bits <= rows[i].acc_bits
                && err(j) <= err(i)
                && (rows[j].acc_bits < rows[i].acc_bits || err(j) < err(i) || j < i)
        });
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.best_for_p = best[i];
        r.pareto = pareto[i];
    }
}

/// Runs every grid cell against every layer. Cells run in parallel; a
/// failing cell is reported in its row and does not stop the others.
pub fn sweep(jobs: &[(DMatrix<f64>, DMatrix<f64>)], grid: &SweepGrid) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = grid
        .cells()
        .par_iter()
        .map(|cfg| run_cell(jobs, cfg))
        .collect();
    mark_frontier(&mut rows);
    rows
}

pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "acc_bits",
        "weight_bits",
        "act_bits",
        "recon_error",
        "sparsity",
        "pass",
        "status",
        "best_for_p",
        "pareto",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.acc_bits.to_string(),
            r.weight_bits.to_string(),
            r.act_bits.to_string(),
            opt(r.recon_error),
            opt(r.sparsity),
            r.pass.to_string(),
            r.status.clone(),
            r.best_for_p.to_string(),
            r.pareto.to_string(),
        ])?;
    }
    w.flush().map_err(|e| QuantError::Io {
        path: PathBuf::from("<csv>"),
        source: e,
    })?;
    Ok(())
}
