//! Single-layer driver: calibrate, quantize, verify, report.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{outer_accumulator_bits, AccumulatorBudget, AccumulatorRepr};
use crate::error::{QuantError, Result};
use crate::gpfq::{gpfq_memory_efficient_precompute, GpfqLayer};
use crate::numeric::{
    calibrate_activations, compute_scale, quantize_activations, AffineQuantizer, Alphabet,
    RoundingMode,
};
use crate::optq::{optq_prepare, optq_quantize_layer};
use crate::oracle::{verify, OverflowCertificate};
use crate::projection::ep_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gpfq,
    Optq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Unconstrained.
    Base,
    /// Base algorithm followed by ℓ1 projection and round-to-zero.
    EpInit,
    /// Soft threshold plus greedy running-sum clipping.
    Axe,
}

fn default_true() -> bool {
    true
}

fn default_percentile() -> f64 {
    99.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    #[serde(default)]
    pub acc_bits: Option<u32>,
    #[serde(default)]
    pub tile: Option<usize>,
    pub algorithm: Algorithm,
    pub variant: Variant,
    #[serde(default)]
    pub rounding: RoundingMode,
    #[serde(default = "default_true")]
    pub soft_constraint: bool,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub accumulator: AccumulatorRepr,
    /// Run GPFQ through the square `K × K` operands.
    #[serde(default)]
    pub memory_efficient: bool,
}

impl QuantConfig {
    pub fn new(weight_bits: u32, act_bits: u32, algorithm: Algorithm, variant: Variant) -> Self {
        Self {
            weight_bits,
            act_bits,
            acc_bits: None,
            tile: None,
            algorithm,
            variant,
            rounding: RoundingMode::Nearest,
            soft_constraint: true,
            percentile: default_percentile(),
            accumulator: AccumulatorRepr::SignMagnitude,
            memory_efficient: false,
        }
    }

    pub fn with_acc_bits(mut self, p: u32) -> Self {
        self.acc_bits = Some(p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.weight_bits) {
            return Err(QuantError::InvalidArgument(format!(
                "weight_bits must be in 2..=16, got {}",
                self.weight_bits
            )));
        }
        if !(1..=16).contains(&self.act_bits) {
            return Err(QuantError::InvalidArgument(format!(
                "act_bits must be in 1..=16, got {}",
                self.act_bits
            )));
        }
        if let Some(p) = self.acc_bits {
            if !(2..=64).contains(&p) {
                return Err(QuantError::InvalidArgument(format!(
                    "acc_bits must be in 2..=64, got {p}"
                )));
            }
        }
        if self.variant != Variant::Base && self.acc_bits.is_none() {
            return Err(QuantError::InvalidArgument(
                "ep-init and axe variants need acc_bits".into(),
            ));
        }
        if self.tile == Some(0) {
            return Err(QuantError::InvalidArgument("tile must be >= 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(QuantError::InvalidArgument(format!(
                "percentile must be in (0, 100], got {}",
                self.percentile
            )));
        }
        Ok(())
    }

    fn budget(&self, rounding: RoundingMode) -> Result<Option<AccumulatorBudget>> {
        match self.acc_bits {
            Some(p) if self.variant != Variant::Base => Ok(Some(AccumulatorBudget::new(
                p,
                self.tile,
                Alphabet::unsigned(self.act_bits)?,
                rounding,
                self.accumulator,
            )?)),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerJob {
    /// `K × C`
    pub weights: DMatrix<f64>,
    /// `K × D`
    pub calib_float: DMatrix<f64>,
    pub config: QuantConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub config: QuantConfig,
    pub recon_error: f64,
    pub sparsity: f64,
    pub weight_scales: Vec<f64>,
    pub degenerate_channels: Vec<usize>,
    pub act_scale: f64,
    pub act_zero_point: i64,
    /// Whole-channel accumulator width implied by the tile width.
    pub outer_acc_bits: Option<u32>,
    pub certificate: Option<OverflowCertificate>,
    pub notes: Vec<String>,
}

impl LayerReport {
    /// False only when a certificate exists and fails.
    pub fn pass(&self) -> bool {
        self.certificate
            .as_ref()
            .is_none_or(OverflowCertificate::pass)
    }
}

/// `½ ||Xᵀ W - X~ᵀ (S Q)||_F^2`, summed over channels.
pub fn reconstruction_error(
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    xq: &DMatrix<f64>,
    codes: &DMatrix<i64>,
    scales: &[f64],
) -> Result<f64> {
    let (k, c) = w.shape();
    if x.nrows() != k || xq.shape() != x.shape() || codes.shape() != (k, c) || scales.len() != c {
        return Err(QuantError::Shape(format!(
            "W {:?}, X {:?}, Xq {:?}, codes {:?}, {} scales",
            w.shape(),
            x.shape(),
            xq.shape(),
            codes.shape(),
            scales.len()
        )));
    }
    let deq = DMatrix::from_fn(k, c, |i, j| scales[j] * codes[(i, j)] as f64);
    let diff = x.transpose() * w - xq.transpose() * deq;
    Ok(0.5 * diff.norm_squared())
}

pub fn sparsity(codes: &DMatrix<i64>) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().filter(|c| **c == 0).count() as f64 / codes.len() as f64
}

fn weight_quantizers(
    w: &DMatrix<f64>,
    bits: u32,
    rounding: RoundingMode,
) -> Result<(Vec<AffineQuantizer>, Vec<usize>)> {
    let alphabet = Alphabet::signed(bits)?;
    let mut degenerate = Vec::new();
    let mut qs = Vec::with_capacity(w.ncols());
    for j in 0..w.ncols() {
        let col: Vec<f64> = w.column(j).iter().copied().collect();
        let s = compute_scale(&col, &alphabet)?;
        if s.degenerate {
            degenerate.push(j);
        }
        qs.push(AffineQuantizer::new(s.scale, 0, alphabet, rounding)?);
    }
    Ok((qs, degenerate))
}

pub fn quantize_layer(job: &LayerJob) -> Result<(DMatrix<i64>, LayerReport)> {
    let cfg = &job.config;
    cfg.validate()?;
    let (k, c) = job.weights.shape();
    let (kx, d) = job.calib_float.shape();
    if kx != k {
        return Err(QuantError::Shape(format!(
            "weights have {k} inputs but calibration data has {kx} rows"
        )));
    }
    if d == 0 || k == 0 || c == 0 {
        return Err(QuantError::Shape(format!(
            "empty layer: K={k}, C={c}, D={d}"
        )));
    }
    if let Some(t) = cfg.tile {
        if t > k {
            return Err(QuantError::InvalidArgument(format!(
                "tile {t} larger than K={k}"
            )));
        }
    }

    let act_q = calibrate_activations(
        &job.calib_float,
        cfg.act_bits,
        cfg.percentile,
        RoundingMode::Nearest,
    )?;
    let acts = quantize_activations(&job.calib_float, &act_q)?;
    let (quantizers, degenerate) = weight_quantizers(&job.weights, cfg.weight_bits, cfg.rounding)?;
    let budget = cfg.budget(cfg.rounding)?;
    let axe_budget = if cfg.variant == Variant::Axe {
        budget.as_ref()
    } else {
        None
    };

    let mut notes =
        vec!["no batch-norm merging, graph equalization or bias correction applied".to_string()];
    let mut perm = None;
    let base_codes = match cfg.algorithm {
        Algorithm::Gpfq => {
            let layer = if cfg.memory_efficient {
                let ops = gpfq_memory_efficient_precompute(&job.calib_float, &acts.values)?;
                if ops.null_dim > 0 {
                    notes.push(format!(
                        "quantized Gram matrix rank deficient (null space {})",
                        ops.null_dim
                    ));
                }
                ops.layer()?
            } else {
                GpfqLayer::new(&job.calib_float, &acts.values)?
            };
            layer.quantize_layer(&job.weights, &quantizers, axe_budget, cfg.soft_constraint)?
        }
        Algorithm::Optq => {
            let factor = optq_prepare(&acts.values)?;
            let codes = optq_quantize_layer(
                &job.weights,
                &factor,
                &quantizers,
                axe_budget,
                cfg.soft_constraint,
            )?;
            if axe_budget.is_some() && cfg.tile.is_some() {
                perm = Some(factor.perm);
            }
            codes
        }
    };

    let (codes, certificate) = match (cfg.variant, budget) {
        (Variant::Base, _) | (_, None) => (base_codes, None),
        (Variant::Axe, Some(b)) => {
            let cert = verify(&base_codes, &b, perm.as_deref());
            (base_codes, Some(cert))
        }
        (Variant::EpInit, Some(_)) => {
            let rtz: Vec<AffineQuantizer> = quantizers
                .iter()
                .map(|q| AffineQuantizer {
                    rounding: RoundingMode::ToZero,
                    ..*q
                })
                .collect();
            let rtz_budget = cfg
                .budget(RoundingMode::ToZero)?
                .expect("ep-init always carries a budget");
            let deq = DMatrix::from_fn(k, c, |i, j| quantizers[j].dequantize(base_codes[(i, j)]));
            let codes = ep_init(&deq, &rtz, &rtz_budget)?;
            let cert = verify(&codes, &rtz_budget, None);
            (codes, Some(cert))
        }
    };

    let scales: Vec<f64> = quantizers.iter().map(|q| q.scale).collect();
    let recon_error = reconstruction_error(
        &job.weights,
        &job.calib_float,
        &acts.values,
        &codes,
        &scales,
    )?;
    let outer_acc_bits = match (cfg.acc_bits, cfg.tile, cfg.variant) {
        (Some(p), Some(t), v) if v != Variant::Base => {
            Some(outer_accumulator_bits(p, k as u64, t as u64)?)
        }
        _ => None,
    };
    let report = LayerReport {
        config: cfg.clone(),
        recon_error,
        sparsity: sparsity(&codes),
        weight_scales: scales,
        degenerate_channels: degenerate,
        act_scale: act_q.scale,
        act_zero_point: act_q.zero_point,
        outer_acc_bits,
        certificate,
        notes,
    };
    Ok((codes, report))
}

/// Parameters of a synthetic layer: Gaussian weights and inputs that follow
/// an AR(1) process along the input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLayer {
    pub k: usize,
    pub c: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
}

fn default_correlation() -> f64 {
    0.8
}

impl SyntheticLayer {
    /// Returns `(W, X)` with shapes `K × C` and `K × D`.
    pub fn generate(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let w = DMatrix::from_fn(self.k, self.c, |_, _| normal());
        let rho = self.correlation.clamp(-0.999, 0.999);
        let innov = (1.0 - rho * rho).sqrt();
        let mut x = DMatrix::<f64>::zeros(self.k, self.d);
        for s in 0..self.d {
            let mut prev = normal();
            x[(0, s)] = prev;
            for i in 1..self.k {
                prev = rho * prev + innov * normal();
                x[(i, s)] = prev;
            }
        }
        (w, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(cfg: QuantConfig, seed: u64) -> LayerJob {
        let (w, x) = SyntheticLayer {
            k: 32,
            c: 6,
            d: 64,
            seed,
            correlation: 0.6,
        }
        .generate();
        LayerJob {
            weights: w,
            calib_float: x,
            config: cfg,
        }
    }

    #[test]
    fn recon_error_zero_for_exact_codes() {
        let x = DMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1);
        let codes = DMatrix::from_row_slice(3, 2, &[1, -2, 3, 0, -1, 2]);
        let scales = [0.5, 0.25];
        let w = DMatrix::from_fn(3, 2, |i, j| scales[j] * codes[(i, j)] as f64);
        assert!(
            reconstruction_error(&w, &x, &x, &codes, &scales)
                .unwrap()
                .abs()
                < 1e-24
        );
        let zeros = DMatrix::<i64>::zeros(3, 2);
        let e = reconstruction_error(&w, &x, &x, &zeros, &scales).unwrap();
        assert!((e - 0.5 * (x.transpose() * &w).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn recon_error_matches_naive_sum() {
        let j = job(QuantConfig::new(4, 4, Algorithm::Gpfq, Variant::Base), 3);
        let (codes, rep) = quantize_layer(&j).unwrap();
        let act_q = calibrate_activations(&j.calib_float, 4, 99.0, RoundingMode::Nearest).unwrap();
        let xq = quantize_activations(&j.calib_float, &act_q).unwrap().values;
        let (k, c) = j.weights.shape();
        let d = j.calib_float.ncols();
        let mut naive = 0.0;
        for ch in 0..c {
            for s in 0..d {
                let mut r = 0.0;
                for i in 0..k {
                    r += j.calib_float[(i, s)] * j.weights[(i, ch)]
                        - xq[(i, s)] * rep.weight_scales[ch] * codes[(i, ch)] as f64;
                }
                naive += 0.5 * r * r;
            }
        }
        assert!((naive - rep.recon_error).abs() <= 1e-9 * naive);
    }

    #[test]
    fn axe_at_32_bits_matches_base() {
        for alg in [Algorithm::Gpfq, Algorithm::Optq] {
            let base = quantize_layer(&job(QuantConfig::new(4, 4, alg, Variant::Base), 5)).unwrap();
            let axe = quantize_layer(&job(
                QuantConfig::new(4, 4, alg, Variant::Axe).with_acc_bits(32),
                5,
            ))
            .unwrap();
            assert_eq!(base.0, axe.0);
            assert_eq!(base.1.recon_error, axe.1.recon_error);
            assert!(base.1.certificate.is_none());
            assert!(axe.1.certificate.as_ref().unwrap().pass());
        }
    }

    #[test]
    fn certificates_pass_under_tight_budget() {
        for alg in [Algorithm::Gpfq, Algorithm::Optq] {
            for tile in [None, Some(8), Some(10)] {
                let mut cfg = QuantConfig::new(4, 4, alg, Variant::Axe).with_acc_bits(11);
                cfg.tile = tile;
                let (_, rep) = quantize_layer(&job(cfg, 9)).unwrap();
                assert!(rep.pass(), "{alg:?} tile {tile:?}");
                assert_eq!(rep.outer_acc_bits.is_some(), tile.is_some());
            }
        }
    }

    #[test]
    fn ep_init_respects_l1_cap() {
        let cfg = QuantConfig::new(4, 4, Algorithm::Gpfq, Variant::EpInit).with_acc_bits(10);
        let (codes, rep) = quantize_layer(&job(cfg, 4)).unwrap();
        let cap = ((1i64 << 10) - 2) as f64 / 15.0;
        for j in 0..codes.ncols() {
            let l1: i64 = codes.column(j).iter().map(|c| c.abs()).sum();
            assert!(l1 as f64 <= cap);
        }
        assert!(rep.certificate.is_some());
    }

    #[test]
    fn memory_efficient_path_agrees() {
        let mut cfg = QuantConfig::new(4, 6, Algorithm::Gpfq, Variant::Axe).with_acc_bits(12);
        let (a, _) = quantize_layer(&job(cfg.clone(), 12)).unwrap();
        cfg.memory_efficient = true;
        let (b, _) = quantize_layer(&job(cfg, 12)).unwrap();
        let differing = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
        // ties at rounding boundaries may flip a handful of codes
        assert!(differing * 50 <= a.len(), "{differing} of {}", a.len());
    }

    #[test]
    fn config_validation() {
        let cfg = QuantConfig::new(4, 4, Algorithm::Gpfq, Variant::Axe);
        assert!(cfg.validate().is_err(), "axe needs acc_bits");
        let mut bad = QuantConfig::new(1, 4, Algorithm::Gpfq, Variant::Base);
        assert!(bad.validate().is_err());
        bad.weight_bits = 4;
        bad.percentile = 0.0;
        assert!(bad.validate().is_err());
        let infeasible = QuantConfig::new(4, 8, Algorithm::Gpfq, Variant::Axe).with_acc_bits(4);
        assert!(matches!(
            quantize_layer(&job(infeasible, 1)),
            Err(QuantError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: QuantConfig = serde_json::from_str(
            r#"{"weight_bits":4,"act_bits":8,"acc_bits":16,"algorithm":"optq","variant":"axe"}"#,
        )
        .unwrap();
        assert_eq!(cfg.rounding, RoundingMode::Nearest);
        assert!(cfg.soft_constraint);
        assert_eq!(cfg.percentile, 99.0);
        assert_eq!(cfg.accumulator, AccumulatorRepr::SignMagnitude);
        assert!(serde_json::from_str::<QuantConfig>(r#"{"weight_bits":4}"#).is_err());
    }

    #[test]
    fn degenerate_channel_flagged() {
        let mut j = job(QuantConfig::new(4, 4, Algorithm::Optq, Variant::Base), 2);
        j.weights.column_mut(1).fill(0.0);
        let (codes, rep) = quantize_layer(&j).unwrap();
        assert_eq!(rep.degenerate_channels, vec![1]);
        assert!(codes.column(1).iter().all(|c| *c == 0));
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = QuantConfig::new(4, 4, Algorithm::Optq, Variant::Axe).with_acc_bits(12);
        let a = serde_json::to_string(&quantize_layer(&job(cfg.clone(), 8)).unwrap().1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool
            .install(|| serde_json::to_string(&quantize_layer(&job(cfg, 8)).unwrap().1).unwrap());
        assert_eq!(a, b);
    }
}
