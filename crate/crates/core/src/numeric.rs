//! Integer alphabets, rounding modes and uniform affine quantizers.
//!
//! Weight quantizers are symmetric and per output channel (one scale per
//! column of `W`, zero point fixed at 0). Activation quantizers are
//! asymmetric, per tensor, over an unsigned alphabet.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

/// Integer representation used for a code set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphabetKind {
    /// `0 ..= 2^b - 1`
    Unsigned,
    /// `-(2^(b-1) - 1) ..= 2^(b-1) - 1`
    SignMagnitude,
    /// `-2^(b-1) ..= 2^(b-1) - 1`
    TwosComplement,
}

/// A contiguous set of integer codes `lo ..= hi` with `lo <= 0 <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alphabet {
    pub bits: u32,
    pub kind: AlphabetKind,
    pub lo: i64,
    pub hi: i64,
}

impl Alphabet {
    pub const MAX_BITS: u32 = 32;

    pub fn new(bits: u32, kind: AlphabetKind) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(QuantError::InvalidArgument(format!(
                "alphabet bit width must be in 1..={}, got {bits}",
                Self::MAX_BITS
            )));
        }
        let half = 1i64 << (bits - 1);
        let (lo, hi) = match kind {
            AlphabetKind::Unsigned => (0, (1i64 << bits) - 1),
            AlphabetKind::SignMagnitude => (-(half - 1), half - 1),
            AlphabetKind::TwosComplement => (-half, half - 1),
        };
        Ok(Self { bits, kind, lo, hi })
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, AlphabetKind::Unsigned)
    }

    /// Symmetric signed alphabet, the default for weights.
    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, AlphabetKind::SignMagnitude)
    }

    pub fn is_signed(&self) -> bool {
        self.kind != AlphabetKind::Unsigned
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.lo..=self.hi).contains(&code)
    }

    /// Number of codes minus one, i.e. `hi - lo`.
    pub fn span(&self) -> i64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Round half away from zero.
    #[default]
    Nearest,
    ToZero,
}

impl RoundingMode {
    /// Worst-case magnitude added by rounding, in code units.
    pub fn slack(self) -> f64 {
        match self {
            RoundingMode::Nearest => 0.5,
            RoundingMode::ToZero => 0.0,
        }
    }

    pub fn round(self, t: f64) -> f64 {
        match self {
            RoundingMode::Nearest => t.round(),
            RoundingMode::ToZero => {
                // s * c / s can land one ulp below c; truncating that would
                // break idempotence on dequantized codes.
                let nearest = t.round();
                if (t - nearest).abs() <= 1e-9 * t.abs().max(1.0) {
                    nearest
                } else {
                    t.trunc()
                }
            }
        }
    }
}

/// `code = clip(round(w / s) + z; lo, hi) - z`, dequantized as `s * code`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineQuantizer {
    pub scale: f64,
    pub zero_point: i64,
    pub alphabet: Alphabet,
    pub rounding: RoundingMode,
}

impl AffineQuantizer {
    pub fn new(
        scale: f64,
        zero_point: i64,
        alphabet: Alphabet,
        rounding: RoundingMode,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidArgument(format!(
                "scale must be finite and strictly positive, got {scale}"
            )));
        }
        if !alphabet.contains(zero_point) {
            return Err(QuantError::InvalidArgument(format!(
                "zero point {zero_point} outside alphabet [{}, {}]",
                alphabet.lo, alphabet.hi
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            alphabet,
            rounding,
        })
    }

    /// Symmetric weight quantizer (`z = 0`) over a sign-magnitude alphabet.
    pub fn symmetric(scale: f64, bits: u32, rounding: RoundingMode) -> Result<Self> {
        Self::new(scale, 0, Alphabet::signed(bits)?, rounding)
    }

    /// Smallest and largest zero-shifted code.
    pub fn code_range(&self) -> (i64, i64) {
        (
            self.alphabet.lo - self.zero_point,
            self.alphabet.hi - self.zero_point,
        )
    }

    pub fn quantize(&self, w: f64) -> Result<i64> {
        if !w.is_finite() {
            return Err(QuantError::NonFinite(w));
        }
        Ok(self.quantize_code_units(w / self.scale))
    }

    /// Quantizes a value already expressed in code units (`w / s`).
    ///
    /// Callers must pass a finite value; NaN maps to the zero code.
    pub fn quantize_code_units(&self, t: f64) -> i64 {
        let (lo, hi) = self.code_range();
        let r = self.rounding.round(t);
        if r.is_nan() {
            return 0;
        }
        // clamp in float space first so huge values cannot overflow the cast
        let shifted =
            (r + self.zero_point as f64).clamp(self.alphabet.lo as f64, self.alphabet.hi as f64);
        let code = shifted as i64 - self.zero_point;
        code.clamp(lo, hi)
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        self.scale * code as f64
    }

    /// Unshifted code (`code + z`), the integer actually fed to a MAC unit.
    pub fn raw_code(&self, w: f64) -> Result<i64> {
        Ok(self.quantize(w)? + self.zero_point)
    }
}

/// Per-channel weight scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub scale: f64,
    /// Set when the channel was all zeros and the scale fell back to 1.
    pub degenerate: bool,
}

/// `max |w_i| / (2^(b-1) - 1)`, with a unit fallback for all-zero rows.
pub fn compute_scale(w_row: &[f64], alphabet: &Alphabet) -> Result<ChannelScale> {
    if w_row.is_empty() {
        return Err(QuantError::InvalidArgument("empty weight channel".into()));
    }
    if !alphabet.is_signed() {
        return Err(QuantError::InvalidArgument(
            "weight scales require a signed alphabet".into(),
        ));
    }
    let mut max_abs = 0.0f64;
    for &w in w_row {
        if !w.is_finite() {
            return Err(QuantError::NonFinite(w));
        }
        max_abs = max_abs.max(w.abs());
    }
    let levels = ((1i64 << (alphabet.bits - 1)) - 1) as f64;
    if max_abs == 0.0 || levels == 0.0 {
        return Ok(ChannelScale {
            scale: 1.0,
            degenerate: true,
        });
    }
    Ok(ChannelScale {
        scale: max_abs / levels,
        degenerate: false,
    })
}

/// Linear-interpolated quantile of already sorted data, `q` in `[0, 1]`.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-tensor asymmetric activation quantizer over `0 ..= 2^bits - 1`.
///
/// The observed range is clipped to `[quantile(1 - p), quantile(p)]` and then
/// widened to contain zero; the lower end maps to code 0.
pub fn calibrate_activations(
    x: &DMatrix<f64>,
    bits: u32,
    percentile: f64,
    rounding: RoundingMode,
) -> Result<AffineQuantizer> {
    if x.ncols() == 0 || x.nrows() == 0 {
        return Err(QuantError::InvalidArgument(
            "calibration matrix must be non-empty".into(),
        ));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(QuantError::InvalidArgument(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    let alphabet = Alphabet::unsigned(bits)?;
    let mut values: Vec<f64> = x.iter().copied().collect();
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(*bad));
    }
    values.sort_by(f64::total_cmp);
    let p = percentile / 100.0;
    let low = sorted_quantile(&values, 1.0 - p).min(0.0);
    let high = sorted_quantile(&values, p).max(0.0);
    let range = high - low;
    let scale = if range > 0.0 {
        range / alphabet.span() as f64
    } else {
        1.0
    };
    let zero_point = (-low / scale).round() as i64;
    AffineQuantizer::new(
        scale,
        zero_point.clamp(alphabet.lo, alphabet.hi),
        alphabet,
        rounding,
    )
}

/// Dequantized activations `X~` and the unshifted integer codes behind them.
#[derive(Debug, Clone)]
pub struct QuantizedActivations {
    pub quantizer: AffineQuantizer,
    pub values: DMatrix<f64>,
    pub codes: DMatrix<i64>,
}

pub fn quantize_activations(
    x: &DMatrix<f64>,
    quantizer: &AffineQuantizer,
) -> Result<QuantizedActivations> {
    let mut codes = DMatrix::<i64>::zeros(x.nrows(), x.ncols());
    let mut values = DMatrix::<f64>::zeros(x.nrows(), x.ncols());
    for (idx, &v) in x.iter().enumerate() {
        let code = quantizer.quantize(v)?;
        codes[idx] = code + quantizer.zero_point;
        values[idx] = quantizer.dequantize(code);
    }
    Ok(QuantizedActivations {
        quantizer: *quantizer,
        values,
        codes,
    })
}
