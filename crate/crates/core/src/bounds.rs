//! Closed-form accumulator widths and the per-channel budgets derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::numeric::{Alphabet, RoundingMode};

/// Register model for the accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulatorRepr {
    /// `±(2^(P-1) - 1)`
    #[default]
    SignMagnitude,
    /// `-2^(P-1) ..= 2^(P-1) - 1`
    TwosComplement,
}

impl AccumulatorRepr {
    /// Inclusive representable range of a `p_bits` register.
    pub fn range(self, p_bits: u32) -> (i128, i128) {
        let max = (1i128 << (p_bits - 1)) - 1;
        match self {
            AccumulatorRepr::SignMagnitude => (-max, max),
            AccumulatorRepr::TwosComplement => (-max - 1, max),
        }
    }

    /// Smallest width (at least 2) whose range holds both extremes.
    pub fn required_bits(self, min_dot: i128, max_dot: i128) -> u32 {
        let mut p = 2;
        loop {
            let (lo, hi) = self.range(p);
            if min_dot >= lo && max_dot <= hi {
                return p;
            }
            p += 1;
        }
    }
}

fn pow2_minus_one(bits: u32) -> f64 {
    ((1u128 << bits) - 1) as f64
}

fn check_bits(p: u32, n: u32) -> Result<()> {
    if !(2..=64).contains(&p) {
        return Err(QuantError::InvalidArgument(format!(
            "accumulator width must be in 2..=64, got {p}"
        )));
    }
    if !(1..=Alphabet::MAX_BITS).contains(&n) {
        return Err(QuantError::InvalidArgument(format!(
            "activation width must be in 1..={}, got {n}",
            Alphabet::MAX_BITS
        )));
    }
    Ok(())
}

/// Data-type bound on the accumulator width for a `K`-deep dot product of
/// `M`-bit weights with `N`-bit inputs.
///
/// Evaluated exactly: `2^(log2 K + e) + 1 = K * 2^e + 1`, and
/// `ceil(log2(v + 1))` is the bit length of `v`.
pub fn min_accumulator_bits(k: u64, m: u32, n: u32, signed_acts: bool) -> Result<u32> {
    if k == 0 || m == 0 || n == 0 {
        return Err(QuantError::InvalidArgument(
            "K, M and N must all be at least 1".into(),
        ));
    }
    let exponent = n + m - 1 - u32::from(signed_acts);
    let value = (k as u128)
        .checked_shl(exponent)
        .filter(|v| v >> exponent == k as u128);
    let value = value.ok_or_else(|| {
        QuantError::InvalidArgument(format!("K * 2^{exponent} does not fit in 128 bits"))
    })?;
    Ok(128 - value.leading_zeros() + 1)
}

/// ℓ1 cap on integer weight codes, `(2^P - 2) / (2^N - 1)`.
pub fn l1_budget(p: u32, n: u32) -> Result<f64> {
    check_bits(p, n)?;
    Ok(((1u128 << p) - 2) as f64 / pow2_minus_one(n))
}

/// Strict greedy limits `(A, B)` with `B = (2^(P-1) - 1) / (2^N - 1) - slack`
/// and `A = -B`.
pub fn strict_limits(p: u32, n: u32, slack: f64) -> Result<(f64, f64)> {
    check_bits(p, n)?;
    let b = pow2_minus_one(p - 1) / pow2_minus_one(n) - slack;
    if b <= 0.0 {
        return Err(QuantError::InfeasibleBudget {
            p_bits: p,
            act_bits: n,
            limit: b,
        });
    }
    Ok((-b, b))
}

/// Outer accumulator width for `T`-element tiles with `P_I`-bit inner
/// accumulators: `ceil(P_I + log2 K - log2 T)`, computed as
/// `P_I + ceil(log2(K / T))` on integers.
pub fn outer_accumulator_bits(p_inner: u32, k: u64, tile: u64) -> Result<u32> {
    if tile == 0 || tile > k {
        return Err(QuantError::InvalidArgument(format!(
            "tile size must be in 1..=K ({k}), got {tile}"
        )));
    }
    let mut extra = 0u32;
    while (tile as u128) << extra < k as u128 {
        extra += 1;
    }
    Ok(p_inner + extra)
}

/// Everything the constrained algorithms need to know about one target
/// accumulator. Limits are in integer-code units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorBudget {
    pub p_bits: u32,
    pub tile: Option<usize>,
    pub act_alphabet: Alphabet,
    pub slack: f64,
    pub repr: AccumulatorRepr,
    pub limit_neg: f64,
    pub limit_pos: f64,
    pub soft_budget: f64,
}

impl AccumulatorBudget {
    pub fn new(
        p_bits: u32,
        tile: Option<usize>,
        act_alphabet: Alphabet,
        rounding: RoundingMode,
        repr: AccumulatorRepr,
    ) -> Result<Self> {
        Self::with_slack(p_bits, tile, act_alphabet, rounding.slack(), repr)
    }

    /// Like [`AccumulatorBudget::new`] but with an explicit rounding slack.
    pub fn with_slack(
        p_bits: u32,
        tile: Option<usize>,
        act_alphabet: Alphabet,
        slack: f64,
        repr: AccumulatorRepr,
    ) -> Result<Self> {
        if tile == Some(0) {
            return Err(QuantError::InvalidArgument("tile size must be >= 1".into()));
        }
        if !(slack.is_finite() && slack >= 0.0) {
            return Err(QuantError::InvalidArgument(format!("bad slack {slack}")));
        }
        let n = act_alphabet.bits;
        let (_, limit_pos) = strict_limits(p_bits, n, slack)?;
        let limit_neg = match repr {
            AccumulatorRepr::SignMagnitude => -limit_pos,
            // one extra code unit of negative headroom
            AccumulatorRepr::TwosComplement => {
                -(((1u128 << (p_bits - 1)) as f64) / pow2_minus_one(n) - slack)
            }
        };
        Ok(Self {
            p_bits,
            tile,
            act_alphabet,
            slack,
            repr,
            limit_neg,
            limit_pos,
            soft_budget: l1_budget(p_bits, n)?,
        })
    }

    /// Contiguous `[start, end)` index ranges the budget applies to.
    pub fn tiles(&self, k: usize) -> Vec<(usize, usize)> {
        let t = self.tile.unwrap_or(k).clamp(1, k.max(1));
        (0..k).step_by(t).map(|s| (s, (s + t).min(k))).collect()
    }

    pub fn register_range(&self) -> (i128, i128) {
        self.repr.range(self.p_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent evaluation through exact integers in a different form:
    /// smallest P with K * 2^e + 1 <= 2^(P - 1).
    fn oracle_pstar(k: u64, m: u32, n: u32, signed: bool) -> u32 {
        let e = n + m - 1 - u32::from(signed);
        let v = (k as u128) << e;
        let mut p = 1;
        while (1u128 << p) < v + 1 {
            p += 1;
        }
        p + 1
    }

    #[test]
    fn min_bits_examples() {
        assert_eq!(min_accumulator_bits(128, 4, 8, false).unwrap(), 20);
        assert_eq!(min_accumulator_bits(1024, 4, 8, false).unwrap(), 23);
        assert_eq!(min_accumulator_bits(1, 1, 1, true).unwrap(), 2);
        assert!(min_accumulator_bits(0, 4, 8, false).is_err());
    }

    #[test]
    fn min_bits_matches_oracle() {
        for k in 1..300u64 {
            for m in 1..9 {
                for n in 1..9 {
                    for s in [false, true] {
                        assert_eq!(
                            min_accumulator_bits(k, m, n, s).unwrap(),
                            oracle_pstar(k, m, n, s),
                            "k={k} m={m} n={n} s={s}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn l1_budget_examples() {
        assert!((l1_budget(16, 8).unwrap() - 65534.0 / 255.0).abs() < 1e-12);
        assert_eq!(l1_budget(2, 1).unwrap(), 2.0);
        assert!((l1_budget(32, 8).unwrap() - 4294967294.0 / 255.0).abs() < 1e-6);
        assert!((l1_budget(32, 8).unwrap() - 16843009.0).abs() < 0.01);
    }

    #[test]
    fn strict_limit_examples() {
        let (a, b) = strict_limits(16, 8, 0.5).unwrap();
        assert!((b - (32767.0 / 255.0 - 0.5)).abs() < 1e-12);
        assert!((b - 127.998).abs() < 1e-3);
        assert_eq!(a, -b);
        let (_, b0) = strict_limits(16, 8, 0.0).unwrap();
        assert!((b0 - 128.498).abs() < 1e-3);
        assert!(matches!(
            strict_limits(2, 8, 0.5),
            Err(QuantError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn zero_slack_limit_is_half_l1_budget() {
        for p in 2..40 {
            for n in 1..9 {
                let (_, b) = strict_limits(p, n, 0.0).unwrap();
                assert_eq!(2.0 * b, l1_budget(p, n).unwrap());
            }
        }
    }

    #[test]
    fn outer_bits_examples() {
        assert_eq!(outer_accumulator_bits(16, 4096, 64).unwrap(), 22);
        assert_eq!(outer_accumulator_bits(16, 128, 128).unwrap(), 16);
        assert_eq!(outer_accumulator_bits(16, 128, 64).unwrap(), 17);
        assert_eq!(outer_accumulator_bits(16, 5, 2).unwrap(), 18);
        assert!(outer_accumulator_bits(16, 4, 8).is_err());
    }

    #[test]
    fn bounds_are_monotone() {
        for n in 1..8 {
            for p in 3..30 {
                assert!(l1_budget(p, n).unwrap() >= l1_budget(p - 1, n).unwrap());
                assert!(l1_budget(p, n + 1).unwrap() <= l1_budget(p, n).unwrap());
            }
        }
        for k in [1u64, 7, 64, 1000] {
            for m in 1..6 {
                for n in 1..6 {
                    let base = min_accumulator_bits(k, m, n, false).unwrap();
                    assert!(min_accumulator_bits(k, m + 1, n, false).unwrap() >= base);
                    assert!(min_accumulator_bits(k, m, n + 1, false).unwrap() >= base);
                }
            }
        }
    }

    #[test]
    fn twos_complement_widens_negative_limit() {
        let acts = Alphabet::unsigned(2).unwrap();
        let sm = AccumulatorBudget::new(
            4,
            None,
            acts,
            RoundingMode::Nearest,
            AccumulatorRepr::SignMagnitude,
        )
        .unwrap();
        let tc = AccumulatorBudget::new(
            4,
            None,
            acts,
            RoundingMode::Nearest,
            AccumulatorRepr::TwosComplement,
        )
        .unwrap();
        assert_eq!(sm.limit_pos, tc.limit_pos);
        assert!((sm.limit_neg - (-(7.0 / 3.0 - 0.5))).abs() < 1e-12);
        assert!((tc.limit_neg - (-(8.0 / 3.0 - 0.5))).abs() < 1e-12);
    }

    #[test]
    fn tiles_cover_tail() {
        let acts = Alphabet::unsigned(4).unwrap();
        let b = AccumulatorBudget::new(
            12,
            Some(4),
            acts,
            RoundingMode::Nearest,
            AccumulatorRepr::SignMagnitude,
        )
        .unwrap();
        assert_eq!(b.tiles(10), vec![(0, 4), (4, 8), (8, 10)]);
        let mono = AccumulatorBudget { tile: None, ..b };
        assert_eq!(mono.tiles(10), vec![(0, 10)]);
    }

    #[test]
    fn required_bits_convention() {
        let sm = AccumulatorRepr::SignMagnitude;
        assert_eq!(sm.required_bits(0, 0), 2);
        assert_eq!(sm.required_bits(0, 1), 2);
        assert_eq!(sm.required_bits(-3, 6), 4);
        assert_eq!(AccumulatorRepr::TwosComplement.required_bits(-8, 7), 4);
        assert_eq!(sm.required_bits(-8, 7), 5);
    }
}
