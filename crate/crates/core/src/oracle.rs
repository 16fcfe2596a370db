//! Exact overflow checking for integer dot products.
//!
//! Everything here is integer arithmetic on `i128`. With codes of at most
//! 32 bits per operand and `K < 2^63`, no intermediate can overflow, so the
//! extremes are exact.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds::{AccumulatorBudget, AccumulatorRepr};
use crate::numeric::Alphabet;

/// Inputs from the activation box that maximize (`u`) and minimize (`v`) the
/// dot product with a given code vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtremeInputs {
    pub u: Vec<i64>,
    pub v: Vec<i64>,
}

impl ExtremeInputs {
    pub fn max_dot(&self, q: &[i64]) -> i128 {
        dot(q, &self.u)
    }

    pub fn min_dot(&self, q: &[i64]) -> i128 {
        dot(q, &self.v)
    }
}

pub fn dot(q: &[i64], x: &[i64]) -> i128 {
    q.iter().zip(x).map(|(&a, &b)| a as i128 * b as i128).sum()
}

pub fn extreme_inputs(q: &[i64], act: &Alphabet) -> ExtremeInputs {
    let (mu, nu) = (act.lo, act.hi);
    let u = q.iter().map(|&c| if c >= 0 { nu } else { mu }).collect();
    let v = q.iter().map(|&c| if c >= 0 { mu } else { nu }).collect();
    ExtremeInputs { u, v }
}

/// Smallest sign-magnitude register (at least 2 bits) holding every `xᵀq`
/// for `x` in the activation box.
pub fn brute_force_min_bits(q: &[i64], act: &Alphabet) -> u32 {
    let ext = extreme_inputs(q, act);
    AccumulatorRepr::SignMagnitude.required_bits(ext.min_dot(q), ext.max_dot(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowSemantics {
    /// Two's-complement wraparound at `P` bits.
    Wraparound,
    /// Clamp to the sign-magnitude range after every addition.
    Saturate,
    /// Unbounded; only report whether a prefix left the range.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulateResult {
    pub value: i128,
    pub overflow: bool,
}

/// Adds `q_i * x_i` one product at a time into a simulated `p_bits` register.
pub fn simulate_accumulate(
    q: &[i64],
    x: &[i64],
    p_bits: u32,
    semantics: OverflowSemantics,
) -> AccumulateResult {
    let (lo, hi) = AccumulatorRepr::SignMagnitude.range(p_bits);
    let modulus = 1i128 << p_bits;
    let half = 1i128 << (p_bits - 1);
    let mut acc = 0i128;
    let mut overflow = false;
    for (&a, &b) in q.iter().zip(x) {
        let next = acc + a as i128 * b as i128;
        match semantics {
            OverflowSemantics::Exact => {
                overflow |= next < lo || next > hi;
                acc = next;
            }
            OverflowSemantics::Saturate => {
                overflow |= next < lo || next > hi;
                acc = next.clamp(lo, hi);
            }
            OverflowSemantics::Wraparound => {
                let wrapped = (next + half).rem_euclid(modulus) - half;
                overflow |= wrapped != next;
                acc = wrapped;
            }
        }
    }
    AccumulateResult {
        value: acc,
        overflow,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub channel: usize,
    pub tile: usize,
    pub max_dot: i128,
    pub min_dot: i128,
    pub required_bits: u32,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowCertificate {
    pub per_unit: Vec<UnitRecord>,
    pub budget: AccumulatorBudget,
    /// Processing order the tiles were cut from, when not the natural one.
    pub perm: Option<Vec<usize>>,
}

impl OverflowCertificate {
    pub fn pass(&self) -> bool {
        self.per_unit.iter().all(|u| u.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &UnitRecord> {
        self.per_unit.iter().filter(|u| !u.pass)
    }

    pub fn max_required_bits(&self) -> u32 {
        self.per_unit
            .iter()
            .map(|u| u.required_bits)
            .max()
            .unwrap_or(2)
    }
}

/// Checks every channel (column of `codes`, K×C) and tile against the
/// budget's register. Tiles follow `perm` when given.
pub fn verify(
    codes: &DMatrix<i64>,
    budget: &AccumulatorBudget,
    perm: Option<&[usize]>,
) -> OverflowCertificate {
    let (k, c) = codes.shape();
    let order: Vec<usize> = match perm {
        Some(p) => p.to_vec(),
        None => (0..k).collect(),
    };
    let (lo, hi) = budget.register_range();
    let act = &budget.act_alphabet;
    let mut per_unit = Vec::new();
    for j in 0..c {
        for (tile, (start, end)) in budget.tiles(k).into_iter().enumerate() {
            let q: Vec<i64> = order[start..end].iter().map(|&i| codes[(i, j)]).collect();
            let ext = extreme_inputs(&q, act);
            let (max_dot, min_dot) = (ext.max_dot(&q), ext.min_dot(&q));
            per_unit.push(UnitRecord {
                channel: j,
                tile,
                max_dot,
                min_dot,
                required_bits: budget.repr.required_bits(min_dot, max_dot),
                pass: max_dot <= hi && min_dot >= lo,
            });
        }
    }
    OverflowCertificate {
        per_unit,
        budget: *budget,
        perm: perm.map(<[usize]>::to_vec),
    }
}
