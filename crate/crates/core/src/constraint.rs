//! Running accumulator budget shared by the constrained GPFQ and OPTQ loops.

use crate::bounds::AccumulatorBudget;
use crate::error::Result;
use crate::projection::{derive_threshold, range_clip, soft_threshold};

/// Per-channel state: remaining negative room `a = A - alpha`, remaining
/// positive room `b = B - beta` and the soft threshold of the current tile.
///
/// `alpha` is the (non-positive) sum of negative codes placed so far in the
/// tile and `beta` the sum of positive ones; the lower clip bound is paid
/// for by negative codes, the upper by positive ones.
#[derive(Debug, Clone)]
pub struct BudgetTracker {
    limit_neg: f64,
    limit_pos: f64,
    tiles: Vec<(usize, usize)>,
    lambdas: Vec<f64>,
    soft: bool,
    tile_idx: usize,
    a: f64,
    b: f64,
}

impl BudgetTracker {
    /// `initial` holds the channel's weights in code units and in processing
    /// order; the soft threshold of each tile is derived from it.
    pub fn new(budget: &AccumulatorBudget, initial: &[f64], soft: bool) -> Result<Self> {
        let tiles = budget.tiles(initial.len());
        let lambdas = if soft {
            tiles
                .iter()
                .map(|&(s, e)| derive_threshold(&initial[s..e], budget.soft_budget))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![0.0; tiles.len()]
        };
        Ok(Self {
            limit_neg: budget.limit_neg,
            limit_pos: budget.limit_pos,
            tiles,
            lambdas,
            soft,
            tile_idx: 0,
            a: budget.limit_neg,
            b: budget.limit_pos,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn remaining(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    fn enter(&mut self, pos: usize) {
        while self.tile_idx + 1 < self.tiles.len() && pos >= self.tiles[self.tile_idx].1 {
            self.tile_idx += 1;
            self.a = self.limit_neg;
            self.b = self.limit_pos;
        }
    }

    /// Soft threshold then clip to `[a, b]` for processing position `pos`.
    /// An exhausted interval forces zero.
    pub fn constrain(&mut self, pos: usize, v: f64) -> f64 {
        self.enter(pos);
        let v = if self.soft {
            soft_threshold(v, self.lambdas[self.tile_idx])
        } else {
            v
        };
        // Rounding may overdraw a side by up to the slack; the interval
        // still has to contain zero so an exhausted side yields 0 rather
        // than a code of the opposite sign.
        range_clip(v, self.a.min(0.0), self.b.max(0.0)).unwrap_or(0.0)
    }

    pub fn commit(&mut self, code: i64) {
        if code > 0 {
            self.b -= code as f64;
        } else if code < 0 {
            self.a -= code as f64;
        }
    }
}
