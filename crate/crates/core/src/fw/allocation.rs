use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rates::RateMatrix;

/// Resources of one pattern: its share `π_i` and the K×B fractions
/// `α_{kbi}`, stored cell-major (`alpha[b * K + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBlock {
    pub pattern: usize,
    pub share: f64,
    pub alpha: Vec<f64>,
}

/// Sparse allocation `(α, π)`: only patterns carrying resources are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    users: usize,
    cells: usize,
    patterns: usize,
    blocks: Vec<PatternBlock>,
    slots: HashMap<usize, usize>,
}

impl Allocation {
    pub fn empty(users: usize, cells: usize, patterns: usize) -> Self {
        Self { users, cells, patterns, blocks: Vec::new(), slots: HashMap::new() }
    }

    pub fn for_rates(rates: &RateMatrix) -> Self {
        let (k, b, i) = rates.dims();
        Self::empty(k, b, i)
    }

    /// Build from dense accessors; patterns with zero share and no
    /// resources are skipped.
    pub fn from_dense(
        users: usize,
        cells: usize,
        patterns: usize,
        pi: &[f64],
        alpha: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::empty(users, cells, patterns);
        for (i, &share) in pi.iter().enumerate().take(patterns) {
            let mut block = vec![0.0; users * cells];
            for b in 0..cells {
                for k in 0..users {
                    block[b * users + k] = alpha(k, b, i);
                }
            }
            if share != 0.0 || block.iter().any(|&a| a != 0.0) {
                out.insert_block(PatternBlock { pattern: i, share, alpha: block });
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.users, self.cells, self.patterns)
    }

    pub fn blocks(&self) -> &[PatternBlock] {
        &self.blocks
    }

    pub fn block(&self, pattern: usize) -> Option<&PatternBlock> {
        self.slots.get(&pattern).map(|&s| &self.blocks[s])
    }

    pub fn pi(&self, pattern: usize) -> f64 {
        self.block(pattern).map_or(0.0, |b| b.share)
    }

    pub fn alpha(&self, user: usize, cell: usize, pattern: usize) -> f64 {
        self.block(pattern).map_or(0.0, |b| b.alpha[cell * self.users + user])
    }

    /// Dense π vector.
    pub fn shares(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.patterns];
        for b in &self.blocks {
            v[b.pattern] = b.share;
        }
        v
    }

    /// Patterns with `π_i > tol`, ascending.
    pub fn active_patterns(&self, tol: f64) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.blocks.iter().filter(|b| b.share > tol).map(|b| b.pattern).collect();
        v.sort_unstable();
        v
    }

    /// Number of stored patterns (those with `π_i > 0`).
    pub fn support_len(&self) -> usize {
        self.blocks.iter().filter(|b| b.share > 0.0).count()
    }

    fn insert_block(&mut self, block: PatternBlock) {
        debug_assert!(block.pattern < self.patterns);
        match self.slots.get(&block.pattern) {
            Some(&s) => self.blocks[s] = block,
            None => {
                self.slots.insert(block.pattern, self.blocks.len());
                self.blocks.push(block);
            }
        }
    }

    fn block_mut(&mut self, pattern: usize) -> &mut PatternBlock {
        let slot = match self.slots.get(&pattern) {
            Some(&s) => s,
            None => {
                self.slots.insert(pattern, self.blocks.len());
                self.blocks.push(PatternBlock {
                    pattern,
                    share: 0.0,
                    alpha: vec![0.0; self.users * self.cells],
                });
                self.blocks.len() - 1
            }
        };
        &mut self.blocks[slot]
    }

    /// Add `amount` of resources of `pattern`, served as listed in
    /// `serving` (one optional user per cell).
    pub fn add_vertex(&mut self, pattern: usize, serving: &[Option<usize>], amount: f64) {
        let users = self.users;
        let block = self.block_mut(pattern);
        block.share += amount;
        for (b, k) in serving.iter().enumerate() {
            if let Some(k) = *k {
                block.alpha[b * users + k] += amount;
            }
        }
    }

    /// Add `amount` to a single entry `α_{kbi}` without touching `π_i`.
    pub fn add_alpha(&mut self, user: usize, cell: usize, pattern: usize, amount: f64) {
        let users = self.users;
        self.block_mut(pattern).alpha[cell * users + user] += amount;
    }

    pub fn add_share(&mut self, pattern: usize, amount: f64) {
        self.block_mut(pattern).share += amount;
    }

    /// `self ← (1 − γ) self + γ · vertex`.
    pub fn blend_toward(&mut self, pattern: usize, serving: &[Option<usize>], step: f64) {
        if step >= 1.0 {
            self.blocks.clear();
            self.slots.clear();
            self.add_vertex(pattern, serving, 1.0);
            return;
        }
        let keep = 1.0 - step;
        for block in &mut self.blocks {
            block.share *= keep;
            block.alpha.iter_mut().for_each(|a| *a *= keep);
        }
        self.add_vertex(pattern, serving, step);
    }

    /// Rescale the allocation so that π sums to one; returns the sum found
    /// before rescaling.
    pub fn renormalize_shares(&mut self) -> f64 {
        let total: f64 = self.blocks.iter().map(|b| b.share).sum();
        if total > 0.0 && total != 1.0 {
            for block in &mut self.blocks {
                block.share /= total;
                block.alpha.iter_mut().for_each(|a| *a /= total);
            }
        }
        total
    }

    /// `R_k = Σ_{b,i} α_{kbi} r_{kbi}`.
    pub fn user_rates(&self, rates: &RateMatrix) -> Vec<f64> {
        let mut r = vec![0.0; self.users];
        for block in &self.blocks {
            for b in 0..self.cells {
                let col = rates.column(b, block.pattern);
                let a = &block.alpha[b * self.users..(b + 1) * self.users];
                for k in 0..self.users {
                    r[k] += a[k] * col[k];
                }
            }
        }
        r
    }

    /// `R_{kb} = Σ_i α_{kbi} r_{kbi}`, row-major K×B.
    pub fn user_cell_rates(&self, rates: &RateMatrix) -> Vec<f64> {
        let mut r = vec![0.0; self.users * self.cells];
        for block in &self.blocks {
            for b in 0..self.cells {
                let col = rates.column(b, block.pattern);
                for k in 0..self.users {
                    r[k * self.cells + b] += block.alpha[b * self.users + k] * col[k];
                }
            }
        }
        r
    }

    /// Zero out `α_{kbi}` wherever `keep(k, b)` is false; π is unchanged.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for b in 0..self.cells {
                for k in 0..self.users {
                    if !keep(k, b) {
                        block.alpha[b * self.users + k] = 0.0;
                    }
                }
            }
        }
        out
    }

    /// Check `α ≥ 0`, `π ≥ 0`, `|Σπ − 1| ≤ tol` and `Σ_k α_{kbi} ≤ π_i + tol`.
    pub fn check_feasible(&self, tol: f64) -> Result<()> {
        let mut total = 0.0;
        for block in &self.blocks {
            if !(block.share >= 0.0) {
                return Err(Error::Infeasible(format!(
                    "pattern {} has share {}",
                    block.pattern, block.share
                )));
            }
            total += block.share;
            for b in 0..self.cells {
                let col = &block.alpha[b * self.users..(b + 1) * self.users];
                if let Some(k) = col.iter().position(|&a| !(a >= 0.0)) {
                    return Err(Error::Infeasible(format!(
                        "alpha[{k}][{b}][{}] = {}",
                        block.pattern, col[k]
                    )));
                }
                let used: f64 = col.iter().sum();
                if used > block.share + tol {
                    return Err(Error::Infeasible(format!(
                        "cell {b} uses {used} of pattern {} with share {}",
                        block.pattern, block.share
                    )));
                }
            }
        }
        if (total - 1.0).abs() > tol {
            return Err(Error::Infeasible(format!("pattern shares sum to {total}")));
        }
        Ok(())
    }

    pub fn to_file(&self) -> AllocationFile {
        let mut blocks: Vec<&PatternBlock> = self.blocks.iter().collect();
        blocks.sort_by_key(|b| b.pattern);
        let mut pi = Vec::new();
        let mut alpha = Vec::new();
        for block in blocks {
            if block.share != 0.0 {
                pi.push((block.pattern, block.share));
            }
            for b in 0..self.cells {
                for k in 0..self.users {
                    let a = block.alpha[b * self.users + k];
                    if a != 0.0 {
                        alpha.push((k, b, block.pattern, a));
                    }
                }
            }
        }
        AllocationFile { dims: [self.users, self.cells, self.patterns], pi, alpha }
    }

    pub fn from_file(file: &AllocationFile) -> Result<Self> {
        let [users, cells, patterns] = file.dims;
        let mut out = Self::empty(users, cells, patterns);
        for &(i, share) in &file.pi {
            if i >= patterns {
                return Err(Error::Input(format!("pattern index {i} out of range")));
            }
            out.add_share(i, share);
        }
        for &(k, b, i, a) in &file.alpha {
            if k >= users || b >= cells || i >= patterns {
                return Err(Error::Input(format!("alpha index ({k}, {b}, {i}) out of range")));
            }
            out.add_alpha(k, b, i, a);
        }
        Ok(out)
    }
}

/// JSON layout of an allocation: `pi` as `(pattern, share)` pairs and `alpha`
/// as a sparse `(user, cell, pattern, value)` triplet list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub dims: [usize; 3],
    pub pi: Vec<(usize, f64)>,
    pub alpha: Vec<(usize, usize, usize, f64)>,
}

impl Serialize for Allocation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Allocation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = AllocationFile::deserialize(d)?;
        Allocation::from_file(&file).map_err(serde::de::Error::custom)
    }
}
