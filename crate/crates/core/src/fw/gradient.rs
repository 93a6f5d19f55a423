use crate::error::{Error, Result};
use crate::fw::Allocation;
use crate::rates::RateMatrix;

/// Read access to a K×B×I gradient tensor.
///
/// `eligible`, when given, is a row-major K×B mask restricting which users
/// may be picked at each cell.
pub trait GradientField: Sync {
    fn dims(&self) -> (usize, usize, usize);

    fn entry(&self, user: usize, cell: usize, pattern: usize) -> f64;

    /// Largest entry of column `(cell, pattern)` and its user; ties go to
    /// the lowest user index. Returns `(0, 0.0)` if no user is eligible.
    fn best_user(&self, cell: usize, pattern: usize, eligible: Option<&[bool]>) -> (usize, f64) {
        let (users, cells, _) = self.dims();
        let mut best: Option<(usize, f64)> = None;
        for k in 0..users {
            if eligible.is_some_and(|m| !m[k * cells + cell]) {
                continue;
            }
            let v = self.entry(k, cell, pattern);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.unwrap_or((0, 0.0))
    }
}

/// Gradient of the log utility, kept implicit: entry `(k, b, i)` equals
/// `scale[k] · r_{kbi}` with `scale[k] = ω_k / R_k`.
#[derive(Debug, Clone)]
pub struct Gradient<'a> {
    rates: &'a RateMatrix,
    scale: Vec<f64>,
}

impl<'a> Gradient<'a> {
    pub fn new(rates: &'a RateMatrix, scale: Vec<f64>) -> Self {
        debug_assert_eq!(scale.len(), rates.num_users());
        Self { rates, scale }
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn rates(&self) -> &'a RateMatrix {
        self.rates
    }

    /// `⟨∇U, α⟩` given the user rates `R(α)`.
    pub fn dot_rates(&self, user_rates: &[f64]) -> f64 {
        self.scale.iter().zip(user_rates).map(|(s, r)| s * r).sum()
    }

    pub fn to_dense(&self) -> DenseGradient {
        let (users, cells, patterns) = self.rates.dims();
        let mut data = Vec::with_capacity(users * cells * patterns);
        for k in 0..users {
            for b in 0..cells {
                for i in 0..patterns {
                    data.push(self.entry(k, b, i));
                }
            }
        }
        DenseGradient { dims: (users, cells, patterns), data }
    }
}

impl GradientField for Gradient<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        self.rates.dims()
    }

    #[inline]
    fn entry(&self, user: usize, cell: usize, pattern: usize) -> f64 {
        self.scale[user] * self.rates.get(user, cell, pattern)
    }

    #[inline]
    fn best_user(&self, cell: usize, pattern: usize, eligible: Option<&[bool]>) -> (usize, f64) {
        let col = self.rates.column(cell, pattern);
        let cells = self.rates.num_cells();
        match eligible {
            None => {
                let mut best = (0, self.scale[0] * col[0]);
                for (k, (&s, &r)) in self.scale.iter().zip(col).enumerate().skip(1) {
                    let v = s * r;
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                best
            }
            Some(mask) => {
                let mut best: Option<(usize, f64)> = None;
                for (k, (&s, &r)) in self.scale.iter().zip(col).enumerate() {
                    if !mask[k * cells + cell] {
                        continue;
                    }
                    let v = s * r;
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((k, v));
                    }
                }
                best.unwrap_or((0, 0.0))
            }
        }
    }
}

/// Explicit gradient tensor, row-major `(k, b, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl DenseGradient {
    pub fn from_fn(
        users: usize,
        cells: usize,
        patterns: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(users * cells * patterns);
        for k in 0..users {
            for b in 0..cells {
                for i in 0..patterns {
                    data.push(f(k, b, i));
                }
            }
        }
        Self { dims: (users, cells, patterns), data }
    }
}

impl GradientField for DenseGradient {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn entry(&self, user: usize, cell: usize, pattern: usize) -> f64 {
        let (_, cells, patterns) = self.dims;
        self.data[(user * cells + cell) * patterns + pattern]
    }
}

/// `U = Σ_k ω_k ln R_k`; every `R_k` must be positive.
pub fn utility_from_rates(user_rates: &[f64], weights: &[f64]) -> Result<f64> {
    let mut u = 0.0;
    for (k, (&r, &w)) in user_rates.iter().zip(weights).enumerate() {
        if !(r > 0.0) {
            return Err(Error::DegenerateAllocation { user: k, rate: r });
        }
        u += w * r.ln();
    }
    Ok(u)
}

/// Same as [`utility_from_rates`] but `−∞` instead of an error.
pub(crate) fn utility_or_neg_inf(user_rates: &[f64], weights: &[f64]) -> f64 {
    utility_from_rates(user_rates, weights).unwrap_or(f64::NEG_INFINITY)
}

pub fn check_weights(weights: &[f64], users: usize) -> Result<()> {
    if weights.len() != users {
        return Err(Error::Input(format!("expected {users} weights, got {}", weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Input("weights must be positive and finite".into()));
    }
    Ok(())
}

/// Utility of `alloc` and its gradient `∂U/∂α_{kbi} = ω_k r_{kbi} / R_k`.
pub fn utility_and_gradient<'a>(
    alloc: &Allocation,
    rates: &'a RateMatrix,
    weights: &[f64],
) -> Result<(f64, Gradient<'a>)> {
    check_weights(weights, rates.num_users())?;
    let r = alloc.user_rates(rates);
    let u = utility_from_rates(&r, weights)?;
    let scale = weights.iter().zip(&r).map(|(w, r)| w / r).collect();
    Ok((u, Gradient::new(rates, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn utility_of_rate_e_is_one() {
        let rates = RateMatrix::from_fn(1, 1, 1, |_, _, _| std::f64::consts::E).unwrap();
        let mut a = Allocation::for_rates(&rates);
        a.add_vertex(0, &[Some(0)], 1.0);
        let (u, g) = utility_and_gradient(&a, &rates, &[1.0]).unwrap();
        assert!((u - 1.0).abs() < 1e-15);
        assert!((g.entry(0, 0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_user_is_degenerate() {
        let rates = RateMatrix::from_fn(2, 1, 1, |_, _, _| 1.0).unwrap();
        let mut a = Allocation::for_rates(&rates);
        a.add_vertex(0, &[Some(0)], 1.0);
        assert!(matches!(
            utility_and_gradient(&a, &rates, &[1.0, 1.0]),
            Err(Error::DegenerateAllocation { user: 1, .. })
        ));
    }

    #[test]
    fn doubling_rates_shifts_utility_and_keeps_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..24).map(|_| rng.random_range(0.5..2.0)).collect();
        let rates = RateMatrix::from_fn(3, 2, 4, |k, b, i| vals[(k * 2 + b) * 4 + i]).unwrap();
        let doubled = rates.scaled(2.0).unwrap();
        let alloc = Allocation::from_dense(3, 2, 4, &[0.25; 4], |_, _, _| 0.25 / 3.0);
        let w = [1.0; 3];
        let (u1, g1) = utility_and_gradient(&alloc, &rates, &w).unwrap();
        let (u2, g2) = utility_and_gradient(&alloc, &doubled, &w).unwrap();
        assert!((u2 - u1 - 3.0 * 2f64.ln()).abs() < 1e-12);
        // ω r / R is scale free in r; the per-unit-rate factor ω / R halves.
        for k in 0..3 {
            assert!((g2.scale()[k] - g1.scale()[k] / 2.0).abs() < 1e-15);
            for b in 0..2 {
                for i in 0..4 {
                    assert!((g2.entry(k, b, i) - g1.entry(k, b, i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn doubling_allocation_halves_gradient() {
        let rates = RateMatrix::from_fn(2, 2, 2, |k, b, i| (1 + k + b + i) as f64).unwrap();
        let half = Allocation::from_dense(2, 2, 2, &[0.5, 0.5], |_, _, _| 0.1);
        let full = Allocation::from_dense(2, 2, 2, &[0.5, 0.5], |_, _, _| 0.2);
        let (u1, g1) = utility_and_gradient(&half, &rates, &[1.0, 1.0]).unwrap();
        let (u2, g2) = utility_and_gradient(&full, &rates, &[1.0, 1.0]).unwrap();
        assert!((u2 - u1 - 2.0 * 2f64.ln()).abs() < 1e-12);
        for k in 0..2 {
            for b in 0..2 {
                for i in 0..2 {
                    assert!((g2.entry(k, b, i) - g1.entry(k, b, i) / 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_best_user_respects_eligibility() {
        let g = DenseGradient::from_fn(3, 2, 1, |k, _, _| k as f64);
        // row-major K×B: users 0 and 1 may use cell 0, nobody may use cell 1
        let mask = [true, false, true, false, false, false];
        assert_eq!(g.best_user(0, 0, None), (2, 2.0));
        assert_eq!(g.best_user(0, 0, Some(&mask)), (1, 1.0));
        assert_eq!(g.best_user(1, 0, Some(&[false; 6])), (0, 0.0));
    }
}
