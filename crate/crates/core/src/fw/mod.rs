//! Frank-Wolfe solver for the multi-cell relaxation.
//!
//! Maximizes `Σ_k ω_k ln R_k` over resource fractions `α_{kbi}` and
//! pattern shares `π_i` subject to `Σ_k α_{kbi} ≤ π_i` and `Σ_i π_i = 1`.
//! Each iteration calls the closed-form oracle, takes a warm-started Armijo
//! step toward the returned vertex and reports the duality gap
//! `g = ⟨∇U, ᾱ − α⟩`, which bounds the distance to the optimum.

mod allocation;
mod gradient;
mod linesearch;
mod lmo;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rates::RateMatrix;

pub use allocation::{Allocation, AllocationFile, PatternBlock};
pub use gradient::{
    check_weights, utility_and_gradient, utility_from_rates, DenseGradient, Gradient,
    GradientField,
};
pub use linesearch::{armijo_search, armijo_step, MIN_STEP};
pub use lmo::{lmo, lmo_masked, lmo_over, Vertex};

/// Tolerance on `Σ_k α_{kbi} ≤ π_i`.
pub const FEASIBILITY_TOL: f64 = 1e-12;
/// Largest drift of `Σ_i π_i` accepted before renormalization.
pub const SHARE_DRIFT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Target duality gap, in utility units.
    pub epsilon: f64,
    /// Step size the first Armijo search starts from.
    pub gamma0: f64,
    /// Backtracking factor.
    pub beta: f64,
    /// Sufficient-increase constant.
    pub kappa: f64,
    pub max_iters: usize,
    /// Threshold on `π_i` for calling a pattern active; `1e-6 / I` when unset.
    pub active_tol: Option<f64>,
    /// Certificate target of the restricted re-solves in the fully corrective
    /// variant; `epsilon / 10` when unset.
    pub inner_epsilon: Option<f64>,
    /// Iteration budget of each restricted re-solve.
    pub inner_max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            gamma0: 1e-4,
            beta: 0.8,
            kappa: 0.1,
            max_iters: 200_000,
            active_tol: None,
            inner_epsilon: None,
            inner_max_iters: 1_000_000,
        }
    }
}

impl SolverOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.gamma0 > 0.0 && self.gamma0 <= 1.0) {
            return bad("gamma0 must lie in (0, 1]");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("kappa must lie in (0, 1)");
        }
        if self.active_tol.is_some_and(|t| !(t > 0.0)) {
            return bad("active_tol must be positive");
        }
        if self.inner_epsilon.is_some_and(|t| !(t > 0.0)) {
            return bad("inner_epsilon must be positive");
        }
        if self.max_iters == 0 || self.inner_max_iters == 0 {
            return bad("iteration budgets must be positive");
        }
        Ok(())
    }

    pub fn active_tol_for(&self, patterns: usize) -> f64 {
        self.active_tol.unwrap_or(1e-6 / patterns as f64)
    }

    pub fn inner_epsilon(&self) -> f64 {
        self.inner_epsilon.unwrap_or(self.epsilon / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub utility: f64,
    pub gap: f64,
    /// Step taken after this gap evaluation (0 on the final row).
    pub step: f64,
    pub active: usize,
    /// Working-set size of the fully corrective variant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub working_set: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverResult {
    pub allocation: Allocation,
    pub utility: f64,
    /// Final certificate: the optimum exceeds `utility` by at most `gap`.
    pub gap: f64,
    pub iterations: usize,
    pub certified: bool,
    pub active_patterns: Vec<usize>,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let with_ws = trace.iter().any(|r| r.working_set.is_some());
    let mut header = vec!["iteration", "utility", "gap", "step", "active"];
    if with_ws {
        header.push("working_set");
    }
    w.write_record(&header)?;
    for r in trace {
        let mut rec = vec![
            r.iteration.to_string(),
            format!("{:.12}", r.utility),
            format!("{:.6e}", r.gap),
            format!("{:.6e}", r.step),
            r.active.to_string(),
        ];
        if with_ws {
            rec.push(r.working_set.map_or(String::new(), |s| s.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn eligible_rate(rates: &RateMatrix, eligible: Option<&[bool]>, k: usize, b: usize, i: usize) -> f64 {
    match eligible {
        Some(m) if !m[k * rates.num_cells() + b] => 0.0,
        _ => rates.get(k, b, i),
    }
}

/// Single-pattern start: all resources on the reuse-1 pattern (or pattern 0
/// when it is not a candidate), each user attached to its best cell under
/// that pattern and every cell splitting its share evenly.
///
/// Users that get no rate under the start pattern would make the utility
/// −∞. For each of them the pattern offering its best rate joins the start
/// set, the shares are split evenly over the set and such users attach to
/// their best `(cell, pattern)` inside it.
pub fn initial_allocation(rates: &RateMatrix, eligible: Option<&[bool]>) -> Result<Allocation> {
    let (users, cells, patterns) = rates.dims();
    let best_in = |k: usize, i: usize| -> (usize, f64) {
        (0..cells).fold((0, 0.0), |acc, b| {
            let r = eligible_rate(rates, eligible, k, b, i);
            if r > acc.1 { (b, r) } else { acc }
        })
    };
    let mut chosen = vec![rates.reuse1_index().unwrap_or(0)];
    for k in 0..users {
        if chosen.iter().any(|&i| best_in(k, i).1 > 0.0) {
            continue;
        }
        let (i, _, r) = (0..patterns).fold((0, 0, 0.0), |acc, i| {
            let (b, r) = best_in(k, i);
            if r > acc.2 { (i, b, r) } else { acc }
        });
        if !(r > 0.0) {
            return Err(Error::ZeroRateUser { user: k });
        }
        chosen.push(i);
    }
    let share = 1.0 / chosen.len() as f64;
    // (pattern slot, cell) of every user
    let mut attach = vec![(0usize, 0usize); users];
    let mut load = vec![0usize; chosen.len() * cells];
    for (k, slot) in attach.iter_mut().enumerate() {
        let mut best = (0, best_in(k, chosen[0]).0, best_in(k, chosen[0]).1);
        for (s, &i) in chosen.iter().enumerate().skip(1) {
            let (b, r) = best_in(k, i);
            if r > best.2 {
                best = (s, b, r);
            }
        }
        *slot = (best.0, best.1);
        load[best.0 * cells + best.1] += 1;
    }
    let mut alloc = Allocation::for_rates(rates);
    for &i in &chosen {
        alloc.add_share(i, share);
    }
    for (k, &(s, b)) in attach.iter().enumerate() {
        alloc.add_alpha(k, b, chosen[s], share / load[s * cells + b] as f64);
    }
    Ok(alloc)
}

/// State shared by the iteration loops: user rates of the current iterate
/// and the matching gradient scale.
pub(crate) struct Evaluation {
    pub rates: Vec<f64>,
    pub utility: f64,
    pub scale: Vec<f64>,
}

impl Evaluation {
    pub fn at(alloc: &Allocation, rates: &RateMatrix, weights: &[f64]) -> Result<Self> {
        Self::from_user_rates(alloc.user_rates(rates), weights)
    }

    pub fn from_user_rates(r: Vec<f64>, weights: &[f64]) -> Result<Self> {
        let utility = utility_from_rates(&r, weights)?;
        let scale = weights.iter().zip(&r).map(|(w, r)| w / r).collect();
        Ok(Self { rates: r, utility, scale })
    }

    /// `⟨∇U, α⟩`
    pub fn dot_self(&self) -> f64 {
        self.scale.iter().zip(&self.rates).map(|(s, r)| s * r).sum()
    }
}

pub(crate) fn renormalize_checked(alloc: &mut Allocation) -> Result<()> {
    let total = alloc.renormalize_shares();
    if (total - 1.0).abs() >= SHARE_DRIFT_TOL {
        return Err(Error::Infeasible(format!("pattern shares drifted to {total}")));
    }
    alloc.check_feasible(FEASIBILITY_TOL)
}

/// Frank-Wolfe loop; `eligible` optionally restricts which users each cell
/// may serve.
pub(crate) fn run_frank_wolfe(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    init: Option<Allocation>,
    eligible: Option<&[bool]>,
) -> Result<SolverResult> {
    opts.validate()?;
    check_weights(weights, rates.num_users())?;
    let mut alloc = match init {
        Some(a) => {
            if a.dims() != rates.dims() {
                return Err(Error::Input("initial allocation does not match the rate tensor".into()));
            }
            a
        }
        None => initial_allocation(rates, eligible)?,
    };
    alloc.check_feasible(FEASIBILITY_TOL)?;
    let active_tol = opts.active_tol_for(rates.num_patterns());

    let mut trace = Vec::new();
    let mut step = opts.gamma0;
    let mut eval = Evaluation::at(&alloc, rates, weights)?;
    let mut certified = false;
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    for t in 1..=opts.max_iters {
        iterations = t;
        let grad = Gradient::new(rates, eval.scale.clone());
        let vertex = lmo_masked(&grad, eligible);
        gap = vertex.value() - eval.dot_self();
        let mut row = TraceRow {
            iteration: t,
            utility: eval.utility,
            gap,
            step: 0.0,
            active: alloc.active_patterns(active_tol).len(),
            working_set: None,
        };
        if gap <= opts.epsilon {
            trace.push(row);
            certified = true;
            break;
        }
        let rv = vertex.user_rates(rates);
        let mut buf = vec![0.0; rv.len()];
        let searched = armijo_search(
            |g| {
                for ((b, &x), &y) in buf.iter_mut().zip(&eval.rates).zip(&rv) {
                    *b = x + g * (y - x);
                }
                gradient::utility_or_neg_inf(&buf, weights)
            },
            eval.utility,
            gap,
            step,
            opts.beta,
            opts.kappa,
        );
        step = match searched {
            Ok(s) => s,
            Err(Error::NumericalStall { step, .. }) => {
                return Err(Error::Stalled {
                    iteration: t,
                    step,
                    utility: eval.utility,
                    gap,
                    best: Box::new(alloc),
                })
            }
            Err(e) => return Err(e),
        };
        row.step = step;
        trace.push(row);
        alloc.blend_toward(vertex.pattern, &vertex.serving(), step);
        renormalize_checked(&mut alloc)?;
        let next = Evaluation::at(&alloc, rates, weights)?;
        if next.utility < eval.utility {
            // Armijo guarantees ascent in exact arithmetic; only rounding can land here.
            log::debug!("utility dipped by {:e} at iteration {t}", eval.utility - next.utility);
        }
        eval = next;
    }
    if !certified {
        log::warn!("Frank-Wolfe stopped after {iterations} iterations with gap {gap:e}");
    }
    Ok(SolverResult {
        active_patterns: alloc.active_patterns(active_tol),
        allocation: alloc,
        utility: eval.utility,
        gap,
        iterations,
        certified,
        trace,
    })
}

/// Solve the multi-cell relaxation with the Frank-Wolfe method.
pub fn solve_relaxed_fw(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    init: Option<Allocation>,
) -> Result<SolverResult> {
    if init.is_none() {
        rates.ensure_no_zero_user()?;
    }
    run_frank_wolfe(rates, weights, opts, init, None)
}

/// Users receiving resources (above `tol`, with positive rate) from two or
/// more cells under one pattern.
pub fn multi_associated_users(alloc: &Allocation, rates: &RateMatrix, tol: f64) -> Vec<usize> {
    let (users, cells, _) = rates.dims();
    let mut multi = vec![false; users];
    for block in alloc.blocks() {
        let mut count = vec![0u32; users];
        for b in 0..cells {
            let col = rates.column(b, block.pattern);
            for k in 0..users {
                if block.alpha[b * users + k] > tol && col[k] > 0.0 {
                    count[k] += 1;
                }
            }
        }
        for k in 0..users {
            if count[k] >= 2 {
                multi[k] = true;
            }
        }
    }
    (0..users).filter(|&k| multi[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rates(seed: u64, users: usize, cells: usize, patterns: usize) -> RateMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> =
            (0..users * cells * patterns).map(|_| rng.random_range(0.1..10.0)).collect();
        RateMatrix::from_fn(users, cells, patterns, |k, b, i| vals[(k * cells + b) * patterns + i])
            .unwrap()
    }

    #[test]
    fn trivial_instance_is_certified_immediately() {
        let rates = RateMatrix::from_fn(1, 1, 1, |_, _, _| 5.0).unwrap();
        let res = solve_relaxed_fw(&rates, &[1.0], &SolverOptions::default(), None).unwrap();
        assert!(res.certified);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.gap, 0.0);
        assert_eq!(res.allocation.alpha(0, 0, 0), 1.0);
        assert_eq!(res.allocation.pi(0), 1.0);
    }

    #[test]
    fn symmetric_orthogonal_patterns_split_evenly() {
        // pattern 0: cell 0 ON, pattern 1: cell 1 ON; user k only hears cell k.
        let r = 8.0;
        let rates = RateMatrix::from_fn(2, 2, 2, |k, b, i| if k == b && b == i { r } else { 0.0 })
            .unwrap();
        let opts = SolverOptions::with_epsilon(1e-9);
        let res = solve_relaxed_fw(&rates, &[1.0, 1.0], &opts, None).unwrap();
        assert!(res.certified);
        // Closed form 2 ln(r/2); brute 1-D scan over π₀ agrees.
        let scan = (1..10_000)
            .map(|j| {
                let p = j as f64 / 10_000.0;
                (p * r).ln() + ((1.0 - p) * r).ln()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let closed = 2.0 * (r / 2.0).ln();
        assert!((scan - closed).abs() < 1e-6);
        assert!(closed - res.utility <= 1e-9 && res.utility <= closed + 1e-12);
        assert!((res.allocation.pi(0) - 0.5).abs() < 1e-4);
        assert!((res.allocation.alpha(0, 0, 0) - res.allocation.pi(0)).abs() < 1e-12);
    }

    #[test]
    fn init_prefers_reuse1_and_best_cells() {
        let rates = RateMatrix::from_fn(3, 2, 3, |k, b, i| (1 + (k + b + i) % 3) as f64)
            .unwrap()
            .with_pattern_masks(vec![0b01, 0b11, 0b10])
            .unwrap();
        let a = initial_allocation(&rates, None).unwrap();
        assert_eq!(a.active_patterns(0.0), vec![1]);
        // pattern 1: user 0 best at cell 0 (r=2,3 → cell 1), check load split
        a.check_feasible(1e-15).unwrap();
        for k in 0..3 {
            let b = if rates.get(k, 0, 1) >= rates.get(k, 1, 1) { 0 } else { 1 };
            assert!(a.alpha(k, b, 1) > 0.0);
        }
    }

    #[test]
    fn init_covers_users_silent_under_first_pattern() {
        // user 1 only has rate under pattern 2
        let rates = RateMatrix::from_fn(2, 1, 3, |k, _, i| match (k, i) {
            (0, _) => 1.0,
            (1, 2) => 4.0,
            _ => 0.0,
        })
        .unwrap();
        let a = initial_allocation(&rates, None).unwrap();
        assert_eq!(a.active_patterns(0.0), vec![0, 2]);
        assert!(a.user_rates(&rates).iter().all(|&r| r > 0.0));
        a.check_feasible(1e-15).unwrap();
    }

    #[test]
    fn zero_rate_user_rejected() {
        let rates = RateMatrix::from_fn(2, 1, 2, |k, _, _| if k == 0 { 1.0 } else { 0.0 }).unwrap();
        assert!(matches!(
            solve_relaxed_fw(&rates, &[1.0, 1.0], &SolverOptions::default(), None),
            Err(Error::ZeroRateUser { user: 1 })
        ));
    }

    #[test]
    fn iterates_stay_feasible_and_monotone() {
        let rates = random_rates(3, 5, 3, 7);
        let res = solve_relaxed_fw(&rates, &[1.0; 5], &SolverOptions::with_epsilon(1e-3), None)
            .unwrap();
        assert!(res.certified);
        res.allocation.check_feasible(FEASIBILITY_TOL).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1].utility >= w[0].utility - 1e-12);
        }
        assert!(res.gap <= 1e-3);
    }

    #[test]
    fn support_grows_by_at_most_one_pattern_per_iteration() {
        let rates = random_rates(4, 4, 3, 30);
        let opts = SolverOptions { epsilon: 1e-4, max_iters: 60, ..Default::default() };
        let mut alloc = initial_allocation(&rates, None).unwrap();
        assert_eq!(alloc.support_len(), 1);
        for t in 1..=60 {
            let one = SolverOptions { max_iters: 1, ..opts };
            let res = solve_relaxed_fw(&rates, &[1.0; 4], &one, Some(alloc.clone())).unwrap();
            let grown = res.allocation.support_len();
            assert!(grown <= alloc.support_len() + 1);
            assert!(grown <= t + 1);
            alloc = res.allocation;
            if res.certified {
                break;
            }
        }
    }

    #[test]
    fn invalid_options_rejected() {
        let rates = random_rates(1, 2, 2, 2);
        for opts in [
            SolverOptions { epsilon: 0.0, ..Default::default() },
            SolverOptions { beta: 1.0, ..Default::default() },
            SolverOptions { kappa: 0.0, ..Default::default() },
            SolverOptions { gamma0: 1.5, ..Default::default() },
        ] {
            assert!(matches!(solve_relaxed_fw(&rates, &[1.0; 2], &opts, None), Err(Error::Input(_))));
        }
    }

    #[test]
    fn uncertified_when_budget_runs_out() {
        let rates = random_rates(8, 6, 3, 20);
        let opts = SolverOptions { epsilon: 1e-9, max_iters: 3, ..Default::default() };
        let res = solve_relaxed_fw(&rates, &[1.0; 6], &opts, None).unwrap();
        assert!(!res.certified);
        assert_eq!(res.iterations, 3);
        assert!(res.gap > 1e-9);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rates = random_rates(2, 3, 2, 3);
        let res = solve_relaxed_fw(&rates, &[1.0; 3], &SolverOptions::with_epsilon(1e-2), None)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&res.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,utility,gap,step,active"));
        assert_eq!(lines.count(), res.trace.len());
    }

    #[test]
    fn multi_association_counter() {
        let rates = RateMatrix::from_fn(2, 2, 1, |_, _, _| 1.0).unwrap();
        let mut a = Allocation::for_rates(&rates);
        a.add_share(0, 1.0);
        a.add_alpha(0, 0, 0, 0.5);
        a.add_alpha(0, 1, 0, 0.5);
        a.add_alpha(1, 0, 0, 0.5);
        assert_eq!(multi_associated_users(&a, &rates, 1e-9), vec![0]);
    }
}
