//! Fully corrective Frank-Wolfe over a growing working set of patterns.
//!
//! Each outer iteration runs the full oracle, stops when the gap is below
//! the target and otherwise adds the oracle's pattern to the working set,
//! then re-optimizes over every pattern in the set. The restricted problem
//! is solved with pairwise Frank-Wolfe steps between vertices ("atoms") of
//! the restricted feasible set, using an exact line search.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fw::{
    check_weights, initial_allocation, lmo_masked, lmo_over, renormalize_checked, Allocation,
    Evaluation, Gradient, SolverOptions, SolverResult, TraceRow, FEASIBILITY_TOL,
};
use crate::rates::RateMatrix;

/// Outer iterations above `factor × K` are reported as unusual.
const OUTER_WARN_FACTOR: usize = 2;
/// Recompute user rates from scratch this often to flush rounding drift.
const REFRESH_EVERY: usize = 64;
/// Atoms lighter than this are folded away.
const DROP_WEIGHT: f64 = 1e-15;

/// One vertex of the restricted feasible set: all resources on `pattern`
/// with cell `b` serving `serving[b]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub pattern: usize,
    pub serving: Vec<Option<usize>>,
}

impl Atom {
    fn value(&self, grad: &Gradient<'_>) -> f64 {
        let rates = grad.rates();
        self.serving
            .iter()
            .enumerate()
            .filter_map(|(b, k)| k.map(|k| grad.scale()[k] * rates.get(k, b, self.pattern)))
            .sum()
    }

    /// Sparse user-rate contribution of this atom at unit weight.
    fn rates(&self, rates: &RateMatrix) -> Vec<(usize, f64)> {
        self.serving
            .iter()
            .enumerate()
            .filter_map(|(b, k)| k.map(|k| (k, rates.get(k, b, self.pattern))))
            .collect()
    }
}

/// Split an allocation into weighted atoms whose weighted sum reproduces it.
///
/// Within one pattern each cell lays its users' fractions end to end on
/// `[0, π_i]` (idle time last); cutting at every cell's breakpoints gives
/// segments on which each cell serves a single user (or nobody).
pub fn decompose(alloc: &Allocation) -> Vec<(Atom, f64)> {
    let (users, cells, _) = alloc.dims();
    let mut out = Vec::new();
    for block in alloc.blocks() {
        if !(block.share > 0.0) {
            continue;
        }
        // per cell: (end, user) segments in order
        let segments: Vec<Vec<(f64, Option<usize>)>> = (0..cells)
            .map(|b| {
                let mut acc = 0.0;
                let mut segs = Vec::new();
                for k in 0..users {
                    let a = block.alpha[b * users + k];
                    if a > 0.0 {
                        acc += a;
                        segs.push((acc.min(block.share), Some(k)));
                    }
                }
                segs.push((block.share, None));
                segs
            })
            .collect();
        let mut cursor = vec![0usize; cells];
        let mut pos = 0.0;
        while pos < block.share {
            let next = (0..cells)
                .map(|b| segments[b][cursor[b]].0)
                .fold(f64::INFINITY, f64::min)
                .min(block.share);
            let width = next - pos;
            if width > DROP_WEIGHT {
                let serving = (0..cells).map(|b| segments[b][cursor[b]].1).collect();
                out.push((Atom { pattern: block.pattern, serving }, width));
            }
            pos = next;
            for b in 0..cells {
                while cursor[b] + 1 < segments[b].len() && segments[b][cursor[b]].0 <= pos {
                    cursor[b] += 1;
                }
            }
            if width <= 0.0 && (0..cells).all(|b| cursor[b] + 1 == segments[b].len()) {
                break;
            }
        }
    }
    out
}

/// Outcome of one restricted solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictedOutcome {
    pub utility: f64,
    /// Gap over the working set only.
    pub gap: f64,
    pub iterations: usize,
}

/// Persistent state of the restricted problem: the working set, the atom
/// weights and the user rates they induce.
#[derive(Debug, Clone)]
pub struct RestrictedSolver<'a> {
    rates: &'a RateMatrix,
    weights: Vec<f64>,
    eligible: Option<Vec<bool>>,
    working_set: Vec<usize>,
    atoms: Vec<(Atom, f64)>,
    index: HashMap<Atom, usize>,
    user_rates: Vec<f64>,
}

impl<'a> RestrictedSolver<'a> {
    /// Start from `alloc`; its support becomes the working set.
    pub fn from_allocation(
        rates: &'a RateMatrix,
        weights: &[f64],
        eligible: Option<&[bool]>,
        alloc: &Allocation,
    ) -> Result<Self> {
        check_weights(weights, rates.num_users())?;
        if alloc.dims() != rates.dims() {
            return Err(Error::Input("initial allocation does not match the rate tensor".into()));
        }
        alloc.check_feasible(FEASIBILITY_TOL)?;
        let mut s = Self {
            rates,
            weights: weights.to_vec(),
            eligible: eligible.map(<[bool]>::to_vec),
            working_set: Vec::new(),
            atoms: Vec::new(),
            index: HashMap::new(),
            user_rates: Vec::new(),
        };
        for block in alloc.blocks() {
            if block.share > 0.0 {
                s.add_pattern(block.pattern);
            }
        }
        for (atom, w) in decompose(alloc) {
            s.add_weight(atom, w);
        }
        s.refresh_rates();
        Ok(s)
    }

    pub fn working_set(&self) -> &[usize] {
        &self.working_set
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Returns false when the pattern was already present.
    pub fn add_pattern(&mut self, pattern: usize) -> bool {
        if self.working_set.contains(&pattern) {
            return false;
        }
        self.working_set.push(pattern);
        true
    }

    pub fn user_rates(&self) -> &[f64] {
        &self.user_rates
    }

    pub fn allocation(&self) -> Allocation {
        let mut a = Allocation::for_rates(self.rates);
        for (atom, w) in &self.atoms {
            a.add_vertex(atom.pattern, &atom.serving, *w);
        }
        a
    }

    fn add_weight(&mut self, atom: Atom, w: f64) {
        match self.index.get(&atom) {
            Some(&j) => self.atoms[j].1 += w,
            None => {
                self.index.insert(atom.clone(), self.atoms.len());
                self.atoms.push((atom, w));
            }
        }
    }

    fn remove_light_atoms(&mut self) {
        if self.atoms.iter().all(|a| a.1 > DROP_WEIGHT) {
            return;
        }
        self.atoms.retain(|a| a.1 > DROP_WEIGHT);
        let total: f64 = self.atoms.iter().map(|a| a.1).sum();
        for a in &mut self.atoms {
            a.1 /= total;
        }
        self.index = self.atoms.iter().enumerate().map(|(j, a)| (a.0.clone(), j)).collect();
    }

    fn refresh_rates(&mut self) {
        let total: f64 = self.atoms.iter().map(|a| a.1).sum();
        for a in &mut self.atoms {
            a.1 /= total;
        }
        let mut r = vec![0.0; self.rates.num_users()];
        for (atom, w) in &self.atoms {
            for (k, v) in atom.rates(self.rates) {
                r[k] += w * v;
            }
        }
        self.user_rates = r;
    }

    /// Re-optimize over the working set until its gap is at most
    /// `inner_eps` or `max_iters` steps were taken.
    pub fn run(&mut self, inner_eps: f64, max_iters: usize) -> Result<RestrictedOutcome> {
        let users = self.rates.num_users();
        let mut eval = Evaluation::from_user_rates(self.user_rates.clone(), &self.weights)?;
        let mut gap = f64::INFINITY;
        for t in 0..=max_iters {
            let grad = Gradient::new(self.rates, eval.scale.clone());
            let toward = lmo_over(&grad, &self.working_set, self.eligible.as_deref());
            let dot = eval.dot_self();
            gap = toward.value() - dot;
            if gap <= inner_eps {
                return Ok(RestrictedOutcome { utility: eval.utility, gap, iterations: t });
            }
            if t == max_iters {
                break;
            }
            let toward = Atom { pattern: toward.pattern, serving: toward.serving() };
            let toward_value = toward.value(&grad);
            let (away, away_value) = self
                .atoms
                .iter()
                .enumerate()
                .map(|(j, (a, _))| (j, a.value(&grad)))
                .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });

            // Direction in user-rate space and the largest feasible step.
            let mut dir = vec![0.0; users];
            for (k, v) in toward.rates(self.rates) {
                dir[k] += v;
            }
            let pairwise = away != usize::MAX && toward_value - away_value > 0.0 && self.atoms[away].0 != toward;
            let max_step = if pairwise {
                for (k, v) in self.atoms[away].0.rates(self.rates) {
                    dir[k] -= v;
                }
                self.atoms[away].1
            } else {
                for (d, r) in dir.iter_mut().zip(&self.user_rates) {
                    *d -= r;
                }
                1.0
            };
            let step = exact_step(&self.user_rates, &dir, &self.weights, max_step);
            if pairwise {
                self.atoms[away].1 -= step;
                if step >= max_step {
                    self.atoms[away].1 = 0.0;
                }
                self.add_weight(toward, step);
            } else {
                for a in &mut self.atoms {
                    a.1 *= 1.0 - step;
                }
                self.add_weight(toward, step);
            }
            self.remove_light_atoms();
            if (t + 1) % REFRESH_EVERY == 0 {
                self.refresh_rates();
            } else {
                for (r, d) in self.user_rates.iter_mut().zip(&dir) {
                    *r = (*r + step * d).max(0.0);
                }
            }
            eval = Evaluation::from_user_rates(self.user_rates.clone(), &self.weights)?;
        }
        Err(Error::InnerSolve {
            iterations: max_iters,
            gap,
            target: inner_eps,
            best: Box::new(self.allocation()),
        })
    }
}

/// Maximize `φ(γ) = Σ_k ω_k ln(R_k + γ d_k)` over `[0, max_step]` by
/// bisection on the decreasing derivative.
fn exact_step(r: &[f64], d: &[f64], weights: &[f64], max_step: f64) -> f64 {
    let slope = |g: f64| -> f64 {
        let mut s = 0.0;
        for ((&r, &d), &w) in r.iter().zip(d).zip(weights) {
            if d != 0.0 {
                let x = r + g * d;
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                s += w * d / x;
            }
        }
        s
    };
    if slope(max_step) >= 0.0 {
        return max_step;
    }
    let (mut lo, mut hi) = (0.0, max_step);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub(crate) fn run_fully_corrective(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    init: Option<Allocation>,
    eligible: Option<&[bool]>,
) -> Result<SolverResult> {
    opts.validate()?;
    check_weights(weights, rates.num_users())?;
    let init = match init {
        Some(a) => a,
        None => initial_allocation(rates, eligible)?,
    };
    let mut solver = RestrictedSolver::from_allocation(rates, weights, eligible, &init)?;
    let inner_eps = opts.inner_epsilon();
    let active_tol = opts.active_tol_for(rates.num_patterns());
    let users = rates.num_users();

    // Settle the starting working set first.
    solver.run(inner_eps, opts.inner_max_iters)?;
    let mut trace = Vec::new();
    let mut certified = false;
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut alloc = solver.allocation();
    let mut eval = Evaluation::from_user_rates(solver.user_rates().to_vec(), weights)?;
    for t in 1..=opts.max_iters {
        iterations = t;
        if t == OUTER_WARN_FACTOR * users + 1 {
            log::warn!("fully corrective solver exceeded {} outer iterations", OUTER_WARN_FACTOR * users);
        }
        let grad = Gradient::new(rates, eval.scale.clone());
        let vertex = lmo_masked(&grad, eligible);
        gap = vertex.value() - eval.dot_self();
        trace.push(TraceRow {
            iteration: t,
            utility: eval.utility,
            gap,
            step: 0.0,
            active: alloc.active_patterns(active_tol).len(),
            working_set: Some(solver.working_set().len()),
        });
        if gap <= opts.epsilon {
            certified = true;
            break;
        }
        if !solver.add_pattern(vertex.pattern) {
            log::debug!("oracle returned pattern {} already in the working set", vertex.pattern);
        }
        solver.run(inner_eps.min(gap / 10.0), opts.inner_max_iters)?;
        alloc = solver.allocation();
        renormalize_checked(&mut alloc)?;
        eval = Evaluation::from_user_rates(alloc.user_rates(rates), weights)?;
    }
    if !certified {
        log::warn!("fully corrective solver stopped after {iterations} outer iterations with gap {gap:e}");
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

/// Solve the multi-cell relaxation with the fully corrective method.
pub fn solve_relaxed_fc(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    init: Option<Allocation>,
) -> Result<SolverResult> {
    if init.is_none() {
        rates.ensure_no_zero_user()?;
    }
    run_fully_corrective(rates, weights, opts, init, None)
}
