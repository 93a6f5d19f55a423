use crate::error::{Error, Result};
use crate::fw::gradient::utility_or_neg_inf;
use crate::fw::{Allocation, SolverOptions, Vertex};
use crate::rates::RateMatrix;

/// Smallest step tried before giving up.
pub const MIN_STEP: f64 = 1e-15;

/// Warm-started Armijo rule along a feasible segment.
///
/// `utility_at(γ)` evaluates the objective at `current + γ (vertex − current)`,
/// `u0` is its value at `γ = 0` and `gap_dir = ⟨∇U, vertex − current⟩`.
/// Starting from `prev_step`, the step is enlarged by `1/β` (capped at one)
/// while the sufficient-increase test keeps holding, or shrunk by `β` until
/// it holds.
pub fn armijo_search(
    mut utility_at: impl FnMut(f64) -> f64,
    u0: f64,
    gap_dir: f64,
    prev_step: f64,
    beta: f64,
    kappa: f64,
) -> Result<f64> {
    let mut holds = |step: f64| {
        let u = utility_at(step);
        u.is_finite() && u >= u0 + kappa * step * gap_dir
    };
    let mut step = prev_step.clamp(MIN_STEP, 1.0);
    if holds(step) {
        while step < 1.0 {
            let larger = (step / beta).min(1.0);
            if !holds(larger) {
                break;
            }
            step = larger;
        }
        Ok(step)
    } else {
        loop {
            step *= beta;
            if step < MIN_STEP {
                return Err(Error::NumericalStall { step, gap_dir });
            }
            if holds(step) {
                return Ok(step);
            }
        }
    }
}

/// Armijo step from `current` toward `vertex`; returns the step and the new
/// allocation.
pub fn armijo_step(
    current: &Allocation,
    vertex: &Vertex,
    gap_dir: f64,
    prev_step: f64,
    opts: &SolverOptions,
    rates: &RateMatrix,
    weights: &[f64],
) -> Result<(f64, Allocation)> {
    let r0 = current.user_rates(rates);
    let rv = vertex.user_rates(rates);
    let u0 = utility_or_neg_inf(&r0, weights);
    let mut buf = vec![0.0; r0.len()];
    let step = armijo_search(
        |g| {
            for ((b, &x), &y) in buf.iter_mut().zip(&r0).zip(&rv) {
                *b = x + g * (y - x);
            }
            utility_or_neg_inf(&buf, weights)
        },
        u0,
        gap_dir,
        prev_step,
        opts.beta,
        opts.kappa,
    )?;
    let mut next = current.clone();
    next.blend_toward(vertex.pattern, &vertex.serving(), step);
    Ok((step, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_accepts_full_step() {
        let step = armijo_search(|g| 3.0 + 2.0 * g, 3.0, 2.0, 0.3, 0.8, 0.1).unwrap();
        assert_eq!(step, 1.0);
    }

    #[test]
    fn shrinks_from_warm_start_until_accepted() {
        // φ(γ) = γ − 2γ²: sufficient increase with κ = 0.1 holds iff γ ≤ 0.45.
        let phi = |g: f64| g - 2.0 * g * g;
        let step = armijo_search(phi, 0.0, 1.0, 0.5, 0.8, 0.1).unwrap();
        assert!((step - 0.4).abs() < 1e-15);
    }

    #[test]
    fn grows_from_warm_start_while_accepted() {
        let phi = |g: f64| g - 2.0 * g * g;
        let step = armijo_search(phi, 0.0, 1.0, 1e-4, 0.8, 0.1).unwrap();
        assert!(step <= 0.45 && step / 0.8 > 0.45, "{step}");
    }

    #[test]
    fn accepted_step_satisfies_sufficient_increase() {
        let phi = |g: f64| (1.0 + 5.0 * g).ln() - 3.0 * g * g;
        for prev in [1e-6, 1e-3, 0.1, 0.7, 1.0] {
            let step = armijo_search(phi, 0.0, 5.0, prev, 0.8, 0.1).unwrap();
            assert!(phi(step) >= 0.1 * step * 5.0);
        }
    }

    #[test]
    fn non_ascent_direction_stalls() {
        let r = armijo_search(|g| -g, 0.0, 1.0, 0.5, 0.5, 0.1);
        assert!(matches!(r, Err(Error::NumericalStall { .. })));
    }
}
