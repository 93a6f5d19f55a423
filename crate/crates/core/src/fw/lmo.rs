//! Closed-form linear maximization over the feasible set.
//!
//! For a fixed pattern every cell hands its whole share to the user with
//! the largest gradient entry; the best pattern then takes all resources.

use rayon::prelude::*;

use crate::fw::{Allocation, GradientField};
use crate::rates::RateMatrix;

/// Below this many candidate patterns the pattern scan runs sequentially.
const PAR_THRESHOLD: usize = 256;

/// A vertex of the feasible set: all resources on `pattern`, cell `b`
/// serving `users[b]`. `gains[b]` is the gradient entry collected there.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub pattern: usize,
    pub users: Vec<usize>,
    pub gains: Vec<f64>,
}

impl Vertex {
    /// `⟨ᾱ, ∇U⟩`
    pub fn value(&self) -> f64 {
        self.gains.iter().sum()
    }

    /// Cells whose entry is positive keep their user; the others serve
    /// nobody. Both choices attain the same linear objective, but only the
    /// former places resources where they raise the utility.
    pub fn serving(&self) -> Vec<Option<usize>> {
        self.users
            .iter()
            .zip(&self.gains)
            .map(|(&k, &g)| (g > 0.0).then_some(k))
            .collect()
    }

    /// Rates every user receives at this vertex (serving cells only).
    pub fn user_rates(&self, rates: &RateMatrix) -> Vec<f64> {
        let mut r = vec![0.0; rates.num_users()];
        for (b, k) in self.serving().into_iter().enumerate() {
            if let Some(k) = k {
                r[k] += rates.get(k, b, self.pattern);
            }
        }
        r
    }

    /// The full one-hot vertex: `π̄_ī = 1` and `ᾱ_{k̄(b,ī) b ī} = 1` for every cell.
    pub fn to_allocation(&self, users: usize, patterns: usize) -> Allocation {
        let mut a = Allocation::empty(users, self.users.len(), patterns);
        let all: Vec<Option<usize>> = self.users.iter().map(|&k| Some(k)).collect();
        a.add_vertex(self.pattern, &all, 1.0);
        a
    }
}

fn pattern_value<G: GradientField>(g: &G, pattern: usize, eligible: Option<&[bool]>) -> f64 {
    let (_, cells, _) = g.dims();
    (0..cells).map(|b| g.best_user(b, pattern, eligible).1).sum()
}

fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
        a
    } else {
        b
    }
}

fn vertex_at<G: GradientField>(g: &G, pattern: usize, eligible: Option<&[bool]>) -> Vertex {
    let (_, cells, _) = g.dims();
    let (users, gains) = (0..cells).map(|b| g.best_user(b, pattern, eligible)).unzip();
    Vertex { pattern, users, gains }
}

/// Maximize `⟨α, ∇U⟩` over the feasible set; ties go to the lowest pattern
/// and user indices.
pub fn lmo<G: GradientField>(g: &G) -> Vertex {
    lmo_masked(g, None)
}

/// [`lmo`] with users restricted per cell by a row-major K×B mask.
pub fn lmo_masked<G: GradientField>(g: &G, eligible: Option<&[bool]>) -> Vertex {
    let (_, _, patterns) = g.dims();
    let start = (f64::NEG_INFINITY, usize::MAX);
    let (_, best) = if patterns < PAR_THRESHOLD {
        (0..patterns).map(|i| (pattern_value(g, i, eligible), i)).fold(start, better)
    } else {
        (0..patterns)
            .into_par_iter()
            .map(|i| (pattern_value(g, i, eligible), i))
            .reduce(|| start, better)
    };
    vertex_at(g, best, eligible)
}

/// [`lmo`] restricted to the listed patterns.
pub fn lmo_over<G: GradientField>(g: &G, patterns: &[usize], eligible: Option<&[bool]>) -> Vertex {
    assert!(!patterns.is_empty(), "restricted LMO needs at least one pattern");
    let start = (f64::NEG_INFINITY, usize::MAX);
    let (_, best) = patterns
        .iter()
        .map(|&i| (pattern_value(g, i, eligible), i))
        .fold(start, better);
    vertex_at(g, best, eligible)
}
