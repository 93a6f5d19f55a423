//! Single-cell association: alternating between pattern allocation for a
//! fixed association and per-user association updates, plus the
//! range-expansion baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corrective::run_fully_corrective;
use crate::error::{Error, Result};
use crate::fw::{run_frank_wolfe, Allocation, SolverOptions, SolverResult};
use crate::rates::RateMatrix;
use crate::scenario::{CellKind, Scenario};

/// Past associations remembered for cycle detection.
const CYCLE_WINDOW: usize = 8;

/// Binary K×B user-to-cell association, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Association {
    users: usize,
    cells: usize,
    a: Vec<bool>,
}

impl Association {
    /// Every user may be served by every cell.
    pub fn all_ones(users: usize, cells: usize) -> Self {
        Self { users, cells, a: vec![true; users * cells] }
    }

    /// One-hot rows from each user's cell index.
    pub fn from_cells(serving: &[usize], cells: usize) -> Result<Self> {
        let mut a = vec![false; serving.len() * cells];
        for (k, &b) in serving.iter().enumerate() {
            if b >= cells {
                return Err(Error::Input(format!("user {k} associated with cell {b} of {cells}")));
            }
            a[k * cells + b] = true;
        }
        Ok(Self { users: serving.len(), cells, a })
    }

    pub fn from_matrix(rows: &[Vec<u8>]) -> Result<Self> {
        let cells = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cells || r.iter().any(|&v| v > 1)) {
            return Err(Error::Input("association matrix must be rectangular and binary".into()));
        }
        let a = rows.iter().flatten().map(|&v| v == 1).collect();
        Ok(Self { users: rows.len(), cells, a })
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    pub fn get(&self, user: usize, cell: usize) -> bool {
        self.a[user * self.cells + cell]
    }

    /// Row-major K×B mask.
    pub fn as_mask(&self) -> &[bool] {
        &self.a
    }

    /// The serving cell when the row is one-hot.
    pub fn cell_of(&self, user: usize) -> Option<usize> {
        let row = &self.a[user * self.cells..(user + 1) * self.cells];
        let mut on = row.iter().enumerate().filter(|(_, &x)| x).map(|(b, _)| b);
        match (on.next(), on.next()) {
            (Some(b), None) => Some(b),
            _ => None,
        }
    }

    pub fn is_single(&self) -> bool {
        (0..self.users).all(|k| self.cell_of(k).is_some())
    }

    /// Users per cell.
    pub fn loads(&self) -> Vec<usize> {
        let mut n = vec![0; self.cells];
        for k in 0..self.users {
            for (b, slot) in n.iter_mut().enumerate() {
                if self.get(k, b) {
                    *slot += 1;
                }
            }
        }
        n
    }

    pub fn to_matrix(&self) -> Vec<Vec<u8>> {
        self.a.chunks(self.cells).map(|r| r.iter().map(|&x| x as u8).collect()).collect()
    }
}

impl Serialize for Association {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_matrix().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Association {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(d)?;
        Self::from_matrix(&rows).map_err(serde::de::Error::custom)
    }
}

/// Rates with every non-associated `(user, cell)` entry zeroed.
pub fn effective_rates(rates: &RateMatrix, assoc: &Association) -> Result<RateMatrix> {
    if (assoc.num_users(), assoc.num_cells()) != (rates.num_users(), rates.num_cells()) {
        return Err(Error::Input("association shape does not match the rate tensor".into()));
    }
    let masked = rates.mask_users(|k, b| assoc.get(k, b));
    match masked.zero_rate_users().first() {
        Some(&user) => Err(Error::InfeasibleAssociation { user }),
        None => Ok(masked),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationUpdate {
    pub association: Association,
    /// Users with no rate from any cell, whose previous association was kept.
    pub carried: Vec<usize>,
}

/// Attach every user to the cell delivering most of its rate under `alloc`,
/// ties to the lowest cell index.
///
/// A user without any rate keeps its row in `previous` when that row is
/// one-hot, and otherwise takes the cell with its best single-pattern rate.
pub fn association_update(
    alloc: &Allocation,
    rates: &RateMatrix,
    previous: &Association,
) -> Result<AssociationUpdate> {
    let (users, cells, patterns) = rates.dims();
    if alloc.dims() != rates.dims() || (previous.num_users(), previous.num_cells()) != (users, cells) {
        return Err(Error::Input("allocation, rates and association shapes differ".into()));
    }
    let per_cell = alloc.user_cell_rates(rates);
    let mut serving = Vec::with_capacity(users);
    let mut carried = Vec::new();
    for k in 0..users {
        let row = &per_cell[k * cells..(k + 1) * cells];
        let (b, r) = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |acc, (b, &r)| if r > acc.1 { (b, r) } else { acc });
        if r > 0.0 {
            serving.push(b);
            continue;
        }
        carried.push(k);
        let b = previous.cell_of(k).unwrap_or_else(|| {
            let best = |b: usize| (0..patterns).map(|i| rates.get(k, b, i)).fold(0.0, f64::max);
            (1..cells).fold(0, |acc, b| if best(b) > best(acc) { b } else { acc })
        });
        serving.push(b);
    }
    if !carried.is_empty() {
        log::warn!("{} users without rate kept their association", carried.len());
    }
    Ok(AssociationUpdate { association: Association::from_cells(&serving, cells)?, carried })
}

/// Which relaxed solver runs inside the alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RelaxedAlg {
    /// Frank-Wolfe with Armijo steps.
    Fw,
    /// Fully corrective variant.
    #[default]
    Fc,
}

impl fmt::Display for RelaxedAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fw => "fw",
            Self::Fc => "fc",
        })
    }
}

impl FromStr for RelaxedAlg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fw" => Ok(Self::Fw),
            "fc" => Ok(Self::Fc),
            _ => Err(Error::Input(format!("unknown algorithm `{s}` (expected fw or fc)"))),
        }
    }
}

/// Relaxed solve, optionally restricting which users each cell may serve.
pub fn solve_relaxed(
    alg: RelaxedAlg,
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    init: Option<Allocation>,
    eligible: Option<&[bool]>,
) -> Result<SolverResult> {
    if init.is_none() && eligible.is_none() {
        rates.ensure_no_zero_user()?;
    }
    match alg {
        RelaxedAlg::Fw => run_frank_wolfe(rates, weights, opts, init, eligible),
        RelaxedAlg::Fc => run_fully_corrective(rates, weights, opts, init, eligible),
    }
}

/// How the per-cell resource constraints of a fixed association are posed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintRoute {
    /// Non-associated rates zeroed, constraints over all users.
    Universal,
    /// Original rates, each cell restricted to its associated users.
    Masked,
}

/// Pattern allocation for a fixed association.
pub fn solve_fixed_association(
    rates: &RateMatrix,
    weights: &[f64],
    assoc: &Association,
    opts: &SolverOptions,
    alg: RelaxedAlg,
    route: ConstraintRoute,
    init: Option<Allocation>,
) -> Result<SolverResult> {
    let eff = effective_rates(rates, assoc)?;
    let res = match route {
        ConstraintRoute::Universal => solve_relaxed(alg, &eff, weights, opts, init, None)?,
        ConstraintRoute::Masked => {
            solve_relaxed(alg, rates, weights, opts, init, Some(assoc.as_mask()))?
        }
    };
    check_respects_association(&res.allocation, assoc, opts.active_tol_for(rates.num_patterns()))?;
    Ok(res)
}

fn check_respects_association(alloc: &Allocation, assoc: &Association, tol: f64) -> Result<()> {
    let (users, cells, _) = alloc.dims();
    for block in alloc.blocks() {
        for b in 0..cells {
            for k in 0..users {
                let a = block.alpha[b * users + k];
                if a > tol && !assoc.get(k, b) {
                    return Err(Error::Infeasible(format!(
                        "user {k} holds {a} of cell {b} in pattern {} without being associated",
                        block.pattern
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTraceRow {
    pub iteration: usize,
    /// Utility of the single-cell solve at this iteration.
    pub utility: f64,
    pub gap: f64,
    /// Users whose serving cell changed at this iteration.
    pub changed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointResult {
    pub association: Association,
    pub allocation: Allocation,
    pub utility: f64,
    /// Certificate of the last fixed-association solve.
    pub gap: f64,
    /// Utility of the multi-cell relaxation.
    pub relaxed_bound: f64,
    /// Certificate of the relaxation: its optimum is at most
    /// `relaxed_bound + relaxed_gap`.
    pub relaxed_gap: f64,
    pub bound_gap: f64,
    pub outer_iterations: usize,
    pub certified: bool,
    /// The association revisited an earlier one.
    pub cycled: bool,
    pub carried_users: Vec<usize>,
    pub trace: Vec<JointTraceRow>,
    /// Utility traces of the inner relaxed solves, bound first.
    #[serde(skip)]
    pub inner_traces: Vec<Vec<f64>>,
}

/// Alternate between fixed-association allocation and association updates,
/// starting from the all-ones association (whose allocation problem is the
/// multi-cell relaxation and supplies the bound).
pub fn solve_single_bs(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    alg: RelaxedAlg,
) -> Result<JointResult> {
    let relaxed = solve_relaxed(alg, rates, weights, opts, None, None)?;
    solve_single_bs_from(rates, weights, opts, alg, relaxed)
}

/// [`solve_single_bs`] reusing an already computed relaxed solution.
pub fn solve_single_bs_from(
    rates: &RateMatrix,
    weights: &[f64],
    opts: &SolverOptions,
    alg: RelaxedAlg,
    relaxed: SolverResult,
) -> Result<JointResult> {
    let (users, cells, _) = rates.dims();
    let mut assoc = Association::all_ones(users, cells);
    let mut alloc = relaxed.allocation.clone();
    let mut history: Vec<Association> = Vec::new();
    let mut trace: Vec<JointTraceRow> = Vec::new();
    let mut inner_traces = vec![relaxed.trace.iter().map(|r| r.utility).collect()];
    let mut best: Option<(Association, SolverResult)> = None;
    let mut carried_users = Vec::new();
    let mut cycled = false;
    let tol = opts.epsilon / 10.0;

    for t in 1.. {
        let upd = association_update(&alloc, rates, &assoc)?;
        let changed = (0..users).filter(|&k| upd.association.cell_of(k) != assoc.cell_of(k)).count();
        if t > 1 && changed == 0 {
            break;
        }
        if history.contains(&upd.association) {
            log::warn!("association cycled at iteration {t}; keeping the best iterate");
            cycled = true;
            break;
        }
        carried_users = upd.carried;
        let next = upd.association;
        let warm = alloc.masked(|k, b| next.get(k, b));
        let eff = effective_rates(rates, &next)?;
        let init = (!warm.user_rates(&eff).contains(&0.0)).then(|| {
            let mut w = warm;
            w.renormalize_shares();
            w
        });
        let init = init.filter(|w| w.check_feasible(crate::fw::FEASIBILITY_TOL).is_ok());
        let res = solve_fixed_association(rates, weights, &next, opts, alg, ConstraintRoute::Universal, init)?;
        inner_traces.push(res.trace.iter().map(|r| r.utility).collect());
        let improvement = best.as_ref().map(|(_, b)| res.utility - b.utility);
        trace.push(JointTraceRow { iteration: t, utility: res.utility, gap: res.gap, changed });
        history.push(next.clone());
        if history.len() > CYCLE_WINDOW {
            history.remove(0);
        }
        assoc = next;
        alloc = res.allocation.clone();
        match improvement {
            Some(d) if d <= 0.0 => {
                if d < -tol {
                    log::warn!("alternation lost {:e} utility at iteration {t}", -d);
                }
                break;
            }
            Some(d) => {
                best = Some((assoc.clone(), res));
                if d < tol {
                    break;
                }
            }
            None => best = Some((assoc.clone(), res)),
        }
    }
    let (association, res) = best.expect("at least one association step runs");
    Ok(JointResult {
        utility: res.utility,
        gap: res.gap,
        relaxed_bound: relaxed.utility,
        relaxed_gap: relaxed.gap,
        bound_gap: relaxed.utility - res.utility,
        outer_iterations: trace.len(),
        certified: res.certified && relaxed.certified,
        cycled,
        carried_users,
        trace,
        inner_traces,
        association,
        allocation: res.allocation,
    })
}

/// Range-expansion association: strongest received power with a common
/// bias added to every pico, ties to the lowest cell index.
pub fn re_association(scenario: &Scenario, pico_bias_db: f64) -> Result<Association> {
    if !pico_bias_db.is_finite() {
        return Err(Error::Input("range-expansion bias must be finite".into()));
    }
    let cells = scenario.num_cells();
    let serving: Vec<usize> = (0..scenario.num_users())
        .map(|k| {
            let biased = |b: usize| {
                let bias = if scenario.cells[b].kind == CellKind::Pico { pico_bias_db } else { 0.0 };
                scenario.rx_power_dbm(k, b) + bias
            };
            (1..cells).fold(0, |acc, b| if biased(b) > biased(acc) { b } else { acc })
        })
        .collect();
    Association::from_cells(&serving, cells)
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
    fn all_ones_leaves_rates_unchanged() {
        let rates = random_rates(1, 3, 2, 2);
        assert_eq!(effective_rates(&rates, &Association::all_ones(3, 2)).unwrap(), rates);
    }

    #[test]
    fn effective_rates_by_hand() {
        let rates = RateMatrix::from_fn(2, 2, 2, |k, b, i| (1 + 4 * k + 2 * b + i) as f64).unwrap();
        let assoc = Association::from_cells(&[1, 0], 2).unwrap();
        let eff = effective_rates(&rates, &assoc).unwrap();
        let expected = [[[0.0, 0.0], [3.0, 4.0]], [[5.0, 6.0], [0.0, 0.0]]];
        for k in 0..2 {
            for b in 0..2 {
                for i in 0..2 {
                    assert_eq!(eff.get(k, b, i), expected[k][b][i]);
                }
            }
        }
    }

    #[test]
    fn association_to_silent_cell_is_rejected() {
        let rates = RateMatrix::from_fn(1, 2, 1, |_, b, _| if b == 0 { 1.0 } else { 0.0 }).unwrap();
        let assoc = Association::from_cells(&[1], 2).unwrap();
        assert!(matches!(effective_rates(&rates, &assoc), Err(Error::InfeasibleAssociation { user: 0 })));
    }

    #[test]
    fn update_breaks_ties_toward_lowest_cell() {
        // per-cell rates (3, 5, 5)
        let rates = RateMatrix::from_fn(1, 3, 1, |_, b, _| [3.0, 5.0, 5.0][b]).unwrap();
        let mut alloc = Allocation::for_rates(&rates);
        alloc.add_share(0, 1.0);
        for b in 0..3 {
            alloc.add_alpha(0, b, 0, 1.0);
        }
        let upd = association_update(&alloc, &rates, &Association::all_ones(1, 3)).unwrap();
        assert_eq!(upd.association.cell_of(0), Some(1));
        assert!(upd.carried.is_empty());
    }

    #[test]
    fn update_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rates = random_rates(2, 5, 4, 3);
        let vals: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..0.04)).collect();
        let alloc =
            Allocation::from_dense(5, 4, 3, &[0.2, 0.3, 0.5], |k, b, i| vals[(k * 4 + b) * 3 + i]);
        alloc.check_feasible(1e-12).unwrap();
        let upd = association_update(&alloc, &rates, &Association::all_ones(5, 4)).unwrap();
        for k in 0..5 {
            let r = |b: usize| (0..3).map(|i| alloc.alpha(k, b, i) * rates.get(k, b, i)).sum::<f64>();
            let best = (0..4).max_by(|&x, &y| r(x).partial_cmp(&r(y)).unwrap().then(y.cmp(&x))).unwrap();
            assert_eq!(upd.association.cell_of(k), Some(best));
        }
    }

    #[test]
    fn update_is_idempotent_on_single_cell_support() {
        let rates = random_rates(3, 4, 3, 2);
        let assoc = Association::from_cells(&[2, 0, 1, 0], 3).unwrap();
        let res = solve_fixed_association(
            &rates,
            &[1.0; 4],
            &assoc,
            &SolverOptions::with_epsilon(1e-6),
            RelaxedAlg::Fc,
            ConstraintRoute::Universal,
            None,
        )
        .unwrap();
        let upd = association_update(&res.allocation, &rates, &assoc).unwrap();
        assert_eq!(upd.association, assoc);
    }

    #[test]
    fn user_without_rate_carries_previous_cell() {
        let rates = RateMatrix::from_fn(2, 2, 1, |_, _, _| 1.0).unwrap();
        let mut alloc = Allocation::for_rates(&rates);
        alloc.add_share(0, 1.0);
        alloc.add_alpha(0, 0, 0, 1.0);
        let prev = Association::from_cells(&[0, 1], 2).unwrap();
        let upd = association_update(&alloc, &rates, &prev).unwrap();
        assert_eq!(upd.carried, vec![1]);
        assert_eq!(upd.association.cell_of(1), Some(1));
    }

    #[test]
    fn single_user_takes_best_pattern_of_its_cell() {
        let rates = random_rates(4, 1, 3, 4);
        let res = solve_single_bs(&rates, &[1.0], &SolverOptions::with_epsilon(1e-9), RelaxedAlg::Fc).unwrap();
        let b = res.association.cell_of(0).unwrap();
        let best = (0..4).map(|i| rates.get(0, b, i)).fold(0.0, f64::max);
        assert!((res.utility - best.ln()).abs() < 1e-9);
        // A lone user adds up rates from several cells in the relaxation.
        let combined = (0..4)
            .map(|i| (0..3).map(|b| rates.get(0, b, i)).sum::<f64>())
            .fold(0.0, f64::max);
        assert!((res.relaxed_bound - combined.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_user_with_one_audible_cell_meets_the_bound() {
        let rates = RateMatrix::from_fn(1, 3, 4, |_, b, i| if b == 1 { (i + 1) as f64 } else { 0.0 }).unwrap();
        let res = solve_single_bs(&rates, &[1.0], &SolverOptions::with_epsilon(1e-9), RelaxedAlg::Fw).unwrap();
        assert_eq!(res.association.cell_of(0), Some(1));
        assert!((res.utility - 4f64.ln()).abs() < 1e-9);
        assert!(res.bound_gap.abs() < 1e-9);
    }

    #[test]
    fn joint_solve_is_single_and_dominated_by_bound() {
        for (seed, alg) in [(5, RelaxedAlg::Fc), (6, RelaxedAlg::Fw), (7, RelaxedAlg::Fc)] {
            let rates = random_rates(seed, 6, 3, 5);
            let opts = SolverOptions::with_epsilon(1e-3);
            let res = solve_single_bs(&rates, &[1.0; 6], &opts, alg).unwrap();
            assert!(res.association.is_single());
            assert!(res.utility <= res.relaxed_bound + res.relaxed_gap + 1e-9);
            assert!(res.bound_gap >= -opts.epsilon);
            for w in res.trace.windows(2) {
                assert!(w[1].utility >= w[0].utility);
            }
        }
    }

    #[test]
    fn masked_and_universal_routes_agree() {
        let rates = random_rates(8, 5, 3, 4);
        let assoc = Association::from_cells(&[0, 1, 2, 1, 0], 3).unwrap();
        let opts = SolverOptions::with_epsilon(1e-4);
        let solve = |route| {
            solve_fixed_association(&rates, &[1.0; 5], &assoc, &opts, RelaxedAlg::Fw, route, None).unwrap()
        };
        let (u, m) = (solve(ConstraintRoute::Universal), solve(ConstraintRoute::Masked));
        assert!((u.utility - m.utility).abs() <= 2.0 * opts.epsilon);
    }

    #[test]
    fn association_json_roundtrip() {
        let a = Association::from_cells(&[1, 0, 2], 3).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[[0,1,0],[1,0,0],[0,0,1]]");
        assert_eq!(serde_json::from_str::<Association>(&s).unwrap(), a);
        assert!(serde_json::from_str::<Association>("[[0,2]]").is_err());
    }

    #[test]
    fn relaxed_alg_parses() {
        assert_eq!("FW".parse::<RelaxedAlg>().unwrap(), RelaxedAlg::Fw);
        assert!("ipm".parse::<RelaxedAlg>().is_err());
    }
}
