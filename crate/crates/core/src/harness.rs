//! Strategy comparison over random drops: per-user throughput metrics,
//! per-drop and averaged reports, CSV/JSON/SVG output.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{
    re_association, solve_fixed_association, solve_single_bs, ConstraintRoute, RelaxedAlg,
};
use crate::error::{Error, Result};
use crate::fw::SolverOptions;
use crate::patterns::{strategy_patterns, Strategy, Topology};
use crate::rates::{cached_rate_matrix, compute_rate_matrix, FadingOptions, RateMatrix};
use crate::scenario::{generate_scenario, ScenarioConfig};

/// A strategy: candidate patterns plus how users are associated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StrategySpec {
    /// Joint association and pattern allocation by alternation.
    Joint { patterns: Strategy },
    /// Association fixed by biased received power, patterns optimized.
    RangeExpansion { patterns: Strategy, pico_bias_db: f64 },
}

impl StrategySpec {
    pub fn joint(patterns: Strategy) -> Self {
        Self::Joint { patterns }
    }

    pub fn range_expansion(patterns: Strategy, pico_bias_db: f64) -> Self {
        Self::RangeExpansion { patterns, pico_bias_db }
    }

    pub fn patterns(&self) -> Strategy {
        match *self {
            Self::Joint { patterns } | Self::RangeExpansion { patterns, .. } => patterns,
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Joint { patterns } => write!(f, "{patterns}"),
            Self::RangeExpansion { patterns, pico_bias_db } => {
                write!(f, "RE{pico_bias_db}dB-{patterns}")
            }
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    /// `feature` for joint association, `feature@10` for a 10 dB pico bias.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('@') {
            None => Ok(Self::joint(s.trim().parse()?)),
            Some((p, bias)) => {
                let bias: f64 = bias
                    .trim()
                    .trim_end_matches("dB")
                    .trim_end_matches("db")
                    .parse()
                    .map_err(|_| Error::Input(format!("bad bias in {s:?}")))?;
                Ok(Self::range_expansion(p.trim().parse()?, bias))
            }
        }
    }
}

/// Parse a comma-separated strategy list.
pub fn parse_strategies(list: &str) -> Result<Vec<StrategySpec>> {
    let specs: Vec<StrategySpec> =
        list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(Error::Input("no strategies given".into()));
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-user throughput in bit/s.
    pub rates: Vec<f64>,
    pub geometric_mean: f64,
    pub arithmetic_mean: f64,
    pub sum_rate: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    /// Rates sorted ascending; sample `j` sits at CDF level `(j + 1) / K`.
    pub cdf_samples: Vec<f64>,
    /// `Σ_k ln R_k`.
    pub utility: f64,
}

/// Percentile by linear interpolation between order statistics at
/// positions `q (n − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn metrics(rates: &[f64]) -> Result<MetricsReport> {
    if rates.is_empty() {
        return Err(Error::Input("no user rates".into()));
    }
    if let Some(k) = rates.iter().position(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::Input(format!("user {k} has non-positive rate {}", rates[k])));
    }
    let n = rates.len() as f64;
    let utility: f64 = rates.iter().map(|r| r.ln()).sum();
    let sum_rate: f64 = rates.iter().sum();
    let mut sorted = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(MetricsReport {
        rates: rates.to_vec(),
        geometric_mean: (utility / n).exp(),
        arithmetic_mean: sum_rate / n,
        sum_rate,
        p5: percentile(&sorted, 0.05),
        p50: percentile(&sorted, 0.50),
        p95: percentile(&sorted, 0.95),
        cdf_samples: sorted,
        utility,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub scenario: ScenarioConfig,
    pub strategies: Vec<StrategySpec>,
    pub drops: usize,
    /// Drop `d` uses seed `seed + d`.
    pub seed: u64,
    pub solver: SolverOptions,
    pub alg: RelaxedAlg,
    pub fading: FadingOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates_cache: Option<PathBuf>,
}

impl ComparisonConfig {
    pub fn new(scenario: ScenarioConfig, strategies: Vec<StrategySpec>, drops: usize, seed: u64) -> Self {
        Self {
            scenario,
            strategies,
            drops,
            seed,
            solver: SolverOptions::default(),
            alg: RelaxedAlg::Fc,
            fading: FadingOptions::default(),
            rates_cache: None,
        }
    }
}

/// Result of one strategy on one drop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropOutcome {
    pub drop: usize,
    pub seed: u64,
    pub strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    /// Weighted utility reached by the solver.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    /// Multi-cell relaxation value (joint strategies only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxed_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxed_gap: Option<f64>,
    pub certified: bool,
    pub active_patterns: usize,
    pub runtime_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-strategy means over the successful drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub drops_ok: usize,
    pub drops_failed: usize,
    pub geometric_mean: f64,
    pub sum_rate: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub utility: f64,
    /// All users of all successful drops, ascending.
    #[serde(skip)]
    pub pooled_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: ComparisonConfig,
    pub outcomes: Vec<DropOutcome>,
    pub summary: Vec<StrategySummary>,
}

impl Report {
    pub fn summary_of(&self, strategy: &str) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }

    pub fn all_certified(&self) -> bool {
        self.outcomes.iter().all(|o| o.certified && o.error.is_none())
    }

    /// Relative spread `(best − worst) / best` of the averaged geometric means.
    pub fn geometric_mean_spread(&self) -> Option<f64> {
        let gm: Vec<f64> =
            self.summary.iter().filter(|s| s.drops_ok > 0).map(|s| s.geometric_mean).collect();
        let best = gm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst = gm.iter().copied().fold(f64::INFINITY, f64::min);
        (gm.len() >= 2).then(|| (best - worst) / best)
    }

    /// Drops where a joint strategy's certified relaxation bound exceeds the
    /// all-pattern one by more than `2ε`; a superset of candidates can never
    /// do worse, so any hit points at a solver problem.
    pub fn dominance_violations(&self) -> Vec<(usize, String)> {
        let eps = self.config.solver.epsilon;
        let all = StrategySpec::joint(Strategy::AllPattern).name();
        let mut out = Vec::new();
        for o in &self.outcomes {
            if o.strategy == all {
                continue;
            }
            let reference = self
                .outcomes
                .iter()
                .find(|r| r.drop == o.drop && r.strategy == all)
                .and_then(|r| Some(r.relaxed_bound? + r.relaxed_gap?));
            if let (Some(reference), Some(bound)) = (reference, o.relaxed_bound) {
                if bound > reference + 2.0 * eps {
                    out.push((o.drop, o.strategy.clone()));
                }
            }
        }
        out
    }
}

struct Solved {
    user_rates: Vec<f64>,
    utility: f64,
    relaxed: Option<(f64, f64)>,
    certified: bool,
    active: usize,
}

fn solve_strategy(
    spec: &StrategySpec,
    rates: &RateMatrix,
    scenario: &crate::scenario::Scenario,
    cfg: &ComparisonConfig,
) -> Result<Solved> {
    let weights = scenario.weights();
    let tol = cfg.solver.active_tol_for(rates.num_patterns());
    match *spec {
        StrategySpec::Joint { .. } => {
            let res = solve_single_bs(rates, &weights, &cfg.solver, cfg.alg)?;
            Ok(Solved {
                user_rates: res.allocation.user_rates(rates),
                utility: res.utility,
                relaxed: Some((res.relaxed_bound, res.relaxed_gap)),
                certified: res.certified,
                active: res.allocation.active_patterns(tol).len(),
            })
        }
        StrategySpec::RangeExpansion { pico_bias_db, .. } => {
            let assoc = re_association(scenario, pico_bias_db)?;
            let res = solve_fixed_association(
                rates,
                &weights,
                &assoc,
                &cfg.solver,
                cfg.alg,
                ConstraintRoute::Universal,
                None,
            )?;
            Ok(Solved {
                user_rates: res.allocation.user_rates(rates),
                utility: res.utility,
                relaxed: None,
                certified: res.certified,
                active: res.active_patterns.len(),
            })
        }
    }
}

fn build_rates(
    strategy: Strategy,
    topology: &Topology,
    scenario: &crate::scenario::Scenario,
    cfg: &ComparisonConfig,
) -> Result<RateMatrix> {
    let set = strategy_patterns(strategy, topology)?;
    match &cfg.rates_cache {
        Some(dir) => cached_rate_matrix(dir, scenario, &set, &cfg.fading),
        None => compute_rate_matrix(scenario, &set, &cfg.fading),
    }
}

fn run_drop(cfg: &ComparisonConfig, drop: usize) -> Vec<DropOutcome> {
    let seed = cfg.seed.wrapping_add(drop as u64);
    let failed = |strategy: String, e: String| DropOutcome {
        drop,
        seed,
        strategy,
        metrics: None,
        utility: None,
        relaxed_bound: None,
        relaxed_gap: None,
        certified: false,
        active_patterns: 0,
        runtime_s: 0.0,
        error: Some(e),
    };
    let setup = generate_scenario(&cfg.scenario, seed)
        .and_then(|sc| Topology::from_scenario(&sc).map(|t| (sc, t)));
    let (scenario, topology) = match setup {
        Ok(x) => x,
        Err(e) => {
            return cfg.strategies.iter().map(|s| failed(s.name(), e.to_string())).collect();
        }
    };
    // Rate tensors are shared by all specs using the same candidate set.
    let mut tensors: HashMap<Strategy, std::result::Result<RateMatrix, String>> = HashMap::new();
    let mut out = Vec::with_capacity(cfg.strategies.len());
    for spec in &cfg.strategies {
        let start = Instant::now();
        let tensor = tensors.entry(spec.patterns()).or_insert_with(|| {
            build_rates(spec.patterns(), &topology, &scenario, cfg).map_err(|e| e.to_string())
        });
        let rates = match tensor {
            Ok(r) => r,
            Err(e) => {
                out.push(failed(spec.name(), e.clone()));
                continue;
            }
        };
        let solved = solve_strategy(spec, rates, &scenario, cfg)
            .and_then(|s| metrics(&s.user_rates).map(|m| (s, m)));
        let runtime_s = start.elapsed().as_secs_f64();
        match solved {
            Ok((s, m)) => out.push(DropOutcome {
                drop,
                seed,
                strategy: spec.name(),
                metrics: Some(m),
                utility: Some(s.utility),
                relaxed_bound: s.relaxed.map(|r| r.0),
                relaxed_gap: s.relaxed.map(|r| r.1),
                certified: s.certified,
                active_patterns: s.active,
                runtime_s,
                error: None,
            }),
            Err(e) => {
                log::warn!("drop {drop}, {}: {e}", spec.name());
                out.push(DropOutcome { runtime_s, ..failed(spec.name(), e.to_string()) });
            }
        }
        log::info!("drop {drop} {} done in {runtime_s:.2}s", spec.name());
        // The all-pattern tensor is large; drop it once no later spec needs it.
        let needed_later = cfg.strategies[out.len()..].iter().any(|s| s.patterns() == spec.patterns());
        if !needed_later {
            tensors.remove(&spec.patterns());
        }
    }
    out
}

fn summarize(strategies: &[StrategySpec], outcomes: &[DropOutcome]) -> Vec<StrategySummary> {
    strategies
        .iter()
        .map(|spec| {
            let name = spec.name();
            let ok: Vec<&MetricsReport> =
                outcomes.iter().filter(|o| o.strategy == name).filter_map(|o| o.metrics.as_ref()).collect();
            let failed = outcomes.iter().filter(|o| o.strategy == name && o.metrics.is_none()).count();
            let mean = |f: fn(&MetricsReport) -> f64| {
                if ok.is_empty() { f64::NAN } else { ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64 }
            };
            let mut pooled: Vec<f64> = ok.iter().flat_map(|m| m.rates.iter().copied()).collect();
            pooled.sort_by(f64::total_cmp);
            StrategySummary {
                strategy: name,
                drops_ok: ok.len(),
                drops_failed: failed,
                geometric_mean: mean(|m| m.geometric_mean),
                sum_rate: mean(|m| m.sum_rate),
                p5: mean(|m| m.p5),
                p50: mean(|m| m.p50),
                p95: mean(|m| m.p95),
                utility: mean(|m| m.utility),
                pooled_rates: pooled,
            }
        })
        .collect()
}

/// Run every strategy on `cfg.drops` drops. Drops run in parallel; the
/// report lists outcomes by drop, then strategy order.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<Report> {
    if cfg.strategies.is_empty() {
        return Err(Error::Input("no strategies to compare".into()));
    }
    if cfg.drops == 0 {
        return Err(Error::Input("need at least one drop".into()));
    }
    cfg.scenario.validate()?;
    cfg.solver.validate()?;
    cfg.fading.validate()?;
    let outcomes: Vec<DropOutcome> =
        (0..cfg.drops).into_par_iter().map(|d| run_drop(cfg, d)).collect::<Vec<_>>().concat();
    let summary = summarize(&cfg.strategies, &outcomes);
    let report = Report { config: cfg.clone(), outcomes, summary };
    for (drop, s) in report.dominance_violations() {
        log::warn!("drop {drop}: {s} bound exceeds the all-pattern bound");
    }
    Ok(report)
}

/// Warn unless the strategy spread at the higher load is at most the spread
/// at the lower load. Returns whether the trend held.
pub fn check_gap_narrowing(lower_load: &Report, higher_load: &Report) -> bool {
    match (lower_load.geometric_mean_spread(), higher_load.geometric_mean_spread()) {
        (Some(lo), Some(hi)) if hi > lo => {
            log::warn!(
                "strategy spread grew with load ({:.1}% at K={} vs {:.1}% at K={})",
                100.0 * hi,
                higher_load.config.scenario.num_users,
                100.0 * lo,
                lower_load.config.scenario.num_users
            );
            false
        }
        _ => true,
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Write `report.json`, `metrics.csv`, one `cdf_<strategy>.csv` per
/// strategy and, when asked, `cdf.svg`.
pub fn write_outputs(report: &Report, dir: &Path, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record([
        "drop", "seed", "strategy", "geometric_mean_bps", "sum_rate_bps", "p5_bps", "p50_bps",
        "p95_bps", "utility", "relaxed_bound", "certified", "active_patterns", "runtime_s", "error",
    ])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
    for o in &report.outcomes {
        let m = o.metrics.as_ref();
        w.write_record([
            o.drop.to_string(),
            o.seed.to_string(),
            o.strategy.clone(),
            opt(m.map(|m| m.geometric_mean)),
            opt(m.map(|m| m.sum_rate)),
            opt(m.map(|m| m.p5)),
            opt(m.map(|m| m.p50)),
            opt(m.map(|m| m.p95)),
            opt(o.utility),
            opt(o.relaxed_bound),
            o.certified.to_string(),
            o.active_patterns.to_string(),
            format!("{:.3}", o.runtime_s),
            o.error.clone().unwrap_or_default(),
        ])?;
    }
    for s in &report.summary {
        w.write_record([
            "mean".to_string(),
            String::new(),
            s.strategy.clone(),
            format!("{}", s.geometric_mean),
            format!("{}", s.sum_rate),
            format!("{}", s.p5),
            format!("{}", s.p50),
            format!("{}", s.p95),
            format!("{}", s.utility),
            String::new(),
            (s.drops_failed == 0).to_string(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()?;

    for s in &report.summary {
        let mut w = csv::Writer::from_path(dir.join(format!("cdf_{}.csv", file_stem(&s.strategy))))?;
        w.write_record(["rate_bps", "cdf"])?;
        let n = s.pooled_rates.len() as f64;
        for (j, r) in s.pooled_rates.iter().enumerate() {
            w.write_record([format!("{r}"), format!("{}", (j + 1) as f64 / n)])?;
        }
        w.flush()?;
    }
    if svg {
        std::fs::write(dir.join("cdf.svg"), cdf_svg(&report.summary))?;
    }
    Ok(())
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Self-contained SVG of the pooled throughput CDFs, log-scaled rate axis
/// in Mbit/s.
pub fn cdf_svg(summary: &[StrategySummary]) -> String {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let all: Vec<f64> = summary.iter().flat_map(|s| s.pooled_rates.iter().copied()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).max(1.0).log10();
    let hi = all.iter().copied().fold(0.0, f64::max).max(10.0).log10();
    let (lo, hi) = (lo.floor(), hi.ceil().max(lo.floor() + 1.0));
    let x = |r: f64| margin + (r.max(1.0).log10() - lo) / (hi - lo) * (w - 2.0 * margin);
    let y = |c: f64| h - margin - c * (h - 2.0 * margin);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{margin}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{margin}\" y1=\"{y0}\" x2=\"{margin}\" y2=\"{margin}\" stroke=\"black\"/>\n",
        y0 = h - margin,
        x1 = w - margin
    );
    for e in lo as i32..=hi as i32 {
        let px = x(10f64.powi(e));
        out += &format!(
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            h - margin + 18.0,
            format_mbps(10f64.powi(e))
        );
    }
    for t in 0..=4 {
        let c = t as f64 / 4.0;
        out += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{c}</text>\n",
            margin - 6.0,
            y(c) + 4.0
        );
    }
    out += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">user throughput (Mbit/s)</text>\n",
        w / 2.0,
        h - 15.0
    );
    for (j, s) in summary.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let n = s.pooled_rates.len() as f64;
        let points: Vec<String> = s
            .pooled_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| format!("{:.1},{:.1}", x(r), y((i + 1) as f64 / n)))
            .collect();
        out += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        );
        out += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            margin + 10.0,
            margin + 16.0 * j as f64,
            s.strategy
        );
    }
    out + "</svg>\n"
}

fn format_mbps(bps: f64) -> String {
    let m = bps / 1e6;
    if m >= 1.0 { format!("{m:.0}") } else { format!("{m}") }
}
