//! Network topology and large-scale link gains.
//!
//! Macro sites sit on a regular polygon (an equilateral triangle for the
//! default three-site layout). Picos are dropped uniformly inside the disc
//! of their parent macro, users uniformly inside the union of macro discs.
//! Every placement is rejection-resampled until the minimum-distance rules
//! hold. Gains are purely large-scale: pathloss, penetration loss, antenna
//! gain and log-normal shadowing.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Macro,
    Pico,
}

/// Deterministic pathloss in dB at `distance_m` meters.
///
/// Macro: `128.1 + 37.6 log10(R)`, pico: `140.7 + 36.7 log10(R)`, R in km.
pub fn pathloss_db(kind: CellKind, distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::Input(format!(
            "pathloss distance must be positive, got {distance_m}"
        )));
    }
    let km = distance_m / 1000.0;
    Ok(match kind {
        CellKind::Macro => 128.1 + 37.6 * km.log10(),
        CellKind::Pico => 140.7 + 36.7 * km.log10(),
    })
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn dbm_to_watt(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

fn watt_to_dbm(w: f64) -> f64 {
    linear_to_db(w * 1e3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub num_macros: usize,
    pub picos_per_macro: usize,
    pub num_users: usize,
    pub macro_power_dbm: f64,
    pub pico_power_dbm: f64,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub antenna_gain_macro_db: f64,
    pub antenna_gain_pico_db: f64,
    pub penetration_loss_db: f64,
    pub shadow_std_macro_db: f64,
    pub shadow_std_pico_db: f64,
    pub shadow_corr_macro: f64,
    pub shadow_corr_pico: f64,
    pub min_dist_macro_ue_m: f64,
    pub min_dist_pico_ue_m: f64,
    pub min_dist_macro_pico_m: f64,
    pub min_dist_pico_pico_m: f64,
    /// Distance between adjacent macro sites.
    pub inter_site_distance_m: f64,
    /// Radius of the disc around each macro in which its picos and the
    /// users are dropped.
    pub drop_radius_m: f64,
    /// Explicit macro positions; overrides the regular-polygon layout.
    pub macro_positions: Option<Vec<[f64; 2]>>,
    /// Per-user utility weights; all ones when absent.
    pub user_weights: Option<Vec<f64>>,
    /// Rejection-sampling budget per placed entity.
    pub max_placement_attempts: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let isd = 500.0;
        Self {
            num_macros: 3,
            picos_per_macro: 4,
            num_users: 50,
            macro_power_dbm: 46.0,
            pico_power_dbm: 30.0,
            bandwidth_hz: 10e6,
            noise_psd_dbm_hz: -174.0,
            noise_figure_db: 9.0,
            antenna_gain_macro_db: 15.0,
            antenna_gain_pico_db: 5.0,
            penetration_loss_db: 20.0,
            shadow_std_macro_db: 8.0,
            shadow_std_pico_db: 10.0,
            shadow_corr_macro: 1.0,
            shadow_corr_pico: 0.5,
            min_dist_macro_ue_m: 35.0,
            min_dist_pico_ue_m: 10.0,
            min_dist_macro_pico_m: 75.0,
            min_dist_pico_pico_m: 40.0,
            inter_site_distance_m: isd,
            drop_radius_m: isd / 3f64.sqrt(),
            macro_positions: None,
            user_weights: None,
            max_placement_attempts: 100_000,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Input(msg.to_string()));
        if self.num_macros == 0 || self.num_users == 0 {
            return bad("num_macros and num_users must be at least 1");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth must be positive");
        }
        for (name, d) in [
            ("min_dist_macro_ue_m", self.min_dist_macro_ue_m),
            ("min_dist_pico_ue_m", self.min_dist_pico_ue_m),
            ("min_dist_macro_pico_m", self.min_dist_macro_pico_m),
            ("min_dist_pico_pico_m", self.min_dist_pico_pico_m),
            ("drop_radius_m", self.drop_radius_m),
        ] {
            if !(d > 0.0) {
                return Err(Error::Input(format!("{name} must be positive")));
            }
        }
        if self.macro_positions.is_none() && self.num_macros > 1 && !(self.inter_site_distance_m > 0.0)
        {
            return bad("inter_site_distance_m must be positive");
        }
        for c in [self.shadow_corr_macro, self.shadow_corr_pico] {
            if !(0.0..=1.0).contains(&c) {
                return bad("shadowing correlations must lie in [0, 1]");
            }
        }
        if self.shadow_std_macro_db < 0.0 || self.shadow_std_pico_db < 0.0 {
            return bad("shadowing std must be nonnegative");
        }
        if let Some(p) = &self.macro_positions {
            if p.len() != self.num_macros {
                return bad("macro_positions length must equal num_macros");
            }
        }
        if let Some(w) = &self.user_weights {
            if w.len() != self.num_users || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return bad("user_weights must hold num_users positive finite values");
            }
        }
        if self.max_placement_attempts == 0 {
            return bad("max_placement_attempts must be positive");
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.num_macros * (1 + self.picos_per_macro)
    }

    pub fn macro_sites(&self) -> Vec<[f64; 2]> {
        if let Some(p) = &self.macro_positions {
            return p.clone();
        }
        let n = self.num_macros;
        if n == 1 {
            return vec![[0.0, 0.0]];
        }
        let radius = self.inter_site_distance_m / (2.0 * (PI / n as f64).sin());
        (0..n)
            .map(|m| {
                let theta = PI / 2.0 + 2.0 * PI * m as f64 / n as f64;
                [radius * theta.cos(), radius * theta.sin()]
            })
            .collect()
    }

    pub fn noise_psd_w_per_hz(&self) -> f64 {
        dbm_to_watt(self.noise_psd_dbm_hz + self.noise_figure_db)
    }

    pub fn shadow_std_db(&self, kind: CellKind) -> f64 {
        match kind {
            CellKind::Macro => self.shadow_std_macro_db,
            CellKind::Pico => self.shadow_std_pico_db,
        }
    }

    pub fn antenna_gain_db(&self, kind: CellKind) -> f64 {
        match kind {
            CellKind::Macro => self.antenna_gain_macro_db,
            CellKind::Pico => self.antenna_gain_pico_db,
        }
    }

    /// Link gain in dB before shadowing.
    pub fn deterministic_gain_db(&self, kind: CellKind, distance_m: f64) -> Result<f64> {
        Ok(-pathloss_db(kind, distance_m)? - self.penetration_loss_db + self.antenna_gain_db(kind))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub kind: CellKind,
    pub position: [f64; 2],
    /// Transmit power spectral density in W/Hz (flat over the band).
    pub tx_psd: f64,
    /// Parent macro index for picos.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub position: [f64; 2],
    pub weight: f64,
}

/// A single network drop: cells (macros first, then picos grouped by
/// parent macro), users and the K×B linear gain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub cells: Vec<Cell>,
    pub users: Vec<User>,
    gains: Vec<f64>,
    pub noise_psd: f64,
    pub bandwidth_hz: f64,
    pub seed: u64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_in_disc<R: Rng>(rng: &mut R, center: [f64; 2], radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
}

/// Generate one drop. Identical `(config, seed)` yields an identical scenario.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = config.macro_sites();
    let radius = config.drop_radius_m;

    let mut cells: Vec<Cell> = sites
        .iter()
        .map(|&p| Cell {
            kind: CellKind::Macro,
            position: p,
            tx_psd: dbm_to_watt(config.macro_power_dbm) / config.bandwidth_hz,
            parent: None,
        })
        .collect();

    for (m, &site) in sites.iter().enumerate() {
        for _ in 0..config.picos_per_macro {
            let mut placed = None;
            for _ in 0..config.max_placement_attempts {
                let p = sample_in_disc(&mut rng, site, radius);
                let ok = cells.iter().all(|c| match c.kind {
                    CellKind::Macro => dist(c.position, p) >= config.min_dist_macro_pico_m,
                    CellKind::Pico => dist(c.position, p) >= config.min_dist_pico_pico_m,
                });
                if ok {
                    placed = Some(p);
                    break;
                }
            }
            let p = placed.ok_or_else(|| {
                Error::Generation(format!(
                    "could not place a pico around macro {m} within {} attempts",
                    config.max_placement_attempts
                ))
            })?;
            cells.push(Cell {
                kind: CellKind::Pico,
                position: p,
                tx_psd: dbm_to_watt(config.pico_power_dbm) / config.bandwidth_hz,
                parent: Some(m),
            });
        }
    }

    let (xmin, xmax, ymin, ymax) = sites.iter().fold(
        (f64::MAX, f64::MIN, f64::MAX, f64::MIN),
        |(a, b, c, d), p| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
    );
    let mut users = Vec::with_capacity(config.num_users);
    for k in 0..config.num_users {
        let mut placed = None;
        for _ in 0..config.max_placement_attempts {
            let p = [
                rng.random_range(xmin - radius..=xmax + radius),
                rng.random_range(ymin - radius..=ymax + radius),
            ];
            if !sites.iter().any(|&s| dist(s, p) <= radius) {
                continue;
            }
            let ok = cells.iter().all(|c| match c.kind {
                CellKind::Macro => dist(c.position, p) >= config.min_dist_macro_ue_m,
                CellKind::Pico => dist(c.position, p) >= config.min_dist_pico_ue_m,
            });
            if ok {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place user {k} within {} attempts",
                config.max_placement_attempts
            ))
        })?;
        let weight = config.user_weights.as_ref().map_or(1.0, |w| w[k]);
        users.push(User { position: p, weight });
    }

    // Two-component shadowing: a per-user component common to every cell of
    // a tier plus an independent per-link component.
    let b_total = cells.len();
    let mut gains = Vec::with_capacity(users.len() * b_total);
    for user in &users {
        let common_macro: f64 = StandardNormal.sample(&mut rng);
        let common_pico: f64 = StandardNormal.sample(&mut rng);
        for cell in &cells {
            let own: f64 = StandardNormal.sample(&mut rng);
            let (common, corr) = match cell.kind {
                CellKind::Macro => (common_macro, config.shadow_corr_macro),
                CellKind::Pico => (common_pico, config.shadow_corr_pico),
            };
            let shadow = config.shadow_std_db(cell.kind)
                * (corr.sqrt() * common + (1.0 - corr).sqrt() * own);
            let g_db = config.deterministic_gain_db(cell.kind, dist(user.position, cell.position))?
                + shadow;
            gains.push(db_to_linear(g_db));
        }
    }

    Scenario::new(
        cells,
        users,
        gains,
        config.noise_psd_w_per_hz(),
        config.bandwidth_hz,
        seed,
    )
}

impl Scenario {
    pub fn new(
        cells: Vec<Cell>,
        users: Vec<User>,
        gains: Vec<f64>,
        noise_psd: f64,
        bandwidth_hz: f64,
        seed: u64,
    ) -> Result<Self> {
        if cells.is_empty() || users.is_empty() {
            return Err(Error::Input("scenario needs at least one cell and one user".into()));
        }
        if gains.len() != cells.len() * users.len() {
            return Err(Error::Input(format!(
                "gain matrix has {} entries, expected {}",
                gains.len(),
                cells.len() * users.len()
            )));
        }
        if gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::Input("gains must be strictly positive and finite".into()));
        }
        if !(noise_psd > 0.0) || !(bandwidth_hz > 0.0) {
            return Err(Error::Input("noise PSD and bandwidth must be positive".into()));
        }
        if users.iter().any(|u| !(u.weight > 0.0)) {
            return Err(Error::Input("user weights must be positive".into()));
        }
        Ok(Self { cells, users, gains, noise_psd, bandwidth_hz, seed })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Linear gain G_kb.
    pub fn gain(&self, user: usize, cell: usize) -> f64 {
        self.gains[user * self.cells.len() + cell]
    }

    /// Received power spectral density P_b G_kb in W/Hz.
    pub fn rx_psd(&self, user: usize, cell: usize) -> f64 {
        self.cells[cell].tx_psd * self.gain(user, cell)
    }

    /// Total downlink received power P_b W G_kb in dBm.
    pub fn rx_power_dbm(&self, user: usize, cell: usize) -> f64 {
        watt_to_dbm(self.rx_psd(user, cell) * self.bandwidth_hz)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.weight).collect()
    }

    pub fn macro_indices(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&b| self.cells[b].kind == CellKind::Macro)
            .collect()
    }

    pub fn distance(&self, user: usize, cell: usize) -> f64 {
        dist(self.users[user].position, self.cells[cell].position)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScenarioFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(s)?;
        file.into_scenario()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk scenario layout. Positions are in meters; powers, noise and
/// gains are stored in dB units and linearized on load.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub seed: u64,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub cells: Vec<CellRecord>,
    pub users: Vec<UserRecord>,
    /// `gains_db[k][b]`
    pub gains_db: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub kind: CellKind,
    pub position_m: [f64; 2],
    pub tx_psd_dbm_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UserRecord {
    pub position_m: [f64; 2],
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        let b = s.cells.len();
        Self {
            seed: s.seed,
            bandwidth_hz: s.bandwidth_hz,
            noise_psd_dbm_hz: watt_to_dbm(s.noise_psd),
            cells: s
                .cells
                .iter()
                .map(|c| CellRecord {
                    kind: c.kind,
                    position_m: c.position,
                    tx_psd_dbm_hz: watt_to_dbm(c.tx_psd),
                    parent: c.parent,
                })
                .collect(),
            users: s
                .users
                .iter()
                .map(|u| UserRecord { position_m: u.position, weight: u.weight })
                .collect(),
            gains_db: s.gains.chunks(b).map(|row| row.iter().map(|&g| linear_to_db(g)).collect()).collect(),
        }
    }
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let b = self.cells.len();
        if self.gains_db.len() != self.users.len() || self.gains_db.iter().any(|r| r.len() != b) {
            return Err(Error::Input("gains_db must be a users × cells matrix".into()));
        }
        let cells = self
            .cells
            .into_iter()
            .map(|c| Cell {
                kind: c.kind,
                position: c.position_m,
                tx_psd: dbm_to_watt(c.tx_psd_dbm_hz),
                parent: c.parent,
            })
            .collect();
        let users = self
            .users
            .into_iter()
            .map(|u| User { position: u.position_m, weight: u.weight })
            .collect();
        let gains = self.gains_db.into_iter().flatten().map(db_to_linear).collect();
        Scenario::new(
            cells,
            users,
            gains,
            dbm_to_watt(self.noise_psd_dbm_hz),
            self.bandwidth_hz,
            self.seed,
        )
    }
}
