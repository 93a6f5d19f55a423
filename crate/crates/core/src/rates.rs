//! Per-user, per-cell, per-pattern exclusive rates.
//!
//! `r[k][b][i]` is the rate user `k` would get from cell `b` if pattern `i`
//! were the only pattern and `k` the only user of `b`. The tensor is built
//! once per drop and stays constant for the solvers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patterns::PatternSet;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    /// |h|² = 1 on every link.
    #[default]
    Deterministic,
    /// Monte-Carlo average over i.i.d. unit-mean exponential |h|².
    RayleighMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FadingOptions {
    pub mode: FadingMode,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for FadingOptions {
    fn default() -> Self {
        Self { mode: FadingMode::Deterministic, mc_samples: 1000, seed: 0 }
    }
}

impl FadingOptions {
    pub fn rayleigh(mc_samples: usize, seed: u64) -> Self {
        Self { mode: FadingMode::RayleighMc, mc_samples, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == FadingMode::RayleighMc && self.mc_samples < 100 {
            return Err(Error::Input(format!(
                "Monte-Carlo fading needs at least 100 samples, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }
}

/// K×B×I rate tensor in bit/s.
///
/// Stored pattern-major with users contiguous, so that the column
/// `(b, i)` over all users is a single slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    users: usize,
    cells: usize,
    patterns: usize,
    data: Vec<f64>,
    /// Activity bitmask of each pattern, when known.
    masks: Option<Vec<u64>>,
}

impl RateMatrix {
    /// Build from a closure `f(k, b, i)`.
    pub fn from_fn(
        users: usize,
        cells: usize,
        patterns: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(users * cells * patterns);
        for i in 0..patterns {
            for b in 0..cells {
                for k in 0..users {
                    data.push(f(k, b, i));
                }
            }
        }
        Self::from_raw(users, cells, patterns, data)
    }

    fn from_raw(users: usize, cells: usize, patterns: usize, data: Vec<f64>) -> Result<Self> {
        if users == 0 || cells == 0 || patterns == 0 {
            return Err(Error::Input("rate tensor dimensions must be positive".into()));
        }
        debug_assert_eq!(data.len(), users * cells * patterns);
        if let Some(pos) = data.iter().position(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::Input(format!("rate entry {pos} is negative or not finite")));
        }
        Ok(Self { users, cells, patterns, data, masks: None })
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns
    }

    /// (K, B, I)
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.users, self.cells, self.patterns)
    }

    #[inline]
    pub fn get(&self, user: usize, cell: usize, pattern: usize) -> f64 {
        self.data[(pattern * self.cells + cell) * self.users + user]
    }

    /// Rates of every user from `cell` under `pattern`.
    #[inline]
    pub fn column(&self, cell: usize, pattern: usize) -> &[f64] {
        let start = (pattern * self.cells + cell) * self.users;
        &self.data[start..start + self.users]
    }

    /// Users whose rate is zero on every (cell, pattern) pair; their log
    /// utility would be −∞ under any allocation.
    pub fn zero_rate_users(&self) -> Vec<usize> {
        let mut positive = vec![false; self.users];
        for col in self.data.chunks(self.users) {
            for (k, &r) in col.iter().enumerate() {
                if r > 0.0 {
                    positive[k] = true;
                }
            }
        }
        (0..self.users).filter(|&k| !positive[k]).collect()
    }

    pub fn ensure_no_zero_user(&self) -> Result<()> {
        match self.zero_rate_users().first() {
            Some(&user) => Err(Error::ZeroRateUser { user }),
            None => Ok(()),
        }
    }

    /// Attach the activity bitmask of every pattern.
    pub fn with_pattern_masks(mut self, masks: Vec<u64>) -> Result<Self> {
        if masks.len() != self.patterns {
            return Err(Error::Input(format!(
                "{} pattern masks for {} patterns",
                masks.len(),
                self.patterns
            )));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn pattern_masks(&self) -> Option<&[u64]> {
        self.masks.as_deref()
    }

    /// Index of the all-cells-on pattern, if masks are known and it is present.
    pub fn reuse1_index(&self) -> Option<usize> {
        let full = if self.cells >= 64 { u64::MAX } else { (1u64 << self.cells) - 1 };
        self.masks.as_ref()?.iter().position(|&m| m == full)
    }

    /// Copy with the entries of `(user, cell)` pairs rejected by `keep` zeroed.
    pub fn mask_users(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = self.data.clone();
        for (c, col) in data.chunks_mut(self.users).enumerate() {
            let b = c % self.cells;
            for (k, r) in col.iter_mut().enumerate() {
                if !keep(k, b) {
                    *r = 0.0;
                }
            }
        }
        Self { data, masks: self.masks.clone(), ..*self }
    }

    /// Multiply every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut out = Self::from_raw(
            self.users,
            self.cells,
            self.patterns,
            self.data.iter().map(|r| r * factor).collect(),
        )?;
        out.masks = self.masks.clone();
        Ok(out)
    }

    /// Write the tensor as `HNRATE01`, little-endian u64 K, B, I and key,
    /// followed by the K×B×I entries as row-major (k, b, i) f64 values.
    pub fn write_binary(&self, path: &Path, key: u64) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        for v in [self.users as u64, self.cells as u64, self.patterns as u64, key] {
            w.write_all(&v.to_le_bytes())?;
        }
        for k in 0..self.users {
            for b in 0..self.cells {
                for i in 0..self.patterns {
                    w.write_all(&self.get(k, b, i).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a tensor written by [`RateMatrix::write_binary`]; returns the
    /// stored key alongside.
    pub fn read_binary(path: &Path) -> Result<(Self, u64)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Cache(format!("{} is not a rate cache file", path.display())));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [users, cells, patterns, key] = header;
        let (users, cells, patterns) = (users as usize, cells as usize, patterns as usize);
        let n = users
            .checked_mul(cells)
            .and_then(|x| x.checked_mul(patterns))
            .ok_or_else(|| Error::Cache("header dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Cache(format!("truncated payload: {e}")))?;
        let mut data = vec![0.0; n];
        for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
            let (k, rest) = (idx / (cells * patterns), idx % (cells * patterns));
            let (b, i) = (rest / patterns, rest % patterns);
            data[(i * cells + b) * users + k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok((Self::from_raw(users, cells, patterns, data)?, key))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"HNRATE01";

/// Compute `r_kbi = W E[log2(1 + t_ib P_b G_kb |h|² / (σ² + Σ_{l≠b} t_il P_l G_kl |h|²))]`.
pub fn compute_rate_matrix(
    scenario: &Scenario,
    patterns: &PatternSet,
    fading: &FadingOptions,
) -> Result<RateMatrix> {
    fading.validate()?;
    let (users, cells, n_patterns) = (scenario.num_users(), scenario.num_cells(), patterns.len());
    if patterns.num_cells() != cells {
        return Err(Error::Input(format!(
            "pattern set addresses {} cells but the scenario has {cells}",
            patterns.num_cells()
        )));
    }
    let w = scenario.bandwidth_hz;
    let noise = scenario.noise_psd;
    let rx: Vec<f64> = (0..users)
        .flat_map(|k| (0..cells).map(move |b| (k, b)))
        .map(|(k, b)| scenario.rx_psd(k, b))
        .collect();

    // Per-user fading draws, `samples × cells`, independent of the pattern.
    let draws: Option<Vec<Vec<f64>>> = match fading.mode {
        FadingMode::Deterministic => None,
        FadingMode::RayleighMc => Some(
            (0..users)
                .into_par_iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        fading.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k as u64,
                    );
                    (0..fading.mc_samples * cells).map(|_| Exp1.sample(&mut rng)).collect()
                })
                .collect(),
        ),
    };

    let mut data = vec![0.0; users * cells * n_patterns];
    data.par_chunks_mut(users * cells).enumerate().for_each(|(i, block)| {
        let mask = patterns.masks()[i];
        for k in 0..users {
            let row = &rx[k * cells..(k + 1) * cells];
            match &draws {
                None => {
                    let total: f64 = (0..cells).filter(|&l| mask >> l & 1 == 1).map(|l| row[l]).sum();
                    for b in (0..cells).filter(|&b| mask >> b & 1 == 1) {
                        let interference = (total - row[b]).max(0.0);
                        block[b * users + k] = w * (row[b] / (noise + interference)).ln_1p()
                            / std::f64::consts::LN_2;
                    }
                }
                Some(draws) => {
                    let h = &draws[k];
                    let s = fading.mc_samples;
                    for b in (0..cells).filter(|&b| mask >> b & 1 == 1) {
                        let mut acc = 0.0;
                        for n in 0..s {
                            let fade = &h[n * cells..(n + 1) * cells];
                            let mut interference = 0.0;
                            for l in (0..cells).filter(|&l| l != b && mask >> l & 1 == 1) {
                                interference += row[l] * fade[l];
                            }
                            acc += (row[b] * fade[b] / (noise + interference)).ln_1p();
                        }
                        block[b * users + k] = w * acc / (s as f64 * std::f64::consts::LN_2);
                    }
                }
            }
        }
    });
    RateMatrix::from_raw(users, cells, n_patterns, data)?.with_pattern_masks(patterns.masks().to_vec())
}

/// Cache key over the scenario, pattern masks and fading options.
pub fn cache_key(scenario: &Scenario, patterns: &PatternSet, fading: &FadingOptions) -> Result<u64> {
    let mut h = Sha256::new();
    h.update(scenario.to_json()?.as_bytes());
    h.update((patterns.num_cells() as u64).to_le_bytes());
    for m in patterns.masks() {
        h.update(m.to_le_bytes());
    }
    h.update(serde_json::to_vec(fading)?);
    let digest = h.finalize();
    Ok(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub fn cache_path(dir: &Path, key: u64) -> PathBuf {
    dir.join(format!("rates-{key:016x}.bin"))
}

/// Load the tensor from `dir` when a matching cache file exists, otherwise
/// compute it and store it there.
pub fn cached_rate_matrix(
    dir: &Path,
    scenario: &Scenario,
    patterns: &PatternSet,
    fading: &FadingOptions,
) -> Result<RateMatrix> {
    let key = cache_key(scenario, patterns, fading)?;
    let path = cache_path(dir, key);
    if path.exists() {
        match RateMatrix::read_binary(&path) {
            Ok((rates, stored))
                if stored == key
                    && rates.dims() == (scenario.num_users(), scenario.num_cells(), patterns.len()) =>
            {
                return rates.with_pattern_masks(patterns.masks().to_vec());
            }
            Ok(_) => log::warn!("stale rate cache {}, recomputing", path.display()),
            Err(e) => log::warn!("unreadable rate cache {}: {e}, recomputing", path.display()),
        }
    }
    let rates = compute_rate_matrix(scenario, patterns, fading)?;
    std::fs::create_dir_all(dir)?;
    rates.write_binary(&path, key)?;
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::enumerate_all_patterns;
    use crate::scenario::{generate_scenario, Cell, CellKind, ScenarioConfig, User};
    use proptest::prelude::*;

    /// Scenario with explicit received PSDs: tx_psd 1 W/Hz and gains equal
    /// to the wanted received PSD.
    fn toy(rx: &[Vec<f64>], noise: f64, bandwidth: f64) -> Scenario {
        let cells = (0..rx[0].len())
            .map(|_| Cell { kind: CellKind::Macro, position: [0.0, 0.0], tx_psd: 1.0, parent: None })
            .collect();
        let users = rx.iter().map(|_| User { position: [1.0, 1.0], weight: 1.0 }).collect();
        Scenario::new(cells, users, rx.concat(), noise, bandwidth, 0).unwrap()
    }

    #[test]
    fn single_link_rate() {
        let snr = 31.623;
        let sc = toy(&[vec![snr]], 1.0, 10e6);
        let set = PatternSet::new(1, vec![1]).unwrap();
        let r = compute_rate_matrix(&sc, &set, &FadingOptions::default()).unwrap();
        assert!((r.get(0, 0, 0) - 5.0279e7).abs() < 1e3, "{}", r.get(0, 0, 0));
    }

    #[test]
    fn equal_power_interferer_gives_one_bit() {
        let sc = toy(&[vec![1.0, 1.0]], 1e-15, 10e6);
        let set = PatternSet::new(2, vec![0b11, 0b01]).unwrap();
        let r = compute_rate_matrix(&sc, &set, &FadingOptions::default()).unwrap();
        assert!((r.get(0, 0, 0) - 1.0e7).abs() < 1e-3);
        assert!((r.get(0, 1, 0) - 1.0e7).abs() < 1e-3);
        // cell 1 OFF in pattern 1
        assert_eq!(r.get(0, 1, 1), 0.0);
        assert!(r.get(0, 0, 1) > r.get(0, 0, 0));
    }

    #[test]
    fn off_cells_have_zero_rate() {
        let sc = generate_scenario(&ScenarioConfig { num_users: 8, ..Default::default() }, 4).unwrap();
        let set = enumerate_all_patterns(15).unwrap();
        let r = compute_rate_matrix(&sc, &set, &FadingOptions::default()).unwrap();
        for p in set.iter().step_by(97) {
            for b in 0..15 {
                for k in 0..8 {
                    assert_eq!(r.get(k, b, p.id) == 0.0, !p.is_on(b));
                }
            }
        }
        assert!(r.zero_rate_users().is_empty());
    }

    #[test]
    fn zero_rate_users_are_flagged() {
        let r = RateMatrix::from_fn(3, 2, 2, |k, _, _| if k == 1 { 0.0 } else { 1.0 }).unwrap();
        assert_eq!(r.zero_rate_users(), vec![1]);
        assert!(matches!(r.ensure_no_zero_user(), Err(Error::ZeroRateUser { user: 1 })));
    }

    #[test]
    fn fading_options_validated() {
        assert!(FadingOptions::rayleigh(50, 0).validate().is_err());
        assert!(FadingOptions::rayleigh(100, 0).validate().is_ok());
    }

    /// Simpson quadrature of E[log2(1 + snr X)], X ~ Exp(1).
    fn ergodic_quadrature(snr: f64) -> f64 {
        let (a, b, n) = (0.0f64, 60.0f64, 200_000usize);
        let h = (b - a) / n as f64;
        let f = |x: f64| (1.0 + snr * x).log2() * (-x).exp();
        let mut s = f(a) + f(b);
        for j in 1..n {
            s += f(a + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn monte_carlo_matches_quadrature() {
        let snr = 10.0;
        let sc = toy(&[vec![snr]], 1.0, 1.0);
        let set = PatternSet::new(1, vec![1]).unwrap();
        let r = compute_rate_matrix(&sc, &set, &FadingOptions::rayleigh(100_000, 3)).unwrap();
        let exact = ergodic_quadrature(snr);
        assert!((r.get(0, 0, 0) / exact - 1.0).abs() < 0.01, "{} vs {exact}", r.get(0, 0, 0));
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let sc = toy(&[vec![2.0, 0.5], vec![0.1, 3.0]], 0.1, 1.0);
        let set = enumerate_all_patterns(2).unwrap();
        let f = FadingOptions::rayleigh(500, 9);
        assert_eq!(
            compute_rate_matrix(&sc, &set, &f).unwrap(),
            compute_rate_matrix(&sc, &set, &f).unwrap()
        );
    }

    #[test]
    fn binary_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sc = generate_scenario(&ScenarioConfig { num_users: 5, ..Default::default() }, 1).unwrap();
        let set = crate::patterns::strategy_patterns(
            crate::patterns::Strategy::FeaPattern,
            &crate::patterns::Topology::from_scenario(&sc).unwrap(),
        )
        .unwrap();
        let fading = FadingOptions::default();
        let a = cached_rate_matrix(dir.path(), &sc, &set, &fading).unwrap();
        let key = cache_key(&sc, &set, &fading).unwrap();
        let path = cache_path(dir.path(), key);
        assert!(path.exists());
        // header + payload size
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 40 + 8 * 5 * 15 * 4);
        let (b, stored) = RateMatrix::read_binary(&path).unwrap();
        assert_eq!(stored, key);
        assert_eq!(b.pattern_masks(), None);
        assert_eq!(a, b.with_pattern_masks(set.masks().to_vec()).unwrap());
        assert_eq!(cached_rate_matrix(dir.path(), &sc, &set, &fading).unwrap(), a);
        // row-major (k, b, i): the second stored value is (0, 0, 1)
        let bytes = std::fs::read(&path).unwrap();
        let second = f64::from_le_bytes(bytes[48..56].try_into().unwrap());
        assert_eq!(second, a.get(0, 0, 1));
    }

    #[test]
    fn corrupt_cache_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTRATES........").unwrap();
        assert!(matches!(RateMatrix::read_binary(&path), Err(Error::Cache(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Switching off an interferer never lowers a served link's rate.
        #[test]
        fn muting_interferer_never_hurts(
            rx in prop::collection::vec(prop::collection::vec(1e-3f64..1e3, 4), 1..4),
            mask in 1u64..16,
            b in 0usize..4,
            l in 0usize..4,
        ) {
            prop_assume!(mask >> b & 1 == 1 && mask >> l & 1 == 1 && l != b);
            let sc = toy(&rx, 0.01, 1e6);
            let set = PatternSet::new(4, vec![mask, mask & !(1 << l)]).unwrap();
            let r = compute_rate_matrix(&sc, &set, &FadingOptions::default()).unwrap();
            for k in 0..rx.len() {
                prop_assert!(r.get(k, b, 1) >= r.get(k, b, 0));
            }
        }
    }
}
