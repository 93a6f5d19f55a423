//! Interference patterns as cell activity bitmasks, and the candidate sets
//! used by each resource-partitioning strategy.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{CellKind, Scenario};

/// Largest network for which every pattern may be enumerated.
pub const MAX_ENUMERATED_CELLS: usize = 24;
/// Bitmask width.
pub const MAX_CELLS: usize = 64;

/// One ON/OFF activity assignment. Bit `b` of `activity` is set when cell
/// `b` transmits; `id` is the position in the owning candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub id: usize,
    pub activity: u64,
}

impl Pattern {
    pub fn is_on(&self, cell: usize) -> bool {
        self.activity >> cell & 1 == 1
    }
}

/// Ordered candidate pattern list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    cells: usize,
    masks: Vec<u64>,
}

impl PatternSet {
    pub fn new(cells: usize, masks: Vec<u64>) -> Result<Self> {
        if cells == 0 || cells > MAX_CELLS {
            return Err(Error::Input(format!("cell count {cells} outside 1..={MAX_CELLS}")));
        }
        if masks.is_empty() {
            return Err(Error::Input("pattern set must not be empty".into()));
        }
        let full = full_mask(cells);
        let mut seen = HashSet::with_capacity(masks.len());
        for &m in &masks {
            if m == 0 {
                return Err(Error::Input("the all-OFF pattern is not allowed".into()));
            }
            if m & !full != 0 {
                return Err(Error::Input(format!("pattern {m:#x} addresses cells beyond {cells}")));
            }
            if !seen.insert(m) {
                return Err(Error::Input(format!("duplicate pattern {m:#x}")));
            }
        }
        Ok(Self { cells, masks })
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[u64] {
        &self.masks
    }

    pub fn get(&self, id: usize) -> Pattern {
        Pattern { id, activity: self.masks[id] }
    }

    pub fn iter(&self) -> impl Iterator<Item = Pattern> + '_ {
        self.masks.iter().enumerate().map(|(id, &activity)| Pattern { id, activity })
    }

    pub fn position(&self, mask: u64) -> Option<usize> {
        self.masks.iter().position(|&m| m == mask)
    }

    /// Index of the all-ON pattern, if it is a candidate.
    pub fn reuse1_index(&self) -> Option<usize> {
        self.position(full_mask(self.cells))
    }

    /// Bitstring with the first character describing cell 0.
    pub fn to_bitstring(&self, id: usize) -> String {
        mask_to_bitstring(self.masks[id], self.cells)
    }

    pub fn to_json(&self) -> Result<String> {
        let v: Vec<String> = (0..self.len()).map(|i| self.to_bitstring(i)).collect();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vec<String> = serde_json::from_str(s)?;
        let cells = v
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::Input("empty pattern list".into()))?;
        let masks = v
            .iter()
            .map(|s| bitstring_to_mask(s, cells))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cells, masks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub fn full_mask(cells: usize) -> u64 {
    if cells >= 64 {
        u64::MAX
    } else {
        (1u64 << cells) - 1
    }
}

pub fn mask_to_bitstring(mask: u64, cells: usize) -> String {
    (0..cells).map(|b| if mask >> b & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn bitstring_to_mask(s: &str, cells: usize) -> Result<u64> {
    if s.len() != cells {
        return Err(Error::Input(format!("bitstring {s:?} should have {cells} characters")));
    }
    s.chars().enumerate().try_fold(0u64, |acc, (b, c)| match c {
        '1' => Ok(acc | 1 << b),
        '0' => Ok(acc),
        _ => Err(Error::Input(format!("invalid character {c:?} in bitstring"))),
    })
}

fn mask_of(cells: impl IntoIterator<Item = usize>) -> u64 {
    cells.into_iter().fold(0, |m, b| m | 1 << b)
}

/// Every nonempty pattern of a `cells`-cell network, ascending by mask.
pub fn enumerate_all_patterns(cells: usize) -> Result<PatternSet> {
    if cells == 0 || cells > MAX_ENUMERATED_CELLS {
        return Err(Error::Input(format!(
            "cannot enumerate patterns for {cells} cells (allowed 1..={MAX_ENUMERATED_CELLS})"
        )));
    }
    Ok(PatternSet { cells, masks: (1..=full_mask(cells)).collect() })
}

/// Macro/pico layout used to build strategy pattern sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub cells: usize,
    pub macros: Vec<usize>,
    /// `pico_groups[m]` lists the picos inside the coverage of `macros[m]`.
    pub pico_groups: Vec<Vec<usize>>,
    /// Partition of the picos into reuse-3 classes.
    pub pico_reuse_classes: Vec<Vec<usize>>,
    /// Partition of the macros into sets that are switched ON together in
    /// the feature patterns. Defaults to one set per macro.
    pub macro_on_groups: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(
        cells: usize,
        macros: Vec<usize>,
        pico_groups: Vec<Vec<usize>>,
        pico_reuse_classes: Vec<Vec<usize>>,
        macro_on_groups: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let macro_on_groups =
            macro_on_groups.unwrap_or_else(|| macros.iter().map(|&m| vec![m]).collect());
        let topo = Self { cells, macros, pico_groups, pico_reuse_classes, macro_on_groups };
        topo.validate()?;
        Ok(topo)
    }

    /// Macros and their picos taken from the scenario; picos colored into
    /// reuse-3 classes by their position in the global pico ordering.
    pub fn from_scenario(scenario: &Scenario) -> Result<Self> {
        let macros = scenario.macro_indices();
        let mut groups = vec![Vec::new(); macros.len()];
        let mut picos = Vec::new();
        for (b, cell) in scenario.cells.iter().enumerate() {
            if cell.kind == CellKind::Pico {
                let parent = cell
                    .parent
                    .ok_or_else(|| Error::Input(format!("pico {b} has no parent macro")))?;
                let slot = macros
                    .iter()
                    .position(|&m| m == parent)
                    .ok_or_else(|| Error::Input(format!("pico {b} parent {parent} is not a macro")))?;
                groups[slot].push(b);
                picos.push(b);
            }
        }
        Self::new(scenario.num_cells(), macros, groups, reuse3_coloring(&picos), None)
    }

    /// The replicated 3-macro / 12-pico layout with cells labelled macros
    /// first and then four picos per macro.
    pub fn replicated_15_cell() -> Self {
        let picos: Vec<usize> = (3..15).collect();
        Self::new(
            15,
            vec![0, 1, 2],
            vec![(3..7).collect(), (7..11).collect(), (11..15).collect()],
            reuse3_coloring(&picos),
            None,
        )
        .expect("static layout is consistent")
    }

    pub fn picos(&self) -> Vec<usize> {
        self.pico_groups.iter().flatten().copied().collect()
    }

    fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.cells > MAX_CELLS {
            return Err(Error::Input(format!("cell count {} out of range", self.cells)));
        }
        if self.macros.is_empty() || self.pico_groups.len() != self.macros.len() {
            return Err(Error::Input("need one pico group per macro".into()));
        }
        let mut seen = vec![false; self.cells];
        for &b in self.macros.iter().chain(self.pico_groups.iter().flatten()) {
            if b >= self.cells || std::mem::replace(&mut seen[b], true) {
                return Err(Error::Input(format!("cell {b} repeated or out of range in topology")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Input("topology groups must cover every cell".into()));
        }
        let picos: HashSet<usize> = self.picos().into_iter().collect();
        check_partition(&self.pico_reuse_classes, &picos, "pico reuse classes")?;
        let macros: HashSet<usize> = self.macros.iter().copied().collect();
        check_partition(&self.macro_on_groups, &macros, "macro ON groups")?;
        Ok(())
    }
}

fn reuse3_coloring(picos: &[usize]) -> Vec<Vec<usize>> {
    let mut classes = vec![Vec::new(); 3];
    for (j, &p) in picos.iter().enumerate() {
        classes[j % 3].push(p);
    }
    classes.retain(|c| !c.is_empty());
    classes
}

fn check_partition(parts: &[Vec<usize>], universe: &HashSet<usize>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for &x in parts.iter().flatten() {
        if !universe.contains(&x) || !seen.insert(x) {
            return Err(Error::Input(format!("{what}: cell {x} misplaced or repeated")));
        }
    }
    if seen.len() != universe.len() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Input(format!("{what} must partition the cells without empty parts")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    AllPattern,
    FeaPattern,
    OD1,
    OD3,
    MacroABS,
    Reuse1,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::AllPattern,
        Strategy::FeaPattern,
        Strategy::OD1,
        Strategy::OD3,
        Strategy::MacroABS,
        Strategy::Reuse1,
    ];

    pub fn cli_name(&self) -> &'static str {
        match self {
            Strategy::AllPattern => "all",
            Strategy::FeaPattern => "feature",
            Strategy::OD1 => "od1",
            Strategy::OD3 => "od3",
            Strategy::MacroABS => "abs",
            Strategy::Reuse1 => "reuse1",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::AllPattern => "AllPattern",
            Strategy::FeaPattern => "FeaPattern",
            Strategy::OD1 => "OD1",
            Strategy::OD3 => "OD3",
            Strategy::MacroABS => "MacroABS",
            Strategy::Reuse1 => "Reuse1",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "all" | "allpattern" => Ok(Strategy::AllPattern),
            "feature" | "feapattern" | "fea" => Ok(Strategy::FeaPattern),
            "od1" => Ok(Strategy::OD1),
            "od3" => Ok(Strategy::OD3),
            "abs" | "macroabs" => Ok(Strategy::MacroABS),
            "reuse1" => Ok(Strategy::Reuse1),
            _ => Err(Error::Input(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Candidate patterns of `strategy` on `topology`.
pub fn strategy_patterns(strategy: Strategy, topology: &Topology) -> Result<PatternSet> {
    let cells = topology.cells;
    let all = full_mask(cells);
    let macros = mask_of(topology.macros.iter().copied());
    let picos = all & !macros;
    let masks = match strategy {
        Strategy::AllPattern => return enumerate_all_patterns(cells),
        Strategy::Reuse1 => vec![all],
        Strategy::MacroABS => vec![all, picos],
        Strategy::OD1 => vec![picos, macros],
        Strategy::OD3 => {
            let mut v = vec![macros];
            v.extend(topology.pico_reuse_classes.iter().map(|c| mask_of(c.iter().copied())));
            v
        }
        Strategy::FeaPattern => {
            let mut v = vec![picos];
            for group in &topology.macro_on_groups {
                let on_macros = mask_of(group.iter().copied());
                let muted_picos = group
                    .iter()
                    .map(|m| {
                        let slot = topology.macros.iter().position(|x| x == m).expect("validated");
                        mask_of(topology.pico_groups[slot].iter().copied())
                    })
                    .fold(0, |a, b| a | b);
                v.push(on_macros | (picos & !muted_picos));
            }
            v
        }
    };
    PatternSet::new(cells, masks)
}

/// Name-based variant of [`strategy_patterns`].
pub fn build_strategy_patterns(name: &str, topology: &Topology) -> Result<PatternSet> {
    strategy_patterns(name.parse()?, topology)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn muted_sets(set: &PatternSet) -> Vec<Vec<usize>> {
        set.iter()
            .map(|p| (0..set.num_cells()).filter(|&b| !p.is_on(b)).map(|b| b + 1).collect())
            .collect()
    }

    #[test]
    fn enumerate_counts() {
        assert_eq!(enumerate_all_patterns(3).unwrap().len(), 7);
        assert_eq!(enumerate_all_patterns(15).unwrap().len(), 32767);
        let one = enumerate_all_patterns(1).unwrap();
        assert_eq!(one.masks(), &[1]);
        assert!(enumerate_all_patterns(0).is_err());
        assert!(enumerate_all_patterns(25).is_err());
    }

    #[test]
    fn enumeration_is_ascending_and_distinct() {
        let set = enumerate_all_patterns(6).unwrap();
        assert!(set.masks().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(set.reuse1_index(), Some(62));
    }

    #[test]
    fn feature_patterns_of_replicated_network() {
        let set = strategy_patterns(Strategy::FeaPattern, &Topology::replicated_15_cell()).unwrap();
        assert_eq!(
            muted_sets(&set),
            vec![
                vec![1, 2, 3],
                vec![2, 3, 4, 5, 6, 7],
                vec![1, 3, 8, 9, 10, 11],
                vec![1, 2, 12, 13, 14, 15],
            ]
        );
    }

    #[test]
    fn od_and_abs_patterns_of_replicated_network() {
        let topo = Topology::replicated_15_cell();
        let od1 = strategy_patterns(Strategy::OD1, &topo).unwrap();
        assert_eq!(muted_sets(&od1), vec![vec![1, 2, 3], (4..=15).collect()]);
        let od3 = strategy_patterns(Strategy::OD3, &topo).unwrap();
        assert_eq!(
            muted_sets(&od3),
            vec![
                (4..=15).collect::<Vec<_>>(),
                vec![1, 2, 3, 5, 6, 8, 9, 11, 12, 14, 15],
                vec![1, 2, 3, 4, 6, 7, 9, 10, 12, 13, 15],
                vec![1, 2, 3, 4, 5, 7, 8, 10, 11, 13, 14],
            ]
        );
        let abs = strategy_patterns(Strategy::MacroABS, &topo).unwrap();
        assert_eq!(muted_sets(&abs), vec![vec![], vec![1, 2, 3]]);
        let r1 = build_strategy_patterns("reuse1", &topo).unwrap();
        assert_eq!(r1.masks(), &[full_mask(15)]);
    }

    #[test]
    fn strategies_are_subsets_of_all_patterns() {
        let topo = Topology::replicated_15_cell();
        let all: HashSet<u64> = enumerate_all_patterns(15).unwrap().masks().iter().copied().collect();
        for s in Strategy::ALL {
            let set = strategy_patterns(s, &topo).unwrap();
            assert!(set.masks().iter().all(|m| all.contains(m)), "{s}");
        }
    }

    #[test]
    fn feature_set_size_tracks_macro_count() {
        // 5 macros, 2 picos each
        let macros: Vec<usize> = (0..5).collect();
        let groups: Vec<Vec<usize>> = (0..5).map(|m| vec![5 + 2 * m, 6 + 2 * m]).collect();
        let picos: Vec<usize> = (5..15).collect();
        let topo = Topology::new(15, macros, groups, reuse3_coloring(&picos), None).unwrap();
        let set = strategy_patterns(Strategy::FeaPattern, &topo).unwrap();
        assert_eq!(set.len(), 6);
        // Each macro pattern silences exactly that macro's picos.
        for (m, p) in set.iter().skip(1).enumerate() {
            assert!(p.is_on(m));
            assert!(!p.is_on(5 + 2 * m) && !p.is_on(6 + 2 * m));
            for other in (0..5).filter(|&o| o != m) {
                assert!(!p.is_on(other));
                assert!(p.is_on(5 + 2 * other));
            }
        }
    }

    #[test]
    fn orthogonal_deployments_never_mix_macro_with_own_picos() {
        let topo = Topology::replicated_15_cell();
        for s in [Strategy::OD1, Strategy::OD3, Strategy::FeaPattern] {
            for p in strategy_patterns(s, &topo).unwrap().iter() {
                for (slot, &m) in topo.macros.iter().enumerate() {
                    if p.is_on(m) {
                        assert!(topo.pico_groups[slot].iter().all(|&q| !p.is_on(q)), "{s}");
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_strategy_rejected() {
        let topo = Topology::replicated_15_cell();
        assert!(matches!(build_strategy_patterns("reuse7", &topo), Err(Error::Input(_))));
    }

    #[test]
    fn bad_topologies_rejected() {
        assert!(Topology::new(4, vec![0], vec![vec![1, 2]], vec![vec![1, 2]], None).is_err());
        assert!(Topology::new(3, vec![0], vec![vec![1, 2]], vec![vec![1]], None).is_err());
        assert!(Topology::new(3, vec![0], vec![vec![1, 1]], vec![vec![1]], None).is_err());
    }

    #[test]
    fn pattern_set_validation() {
        assert!(PatternSet::new(3, vec![]).is_err());
        assert!(PatternSet::new(3, vec![0b001, 0b000]).is_err());
        assert!(PatternSet::new(3, vec![0b001, 0b001]).is_err());
        assert!(PatternSet::new(3, vec![0b1000]).is_err());
    }

    #[test]
    fn bitstrings_put_cell_zero_first() {
        let set = PatternSet::new(4, vec![0b0001, 0b1100]).unwrap();
        assert_eq!(set.to_bitstring(0), "1000");
        assert_eq!(set.to_bitstring(1), "0011");
        let back = PatternSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        assert!(PatternSet::from_json(r#"["10", "1"]"#).is_err());
        assert!(PatternSet::from_json(r#"["1x"]"#).is_err());
    }
}
