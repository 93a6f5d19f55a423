use hetnet_opt::patterns::{enumerate_all_patterns, strategy_patterns, PatternSet, Strategy, Topology};
use proptest::prelude::*;

#[test]
fn strategy_sets_contain_reuse1_only_where_expected() {
    let topo = Topology::replicated_15_cell();
    for s in Strategy::ALL {
        let set = strategy_patterns(s, &topo).unwrap();
        assert_eq!(set.num_cells(), 15);
        let has_reuse1 = set.reuse1_index().is_some();
        assert_eq!(has_reuse1, matches!(s, Strategy::AllPattern | Strategy::MacroABS | Strategy::Reuse1), "{s:?}");
    }
}

#[test]
fn pattern_file_roundtrip() {
    let topo = Topology::replicated_15_cell();
    let set = strategy_patterns(Strategy::OD3, &topo).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("od3.json");
    set.save(&path).unwrap();
    assert_eq!(PatternSet::load(&path).unwrap(), set);
}

#[test]
fn malformed_pattern_files_are_rejected() {
    assert!(PatternSet::from_json("[]").is_err());
    assert!(PatternSet::from_json(r#"["101", "10"]"#).is_err());
    assert!(PatternSet::from_json(r#"["1x1"]"#).is_err());
}

proptest! {
    #[test]
    fn enumerated_set_roundtrips_through_json(cells in 1usize..8) {
        let set = enumerate_all_patterns(cells).unwrap();
        prop_assert_eq!(set.len(), (1usize << cells) - 1);
        prop_assert_eq!(PatternSet::from_json(&set.to_json().unwrap()).unwrap(), set);
    }
}
