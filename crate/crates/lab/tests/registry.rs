use std::path::PathBuf;

use lowrank_lab::{registry, ExperimentConfig};

fn figs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../figs")
}

/// `figs/*.json` must match the built-in registry. Run with
/// `LOWRANK_WRITE_FIGS=1` to regenerate the files.
#[test]
fn figs_match_registry() {
    let dir = figs_dir();
    let write = std::env::var_os("LOWRANK_WRITE_FIGS").is_some();
    if write {
        std::fs::create_dir_all(&dir).unwrap();
    }
    for cfg in registry::all() {
        let path = dir.join(format!("{}.json", cfg.id));
        let expected = cfg.to_json_pretty();
        if write {
            std::fs::write(&path, &expected).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, expected, "{} is out of date", path.display());
        let parsed = ExperimentConfig::from_path(&path).unwrap().resolve(None).unwrap();
        assert_eq!(parsed, cfg);
    }
    let files = std::fs::read_dir(&dir).unwrap().count();
    assert_eq!(files, registry::IDS.len(), "stray files in figs/");
}

#[test]
fn ids_are_unique_and_include_the_figures() {
    let mut ids = registry::IDS.to_vec();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), registry::IDS.len());
    for id in ["fig1c", "fig3_aba", "fig4_twins", "fig8_gaussianity", "fig12_rank2"] {
        assert!(registry::get(id).is_some());
    }
}

#[test]
fn every_criterion_has_checks() {
    let names: Vec<String> = registry::all().into_iter().flat_map(|c| c.checks).map(|c| c.name).collect();
    for k in 1..=11 {
        assert!(names.iter().any(|n| n.starts_with(&format!("c{k}."))), "criterion {k} has no check");
    }
}
