//! Shared fixtures for the criterion benchmarks.

use std::path::PathBuf;

use roomop_core::config::Scenario;
use roomop_core::dataset::{generate, Dataset, Split};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

/// A scenario with its validation split generated into a temporary directory.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub scenario: Scenario,
    pub data: Dataset,
}

pub fn fixture(name: &str) -> Fixture {
    let scenario = Scenario::load(config_path(name)).expect("scenario");
    let dir = tempfile::tempdir().expect("tempdir");
    generate(&scenario, Split::Val, dir.path()).expect("generate");
    let data = Dataset::load(dir.path()).expect("load");
    Fixture { _dir: dir, scenario, data }
}
