#![allow(dead_code)]

use std::path::{Path, PathBuf};

use roomop_core::config::Scenario;
use roomop_core::pipeline::{fresh_state, generate_all, load_splits};
use roomop_core::specialization::Ensemble;

pub const SCENARIO: &str = r#"
name = "tiny"

[geometry]
min = [0.0, 0.0]
max = [2.0, 2.0]
default_boundary = "walls"

[boundaries.walls]
type = "freq_independent"
xi_imp = 17.98

[source_region]
min = [0.8, 0.8]
max = [1.2, 1.2]

[dataset]
f_max = 400.0
duration = 0.004
frames = 9
train_source_spacing = 0.2
test_sources = [[1.0, 1.0]]
test_receivers = [[0.5, 0.6]]

[partitions]
split = [2, 1]

[model]
branch_width = 8
trunk_width = 8
latent = 4
w0 = 1.0

[training]
n = 2
q = 8
iterations = 20
eval_every = 10
"#;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
}

/// Writes the scenario and generates its datasets.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, SCENARIO).unwrap();
    let data = dir.path().join("data");
    generate_all(&Scenario::load(&config).unwrap(), &data).unwrap();
    Fixture { dir, config, data }
}

/// Untrained model with the scenario's architecture and conventions.
pub fn ensemble(config: &Path, data: &Path) -> Ensemble {
    let scn = Scenario::load(config).unwrap();
    let splits = load_splits(data).unwrap();
    let state = fresh_state(&scn, &splits.train, 7, None);
    Ensemble::single(state.model, state.meta)
}
