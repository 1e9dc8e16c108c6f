use std::path::PathBuf;

use roomop_core::config::Scenario;
use roomop_core::dataset::sensor_grid;

fn configs() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_configs_parse() {
    let paths = configs();
    assert!(paths.len() >= 3);
    for p in paths {
        let scn = Scenario::load(&p).unwrap_or_else(|e| panic!("{e}"));
        let sensors = sensor_grid(&scn).unwrap();
        assert!(sensors.ghost.iter().any(|g| !g), "{}", p.display());
        for (s, r) in scn.dataset.test_sources.iter().zip(&scn.dataset.test_receivers) {
            assert!(scn.source_region.contains(s), "{}: {s:?}", p.display());
            assert!(scn.geometry.is_fluid(r), "{}: {r:?}", p.display());
        }
    }
}

#[test]
fn transfer_scenarios_share_the_frame() {
    let load = |n: &str| Scenario::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{n}.toml"))).unwrap();
    let room = load("room2d");
    for target in ["square_small", "lshape2d"] {
        let t = load(target);
        assert_eq!(t.frame, room.frame, "{target}");
        assert_eq!(sensor_grid(&t).unwrap().lattice, sensor_grid(&room).unwrap().lattice, "{target}");
    }
}

#[test]
fn porous_wall_scenario_is_stable() {
    use roomop_core::geometry::build_grid;
    use roomop_core::solver::{simulate, SourceSpec};

    let scn = Scenario::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/room2d_porous.toml")).unwrap();
    let models = scn.sim_boundaries();
    assert!(models["absorber"].is_frequency_dependent());
    let grid = build_grid(&scn.geometry, scn.f_max_sim(), scn.dataset.val_ppw, scn.medium.c).unwrap();
    let src = SourceSpec {
        x0: vec![1.0, 1.0],
        sigma0: scn.sigma0(),
    };
    let save_dt = scn.save_dt_sim();
    let res = simulate(&grid, &scn.geometry, &models, &src, scn.medium.c, save_dt * 100.0, save_dt).unwrap();
    let peak = |k: usize| res.pressures.row(k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let last = res.pressures.nrows() - 1;
    assert!(res.pressures.iter().all(|v| v.is_finite()));
    assert!(peak(last) < 0.5 * peak(0), "{} vs {}", peak(last), peak(0));
}
