//! Second-order leapfrog finite differences for `p_tt = c^2 lap p` with
//! impedance boundaries imposed through mirrored ghost nodes.
//!
//! A boundary node with a missing neighbour along axis `d` replaces that
//! neighbour by a ghost value from the centred normal derivative
//! `dp/dn = -(1/c) dv_n/dt`, where `v_n = p / xi` for frequency-independent
//! walls and the accumulator sum for frequency-dependent walls. Corner nodes
//! apply the condition once per adjoining face.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NodeKind, RoomGeometry, SimulationGrid};

use super::boundary::{boundary_velocity, AccumulatorState, AdeIntegrator, BoundaryModel};

/// Courant number for frequency-independent boundaries.
pub const CFL_FREQ_INDEPENDENT: f64 = 1.0;
/// Courant number when any boundary is frequency dependent.
pub const CFL_FREQ_DEPENDENT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediumParams {
    /// Simulation speed of sound; 1 means time is measured in metres travelled.
    pub c: f64,
    pub c_phys: f64,
    pub rho0: f64,
}

impl Default for MediumParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            c_phys: 343.0,
            rho0: 1.2,
        }
    }
}

impl MediumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c_phys > 0.0 && self.rho0 > 0.0) {
            return Err(crate::error::invalid("medium parameters must be positive"));
        }
        Ok(())
    }

    /// Converts a physical time (s) to simulation time units.
    pub fn to_sim_time(&self, t_phys: f64) -> f64 {
        t_phys * self.c_phys / self.c
    }

    pub fn to_phys_time(&self, t_sim: f64) -> f64 {
        t_sim * self.c / self.c_phys
    }

    /// Converts a physical frequency (Hz) to cycles per simulation time unit.
    pub fn to_sim_freq(&self, f_phys: f64) -> f64 {
        f_phys * self.c / self.c_phys
    }
}

/// Gaussian pulse initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub x0: Vec<f64>,
    pub sigma0: f64,
}

impl SourceSpec {
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.x0).map(|(a, b)| (a - b).powi(2)).sum();
        (-r2 / (self.sigma0 * self.sigma0)).exp()
    }
}

/// Pulse width spanning frequencies up to `f_max`: `c / (pi f_max / 2)`.
pub fn default_sigma0(c: f64, f_max: f64) -> f64 {
    c / (std::f64::consts::PI * f_max / 2.0)
}

/// `p(x, 0) = exp(-|x - x0|^2 / sigma0^2)` on fluid nodes, 0 elsewhere.
pub fn gaussian_ic(grid: &SimulationGrid, src: &SourceSpec) -> Vec<f64> {
    (0..grid.kinds.len())
        .map(|i| match grid.kinds[i] {
            NodeKind::Exterior => 0.0,
            _ => src.value_at(&grid.coord(i)),
        })
        .collect()
}

/// Largest stable step: `CFL dx / c`, capped at `dx / (c sqrt(dims))`.
pub fn stability_dt<'a>(
    grid: &SimulationGrid,
    models: impl IntoIterator<Item = &'a BoundaryModel>,
    c: f64,
) -> f64 {
    let cfl = if models.into_iter().any(BoundaryModel::is_frequency_dependent) {
        CFL_FREQ_DEPENDENT
    } else {
        CFL_FREQ_INDEPENDENT
    };
    let dx = grid.spacing();
    let cap = dx / (c * (grid.dims() as f64).sqrt());
    (cfl * dx / c).min(cap)
}

#[derive(Clone, Debug)]
struct BoundaryUpdate {
    index: usize,
    /// Laplacian with mirrored ghosts: `sum w_j p_j - centre p_i`.
    neighbours: Vec<(usize, f64)>,
    centre: f64,
    /// `sum over frequency-independent faces of 1/xi`.
    fi_gain: f64,
}

#[derive(Clone, Debug)]
struct FdLink {
    /// Position in `boundary_updates`.
    node: usize,
    model: usize,
    multiplicity: f64,
}

/// Accumulator and velocity history of one frequency-dependent (node, model) link.
#[derive(Clone, Debug, PartialEq)]
pub struct FdLinkState {
    pub acc: AccumulatorState,
    pub v_prev: f64,
    pub v_curr: f64,
}

/// Pressure at the two most recent time levels plus boundary memory.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub p_prev: Vec<f64>,
    pub p_curr: Vec<f64>,
    pub step: usize,
    pub links: Vec<FdLinkState>,
}

/// Precomputed stepping plan for one grid, boundary set, and time step.
#[derive(Clone, Debug)]
pub struct Solver {
    grid: SimulationGrid,
    c: f64,
    dt: f64,
    courant: f64,
    interior: Vec<usize>,
    strides: Vec<usize>,
    boundary_updates: Vec<BoundaryUpdate>,
    fd_models: Vec<AdeIntegrator>,
    fd_links: Vec<FdLink>,
}

impl Solver {
    /// `models` maps the geometry's boundary-model names to models expressed
    /// in simulation time units.
    pub fn new(
        grid: &SimulationGrid,
        geom: &RoomGeometry,
        models: &BTreeMap<String, BoundaryModel>,
        c: f64,
        dt: f64,
    ) -> Result<Self> {
        let used: Vec<&BoundaryModel> = geom
            .surfaces()
            .into_iter()
            .map(|s| {
                let name = geom.model_for(s);
                models.get(name).ok_or_else(|| {
                    Error::InvalidParameter(format!("boundary model `{name}` is not defined"))
                })
            })
            .collect::<Result<_>>()?;
        for m in &used {
            m.validate()?;
        }
        let limit = stability_dt(grid, used.iter().copied(), c);
        if dt > limit * (1.0 + 1e-12) {
            return Err(crate::error::invalid(format!(
                "time step {dt} exceeds the stability limit {limit}"
            )));
        }
        let names: Vec<&String> = models.keys().collect();
        let fd_models = models
            .values()
            .map(|m| match m {
                BoundaryModel::FreqDependent(y) => AdeIntegrator::new(y, dt).map(Some),
                BoundaryModel::FreqIndependent { .. } => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fd_slot = vec![usize::MAX; models.len()];
        let mut integrators = Vec::new();
        for (i, m) in fd_models.into_iter().enumerate() {
            if let Some(m) = m {
                fd_slot[i] = integrators.len();
                integrators.push(m);
            }
        }

        let lattice = &grid.lattice;
        let strides = lattice.strides();
        let dims = grid.dims();
        let interior = (0..grid.kinds.len())
            .filter(|&i| grid.kinds[i] == NodeKind::Interior)
            .collect();
        let mut boundary_updates = Vec::with_capacity(grid.boundary.len());
        let mut fd_links = Vec::new();
        for (bi, node) in grid.boundary.iter().enumerate() {
            let mut neighbours = Vec::with_capacity(2 * dims);
            for d in 0..dims {
                let lower = node.links.iter().any(|l| l.axis == d && !l.upper);
                let upper = node.links.iter().any(|l| l.axis == d && l.upper);
                match (lower, upper) {
                    (false, false) => {
                        neighbours.push((node.index - strides[d], 1.0));
                        neighbours.push((node.index + strides[d], 1.0));
                    }
                    (true, false) => neighbours.push((node.index + strides[d], 2.0)),
                    (false, true) => neighbours.push((node.index - strides[d], 2.0)),
                    (true, true) => unreachable!("grid construction rejects two-sided gaps"),
                }
            }
            let mut fi_gain = 0.0;
            let mut per_model: BTreeMap<usize, f64> = BTreeMap::new();
            for link in &node.links {
                let name = geom.model_for(link.surface);
                let idx = names.iter().position(|n| *n == name).expect("checked above");
                match &models[name] {
                    BoundaryModel::FreqIndependent { xi_imp } => fi_gain += 1.0 / xi_imp,
                    BoundaryModel::FreqDependent(_) => *per_model.entry(fd_slot[idx]).or_default() += 1.0,
                }
            }
            for (model, multiplicity) in per_model {
                fd_links.push(FdLink {
                    node: bi,
                    model,
                    multiplicity,
                });
            }
            boundary_updates.push(BoundaryUpdate {
                index: node.index,
                neighbours,
                centre: 2.0 * dims as f64,
                fi_gain,
            });
        }
        Ok(Self {
            grid: grid.clone(),
            c,
            dt,
            courant: c * dt / grid.spacing(),
            interior,
            strides,
            boundary_updates,
            fd_models: integrators,
            fd_links,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &SimulationGrid {
        &self.grid
    }

    /// State after the first step from a field at rest: `p^1 = p^0 + (C^2/2) lap p^0`
    /// with mirrored (zero normal derivative) boundaries.
    pub fn start(&self, p0: Vec<f64>) -> Result<FieldState> {
        if p0.len() != self.grid.kinds.len() {
            return Err(Error::ShapeMismatch {
                what: "initial pressure field".into(),
                expected: self.grid.kinds.len(),
                got: p0.len(),
            });
        }
        let c2 = self.courant * self.courant;
        let mut p1 = vec![0.0; p0.len()];
        for &i in &self.interior {
            p1[i] = p0[i] + 0.5 * c2 * self.interior_laplacian(&p0, i);
        }
        for b in &self.boundary_updates {
            p1[b.index] = p0[b.index] + 0.5 * c2 * mirrored_laplacian(&p0, b);
        }
        let links = self
            .fd_links
            .iter()
            .map(|l| {
                let integ = &self.fd_models[l.model];
                let i = self.boundary_updates[l.node].index;
                let mut acc = AccumulatorState::zeros(integ.model());
                let v_prev = boundary_velocity(p0[i], &acc, integ.model());
                integ.update(&mut acc, p0[i], p1[i]);
                let v_curr = boundary_velocity(p1[i], &acc, integ.model());
                FdLinkState { acc, v_prev, v_curr }
            })
            .collect();
        let state = FieldState {
            p_prev: p0,
            p_curr: p1,
            step: 1,
            links,
        };
        self.check_finite(&state)?;
        Ok(state)
    }

    #[inline]
    fn interior_laplacian(&self, p: &[f64], i: usize) -> f64 {
        let mut acc = -2.0 * self.strides.len() as f64 * p[i];
        for &s in &self.strides {
            acc += p[i - s] + p[i + s];
        }
        acc
    }

    /// Advances the field by one time step in place.
    pub fn step(&self, state: &mut FieldState) -> Result<()> {
        let c2 = self.courant * self.courant;
        let lam = self.courant;
        // `out` holds p^{n-1} on entry; each entry is read before it is overwritten.
        let mut out = std::mem::take(&mut state.p_prev);
        let curr = &state.p_curr;
        for &i in &self.interior {
            out[i] = 2.0 * curr[i] - out[i] + c2 * self.interior_laplacian(curr, i);
        }

        let mut fd_num = vec![0.0; self.boundary_updates.len()];
        let mut fd_den = vec![0.0; self.boundary_updates.len()];
        for (link, ls) in self.fd_links.iter().zip(&state.links) {
            let i = self.boundary_updates[link.node].index;
            let (gain, offset) = self.fd_models[link.model].affine_velocity(&ls.acc, curr[i]);
            fd_den[link.node] += link.multiplicity * gain;
            fd_num[link.node] += link.multiplicity * (offset - ls.v_prev);
        }
        for (k, b) in self.boundary_updates.iter().enumerate() {
            let i = b.index;
            let old = out[i];
            let num = 2.0 * curr[i] - old * (1.0 - lam * b.fi_gain) + c2 * mirrored_laplacian(curr, b)
                - lam * fd_num[k];
            out[i] = num / (1.0 + lam * (b.fi_gain + fd_den[k]));
        }
        for (link, ls) in self.fd_links.iter().zip(state.links.iter_mut()) {
            let i = self.boundary_updates[link.node].index;
            let integ = &self.fd_models[link.model];
            integ.update(&mut ls.acc, curr[i], out[i]);
            ls.v_prev = ls.v_curr;
            ls.v_curr = boundary_velocity(out[i], &ls.acc, integ.model());
        }
        state.p_prev = std::mem::replace(&mut state.p_curr, out);
        state.step += 1;
        self.check_finite(state)
    }

    fn check_finite(&self, state: &FieldState) -> Result<()> {
        if let Some(i) = state.p_curr.iter().position(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step: state.step,
                node: i,
                value: state.p_curr[i],
            });
        }
        Ok(())
    }

    /// Normal velocity of every frequency-dependent boundary link at the current step.
    pub fn link_velocities(&self, state: &FieldState) -> Vec<(usize, f64)> {
        self.fd_links
            .iter()
            .zip(&state.links)
            .map(|(l, s)| (self.boundary_updates[l.node].index, s.v_curr))
            .collect()
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.c
    }
}

#[inline]
fn mirrored_laplacian(p: &[f64], b: &BoundaryUpdate) -> f64 {
    let mut acc = -b.centre * p[b.index];
    for &(j, w) in &b.neighbours {
        acc += w * p[j];
    }
    acc
}

/// Pressure snapshots on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    /// Saved lattice node indices.
    pub nodes: Vec<usize>,
    pub coords: Vec<Vec<f64>>,
    /// `(time, node)` pressures.
    pub pressures: Array2<f64>,
}

impl SimulationResult {
    pub fn series(&self, node_pos: usize) -> Vec<f64> {
        self.pressures.column(node_pos).to_vec()
    }
}

/// Runs from the Gaussian initial condition to `duration`, saving every
/// `save_dt` (both in simulation time units). The internal step is the
/// largest stable step that divides `save_dt`.
pub fn simulate(
    grid: &SimulationGrid,
    geom: &RoomGeometry,
    models: &BTreeMap<String, BoundaryModel>,
    src: &SourceSpec,
    c: f64,
    duration: f64,
    save_dt: f64,
) -> Result<SimulationResult> {
    let nodes = grid.fluid_nodes();
    simulate_nodes(grid, geom, models, src, c, duration, save_dt, &nodes)
}

/// Like [`simulate`] but only records the given lattice nodes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_nodes(
    grid: &SimulationGrid,
    geom: &RoomGeometry,
    models: &BTreeMap<String, BoundaryModel>,
    src: &SourceSpec,
    c: f64,
    duration: f64,
    save_dt: f64,
    nodes: &[usize],
) -> Result<SimulationResult> {
    if !(duration >= 0.0) || !(save_dt > 0.0) {
        return Err(crate::error::invalid("duration must be >= 0 and save step > 0"));
    }
    if !(src.sigma0 > 0.0) {
        return Err(crate::error::invalid("sigma0 must be positive"));
    }
    let used = geom
        .surfaces()
        .into_iter()
        .filter_map(|s| models.get(geom.model_for(s)));
    let dt_max = stability_dt(grid, used, c);
    let substeps = (save_dt / dt_max - 1e-9).ceil().max(1.0) as usize;
    let dt = save_dt / substeps as f64;
    let frames = (duration / save_dt + 1e-9).floor() as usize + 1;

    let solver = Solver::new(grid, geom, models, c, dt)?;
    let p0 = gaussian_ic(grid, src);
    let mut pressures = Array2::zeros((frames, nodes.len()));
    for (k, &n) in nodes.iter().enumerate() {
        pressures[[0, k]] = p0[n];
    }
    if frames > 1 {
        let mut state = solver.start(p0)?;
        for frame in 1..frames {
            while state.step < frame * substeps {
                solver.step(&mut state)?;
            }
            for (k, &n) in nodes.iter().enumerate() {
                pressures[[frame, k]] = state.p_curr[n];
            }
        }
    }
    Ok(SimulationResult {
        times: (0..frames).map(|k| k as f64 * save_dt).collect(),
        nodes: nodes.to_vec(),
        coords: nodes.iter().map(|&n| grid.coord(n)).collect(),
        pressures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid_with_spacing, Aabb};
    use crate::solver::boundary::{RationalAdmittance, RealPole};

    fn room(min: Vec<f64>, max: Vec<f64>) -> RoomGeometry {
        RoomGeometry::empty_box(Aabb::new(min, max).unwrap(), "wall").unwrap()
    }

    fn walls(model: BoundaryModel) -> BTreeMap<String, BoundaryModel> {
        BTreeMap::from([("wall".to_string(), model)])
    }

    fn gauss(x: f64, sigma: f64) -> f64 {
        (-(x / sigma).powi(2)).exp()
    }

    /// Max error against d'Alembert after `t_end` with the given spacing and Courant number.
    fn dalembert_error(dx: f64, courant: f64, t_end: f64) -> f64 {
        let geom = room(vec![-6.0], vec![6.0]);
        let grid = build_grid_with_spacing(&geom, dx).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 1.0 });
        let dt = courant * dx;
        let steps = (t_end / dt).round() as usize;
        let solver = Solver::new(&grid, &geom, &models, 1.0, dt).unwrap();
        let sigma = 0.3;
        let src = SourceSpec { x0: vec![0.0], sigma0: sigma };
        let mut state = solver.start(gaussian_ic(&grid, &src)).unwrap();
        while state.step < steps {
            solver.step(&mut state).unwrap();
        }
        let t = steps as f64 * dt;
        (0..grid.kinds.len())
            .map(|i| {
                let x = grid.coord(i)[0];
                let exact = 0.5 * (gauss(x - t, sigma) + gauss(x + t, sigma));
                (state.p_curr[i] - exact).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gaussian_initial_condition() {
        let geom = room(vec![0.0, 0.0], vec![2.0, 2.0]);
        let grid = build_grid_with_spacing(&geom, 0.25).unwrap();
        let src = SourceSpec { x0: vec![1.0, 1.0], sigma0: 0.5 };
        let p = gaussian_ic(&grid, &src);
        let centre = grid.lattice.index_of(&[1.0, 1.0]).unwrap();
        assert_eq!(p[centre], 1.0);
        let off = grid.lattice.index_of(&[1.5, 1.0]).unwrap();
        assert!((p[off] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((default_sigma0(343.0, 1000.0) - 0.22).abs() < 0.005);
    }

    #[test]
    fn stable_step_rules() {
        let geom = room(vec![0.0], vec![1.14]);
        let grid = build_grid_with_spacing(&geom, 0.057).unwrap();
        let fi = BoundaryModel::FreqIndependent { xi_imp: 5.0 };
        let fd = BoundaryModel::FreqDependent(RationalAdmittance {
            y_inf: 0.1,
            real_poles: vec![],
            complex_pairs: vec![],
        });
        assert!((stability_dt(&grid, [&fi], 1.0) - 0.057).abs() < 1e-15);
        assert!((stability_dt(&grid, [&fi, &fd], 1.0) - 0.0114).abs() < 1e-15);
        let g2 = build_grid_with_spacing(&room(vec![0.0, 0.0], vec![1.0, 1.0]), 0.1).unwrap();
        assert!((stability_dt(&g2, [&fi], 1.0) - 0.1 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn free_field_matches_dalembert_at_unit_courant() {
        let err = dalembert_error(0.01, 1.0, 2.0);
        assert!(err < 1e-10, "max error {err}");
    }

    #[test]
    fn second_order_convergence() {
        let errs: Vec<f64> = [0.04, 0.02, 0.01].iter().map(|&dx| dalembert_error(dx, 0.5, 2.0)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio} from {errs:?}");
        }
    }

    #[test]
    fn matched_impedance_absorbs_in_1d() {
        let geom = room(vec![0.0], vec![4.0]);
        let grid = build_grid_with_spacing(&geom, 0.01).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 1.0 });
        let solver = Solver::new(&grid, &geom, &models, 1.0, 0.01).unwrap();
        let src = SourceSpec { x0: vec![2.0], sigma0: 0.2 };
        let mut state = solver.start(gaussian_ic(&grid, &src)).unwrap();
        while state.step < 400 {
            solver.step(&mut state).unwrap();
        }
        let residual = state.p_curr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Incident half-pulses have amplitude 0.5.
        assert!(residual < 0.01 * 0.5, "residual {residual}");
    }

    /// Conserved leapfrog energy for a rectangle with mirrored walls: trapezoid
    /// weights at walls, staggered-in-time gradient products.
    fn rectangle_energy(grid: &SimulationGrid, prev: &[f64], curr: &[f64], dt: f64) -> f64 {
        let lat = &grid.lattice;
        let strides = lat.strides();
        let axis_w = |m: &[usize], d: usize| if m[d] == 0 || m[d] + 1 == lat.shape[d] { 0.5 } else { 1.0 };
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for i in 0..lat.len() {
            let m = lat.multi_index(i);
            let w: f64 = (0..lat.dims()).map(|d| axis_w(&m, d)).product();
            kinetic += w * ((curr[i] - prev[i]) / dt).powi(2);
            for d in 0..lat.dims() {
                if m[d] + 1 < lat.shape[d] {
                    let j = i + strides[d];
                    let wl: f64 = (0..lat.dims()).filter(|&e| e != d).map(|e| axis_w(&m, e)).product();
                    potential += wl * (curr[j] - curr[i]) * (prev[j] - prev[i]) / lat.spacing.powi(2);
                }
            }
        }
        0.5 * kinetic + 0.5 * potential
    }

    #[test]
    fn rigid_walls_conserve_energy() {
        let geom = room(vec![0.0, 0.0], vec![2.0, 1.5]);
        let grid = build_grid_with_spacing(&geom, 0.05).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 1e12 });
        let dt = stability_dt(&grid, models.values(), 1.0);
        let solver = Solver::new(&grid, &geom, &models, 1.0, dt).unwrap();
        let src = SourceSpec { x0: vec![0.6, 0.5], sigma0: 0.2 };
        let mut state = solver.start(gaussian_ic(&grid, &src)).unwrap();
        let e0 = rectangle_energy(&grid, &state.p_prev, &state.p_curr, dt);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            solver.step(&mut state).unwrap();
            let e = rectangle_energy(&grid, &state.p_prev, &state.p_curr, dt);
            worst = worst.max((e - e0).abs() / e0);
        }
        assert!(worst < 1e-3, "energy drift {worst}");
    }

    #[test]
    fn reciprocity_in_symmetric_room() {
        let geom = room(vec![0.0, 0.0], vec![2.0, 1.2]);
        let grid = build_grid_with_spacing(&geom, 0.05).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 17.98 });
        let a = vec![0.6, 0.55];
        let b = vec![1.4, 0.55];
        let na = grid.lattice.index_of(&a).unwrap();
        let nb = grid.lattice.index_of(&b).unwrap();
        let run = |src: &Vec<f64>, rec: usize| {
            let s = SourceSpec { x0: src.clone(), sigma0: 0.15 };
            simulate_nodes(&grid, &geom, &models, &s, 1.0, 4.0, 0.05, &[rec]).unwrap().series(0)
        };
        let ab = run(&a, nb);
        let ba = run(&b, na);
        let scale = ab.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn rational_wall_without_poles_equals_real_impedance() {
        let geom = room(vec![0.0, 0.0], vec![1.0, 1.0]);
        let grid = build_grid_with_spacing(&geom, 0.05).unwrap();
        let fi = walls(BoundaryModel::FreqIndependent { xi_imp: 3.0 });
        let fd = walls(BoundaryModel::FreqDependent(RationalAdmittance {
            y_inf: 1.0 / 3.0,
            real_poles: vec![],
            complex_pairs: vec![],
        }));
        let dt = stability_dt(&grid, fd.values(), 1.0);
        let src = SourceSpec { x0: vec![0.4, 0.45], sigma0: 0.15 };
        let s1 = Solver::new(&grid, &geom, &fi, 1.0, dt).unwrap();
        let s2 = Solver::new(&grid, &geom, &fd, 1.0, dt).unwrap();
        let mut a = s1.start(gaussian_ic(&grid, &src)).unwrap();
        let mut b = s2.start(gaussian_ic(&grid, &src)).unwrap();
        for _ in 0..300 {
            s1.step(&mut a).unwrap();
            s2.step(&mut b).unwrap();
        }
        for (x, y) in a.p_curr.iter().zip(&b.p_curr) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wall_velocity_spectrum_matches_admittance() {
        // 1D duct: pole wall at x = 0, the pulse reflects and all boundary
        // signals decay, so V(w) / P(w) of the transients is Y(w).
        let model = RationalAdmittance {
            y_inf: 0.2,
            real_poles: vec![RealPole { a: 1.5, lambda: 3.0 }],
            complex_pairs: vec![],
        };
        let geom = RoomGeometry::new(
            Aabb::new(vec![0.0], vec![3.0]).unwrap(),
            vec![],
            BTreeMap::from([
                ("x_min".to_string(), "pole".to_string()),
                ("x_max".to_string(), "open".to_string()),
            ]),
        )
        .unwrap();
        let models = BTreeMap::from([
            ("pole".to_string(), BoundaryModel::FreqDependent(model.clone())),
            ("open".to_string(), BoundaryModel::FreqIndependent { xi_imp: 1.0 }),
        ]);
        let grid = build_grid_with_spacing(&geom, 0.01).unwrap();
        let dt = stability_dt(&grid, models.values(), 1.0);
        let solver = Solver::new(&grid, &geom, &models, 1.0, dt).unwrap();
        let src = SourceSpec { x0: vec![1.0], sigma0: 0.15 };
        let mut state = solver.start(gaussian_ic(&grid, &src)).unwrap();
        let mut p = vec![];
        let mut v = vec![];
        while (state.step as f64) * dt < 30.0 {
            let (node, vel) = solver.link_velocities(&state)[0];
            p.push(state.p_curr[node]);
            v.push(vel);
            solver.step(&mut state).unwrap();
        }
        for omega in [2.0, 5.0, 9.0] {
            let dft = |s: &[f64]| {
                s.iter().enumerate().fold(num_complex::Complex64::new(0.0, 0.0), |acc, (n, x)| {
                    acc + x * num_complex::Complex64::from_polar(1.0, omega * (n + 1) as f64 * dt)
                })
            };
            let measured = dft(&v) / dft(&p);
            let expected = model.eval(omega);
            let rel = (measured - expected).norm() / expected.norm();
            assert!(rel < 0.02, "omega {omega}: {measured} vs {expected}");
        }
    }

    #[test]
    fn zero_duration_returns_initial_condition() {
        let geom = room(vec![0.0, 0.0], vec![1.0, 1.0]);
        let grid = build_grid_with_spacing(&geom, 0.1).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 17.98 });
        let src = SourceSpec { x0: vec![0.5, 0.5], sigma0: 0.2 };
        let res = simulate(&grid, &geom, &models, &src, 1.0, 0.0, 0.1).unwrap();
        assert_eq!(res.times, vec![0.0]);
        let ic = gaussian_ic(&grid, &src);
        for (k, &n) in res.nodes.iter().enumerate() {
            assert_eq!(res.pressures[[0, k]], ic[n]);
        }
        let res = simulate(&grid, &geom, &models, &src, 1.0, 17.15, 0.1715).unwrap();
        assert_eq!(res.times.len(), 101);
    }

    #[test]
    fn unstable_step_is_rejected() {
        let geom = room(vec![0.0, 0.0], vec![1.0, 1.0]);
        let grid = build_grid_with_spacing(&geom, 0.1).unwrap();
        let models = walls(BoundaryModel::FreqIndependent { xi_imp: 2.0 });
        assert!(Solver::new(&grid, &geom, &models, 1.0, 0.1).is_err());
    }
}
