//! Room geometries, simulation lattices, and the bounding-box sensor grid.
//!
//! Rooms are axis-aligned boxes with optional axis-aligned solid obstacles.
//! A point belongs to the fluid if it lies in the closure of the open outer
//! box minus the closed obstacles, so obstacle faces that touch the fluid are
//! fluid points while faces buried against a wall are not.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Aabb {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || !(1..=3).contains(&min.len()) {
            return Err(Error::InvalidGeometry(format!(
                "box corners must have matching dimension 1..=3, got {} and {}",
                min.len(),
                max.len()
            )));
        }
        if min.iter().zip(&max).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "box min {min:?} must not exceed max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn max_half_extent(&self) -> f64 {
        (0..self.dims()).map(|d| 0.5 * self.extent(d)).fold(0.0, f64::max)
    }

    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(x, (a, b))| *x >= a - tol && *x <= b + tol)
    }

    fn contains_open(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(x, (a, b))| *x > *a && *x < *b)
    }

    pub fn contains_box(&self, other: &Aabb, tol: f64) -> bool {
        self.contains(&other.min, tol) && self.contains(&other.max, tol)
    }

    pub fn interiors_overlap(&self, other: &Aabb) -> bool {
        (0..self.dims()).all(|d| self.min[d] < other.max[d] && other.min[d] < self.max[d])
    }

    /// Euclidean distance between two boxes (0 when they touch or overlap).
    pub fn distance_to(&self, other: &Aabb) -> f64 {
        (0..self.dims())
            .map(|d| {
                let gap = (other.min[d] - self.max[d]).max(self.min[d] - other.max[d]);
                gap.max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A boundary surface class that carries one boundary-model assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Surface {
    Wall { axis: usize, upper: bool },
    Obstacle(usize),
}

impl Surface {
    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn parse(name: &str) -> Option<Surface> {
        if let Some(idx) = name.strip_prefix("obstacle_") {
            return idx.parse().ok().map(Surface::Obstacle);
        }
        let (axis, side) = name.split_once('_')?;
        let axis = match axis {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return None,
        };
        let upper = match side {
            "min" => false,
            "max" => true,
            _ => return None,
        };
        Some(Surface::Wall { axis, upper })
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Surface::Wall { axis, upper } => {
                let a = ["x", "y", "z"][*axis];
                write!(f, "{a}_{}", if *upper { "max" } else { "min" })
            }
            Surface::Obstacle(i) => write!(f, "obstacle_{i}"),
        }
    }
}

/// Room domain: outer box, solid obstacles, and boundary-model assignment
/// keyed by surface name (`x_min`, ..., `obstacle_0`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomGeometry {
    pub dims: usize,
    pub outer: Aabb,
    pub obstacles: Vec<Aabb>,
    pub boundary_assignment: BTreeMap<String, String>,
}

impl RoomGeometry {
    pub fn new(
        outer: Aabb,
        obstacles: Vec<Aabb>,
        boundary_assignment: BTreeMap<String, String>,
    ) -> Result<Self> {
        let dims = outer.dims();
        if !(1..=3).contains(&dims) {
            return Err(Error::InvalidGeometry(format!("unsupported dimension {dims}")));
        }
        let geom = Self {
            dims,
            outer,
            obstacles,
            boundary_assignment,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Empty box room with every wall mapped to one boundary model.
    pub fn empty_box(outer: Aabb, model: &str) -> Result<Self> {
        Self::uniform(outer, Vec::new(), model)
    }

    /// Room where every surface (walls and obstacles) uses `model`.
    pub fn uniform(outer: Aabb, obstacles: Vec<Aabb>, model: &str) -> Result<Self> {
        let dims = outer.dims();
        let assignment = surfaces_for(dims, obstacles.len())
            .into_iter()
            .map(|s| (s.name(), model.to_string()))
            .collect();
        Self::new(outer, obstacles, assignment)
    }

    fn validate(&self) -> Result<()> {
        for (i, ob) in self.obstacles.iter().enumerate() {
            if ob.dims() != self.dims {
                return Err(Error::InvalidGeometry(format!(
                    "obstacle {i} has dimension {}, room has {}",
                    ob.dims(),
                    self.dims
                )));
            }
            if !self.outer.contains_box(ob, 1e-12) {
                return Err(Error::InvalidGeometry(format!(
                    "obstacle {i} {ob:?} is not inside the outer box"
                )));
            }
            for (j, other) in self.obstacles.iter().enumerate().skip(i + 1) {
                if ob.interiors_overlap(other) {
                    return Err(Error::InvalidGeometry(format!(
                        "obstacles {i} and {j} overlap"
                    )));
                }
            }
        }
        for s in self.surfaces() {
            if !self.boundary_assignment.contains_key(&s.name()) {
                return Err(Error::InvalidGeometry(format!(
                    "surface `{s}` has no boundary model assigned"
                )));
            }
        }
        for key in self.boundary_assignment.keys() {
            match Surface::parse(key) {
                Some(s) if self.surfaces().contains(&s) => {}
                _ => {
                    return Err(Error::InvalidGeometry(format!(
                        "boundary assignment for unknown surface `{key}`"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn surfaces(&self) -> Vec<Surface> {
        surfaces_for(self.dims, self.obstacles.len())
    }

    pub fn model_for(&self, surface: Surface) -> &str {
        self.boundary_assignment
            .get(&surface.name())
            .map(String::as_str)
            .expect("validated geometry assigns every surface")
    }

    pub fn bounding_box(&self) -> &Aabb {
        &self.outer
    }

    fn scale(&self) -> f64 {
        (0..self.dims)
            .map(|d| self.outer.extent(d))
            .fold(0.0, f64::max)
            .max(1e-300)
    }

    /// True if `p` lies in the closed fluid region.
    pub fn is_fluid(&self, p: &[f64]) -> bool {
        let scale = self.scale();
        if !self.outer.contains(p, 1e-9 * scale) {
            return false;
        }
        let eps = 1e-7 * scale;
        let mut probe = vec![0.0; self.dims];
        (0..1usize << self.dims).any(|signs| {
            for (d, q) in probe.iter_mut().enumerate() {
                let s = if signs >> d & 1 == 1 { 1.0 } else { -1.0 };
                *q = p[d] + s * eps;
            }
            self.outer.contains_open(&probe) && !self.obstacles.iter().any(|o| o.contains(&probe, 0.0))
        })
    }

    fn obstacle_at(&self, p: &[f64]) -> Option<usize> {
        let tol = 1e-9 * self.scale();
        self.obstacles.iter().position(|o| o.contains(p, tol))
    }
}

pub fn surfaces_for(dims: usize, n_obstacles: usize) -> Vec<Surface> {
    let mut out: Vec<Surface> = (0..dims)
        .flat_map(|axis| {
            [false, true]
                .into_iter()
                .map(move |upper| Surface::Wall { axis, upper })
        })
        .collect();
    out.extend((0..n_obstacles).map(Surface::Obstacle));
    out
}

/// Sub-box of the interior where sources may be placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRegion {
    #[serde(flatten)]
    pub bounds: Aabb,
}

impl SourceRegion {
    pub fn new(bounds: Aabb) -> Self {
        Self { bounds }
    }

    /// Checks that the region sits inside the fluid with at least `margin`
    /// clearance from every wall and obstacle.
    pub fn validate(&self, geom: &RoomGeometry, margin: f64) -> Result<()> {
        let b = &self.bounds;
        if b.dims() != geom.dims {
            return Err(Error::InvalidGeometry("source region dimension mismatch".into()));
        }
        for d in 0..geom.dims {
            let lo = b.min[d] - geom.outer.min[d];
            let hi = geom.outer.max[d] - b.max[d];
            if lo < margin - 1e-12 || hi < margin - 1e-12 {
                return Err(Error::InvalidGeometry(format!(
                    "source region {b:?} is closer than {margin} to a wall along axis {d}"
                )));
            }
        }
        for (i, ob) in geom.obstacles.iter().enumerate() {
            if b.distance_to(ob) < margin - 1e-12 {
                return Err(Error::InvalidGeometry(format!(
                    "source region is closer than {margin} to obstacle {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.bounds.contains(p, 1e-9)
    }
}

/// Uniform lattice over `region` at `spacing`, centred inside the region.
///
/// Per-axis count is `floor(extent / spacing + 1)`. A region smaller than the
/// spacing collapses to its centre along that axis.
pub fn sample_source_positions(region: &SourceRegion, spacing: f64) -> Result<Vec<Vec<f64>>> {
    if !(spacing > 0.0) {
        return Err(crate::error::invalid(format!("source spacing must be > 0, got {spacing}")));
    }
    let b = &region.bounds;
    let dims = b.dims();
    let mut axes = Vec::with_capacity(dims);
    for d in 0..dims {
        let ext = b.extent(d);
        let n = (ext / spacing + 1.0 + 1e-9).floor() as usize;
        if ext > 0.0 && ext < spacing {
            log::warn!(
                "source region extent {ext} along axis {d} is smaller than spacing {spacing}; using its centre"
            );
        }
        let offset = 0.5 * (ext - (n - 1) as f64 * spacing);
        axes.push((0..n).map(|i| b.min[d] + offset + i as f64 * spacing).collect::<Vec<_>>());
    }
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Regular lattice in row-major order (last axis varies fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

impl Lattice {
    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims()];
        for d in (0..self.dims().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        for d in (0..self.dims()).rev() {
            out[d] = idx % self.shape[d];
            idx /= self.shape[d];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.shape).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn coord(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .into_iter()
            .zip(&self.origin)
            .map(|(i, o)| o + i as f64 * self.spacing)
            .collect()
    }

    /// Index of the lattice point coinciding with `p` (within 1e-6 spacing).
    pub fn index_of(&self, p: &[f64]) -> Option<usize> {
        let mut multi = Vec::with_capacity(self.dims());
        for d in 0..self.dims() {
            let r = (p[d] - self.origin[d]) / self.spacing;
            let i = r.round();
            if (r - i).abs() > 1e-6 || i < 0.0 || i as usize >= self.shape[d] {
                return None;
            }
            multi.push(i as usize);
        }
        Some(self.flat_index(&multi))
    }

    pub fn nearest_index(&self, p: &[f64]) -> usize {
        let multi: Vec<usize> = (0..self.dims())
            .map(|d| {
                let r = ((p[d] - self.origin[d]) / self.spacing).round();
                r.clamp(0.0, (self.shape[d] - 1) as f64) as usize
            })
            .collect();
        self.flat_index(&multi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    Boundary,
    Exterior,
}

/// A missing stencil neighbour of a boundary node: the face it crosses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryLink {
    pub axis: usize,
    pub upper: bool,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryNode {
    pub index: usize,
    /// Outward unit normal; corner nodes carry the averaged normal of their faces.
    pub normal: Vec<f64>,
    pub links: Vec<BoundaryLink>,
}

/// Collocated finite-difference lattice over a room.
#[derive(Clone, Debug)]
pub struct SimulationGrid {
    pub lattice: Lattice,
    pub kinds: Vec<NodeKind>,
    pub boundary: Vec<BoundaryNode>,
}

impl SimulationGrid {
    pub fn spacing(&self) -> f64 {
        self.lattice.spacing
    }

    pub fn dims(&self) -> usize {
        self.lattice.dims()
    }

    pub fn coord(&self, idx: usize) -> Vec<f64> {
        self.lattice.coord(idx)
    }

    /// Interior and boundary node indices in ascending order.
    pub fn fluid_nodes(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| self.kinds[i] != NodeKind::Exterior)
            .collect()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.kinds.iter().filter(|k| **k == kind).count()
    }

    /// Fluid node closest to `p`.
    pub fn nearest_fluid_node(&self, p: &[f64]) -> Option<usize> {
        let dist = |i: usize| {
            self.coord(i)
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        self.fluid_nodes()
            .into_iter()
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
    }
}

/// Builds the simulation lattice with at least `ppw` points per shortest
/// wavelength: the spacing is the largest value up to `c / (f_max * ppw)`
/// that puts the outer walls on lattice lines (see [`fitted_spacing`]).
pub fn build_grid(geom: &RoomGeometry, f_max: f64, ppw: f64, c: f64) -> Result<SimulationGrid> {
    if !(ppw >= 2.0) {
        return Err(crate::error::invalid(format!("ppw must be >= 2, got {ppw}")));
    }
    if !(f_max > 0.0) || !(c > 0.0) {
        return Err(crate::error::invalid("f_max and c must be positive"));
    }
    build_grid_with_spacing(geom, fitted_spacing(&geom.outer, c / (f_max * ppw)))
}

/// Spacing up to `dx_max` that divides the box extents as evenly as
/// possible. Candidates are `extent / n` for every axis with up to 25% more
/// cells than `dx_max` needs; the one with the smallest worst-axis wall
/// misfit wins, larger spacings first on ties. Equal extents fit exactly.
pub fn fitted_spacing(outer: &Aabb, dx_max: f64) -> f64 {
    let misfit = |dx: f64| {
        (0..outer.dims())
            .map(|d| {
                let e = outer.extent(d);
                (e - (e / dx + 1e-9).floor() * dx) / e
            })
            .fold(0.0, f64::max)
    };
    let mut best = (f64::INFINITY, 0.0);
    for d in 0..outer.dims() {
        let e = outer.extent(d);
        let n0 = (e / dx_max - 1e-9).ceil().max(1.0) as usize;
        for n in n0..=n0 + n0.div_ceil(4) {
            let dx = e / n as f64;
            let m = misfit(dx);
            if m < best.0 - 1e-12 || ((m - best.0).abs() <= 1e-12 && dx > best.1) {
                best = (m, dx);
            }
        }
    }
    best.1
}

/// Builds the lattice with an explicit spacing. The lattice is centred in the
/// outer box; walls that do not fall on a lattice line snap to the outermost
/// node line (at most half a cell on each side).
pub fn build_grid_with_spacing(geom: &RoomGeometry, dx: f64) -> Result<SimulationGrid> {
    if !(dx > 0.0) {
        return Err(crate::error::invalid(format!("grid spacing must be > 0, got {dx}")));
    }
    let dims = geom.dims;
    let mut origin = Vec::with_capacity(dims);
    let mut shape = Vec::with_capacity(dims);
    for d in 0..dims {
        let ext = geom.outer.extent(d);
        if ext < 3.0 * dx {
            return Err(Error::DegenerateGeometry(format!(
                "extent {ext} along axis {d} is thinner than 3 dx = {}",
                3.0 * dx
            )));
        }
        let cells = (ext / dx + 1e-9).floor() as usize;
        origin.push(geom.outer.min[d] + 0.5 * (ext - cells as f64 * dx));
        shape.push(cells + 1);
    }
    let lattice = Lattice {
        origin,
        spacing: dx,
        shape,
    };
    let n = lattice.len();
    let fluid: Vec<bool> = (0..n).map(|i| geom.is_fluid(&lattice.coord(i))).collect();

    let mut kinds = vec![NodeKind::Exterior; n];
    let mut boundary = Vec::new();
    for i in 0..n {
        if !fluid[i] {
            continue;
        }
        let multi = lattice.multi_index(i);
        let here = lattice.coord(i);
        let mut links = Vec::new();
        for d in 0..dims {
            let mut missing = [false; 2];
            for (side, upper) in [false, true].into_iter().enumerate() {
                let neighbour = if upper {
                    (multi[d] + 1 < lattice.shape[d]).then(|| multi[d] + 1)
                } else {
                    multi[d].checked_sub(1)
                };
                let surface = match neighbour {
                    None => Some(Surface::Wall { axis: d, upper }),
                    Some(k) => {
                        let mut m = multi.clone();
                        m[d] = k;
                        let j = lattice.flat_index(&m);
                        let mut mid = here.clone();
                        mid[d] += if upper { 0.5 * dx } else { -0.5 * dx };
                        if fluid[j] && geom.is_fluid(&mid) {
                            None
                        } else {
                            Some(
                                geom.obstacle_at(&mid)
                                    .map(Surface::Obstacle)
                                    .unwrap_or(Surface::Wall { axis: d, upper }),
                            )
                        }
                    }
                };
                if let Some(surface) = surface {
                    missing[side] = true;
                    links.push(BoundaryLink {
                        axis: d,
                        upper,
                        surface,
                    });
                }
            }
            if missing[0] && missing[1] {
                return Err(Error::DegenerateGeometry(format!(
                    "node at {here:?} has no fluid neighbour along axis {d}; feature thinner than the grid"
                )));
            }
        }
        if links.is_empty() {
            kinds[i] = NodeKind::Interior;
        } else {
            kinds[i] = NodeKind::Boundary;
            let mut normal = vec![0.0; dims];
            for l in &links {
                normal[l.axis] += if l.upper { 1.0 } else { -1.0 };
            }
            let norm = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
            normal.iter_mut().for_each(|x| *x /= norm);
            boundary.push(BoundaryNode {
                index: i,
                normal,
                links,
            });
        }
    }
    Ok(SimulationGrid {
        lattice,
        kinds,
        boundary,
    })
}

/// Fixed sample points of the branch-net input function on a bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    pub lattice: Lattice,
    /// Sensors outside the geometry; their value is always zero.
    pub ghost: Vec<bool>,
}

impl SensorGrid {
    pub fn len(&self) -> usize {
        self.ghost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ghost.is_empty()
    }

    pub fn locations(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.lattice.coord(i)).collect()
    }

    pub fn ghost_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.ghost[i]).collect()
    }

    /// Samples `f` at every sensor; ghost sensors get 0.
    pub fn sample(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| if self.ghost[i] { 0.0 } else { f(&self.lattice.coord(i)) })
            .collect()
    }
}

/// Sensor grid at the Nyquist limit (`c / (2 f_max)`) over the geometry's bounding box.
pub fn build_sensor_grid(geom: &RoomGeometry, f_max: f64, c: f64) -> Result<SensorGrid> {
    if !(f_max > 0.0) || !(c > 0.0) {
        return Err(crate::error::invalid("f_max and c must be positive"));
    }
    build_sensor_grid_in(geom, &geom.outer, c / (2.0 * f_max))
}

/// Sensor grid over an explicit box anchored at its minimum corner. Used for
/// transfer targets that reuse a larger source box.
pub fn build_sensor_grid_in(geom: &RoomGeometry, bbox: &Aabb, spacing: f64) -> Result<SensorGrid> {
    if !(spacing > 0.0) {
        return Err(crate::error::invalid("sensor spacing must be positive"));
    }
    let shape = (0..bbox.dims())
        .map(|d| (bbox.extent(d) / spacing + 1e-9).floor() as usize + 1)
        .collect();
    let lattice = Lattice {
        origin: bbox.min.clone(),
        spacing,
        shape,
    };
    let ghost = (0..lattice.len())
        .map(|i| !geom.is_fluid(&lattice.coord(i)))
        .collect();
    Ok(SensorGrid { lattice, ghost })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: f64) -> RoomGeometry {
        RoomGeometry::empty_box(Aabb::new(vec![0.0, 0.0], vec![side, side]).unwrap(), "wall").unwrap()
    }

    #[test]
    fn full_size_grid_spacing() {
        let g = RoomGeometry::empty_box(Aabb::new(vec![0.0; 3], vec![2.0; 3]).unwrap(), "w").unwrap();
        let grid = build_grid(&g, 1000.0, 5.0, 343.0).unwrap();
        assert!((grid.spacing() - 2.0 / 30.0).abs() < 1e-12);
        assert_eq!(grid.lattice.shape, vec![31; 3]);
        let grid = build_grid(&square(2.0), 1.0, 2.0, 1.0).unwrap();
        assert_eq!(grid.spacing(), 0.5);
    }

    #[test]
    fn two_by_two_lattice_has_sixteen_boundary_nodes() {
        let grid = build_grid_with_spacing(&square(2.0), 0.5).unwrap();
        assert_eq!(grid.lattice.shape, vec![5, 5]);
        assert_eq!(grid.count(NodeKind::Boundary), 16);
        assert_eq!(grid.count(NodeKind::Interior), 9);
        assert_eq!(grid.count(NodeKind::Exterior), 0);
        for b in &grid.boundary {
            let n: f64 = b.normal.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let corner = grid.boundary.iter().find(|b| b.index == 0).unwrap();
        assert_eq!(corner.links.len(), 2);
        let s = 0.5f64.sqrt();
        assert!((corner.normal[0] + s).abs() < 1e-12 && (corner.normal[1] + s).abs() < 1e-12);
    }

    #[test]
    fn thin_geometry_is_rejected() {
        let g = RoomGeometry::empty_box(Aabb::new(vec![0.0, 0.0], vec![2.0, 0.2]).unwrap(), "w").unwrap();
        assert!(matches!(
            build_grid_with_spacing(&g, 0.1),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn l_shape_classifies_obstacle_faces() {
        let outer = Aabb::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let block = Aabb::new(vec![1.0, 1.0], vec![2.0, 2.0]).unwrap();
        let g = RoomGeometry::uniform(outer, vec![block], "w").unwrap();
        let grid = build_grid_with_spacing(&g, 0.5).unwrap();
        // 25 lattice nodes, the 2x2 block strictly beyond the re-entrant faces is solid.
        assert_eq!(grid.count(NodeKind::Exterior), 4);
        let reentrant = grid.lattice.index_of(&[1.0, 1.0]).unwrap();
        assert_eq!(grid.kinds[reentrant], NodeKind::Interior);
        let face = grid.lattice.index_of(&[1.5, 1.0]).unwrap();
        let node = grid.boundary.iter().find(|b| b.index == face).unwrap();
        assert_eq!(node.links.len(), 1);
        assert_eq!(node.links[0].surface, Surface::Obstacle(0));
        assert!(node.links[0].upper);
        assert!((node.normal[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn node_kinds_partition_the_lattice() {
        let outer = Aabb::new(vec![0.0, 0.0], vec![3.0, 2.0]).unwrap();
        let blocks = vec![
            Aabb::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap(),
            Aabb::new(vec![2.0, 0.0], vec![3.0, 0.5]).unwrap(),
        ];
        let g = RoomGeometry::uniform(outer, blocks, "w").unwrap();
        let grid = build_grid_with_spacing(&g, 0.125).unwrap();
        let total = grid.count(NodeKind::Interior) + grid.count(NodeKind::Boundary) + grid.count(NodeKind::Exterior);
        assert_eq!(total, grid.lattice.len());
        assert_eq!(grid.count(NodeKind::Boundary), grid.boundary.len());
    }

    #[test]
    fn sensor_grid_ghosts_match_l_shape_layout() {
        let outer = Aabb::new(vec![0.0, 0.0], vec![2.5, 2.5]).unwrap();
        let cutout = Aabb::new(vec![0.0, 1.25], vec![1.25, 2.5]).unwrap();
        let g = RoomGeometry::uniform(outer, vec![cutout], "w").unwrap();
        let sensors = build_sensor_grid_in(&g, &g.outer, 0.5).unwrap();
        assert_eq!(sensors.len(), 36);
        assert_eq!(sensors.ghost_indices(), vec![3, 4, 5, 9, 10, 11, 15, 16, 17]);
    }

    #[test]
    fn sensor_grid_counts() {
        let sensors = build_sensor_grid(&square(2.0), 1.0, 1.0).unwrap();
        assert!(sensors.ghost.iter().all(|g| !g));
        assert_eq!(sensors.len(), 25);
        let g3 = RoomGeometry::empty_box(Aabb::new(vec![0.0; 3], vec![3.0, 3.0, 2.0]).unwrap(), "w").unwrap();
        assert_eq!(build_sensor_grid(&g3, 1000.0, 343.0).unwrap().len(), 3888);
    }

    #[test]
    fn source_lattice_counts() {
        let r = SourceRegion::new(Aabb::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap());
        assert_eq!(sample_source_positions(&r, 0.5).unwrap().len(), 9);
        let point = SourceRegion::new(Aabb::new(vec![0.3, 0.4], vec![0.3, 0.4]).unwrap());
        assert_eq!(sample_source_positions(&point, 0.1).unwrap(), vec![vec![0.3, 0.4]]);
        let small = SourceRegion::new(Aabb::new(vec![0.0, 0.0], vec![0.2, 0.2]).unwrap());
        assert_eq!(sample_source_positions(&small, 0.5).unwrap(), vec![vec![0.1, 0.1]]);
        assert!(sample_source_positions(&r, 0.0).is_err());
    }

    #[test]
    fn source_region_margin() {
        let g = square(2.0);
        let ok = SourceRegion::new(Aabb::new(vec![0.7, 0.7], vec![1.3, 1.3]).unwrap());
        assert!(ok.validate(&g, 0.6).is_ok());
        assert!(ok.validate(&g, 0.8).is_err());
    }

    #[test]
    fn unassigned_surface_is_rejected() {
        let outer = Aabb::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut a = BTreeMap::new();
        a.insert("x_min".to_string(), "w".to_string());
        assert!(RoomGeometry::new(outer, vec![], a).is_err());
    }

    #[test]
    fn walls_fall_on_lattice_lines() {
        for (side, ppw) in [(1.5, 6.0), (1.5, 5.0), (2.0, 6.0), (2.0, 5.0)] {
            let grid = build_grid(&square(side), 500.0, ppw, 343.0).unwrap();
            let dx = grid.spacing();
            assert!(dx <= 343.0 / (500.0 * ppw) + 1e-15);
            assert!(grid.lattice.origin.iter().all(|o| o.abs() < 1e-12));
            let far = grid.lattice.origin[0] + (grid.lattice.shape[0] - 1) as f64 * dx;
            assert!((far - side).abs() < 1e-9, "{side} {ppw}: {far}");
        }
        let rect = Aabb::new(vec![0.0, 0.0], vec![3.0, 2.0]).unwrap();
        assert!((fitted_spacing(&rect, 0.45) - 1.0 / 3.0).abs() < 1e-15);
        let odd = Aabb::new(vec![0.0, 0.0], vec![1.0, 0.37]).unwrap();
        let dx = fitted_spacing(&odd, 0.1);
        assert!(dx <= 0.1);
        let worst = [1.0, 0.37].iter().map(|e| e - (e / dx + 1e-9).floor() * dx).fold(0.0, f64::max);
        assert!(worst <= 0.1 * 0.37 / 0.1 / 4.0, "{dx} {worst}");
    }

    #[test]
    fn halving_fmax_doubles_spacing() {
        let g = square(4.0);
        let a = build_grid(&g, 2.0, 5.0, 1.0).unwrap().spacing();
        let b = build_grid(&g, 1.0, 5.0, 1.0).unwrap().spacing();
        assert_eq!(b, 2.0 * a);
    }
}
