//! Training, validation and test datasets.
//!
//! A dataset directory holds `manifest.json` and one binary file per source
//! position (layout in `docs/dataset-format.md`). All sources of one split
//! share the same mesh nodes and time grid, so a query point is identified by
//! a flat index `time * n_nodes + node`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use half::f16;
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::geometry::{
    build_grid, build_sensor_grid_in, sample_source_positions, Aabb, Lattice, SensorGrid,
};
use crate::solver::{simulate, SourceSpec};

pub const FILE_MAGIC: [u8; 4] = *b"RODS";
pub const FILE_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// Affine map from physical coordinates to the normalised frame:
/// `x_n = (x - center) / factor`, `t_n = t / factor` with `t` in simulation
/// units (metres travelled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub center: Vec<f64>,
    pub factor: f64,
}

impl NormalizationRecord {
    pub fn x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(v, c)| (v - c) / self.factor).collect()
    }

    pub fn x_inv(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(v, c)| v * self.factor + c).collect()
    }

    pub fn t(&self, t_sim: f64) -> f64 {
        t_sim / self.factor
    }

    pub fn t_inv(&self, t_norm: f64) -> f64 {
        t_norm * self.factor
    }
}

/// Maps `bbox` onto `[-1, 1]` along its longest axis.
pub fn normalize(bbox: &Aabb) -> Result<NormalizationRecord> {
    let factor = bbox.max_half_extent();
    if !(factor > 0.0) {
        return Err(crate::error::invalid("cannot normalise a box with zero extent"));
    }
    Ok(NormalizationRecord {
        center: bbox.center(),
        factor,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub file: String,
    pub position: Vec<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scenario: String,
    pub split: Split,
    pub dims: usize,
    pub f_max: f64,
    pub ppw: f64,
    pub c_phys: f64,
    pub sigma0: f64,
    /// Simulation lattice the nodes were taken from.
    pub mesh: Lattice,
    pub n_nodes: usize,
    pub n_times: usize,
    /// Frame interval in simulation time units.
    pub save_dt: f64,
    pub sensors: SensorGrid,
    pub normalization: NormalizationRecord,
    pub sources: Vec<SourceEntry>,
    pub total_rows: usize,
    /// SHA-256 over the solver configuration that produced the data.
    pub solver_hash: String,
}

/// Gaussian input function sampled on the sensor grid.
pub fn input_function(sensors: &SensorGrid, x0: &[f64], sigma0: f64) -> Vec<f64> {
    let src = SourceSpec {
        x0: x0.to_vec(),
        sigma0,
    };
    sensors.sample(|x| src.value_at(x))
}

/// In-memory dataset. Pressures are kept at storage precision (f16 decoded
/// to f32) so stored and loaded data agree exactly.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// `(n_sources, m)` input functions.
    pub inputs: Array2<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Physical node coordinates `(n_nodes, dims)`.
    pub node_coords: Array2<f64>,
    /// Lattice index of each stored node.
    pub node_ids: Vec<usize>,
    /// Per-source `(n_times, n_nodes)` pressures.
    pub pressures: Vec<Array2<f32>>,
}

impl Dataset {
    pub fn n_sources(&self) -> usize {
        self.positions.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.manifest.n_times
    }

    /// Query points per source.
    pub fn points_per_source(&self) -> usize {
        self.n_nodes() * self.n_times()
    }

    pub fn rows(&self) -> usize {
        self.n_sources() * self.points_per_source()
    }

    pub fn sensor_count(&self) -> usize {
        self.inputs.ncols()
    }

    /// Trunk input dimension: spatial dims plus time.
    pub fn coord_dims(&self) -> usize {
        self.manifest.dims + 1
    }

    pub fn time_sim(&self, k: usize) -> f64 {
        k as f64 * self.manifest.save_dt
    }

    /// Normalised `(x.., t)` of query point `q`.
    pub fn trunk_row(&self, q: usize) -> Vec<f64> {
        let (k, n) = (q / self.n_nodes(), q % self.n_nodes());
        let norm = &self.manifest.normalization;
        let mut row = norm.x(self.node_coords.row(n).as_slice().expect("contiguous"));
        row.push(norm.t(self.time_sim(k)));
        row
    }

    pub fn target(&self, source: usize, q: usize) -> f64 {
        let (k, n) = (q / self.n_nodes(), q % self.n_nodes());
        self.pressures[source][[k, n]] as f64
    }

    /// Keeps only the listed sources (in the given order).
    pub fn subset_sources(&self, keep: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.positions = keep.iter().map(|&s| self.positions[s].clone()).collect();
        out.pressures = keep.iter().map(|&s| self.pressures[s].clone()).collect();
        out.inputs = self.inputs.select(ndarray::Axis(0), keep);
        out.manifest.sources = keep.iter().map(|&s| self.manifest.sources[s].clone()).collect();
        out.refresh_counts();
        out
    }

    /// Keeps only the listed node positions (indices into `node_ids`).
    pub fn subset_nodes(&self, keep: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.node_ids = keep.iter().map(|&n| self.node_ids[n]).collect();
        out.node_coords = self.node_coords.select(ndarray::Axis(0), keep);
        out.pressures = self.pressures.iter().map(|p| p.select(ndarray::Axis(1), keep)).collect();
        out.refresh_counts();
        out
    }

    fn refresh_counts(&mut self) {
        let per = self.points_per_source();
        self.manifest.n_nodes = self.n_nodes();
        for s in &mut self.manifest.sources {
            s.rows = per;
        }
        self.manifest.total_rows = per * self.manifest.sources.len();
    }

    /// Index of the stored node nearest to `p`.
    pub fn nearest_node(&self, p: &[f64]) -> usize {
        let d = |n: usize| -> f64 {
            self.node_coords.row(n).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum()
        };
        (0..self.n_nodes()).min_by(|&a, &b| d(a).total_cmp(&d(b))).expect("non-empty dataset")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))
            .map_err(|e| Error::Format {
                path: mpath.clone(),
                message: e.to_string(),
            })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: mpath,
                message: format!("unsupported manifest version {}", manifest.version),
            });
        }
        let m = manifest.sensors.len();
        let mut inputs = Array2::zeros((manifest.sources.len(), m));
        let mut pressures = Vec::with_capacity(manifest.sources.len());
        let mut positions = Vec::new();
        let mut node_coords = None;
        for (s, entry) in manifest.sources.iter().enumerate() {
            let path = dir.join(&entry.file);
            let rec = read_source_file(&path)?;
            let bad = |message: String| Error::Format {
                path: path.clone(),
                message,
            };
            if rec.u.len() != m || rec.n_nodes != manifest.n_nodes || rec.n_times != manifest.n_times {
                return Err(bad("header disagrees with manifest".into()));
            }
            if rec.n_nodes * rec.n_times != entry.rows {
                return Err(bad(format!("row count {} disagrees with manifest {}", rec.n_nodes * rec.n_times, entry.rows)));
            }
            inputs.row_mut(s).assign(&ArrayView1::from(&rec.u));
            positions.push(rec.position);
            pressures.push(rec.pressures);
            if node_coords.is_none() {
                node_coords = Some(rec.coords);
            }
        }
        if manifest.total_rows != manifest.sources.iter().map(|s| s.rows).sum::<usize>() {
            return Err(Error::Format {
                path: mpath,
                message: "total_rows does not match the per-source counts".into(),
            });
        }
        let node_coords = node_coords.unwrap_or_else(|| Array2::zeros((0, manifest.dims)));
        let node_ids = node_coords
            .rows()
            .into_iter()
            .map(|r| manifest.mesh.nearest_index(r.as_slice().expect("contiguous")))
            .collect();
        Ok(Dataset {
            manifest,
            inputs,
            positions,
            node_coords,
            node_ids,
            pressures,
        })
    }
}

struct SourceRecord {
    position: Vec<f64>,
    u: Vec<f64>,
    n_nodes: usize,
    n_times: usize,
    coords: Array2<f64>,
    pressures: Array2<f32>,
}

fn write_source_file(
    path: &Path,
    position: &[f64],
    u: &[f64],
    coords: &[Vec<f64>],
    times_phys: &[f64],
    pressures: &Array2<f64>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims = position.len();
    w.write_all(&FILE_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&(dims as u16).to_le_bytes())?;
    for n in [u.len(), coords.len(), times_phys.len()] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for x in position {
        w.write_all(&x.to_le_bytes())?;
    }
    for x in u {
        w.write_all(&f16::from_f64(*x).to_le_bytes())?;
    }
    for c in coords {
        for x in c {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    for t in times_phys {
        w.write_all(&(*t as f32).to_le_bytes())?;
    }
    for p in pressures.iter() {
        w.write_all(&f16::from_f64(*p).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_source_file(path: &Path) -> Result<SourceRecord> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated header"))? != FILE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u16().ok_or_else(|| bad("truncated header"))?;
    if version != FILE_VERSION {
        return Err(bad("unsupported file version"));
    }
    let dims = cur.u16().ok_or_else(|| bad("truncated header"))? as usize;
    let m = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let n_nodes = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let n_times = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let expected = 20 + 8 * dims + 2 * m + 4 * n_nodes * dims + 4 * n_times + 2 * n_nodes * n_times;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let position = (0..dims).map(|_| cur.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated"))?;
    let u = (0..m).map(|_| cur.f16()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated"))?;
    let coords = (0..n_nodes * dims).map(|_| cur.f32().map(f64::from)).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated"))?;
    for _ in 0..n_times {
        cur.f32();
    }
    let p = (0..n_nodes * n_times).map(|_| cur.f16().map(|x| x as f32)).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated"))?;
    Ok(SourceRecord {
        position,
        u,
        n_nodes,
        n_times,
        coords: Array2::from_shape_vec((n_nodes, dims), coords).expect("sized above"),
        pressures: Array2::from_shape_vec((n_times, n_nodes), p).expect("sized above"),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn f32(&mut self) -> Option<f32> {
        Some(f32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f16(&mut self) -> Option<f64> {
        Some(f16::from_le_bytes(self.take(2)?.try_into().ok()?).to_f64())
    }
}

/// Source positions and mesh resolution used for a split.
pub fn split_plan(scenario: &Scenario, split: Split) -> Result<(f64, Vec<Vec<f64>>)> {
    let ds = &scenario.dataset;
    let lambda = scenario.wavelength();
    match split {
        Split::Train => Ok((ds.train_ppw, sample_source_positions(&scenario.source_region, ds.train_source_spacing * lambda)?)),
        Split::Val => Ok((ds.val_ppw, sample_source_positions(&scenario.source_region, ds.val_source_spacing * lambda)?)),
        Split::Test => {
            if ds.test_sources.is_empty() {
                return Err(Error::InsufficientData("scenario lists no test sources".into()));
            }
            Ok((ds.val_ppw, ds.test_sources.clone()))
        }
    }
}

pub fn sensor_grid(scenario: &Scenario) -> Result<SensorGrid> {
    build_sensor_grid_in(
        &scenario.geometry,
        &scenario.frame,
        scenario.medium.c_phys / (2.0 * scenario.dataset.f_max),
    )
}

/// Simulates every source of `split` and writes the dataset to `out`.
pub fn generate(scenario: &Scenario, split: Split, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let (ppw, positions) = split_plan(scenario, split)?;
    let grid = build_grid(&scenario.geometry, scenario.f_max_sim(), ppw, scenario.medium.c)?;
    let sensors = sensor_grid(scenario)?;
    let normalization = normalize(&scenario.frame)?;
    let models = scenario.sim_boundaries();
    let sigma0 = scenario.sigma0();
    let save_dt = scenario.save_dt_sim();
    let duration = save_dt * (scenario.dataset.frames - 1) as f64;
    let solver_hash = solver_hash(scenario, grid.spacing(), ppw)?;

    let jobs: Vec<(usize, Vec<f64>)> = positions.into_iter().enumerate().collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let results: Vec<Result<SourceEntry>> = thread::scope(|scope| {
        let chunks: Vec<_> = jobs.chunks(jobs.len().div_ceil(workers).max(1)).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let (grid, sensors, models) = (&grid, &sensors, &models);
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(i, x0)| {
                            let src = SourceSpec {
                                x0: x0.clone(),
                                sigma0,
                            };
                            let res = simulate(grid, &scenario.geometry, models, &src, scenario.medium.c, duration, save_dt)?;
                            let times_phys: Vec<f64> = res.times.iter().map(|&t| scenario.medium.to_phys_time(t)).collect();
                            let u = input_function(sensors, x0, sigma0);
                            let file = format!("source_{i:05}.bin");
                            write_source_file(&out.join(&file), x0, &u, &res.coords, &times_phys, &res.pressures)?;
                            Ok(SourceEntry {
                                file,
                                position: x0.clone(),
                                rows: res.pressures.len(),
                            })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generation worker panicked")).collect()
    });
    let sources = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scenario: scenario.name.clone(),
        split,
        dims: scenario.geometry.dims,
        f_max: scenario.dataset.f_max,
        ppw,
        c_phys: scenario.medium.c_phys,
        sigma0,
        mesh: grid.lattice.clone(),
        n_nodes: grid.fluid_nodes().len(),
        n_times: scenario.dataset.frames,
        save_dt,
        sensors,
        normalization,
        total_rows: sources.iter().map(|s| s.rows).sum(),
        sources,
        solver_hash,
    };
    let f = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    log::info!(
        "{} split: {} sources, {} rows written to {}",
        split.name(),
        manifest.sources.len(),
        manifest.total_rows,
        out.display()
    );
    Ok(manifest)
}

fn solver_hash(scenario: &Scenario, dx: f64, ppw: f64) -> Result<String> {
    let desc = serde_json::json!({
        "geometry": scenario.geometry,
        "boundaries": scenario.boundaries,
        "medium": scenario.medium,
        "dataset": scenario.dataset,
        "frame": scenario.frame,
        "dx": dx,
        "ppw": ppw,
    });
    let digest = Sha256::digest(serde_json::to_vec(&desc)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Fraction of nodes in `b` that coincide (within `tol`) with a node of `a`.
pub fn node_overlap(a: &Dataset, b: &Dataset, tol: f64) -> f64 {
    if b.n_nodes() == 0 {
        return 0.0;
    }
    let shared = (0..b.n_nodes())
        .filter(|&j| {
            let p = b.node_coords.row(j);
            let i = a.nearest_node(p.as_slice().expect("contiguous"));
            a.node_coords.row(i).iter().zip(p.iter()).all(|(x, y)| (x - y).abs() <= tol)
        })
        .count();
    shared as f64 / b.n_nodes() as f64
}

/// One training batch: `n` sources times `q` query points each.
///
/// Row `r` belongs to source `sources[r / q]`; its branch input is
/// `branch.row(r / q)`. [`MiniBatch::branch_rows`] expands to the
/// `(n q, m)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub q: usize,
    pub sources: Vec<usize>,
    /// `(n, m)` unique input functions.
    pub branch: Array2<f64>,
    /// `(n q, D)` normalised query coordinates.
    pub trunk: Array2<f64>,
    /// `(n q, 1)` target pressures.
    pub target: Array2<f64>,
    /// Self-adaptive weight slot of each row: `source * points_per_source + point`.
    pub sa_index: Vec<usize>,
}

impl MiniBatch {
    pub fn rows(&self) -> usize {
        self.trunk.nrows()
    }

    pub fn branch_rows(&self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.rows()).map(|r| r / self.q).collect();
        self.branch.select(ndarray::Axis(0), &idx)
    }
}

/// Deterministic generator for `(seed, iteration)`.
pub fn batch_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Samples `n` distinct sources and `q` distinct query points for each.
pub fn assemble_minibatch(data: &Dataset, n: usize, q: usize, rng: &mut ChaCha8Rng) -> Result<MiniBatch> {
    let per = data.points_per_source();
    if n == 0 || q == 0 {
        return Err(crate::error::invalid("batch sizes must be positive"));
    }
    if n > data.n_sources() || q > per {
        return Err(Error::InsufficientData(format!(
            "batch needs {n} sources x {q} points, dataset has {} x {per}",
            data.n_sources()
        )));
    }
    let sources = rand::seq::index::sample(rng, data.n_sources(), n).into_vec();
    let dcoord = data.coord_dims();
    let mut trunk = Array2::zeros((n * q, dcoord));
    let mut target = Array2::zeros((n * q, 1));
    let mut sa_index = Vec::with_capacity(n * q);
    for (i, &s) in sources.iter().enumerate() {
        let points = rand::seq::index::sample(rng, per, q);
        for (j, pt) in points.into_iter().enumerate() {
            let r = i * q + j;
            trunk.row_mut(r).assign(&ArrayView1::from(&data.trunk_row(pt)));
            target[[r, 0]] = data.target(s, pt);
            sa_index.push(s * per + pt);
        }
    }
    Ok(MiniBatch {
        q,
        branch: data.inputs.select(ndarray::Axis(0), &sources),
        sources,
        trunk,
        target,
        sa_index,
    })
}

/// Every query point of one source, in flat order.
pub fn full_source_batch(data: &Dataset, source: usize) -> MiniBatch {
    let per = data.points_per_source();
    let mut trunk = Array2::zeros((per, data.coord_dims()));
    let mut target = Array2::zeros((per, 1));
    for pt in 0..per {
        trunk.row_mut(pt).assign(&ArrayView1::from(&data.trunk_row(pt)));
        target[[pt, 0]] = data.target(source, pt);
    }
    MiniBatch {
        q: per,
        sources: vec![source],
        branch: data.inputs.select(ndarray::Axis(0), &[source]),
        trunk,
        target,
        sa_index: (source * per..(source + 1) * per).collect(),
    }
}

/// Background batch producer for iterations `start..end`. Batches arrive in
/// iteration order; at most one is buffered ahead of the consumer.
pub struct Prefetcher {
    rx: mpsc::Receiver<Result<MiniBatch>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(data: std::sync::Arc<Dataset>, n: usize, q: usize, seed: u64, start: u64, end: u64) -> Self {
        let (tx, rx) = mpsc::sync_channel(1);
        let handle = thread::spawn(move || {
            for it in start..end {
                let batch = assemble_minibatch(&data, n, q, &mut batch_rng(seed, it));
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&self) -> Option<Result<MiniBatch>> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_tx, rx) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Standard directory names under a dataset root.
pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}
