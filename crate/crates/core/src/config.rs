//! Scenario files: geometry, boundary models, source region, dataset
//! sampling, and optional partitions, in TOML. See `docs/config.md`.
//!
//! Every error points at a file, line and column. Syntax and type errors use
//! the parser's position; semantic errors use the position of the section
//! that holds the offending value.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, RoomGeometry, SourceRegion, Surface};
use crate::solver::{
    default_sigma0, BoundaryModel, ComplexPair, MediumParams, RationalAdmittance, RealPole,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    min: Vec<f64>,
    max: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    min: Vec<f64>,
    max: Vec<f64>,
    #[serde(default)]
    obstacles: Vec<RawBox>,
    default_boundary: Option<String>,
    #[serde(default)]
    boundaries: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundary {
    #[serde(rename = "type")]
    kind: String,
    xi_imp: Option<f64>,
    file: Option<PathBuf>,
    y_inf: Option<f64>,
    real_poles: Option<Vec<RealPole>>,
    complex_pairs: Option<Vec<ComplexPair>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    y_inf: f64,
    #[serde(default)]
    real_poles: Vec<RealPole>,
    #[serde(default)]
    complex_pairs: Vec<ComplexPair>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMedium {
    #[serde(default = "default_c_phys")]
    c_phys: f64,
    #[serde(default = "default_rho0")]
    rho0: f64,
}

fn default_c_phys() -> f64 {
    343.0
}

fn default_rho0() -> f64 {
    1.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartitions {
    split: Option<Vec<usize>>,
    boxes: Option<Vec<RawBox>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    medium: Option<Spanned<RawMedium>>,
    geometry: Spanned<RawGeometry>,
    #[serde(default)]
    boundaries: BTreeMap<String, Spanned<RawBoundary>>,
    source_region: Spanned<RawBox>,
    frame: Option<Spanned<RawBox>>,
    dataset: Spanned<DatasetConfig>,
    partitions: Option<Spanned<RawPartitions>>,
    #[serde(default)]
    model: Option<Spanned<ModelSettings>>,
    #[serde(default)]
    training: Option<Spanned<TrainingSettings>>,
}

/// Network architecture. Defaults are the full-size 2D network; desk-scale
/// scenarios override them in a `[model]` section.
#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub branch_width: usize,
    pub branch_layers: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub latent: usize,
    /// Encoding frequencies as fractions of `f_max`.
    pub encoding_ratios: Vec<f64>,
    pub w0: f64,
    pub hidden_scale: f64,
    pub k_first: f64,
    pub k_hidden: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            branch_width: 2048,
            branch_layers: 2,
            trunk_width: 2048,
            trunk_layers: 2,
            latent: 100,
            encoding_ratios: vec![0.5, 0.25, 1.0 / 6.0],
            w0: 30.0,
            hidden_scale: 1.0,
            k_first: 1.0,
            k_hidden: 30.0,
        }
    }
}

/// Optimisation settings; command-line flags override these.
#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSettings {
    pub n: usize,
    pub q: usize,
    pub iterations: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub lr: f64,
    pub self_adaptive: bool,
    pub seed: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            n: 16,
            q: 64,
            iterations: 30_000,
            eval_every: 500,
            checkpoint_every: 5_000,
            lr: 1e-3,
            self_adaptive: true,
            seed: 0,
        }
    }
}

/// Sampling parameters for the generated datasets. Lengths in metres,
/// times in seconds, frequencies in Hz.
#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub f_max: f64,
    #[serde(default = "default_train_ppw")]
    pub train_ppw: f64,
    #[serde(default = "default_val_ppw")]
    pub val_ppw: f64,
    /// Training source spacing in shortest wavelengths.
    #[serde(default = "default_train_spacing")]
    pub train_source_spacing: f64,
    #[serde(default = "default_val_spacing")]
    pub val_source_spacing: f64,
    /// Simulated duration (s).
    pub duration: f64,
    /// Saved frames including t = 0.
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Gaussian width (m); defaults to `c / (pi f_max / 2)`.
    pub sigma0: Option<f64>,
    #[serde(default)]
    pub test_sources: Vec<Vec<f64>>,
    #[serde(default)]
    pub test_receivers: Vec<Vec<f64>>,
}

fn default_train_ppw() -> f64 {
    6.0
}
fn default_val_ppw() -> f64 {
    5.0
}
fn default_train_spacing() -> f64 {
    0.2
}
fn default_val_spacing() -> f64 {
    1.0
}
fn default_frames() -> usize {
    101
}

/// A fully validated scenario in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub medium: MediumParams,
    pub geometry: RoomGeometry,
    /// Boundary models with coefficients per physical second.
    pub boundaries: BTreeMap<String, BoundaryModel>,
    pub source_region: SourceRegion,
    /// Reference box for the sensor grid and coordinate normalisation.
    pub frame: Aabb,
    pub dataset: DatasetConfig,
    pub partitions: Option<Vec<Aabb>>,
    pub model: ModelSettings,
    pub training: TrainingSettings,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Parses scenario text; `path` is used for diagnostics and to resolve
    /// relative coefficient files.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| toml_error(&e, text, path))?;
        let at = |span: Range<usize>, msg: String| config_error(text, path, span.start, msg);

        let medium = match &raw.medium {
            Some(m) => {
                let medium = MediumParams {
                    c: 1.0,
                    c_phys: m.get_ref().c_phys,
                    rho0: m.get_ref().rho0,
                };
                medium.validate().map_err(|e| at(m.span(), e.to_string()))?;
                medium
            }
            None => MediumParams::default(),
        };

        let g = raw.geometry.get_ref();
        let gspan = raw.geometry.span();
        let outer = Aabb::new(g.min.clone(), g.max.clone()).map_err(|e| at(gspan.clone(), e.to_string()))?;
        let mut obstacles = Vec::new();
        for ob in &g.obstacles {
            obstacles.push(Aabb::new(ob.min.clone(), ob.max.clone()).map_err(|e| at(gspan.clone(), e.to_string()))?);
        }
        let mut assignment = BTreeMap::new();
        for s in crate::geometry::surfaces_for(outer.dims(), obstacles.len()) {
            let name = s.name();
            let model = g.boundaries.get(&name).or(g.default_boundary.as_ref()).ok_or_else(|| {
                at(gspan.clone(), format!("surface `{name}` has no boundary model and no default_boundary is set"))
            })?;
            assignment.insert(name, model.clone());
        }
        for key in g.boundaries.keys() {
            if Surface::parse(key).is_none() || !assignment.contains_key(key) {
                return Err(at(gspan.clone(), format!("unknown surface `{key}`")));
            }
        }
        let geometry =
            RoomGeometry::new(outer, obstacles, assignment).map_err(|e| at(gspan.clone(), e.to_string()))?;

        let mut boundaries = BTreeMap::new();
        for (name, rb) in &raw.boundaries {
            let model = boundary_model(rb.get_ref(), path).map_err(|e| match e {
                Error::Config { .. } => e,
                other => at(rb.span(), format!("boundary `{name}`: {other}")),
            })?;
            boundaries.insert(name.clone(), model);
        }
        for model in geometry.boundary_assignment.values() {
            if !boundaries.contains_key(model) {
                return Err(at(gspan.clone(), format!("boundary model `{model}` is not defined")));
            }
        }

        let ds = raw.dataset.get_ref().clone();
        let dspan = raw.dataset.span();
        validate_dataset(&ds, geometry.dims).map_err(|e| at(dspan.clone(), e))?;
        let sigma0 = ds.sigma0.unwrap_or_else(|| default_sigma0(medium.c_phys, ds.f_max));

        let rs = raw.source_region.get_ref();
        let region = SourceRegion::new(
            Aabb::new(rs.min.clone(), rs.max.clone()).map_err(|e| at(raw.source_region.span(), e.to_string()))?,
        );
        region
            .validate(&geometry, sigma0)
            .map_err(|e| at(raw.source_region.span(), e.to_string()))?;
        for (i, p) in ds.test_sources.iter().enumerate() {
            if !region.contains(p) {
                return Err(at(dspan.clone(), format!("test source {i} {p:?} lies outside the source region")));
            }
        }
        for (i, p) in ds.test_receivers.iter().enumerate() {
            if p.len() != geometry.dims || !geometry.is_fluid(p) {
                return Err(at(dspan.clone(), format!("test receiver {i} {p:?} is not inside the room")));
            }
        }

        let frame = match &raw.frame {
            Some(f) => {
                let b = Aabb::new(f.get_ref().min.clone(), f.get_ref().max.clone())
                    .map_err(|e| at(f.span(), e.to_string()))?;
                if b.dims() != geometry.dims || !b.contains_box(&geometry.outer, 1e-12) {
                    return Err(at(f.span(), "frame must enclose the room".to_string()));
                }
                b
            }
            None => geometry.outer.clone(),
        };

        let partitions = match &raw.partitions {
            Some(p) => Some(partition_boxes(p.get_ref(), &geometry.outer).map_err(|e| at(p.span(), e))?),
            None => None,
        };

        let model = raw.model.as_ref().map(|m| m.get_ref().clone()).unwrap_or_default();
        if let Some(m) = &raw.model {
            validate_model(&model).map_err(|e| at(m.span(), e))?;
        }
        let training = raw.training.as_ref().map(|t| t.get_ref().clone()).unwrap_or_default();
        if let Some(t) = &raw.training {
            if training.n == 0 || training.q == 0 || training.eval_every == 0 || !(training.lr > 0.0) {
                return Err(at(t.span(), "n, q, eval_every and lr must be positive".to_string()));
            }
        }

        Ok(Scenario {
            model,
            training,
            name: raw.name.unwrap_or_else(|| {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            }),
            medium,
            geometry,
            boundaries,
            source_region: region,
            frame,
            dataset: ds,
            partitions,
        })
    }

    /// Boundary models converted to simulation time units.
    pub fn sim_boundaries(&self) -> BTreeMap<String, BoundaryModel> {
        let scale = self.medium.c / self.medium.c_phys;
        self.boundaries.iter().map(|(k, m)| (k.clone(), m.rescale_time(scale))).collect()
    }

    pub fn sigma0(&self) -> f64 {
        self.dataset.sigma0.unwrap_or_else(|| default_sigma0(self.medium.c_phys, self.dataset.f_max))
    }

    /// Shortest wavelength (m).
    pub fn wavelength(&self) -> f64 {
        self.medium.c_phys / self.dataset.f_max
    }

    /// Highest frequency in cycles per simulation time unit.
    pub fn f_max_sim(&self) -> f64 {
        self.medium.to_sim_freq(self.dataset.f_max)
    }

    pub fn duration_sim(&self) -> f64 {
        self.medium.to_sim_time(self.dataset.duration)
    }

    /// Interval between saved frames in simulation time units.
    pub fn save_dt_sim(&self) -> f64 {
        if self.dataset.frames <= 1 {
            self.duration_sim().max(1.0)
        } else {
            self.duration_sim() / (self.dataset.frames - 1) as f64
        }
    }
}

fn validate_dataset(ds: &DatasetConfig, dims: usize) -> std::result::Result<(), String> {
    if !(ds.f_max > 0.0) {
        return Err(format!("f_max must be > 0, got {}", ds.f_max));
    }
    if !(ds.train_ppw >= 2.0) || !(ds.val_ppw >= 2.0) {
        return Err("ppw must be >= 2".into());
    }
    if !(ds.train_source_spacing > 0.0) || !(ds.val_source_spacing > 0.0) {
        return Err("source spacings must be > 0".into());
    }
    if !(ds.duration >= 0.0) || ds.frames == 0 {
        return Err("duration must be >= 0 and frames >= 1".into());
    }
    if ds.sigma0.is_some_and(|s| !(s > 0.0)) {
        return Err("sigma0 must be > 0".into());
    }
    if ds.test_sources.iter().chain(&ds.test_receivers).any(|p| p.len() != dims) {
        return Err(format!("test positions must have {dims} coordinates"));
    }
    Ok(())
}

fn validate_model(m: &ModelSettings) -> std::result::Result<(), String> {
    if [m.branch_width, m.branch_layers, m.trunk_width, m.trunk_layers, m.latent].contains(&0) {
        return Err("network widths, depths and latent size must be positive".into());
    }
    if m.encoding_ratios.iter().any(|r| !(*r > 0.0)) {
        return Err("encoding ratios must be positive".into());
    }
    if !(m.w0 > 0.0 && m.hidden_scale > 0.0 && m.k_first > 0.0 && m.k_hidden > 0.0) {
        return Err("w0, hidden_scale, k_first and k_hidden must be positive".into());
    }
    Ok(())
}

fn boundary_model(rb: &RawBoundary, config_path: &Path) -> Result<BoundaryModel> {
    let model = match rb.kind.as_str() {
        "freq_independent" => {
            if rb.file.is_some() || rb.y_inf.is_some() || rb.real_poles.is_some() || rb.complex_pairs.is_some() {
                return Err(crate::error::invalid("freq_independent takes only xi_imp"));
            }
            let xi_imp = rb.xi_imp.ok_or_else(|| crate::error::invalid("missing xi_imp"))?;
            BoundaryModel::FreqIndependent { xi_imp }
        }
        "freq_dependent" => {
            if rb.xi_imp.is_some() {
                return Err(crate::error::invalid("freq_dependent does not take xi_imp"));
            }
            match &rb.file {
                Some(file) => {
                    if rb.y_inf.is_some() || rb.real_poles.is_some() || rb.complex_pairs.is_some() {
                        return Err(crate::error::invalid("give coefficients either inline or via file, not both"));
                    }
                    let full = config_path.parent().unwrap_or(Path::new(".")).join(file);
                    BoundaryModel::FreqDependent(load_coefficients(&full)?)
                }
                None => BoundaryModel::FreqDependent(RationalAdmittance {
                    y_inf: rb.y_inf.ok_or_else(|| crate::error::invalid("missing y_inf"))?,
                    real_poles: rb.real_poles.clone().unwrap_or_default(),
                    complex_pairs: rb.complex_pairs.clone().unwrap_or_default(),
                }),
            }
        }
        other => {
            return Err(crate::error::invalid(format!(
                "unknown boundary type `{other}` (expected freq_independent or freq_dependent)"
            )))
        }
    };
    model.validate()?;
    Ok(model)
}

/// Reads a pole/residue coefficient file (`y_inf`, `[[real_poles]]`,
/// `[[complex_pairs]]`), coefficients per physical second.
pub fn load_coefficients(path: &Path) -> Result<RationalAdmittance> {
    let text = std::fs::read_to_string(path)?;
    let raw: RawCoefficients = toml::from_str(&text).map_err(|e| toml_error(&e, &text, path))?;
    let y = RationalAdmittance {
        y_inf: raw.y_inf,
        real_poles: raw.real_poles,
        complex_pairs: raw.complex_pairs,
    };
    y.validate().map_err(|e| config_error(&text, path, 0, e.to_string()))?;
    Ok(y)
}

fn partition_boxes(p: &RawPartitions, outer: &Aabb) -> std::result::Result<Vec<Aabb>, String> {
    match (&p.split, &p.boxes) {
        (Some(split), None) => {
            if split.len() != outer.dims() || split.contains(&0) {
                return Err(format!("split needs {} positive counts", outer.dims()));
            }
            Ok(split_box(outer, split))
        }
        (None, Some(boxes)) => boxes
            .iter()
            .map(|b| Aabb::new(b.min.clone(), b.max.clone()).map_err(|e| e.to_string()))
            .collect(),
        _ => Err("partitions need exactly one of `split` or `boxes`".into()),
    }
}

/// Splits a box into a regular grid of sub-boxes, first axis slowest.
pub fn split_box(outer: &Aabb, split: &[usize]) -> Vec<Aabb> {
    let total: usize = split.iter().product();
    (0..total)
        .map(|mut k| {
            let mut idx = vec![0; split.len()];
            for d in (0..split.len()).rev() {
                idx[d] = k % split[d];
                k /= split[d];
            }
            let (min, max) = (0..split.len())
                .map(|d| {
                    let w = outer.extent(d) / split[d] as f64;
                    let lo = outer.min[d] + w * idx[d] as f64;
                    let hi = if idx[d] + 1 == split[d] { outer.max[d] } else { lo + w };
                    (lo, hi)
                })
                .unzip();
            Aabb { min, max }
        })
        .collect()
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.chars().count(), |i| before[i + 1..].chars().count()) + 1;
    (line, col)
}

fn config_error(text: &str, path: &Path, offset: usize, message: String) -> Error {
    let (line, column) = line_col(text, offset);
    Error::Config {
        path: path.to_path_buf(),
        line,
        column,
        message,
    }
}

fn toml_error(e: &toml::de::Error, text: &str, path: &Path) -> Error {
    let offset = e.span().map_or(0, |s| s.start);
    config_error(text, path, offset, e.message().trim().to_string())
}
