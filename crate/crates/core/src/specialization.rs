//! Domain decomposition into per-partition models and transfer learning
//! between geometries.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::deeponet::{DeepONet, FreezeSpec, ModelMeta};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, SensorGrid};

/// Tolerance used when testing whether a point lies in a partition box.
pub const PARTITION_TOL: f64 = 1e-6;

/// Non-overlapping boxes covering the domain. A point on a shared face
/// belongs to the lowest-index box containing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partitioning {
    pub boxes: Vec<Aabb>,
}

impl Partitioning {
    pub fn new(boxes: Vec<Aabb>) -> Result<Self> {
        let Some(first) = boxes.first() else {
            return Err(crate::error::invalid("partitioning needs at least one box"));
        };
        let dims = first.dims();
        for (i, b) in boxes.iter().enumerate() {
            if b.dims() != dims {
                return Err(crate::error::invalid(format!("partition {i} has dimension {}, expected {dims}", b.dims())));
            }
            for (j, other) in boxes.iter().enumerate().skip(i + 1) {
                if b.interiors_overlap(other) {
                    return Err(crate::error::invalid(format!("partitions {i} and {j} overlap")));
                }
            }
        }
        Ok(Self { boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        self.boxes.iter().position(|b| b.contains(p, PARTITION_TOL))
    }

    /// Partitions whose box lies within `radius` of `p`, in index order.
    pub fn near(&self, p: &[f64], radius: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| {
                let b = &self.boxes[k];
                let d2: f64 = p
                    .iter()
                    .enumerate()
                    .map(|(d, &x)| (b.min[d] - x).max(x - b.max[d]).max(0.0).powi(2))
                    .sum();
                d2.sqrt() <= radius + PARTITION_TOL
            })
            .collect()
    }
}

/// Splits `data` by node position. Every sub-dataset keeps all sources and
/// all time samples.
pub fn partition_dataset(data: &Dataset, part: &Partitioning) -> Result<Vec<Dataset>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); part.len()];
    for n in 0..data.n_nodes() {
        let p: Vec<f64> = data.node_coords.row(n).to_vec();
        match part.locate(&p) {
            Some(k) => members[k].push(n),
            None => return Err(Error::Uncovered { point: p }),
        }
    }
    Ok(members.iter().map(|keep| data.subset_nodes(keep)).collect())
}

/// A trained model together with its input conventions.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub model: DeepONet,
    pub meta: ModelMeta,
}

/// One model per partition (or a single model with no partitioning).
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub partitioning: Option<Partitioning>,
    /// If set, points within this distance of a neighbouring partition use
    /// the mean of all nearby models.
    pub blend: Option<f64>,
}

impl Ensemble {
    pub fn single(model: DeepONet, meta: ModelMeta) -> Self {
        Self {
            members: vec![Member { model, meta }],
            partitioning: None,
            blend: None,
        }
    }

    /// Builds an ensemble from partition models; each must carry its box.
    pub fn partitioned(members: Vec<Member>) -> Result<Self> {
        let boxes = members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.meta
                    .partition
                    .clone()
                    .ok_or_else(|| crate::error::invalid(format!("member {i} has no partition box")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            partitioning: Some(Partitioning::new(boxes)?),
            blend: None,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.members[0].meta
    }

    /// Members evaluated for a receiver at `p`.
    pub fn route(&self, p: &[f64]) -> Result<Vec<usize>> {
        let Some(part) = &self.partitioning else {
            return Ok(vec![0]);
        };
        let own = part.locate(p).ok_or_else(|| Error::Uncovered { point: p.to_vec() })?;
        match self.blend {
            Some(r) => Ok(part.near(p, r)),
            None => Ok(vec![own]),
        }
    }
}

/// Maps input-function values between sensor grids with equal spacing on
/// a shared anchor. Target sensors with a counterpart keep its value; the
/// rest, and ghost sensors of the target, are zero.
pub fn remap_sensors(values: &[f64], source: &SensorGrid, target: &SensorGrid) -> Result<Vec<f64>> {
    if values.len() != source.len() {
        return Err(Error::ShapeMismatch {
            what: "input function".into(),
            expected: source.len(),
            got: values.len(),
        });
    }
    let (hs, ht) = (source.lattice.spacing, target.lattice.spacing);
    if (hs - ht).abs() > 1e-9 * hs.max(ht) {
        return Err(crate::error::invalid(format!("incompatible sensor spacings {hs} and {ht}")));
    }
    if source.lattice.dims() != target.lattice.dims() {
        return Err(crate::error::invalid("sensor grids differ in dimension"));
    }
    for (a, b) in source.lattice.origin.iter().zip(&target.lattice.origin) {
        let cells = (b - a) / hs;
        if (cells - cells.round()).abs() > 1e-6 {
            return Err(crate::error::invalid("sensor grids are not aligned to a common anchor"));
        }
    }
    Ok((0..target.len())
        .map(|i| {
            if target.ghost[i] {
                return 0.0;
            }
            match source.lattice.index_of(&target.lattice.coord(i)) {
                Some(j) if !source.ghost[j] => values[j],
                _ => 0.0,
            }
        })
        .collect())
}

/// Copies `source` as the starting point for a target geometry and checks
/// that `freeze` is valid for it.
pub fn transfer_init(source: &DeepONet, target_sensors: usize, target_coord_dims: usize, freeze: &FreezeSpec) -> Result<DeepONet> {
    if source.config.sensors != target_sensors {
        return Err(Error::ShapeMismatch {
            what: "branch input width".into(),
            expected: source.config.sensors,
            got: target_sensors,
        });
    }
    if source.config.coord_dims != target_coord_dims {
        return Err(Error::ShapeMismatch {
            what: "trunk input width".into(),
            expected: source.config.coord_dims,
            got: target_coord_dims,
        });
    }
    freeze.mask(source)?;
    Ok(source.clone())
}

/// Sorted random subset of `fraction` of `n` source indices.
pub fn subsample_sources(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(crate::error::invalid(format!("source fraction {fraction} not in (0, 1]")));
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, n, k).into_vec();
    keep.sort_unstable();
    Ok(keep)
}
