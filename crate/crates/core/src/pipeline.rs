//! End-to-end steps shared by the command-line tool, the acceptance run and
//! the benchmarks: dataset generation, model construction from scenario
//! settings, decomposition, transfer and loading trained models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{ModelSettings, Scenario, TrainingSettings};
use crate::dataset::{generate, split_dir, Dataset, Manifest, Split};
use crate::deeponet::{
    load_checkpoint, train, DeepONet, FreezeSpec, LogRow, ModelConfig, ModelMeta, TrainConfig, TrainState,
};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, SensorGrid};
use crate::nn::{AdamConfig, FourierEncoding, InitConfig};
use crate::specialization::{partition_dataset, remap_sensors, transfer_init, Ensemble, Member, Partitioning};

/// Generates the train, validation and (if the scenario lists test
/// sources) test splits under `root`.
pub fn generate_all(scenario: &Scenario, root: &Path) -> Result<Vec<Manifest>> {
    let mut out = vec![
        generate(scenario, Split::Train, split_dir(root, Split::Train))?,
        generate(scenario, Split::Val, split_dir(root, Split::Val))?,
    ];
    if !scenario.dataset.test_sources.is_empty() {
        out.push(generate(scenario, Split::Test, split_dir(root, Split::Test))?);
    }
    Ok(out)
}

/// Loaded splits; validation and test are optional.
pub struct Splits {
    pub train: Arc<Dataset>,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

pub fn load_splits(root: &Path) -> Result<Splits> {
    let optional = |s: Split| -> Result<Option<Dataset>> {
        let dir = split_dir(root, s);
        if dir.join("manifest.json").exists() {
            Dataset::load(dir).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(Splits {
        train: Arc::new(Dataset::load(split_dir(root, Split::Train))?),
        val: optional(Split::Val)?,
        test: optional(Split::Test)?,
    })
}

/// Network configuration for `data`; encoding frequencies scale with the
/// shortest wavelength expressed in normalised units.
pub fn model_config(settings: &ModelSettings, data: &Dataset) -> ModelConfig {
    let m = &data.manifest;
    let per_unit = m.f_max / m.c_phys * m.normalization.factor;
    ModelConfig {
        sensors: data.sensor_count(),
        coord_dims: data.coord_dims(),
        branch_width: settings.branch_width,
        branch_layers: settings.branch_layers,
        trunk_width: settings.trunk_width,
        trunk_layers: settings.trunk_layers,
        latent: settings.latent,
        encoding: FourierEncoding {
            frequencies: settings.encoding_ratios.iter().map(|r| r * per_unit).collect(),
        },
        init: InitConfig {
            k_first: settings.k_first,
            k_hidden: settings.k_hidden,
            w0: settings.w0,
            hidden_scale: settings.hidden_scale,
        },
    }
}

pub fn model_meta(scenario: &Scenario, data: &Dataset, partition: Option<Aabb>) -> ModelMeta {
    let m = &data.manifest;
    ModelMeta {
        scenario: scenario.name.clone(),
        geometry: scenario.geometry.clone(),
        source_region: scenario.source_region.clone(),
        sensors: m.sensors.clone(),
        normalization: m.normalization.clone(),
        sigma0: m.sigma0,
        c_phys: m.c_phys,
        f_max: m.f_max,
        partition,
    }
}

pub fn train_config(t: &TrainingSettings) -> TrainConfig {
    TrainConfig {
        n: t.n,
        q: t.q,
        iterations: t.iterations,
        eval_every: t.eval_every,
        checkpoint_every: t.checkpoint_every,
        seed: t.seed,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        self_adaptive: t.self_adaptive,
        ..TrainConfig::default()
    }
}

/// Untrained state for `data`, initialised from `seed`.
pub fn fresh_state(scenario: &Scenario, data: &Dataset, seed: u64, partition: Option<Aabb>) -> TrainState {
    let model = DeepONet::init(model_config(&scenario.model, data), seed);
    let cfg = TrainConfig::default();
    TrainState::new(model, model_meta(scenario, data, partition), data.rows(), cfg.sa_max)
}

/// Trains one model on the full domain.
pub fn train_full(scenario: &Scenario, splits: &Splits, cfg: &TrainConfig, out: Option<&Path>) -> Result<(TrainState, Vec<LogRow>)> {
    let mut state = fresh_state(scenario, &splits.train, cfg.seed, None);
    let log = train(&mut state, splits.train.clone(), splits.val.as_ref(), cfg, out)?;
    Ok((state, log))
}

pub fn partition_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("partition_{k}"))
}

/// Trains one model per partition box, each on its share of the training
/// and validation nodes. Results go to `out/partition_<k>/`.
pub fn train_partitions(
    scenario: &Scenario,
    splits: &Splits,
    part: &Partitioning,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<(TrainState, Vec<LogRow>)>> {
    let trains = partition_dataset(&splits.train, part)?;
    let vals = match &splits.val {
        Some(v) => partition_dataset(v, part)?.into_iter().map(Some).collect(),
        None => vec![None; part.len()],
    };
    trains
        .into_iter()
        .zip(vals)
        .enumerate()
        .map(|(k, (t, v))| {
            let t = Arc::new(t);
            let mut state = fresh_state(scenario, &t, cfg.seed, Some(part.boxes[k].clone()));
            let dir = out.map(|o| partition_dir(o, k));
            let log = train(&mut state, t, v.as_ref(), cfg, dir.as_deref())?;
            Ok((state, log))
        })
        .collect()
}

/// Re-expresses `data`'s input functions on the sensor lattice of a trained
/// model, keeping the data's geometry for ghost sensors.
pub fn align_inputs(data: &Dataset, model_sensors: &SensorGrid) -> Result<(Dataset, SensorGrid)> {
    let own = &data.manifest.sensors;
    if own.lattice == model_sensors.lattice {
        return Ok((data.clone(), own.clone()));
    }
    let coords = (0..model_sensors.len()).map(|i| model_sensors.lattice.coord(i));
    let mut ghost = Vec::with_capacity(model_sensors.len());
    for p in coords {
        ghost.push(match own.lattice.index_of(&p) {
            Some(j) => own.ghost[j],
            None => true,
        });
    }
    let grid = SensorGrid {
        lattice: model_sensors.lattice.clone(),
        ghost,
    };
    let mut out = data.clone();
    let mut inputs = ndarray::Array2::zeros((data.n_sources(), grid.len()));
    for s in 0..data.n_sources() {
        let row = remap_sensors(data.inputs.row(s).as_slice().expect("contiguous"), own, &grid)?;
        inputs.row_mut(s).assign(&ndarray::ArrayView1::from(&row));
    }
    out.inputs = inputs;
    out.manifest.sensors = grid.clone();
    Ok((out, grid))
}

/// Starts a target-geometry training run from a trained source state.
/// Returns the new state and the training data aligned to the model's
/// sensor lattice.
pub fn transfer_state(source: &TrainState, target: &Scenario, data: &Dataset, freeze: FreezeSpec) -> Result<(TrainState, Dataset)> {
    let (aligned, grid) = align_inputs(data, &source.meta.sensors)?;
    if aligned.manifest.normalization != source.meta.normalization {
        log::warn!(
            "target normalisation {:?} differs from the source model's {:?}; use a shared frame box",
            aligned.manifest.normalization,
            source.meta.normalization
        );
    }
    let model = transfer_init(&source.model, aligned.sensor_count(), aligned.coord_dims(), &freeze)?;
    let mut meta = model_meta(target, &aligned, None);
    meta.sensors = grid;
    let mut state = TrainState::new(model, meta, aligned.rows(), source.sa.max);
    state.freeze = freeze;
    Ok((state, aligned))
}

/// Loads a checkpoint file, a training directory holding `final.bin`, or a
/// decomposition directory holding `partition_<k>/final.bin`.
pub fn load_ensemble(path: &Path) -> Result<Ensemble> {
    if path.is_file() {
        let s = load_checkpoint(path)?;
        return Ok(Ensemble::single(s.model, s.meta));
    }
    if path.join("final.bin").is_file() {
        return load_ensemble(&path.join("final.bin"));
    }
    let mut members = Vec::new();
    while partition_dir(path, members.len()).join("final.bin").is_file() {
        let s = load_checkpoint(&partition_dir(path, members.len()).join("final.bin"))?;
        members.push(Member {
            model: s.model,
            meta: s.meta,
        });
    }
    if members.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no checkpoint, final.bin or partition_<k>/final.bin found".into(),
        });
    }
    Ensemble::partitioned(members)
}
