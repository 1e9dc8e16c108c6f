//! DeepONet: branch and trunk modified MLPs merged by a dot product plus a
//! scalar bias, trained with self-adaptive point weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MiniBatch, NormalizationRecord, Prefetcher};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, RoomGeometry, SensorGrid, SourceRegion};
use crate::nn::{AdamConfig, AdamState, FourierEncoding, InitConfig, MlpShape, ModMlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Branch input width (sensor count).
    pub sensors: usize,
    /// Raw trunk input width (spatial dims + time).
    pub coord_dims: usize,
    pub branch_width: usize,
    pub branch_layers: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub latent: usize,
    pub encoding: FourierEncoding,
    pub init: InitConfig,
}

impl ModelConfig {
    pub fn branch_shape(&self) -> MlpShape {
        MlpShape {
            input: self.sensors,
            width: self.branch_width,
            hidden_layers: self.branch_layers,
            output: self.latent,
        }
    }

    pub fn trunk_shape(&self) -> MlpShape {
        MlpShape {
            input: self.encoding.output_width(self.coord_dims),
            width: self.trunk_width,
            hidden_layers: self.trunk_layers,
            output: self.latent,
        }
    }
}

/// Everything needed to turn physical positions into network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub scenario: String,
    pub geometry: RoomGeometry,
    pub source_region: SourceRegion,
    pub sensors: SensorGrid,
    pub normalization: NormalizationRecord,
    pub sigma0: f64,
    pub c_phys: f64,
    pub f_max: f64,
    /// Spatial box this model is responsible for, if it is one partition.
    pub partition: Option<Aabb>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepONet {
    pub config: ModelConfig,
    pub branch: ModMlp,
    pub trunk: ModMlp,
    pub b0: f64,
}

/// Gradient with the same layout as [`DeepONet`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeepONetGrad {
    pub branch: ModMlp,
    pub trunk: ModMlp,
    pub b0: f64,
}

impl DeepONetGrad {
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.extend(self.branch.blocks().into_iter().map(|(n, b)| (format!("branch.{n}"), b)));
        out.extend(self.trunk.blocks().into_iter().map(|(n, b)| (format!("trunk.{n}"), b)));
        out.push(("b0".into(), std::slice::from_ref(&self.b0)));
        out
    }
}

impl DeepONet {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = ModMlp::init(&config.branch_shape(), &config.init, &mut rng);
        let trunk = ModMlp::init(&config.trunk_shape(), &config.init, &mut rng);
        Self {
            config,
            branch,
            trunk,
            b0: 0.0,
        }
    }

    pub fn zero_grad(&self) -> DeepONetGrad {
        DeepONetGrad {
            branch: self.branch.zeros_like(),
            trunk: self.trunk.zeros_like(),
            b0: 0.0,
        }
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.extend(self.branch.blocks().into_iter().map(|(n, b)| (format!("branch.{n}"), b)));
        out.extend(self.trunk.blocks().into_iter().map(|(n, b)| (format!("trunk.{n}"), b)));
        out.push(("b0".into(), std::slice::from_ref(&self.b0)));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.extend(self.branch.blocks_mut().into_iter().map(|(n, b)| (format!("branch.{n}"), b)));
        out.extend(self.trunk.blocks_mut().into_iter().map(|(n, b)| (format!("trunk.{n}"), b)));
        out.push(("b0".into(), std::slice::from_mut(&mut self.b0)));
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(|(_, b)| b.len()).collect()
    }

    fn check_widths(&self, branch_in: &ArrayView2<f64>, coords: &ArrayView2<f64>) -> Result<()> {
        if branch_in.ncols() != self.config.sensors {
            return Err(Error::ShapeMismatch {
                what: "branch input width".into(),
                expected: self.config.sensors,
                got: branch_in.ncols(),
            });
        }
        if coords.ncols() != self.config.coord_dims {
            return Err(Error::ShapeMismatch {
                what: "trunk coordinate width".into(),
                expected: self.config.coord_dims,
                got: coords.ncols(),
            });
        }
        Ok(())
    }

    fn check(&self, branch_in: &ArrayView2<f64>, coords: &ArrayView2<f64>, group: usize) -> Result<()> {
        self.check_widths(branch_in, coords)?;
        if group == 0 || branch_in.nrows() * group != coords.nrows() {
            return Err(Error::ShapeMismatch {
                what: "query rows".into(),
                expected: branch_in.nrows() * group,
                got: coords.nrows(),
            });
        }
        Ok(())
    }

    /// Predictions for `n` input functions with `group` query rows each:
    /// row `r` pairs `branch_in.row(r / group)` with `coords.row(r)`.
    pub fn forward(&self, branch_in: ArrayView2<f64>, coords: ArrayView2<f64>, group: usize) -> Result<Array1<f64>> {
        self.check(&branch_in, &coords, group)?;
        let b = self.branch.forward(branch_in)?;
        let t = self.trunk.forward(self.config.encoding.encode(coords).view())?;
        Ok(merge(&b, &t, group, self.b0))
    }

    /// Predictions for every pair `(source s, point j)` as an `(n, rows)` matrix.
    pub fn forward_grid(&self, branch_in: ArrayView2<f64>, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_widths(&branch_in, &coords)?;
        let b = self.branch.forward(branch_in)?;
        let t = self.trunk.forward(self.config.encoding.encode(coords).view())?;
        let mut out = b.dot(&t.t());
        out += self.b0;
        Ok(out)
    }

    /// Weighted loss `mean(w r^2)` and its gradients with respect to the
    /// parameters and to the per-row weights.
    pub fn loss_and_grad(&self, batch: &MiniBatch, weights: &[f64]) -> Result<(f64, DeepONetGrad, Vec<f64>)> {
        self.check(&batch.branch.view(), &batch.trunk.view(), batch.q)?;
        let rows = batch.rows();
        if weights.len() != rows {
            return Err(Error::ShapeMismatch {
                what: "loss weights".into(),
                expected: rows,
                got: weights.len(),
            });
        }
        let (b, bcache) = self.branch.forward_cached(batch.branch.view())?;
        let enc = self.config.encoding.encode(batch.trunk.view());
        let (t, tcache) = self.trunk.forward_cached(enc.view())?;
        let pred = merge(&b, &t, batch.q, self.b0);
        let inv = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut dpred = Array1::zeros(rows);
        let mut dweights = vec![0.0; rows];
        for r in 0..rows {
            let res = pred[r] - batch.target[[r, 0]];
            loss += weights[r] * res * res * inv;
            dpred[r] = 2.0 * weights[r] * res * inv;
            dweights[r] = res * res * inv;
        }
        let mut grad = self.zero_grad();
        grad.b0 = dpred.sum();
        let mut dt = Array2::zeros(t.raw_dim());
        let mut db = Array2::zeros(b.raw_dim());
        for r in 0..rows {
            let s = r / batch.q;
            let g = dpred[r];
            Zip::from(dt.row_mut(r)).and(b.row(s)).for_each(|d, &bv| *d = g * bv);
            Zip::from(db.row_mut(s)).and(t.row(r)).for_each(|d, &tv| *d += g * tv);
        }
        self.branch.backward(&bcache, db.view(), &mut grad.branch);
        self.trunk.backward(&tcache, dt.view(), &mut grad.trunk);
        Ok((loss, grad, dweights))
    }
}

fn merge(b: &Array2<f64>, t: &Array2<f64>, group: usize, b0: f64) -> Array1<f64> {
    let mut out = Array1::zeros(t.nrows());
    for (r, row) in t.outer_iter().enumerate() {
        out[r] = row.dot(&b.row(r / group)) + b0;
    }
    out
}

/// Plain mean squared error `mean(r^2)`.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

/// Unweighted MSE over every source and query point of `data`.
pub fn dataset_mse(model: &DeepONet, data: &Dataset) -> Result<f64> {
    let per = data.points_per_source();
    let mut coords = Array2::zeros((per, data.coord_dims()));
    for q in 0..per {
        coords.row_mut(q).assign(&ndarray::ArrayView1::from(&data.trunk_row(q)));
    }
    let mut total = 0.0;
    let chunk = 4096;
    for start in (0..per).step_by(chunk) {
        let end = (start + chunk).min(per);
        let pred = model.forward_grid(data.inputs.view(), coords.slice(ndarray::s![start..end, ..]))?;
        for s in 0..data.n_sources() {
            for q in start..end {
                total += (pred[[s, q - start]] - data.target(s, q)).powi(2);
            }
        }
    }
    Ok(total / data.rows().max(1) as f64)
}

/// Layers excluded from optimisation. Names are `branch.<layer>` or
/// `trunk.<layer>` with layer one of `enc_u`, `enc_v`, `hidden<i>`, `out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub frozen: Vec<String>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Trunk: first hidden layer and encoders frozen. Branch: everything
    /// except the output layer frozen.
    pub fn early(model: &DeepONet) -> Self {
        let mut frozen: Vec<String> = ["trunk.enc_u", "trunk.enc_v", "trunk.hidden0", "branch.enc_u", "branch.enc_v"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        frozen.extend((0..model.branch.hidden.len()).map(|i| format!("branch.hidden{i}")));
        Self { frozen }
    }

    pub fn preset(name: &str, model: &DeepONet) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "early" => Ok(Self::early(model)),
            other => Err(crate::error::invalid(format!("unknown freeze preset `{other}` (expected none or early)"))),
        }
    }

    pub fn is_frozen(&self, block: &str) -> bool {
        self.frozen
            .iter()
            .any(|l| block.strip_prefix(l.as_str()).is_some_and(|rest| rest.starts_with('.')))
    }

    pub fn mask(&self, model: &DeepONet) -> Result<Vec<bool>> {
        let mask: Vec<bool> = model.blocks().iter().map(|(n, _)| !self.is_frozen(n)).collect();
        for layer in &self.frozen {
            if !model.blocks().iter().any(|(n, _)| n.starts_with(&format!("{layer}."))) {
                return Err(crate::error::invalid(format!("freeze spec names unknown layer `{layer}`")));
            }
        }
        if !mask.iter().any(|&t| t) {
            return Err(crate::error::invalid("freeze spec leaves nothing trainable"));
        }
        Ok(mask)
    }
}

/// Per-point loss weights with their own ADAM state, updated by ascent
/// and clamped to `[0, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAdaptiveWeights {
    pub weights: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub max: f64,
}

impl SelfAdaptiveWeights {
    pub fn new(len: usize, max: f64) -> Self {
        Self {
            weights: vec![1.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            max,
        }
    }

    pub fn gather(&self, index: &[usize]) -> Vec<f64> {
        index.iter().map(|&i| self.weights[i]).collect()
    }

    /// Ascent step on the rows of one batch; untouched entries keep their
    /// weights and moments.
    pub fn ascend(&mut self, cfg: &AdamConfig, index: &[usize], grad: &[f64]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: "self_adaptive".into(),
            });
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.step as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.step as f64);
        for (&i, &g) in index.iter().zip(grad) {
            let g = if cfg.clip > 0.0 { g.clamp(-cfg.clip, cfg.clip) } else { g };
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let w = self.weights[i] + lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
            self.weights[i] = w.clamp(0.0, self.max);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Input functions per batch.
    pub n: usize,
    /// Query points per input function.
    pub q: usize,
    pub iterations: u64,
    pub eval_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub self_adaptive: bool,
    /// Self-adaptive learning rate as a fraction of the network rate.
    pub sa_lr_ratio: f64,
    pub sa_max: f64,
    /// Stop at the first evaluation whose validation loss is at or below this.
    #[serde(default)]
    pub stop_at_val: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 16,
            q: 64,
            iterations: 30_000,
            eval_every: 500,
            checkpoint_every: 0,
            seed: 0,
            adam: AdamConfig::default(),
            self_adaptive: true,
            sa_lr_ratio: 0.01,
            sa_max: 1000.0,
            stop_at_val: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 {
            return Err(crate::error::invalid("batch sizes n and q must be positive"));
        }
        if self.eval_every == 0 {
            return Err(crate::error::invalid("validation cadence must be positive"));
        }
        Ok(())
    }

    pub fn sa_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam.lr * self.sa_lr_ratio,
            ..self.adam
        }
    }
}

/// Model plus everything the optimiser carries between iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: DeepONet,
    pub meta: ModelMeta,
    pub adam: AdamState,
    pub sa: SelfAdaptiveWeights,
    pub freeze: FreezeSpec,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: DeepONet, meta: ModelMeta, sa_len: usize, sa_max: f64) -> Self {
        let adam = AdamState::new(&model.block_sizes());
        Self {
            model,
            meta,
            adam,
            sa: SelfAdaptiveWeights::new(sa_len, sa_max),
            freeze: FreezeSpec::none(),
            iteration: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub mse: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Descent on the network, ascent on the self-adaptive weights.
pub fn train_step(state: &mut TrainState, batch: &MiniBatch, cfg: &TrainConfig) -> Result<StepMetrics> {
    let weights = if cfg.self_adaptive {
        state.sa.gather(&batch.sa_index)
    } else {
        vec![1.0; batch.rows()]
    };
    let (loss, grad, dweights) = state.model.loss_and_grad(batch, &weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            detail: format!("loss {loss} on batch with sources {:?}", batch.sources),
        });
    }
    let mse = dweights.iter().sum::<f64>();
    let mask = state.freeze.mask(&state.model)?;
    let gblocks = grad.blocks();
    let grad_norm = gblocks.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    let gslices: Vec<&[f64]> = gblocks.iter().map(|(_, g)| *g).collect();
    let lr = state.adam.step(&cfg.adam, &mut state.model.blocks_mut(), &gslices, &mask)?;
    if cfg.self_adaptive {
        state.sa.ascend(&cfg.sa_adam(), &batch.sa_index, &dweights)?;
    }
    state.iteration += 1;
    Ok(StepMetrics {
        loss,
        mse,
        lr,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

/// Runs `train_step` until `cfg.iterations`, evaluating every
/// `cfg.eval_every` iterations. With `out` set, appends to
/// `out/train_log.csv` and writes checkpoints there.
pub fn train(
    state: &mut TrainState,
    data: Arc<Dataset>,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if state.sa.weights.len() != data.rows() {
        return Err(Error::ShapeMismatch {
            what: "self-adaptive weights".into(),
            expected: data.rows(),
            got: state.sa.weights.len(),
        });
    }
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "iteration,train_loss,val_loss,lr,wall_time")?;
            }
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    let prefetch = Prefetcher::spawn(data, cfg.n, cfg.q, cfg.seed, state.iteration, cfg.iterations);
    let mut acc = 0.0;
    let mut count = 0u64;
    while state.iteration < cfg.iterations {
        let batch = prefetch.next_batch().ok_or_else(|| crate::error::invalid("batch producer stopped"))??;
        let m = train_step(state, &batch, cfg)?;
        acc += m.mse;
        count += 1;
        let lr = m.lr;
        let it = state.iteration;
        if it.is_multiple_of(cfg.eval_every) || it == cfg.iterations {
            let val_loss = val.map(|v| dataset_mse(&state.model, v)).transpose()?;
            let row = LogRow {
                iteration: it,
                train_loss: acc / count as f64,
                val_loss,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::info!("iter {it}: train {:.3e} val {:?} lr {:.2e}", row.train_loss, row.val_loss, lr);
            if let Some(f) = log_file.as_mut() {
                writeln!(
                    f,
                    "{},{:e},{},{:e},{:.3}",
                    row.iteration,
                    row.train_loss,
                    row.val_loss.map_or(String::new(), |v| format!("{v:e}")),
                    row.lr,
                    row.wall_time
                )?;
            }
            let reached = matches!((row.val_loss, cfg.stop_at_val), (Some(v), Some(goal)) if v <= goal);
            rows.push(row);
            acc = 0.0;
            count = 0;
            if reached {
                break;
            }
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(state, &dir.join(format!("checkpoint_{it:07}.bin")))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(state, &dir.join("final.bin"))?;
    }
    Ok(rows)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ROCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    meta: ModelMeta,
    iteration: u64,
    adam_step: u64,
    sa_step: u64,
    sa_len: usize,
    sa_max: f64,
    freeze: FreezeSpec,
    blocks: Vec<BlockInfo>,
}

/// Writes a checkpoint: magic, version, JSON header, then f64 arrays
/// (parameters, ADAM first and second moments per block, self-adaptive
/// weights and their moments). Layout in `docs/checkpoint-format.md`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: state.model.config.clone(),
        meta: state.meta.clone(),
        iteration: state.iteration,
        adam_step: state.adam.step,
        sa_step: state.sa.step,
        sa_len: state.sa.weights.len(),
        sa_max: state.sa.max,
        freeze: state.freeze.clone(),
        blocks: state.model.blocks().iter().map(|(n, b)| BlockInfo { name: n.clone(), len: b.len() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |xs: &[f64]| -> Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        for (_, b) in state.model.blocks() {
            put(b)?;
        }
        for m in &state.adam.m {
            put(m)?;
        }
        for v in &state.adam.v {
            put(v)?;
        }
        put(&state.sa.weights)?;
        put(&state.sa.m)?;
        put(&state.sa.v)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut model = DeepONet::init(header.model.clone(), 0);
    let sizes = model.block_sizes();
    let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
    if header.blocks.len() != sizes.len()
        || header.blocks.iter().zip(&names).zip(&sizes).any(|((b, n), &s)| &b.name != n || b.len != s)
    {
        return Err(bad("block table does not match the model configuration".into()));
    }
    let total: usize = sizes.iter().sum::<usize>() * 3 + header.sa_len * 3;
    let data = &bytes[16 + hlen..];
    if data.len() != total * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 8, data.len())));
    }
    let mut vals = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (_, b) in model.blocks_mut() {
        for x in b.iter_mut() {
            *x = vals.next().expect("sized above");
        }
    }
    let mut adam = AdamState::new(&sizes);
    adam.step = header.adam_step;
    for m in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        for x in m.iter_mut() {
            *x = vals.next().expect("sized above");
        }
    }
    let mut sa = SelfAdaptiveWeights::new(header.sa_len, header.sa_max);
    sa.step = header.sa_step;
    for xs in [&mut sa.weights, &mut sa.m, &mut sa.v] {
        for x in xs.iter_mut() {
            *x = vals.next().expect("sized above");
        }
    }
    Ok(TrainState {
        model,
        meta: header.meta,
        adam,
        sa,
        freeze: header.freeze,
        iteration: header.iteration,
    })
}

/// Row of trunk inputs for a physical position and simulation time.
pub fn coords_row(meta: &ModelMeta, x: &[f64], t_sim: f64) -> Vec<f64> {
    let mut row = meta.normalization.x(x);
    row.push(meta.normalization.t(t_sim));
    row
}

/// Weighted loss through the plain forward pass, independent of the
/// gradient code.
pub fn weighted_loss(model: &DeepONet, batch: &MiniBatch, weights: &[f64]) -> Result<f64> {
    let pred = model.forward(batch.branch.view(), batch.trunk.view(), batch.q)?;
    let rows = batch.rows() as f64;
    Ok(pred
        .iter()
        .zip(batch.target.iter())
        .zip(weights)
        .map(|((p, t), w)| w * (p - t).powi(2))
        .sum::<f64>()
        / rows)
}

/// Central-difference check of every parameter block and of the loss
/// weights. Returns `(block, ||fd - analytic|| / ||analytic||)`.
pub fn gradient_check(model: &DeepONet, batch: &MiniBatch, weights: &[f64], h: f64) -> Result<Vec<(String, f64)>> {
    let (_, grad, dweights) = model.loss_and_grad(batch, weights)?;
    let analytic: Vec<(String, Vec<f64>)> = grad.blocks().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (bi, (name, an)) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; an.len()];
        for j in 0..an.len() {
            let orig = probe.blocks()[bi].1[j];
            probe.blocks_mut()[bi].1[j] = orig + h;
            let plus = weighted_loss(&probe, batch, weights)?;
            probe.blocks_mut()[bi].1[j] = orig - h;
            let minus = weighted_loss(&probe, batch, weights)?;
            probe.blocks_mut()[bi].1[j] = orig;
            fd[j] = (plus - minus) / (2.0 * h);
        }
        out.push((name.clone(), relative_error(&fd, an)));
    }
    let mut w = weights.to_vec();
    let mut fd = vec![0.0; w.len()];
    for r in 0..w.len() {
        let orig = w[r];
        w[r] = orig + h;
        let plus = weighted_loss(model, batch, &w)?;
        w[r] = orig - h;
        let minus = weighted_loss(model, batch, &w)?;
        w[r] = orig;
        fd[r] = (plus - minus) / (2.0 * h);
    }
    out.push(("self_adaptive".into(), relative_error(&fd, &dweights)));
    Ok(out)
}

fn relative_error(fd: &[f64], an: &[f64]) -> f64 {
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = an.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::normalize;
    use crate::geometry::{build_sensor_grid, Aabb};
    use ndarray::array;

    pub(crate) fn tiny_config(sensors: usize) -> ModelConfig {
        ModelConfig {
            sensors,
            coord_dims: 3,
            branch_width: 5,
            branch_layers: 2,
            trunk_width: 6,
            trunk_layers: 2,
            latent: 3,
            encoding: FourierEncoding {
                frequencies: vec![0.5, 0.25, 1.0 / 6.0],
            },
            init: InitConfig::default(),
        }
    }

    pub(crate) fn meta() -> ModelMeta {
        let outer = Aabb::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let geometry = RoomGeometry::empty_box(outer.clone(), "w").unwrap();
        ModelMeta {
            scenario: "t".into(),
            sensors: build_sensor_grid(&geometry, 400.0, 343.0).unwrap(),
            geometry,
            source_region: SourceRegion::new(Aabb::new(vec![0.8, 0.8], vec![1.2, 1.2]).unwrap()),
            normalization: normalize(&outer).unwrap(),
            sigma0: 0.3,
            c_phys: 343.0,
            f_max: 400.0,
            partition: None,
        }
    }

    fn toy_batch(seed: u64, n: usize, q: usize, m: usize) -> MiniBatch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MiniBatch {
            q,
            sources: (0..n).collect(),
            branch: Array2::from_shape_simple_fn((n, m), || rng.random_range(0.0..0.1)),
            trunk: Array2::from_shape_simple_fn((n * q, 3), || rng.random_range(-0.1..0.1)),
            target: Array2::from_shape_simple_fn((n * q, 1), || rng.random_range(-1.0..1.0)),
            sa_index: (0..n * q).collect(),
        }
    }

    #[test]
    fn merge_examples() {
        let mut cfg = tiny_config(2);
        cfg.latent = 1;
        let mut model = DeepONet::init(cfg, 0);
        // Branch output forced to zero: prediction is b0 everywhere.
        model.branch.out.w.fill(0.0);
        model.branch.out.b.fill(0.0);
        model.b0 = 0.25;
        let coords = array![[0.1, 0.2, 0.3], [-0.4, 0.0, 1.0]];
        let p = model.forward(array![[0.3, 0.1]].view(), coords.view(), 2).unwrap();
        assert_eq!(p.to_vec(), vec![0.25, 0.25]);
        // Latent width 1, branch 2, trunk 3, b0 0.5.
        model.branch.out.b.fill(2.0);
        model.trunk.out.w.fill(0.0);
        model.trunk.out.b.fill(3.0);
        model.b0 = 0.5;
        let p = model.forward(array![[0.3, 0.1]].view(), coords.view(), 2).unwrap();
        assert_eq!(p.to_vec(), vec![6.5, 6.5]);
    }

    #[test]
    fn latent_permutation_is_invisible() {
        let model = DeepONet::init(tiny_config(4), 9);
        let batch = toy_batch(1, 2, 3, 4);
        let mut perm = model.clone();
        let order = [2, 0, 1];
        for net in [&mut perm.branch, &mut perm.trunk] {
            net.out.w = net.out.w.select(ndarray::Axis(1), &order);
            net.out.b = net.out.b.select(ndarray::Axis(0), &order);
        }
        let a = model.forward(batch.branch.view(), batch.trunk.view(), 3).unwrap();
        let b = perm.forward(batch.branch.view(), batch.trunk.view(), 3).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
        let grid = model.forward_grid(batch.branch.view(), batch.trunk.view()).unwrap();
        assert!((grid[[1, 4]] - a[4]).abs() < 1e-14);
    }

    #[test]
    fn loss_examples() {
        let model = DeepONet::init(tiny_config(4), 2);
        let mut batch = toy_batch(2, 2, 2, 4);
        let ones = vec![1.0; 4];
        let pred = model.forward(batch.branch.view(), batch.trunk.view(), 2).unwrap();
        let plain = mse(pred.as_slice().unwrap(), batch.target.as_slice().unwrap());
        let (l, _, dw) = model.loss_and_grad(&batch, &ones).unwrap();
        assert!((l - plain).abs() < 1e-15);
        let mut w = ones.clone();
        w[1] = 2.0;
        let (l2, _, _) = model.loss_and_grad(&batch, &w).unwrap();
        assert!((l2 - l - dw[1]).abs() < 1e-15);
        batch.target.assign(&pred.clone().insert_axis(ndarray::Axis(1)));
        let (l0, g0, _) = model.loss_and_grad(&batch, &[7.0, 1.0, 3.0, 0.5]).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.blocks().iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gradients_match_central_differences() {
        let model = DeepONet::init(tiny_config(4), 5);
        let batch = toy_batch(3, 3, 4, 4);
        let weights: Vec<f64> = (0..12).map(|i| 0.5 + 0.1 * i as f64).collect();
        for (name, err) in gradient_check(&model, &batch, &weights, 1e-4).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn scaling_the_loss_scales_gradients() {
        let model = DeepONet::init(tiny_config(4), 6);
        let batch = toy_batch(4, 2, 3, 4);
        let (_, g1, _) = model.loss_and_grad(&batch, &[1.0; 6]).unwrap();
        let (_, g2, _) = model.loss_and_grad(&batch, &[2.0; 6]).unwrap();
        for ((_, a), (_, b)) in g1.blocks().iter().zip(g2.blocks().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300)));
        }
    }

    #[test]
    fn self_adaptive_ascent_and_clamp() {
        let cfg = TrainConfig::default();
        let mut sa = SelfAdaptiveWeights::new(3, 1000.0);
        sa.ascend(&cfg.sa_adam(), &[0, 2], &[0.0, 0.5]).unwrap();
        assert_eq!(sa.weights[0], 1.0);
        assert!(sa.weights[2] > 1.0);
        assert_eq!(sa.weights[1], 1.0);
        sa.weights[1] = 1000.0;
        sa.ascend(&cfg.sa_adam(), &[1], &[1.0]).unwrap();
        assert_eq!(sa.weights[1], 1000.0);
        assert!(sa.ascend(&cfg.sa_adam(), &[1], &[f64::INFINITY]).is_err());
    }

    #[test]
    fn high_residual_point_gains_weight() {
        let model = DeepONet::init(tiny_config(4), 7);
        let mut batch = toy_batch(5, 1, 3, 4);
        let pred = model.forward(batch.branch.view(), batch.trunk.view(), 3).unwrap();
        batch.target.assign(&pred.insert_axis(ndarray::Axis(1)));
        batch.target[[1, 0]] += 3.0;
        let mut state = TrainState::new(model, meta(), 3, 1000.0);
        train_step(&mut state, &batch, &TrainConfig::default()).unwrap();
        assert!(state.sa.weights[1] > 1.0);
    }

    #[test]
    fn freeze_masks() {
        let model = DeepONet::init(tiny_config(4), 1);
        let spec = FreezeSpec::early(&model);
        let mask = spec.mask(&model).unwrap();
        let trainable: Vec<String> = model
            .blocks()
            .iter()
            .zip(&mask)
            .filter(|(_, &t)| t)
            .map(|((n, _), _)| n.clone())
            .collect();
        assert_eq!(
            trainable,
            vec!["branch.out.w", "branch.out.b", "trunk.hidden1.w", "trunk.hidden1.b", "trunk.out.w", "trunk.out.b", "b0"]
        );
        assert!(FreezeSpec::none().mask(&model).unwrap().iter().all(|&t| t));
        let all = FreezeSpec {
            frozen: model.blocks().iter().filter_map(|(n, _)| n.strip_suffix(".w").map(String::from)).collect(),
        };
        let mut all = all;
        all.frozen.retain(|n| n != "b0");
        let mut m2 = model.clone();
        m2.b0 = 0.0;
        assert!(all.mask(&m2).unwrap().iter().filter(|&&t| t).count() == 1);
        assert!(FreezeSpec { frozen: vec!["trunk.hidden9".into()] }.mask(&model).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = DeepONet::init(tiny_config(meta().sensors.len()), 3);
        let mut state = TrainState::new(model, meta(), 10, 1000.0);
        state.freeze = FreezeSpec::early(&state.model);
        let mut batch = toy_batch(1, 2, 5, state.model.config.sensors);
        batch.sa_index = (0..10).collect();
        let cfg = TrainConfig::default();
        for _ in 0..3 {
            train_step(&mut state, &batch, &cfg).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, state);
        let a = state.model.forward(batch.branch.view(), batch.trunk.view(), 5).unwrap();
        let b = back.model.forward(batch.branch.view(), batch.trunk.view(), 5).unwrap();
        assert_eq!(a, b);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn validation_cadence_zero_is_rejected() {
        let cfg = TrainConfig {
            eval_every: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
