//! Subcommands of the `roomop` tool.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use roomop_core::config::{split_box, Scenario};
use roomop_core::dataset::Dataset;
use roomop_core::deeponet::{load_checkpoint, train, FreezeSpec, LogRow, TrainConfig};
use roomop_core::eval::{benchmark_inference, error_map, evaluate_pairs, predict_irs, reference_ir, spread_receivers, transfer_function, write_ir_csv, write_tf_csv};
use roomop_core::pipeline::{align_inputs, fresh_state, generate_all, load_ensemble, load_splits, train_config, train_partitions, transfer_state};
use roomop_core::specialization::{subsample_sources, Partitioning};
use serde::Serialize;

use crate::service::{serve, Registry};

#[derive(Parser)]
#[command(name = "roomop", version, about = "Acoustic wave surrogates: data generation, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Simulate the train, validation and test splits of a scenario.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the whole domain.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a trained model on another geometry.
    Transfer {
        #[command(flatten)]
        common: TrainArgs,
        /// Checkpoint of the source model.
        #[arg(long)]
        source: PathBuf,
        /// Frozen layers: `early` or `none`.
        #[arg(long, default_value = "early")]
        freeze: String,
        /// Fraction of training sources to keep.
        #[arg(long, default_value_t = 1.0)]
        source_fraction: f64,
        /// Stop once the validation loss reaches this value.
        #[arg(long)]
        stop_at_val: Option<f64>,
    },
    /// Train one model per partition box.
    Decompose {
        #[command(flatten)]
        common: TrainArgs,
        /// Equal split per axis, e.g. `2,2`; defaults to the config's partitions.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
    },
    /// Score a model on the test pairs and write responses and error maps.
    Evaluate {
        /// Checkpoint, training directory or decomposition directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average neighbouring partition models within this distance (m).
        #[arg(long)]
        blend: Option<f64>,
        /// Frames of the first test source to write error maps for.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
    },
    /// Time impulse-response inference.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        receivers: usize,
        /// Samples per impulse response.
        #[arg(long, default_value_t = 1000)]
        len: usize,
        #[arg(long, default_value_t = 2000.0)]
        fs: f64,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Source position; defaults to the centre of the source region.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        source: Option<Vec<f64>>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve models over HTTP and WebSocket.
    Serve {
        /// `name=path` or `path` (named after its scenario); repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "ROOMOP_PORT", default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total iterations; defaults to the config's training section.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainArgs {
    fn scenario(&self) -> Result<Scenario> {
        Ok(Scenario::load(&self.config)?)
    }

    fn train_config(&self, scn: &Scenario) -> TrainConfig {
        let mut cfg = train_config(&scn.training);
        if let Some(v) = self.iters {
            cfg.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg
    }
}

#[derive(Serialize)]
struct RunSummary {
    iterations: u64,
    final_train_loss: Option<f64>,
    final_val_loss: Option<f64>,
    wall_time: Option<f64>,
}

fn write_summary(dir: &Path, log: &[LogRow]) -> Result<()> {
    let last = log.last();
    let summary = RunSummary {
        iterations: last.map_or(0, |r| r.iteration),
        final_train_loss: last.map(|r| r.train_loss),
        final_val_loss: last.and_then(|r| r.val_loss),
        wall_time: last.map(|r| r.wall_time),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{}: {} iterations, train loss {:?}, val loss {:?}",
        dir.display(),
        summary.iterations,
        summary.final_train_loss,
        summary.final_val_loss
    );
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let scn = Scenario::load(&config)?;
            for m in generate_all(&scn, &out)? {
                println!("{:?}: {} sources, {} nodes, {} frames", m.split, m.sources.len(), m.n_nodes, m.n_times);
            }
            Ok(())
        }
        Command::Train { common, resume } => {
            let scn = common.scenario()?;
            let cfg = common.train_config(&scn);
            let splits = load_splits(&common.data)?;
            let mut state = match resume {
                Some(p) => load_checkpoint(&p)?,
                None => fresh_state(&scn, &splits.train, cfg.seed, None),
            };
            let log = train(&mut state, splits.train.clone(), splits.val.as_ref(), &cfg, Some(&common.out))?;
            write_summary(&common.out, &log)
        }
        Command::Transfer {
            common,
            source,
            freeze,
            source_fraction,
            stop_at_val,
        } => {
            let scn = common.scenario()?;
            let mut cfg = common.train_config(&scn);
            cfg.stop_at_val = stop_at_val;
            let splits = load_splits(&common.data)?;
            let src = load_checkpoint(&source)?;
            let freeze = FreezeSpec::preset(&freeze, &src.model)?;
            let keep = subsample_sources(splits.train.n_sources(), source_fraction, cfg.seed)?;
            let data = splits.train.subset_sources(&keep);
            let (mut state, data) = transfer_state(&src, &scn, &data, freeze)?;
            let val = splits.val.as_ref().map(|v| align_inputs(v, &state.meta.sensors).map(|(d, _)| d)).transpose()?;
            let log = train(&mut state, Arc::new(data), val.as_ref(), &cfg, Some(&common.out))?;
            write_summary(&common.out, &log)
        }
        Command::Decompose { common, split } => {
            let scn = common.scenario()?;
            let cfg = common.train_config(&scn);
            let boxes = match (split, &scn.partitions) {
                (Some(s), _) => split_box(&scn.geometry.outer, &s),
                (None, Some(b)) => b.clone(),
                (None, None) => bail!("{} has no [partitions] section; pass --split", common.config.display()),
            };
            let part = Partitioning::new(boxes)?;
            let splits = load_splits(&common.data)?;
            let runs = train_partitions(&scn, &splits, &part, &cfg, Some(&common.out))?;
            for (k, (_, log)) in runs.iter().enumerate() {
                write_summary(&roomop_core::pipeline::partition_dir(&common.out, k), log)?;
            }
            Ok(())
        }
        Command::Evaluate {
            model,
            config,
            data,
            out,
            blend,
            frames,
        } => evaluate(&model, &config, &data, &out, blend, frames),
        Command::Bench {
            model,
            receivers,
            len,
            fs,
            reps,
            warmup,
            source,
            out,
        } => {
            let ens = load_ensemble(&model)?;
            let source = source.unwrap_or_else(|| ens.meta().source_region.bounds.center());
            let rx = spread_receivers(&ens, receivers);
            let report = benchmark_inference(&ens, &source, &rx, len, fs, reps, warmup)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            Ok(())
        }
        Command::Serve { models, host, port } => {
            let reg = Registry::load(&models)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                log::info!("serving {:?} on http://{}", reg.names(), listener.local_addr()?);
                serve(reg, listener).await?;
                Ok(())
            })
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    pairs: Vec<roomop_core::eval::PairReport>,
    mean_rmse: f64,
    mean_zero_rmse: f64,
}

fn evaluate(model: &Path, config: &Path, data: &Path, out: &Path, blend: Option<f64>, frames: Option<Vec<usize>>) -> Result<()> {
    let scn = Scenario::load(config)?;
    let mut ens = load_ensemble(model)?;
    ens.blend = blend;
    let test_dir = roomop_core::dataset::split_dir(data, roomop_core::dataset::Split::Test);
    let test = Dataset::load(&test_dir).with_context(|| format!("no test split under {}; list test_sources and rerun generate", data.display()))?;
    let receivers = &scn.dataset.test_receivers;
    if receivers.is_empty() {
        bail!("{} lists no test_receivers", config.display());
    }
    std::fs::create_dir_all(out)?;
    let pairs = evaluate_pairs(&ens, &test, receivers)?;
    let f_s = test.manifest.c_phys / test.manifest.save_dt;
    for (i, p) in pairs.iter().enumerate() {
        let node = test.nearest_node(&p.receiver);
        let reference = reference_ir(&test, i, node);
        let predicted = predict_irs(&ens, &p.source, std::slice::from_ref(&reference.receiver), &reference.times)?.remove(0);
        write_ir_csv(&reference, &out.join(format!("pair_{i}_reference_ir.csv")))?;
        write_ir_csv(&predicted, &out.join(format!("pair_{i}_predicted_ir.csv")))?;
        write_tf_csv(&transfer_function(&reference.pressures, f_s), &out.join(format!("pair_{i}_reference_tf.csv")))?;
        write_tf_csv(&transfer_function(&predicted.pressures, f_s), &out.join(format!("pair_{i}_predicted_tf.csv")))?;
        println!("pair {i}: rmse {:.4} Pa (zero prediction {:.4} Pa)", p.rmse, p.zero_rmse);
    }
    let n_t = test.n_times();
    for f in frames.unwrap_or_else(|| vec![n_t / 2, n_t - 1]) {
        error_map(&ens, &test, 0, f)?.write_csv(&out.join(format!("error_map_frame_{f}.csv")))?;
    }
    let mean = |f: fn(&roomop_core::eval::PairReport) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let report = EvalReport {
        model: model.display().to_string(),
        mean_rmse: mean(|p| p.rmse),
        mean_zero_rmse: mean(|p| p.zero_rmse),
        pairs,
    };
    println!("mean rmse {:.4} Pa over {} pairs", report.mean_rmse, report.pairs.len());
    write_json(&out.join("pairs.json"), &report)
}
