//! Impulse responses, error metrics, transfer functions, wave-field error
//! maps and inference timing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{input_function, Dataset};
use crate::deeponet::coords_row;
use crate::error::{Error, Result};
use crate::specialization::Ensemble;

/// Real-time budget for one interactive update, in milliseconds.
pub const LATENCY_BUDGET_MS: f64 = 96.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub receiver: Vec<f64>,
    /// Physical time in seconds.
    pub times: Vec<f64>,
    /// Pressure in Pa.
    pub pressures: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub frequencies: Vec<f64>,
    pub magnitude_db: Vec<f64>,
}

/// `n` physical sample times at rate `f_s`, starting at 0.
pub fn time_grid(n: usize, f_s: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 / f_s).collect()
}

/// Checks a source position against the model's source region.
pub fn check_source(ens: &Ensemble, source: &[f64]) -> Result<()> {
    let region = &ens.meta().source_region;
    if source.len() != region.bounds.dims() || !region.contains(source) {
        return Err(Error::InvalidParameter(format!(
            "source {source:?} outside source region min {:?} max {:?}",
            region.bounds.min, region.bounds.max
        )));
    }
    Ok(())
}

/// Checks a receiver position against the fluid region of the geometry.
pub fn check_receiver(ens: &Ensemble, receiver: &[f64]) -> Result<()> {
    let geom = &ens.meta().geometry;
    if receiver.len() != geom.dims || !geom.is_fluid(receiver) {
        return Err(Error::InvalidParameter(format!(
            "receiver {receiver:?} outside the room min {:?} max {:?}",
            geom.outer.min, geom.outer.max
        )));
    }
    Ok(())
}

/// Predicted impulse responses for one source and several receivers on the
/// physical time grid `times`.
pub fn predict_irs(ens: &Ensemble, source: &[f64], receivers: &[Vec<f64>], times: &[f64]) -> Result<Vec<ImpulseResponse>> {
    check_source(ens, source)?;
    let routes = receivers
        .iter()
        .map(|r| {
            check_receiver(ens, r)?;
            ens.route(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let nt = times.len();
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; nt]; receivers.len()];
    for (k, member) in ens.members.iter().enumerate() {
        let mine: Vec<usize> = (0..receivers.len()).filter(|&i| routes[i].contains(&k)).collect();
        if mine.is_empty() {
            continue;
        }
        let meta = &member.meta;
        let u = input_function(&meta.sensors, source, meta.sigma0);
        let branch = ArrayView1::from(&u).insert_axis(ndarray::Axis(0)).to_owned();
        let dims = member.model.config.coord_dims;
        let mut coords = Array2::zeros((mine.len() * nt, dims));
        for (j, &i) in mine.iter().enumerate() {
            for (s, &t) in times.iter().enumerate() {
                let row = coords_row(meta, &receivers[i], t * meta.c_phys);
                coords.row_mut(j * nt + s).assign(&ArrayView1::from(&row));
            }
        }
        let pred = member.model.forward_grid(branch.view(), coords.view())?;
        for (j, &i) in mine.iter().enumerate() {
            let w = 1.0 / routes[i].len() as f64;
            for s in 0..nt {
                out[i][s] += w * pred[[0, j * nt + s]];
            }
        }
    }
    Ok(receivers
        .iter()
        .zip(out)
        .map(|(r, p)| ImpulseResponse {
            receiver: r.clone(),
            times: times.to_vec(),
            pressures: p,
        })
        .collect())
}

/// Reference impulse response of `source` at stored node `node`.
pub fn reference_ir(data: &Dataset, source: usize, node: usize) -> ImpulseResponse {
    let c = data.manifest.c_phys;
    ImpulseResponse {
        receiver: data.node_coords.row(node).to_vec(),
        times: (0..data.n_times()).map(|k| data.time_sim(k) / c).collect(),
        pressures: (0..data.n_times()).map(|k| data.pressures[source][[k, node]] as f64).collect(),
    }
}

/// `sqrt(sum (a - b)^2 / N)` over equal time grids.
pub fn rmse(reference: &ImpulseResponse, predicted: &ImpulseResponse) -> Result<f64> {
    let same_grid = reference.times.len() == predicted.times.len()
        && reference.pressures.len() == reference.times.len()
        && predicted.pressures.len() == predicted.times.len()
        && reference
            .times
            .iter()
            .zip(&predicted.times)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300) + 1e-15);
    if !same_grid {
        return Err(crate::error::invalid("impulse responses are on different time grids"));
    }
    Ok(rms_diff(&reference.pressures, &predicted.pressures))
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// Complex DFT of a real signal.
pub fn spectrum(ir: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = ir.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Magnitude spectrum in dB re 1 from DC to Nyquist, without windowing.
pub fn transfer_function(ir: &[f64], f_s: f64) -> TransferFunction {
    let n = ir.len();
    let spec = spectrum(ir);
    let bins = n / 2 + 1;
    TransferFunction {
        frequencies: (0..bins.min(n)).map(|k| k as f64 * f_s / n as f64).collect(),
        magnitude_db: spec.iter().take(bins).map(|z| 20.0 * z.norm().max(1e-12).log10()).collect(),
    }
}

/// Accuracy of one source/receiver pair from a test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: Vec<f64>,
    pub receiver: Vec<f64>,
    /// Stored node the receiver snapped to.
    pub node: Vec<f64>,
    pub rmse: f64,
    /// RMSE of predicting zero everywhere.
    pub zero_rmse: f64,
    /// RMS of the prediction before the direct sound can arrive.
    pub pre_arrival_rms: Option<f64>,
}

/// Evaluates pair `i` = (test source `i`, receiver `i`) for every receiver.
pub fn evaluate_pairs(ens: &Ensemble, test: &Dataset, receivers: &[Vec<f64>]) -> Result<Vec<PairReport>> {
    if receivers.len() > test.n_sources() {
        return Err(Error::InsufficientData(format!(
            "{} receivers but only {} test sources",
            receivers.len(),
            test.n_sources()
        )));
    }
    let sigma0 = test.manifest.sigma0;
    receivers
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let node = test.nearest_node(r);
            let reference = reference_ir(test, i, node);
            let pred = predict_irs(ens, &test.positions[i], std::slice::from_ref(&reference.receiver), &reference.times)?
                .remove(0);
            let dist: f64 = reference.receiver.iter().zip(&test.positions[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let arrival = (dist - 3.0 * sigma0) / test.manifest.c_phys;
            let early: Vec<f64> = pred.times.iter().zip(&pred.pressures).filter(|(t, _)| **t < arrival).map(|(_, p)| *p).collect();
            Ok(PairReport {
                source: test.positions[i].clone(),
                receiver: r.clone(),
                node: reference.receiver.clone(),
                rmse: rmse(&reference, &pred)?,
                zero_rmse: rms_diff(&reference.pressures, &vec![0.0; reference.pressures.len()]),
                pre_arrival_rms: (!early.is_empty()).then(|| rms_diff(&early, &vec![0.0; early.len()])),
            })
        })
        .collect()
}

/// Reference, prediction and absolute error at every stored node for one
/// source and frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub source: Vec<f64>,
    /// Physical time in seconds.
    pub time: f64,
    pub coords: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    pub predicted: Vec<f64>,
    pub abs_error: Vec<f64>,
}

pub fn error_map(ens: &Ensemble, data: &Dataset, source: usize, frame: usize) -> Result<ErrorMap> {
    if source >= data.n_sources() || frame >= data.n_times() {
        return Err(crate::error::invalid(format!("source {source} or frame {frame} out of range")));
    }
    let time = data.time_sim(frame) / data.manifest.c_phys;
    let coords: Vec<Vec<f64>> = (0..data.n_nodes()).map(|n| data.node_coords.row(n).to_vec()).collect();
    let predicted: Vec<f64> = predict_irs(ens, &data.positions[source], &coords, &[time])?
        .into_iter()
        .map(|ir| ir.pressures[0])
        .collect();
    let reference: Vec<f64> = (0..data.n_nodes()).map(|n| data.pressures[source][[frame, n]] as f64).collect();
    let abs_error = reference.iter().zip(&predicted).map(|(a, b)| (a - b).abs()).collect();
    Ok(ErrorMap {
        source: data.positions[source].clone(),
        time,
        coords,
        reference,
        predicted,
        abs_error,
    })
}

impl ErrorMap {
    /// CSV with columns `x0.., reference, predicted, abs_error`. Values use
    /// shortest round-trip formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dims = self.coords.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..dims).map(|d| format!("x{d}")).collect();
        writeln!(f, "{},reference,predicted,abs_error", header.join(","))?;
        for (i, c) in self.coords.iter().enumerate() {
            let xs: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{},{},{}", xs.join(","), self.reference[i], self.predicted[i], self.abs_error[i])?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Writes an impulse response and its transfer function as CSV
/// (`time,pressure` and `frequency,magnitude_db`).
pub fn write_ir_csv(ir: &ImpulseResponse, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "time,pressure")?;
    for (t, p) in ir.times.iter().zip(&ir.pressures) {
        writeln!(f, "{t},{p}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_tf_csv(tf: &TransferFunction, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frequency,magnitude_db")?;
    for (fr, m) in tf.frequencies.iter().zip(&tf.magnitude_db) {
        writeln!(f, "{fr},{m}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub receivers: usize,
    pub samples: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub budget_ms: f64,
    pub within_budget: bool,
}

/// Times `predict_irs` for `receivers` receivers (placed on the test
/// receivers if given, otherwise spread through the room) after `warmup`
/// untimed calls.
pub fn benchmark_inference(
    ens: &Ensemble,
    source: &[f64],
    receivers: &[Vec<f64>],
    samples: usize,
    f_s: f64,
    reps: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if receivers.is_empty() {
        return Err(crate::error::invalid("benchmark needs at least one receiver"));
    }
    if reps < 20 {
        return Err(crate::error::invalid(format!("benchmark needs at least 20 repetitions, got {reps}")));
    }
    let times = time_grid(samples, f_s);
    for _ in 0..warmup {
        predict_irs(ens, source, receivers, &times)?;
    }
    let mut ms: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            predict_irs(ens, source, receivers, &times).map(|_| t0.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    ms.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 { ms[reps / 2] } else { 0.5 * (ms[reps / 2 - 1] + ms[reps / 2]) };
    let p95 = ms[((0.95 * reps as f64).ceil() as usize).clamp(1, reps) - 1];
    Ok(BenchReport {
        receivers: receivers.len(),
        samples,
        reps,
        median_ms: median,
        p95_ms: p95,
        budget_ms: LATENCY_BUDGET_MS,
        within_budget: median < LATENCY_BUDGET_MS,
    })
}

/// `n` receiver positions spread on a diagonal through the fluid region.
pub fn spread_receivers(ens: &Ensemble, n: usize) -> Vec<Vec<f64>> {
    let geom = &ens.meta().geometry;
    (0..n)
        .map(|i| {
            let f = (i as f64 + 1.0) / (n as f64 + 1.0);
            (0..geom.dims).map(|d| geom.outer.min[d] + f * geom.outer.extent(d)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeponet::tests::{meta, tiny_config};
    use crate::deeponet::DeepONet;
    use crate::geometry::build_sensor_grid;

    fn ensemble() -> Ensemble {
        let mut m = meta();
        m.sensors = build_sensor_grid(&m.geometry, 400.0, 343.0).unwrap();
        let model = DeepONet::init(tiny_config(m.sensors.len()), 4);
        Ensemble::single(model, m)
    }

    fn ir(p: Vec<f64>) -> ImpulseResponse {
        ImpulseResponse {
            receiver: vec![0.0, 0.0],
            times: time_grid(p.len(), 100.0),
            pressures: p,
        }
    }

    #[test]
    fn rmse_examples() {
        let a = ir(vec![0.1, -0.3, 0.2, 0.5]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let shifted = ir(a.pressures.iter().map(|p| p + 0.1).collect());
        assert!((rmse(&a, &shifted).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(rmse(&a, &shifted).unwrap(), rmse(&shifted, &a).unwrap());
        assert!(rmse(&a, &ir(vec![0.0; 3])).is_err());
    }

    #[test]
    fn transfer_function_examples() {
        let mut impulse = vec![0.0; 64];
        impulse[0] = 1.0;
        let tf = transfer_function(&impulse, 2000.0);
        assert_eq!(tf.frequencies.len(), 33);
        assert_eq!(*tf.frequencies.last().unwrap(), 1000.0);
        assert!(tf.magnitude_db.iter().all(|m| m.abs() < 1e-9));

        let n = 128;
        let sine: Vec<f64> = (0..n).map(|k| (2.0 * std::f64::consts::PI * 10.0 * k as f64 / n as f64).sin()).collect();
        let tf = transfer_function(&sine, 1.0);
        let peak = (0..tf.magnitude_db.len()).max_by(|&a, &b| tf.magnitude_db[a].total_cmp(&tf.magnitude_db[b])).unwrap();
        assert_eq!(peak, 10);
        assert!(tf.magnitude_db.iter().enumerate().all(|(k, m)| k == 10 || *m < tf.magnitude_db[10] - 100.0));
    }

    #[test]
    fn parseval_holds() {
        let x: Vec<f64> = (0..97).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.1 + (k as f64 * 0.3).cos()).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec: f64 = spectrum(&x).iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!(((energy - spec) / energy).abs() < 1e-9);
    }

    #[test]
    fn default_time_grid_spans_half_a_second() {
        let t = time_grid(1000, 2000.0);
        assert_eq!(t.len(), 1000);
        assert!((t[999] + 1.0 / 2000.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batched_receivers_match_single_calls() {
        let ens = ensemble();
        let times = time_grid(50, 8000.0);
        let receivers = vec![vec![0.3, 0.4], vec![1.7, 1.2], vec![1.0, 1.9]];
        let all = predict_irs(&ens, &[1.0, 1.0], &receivers, &times).unwrap();
        assert_eq!(all.len(), 3);
        for (r, got) in receivers.iter().zip(&all) {
            let one = predict_irs(&ens, &[1.0, 1.0], std::slice::from_ref(r), &times).unwrap();
            for (a, b) in one[0].pressures.iter().zip(&got.pressures) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        assert_eq!(all, predict_irs(&ens, &[1.0, 1.0], &receivers, &times).unwrap());
    }

    #[test]
    fn positions_are_checked() {
        let ens = ensemble();
        let t = time_grid(4, 100.0);
        let err = predict_irs(&ens, &[0.1, 0.1], &[vec![1.0, 1.0]], &t).unwrap_err().to_string();
        assert!(err.contains("source region"), "{err}");
        assert!(predict_irs(&ens, &[1.0, 1.0], &[vec![2.5, 1.0]], &t).is_err());
    }

    #[test]
    fn benchmark_rejects_empty_and_reports_order() {
        let ens = ensemble();
        assert!(benchmark_inference(&ens, &[1.0, 1.0], &[], 100, 2000.0, 20, 1).is_err());
        assert!(benchmark_inference(&ens, &[1.0, 1.0], &spread_receivers(&ens, 2), 100, 2000.0, 5, 1).is_err());
        let rep = benchmark_inference(&ens, &[1.0, 1.0], &spread_receivers(&ens, 5), 100, 2000.0, 21, 2).unwrap();
        assert_eq!(rep.reps, 21);
        assert!(rep.median_ms <= rep.p95_ms);
        assert_eq!(rep.budget_ms, 96.0);
    }

    #[test]
    fn error_map_and_pairs_against_small_dataset() {
        let data = crate::dataset::tests::small();
        let mut m = meta();
        m.sensors = data.manifest.sensors.clone();
        m.normalization = data.manifest.normalization.clone();
        m.source_region = crate::geometry::SourceRegion::new(crate::geometry::Aabb::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap());
        let ens = Ensemble::single(DeepONet::init(tiny_config(data.sensor_count()), 1), m);
        let map = error_map(&ens, &data, 0, 2).unwrap();
        assert_eq!(map.coords.len(), data.n_nodes());
        for i in 0..map.reference.len() {
            assert_eq!(map.abs_error[i], (map.reference[i] - map.predicted[i]).abs());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        map.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[2], map.reference[0]);
        assert_eq!(row[3], map.predicted[0]);

        let pairs = evaluate_pairs(&ens, &data, &[vec![0.5, 0.5], vec![1.5, 1.5]]).unwrap();
        assert_eq!(pairs.len(), 2);
        let node = data.nearest_node(&[0.5, 0.5]);
        let r = reference_ir(&data, 0, node);
        let zero = (r.pressures.iter().map(|p| p * p).sum::<f64>() / r.pressures.len() as f64).sqrt();
        assert_eq!(pairs[0].zero_rmse, zero);
    }
}
