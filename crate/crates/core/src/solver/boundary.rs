//! Impedance boundary models.
//!
//! Admittances are normalised by the characteristic admittance `1/(rho0 c)`,
//! so a frequency-independent wall of normalised impedance `xi` is the same
//! wall as a rational admittance with `y_inf = 1/xi` and no poles. The `e^{-i w t}`
//! time convention is used throughout.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealPole {
    /// Residue `A_k`.
    pub a: f64,
    /// Pole `lambda_k > 0`.
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexPair {
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Partial-fraction admittance
/// `Y(w) = Y_inf + sum A/(lambda - iw) + sum [(B+iC)/(alpha+i beta-iw) + (B-iC)/(alpha-i beta-iw)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalAdmittance {
    pub y_inf: f64,
    #[serde(default)]
    pub real_poles: Vec<RealPole>,
    #[serde(default)]
    pub complex_pairs: Vec<ComplexPair>,
}

impl RationalAdmittance {
    pub fn validate(&self) -> Result<()> {
        if self.real_poles.iter().any(|p| !(p.lambda > 0.0)) {
            return Err(crate::error::invalid("real poles must satisfy lambda > 0"));
        }
        if self.complex_pairs.iter().any(|p| !(p.alpha > 0.0)) {
            return Err(crate::error::invalid("complex pole pairs must satisfy alpha > 0"));
        }
        Ok(())
    }

    /// Evaluates the admittance at angular frequency `omega`.
    pub fn eval(&self, omega: f64) -> Complex64 {
        let iw = Complex64::new(0.0, omega);
        let mut y = Complex64::new(self.y_inf, 0.0);
        for p in &self.real_poles {
            y += p.a / (p.lambda - iw);
        }
        for p in &self.complex_pairs {
            let num_pos = Complex64::new(p.b, p.c);
            let num_neg = Complex64::new(p.b, -p.c);
            y += num_pos / (Complex64::new(p.alpha, p.beta) - iw);
            y += num_neg / (Complex64::new(p.alpha, -p.beta) - iw);
        }
        y
    }

    /// Static admittance: the steady state under constant pressure.
    pub fn dc(&self) -> f64 {
        self.y_inf
            + self.real_poles.iter().map(|p| p.a / p.lambda).sum::<f64>()
            + self
                .complex_pairs
                .iter()
                .map(|p| 2.0 * (p.b * p.alpha + p.c * p.beta) / (p.alpha.powi(2) + p.beta.powi(2)))
                .sum::<f64>()
    }

    /// Rescales the time axis: coefficients given per physical second become
    /// coefficients per `time_scale` seconds (e.g. `1/c_phys` for a simulation
    /// run with `c = 1`).
    pub fn rescale_time(&self, time_scale: f64) -> Self {
        Self {
            y_inf: self.y_inf,
            real_poles: self
                .real_poles
                .iter()
                .map(|p| RealPole {
                    a: p.a * time_scale,
                    lambda: p.lambda * time_scale,
                })
                .collect(),
            complex_pairs: self
                .complex_pairs
                .iter()
                .map(|p| ComplexPair {
                    b: p.b * time_scale,
                    c: p.c * time_scale,
                    alpha: p.alpha * time_scale,
                    beta: p.beta * time_scale,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoundaryModel {
    FreqIndependent { xi_imp: f64 },
    FreqDependent(RationalAdmittance),
}

impl BoundaryModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            BoundaryModel::FreqIndependent { xi_imp } if !(*xi_imp > 0.0) => Err(
                crate::error::invalid(format!("xi_imp must be > 0, got {xi_imp}")),
            ),
            BoundaryModel::FreqIndependent { .. } => Ok(()),
            BoundaryModel::FreqDependent(y) => y.validate(),
        }
    }

    pub fn is_frequency_dependent(&self) -> bool {
        matches!(self, BoundaryModel::FreqDependent(_))
    }

    /// Normalised admittance at `omega`.
    pub fn admittance(&self, omega: f64) -> Complex64 {
        match self {
            BoundaryModel::FreqIndependent { xi_imp } => Complex64::new(1.0 / xi_imp, 0.0),
            BoundaryModel::FreqDependent(y) => y.eval(omega),
        }
    }

    pub fn rescale_time(&self, time_scale: f64) -> Self {
        match self {
            BoundaryModel::FreqIndependent { .. } => self.clone(),
            BoundaryModel::FreqDependent(y) => BoundaryModel::FreqDependent(y.rescale_time(time_scale)),
        }
    }
}

/// Accumulators of one boundary node: `phi` per real pole, `(psi0, psi1)` per pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccumulatorState {
    pub phi: Vec<f64>,
    pub psi0: Vec<f64>,
    pub psi1: Vec<f64>,
}

impl AccumulatorState {
    pub fn zeros(model: &RationalAdmittance) -> Self {
        Self {
            phi: vec![0.0; model.real_poles.len()],
            psi0: vec![0.0; model.complex_pairs.len()],
            psi1: vec![0.0; model.complex_pairs.len()],
        }
    }
}

/// `v_n = Y_inf p + sum A_k phi_k + sum 2 (B_k psi0_k + C_k psi1_k)`.
pub fn boundary_velocity(p: f64, state: &AccumulatorState, model: &RationalAdmittance) -> f64 {
    let mut v = model.y_inf * p;
    for (pole, phi) in model.real_poles.iter().zip(&state.phi) {
        v += pole.a * phi;
    }
    for ((pair, s0), s1) in model.complex_pairs.iter().zip(&state.psi0).zip(&state.psi1) {
        v += 2.0 * (pair.b * s0 + pair.c * s1);
    }
    v
}

#[derive(Clone, Copy, Debug)]
struct RealStep {
    decay: f64,
    drive: f64,
}

#[derive(Clone, Copy, Debug)]
struct PairStep {
    /// Row-major 2x2 propagator.
    r: [f64; 4],
    /// Response to a unit of `p_old + p_new`.
    s: [f64; 2],
}

/// Trapezoidal-rule integrator for the accumulator ODEs
/// `phi' + lambda phi = p`, `psi0' + alpha psi0 + beta psi1 = p`,
/// `psi1' + alpha psi1 - beta psi0 = 0` at a fixed step.
#[derive(Clone, Debug)]
pub struct AdeIntegrator {
    model: RationalAdmittance,
    dt: f64,
    real: Vec<RealStep>,
    pairs: Vec<PairStep>,
    /// `d v_new / d p_new` for the implicit boundary solve.
    gain: f64,
}

impl AdeIntegrator {
    pub fn new(model: &RationalAdmittance, dt: f64) -> Result<Self> {
        model.validate()?;
        if !(dt > 0.0) {
            return Err(crate::error::invalid("ADE time step must be positive"));
        }
        let h = 0.5 * dt;
        let real: Vec<RealStep> = model
            .real_poles
            .iter()
            .map(|p| {
                let den = 1.0 + h * p.lambda;
                RealStep {
                    decay: (1.0 - h * p.lambda) / den,
                    drive: h / den,
                }
            })
            .collect();
        let pairs: Vec<PairStep> = model
            .complex_pairs
            .iter()
            .map(|p| {
                // (I - hM) psi_new = (I + hM) psi_old + h (p_old + p_new) e1,
                // M = [[-alpha, -beta], [beta, -alpha]].
                let a = 1.0 + h * p.alpha;
                let hb = h * p.beta;
                let det = a * a + hb * hb;
                let inv = [a / det, -hb / det, hb / det, a / det];
                let plus = [1.0 - h * p.alpha, -hb, hb, 1.0 - h * p.alpha];
                let r = [
                    inv[0] * plus[0] + inv[1] * plus[2],
                    inv[0] * plus[1] + inv[1] * plus[3],
                    inv[2] * plus[0] + inv[3] * plus[2],
                    inv[2] * plus[1] + inv[3] * plus[3],
                ];
                PairStep {
                    r,
                    s: [inv[0] * h, inv[2] * h],
                }
            })
            .collect();
        let gain = model.y_inf
            + model.real_poles.iter().zip(&real).map(|(p, s)| p.a * s.drive).sum::<f64>()
            + model
                .complex_pairs
                .iter()
                .zip(&pairs)
                .map(|(p, s)| 2.0 * (p.b * s.s[0] + p.c * s.s[1]))
                .sum::<f64>();
        Ok(Self {
            model: model.clone(),
            dt,
            real,
            pairs,
            gain,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn model(&self) -> &RationalAdmittance {
        &self.model
    }

    /// Advances `state` across one step where pressure moves from `p_old` to `p_new`.
    pub fn update(&self, state: &mut AccumulatorState, p_old: f64, p_new: f64) {
        let sum = p_old + p_new;
        for (phi, s) in state.phi.iter_mut().zip(&self.real) {
            *phi = s.decay * *phi + s.drive * sum;
        }
        for ((s0, s1), s) in state.psi0.iter_mut().zip(state.psi1.iter_mut()).zip(&self.pairs) {
            let a = *s0;
            let b = *s1;
            *s0 = s.r[0] * a + s.r[1] * b + s.s[0] * sum;
            *s1 = s.r[2] * a + s.r[3] * b + s.s[1] * sum;
        }
    }

    /// Splits `v_new = gain * p_new + offset` given the current state and `p_old`.
    pub(crate) fn affine_velocity(&self, state: &AccumulatorState, p_old: f64) -> (f64, f64) {
        let m = &self.model;
        let mut offset = 0.0;
        for ((pole, phi), s) in m.real_poles.iter().zip(&state.phi).zip(&self.real) {
            offset += pole.a * (s.decay * phi + s.drive * p_old);
        }
        for (((pair, s0), s1), s) in m
            .complex_pairs
            .iter()
            .zip(&state.psi0)
            .zip(&state.psi1)
            .zip(&self.pairs)
        {
            let n0 = s.r[0] * s0 + s.r[1] * s1 + s.s[0] * p_old;
            let n1 = s.r[2] * s0 + s.r[3] * s1 + s.s[1] * p_old;
            offset += 2.0 * (pair.b * n0 + pair.c * n1);
        }
        (self.gain, offset)
    }
}

/// Advances accumulators by one trapezoidal step. Convenience wrapper over
/// [`AdeIntegrator::update`] for one-off use.
pub fn update_accumulators(
    state: &AccumulatorState,
    p_old: f64,
    p_new: f64,
    dt: f64,
    model: &RationalAdmittance,
) -> Result<AccumulatorState> {
    let integ = AdeIntegrator::new(model, dt)?;
    let mut next = state.clone();
    integ.update(&mut next, p_old, p_new);
    Ok(next)
}

/// Complex amplitude of `signal` at angular frequency `omega` under the
/// `e^{-i w t}` convention, fitted by least squares on `[cos, sin]`.
pub fn phasor(times: &[f64], signal: &[f64], omega: f64) -> Result<Complex64> {
    if times.len() != signal.len() || times.len() < 3 {
        return Err(Error::ShapeMismatch {
            what: "phasor samples".into(),
            expected: times.len(),
            got: signal.len(),
        });
    }
    // s(t) = a cos(wt) + b sin(wt) = Re[(a + i b) e^{-iwt}].
    let (mut cc, mut cs, mut ss, mut yc, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in times.iter().zip(signal) {
        let (s, c) = (omega * t).sin_cos();
        cc += c * c;
        cs += c * s;
        ss += s * s;
        yc += y * c;
        ys += y * s;
    }
    let det = cc * ss - cs * cs;
    let a = (yc * ss - ys * cs) / det;
    let b = (ys * cc - yc * cs) / det;
    Ok(Complex64::new(a, b))
}

/// Drives one boundary node with `p(t) = sin(omega t)` for `periods` periods
/// and returns the measured `V/P` phasor ratio over the final `fit_periods`.
pub fn driven_admittance(
    model: &RationalAdmittance,
    omega: f64,
    dt: f64,
    periods: usize,
    fit_periods: usize,
) -> Result<Complex64> {
    let integ = AdeIntegrator::new(model, dt)?;
    let period = std::f64::consts::TAU / omega;
    let steps = (periods as f64 * period / dt).round() as usize;
    let fit_start = steps.saturating_sub((fit_periods as f64 * period / dt).round() as usize);
    let mut state = AccumulatorState::zeros(model);
    let mut p_old = 0.0;
    let mut times = Vec::new();
    let mut pres = Vec::new();
    let mut vel = Vec::new();
    for n in 1..=steps {
        let t = n as f64 * dt;
        let p_new = (omega * t).sin();
        integ.update(&mut state, p_old, p_new);
        p_old = p_new;
        if n >= fit_start {
            times.push(t);
            pres.push(p_new);
            vel.push(boundary_velocity(p_new, &state, model));
        }
    }
    Ok(phasor(&times, &vel, omega)? / phasor(&times, &pres, omega)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pole(a: f64, lambda: f64) -> RationalAdmittance {
        RationalAdmittance {
            y_inf: 0.0,
            real_poles: vec![RealPole { a, lambda }],
            complex_pairs: vec![],
        }
    }

    fn mixed() -> RationalAdmittance {
        RationalAdmittance {
            y_inf: 0.1,
            real_poles: vec![RealPole { a: 0.7, lambda: 2.0 }],
            complex_pairs: vec![ComplexPair {
                b: 0.3,
                c: -0.2,
                alpha: 1.5,
                beta: 4.0,
            }],
        }
    }

    #[test]
    fn constant_pressure_matches_closed_form() {
        let m = single_pole(1.0, 1.0);
        let integ = AdeIntegrator::new(&m, 0.01).unwrap();
        let mut s = AccumulatorState::zeros(&m);
        let mut p_old = 1.0;
        for _ in 0..100 {
            integ.update(&mut s, p_old, 1.0);
            p_old = 1.0;
        }
        let exact = 1.0 - (-1.0f64).exp();
        assert!((s.phi[0] - exact).abs() < 1e-4, "{} vs {exact}", s.phi[0]);
    }

    #[test]
    fn homogeneous_decay_is_monotone() {
        let m = single_pole(1.0, 3.0);
        let integ = AdeIntegrator::new(&m, 0.05).unwrap();
        let mut s = AccumulatorState { phi: vec![2.0], psi0: vec![], psi1: vec![] };
        let mut last = 2.0;
        for _ in 0..200 {
            integ.update(&mut s, 0.0, 0.0);
            assert!(s.phi[0].abs() < last);
            last = s.phi[0].abs();
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn pair_without_rotation_tracks_real_pole() {
        let real = single_pole(1.0, 2.5);
        let pair = RationalAdmittance {
            y_inf: 0.0,
            real_poles: vec![],
            complex_pairs: vec![ComplexPair { b: 1.0, c: 0.0, alpha: 2.5, beta: 0.0 }],
        };
        let ir = AdeIntegrator::new(&real, 0.01).unwrap();
        let ip = AdeIntegrator::new(&pair, 0.01).unwrap();
        let (mut sr, mut sp) = (AccumulatorState::zeros(&real), AccumulatorState::zeros(&pair));
        let mut p_old = 0.0;
        for n in 1..500 {
            let p = (0.05 * n as f64).sin();
            ir.update(&mut sr, p_old, p);
            ip.update(&mut sp, p_old, p);
            p_old = p;
            assert!((sr.phi[0] - sp.psi0[0]).abs() < 1e-14);
            assert_eq!(sp.psi1[0], 0.0);
        }
    }

    #[test]
    fn velocity_combination() {
        let m = RationalAdmittance { y_inf: 0.4, ..single_pole(2.0, 1.0) };
        let zero = AccumulatorState::zeros(&m);
        assert_eq!(boundary_velocity(2.5, &zero, &m), 1.0);
        let m = single_pole(2.0, 1.0);
        let s = AccumulatorState { phi: vec![0.5], psi0: vec![], psi1: vec![] };
        assert_eq!(boundary_velocity(7.0, &s, &m), 1.0);
    }

    #[test]
    fn steady_state_under_constant_pressure_is_dc_admittance() {
        let m = mixed();
        let integ = AdeIntegrator::new(&m, 0.002).unwrap();
        let mut s = AccumulatorState::zeros(&m);
        for _ in 0..20_000 {
            integ.update(&mut s, 1.0, 1.0);
        }
        let v = boundary_velocity(1.0, &s, &m);
        assert!((v - m.dc()).abs() < 1e-9, "{v} vs {}", m.dc());
        assert!((m.eval(0.0).re - m.dc()).abs() < 1e-12);
    }

    #[test]
    fn admittance_limits_and_symmetry() {
        let m = mixed();
        assert!((m.eval(1e9) - Complex64::new(m.y_inf, 0.0)).norm() < 1e-8);
        let single = RationalAdmittance { y_inf: 0.2, ..single_pole(3.0, 1.5) };
        assert!((single.eval(0.0).re - (0.2 + 2.0)).abs() < 1e-12);
        for w in [0.3, 1.0, 7.5] {
            assert!((m.eval(-w) - m.eval(w).conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn driven_node_matches_rational_admittance() {
        let m = mixed();
        for omega in [0.5, 2.0, 6.0] {
            let measured = driven_admittance(&m, omega, 1e-3, 40, 10).unwrap();
            let expected = m.eval(omega);
            assert!((measured - expected).norm() / expected.norm() < 1e-3, "{measured} vs {expected}");
        }
    }

    #[test]
    fn rescaled_time_preserves_response() {
        let m = mixed();
        let scaled = m.rescale_time(1.0 / 343.0);
        let w = 5.0;
        assert!((m.eval(w) - scaled.eval(w / 343.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_poles_are_rejected() {
        assert!(AdeIntegrator::new(&single_pole(1.0, -1.0), 0.1).is_err());
        assert!(BoundaryModel::FreqIndependent { xi_imp: 0.0 }.validate().is_err());
    }
}
