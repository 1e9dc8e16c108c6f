//! Modified MLP with sine activations, trigonometric input encoding, and ADAM.
//!
//! Forward pass for input rows `X`:
//!
//! ```text
//! U = sin(w0 (X Wu + bu))          V = sin(w0 (X Wv + bv))
//! H_0 = X
//! Z_i = sin(s_i (H_i W_i + b_i))   s_0 = w0, s_i = hidden_scale otherwise
//! H_{i+1} = (1 - Z_i) * U + Z_i * V
//! Y = H_n Wout + bout
//! ```
//!
//! Gradients are derived by hand for this fixed structure.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `gamma(x) = [x, cos(2 pi f_j x_d), sin(2 pi f_j x_d), ...]`, for each
/// coordinate `d` then each frequency `j`. Frequencies are in cycles per
/// normalised unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierEncoding {
    pub frequencies: Vec<f64>,
}

impl FourierEncoding {
    pub fn output_width(&self, d: usize) -> usize {
        d + 2 * d * self.frequencies.len()
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (rows, d) = x.dim();
        let m = self.frequencies.len();
        let mut out = Array2::zeros((rows, self.output_width(d)));
        for (mut o, xr) in out.outer_iter_mut().zip(x.outer_iter()) {
            for k in 0..d {
                o[k] = xr[k];
                for (j, f) in self.frequencies.iter().enumerate() {
                    let (s, c) = (std::f64::consts::TAU * f * xr[k]).sin_cos();
                    o[d + 2 * (k * m + j)] = c;
                    o[d + 2 * (k * m + j) + 1] = s;
                }
            }
        }
        out
    }
}

/// Uniform initialisation bounds `sqrt(6 / fan_in) / k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub k_first: f64,
    pub k_hidden: f64,
    /// Angular frequency multiplier of the encoders and the first hidden layer.
    pub w0: f64,
    /// Multiplier inside the sine of the deeper hidden layers.
    pub hidden_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            k_first: 1.0,
            k_hidden: 30.0,
            w0: 30.0,
            hidden_scale: 1.0,
        }
    }
}

pub fn init_bound(fan_in: usize, k: f64) -> f64 {
    (6.0 / fan_in as f64).sqrt() / k
}

/// Affine layer `x W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Weights and biases from `U(-bound, bound)`.
    pub fn uniform(fan_in: usize, fan_out: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
        let b = Array1::from_shape_simple_fn(fan_out, &mut draw);
        Self { w, b }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }
}

/// Layer sizes of a modified MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModMlp {
    pub enc_u: Linear,
    pub enc_v: Linear,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub w0: f64,
    pub hidden_scale: f64,
}

/// Intermediates recorded by [`ModMlp::forward_cached`].
pub struct MlpCache {
    x: Array2<f64>,
    a_u: Array2<f64>,
    a_v: Array2<f64>,
    u: Array2<f64>,
    v: Array2<f64>,
    /// Inputs `H_i` of each hidden layer.
    h: Vec<Array2<f64>>,
    a: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    h_last: Array2<f64>,
}

/// Gradient with the same layout as [`ModMlp`].
pub type ModMlpGrad = ModMlp;

impl ModMlp {
    pub fn init(shape: &MlpShape, cfg: &InitConfig, rng: &mut ChaCha8Rng) -> Self {
        let first = init_bound(shape.input, cfg.k_first);
        let enc_u = Linear::uniform(shape.input, shape.width, first, rng);
        let enc_v = Linear::uniform(shape.input, shape.width, first, rng);
        let mut hidden = Vec::with_capacity(shape.hidden_layers);
        for i in 0..shape.hidden_layers {
            let (fan_in, k) = if i == 0 {
                (shape.input, cfg.k_first)
            } else {
                (shape.width, cfg.k_hidden)
            };
            hidden.push(Linear::uniform(fan_in, shape.width, init_bound(fan_in, k), rng));
        }
        let last_in = if shape.hidden_layers == 0 { shape.input } else { shape.width };
        let out = Linear::uniform(last_in, shape.output, init_bound(last_in, cfg.k_hidden), rng);
        Self {
            enc_u,
            enc_v,
            hidden,
            out,
            w0: cfg.w0,
            hidden_scale: cfg.hidden_scale,
        }
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.enc_u.fan_in(),
            width: self.enc_u.fan_out(),
            hidden_layers: self.hidden.len(),
            output: self.out.fan_out(),
        }
    }

    pub fn zeros_like(&self) -> ModMlpGrad {
        let z = |l: &Linear| Linear::zeros(l.fan_in(), l.fan_out());
        ModMlp {
            enc_u: z(&self.enc_u),
            enc_v: z(&self.enc_v),
            hidden: self.hidden.iter().map(z).collect(),
            out: z(&self.out),
            w0: self.w0,
            hidden_scale: self.hidden_scale,
        }
    }

    fn scale(&self, i: usize) -> f64 {
        if i == 0 {
            self.w0
        } else {
            self.hidden_scale
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.enc_u.fan_in() {
            return Err(Error::ShapeMismatch {
                what: "network input width".into(),
                expected: self.enc_u.fan_in(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let w0 = self.w0;
        let u = self.enc_u.apply(x).mapv_into(|a| (w0 * a).sin());
        let v = self.enc_v.apply(x).mapv_into(|a| (w0 * a).sin());
        let diff = &v - &u;
        let mut h = x.to_owned();
        for (i, layer) in self.hidden.iter().enumerate() {
            let s = self.scale(i);
            let mut z = layer.apply(h.view());
            Zip::from(&mut z).and(&u).and(&diff).for_each(|z, &u, &d| *z = u + (s * *z).sin() * d);
            h = z;
        }
        Ok(self.out.apply(h.view()))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let w0 = self.w0;
        let a_u = self.enc_u.apply(x);
        let a_v = self.enc_v.apply(x);
        let u = a_u.mapv(|a| (w0 * a).sin());
        let v = a_v.mapv(|a| (w0 * a).sin());
        let mut hs = Vec::with_capacity(self.hidden.len());
        let mut as_ = Vec::with_capacity(self.hidden.len());
        let mut zs = Vec::with_capacity(self.hidden.len());
        let mut h = x.to_owned();
        for (i, layer) in self.hidden.iter().enumerate() {
            let s = self.scale(i);
            let a = layer.apply(h.view());
            let z = a.mapv(|a| (s * a).sin());
            let mut next = u.clone();
            Zip::from(&mut next).and(&z).and(&v).for_each(|n, &z, &v| *n += z * (v - *n));
            hs.push(std::mem::replace(&mut h, next));
            as_.push(a);
            zs.push(z);
        }
        let y = self.out.apply(h.view());
        Ok((
            y,
            MlpCache {
                x: x.to_owned(),
                a_u,
                a_v,
                u,
                v,
                h: hs,
                a: as_,
                z: zs,
                h_last: h,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dy` into `grad`.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>, grad: &mut ModMlpGrad) {
        grad.out.w += &cache.h_last.t().dot(&dy);
        grad.out.b += &dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&self.out.w.t());
        let mut du = Array2::<f64>::zeros(cache.u.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for i in (0..self.hidden.len()).rev() {
            let s = self.scale(i);
            let z = &cache.z[i];
            Zip::from(&mut du).and(&mut dv).and(&dh).and(z).for_each(|du, dv, &dh, &z| {
                *du += dh * (1.0 - z);
                *dv += dh * z;
            });
            let mut da = Array2::zeros(z.raw_dim());
            Zip::from(&mut da)
                .and(&dh)
                .and(&cache.a[i])
                .and(&cache.u)
                .and(&cache.v)
                .for_each(|da, &dh, &a, &u, &v| *da = dh * (v - u) * s * (s * a).cos());
            grad.hidden[i].w += &cache.h[i].t().dot(&da);
            grad.hidden[i].b += &da.sum_axis(Axis(0));
            if i > 0 {
                dh = da.dot(&self.hidden[i].w.t());
            }
        }
        if self.hidden.is_empty() {
            // Without hidden layers the output reads the raw input.
            return;
        }
        let w0 = self.w0;
        Zip::from(&mut du).and(&cache.a_u).for_each(|d, &a| *d *= w0 * (w0 * a).cos());
        Zip::from(&mut dv).and(&cache.a_v).for_each(|d, &a| *d *= w0 * (w0 * a).cos());
        grad.enc_u.w += &cache.x.t().dot(&du);
        grad.enc_u.b += &du.sum_axis(Axis(0));
        grad.enc_v.w += &cache.x.t().dot(&dv);
        grad.enc_v.b += &dv.sum_axis(Axis(0));
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![("enc_u".to_string(), &self.enc_u), ("enc_v".to_string(), &self.enc_v)];
        out.extend(self.hidden.iter().enumerate().map(|(i, l)| (format!("hidden{i}"), l)));
        out.push(("out".to_string(), &self.out));
        out
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.w"), l.w.as_slice().expect("standard layout")),
                    (format!("{name}.b"), l.b.as_slice().expect("standard layout")),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut layers: Vec<(String, &mut Linear)> =
            vec![("enc_u".to_string(), &mut self.enc_u), ("enc_v".to_string(), &mut self.enc_v)];
        layers.extend(self.hidden.iter_mut().enumerate().map(|(i, l)| (format!("hidden{i}"), l)));
        layers.push(("out".to_string(), &mut self.out));
        layers
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.w"), l.w.as_slice_mut().expect("standard layout")),
                    (format!("{name}.b"), l.b.as_slice_mut().expect("standard layout")),
                ]
            })
            .collect()
    }
}

/// ADAM hyper-parameters with elementwise clipping and exponential decay
/// `lr(it) = lr * decay_rate^(it / decay_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    /// Elementwise gradient clip; 0 disables.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.9,
            decay_steps: 2000.0,
            clip: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * self.decay_rate.powf(iteration as f64 / self.decay_steps)
    }

    fn clip(&self, g: f64) -> f64 {
        if self.clip > 0.0 {
            g.clamp(-self.clip, self.clip)
        } else {
            g
        }
    }
}

/// Moment accumulators for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One descent step over all blocks. Blocks with `trainable[i] == false`
    /// are left untouched, moments included. Every gradient is checked for
    /// finiteness before anything is modified.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [(String, &mut [f64])],
        grads: &[&[f64]],
        trainable: &[bool],
    ) -> Result<f64> {
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    what: name.clone(),
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { block: name.clone() });
            }
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.step as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.step as f64);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = cfg.clip(g[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn encoding_examples() {
        let enc = FourierEncoding {
            frequencies: vec![0.5, 0.25, 1.0 / 6.0],
        };
        assert_eq!(enc.output_width(4), 28);
        let z = enc.encode(Array2::zeros((1, 4)).view());
        for k in 0..4 {
            for j in 0..3 {
                assert_eq!(z[[0, 4 + 2 * (k * 3 + j)]], 1.0);
                assert_eq!(z[[0, 4 + 2 * (k * 3 + j) + 1]], 0.0);
            }
        }
        let x = array![[0.3, -0.7]];
        let a = enc.encode(x.view());
        for (j, f) in enc.frequencies.iter().enumerate() {
            let mut y = x.clone();
            y[[0, 1]] += 1.0 / f;
            let b = enc.encode(y.view());
            let c = 2 + 2 * (3 + j);
            assert!((a[[0, c]] - b[[0, c]]).abs() < 1e-12);
            assert!((a[[0, c + 1]] - b[[0, c + 1]]).abs() < 1e-12);
        }
        assert_eq!(a[[0, 0]], 0.3);
    }

    #[test]
    fn init_bounds() {
        assert!((init_bound(2048, 30.0) - 1.804e-3).abs() < 1e-6);
        assert!((init_bound(2048, 1.0) - 0.05413).abs() < 1e-5);
        let shape = MlpShape {
            input: 2048,
            width: 64,
            hidden_layers: 2,
            output: 8,
        };
        let net = ModMlp::init(&shape, &InitConfig::default(), &mut rng(3));
        let max = |l: &Linear| l.w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max(&net.enc_u) <= init_bound(2048, 1.0));
        assert!(max(&net.hidden[0]) <= init_bound(2048, 1.0));
        assert!(max(&net.hidden[1]) <= init_bound(64, 30.0));
        assert!(max(&net.out) <= init_bound(64, 30.0));
        assert_eq!(net, ModMlp::init(&shape, &InitConfig::default(), &mut rng(3)));
        assert_ne!(net, ModMlp::init(&shape, &InitConfig::default(), &mut rng(4)));
    }

    fn small_net(seed: u64) -> ModMlp {
        let shape = MlpShape {
            input: 3,
            width: 5,
            hidden_layers: 2,
            output: 2,
        };
        ModMlp::init(&shape, &InitConfig::default(), &mut rng(seed))
    }

    #[test]
    fn equal_encoders_make_hidden_state_u() {
        let mut net = small_net(1);
        net.enc_v = net.enc_u.clone();
        let x = array![[0.1, -0.2, 0.3], [0.5, 0.0, -0.4]];
        let y = net.forward(x.view()).unwrap();
        let u = net.enc_u.apply(x.view()).mapv(|a| (30.0 * a).sin());
        let expected = net.out.apply(u.view());
        assert!((&y - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn gate_extremes_select_encoders() {
        let x = array![[0.1, -0.2, 0.3]];
        for (bias, pick_v) in [(0.0, false), (std::f64::consts::FRAC_PI_2, true)] {
            let mut net = small_net(2);
            for (i, l) in net.hidden.iter_mut().enumerate() {
                l.w.fill(0.0);
                let s = if i == 0 { net.w0 } else { net.hidden_scale };
                l.b.fill(bias / s);
            }
            let y = net.forward(x.view()).unwrap();
            let enc = if pick_v { &net.enc_v } else { &net.enc_u };
            let h = enc.apply(x.view()).mapv(|a| (30.0 * a).sin());
            let expected = net.out.apply(h.view());
            assert!((&y - &expected).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn cached_forward_agrees_and_activations_are_bounded() {
        let net = small_net(5);
        let x = array![[0.9, -0.9, 0.2], [-0.5, 0.3, 0.1]];
        let (y, cache) = net.forward_cached(x.view()).unwrap();
        assert_eq!(y, net.forward(x.view()).unwrap());
        for a in cache.z.iter().chain([&cache.u, &cache.v]) {
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
        assert!(net.forward(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn adam_schedule_clip_and_zero_gradient() {
        let cfg = AdamConfig::default();
        assert!((cfg.lr_at(2000) - 9e-4).abs() < 1e-15);
        assert_eq!(cfg.clip(5.0), 0.1);

        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(&[2]);
        let g = [0.0, 0.0];
        st.step(&cfg, &mut [("p".into(), &mut p[..])], &[&g], &[true]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);

        // With clipping, a huge and a clip-sized gradient give the same first step.
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        AdamState::new(&[1]).step(&cfg, &mut [("a".into(), &mut a[..])], &[&[5.0]], &[true]).unwrap();
        AdamState::new(&[1]).step(&cfg, &mut [("b".into(), &mut b[..])], &[&[0.1]], &[true]).unwrap();
        assert_eq!(a, b);
        assert!((a[0] + 1e-3).abs() < 1e-9);

        let mut c = [0.0];
        let err = AdamState::new(&[1])
            .step(&cfg, &mut [("blk".into(), &mut c[..])], &[&[f64::NAN]], &[true])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { block } if block == "blk"));

        let mut d = vec![0.5];
        let mut st = AdamState::new(&[1]);
        st.step(&cfg, &mut [("d".into(), &mut d[..])], &[&[1.0]], &[false]).unwrap();
        assert_eq!(d, vec![0.5]);
        assert_eq!(st.m[0], vec![0.0]);
    }
}
