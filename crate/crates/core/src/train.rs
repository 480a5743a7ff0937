//! Rectified-flow training of a small tanh MLP on 2-D toy distributions.
//!
//! The loss is `E || (X1 - X0) - v(X_t, t) ||^2` with `X_t = t X1 + (1 - t) X0`,
//! `X0` drawn from the data distribution and `X1 ~ N(0, I)`. Gradients are
//! computed by an explicit reverse pass over the layers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::field::{ConditionId, VelocityField};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

/// Training aborts once the batch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// `v(z, t) = MLP([z, t])` with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    layers: Vec<Layer>,
    data_dim: usize,
}

impl MlpField {
    /// Randomly initialised network, weights uniform in `+-1/sqrt(fan_in)`.
    pub fn new(data_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        ensure!(data_dim > 0, "data dimension must be positive");
        ensure!(hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![data_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { layers, data_dim })
    }

    /// Default geometry: three hidden layers of 64 units.
    pub fn default_2d(seed: u64) -> Self {
        Self::new(2, &[64, 64, 64], seed).expect("valid geometry")
    }

    pub fn from_layers(data_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        ensure!(!layers.is_empty(), "network needs at least one layer");
        let mut fan_in = data_dim + 1;
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.dim();
            ensure!(
                inp == fan_in && layer.bias.len() == out,
                "layer {i} has shape {out}x{inp} (bias {}), expected input width {fan_in}",
                layer.bias.len()
            );
            ensure!(
                layer
                    .weight
                    .iter()
                    .chain(layer.bias.iter())
                    .all(|x| x.is_finite()),
                "layer {i} has non-finite parameters"
            );
            fan_in = out;
        }
        ensure!(
            fan_in == data_dim,
            "output width {fan_in} != data dimension {data_dim}"
        );
        Ok(Self { layers, data_dim })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weight (row-major) then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
    }

    fn forward_cached(&self, input: Array2<f64>) -> Vec<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&l.weight.t()) + &l.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    fn input_matrix(&self, states: &[f64], times: impl Fn(usize) -> f64) -> Array2<f64> {
        let d = self.data_dim;
        let rows = states.len() / d;
        Array2::from_shape_fn(
            (rows, d + 1),
            |(r, c)| {
                if c < d {
                    states[r * d + c]
                } else {
                    times(r)
                }
            },
        )
    }

    /// Writes one `.rft` file per parameter tensor plus `manifest.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("data_dim={}\nlayers={}\n", self.data_dim, self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (out, inp) = l.weight.dim();
            let w = Tensor::new(vec![out, inp], l.weight.iter().copied().collect())?;
            let b = Tensor::new(vec![out], l.bias.to_vec())?;
            write_tensor(&w, dir.join(format!("layer{i}.weight.rft")))?;
            write_tensor(&b, dir.join(format!("layer{i}.bias.rft")))?;
            writeln!(manifest, "layer{i}.weight={out}x{inp}").unwrap();
            writeln!(manifest, "layer{i}.bias={out}").unwrap();
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut data_dim = None;
        let mut count = None;
        for line in text.lines() {
            match line.split_once('=') {
                Some(("data_dim", v)) => data_dim = v.trim().parse::<usize>().ok(),
                Some(("layers", v)) => count = v.trim().parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(data_dim), Some(count)) = (data_dim, count) else {
            return Err(Error::CorruptFile {
                path,
                reason: "manifest missing data_dim or layers".into(),
            });
        };
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let w = read_tensor(dir.join(format!("layer{i}.weight.rft")))?;
            let b = read_tensor(dir.join(format!("layer{i}.bias.rft")))?;
            ensure!(
                w.shape().len() == 2 && b.shape().len() == 1,
                "layer {i} parameter files have wrong rank"
            );
            let weight =
                Array2::from_shape_vec((w.shape()[0], w.shape()[1]), w.into_data()).expect("shape checked");
            layers.push(Layer {
                weight,
                bias: Array1::from(b.into_data()),
            });
        }
        Self::from_layers(data_dim, layers)
    }
}

impl VelocityField for MlpField {
    fn name(&self) -> String {
        "mlp".into()
    }

    fn dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, state: &Tensor, t: f64, _condition: Option<ConditionId>) -> Result<Tensor> {
        let input = self.input_matrix(state.data(), |_| t);
        let out = self.forward_cached(input).pop().unwrap();
        Tensor::new(state.shape().to_vec(), out.into_iter().collect())
    }
}

/// Parameter-shaped gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    /// Same ordering as [`MlpField::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// Batch loss and its exact gradient. `x0` and `x1` are `[B, d]` (or `[d]` for
/// a single sample) and `t` holds one time per sample.
pub fn rf_loss_batch(field: &MlpField, x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<(f64, Gradients)> {
    ensure!(x0.shape() == x1.shape(), "x0 and x1 shapes differ");
    ensure!(field.accepts(x0.shape()), "batch does not match field dimension");
    let d = field.data_dim;
    let batch = x0.len() / d;
    ensure!(t.len() == batch, "expected {batch} times, got {}", t.len());
    ensure!(
        t.iter().all(|s| (0.0..=1.0).contains(s)),
        "interpolation times must lie in [0, 1]"
    );

    let xt: Vec<f64> = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(i, (a, b))| t[i / d] * b + (1.0 - t[i / d]) * a)
        .collect();
    let acts = field.forward_cached(field.input_matrix(&xt, |r| t[r]));
    let out = acts.last().unwrap();

    let target = Array2::from_shape_fn((batch, d), |(r, c)| x1.data()[r * d + c] - x0.data()[r * d + c]);
    let resid = out - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / batch as f64;
    if !loss.is_finite() {
        return Err(Error::LossDivergence { step: 0, loss });
    }

    // Reverse pass.
    let mut delta = resid * (2.0 / batch as f64);
    let mut grads = Vec::with_capacity(field.layers.len());
    for (i, layer) in field.layers.iter().enumerate().rev() {
        let input = &acts[i];
        grads.push(Layer {
            weight: delta.t().dot(input),
            bias: delta.sum_axis(Axis(0)),
        });
        if i > 0 {
            let mut back = delta.dot(&layer.weight);
            back.zip_mut_with(input, |g, h| *g *= 1.0 - h * h);
            delta = back;
        }
    }
    grads.reverse();
    Ok((loss, Gradients { layers: grads }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyDistribution {
    GaussianMixture(Vec<GaussianComponent>),
    TwoMoons { noise: f64 },
    Checkerboard { cells: usize },
}

impl ToyDistribution {
    pub fn gaussian_mixture(components: Vec<GaussianComponent>) -> Result<Self> {
        ensure!(!components.is_empty(), "mixture needs at least one component");
        let dim = components[0].mean.len();
        ensure!(dim > 0, "mixture dimension must be positive");
        for c in &components {
            ensure!(
                c.mean.len() == dim && c.std.len() == dim,
                "mixture components must share one dimension"
            );
            ensure!(c.std.iter().all(|&s| s > 0.0), "component stds must be positive");
            ensure!(c.weight > 0.0, "component weights must be positive");
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        ensure!(
            (total - 1.0).abs() < 1e-9,
            "mixture weights sum to {total}, expected 1"
        );
        Ok(Self::GaussianMixture(components))
    }

    pub fn two_moons(noise: f64) -> Result<Self> {
        ensure!(noise >= 0.0, "noise must be non-negative");
        Ok(Self::TwoMoons { noise })
    }

    pub fn checkerboard(cells: usize) -> Result<Self> {
        ensure!(cells >= 2, "checkerboard needs at least 2 cells per side");
        Ok(Self::Checkerboard { cells })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture(c) => c[0].mean.len(),
            Self::TwoMoons { .. } | Self::Checkerboard { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianMixture(_) => "mixture",
            Self::TwoMoons { .. } => "two-moons",
            Self::Checkerboard { .. } => "checkerboard",
        }
    }

    /// `n` samples as an `[n, dim]` tensor.
    ///
    /// # Panics
    /// If `n == 0`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        assert!(n > 0, "sample count must be positive");
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            match self {
                Self::GaussianMixture(components) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = &components[components.len() - 1];
                    for c in components {
                        acc += c.weight;
                        if u < acc {
                            pick = c;
                            break;
                        }
                    }
                    for (m, s) in pick.mean.iter().zip(&pick.std) {
                        let e: f64 = StandardNormal.sample(rng);
                        data.push(m + s * e);
                    }
                }
                Self::TwoMoons { noise } => {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (x, y) = if rng.random::<bool>() {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let ex: f64 = StandardNormal.sample(rng);
                    let ey: f64 = StandardNormal.sample(rng);
                    data.push(x + noise * ex);
                    data.push(y + noise * ey);
                }
                Self::Checkerboard { cells } => {
                    let k = *cells;
                    let cell = 4.0 / k as f64;
                    loop {
                        let i = rng.random_range(0..k);
                        let j = rng.random_range(0..k);
                        if (i + j) % 2 == 0 {
                            data.push(-2.0 + (i as f64 + rng.random::<f64>()) * cell);
                            data.push(-2.0 + (j as f64 + rng.random::<f64>()) * cell);
                            break;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, dim], data).expect("n * dim samples")
    }
}

/// `[n, dim]` standard normal samples.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = StandardNormal.sample(rng);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: MlpField,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Fits `field` to the straight-path velocity between `data` and `N(0, I)`.
/// Fresh `(x0, x1, t)` are drawn every step; `t ~ U[0, 1]`.
pub fn train(mut field: MlpField, data: &ToyDistribution, config: &TrainConfig) -> Result<TrainOutcome> {
    ensure!(config.batch_size > 0, "batch size must be positive");
    ensure!(config.steps > 0, "step count must be positive");
    ensure!(
        config.learning_rate >= 0.0 && config.learning_rate.is_finite(),
        "learning rate must be non-negative"
    );
    ensure!(
        data.dim() == field.data_dim,
        "distribution dim {} != field dim {}",
        data.dim(),
        field.data_dim
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = field.params_flat();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(config.steps);
    let shape = [config.batch_size, field.data_dim];

    for step in 0..config.steps {
        let x0 = data.sample(config.batch_size, &mut rng);
        let x1 = standard_normal(&shape, &mut rng);
        let t: Vec<f64> = (0..config.batch_size).map(|_| rng.random::<f64>()).collect();
        let (loss, grads) = rf_loss_batch(&field, &x0, &x1, &t).map_err(|e| match e {
            Error::LossDivergence { loss, .. } => Error::LossDivergence { step, loss },
            other => other,
        })?;
        if loss > DIVERGENCE_LOSS {
            return Err(Error::LossDivergence { step, loss });
        }
        losses.push(loss);

        let g = grads.flat();
        let lr = config.learning_rate;
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&g) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        field.set_params_flat(&params);
    }
    Ok(TrainOutcome { field, losses })
}
