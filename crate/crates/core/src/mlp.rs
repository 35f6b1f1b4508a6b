//! Fully connected feed-forward regressor: ReLU hidden layers, identity
//! output, mean-squared-error loss, Glorot-normal initialization, Adam
//! updates and early stopping on a held-out validation split.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Dataset};
use crate::{Error, Result};

/// Hidden layer widths of the reference network.
pub const REFERENCE_HIDDEN: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `[input, hidden..., 1]`.
    pub layer_sizes: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let arch = MlpArchitecture { layer_sizes };
        arch.validate()?;
        Ok(arch)
    }

    /// `input_dim → 256 → 128 → 64 → 32 → 16 → 1`.
    pub fn reference(input_dim: usize) -> Self {
        Self::with_hidden(input_dim, &REFERENCE_HIDDEN)
    }

    pub fn with_hidden(input_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        MlpArchitecture { layer_sizes: sizes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least an input and an output layer".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be at least 1".into()));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config("output layer must have exactly one unit".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    /// All parameters flattened: per layer, weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }
}

/// Glorot-normal weights (variance `2 / (fan_in + fan_out)`), zero biases.
pub fn init(arch: &MlpArchitecture, seed: u64) -> Result<MlpParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Dense {
                w: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng)),
                b: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

/// Single-input forward pass on already-normalized inputs.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.input_dim() {
        return Err(Error::Dimension {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut a = Array1::from(x.to_vec());
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = l.w.dot(&a) + &l.b;
        if i < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        a = z;
    }
    Ok(a[0])
}

/// Batched forward pass; rows of `x` are samples.
pub fn forward_batch(params: &MlpParams, x: ArrayView2<'_, f64>) -> Array1<f64> {
    let last = params.layers.len() - 1;
    let mut a = x.to_owned();
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = a.dot(&l.w.t()) + &l.b;
        if i < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        a = z;
    }
    a.column(0).to_owned()
}

pub fn mse(params: &MlpParams, x: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
    let pred = forward_batch(params, x);
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Loss and exact gradient of `L = (1/m) Σ (f(x) - y)²` for a batch.
/// The ReLU subgradient at zero is taken as zero.
pub fn grad(params: &MlpParams, x: ArrayView2<'_, f64>, y: &[f64]) -> (f64, MlpParams) {
    let m = y.len();
    assert!(m > 0, "empty batch");
    assert_eq!(x.nrows(), m);
    let n_layers = params.layers.len();
    // activations[0] = x, activations[l + 1] = output of layer l
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    activations.push(x.to_owned());
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = activations[i].dot(&l.w.t()) + &l.b;
        if i + 1 < n_layers {
            z.mapv_inplace(|v| v.max(0.0));
        }
        activations.push(z);
    }
    let out = &activations[n_layers];
    let mut loss = 0.0;
    let mut delta = Array2::zeros((m, 1));
    for r in 0..m {
        let err = out[[r, 0]] - y[r];
        loss += err * err;
        delta[[r, 0]] = 2.0 * err / m as f64;
    }
    loss /= m as f64;

    let mut grads = params.zeros_like();
    for i in (0..n_layers).rev() {
        let a_prev = &activations[i];
        grads.layers[i].w = delta.t().dot(a_prev);
        grads.layers[i].b = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut d_prev = delta.dot(&params.layers[i].w);
            // ReLU mask: post-activation > 0 iff pre-activation > 0.
            ndarray::Zip::from(&mut d_prev)
                .and(a_prev)
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = d_prev;
        }
    }
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub early_stop_patience: usize,
    /// Validation MSE must drop by more than this to reset patience.
    pub min_delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: REFERENCE_HIDDEN.to_vec(),
            max_epochs: 500,
            val_fraction: 0.1,
            early_stop_patience: 20,
            min_delta: 1e-7,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must be in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                // constant features (e.g. a beam always at max range) pass through centered
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
}

/// A trained network with its input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: MlpArchitecture,
    pub params: MlpParams,
    pub norm: Standardizer,
    pub train_config: Option<TrainConfig>,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn predict(&self, scan: &[f64]) -> Result<f64> {
        if scan.len() != self.input_dim() {
            return Err(Error::BeamCount {
                expected: self.input_dim(),
                actual: scan.len(),
            });
        }
        let mut x = vec![0.0; scan.len()];
        self.norm.apply(scan, &mut x);
        forward(&self.params, &x)
    }
}

fn design_matrix(rows: &[&[f64]], norm: &Standardizer) -> Array2<f64> {
    let dim = norm.mean.len();
    let mut x = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        let mut row = x.row_mut(i);
        norm.apply(r, row.as_slice_mut().expect("standard layout"));
    }
    x
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut MlpParams, grads: &MlpParams, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
            let pairs = p.w.iter_mut().zip(g.w.iter()).chain(p.b.iter_mut().zip(g.b.iter()));
            for (pv, gv) in pairs {
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * gv;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                k += 1;
            }
        }
    }
}

/// Trains on `data` with a seeded 90:10 (by default) train/validation split.
/// Returns the parameters of the best validation epoch.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), 1.0 - cfg.val_fraction, cfg.seed)?;
    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| data.samples[i].scan.as_slice()).collect();
    let val_rows: Vec<&[f64]> = val_idx.iter().map(|&i| data.samples[i].scan.as_slice()).collect();
    let y_train: Vec<f64> = train_idx.iter().map(|&i| data.samples[i].steer).collect();
    let y_val: Vec<f64> = val_idx.iter().map(|&i| data.samples[i].steer).collect();

    let norm = Standardizer::fit(&train_rows);
    let x_train = design_matrix(&train_rows, &norm);
    let x_val = design_matrix(&val_rows, &norm);

    let arch = MlpArchitecture::with_hidden(data.meta.beam_count, &cfg.hidden);
    arch.validate()?;
    let mut params = init(&arch, cfg.seed)?;
    let mut adam = Adam::new(params.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut history = TrainHistory {
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        best_val_mse: f64::INFINITY,
        ..Default::default()
    };
    let mut best_params = params.clone();
    let mut reference = f64::INFINITY;
    let mut since_improvement = 0;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let dim = arch.input_dim();
    let mut xb = Array2::zeros((cfg.batch_size, dim));
    let mut yb = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() != xb.nrows() {
                xb = Array2::zeros((chunk.len(), dim));
            }
            yb.clear();
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x_train.row(i));
                yb.push(y_train[i]);
            }
            let (loss, g) = grad(&params, xb.view(), &yb);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.update(&mut params, &g, cfg);
        }
        let train_mse = mse(&params, x_train.view(), &y_train);
        let val_mse = if y_val.is_empty() {
            train_mse
        } else {
            mse(&params, x_val.view(), &y_val)
        };
        if !(train_mse.is_finite() && val_mse.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < history.best_val_mse {
            history.best_val_mse = val_mse;
            history.best_epoch = epoch;
            best_params = params.clone();
        }
        if val_mse < reference - cfg.min_delta {
            reference = val_mse;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((
        Mlp {
            arch,
            params: best_params,
            norm,
            train_config: Some(cfg.clone()),
        },
        history,
    ))
}

pub const MLP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub schema_version: u32,
    pub kind: String,
    pub architecture: MlpArchitecture,
    pub hidden_activation: String,
    pub output_activation: String,
    pub optimizer: String,
    pub normalization: Standardizer,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    /// Layer `l` weights, row-major `out × in`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpFile {
    pub fn from_mlp(m: &Mlp) -> Self {
        MlpFile {
            schema_version: MLP_SCHEMA_VERSION,
            kind: "mlp_regressor".into(),
            architecture: m.arch.clone(),
            hidden_activation: "relu".into(),
            output_activation: "identity".into(),
            optimizer: "adam".into(),
            normalization: m.norm.clone(),
            train_config: m.train_config.clone(),
            weights: m.params.layers.iter().map(|l| l.w.iter().copied().collect()).collect(),
            biases: m.params.layers.iter().map(|l| l.b.to_vec()).collect(),
        }
    }

    pub fn into_mlp(self) -> Result<Mlp> {
        if self.schema_version != MLP_SCHEMA_VERSION || self.kind != "mlp_regressor" {
            return Err(Error::Model(format!(
                "unsupported MLP file (kind {:?}, version {})",
                self.kind, self.schema_version
            )));
        }
        self.architecture.validate()?;
        let sizes = &self.architecture.layer_sizes;
        if self.weights.len() != sizes.len() - 1 || self.biases.len() != sizes.len() - 1 {
            return Err(Error::Model("layer count does not match architecture".into()));
        }
        if self.normalization.mean.len() != sizes[0] || self.normalization.std.len() != sizes[0] {
            return Err(Error::Model("normalization size does not match input".into()));
        }
        let mut layers = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = Array2::from_shape_vec((fan_out, fan_in), self.weights[l].clone())
                .map_err(|e| Error::Model(format!("layer {l} weights: {e}")))?;
            if self.biases[l].len() != fan_out {
                return Err(Error::Model(format!("layer {l} bias has wrong length")));
            }
            layers.push(Dense {
                w: weights,
                b: Array1::from(self.biases[l].clone()),
            });
        }
        Ok(Mlp {
            arch: self.architecture,
            params: MlpParams { layers },
            norm: self.normalization,
            train_config: self.train_config,
        })
    }
}

pub fn save_mlp(m: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&MlpFile::from_mlp(m)).map_err(|e| Error::parse("mlp", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: MlpFile = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    file.into_mlp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_by_one(w: f64, b: f64) -> MlpParams {
        MlpParams {
            layers: vec![Dense {
                w: array![[w]],
                b: array![b],
            }],
        }
    }

    #[test]
    fn affine_single_layer() {
        assert_eq!(forward(&one_by_one(2.0, 0.5), &[3.0]).unwrap(), 6.5);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = init(&MlpArchitecture::with_hidden(4, &[5, 3]), 1).unwrap();
        let zeros = vec![0.0; p.n_params()];
        p.set_flat(&zeros);
        assert_eq!(forward(&p, &[1.0, -2.0, 3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn relu_blocks_negative_units() {
        // hidden unit pre-activation is -1 for input 1, so the output is just the bias.
        let p = MlpParams {
            layers: vec![
                Dense { w: array![[-1.0]], b: array![0.0] },
                Dense { w: array![[5.0]], b: array![0.25] },
            ],
        };
        assert_eq!(forward(&p, &[1.0]).unwrap(), 0.25);
        assert_eq!(forward(&p, &[-1.0]).unwrap(), 5.25);
    }

    #[test]
    fn dimension_mismatch() {
        let p = init(&MlpArchitecture::with_hidden(3, &[2]), 0).unwrap();
        assert!(matches!(forward(&p, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_hand_gradient() {
        let p = one_by_one(1.0, 0.0);
        let x = array![[2.0]];
        let (loss, g) = grad(&p, x.view(), &[0.0]);
        assert_eq!(loss, 4.0);
        assert_eq!(g.layers[0].w[[0, 0]], 8.0);
        assert_eq!(g.layers[0].b[0], 4.0);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let p = init(&MlpArchitecture::with_hidden(2, &[4]), 3).unwrap();
        let x = array![[0.3, -1.2], [1.0, 0.5]];
        let y: Vec<f64> = forward_batch(&p, x.view()).to_vec();
        let (loss, g) = grad(&p, x.view(), &y);
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn glorot_variance_and_zero_bias() {
        let p = init(&MlpArchitecture::reference(19), 42).unwrap();
        let w = &p.layers[1].w; // 256 → 128
        assert_eq!(w.dim(), (128, 256));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / 384.0;
        assert!((var / expected - 1.0).abs() < 0.15, "var {var} expected {expected}");
        assert!(p.layers.iter().all(|l| l.b.iter().all(|b| *b == 0.0)));
        assert_eq!(p, init(&MlpArchitecture::reference(19), 42).unwrap());
    }

    #[test]
    fn output_layer_scale_covariance() {
        let mut p = init(&MlpArchitecture::with_hidden(3, &[6, 4]), 9).unwrap();
        p.layers[2].b[0] = 0.3;
        let x = [0.2, -0.7, 1.5];
        let base = forward(&p, &x).unwrap();
        let last = p.layers.len() - 1;
        p.layers[last].w.mapv_inplace(|v| 2.0 * v);
        p.layers[last].b.mapv_inplace(|v| 2.0 * v);
        assert!((forward(&p, &x).unwrap() - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn invalid_architectures() {
        assert!(MlpArchitecture::new(vec![3]).is_err());
        assert!(MlpArchitecture::new(vec![3, 0, 1]).is_err());
        assert!(MlpArchitecture::new(vec![3, 2]).is_err());
    }
}
