//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so optimizers, soft updates and
//! checkpoints treat every network uniformly. Layer `i` stores its weight
//! matrix (`out x in`, column-major) followed by its bias. Hidden layers use
//! ReLU; the output layer is linear or a tanh squashed into per-output limits.
//! Batched calls take one sample per column.

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("network architectures differ")]
    ArchitectureMismatch,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("non-finite gradient at parameter {index}; update rejected")]
    NonFiniteGradient { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutputKind {
    Linear,
    /// `limit_i * tanh(z_i)`
    TanhScaled(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    output: OutputKind,
    params: Vec<f64>,
}

/// Gradient of a scalar loss, laid out like [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    sizes: Vec<usize>,
    /// Input to each layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.ncols()
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Fan-in scaled uniform initialization, zero biases. The last layer is
    /// drawn ten times narrower so fresh policies and critics start near zero.
    pub fn new(sizes: &[usize], output: OutputKind, seed: u64) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(sizes, output)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        for layer in 0..n_layers {
            let (fan_in, fan_out) = (sizes[layer], sizes[layer + 1]);
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if layer + 1 == n_layers {
                bound *= 0.1;
            }
            let (w_off, _) = net.layer_offsets(layer);
            for p in &mut net.params[w_off..w_off + fan_in * fan_out] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputKind) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::InvalidArchitecture(format!(
                "need at least two non-empty layers, got {sizes:?}"
            )));
        }
        if let OutputKind::TanhScaled(limits) = &output {
            if limits.len() != *sizes.last().unwrap() {
                return Err(NeuralError::InvalidArchitecture(
                    "one output limit per output unit".into(),
                ));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            output,
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Build from explicit parameters in the flat layout.
    pub fn from_params(
        sizes: &[usize],
        output: OutputKind,
        params: Vec<f64>,
    ) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(sizes, output)?;
        if params.len() != net.params.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_kind(&self) -> &OutputKind {
        &self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `true` for weight entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.sizes.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let before = param_count(&self.sizes[..=layer]);
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        (before, before + fan_in * fan_out)
    }

    fn weights(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (w_off, b_off) = self.layer_offsets(layer);
        DMatrixView::from_slice(
            &self.params[w_off..b_off],
            self.sizes[layer + 1],
            self.sizes[layer],
        )
    }

    fn bias(&self, layer: usize) -> DVectorView<'_, f64> {
        let (_, b_off) = self.layer_offsets(layer);
        DVectorView::from_slice(
            &self.params[b_off..b_off + self.sizes[layer + 1]],
            self.sizes[layer + 1],
        )
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.output == other.output
    }

    fn check_input(&self, rows: usize) -> Result<(), NeuralError> {
        if rows != self.input_dim() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.input_dim(),
                got: rows,
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = self.weights(layer) * input;
        let b = self.bias(layer);
        for mut col in z.column_iter_mut() {
            col += &b;
        }
        z
    }

    fn squash_output(&self, z: &mut DMatrix<f64>) {
        if let OutputKind::TanhScaled(limits) = &self.output {
            for mut col in z.column_iter_mut() {
                for (v, lim) in col.iter_mut().zip(limits) {
                    *v = lim * v.tanh();
                }
            }
        }
    }

    /// Evaluate a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let m = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&m)?.as_slice().to_vec())
    }

    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, NeuralError> {
        self.check_input(inputs.nrows())?;
        let n_layers = self.sizes.len() - 1;
        let mut a = self.affine(0, inputs);
        for layer in 1..n_layers {
            a.apply(|v| *v = v.max(0.0));
            a = self.affine(layer, &a);
        }
        self.squash_output(&mut a);
        Ok(a)
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_recorded(&self, inputs: &DMatrix<f64>) -> Result<ForwardPass, NeuralError> {
        self.check_input(inputs.nrows())?;
        let n_layers = self.sizes.len() - 1;
        let mut layer_inputs = Vec::with_capacity(n_layers);
        layer_inputs.push(inputs.clone());
        for layer in 0..n_layers - 1 {
            let mut a = self.affine(layer, &layer_inputs[layer]);
            a.apply(|v| *v = v.max(0.0));
            layer_inputs.push(a);
        }
        let mut output = self.affine(n_layers - 1, &layer_inputs[n_layers - 1]);
        self.squash_output(&mut output);
        Ok(ForwardPass {
            sizes: self.sizes.clone(),
            layer_inputs,
            output,
        })
    }

    /// Reverse-mode sweep. `seed` holds dL/d(output) per sample (one column
    /// each); parameter gradients are summed over the batch. Also returns
    /// dL/d(input).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        seed: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>), NeuralError> {
        if pass.sizes != self.sizes {
            return Err(NeuralError::ArchitectureMismatch);
        }
        if seed.nrows() != self.output_dim() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.output_dim(),
                got: seed.nrows(),
            });
        }
        if seed.ncols() != pass.batch_size() {
            return Err(NeuralError::ShapeMismatch {
                expected: pass.batch_size(),
                got: seed.ncols(),
            });
        }
        let mut grads = Gradients::zeros(self.params.len());
        let mut delta = seed.clone();
        if let OutputKind::TanhScaled(limits) = &self.output {
            // d/dz [L tanh z] = L - y^2 / L
            for (mut dcol, ycol) in delta.column_iter_mut().zip(pass.output.column_iter()) {
                for ((d, y), lim) in dcol.iter_mut().zip(ycol.iter()).zip(limits) {
                    *d *= lim - y * y / lim;
                }
            }
        }
        let n_layers = self.sizes.len() - 1;
        for layer in (0..n_layers).rev() {
            let a_in = &pass.layer_inputs[layer];
            let (w_off, b_off) = self.layer_offsets(layer);
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let dw = &delta * a_in.transpose();
            grads.0[w_off..b_off].copy_from_slice(dw.as_slice());
            for (r, g) in grads.0[b_off..b_off + fan_out].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            debug_assert_eq!(dw.nrows() * dw.ncols(), fan_in * fan_out);
            let mut upstream = self.weights(layer).transpose() * &delta;
            if layer > 0 {
                // ReLU gate, read off the recorded post-activation
                upstream.zip_apply(a_in, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = upstream;
        }
        Ok((grads, delta))
    }

    /// `self <- mix * online + (1 - mix) * self`
    pub fn soft_update_from(&mut self, online: &Mlp, mix: f64) -> Result<(), NeuralError> {
        if !self.same_architecture(online) {
            return Err(NeuralError::ArchitectureMismatch);
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = mix * o + (1.0 - mix) * *t;
        }
        Ok(())
    }
}

/// Functional form of [`Mlp::soft_update_from`].
pub fn soft_update(target: &Mlp, online: &Mlp, mix: f64) -> Result<Mlp, NeuralError> {
    let mut out = target.clone();
    out.soft_update_from(online, mix)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Denominator offset.
    pub epsilon: f64,
    /// L2 coefficient, applied to weights only.
    pub l2: f64,
    /// Global-norm gradient clip threshold.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-4,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamStats {
    /// Norm of the raw gradient, before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    decay_mask: Vec<bool>,
}

impl Adam {
    pub fn new(config: AdamConfig, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            decay_mask,
        }
    }

    pub fn for_net(config: AdamConfig, net: &Mlp) -> Self {
        Self::new(config, net.weight_mask())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clip, add the L2 term, then take one bias-corrected Adam step.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<AdamStats, NeuralError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NeuralError::NonFiniteGradient { index });
        }
        let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.config.clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            l2,
            ..
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let mut g = grads[i] * scale;
            if self.decay_mask[i] {
                g += l2 * params[i];
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(AdamStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }

    pub fn update_net(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<AdamStats, NeuralError> {
        self.update(&mut net.params, &grads.0)
    }
}

/// Running mean/variance of observations (Welford), applied before the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    pub frozen: bool,
    /// Disabled normalizers pass inputs through unchanged.
    pub enabled: bool,
}

impl RunningNorm {
    const STD_FLOOR: f64 = 1e-2;
    const CLIP: f64 = 10.0;

    pub fn new(dim: usize, enabled: bool) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: false,
            enabled,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        if self.frozen || !self.enabled {
            return;
        }
        self.count += 1.0;
        for i in 0..self.mean.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if !self.enabled || self.count < 2.0 {
            return x.to_vec();
        }
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let std = (self.m2[i] / self.count).sqrt().max(Self::STD_FLOOR);
                ((v - self.mean[i]) / std).clamp(-Self::CLIP, Self::CLIP)
            })
            .collect()
    }

    /// Normalize a batch of observations into a `dim x batch` matrix.
    pub fn normalize_batch<'a>(&self, xs: impl ExactSizeIterator<Item = &'a [f64]>) -> DMatrix<f64> {
        let batch = xs.len();
        let mut m = DMatrix::zeros(self.dim(), batch);
        for (j, x) in xs.enumerate() {
            for (i, v) in self.normalize(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}
