//! Dense feed-forward networks with exact reverse-mode gradients, plus an
//! Adam optimizer over flat parameter vectors.
//!
//! Parameters of a [`DenseNet`] live in a single flat buffer. Layer `k` maps
//! `dims[k] -> dims[k + 1]`; its weight block is stored row-major
//! (`out x in`) immediately followed by its bias.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Result of a forward pass. `features` is the input to the final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub features: Vec<f64>,
    pub output: Vec<f64>,
}

/// Activations recorded during a forward pass, input included.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn features(&self) -> &[f64] {
        let n = self.activations.len();
        if n >= 2 {
            &self.activations[n - 2]
        } else {
            &self.activations[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`DenseNet::params`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl DenseNet {
    /// Zero-initialized network. `dims` lists every layer width including the
    /// input; `activations` has one entry per layer (`dims.len() - 1`).
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("invalid layer widths {dims:?}")));
        }
        check_dim("activation list", dims.len() - 1, activations.len())?;
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Width of the penultimate activation (the input itself for nets with at
    /// most one layer).
    pub fn feature_dim(&self) -> usize {
        let n = self.dims.len();
        if n >= 2 {
            self.dims[n - 2]
        } else {
            self.dims[0]
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Row-major `out x in` weight block of `layer`.
    pub fn weight(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer);
        &self.params[off..off + self.dims[layer] * self.dims[layer + 1]]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.layer_offset(layer);
        let n = self.dims[layer] * self.dims[layer + 1];
        &mut self.params[off..off + n]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer) + self.dims[layer] * self.dims[layer + 1];
        &self.params[off..off + self.dims[layer + 1]]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.layer_offset(layer) + self.dims[layer] * self.dims[layer + 1];
        let n = self.dims[layer + 1];
        &mut self.params[off..off + n]
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim("network input", self.input_dim(), x.len())?;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x.to_vec());
        let mut offset = 0;
        for (k, act) in self.activations.iter().enumerate() {
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = activations.last().unwrap();
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(input).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                    act.apply(z)
                })
                .collect();
            activations.push(out);
            offset += n_in * n_out + n_out;
        }
        Ok(Trace { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<NetOutput> {
        let mut trace = self.trace(x)?;
        let output = trace.activations.pop().unwrap();
        let features = match trace.activations.pop() {
            Some(f) => f,
            None => output.clone(),
        };
        Ok(NetOutput { features, output })
    }

    /// Gradients of `upstream . output` with respect to every parameter and
    /// the input.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_accumulate(trace, upstream, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Adds parameter gradients into `grad` (same layout as the parameters)
    /// and returns the gradient with respect to the input.
    pub fn backward_accumulate(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        check_dim("gradient buffer", self.params.len(), grad.len())?;
        check_dim("trace depth", self.dims.len(), trace.activations.len())?;
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        for k in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            offset -= n_in * n_out + n_out;
            let out = &trace.activations[k + 1];
            let input = &trace.activations[k];
            let act = self.activations[k];
            for (d, &a) in delta.iter_mut().zip(out) {
                *d *= act.derivative_from_output(a);
            }
            let w = &self.params[offset..offset + n_in * n_out];
            let (gw, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    next[i] += d * row[i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Activations of a batched forward pass, one sample per row, input included.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    activations: Vec<DMatrix<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl DenseNet {
    /// Transposed weight of `layer` as an `in x out` view.
    fn weight_t(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        DMatrixView::from_slice(self.weight(layer), n_in, n_out)
    }

    /// Forward pass over a batch whose rows are samples.
    pub fn trace_batch(&self, x: DMatrix<f64>) -> Result<BatchTrace> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x);
        for (k, act) in self.activations.iter().enumerate() {
            let mut z = activations.last().unwrap() * self.weight_t(k);
            for (mut col, b) in z.column_iter_mut().zip(self.bias(k)) {
                col.apply(|v| *v = act.apply(*v + b));
            }
            activations.push(z);
        }
        Ok(BatchTrace { activations })
    }

    /// Batched counterpart of [`DenseNet::backward_accumulate`]: adds the
    /// gradient of `sum(upstream .* output)` into `grad`.
    pub fn backward_batch(&self, trace: &BatchTrace, upstream: DMatrix<f64>, grad: &mut [f64]) -> Result<DMatrix<f64>> {
        check_dim("gradient buffer", self.params.len(), grad.len())?;
        check_dim("trace depth", self.dims.len(), trace.activations.len())?;
        check_dim("upstream width", self.output_dim(), upstream.ncols())?;
        check_dim("upstream batch", trace.activations[0].nrows(), upstream.nrows())?;
        let mut delta = upstream;
        for k in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            let act = self.activations[k];
            delta.zip_apply(&trace.activations[k + 1], |d, a| *d *= act.derivative_from_output(a));
            let offset = self.layer_offset(k);
            let (gw, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut gw = DMatrixViewMut::from_slice(gw, n_in, n_out);
            gw.gemm(1.0, &trace.activations[k].transpose(), &delta, 1.0);
            for (g, col) in gb.iter_mut().zip(delta.column_iter()) {
                *g += col.sum();
            }
            delta = &delta * self.weight_t(k).transpose();
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam state: first and second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected descent step. Parameters are left untouched when the
    /// gradient contains a non-finite entry.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("optimizer parameters", self.first_moment.len(), params.len())?;
        check_dim("optimizer gradient", self.first_moment.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} at optimizer step {}",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}
