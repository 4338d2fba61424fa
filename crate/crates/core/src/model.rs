//! MLP feature extractor plus a bias-free linear classifier whose weight
//! rows double as per-class proxies.
//!
//! Every hidden layer is followed by `tanh`; the last extractor layer is
//! linear and produces the feature vector `z`. Logits are `Ω z`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// D → 32 (tanh) → 16 (linear) → C.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![32],
            feature_dim: 16,
            num_classes,
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "architecture dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// out × in
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    /// C × d; row `c` is the proxy of class `c`.
    pub proxies: Matrix,
}

/// Per-layer activations of one extractor pass. Borrowing the parameters
/// keeps them frozen until the trace is consumed by `backward`.
#[derive(Debug)]
pub struct ForwardTrace<'p> {
    params: &'p ModelParams,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl<'p> ForwardTrace<'p> {
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    /// Backpropagates `d_features` (∂L/∂z) through the extractor and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(self, d_features: &[f64], grads: &mut GradientBuffer) {
        let n_layers = self.params.layers.len();
        debug_assert_eq!(d_features.len(), self.features().len());
        let mut delta = d_features.to_vec();
        for l in (0..n_layers).rev() {
            let out = &self.activations[l + 1];
            if l + 1 < n_layers {
                for (d, a) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &self.activations[l];
            let g = &mut grads.inner.layers[l];
            g.weights.add_outer(1.0, &delta, input);
            crate::linalg::axpy(&mut g.bias, 1.0, &delta);
            if l > 0 {
                delta = self.params.layers[l].weights.matvec_t(&delta);
            }
        }
    }
}

impl ModelParams {
    /// All-zero parameters of the given architecture.
    pub fn zeros(arch: &Architecture) -> Self {
        let dims = arch.layer_dims();
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            proxies: Matrix::zeros(arch.num_classes, arch.feature_dim),
        }
    }

    /// Weights `N(0, 1/fan_in)`, zero biases, proxies `N(0, 1/d)`.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut p = Self::zeros(arch);
        for layer in &mut p.layers {
            let scale = 1.0 / (layer.in_dim() as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = scale * Distribution::<f64>::sample(&StandardNormal, rng);
            }
        }
        let scale = 1.0 / (arch.feature_dim as f64).sqrt();
        for w in p.proxies.as_mut_slice() {
            *w = scale * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        Ok(p)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(Dense::out_dim)
                .collect(),
            feature_dim: self.feature_dim(),
            num_classes: self.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.proxies.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.rows()
    }

    /// Total scalar count |Θ| (extractor plus proxies).
    pub fn num_params(&self) -> usize {
        self.values().count()
    }

    /// All scalars in canonical order: per layer weights (row-major) then
    /// bias, then the proxy matrix.
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias))
            .chain(self.proxies.as_slice())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
            .chain(self.proxies.as_mut_slice())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.proxies.shape() == other.proxies.shape()
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape())
    }

    /// Runs the extractor on `x`, returning a trace for backprop.
    pub fn extract(&self, x: &[f64]) -> Result<ForwardTrace<'_>> {
        ensure_dim("extractor input", self.input_dim(), x.len())?;
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.weights.matvec(activations.last().expect("non-empty"));
            for (o, b) in out.iter_mut().zip(&layer.bias) {
                *o += b;
                if l + 1 < n_layers {
                    *o = o.tanh();
                }
            }
            activations.push(out);
        }
        Ok(ForwardTrace {
            params: self,
            activations,
        })
    }

    /// `(Ω z, softmax(Ω z))`
    pub fn classify(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_dim("classifier input", self.feature_dim(), z.len())?;
        let logits = self.proxies.matvec(z);
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    /// Class probabilities for a raw input.
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.extract(x)?;
        Ok(self.classify(trace.features())?.1)
    }

    /// Accumulates ∂L/∂Ω for upstream `d_logits` and returns ∂L/∂z.
    pub fn classifier_backward(
        &self,
        z: &[f64],
        d_logits: &[f64],
        grads: &mut GradientBuffer,
    ) -> Vec<f64> {
        grads.inner.proxies.add_outer(1.0, d_logits, z);
        self.proxies.matvec_t(d_logits)
    }

    /// In place `self -= lr · grads`.
    pub fn apply_sgd(&mut self, grads: &GradientBuffer, lr: f64) {
        assert!(self.same_shape(&grads.inner), "gradient shape mismatch");
        for (p, g) in self.values_mut().zip(grads.inner.values()) {
            *p -= lr * g;
        }
    }

    /// Serializes as: u64 input dim, u64 layer count, u64 output dim per
    /// layer, u64 C, u64 d, then every layer's weights (row-major) and bias,
    /// then Ω (row-major). All little-endian; floats as f64.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = vec![self.input_dim() as u64, self.layers.len() as u64];
        header.extend(self.layers.iter().map(|l| l.out_dim() as u64));
        header.push(self.num_classes() as u64);
        header.push(self.feature_dim() as u64);
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for v in self.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let input_dim = read_u64(r)? as usize;
        let n_layers = read_u64(r)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let outs: Vec<usize> = (0..n_layers)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let num_classes = read_u64(r)? as usize;
        let feature_dim = read_u64(r)? as usize;
        if outs.last() != Some(&feature_dim) {
            return Err(Error::Checkpoint(
                "last layer width does not match feature dimension".into(),
            ));
        }
        let arch = Architecture {
            input_dim,
            hidden: outs[..n_layers - 1].to_vec(),
            feature_dim,
            num_classes,
        };
        arch.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut p = Self::zeros(&arch);
        for v in p.values_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(p)
    }
}

/// `params − lr · grads`
pub fn sgd_step(params: &ModelParams, grads: &GradientBuffer, lr: f64) -> ModelParams {
    let mut out = params.clone();
    out.apply_sgd(grads, lr);
    out
}

/// Gradient storage with the shape of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    inner: ModelParams,
}

impl GradientBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            inner: ModelParams::zeros(&params.architecture()),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.inner.layers
    }

    pub fn proxies(&self) -> &Matrix {
        &self.inner.proxies
    }

    pub fn proxies_mut(&mut self) -> &mut Matrix {
        &mut self.inner.proxies
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.inner.values()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.inner.values_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, k: f64, other: &GradientBuffer) {
        assert!(self.inner.same_shape(&other.inner), "gradient shape mismatch");
        for (a, b) in self.inner.values_mut().zip(other.inner.values()) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.inner.values_mut().for_each(|v| *v *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| *v == 0.0)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }
}

impl std::ops::Add for GradientBuffer {
    type Output = GradientBuffer;
    fn add(mut self, rhs: GradientBuffer) -> GradientBuffer {
        self.add_scaled(1.0, &rhs);
        self
    }
}
