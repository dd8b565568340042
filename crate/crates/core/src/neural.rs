//! Minimal dense-network machinery: affine layers, ReLU, exact reverse-mode
//! gradients through a cached tape, mean-squared-error loss, and an
//! adaptive-moment optimizer.
//!
//! Everything is 64-bit and deterministic: fixed iteration order, seeded
//! initialization, sequential reductions. Parameters flatten to a single
//! vector (layer by layer, weights row-major then bias) shared by the
//! optimizer, checkpoints, and finite-difference validation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// y = self · x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for (out, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *out = acc;
        }
        y
    }

    /// x = selfᵀ · y
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "t_matvec dimension mismatch");
        let mut x = vec![0.0; self.cols];
        for (row, yr) in self.data.chunks_exact(self.cols).zip(y) {
            for (acc, w) in x.iter_mut().zip(row) {
                *acc += w * yr;
            }
        }
        x
    }

    /// self += dy ⊗ x (outer product accumulation).
    pub fn add_outer(&mut self, dy: &[f64], x: &[f64]) {
        assert_eq!(dy.len(), self.rows, "add_outer row mismatch");
        assert_eq!(x.len(), self.cols, "add_outer col mismatch");
        for (row, dyr) in self.data.chunks_exact_mut(self.cols).zip(dy) {
            for (acc, v) in row.iter_mut().zip(x) {
                *acc += dyr * v;
            }
        }
    }
}

/// Elementwise nonlinearity applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer with an optional nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out_dim × in_dim.
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> DenseLayer {
        DenseLayer {
            weights: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> DenseLayer {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = DenseLayer::zeros(in_dim, out_dim, activation);
        for w in layer.weights.data.iter_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcStack {
    pub layers: Vec<DenseLayer>,
}

/// Cached activations from one [`FcStack::forward_tape`] pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input seen by each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

/// Per-layer gradient accumulators matching an [`FcStack`].
#[derive(Debug, Clone)]
pub struct FcStackGrads {
    pub layers: Vec<(Mat, Vec<f64>)>,
}

impl FcStack {
    pub fn new(layers: Vec<DenseLayer>) -> FcStack {
        for pair in layers.windows(2) {
            assert_eq!(
                pair[0].out_dim(),
                pair[1].in_dim(),
                "layer dimensions must chain"
            );
        }
        FcStack { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.weights.matvec(&h);
            h = pre
                .iter()
                .zip(&layer.bias)
                .map(|(p, b)| layer.activation.apply(p + b))
                .collect();
        }
        h
    }

    /// Forward pass caching everything backward needs.
    pub fn forward_tape(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for layer in &self.layers {
            tape.inputs.push(h.clone());
            let mut pre = layer.weights.matvec(&h);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            h = pre.iter().map(|p| layer.activation.apply(*p)).collect();
            tape.pre.push(pre);
        }
        (h, tape)
    }

    pub fn zero_grads(&self) -> FcStackGrads {
        FcStackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (Mat::zeros(l.out_dim(), l.in_dim()), vec![0.0; l.out_dim()]))
                .collect(),
        }
    }

    /// Backpropagate `upstream` (gradient w.r.t. the stack output) through
    /// the tape. Accumulates parameter gradients into `grads` and returns the
    /// gradient w.r.t. the stack input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut FcStackGrads) -> Vec<f64> {
        assert_eq!(tape.inputs.len(), self.layers.len(), "tape/stack mismatch");
        let mut dy = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre[l];
            assert_eq!(dy.len(), pre.len(), "upstream shape mismatch");
            let dpre: Vec<f64> = dy
                .iter()
                .zip(pre)
                .map(|(g, p)| g * layer.activation.derivative(*p))
                .collect();
            let (dw, db) = &mut grads.layers[l];
            dw.add_outer(&dpre, &tape.inputs[l]);
            for (acc, g) in db.iter_mut().zip(&dpre) {
                *acc += g;
            }
            dy = layer.weights.t_matvec(&dpre);
        }
        dy
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Append parameters in flattening order (per layer: weights row-major,
    /// then bias).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights.data);
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Read parameters back in flattening order.
    pub fn read_params<'a, I: Iterator<Item = &'a f64>>(&mut self, src: &mut I) {
        for layer in &mut self.layers {
            for w in layer.weights.data.iter_mut() {
                *w = *src.next().expect("parameter vector too short");
            }
            for b in layer.bias.iter_mut() {
                *b = *src.next().expect("parameter vector too short");
            }
        }
    }

    /// Append accumulated gradients in the same flattening order.
    pub fn write_grads(grads: &FcStackGrads, out: &mut Vec<f64>) {
        for (dw, db) in &grads.layers {
            out.extend_from_slice(&dw.data);
            out.extend_from_slice(db);
        }
    }
}

/// Mean squared error over one vector pair.
pub fn mse(predicted: &[f64], target: &[f64]) -> f64 {
    assert_eq!(predicted.len(), target.len(), "mse length mismatch");
    assert!(!predicted.is_empty(), "mse on empty vectors");
    let n = predicted.len() as f64;
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Gradient of [`mse`] with respect to the prediction.
pub fn mse_gradient(predicted: &[f64], target: &[f64]) -> Vec<f64> {
    let n = predicted.len() as f64;
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect()
}

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamParams,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize, hyper: AdamParams) -> OptimizerState {
        OptimizerState {
            hyper,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One bias-corrected update in place. Rejects non-finite gradients so a
    /// diverging run aborts with a diagnostic instead of poisoning the model.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer/param shape mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad shape mismatch");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite gradient at parameter {i} on step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamParams {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Central-difference approximation of the gradient of `f` at `params`.
///
/// Used to validate analytic gradients; O(n) evaluations of `f` per call.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        let original = probe[i];
        probe[i] = original + h;
        let high = f(&probe);
        probe[i] = original - h;
        let low = f(&probe);
        probe[i] = original;
        grad[i] = (high - low) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradient vectors, with a
/// floor on the denominator so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
