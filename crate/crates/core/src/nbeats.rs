//! Basis-expansion forecaster with doubly residual stacking and one branch
//! per target channel.
//!
//! Each block runs a ReLU trunk, projects to low-dimensional coefficients
//! through two affine heads, and expands those through learned basis
//! matrices into a backcast (same length as the block input) and a forecast
//! (horizon length). Blocks chain by subtracting each backcast from the
//! running residual; the branch forecast is the sum of block forecasts.
//! The two branches are structurally identical but parameterized
//! independently, one per channel; by default each receives both channels'
//! lookback concatenated.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Channel;
use crate::error::{Error, Result};
use crate::neural::{
    mse, mse_gradient, Activation, DenseLayer, FcStack, FcStackGrads, Mat, OptimizerState, Tape,
};
use crate::preprocess::Window;

/// Architecture of one multi-branch forecaster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NBeatsConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_stacks: usize,
    pub blocks_per_stack: usize,
    pub fc_layers_per_block: usize,
    pub fc_width: usize,
    pub theta_dim: usize,
    pub n_branches: usize,
    /// Feed every branch both channels' lookback (concatenated) instead of
    /// its own channel only.
    pub cross_channel_input: bool,
}

impl Default for NBeatsConfig {
    fn default() -> Self {
        NBeatsConfig {
            lookback: 4,
            horizon: 2,
            n_stacks: 2,
            blocks_per_stack: 3,
            fc_layers_per_block: 4,
            fc_width: 64,
            theta_dim: 8,
            n_branches: 2,
            cross_channel_input: true,
        }
    }
}

impl NBeatsConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("n_stacks", self.n_stacks),
            ("blocks_per_stack", self.blocks_per_stack),
            ("fc_layers_per_block", self.fc_layers_per_block),
            ("fc_width", self.fc_width),
            ("theta_dim", self.theta_dim),
            ("n_branches", self.n_branches),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_branches != 2 {
            return Err(Error::Config(format!(
                "exactly 2 branches supported (downlink, users), got {}",
                self.n_branches
            )));
        }
        Ok(())
    }

    /// Length of the vector each branch consumes.
    pub fn branch_input_len(&self) -> usize {
        if self.cross_channel_input {
            self.lookback * self.n_branches
        } else {
            self.lookback
        }
    }

    /// Content hash of the canonical JSON encoding, for manifests.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// One basis-expansion block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub trunk: FcStack,
    pub theta_b: DenseLayer,
    pub theta_f: DenseLayer,
    /// theta_dim × input_len; backcast_j = Σ_i theta_i · basis_b[i][j].
    pub basis_b: Mat,
    /// theta_dim × horizon.
    pub basis_f: Mat,
}

impl Block {
    fn glorot(input_len: usize, config: &NBeatsConfig, rng: &mut ChaCha8Rng) -> Block {
        let mut layers = Vec::with_capacity(config.fc_layers_per_block);
        let mut in_dim = input_len;
        for _ in 0..config.fc_layers_per_block {
            layers.push(DenseLayer::glorot(
                in_dim,
                config.fc_width,
                Activation::Relu,
                rng,
            ));
            in_dim = config.fc_width;
        }
        let theta_b =
            DenseLayer::glorot(config.fc_width, config.theta_dim, Activation::Linear, rng);
        let theta_f =
            DenseLayer::glorot(config.fc_width, config.theta_dim, Activation::Linear, rng);
        let mut basis_b = Mat::zeros(config.theta_dim, input_len);
        let mut basis_f = Mat::zeros(config.theta_dim, config.horizon);
        glorot_fill(&mut basis_b, rng);
        glorot_fill(&mut basis_f, rng);
        Block {
            trunk: FcStack::new(layers),
            theta_b,
            theta_f,
            basis_b,
            basis_f,
        }
    }

    pub fn input_len(&self) -> usize {
        self.basis_b.cols
    }

    pub fn horizon(&self) -> usize {
        self.basis_f.cols
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.theta_b.param_count()
            + self.theta_f.param_count()
            + self.basis_b.data.len()
            + self.basis_f.data.len()
    }
}

fn glorot_fill(mat: &mut Mat, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    let limit = (6.0 / (mat.rows + mat.cols) as f64).sqrt();
    for v in mat.data.iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
}

fn affine_forward(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
    let mut y = layer.weights.matvec(x);
    for (v, b) in y.iter_mut().zip(&layer.bias) {
        *v += b;
    }
    y
}

/// backcast = basis_bᵀ θ_b(trunk(x)), forecast = basis_fᵀ θ_f(trunk(x)).
pub fn block_forward(block: &Block, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x.len(), block.input_len(), "block input length mismatch");
    let trunk_out = block.trunk.forward(x);
    let theta_b = affine_forward(&block.theta_b, &trunk_out);
    let theta_f = affine_forward(&block.theta_f, &trunk_out);
    (
        block.basis_b.t_matvec(&theta_b),
        block.basis_f.t_matvec(&theta_f),
    )
}

struct BlockTape {
    trunk_tape: Tape,
    trunk_out: Vec<f64>,
    theta_b: Vec<f64>,
    theta_f: Vec<f64>,
}

fn block_forward_tape(block: &Block, x: &[f64]) -> (Vec<f64>, Vec<f64>, BlockTape) {
    let (trunk_out, trunk_tape) = block.trunk.forward_tape(x);
    let theta_b = affine_forward(&block.theta_b, &trunk_out);
    let theta_f = affine_forward(&block.theta_f, &trunk_out);
    let backcast = block.basis_b.t_matvec(&theta_b);
    let forecast = block.basis_f.t_matvec(&theta_f);
    (
        backcast,
        forecast,
        BlockTape {
            trunk_tape,
            trunk_out,
            theta_b,
            theta_f,
        },
    )
}

/// Gradient accumulators for one block, in flattening order.
pub struct BlockGrads {
    trunk: FcStackGrads,
    theta_b: (Mat, Vec<f64>),
    theta_f: (Mat, Vec<f64>),
    basis_b: Mat,
    basis_f: Mat,
}

impl BlockGrads {
    fn zeros(block: &Block) -> BlockGrads {
        BlockGrads {
            trunk: block.trunk.zero_grads(),
            theta_b: (
                Mat::zeros(block.theta_b.out_dim(), block.theta_b.in_dim()),
                vec![0.0; block.theta_b.out_dim()],
            ),
            theta_f: (
                Mat::zeros(block.theta_f.out_dim(), block.theta_f.in_dim()),
                vec![0.0; block.theta_f.out_dim()],
            ),
            basis_b: Mat::zeros(block.basis_b.rows, block.basis_b.cols),
            basis_f: Mat::zeros(block.basis_f.rows, block.basis_f.cols),
        }
    }
}

/// Backward through one block given gradients w.r.t. its backcast and
/// forecast. Accumulates into `grads`, returns the gradient w.r.t. the block
/// input.
fn block_backward(
    block: &Block,
    tape: &BlockTape,
    d_backcast: &[f64],
    d_forecast: &[f64],
    grads: &mut BlockGrads,
) -> Vec<f64> {
    // Basis matrices: d_theta = basis · d_out, d_basis += theta ⊗ d_out.
    let d_theta_b = block.basis_b.matvec(d_backcast);
    grads.basis_b.add_outer(&tape.theta_b, d_backcast);
    let d_theta_f = block.basis_f.matvec(d_forecast);
    grads.basis_f.add_outer(&tape.theta_f, d_forecast);

    // Affine heads share the trunk output.
    let mut d_trunk_out = block.theta_b.weights.t_matvec(&d_theta_b);
    grads.theta_b.0.add_outer(&d_theta_b, &tape.trunk_out);
    for (acc, g) in grads.theta_b.1.iter_mut().zip(&d_theta_b) {
        *acc += g;
    }
    let from_f = block.theta_f.weights.t_matvec(&d_theta_f);
    for (acc, g) in d_trunk_out.iter_mut().zip(&from_f) {
        *acc += g;
    }
    grads.theta_f.0.add_outer(&d_theta_f, &tape.trunk_out);
    for (acc, g) in grads.theta_f.1.iter_mut().zip(&d_theta_f) {
        *acc += g;
    }

    block
        .trunk
        .backward(&tape.trunk_tape, &d_trunk_out, &mut grads.trunk)
}

/// One complete doubly residual network for a single target channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub channel: Channel,
    pub stacks: Vec<Vec<Block>>,
}

impl Branch {
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stacks.iter().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().map(|b| b.param_count()).sum()
    }
}

/// Per-block intermediates of one branch pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchDiagnostics {
    pub backcasts: Vec<Vec<f64>>,
    pub forecasts: Vec<Vec<f64>>,
    /// Residual after each block: residuals[l] = x_l.
    pub residuals: Vec<Vec<f64>>,
}

/// Run the doubly residual recurrence: x_l = x_{l-1} − b_l, forecast = Σ f_l.
pub fn branch_forward(branch: &Branch, x: &[f64]) -> (Vec<f64>, BranchDiagnostics) {
    let mut diagnostics = BranchDiagnostics {
        backcasts: Vec::new(),
        forecasts: Vec::new(),
        residuals: Vec::new(),
    };
    let mut residual = x.to_vec();
    let mut forecast: Option<Vec<f64>> = None;
    for block in branch.blocks() {
        let (b, f) = block_forward(block, &residual);
        for (r, bv) in residual.iter_mut().zip(&b) {
            *r -= bv;
        }
        forecast = Some(match forecast {
            None => f.clone(),
            Some(mut acc) => {
                for (a, fv) in acc.iter_mut().zip(&f) {
                    *a += fv;
                }
                acc
            }
        });
        diagnostics.backcasts.push(b);
        diagnostics.forecasts.push(f);
        diagnostics.residuals.push(residual.clone());
    }
    (
        forecast.expect("branch has at least one block"),
        diagnostics,
    )
}

fn branch_forward_tape(branch: &Branch, x: &[f64]) -> (Vec<f64>, Vec<BlockTape>) {
    let mut residual = x.to_vec();
    let mut forecast: Option<Vec<f64>> = None;
    let mut tapes = Vec::new();
    for block in branch.blocks() {
        let (b, f, tape) = block_forward_tape(block, &residual);
        for (r, bv) in residual.iter_mut().zip(&b) {
            *r -= bv;
        }
        forecast = Some(match forecast {
            None => f,
            Some(mut acc) => {
                for (a, fv) in acc.iter_mut().zip(&f) {
                    *a += fv;
                }
                acc
            }
        });
        tapes.push(tape);
    }
    (forecast.expect("branch has at least one block"), tapes)
}

/// Backward through the residual wiring: the forecast gradient reaches every
/// block directly; residual gradients accumulate walking blocks in reverse.
fn branch_backward(
    branch: &Branch,
    tapes: &[BlockTape],
    d_forecast: &[f64],
    grads: &mut [BlockGrads],
) {
    let blocks: Vec<&Block> = branch.blocks().collect();
    let input_len = blocks[0].input_len();
    // d_residual = dL/dx_l after block l; nothing consumes the final residual.
    let mut d_residual = vec![0.0; input_len];
    for l in (0..blocks.len()).rev() {
        let d_backcast: Vec<f64> = d_residual.iter().map(|g| -g).collect();
        let d_input = block_backward(blocks[l], &tapes[l], &d_backcast, d_forecast, &mut grads[l]);
        for (acc, g) in d_residual.iter_mut().zip(&d_input) {
            *acc += g;
        }
    }
}

/// The multi-branch forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBeatsNet {
    pub config: NBeatsConfig,
    pub branches: Vec<Branch>,
}

impl NBeatsNet {
    /// Glorot-initialize every branch from one seeded stream.
    pub fn init(config: &NBeatsConfig, seed: u64) -> Result<NBeatsNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_len = config.branch_input_len();
        let branches = Channel::ALL
            .iter()
            .map(|&channel| Branch {
                channel,
                stacks: (0..config.n_stacks)
                    .map(|_| {
                        (0..config.blocks_per_stack)
                            .map(|_| Block::glorot(input_len, config, &mut rng))
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        Ok(NBeatsNet {
            config: config.clone(),
            branches,
        })
    }

    fn branch_input(&self, window: &Window, channel: Channel) -> Vec<f64> {
        if self.config.cross_channel_input {
            window.stacked_input()
        } else {
            window.input(channel).to_vec()
        }
    }

    /// Forecast both channels from a standardized L×2 input.
    pub fn forward(&self, input: &[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]> {
        for (channel, series) in Channel::ALL.iter().zip(input) {
            if series.len() != self.config.lookback {
                return Err(Error::Shape(format!(
                    "{channel} input has length {}, expected {}",
                    series.len(),
                    self.config.lookback
                )));
            }
            if series.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("{channel} input is not finite")));
            }
        }
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for branch in &self.branches {
            let x = if self.config.cross_channel_input {
                let mut stacked = input[0].clone();
                stacked.extend_from_slice(&input[1]);
                stacked
            } else {
                input[branch.channel.index()].clone()
            };
            let (forecast, _) = branch_forward(branch, &x);
            out[branch.channel.index()] = forecast;
        }
        Ok(out)
    }

    /// Forecast both channels of one standardized window.
    pub fn forward_window(&self, window: &Window) -> [Vec<f64>; 2] {
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for branch in &self.branches {
            let x = self.branch_input(window, branch.channel);
            let (forecast, _) = branch_forward(branch, &x);
            out[branch.channel.index()] = forecast;
        }
        out
    }

    /// True when any trunk ReLU pre-activation sits within `threshold` of
    /// zero while forwarding this window. Finite-difference gradient probes
    /// are unreliable at such points, so checks should skip them.
    pub fn near_activation_kink(&self, window: &Window, threshold: f64) -> bool {
        for branch in &self.branches {
            let mut residual = self.branch_input(window, branch.channel);
            for block in branch.blocks() {
                let mut h = residual.clone();
                for layer in &block.trunk.layers {
                    let mut pre = layer.weights.matvec(&h);
                    for (p, b) in pre.iter_mut().zip(&layer.bias) {
                        *p += b;
                    }
                    if matches!(layer.activation, Activation::Relu)
                        && pre.iter().any(|p| p.abs() <= threshold)
                    {
                        return true;
                    }
                    h = pre.iter().map(|p| layer.activation.apply(*p)).collect();
                }
                let (backcast, _) = block_forward(block, &residual);
                for (r, b) in residual.iter_mut().zip(&backcast) {
                    *r -= b;
                }
            }
        }
        false
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.param_count()).sum()
    }

    /// Flatten all parameters: branches in channel order, blocks in wiring
    /// order; per block trunk, theta heads, then bases.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for branch in &self.branches {
            for block in branch.blocks() {
                block.trunk.write_params(out);
                out.extend_from_slice(&block.theta_b.weights.data);
                out.extend_from_slice(&block.theta_b.bias);
                out.extend_from_slice(&block.theta_f.weights.data);
                out.extend_from_slice(&block.theta_f.bias);
                out.extend_from_slice(&block.basis_b.data);
                out.extend_from_slice(&block.basis_f.data);
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }

    pub fn read_params<'a, I: Iterator<Item = &'a f64>>(&mut self, src: &mut I) {
        for branch in &mut self.branches {
            for stack in &mut branch.stacks {
                for block in stack {
                    block.trunk.read_params(src);
                    for w in block.theta_b.weights.data.iter_mut() {
                        *w = *src.next().expect("parameter vector too short");
                    }
                    for b in block.theta_b.bias.iter_mut() {
                        *b = *src.next().expect("parameter vector too short");
                    }
                    for w in block.theta_f.weights.data.iter_mut() {
                        *w = *src.next().expect("parameter vector too short");
                    }
                    for b in block.theta_f.bias.iter_mut() {
                        *b = *src.next().expect("parameter vector too short");
                    }
                    for v in block.basis_b.data.iter_mut() {
                        *v = *src.next().expect("parameter vector too short");
                    }
                    for v in block.basis_f.data.iter_mut() {
                        *v = *src.next().expect("parameter vector too short");
                    }
                }
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        self.read_params(&mut params.iter());
    }

    fn zero_grads(&self) -> Vec<Vec<BlockGrads>> {
        self.branches
            .iter()
            .map(|br| br.blocks().map(BlockGrads::zeros).collect())
            .collect()
    }

    fn write_grads(grads: &[Vec<BlockGrads>], out: &mut Vec<f64>) {
        for branch in grads {
            for g in branch {
                FcStack::write_grads(&g.trunk, out);
                out.extend_from_slice(&g.theta_b.0.data);
                out.extend_from_slice(&g.theta_b.1);
                out.extend_from_slice(&g.theta_f.0.data);
                out.extend_from_slice(&g.theta_f.1);
                out.extend_from_slice(&g.basis_b.data);
                out.extend_from_slice(&g.basis_f.data);
            }
        }
    }
}

/// Summed per-channel MSE of one window in standardized space.
pub fn window_loss(net: &NBeatsNet, window: &Window) -> f64 {
    let forecast = net.forward_window(window);
    Channel::ALL
        .iter()
        .map(|&c| mse(&forecast[c.index()], window.target(c)))
        .sum()
}

/// Mean [`window_loss`] over a slice, summed in slice order.
pub fn batch_mean_loss(net: &NBeatsNet, windows: &[&Window]) -> f64 {
    assert!(!windows.is_empty(), "empty batch");
    windows.iter().map(|w| window_loss(net, w)).sum::<f64>() / windows.len() as f64
}

/// Mean batch loss and its gradient w.r.t. the flat parameter vector, in
/// [`NBeatsNet::params`] order.
pub fn batch_gradients(net: &NBeatsNet, windows: &[&Window]) -> (f64, Vec<f64>) {
    let mut grads = net.zero_grads();
    let mut loss = 0.0;
    let scale = 1.0 / windows.len() as f64;
    for window in windows {
        for (bi, branch) in net.branches.iter().enumerate() {
            let x = net.branch_input(window, branch.channel);
            let (forecast, tapes) = branch_forward_tape(branch, &x);
            let target = window.target(branch.channel);
            loss += mse(&forecast, target) * scale;
            let upstream: Vec<f64> = mse_gradient(&forecast, target)
                .iter()
                .map(|g| g * scale)
                .collect();
            branch_backward(branch, &tapes, &upstream, &mut grads[bi]);
        }
    }
    let mut flat = Vec::with_capacity(net.param_count());
    NBeatsNet::write_grads(&grads, &mut flat);
    (loss, flat)
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of windows (from the end) held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

/// One epoch's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss trajectory and early-stopping outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Train one model on the windows of one cluster.
///
/// The last `validation_fraction` of the windows (in their deterministic
/// order) is held out for early stopping; clusters too small to spare a
/// validation slice validate on the training windows themselves. The best
/// validation-loss parameters are restored at the end.
pub fn train_cluster_model(
    windows: &[Window],
    config: &NBeatsConfig,
    params: &TrainParams,
) -> Result<(NBeatsNet, TrainingLog)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Config("cannot train on zero windows".into()));
    }
    for w in windows {
        if w.input(Channel::Downlink).len() != config.lookback
            || w.target(Channel::Downlink).len() != config.horizon
        {
            return Err(Error::Shape(
                "window dimensions do not match model config".into(),
            ));
        }
    }

    let n_val = ((windows.len() as f64) * params.validation_fraction).floor() as usize;
    let (train_slice, val_slice) = if windows.len() >= 5 && n_val >= 1 {
        windows.split_at(windows.len() - n_val)
    } else {
        (windows, windows)
    };
    let train_refs: Vec<&Window> = train_slice.iter().collect();
    let val_refs: Vec<&Window> = val_slice.iter().collect();

    let mut net = NBeatsNet::init(config, params.seed)?;
    let mut optimizer = OptimizerState::new(
        net.param_count(),
        crate::neural::AdamParams {
            learning_rate: params.learning_rate,
            ..Default::default()
        },
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5b3c_9d1a_77e4_02f9);

    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params = net.params();
    let mut stall = 0usize;

    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    for epoch in 0..params.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch_size.max(1)) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| train_refs[i]).collect();
            let (batch_loss, flat_grads) = batch_gradients(&net, &batch);
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let mut flat_params = net.params();
            optimizer.apply(&mut flat_params, &flat_grads)?;
            net.set_params(&flat_params);
        }
        let train_loss = epoch_loss / train_refs.len() as f64;
        let val_loss = batch_mean_loss(&net, &val_refs);
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best_params = net.params();
            stall = 0;
        } else {
            stall += 1;
            if stall >= params.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    net.set_params(&best_params);
    Ok((net, log))
}

// ---- checkpoint container ----

const MODEL_MAGIC: &[u8; 8] = b"CCNB0001";

/// Self-describing metadata stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NBeatsConfig,
    pub seed: u64,
    pub poi_id: u16,
    pub cluster: usize,
    pub param_count: usize,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
}

/// Write `magic | u32 header length | JSON header | little-endian f64
/// parameters`.
pub fn save_model(path: &Path, net: &NBeatsNet, header: &CheckpointHeader) -> Result<()> {
    if header.param_count != net.param_count() {
        return Err(Error::Checkpoint(format!(
            "header says {} parameters, model has {}",
            header.param_count,
            net.param_count()
        )));
    }
    if header.config != net.config {
        return Err(Error::Checkpoint("header config differs from model".into()));
    }
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MODEL_MAGIC)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(net.param_count() * 8);
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint back into a freshly assembled model.
pub fn load_model(path: &Path) -> Result<(NBeatsNet, CheckpointHeader)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| Error::Serde(e.to_string()))?;

    let mut net = NBeatsNet::init(&header.config, header.seed)?;
    if net.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "{}: header declares {} parameters, config implies {}",
            path.display(),
            header.param_count,
            net.param_count()
        )));
    }
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != header.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} parameter bytes, found {}",
            path.display(),
            header.param_count * 8,
            raw.len()
        )));
    }
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    net.set_params(&params);
    Ok((net, header))
}

/// Load a checkpoint, rejecting it unless its config matches `expected`.
pub fn load_model_matching(
    path: &Path,
    expected: &NBeatsConfig,
) -> Result<(NBeatsNet, CheckpointHeader)> {
    let (net, header) = load_model(path)?;
    if &header.config != expected {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint config does not match the run config",
            path.display()
        )));
    }
    Ok((net, header))
}
