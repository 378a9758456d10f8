//! Single-channel convolutional embedding network.
//!
//! Each block is `conv3x3 (stride 1, pad 1) → relu → maxpool2`; a global
//! average pool over the last block yields an embedding whose width is the
//! last block's channel count. Support and query spectrograms go through the
//! same parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, conv2d, global_avg_pool, maxpool2, relu, Tensor, TensorError};
use crate::features::Grid;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("spectrogram {index} is {got:?}, network expects {expected:?}")]
    InputSize {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("empty input batch")]
    EmptyBatch,
    #[error("parameter set does not match config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    pub block_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (224, 224),
            block_channels: vec![16, 32, 64, 64],
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        self.block_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.block_channels.is_empty() {
            return Err(BackboneError::InvalidConfig(
                "block_channels must not be empty".into(),
            ));
        }
        if self.block_channels.contains(&0) {
            return Err(BackboneError::InvalidConfig(
                "block channel counts must be positive".into(),
            ));
        }
        let factor = 1usize << self.block_channels.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "input size {h}x{w} must be divisible by 2^{} = {factor}",
                self.block_channels.len()
            )));
        }
        Ok(())
    }
}

/// Named trainable tensors: `block{i}.weight` `[c_out, c_in, 3, 3]` and
/// `block{i}.bias` `[c_out]`, in block order.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    named: Vec<(String, Tensor)>,
}

impl BackboneParams {
    pub fn from_named(
        named: Vec<(String, Tensor)>,
        cfg: &BackboneConfig,
    ) -> Result<Self, BackboneError> {
        cfg.validate()?;
        if named.len() != 2 * cfg.block_channels.len() {
            return Err(BackboneError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                2 * cfg.block_channels.len(),
                named.len()
            )));
        }
        let mut c_in = 1;
        for (i, &c_out) in cfg.block_channels.iter().enumerate() {
            let expect = [
                (format!("block{i}.weight"), vec![c_out, c_in, 3, 3]),
                (format!("block{i}.bias"), vec![c_out]),
            ];
            for (j, (name, shape)) in expect.iter().enumerate() {
                let (got_name, t) = &named[2 * i + j];
                if got_name != name || t.shape() != shape.as_slice() {
                    return Err(BackboneError::ParamMismatch(format!(
                        "expected `{name}` {shape:?}, found `{got_name}` {:?}",
                        t.shape()
                    )));
                }
            }
            c_in = c_out;
        }
        Ok(Self { named })
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.named
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Frozen copy with no gradient tracking, for evaluation.
    pub fn detached(&self) -> Self {
        Self {
            named: self
                .named
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
        }
    }

    /// Flattened values of every tensor in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.named.iter().flat_map(|(_, t)| t.to_vec()).collect()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), BackboneError> {
        Ok(autodiff::save_checkpoint(path, &self.named)?)
    }

    pub fn load(
        path: impl AsRef<std::path::Path>,
        cfg: &BackboneConfig,
    ) -> Result<Self, BackboneError> {
        Self::from_named(autodiff::load_checkpoint(path)?, cfg)
    }
}

/// Kaiming-uniform (fan-in) conv weights, zero biases.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams, BackboneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::with_capacity(2 * cfg.block_channels.len());
    let mut c_in = 1;
    for (i, &c_out) in cfg.block_channels.iter().enumerate() {
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights = (0..c_out * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        named.push((
            format!("block{i}.weight"),
            Tensor::param(&[c_out, c_in, 3, 3], weights),
        ));
        named.push((
            format!("block{i}.bias"),
            Tensor::param(&[c_out], vec![0.0; c_out]),
        ));
        c_in = c_out;
    }
    Ok(BackboneParams { named })
}

/// Packs equally sized grids into a `[B, 1, H, W]` tensor.
pub fn batch_tensor(inputs: &[&Grid], cfg: &BackboneConfig) -> Result<Tensor, BackboneError> {
    if inputs.is_empty() {
        return Err(BackboneError::EmptyBatch);
    }
    let (h, w) = cfg.input_size;
    let mut data = Vec::with_capacity(inputs.len() * h * w);
    for (index, g) in inputs.iter().enumerate() {
        if g.shape() != (h, w) {
            return Err(BackboneError::InputSize {
                index,
                got: g.shape(),
                expected: (h, w),
            });
        }
        data.extend_from_slice(g.data());
    }
    Ok(Tensor::new(&[inputs.len(), 1, h, w], data))
}

/// Runs the network on a `[B, 1, H, W]` tensor, returning `[B, embedding_dim]`.
pub fn forward(
    input: &Tensor,
    params: &BackboneParams,
    cfg: &BackboneConfig,
) -> Result<Tensor, BackboneError> {
    let (h, w) = cfg.input_size;
    match *input.shape() {
        [_, 1, ih, iw] if (ih, iw) == (h, w) => {}
        _ => {
            return Err(BackboneError::ParamMismatch(format!(
                "input tensor {:?} does not match [B, 1, {h}, {w}]",
                input.shape()
            )))
        }
    }
    if params.named.len() != 2 * cfg.block_channels.len() {
        return Err(BackboneError::ParamMismatch(format!(
            "{} tensors for {} blocks",
            params.named.len(),
            cfg.block_channels.len()
        )));
    }
    let mut x = input.clone();
    for pair in params.named.chunks_exact(2) {
        let (weight, bias) = (&pair[0].1, &pair[1].1);
        x = maxpool2(&relu(&conv2d(&x, weight, bias, 1, 1)?))?;
    }
    Ok(global_avg_pool(&x)?)
}

/// Embeds a batch of spectrogram grids.
pub fn embed(
    inputs: &[&Grid],
    params: &BackboneParams,
    cfg: &BackboneConfig,
) -> Result<Tensor, BackboneError> {
    forward(&batch_tensor(inputs, cfg)?, params, cfg)
}

/// Spatial size after each block, starting with the input.
pub fn spatial_trace(cfg: &BackboneConfig) -> Vec<(usize, usize)> {
    let mut size = cfg.input_size;
    let mut trace = vec![size];
    for _ in &cfg.block_channels {
        size = (size.0 / 2, size.1 / 2);
        trace.push(size);
    }
    trace
}

/// Names of parameters whose gradient is missing or entirely zero.
pub fn params_without_gradient(params: &BackboneParams) -> Vec<String> {
    params
        .named
        .iter()
        .filter(|(_, t)| !t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
        .map(|(name, _)| name.clone())
        .collect()
}
