//! The control-conditioned denoiser, its losses, training and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod net;
pub mod text;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::motion::{repr_dim, ReprLayout};

pub use loss::{loss_total, ConMode, LossParts, LossWeights};
pub use net::{control_attention, denoise_forward, input_mixing};
pub use text::{HashedBowEmbedder, TextCondition, TextEmbedder};
pub use train::{example_gradients, train_toy, Optimizer, TrainConfig, TrainReport, TrainSample};

/// Channels per joint token (the root's 11 channels are zero-padded).
pub const JOINT_CHANNELS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    /// Latent width `L` of every joint token.
    pub latent: usize,
    pub blocks: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 60,
            joints: 22,
            latent: 32,
            blocks: 4,
            text_dim: text::DEFAULT_TEXT_DIM,
            time_dim: 64,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn repr_dim(&self) -> usize {
        repr_dim(self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.joints < 2 || self.latent == 0 || self.blocks == 0 {
            return Err(Error::validation("model dimensions must be positive (joints >= 2)"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::validation("time_dim must be an even number >= 2"));
        }
        if self.text_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::validation("text_dim and ffn_mult must be positive"));
        }
        Ok(())
    }

    /// Names and shapes of every trainable tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, j, l) = (self.frames, self.joints, self.latent);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("enc.x".into(), vec![j, JOINT_CHANNELS + 1, l]),
            ("enc.s".into(), vec![j, 4, l]),
            ("template".into(), vec![j, f, l]),
            ("emb.q_mask".into(), vec![j, f, l]),
            ("emb.q_control".into(), vec![j, f, l]),
            ("emb.v_mask".into(), vec![j, f, l]),
            ("emb.v_control".into(), vec![j, f, l]),
            ("time.w1".into(), vec![self.time_dim, l]),
            ("time.b1".into(), vec![l]),
            ("time.w2".into(), vec![l, l]),
            ("time.b2".into(), vec![l]),
            ("text.w".into(), vec![self.text_dim, l]),
            ("text.b".into(), vec![l]),
        ];
        let h = l * self.ffn_mult;
        for b in 0..self.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("block{b}.{w}"), vec![j, l, l]));
            }
            out.push((format!("block{b}.mix"), vec![j, j]));
            out.push((format!("block{b}.ff1"), vec![l, h]));
            out.push((format!("block{b}.ff1_b"), vec![h]));
            out.push((format!("block{b}.ff2"), vec![h, l]));
            out.push((format!("block{b}.ff2_b"), vec![l]));
        }
        out.push(("head.w".into(), vec![j, l, JOINT_CHANNELS]));
        out.push(("head.b".into(), vec![j, JOINT_CHANNELS]));
        out
    }
}

/// Per-channel affine normalization of the relative representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every frame of every sequence; near-constant channels
    /// keep unit scale.
    pub fn fit<'a>(dim: usize, sequences: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut count = 0usize;
        for s in sequences {
            for row in s.chunks(dim) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::identity(dim);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s < 1e-3 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, data: &[f64]) -> Vec<f64> {
        let d = self.dim();
        data.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect()
    }

    pub fn denormalize(&self, data: &[f64]) -> Vec<f64> {
        let d = self.dim();
        data.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }
}

/// Parameters of the denoiser plus the data normalization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub config: ModelConfig,
    pub norm: Normalizer,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DenoiserWeights {
    /// Random initialization; deterministic for a given RNG state.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".mix") {
                let j = shape[0];
                (0..n).map(|k| if k / j == k % j { 1.0 } else { 0.0 }).collect()
            } else if name.ends_with("_b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let scale = match name.as_str() {
                    "template" | "emb.q_mask" | "emb.q_control" | "emb.v_mask" | "emb.v_control" => 0.02,
                    "head.w" => 0.5 / (shape[1] as f64).sqrt(),
                    _ => 1.0 / (shape[shape.len() - 2] as f64).sqrt(),
                };
                (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            names.push(name);
            tensors.push(Tensor::from_vec(&shape, data));
        }
        Ok(DenoiserWeights {
            norm: Normalizer::identity(config.repr_dim()),
            config,
            names,
            tensors,
        })
    }

    /// Assembles weights from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, norm: Normalizer, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if named.len() != layout.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        if norm.dim() != config.repr_dim() {
            return Err(Error::shape("Normalizer", &[config.repr_dim()], &[norm.dim()]));
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(DenoiserWeights {
            config,
            norm,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn layout(&self) -> ReprLayout {
        ReprLayout::new(self.config.joints)
    }
}
