//! The perturbation generator: prior embedding in, bounded block perturbation out.
//!
//! Layout: a linear map to a `256 × side/16 × side/16` feature map, five
//! residual stages interleaved with four ×2 upsampling stages
//! (256→128→64→32→16 channels), a 3×3 head to RGB, then `ε·tanh`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{PerturbationField, CHANNELS};
use crate::nn::{Conv2d, Kind, Linear, Mode, Module, ResBlock, ResCache, UpBlock, UpCache};

/// Channel width of each resolution stage, coarsest first.
pub const STAGE_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub block_side: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return invalid("decoder embedding size must be positive");
        }
        if self.block_side == 0 || self.block_side % 16 != 0 {
            return invalid(format!("block side {} is not a positive multiple of 16", self.block_side));
        }
        Ok(())
    }

    pub fn initial_side(&self) -> usize {
        self.block_side / 16
    }
}

/// Spatial side after the linear reshape and after each upsampling stage.
pub fn stage_sides(block_side: usize) -> Vec<usize> {
    (0..STAGE_CHANNELS.len()).map(|j| (block_side / 16) << j).collect()
}

/// All learnable weights and normalization state of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    pub input: Linear,
    pub res: Vec<ResBlock>,
    pub up: Vec<UpBlock>,
    pub head: Conv2d,
}

/// Intermediate values from a forward pass, consumed by [`Decoder::backward`].
#[derive(Debug, Clone)]
pub struct DecoderCache {
    priors: Array2<f64>,
    res_in: Vec<Array4<f64>>,
    res: Vec<ResCache>,
    up: Vec<UpCache>,
    head_in: Array4<f64>,
    tanh: Array4<f64>,
    epsilon: f64,
    /// Spatial side of every feature map visited, in order.
    pub sides: Vec<usize>,
}

impl Decoder {
    /// Seeded uniform fan-in initialization.
    pub fn init(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h0 = config.initial_side();
        let input = Linear::init(config.embed_dim, STAGE_CHANNELS[0] * h0 * h0, &mut rng);
        let mut res = Vec::with_capacity(5);
        let mut up = Vec::with_capacity(4);
        for (j, &ch) in STAGE_CHANNELS.iter().enumerate() {
            res.push(ResBlock::init(ch, ch, &mut rng));
            if let Some(&next) = STAGE_CHANNELS.get(j + 1) {
                up.push(UpBlock::init(ch, next, &mut rng));
            }
        }
        let head = Conv2d::init(STAGE_CHANNELS[4], CHANNELS, 3, &mut rng);
        Ok(Self { config, input, res, up, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn block_side(&self) -> usize {
        self.config.block_side
    }

    /// Zeroes the output head so every synthesized perturbation is exactly zero.
    pub fn zero_head(&mut self) {
        self.head.weight.fill(0.0);
        self.head.bias.fill(0.0);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, _, d| {
            if kind == Kind::Param {
                n += d.len();
            }
        });
        n
    }

    /// Maps a `(batch, embed_dim)` matrix of priors to `(batch, 3, side, side)`
    /// perturbations bounded by `epsilon`.
    pub fn forward(&self, priors: &Array2<f64>, epsilon: f64, mode: Mode) -> Result<(Array4<f64>, DecoderCache)> {
        if priors.ncols() != self.config.embed_dim {
            return invalid(format!("prior has {} entries, decoder expects {}", priors.ncols(), self.config.embed_dim));
        }
        if !(epsilon > 0.0) {
            return invalid(format!("epsilon must be positive, got {epsilon}"));
        }
        let b = priors.nrows();
        let h0 = self.config.initial_side();
        let lin = self.input.forward(priors)?;
        let mut x = lin
            .into_shape_with_order((b, STAGE_CHANNELS[0], h0, h0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut sides = vec![h0];
        let mut res_in = Vec::with_capacity(5);
        let mut res = Vec::with_capacity(5);
        let mut up = Vec::with_capacity(4);
        for j in 0..STAGE_CHANNELS.len() {
            let (y, c) = self.res[j].forward(&x, mode)?;
            res_in.push(x);
            res.push(c);
            x = y;
            if j < self.up.len() {
                let (y, c) = self.up[j].forward(&x, mode)?;
                up.push(c);
                x = y;
                sides.push(x.dim().2);
            }
        }
        let z = self.head.forward(&x)?;
        let tanh = z.mapv(f64::tanh);
        let delta = &tanh * epsilon;
        Ok((delta, DecoderCache { priors: priors.clone(), res_in, res, up, head_in: x, tanh, epsilon, sides }))
    }

    /// Parameter gradients of `<d_delta, forward(..)>`.
    pub fn backward(&self, cache: &DecoderCache, d_delta: &Array4<f64>) -> Decoder {
        let mut g = self.zeros_like();
        let dz = ndarray::Zip::from(d_delta).and(&cache.tanh).map_collect(|&d, &t| d * cache.epsilon * (1.0 - t * t));
        let mut dx = self.head.backward(&cache.head_in, &dz, &mut g.head);
        for j in (0..STAGE_CHANNELS.len()).rev() {
            if j < self.up.len() {
                dx = self.up[j].backward(&cache.up[j], &dx, &mut g.up[j]);
            }
            dx = self.res[j].backward(&cache.res_in[j], &cache.res[j], &dx, &mut g.res[j]);
        }
        let b = cache.priors.nrows();
        let d_lin = dx.into_shape_with_order((b, self.input.bias.len())).expect("contiguous");
        self.input.backward(&cache.priors, &d_lin, &mut g.input);
        g
    }

    /// Folds a training pass's batch statistics into the running statistics.
    pub fn absorb(&mut self, cache: &DecoderCache) {
        for (r, c) in self.res.iter_mut().zip(&cache.res) {
            r.absorb(c);
        }
        for (u, c) in self.up.iter_mut().zip(&cache.up) {
            u.absorb(c);
        }
    }

    /// Inference-mode synthesis for a single prior.
    pub fn synthesize(&self, prior: &[f64], epsilon: f64) -> Result<PerturbationField> {
        let priors = Array2::from_shape_vec((1, prior.len()), prior.to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (delta, _) = self.forward(&priors, epsilon, Mode::Inference)?;
        PerturbationField::from_chw(&delta.index_axis(Axis(0), 0).to_owned())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        self.visit("", &mut |name, _, shape, data| {
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name.to_string(), shape.to_vec(), bytes));
        });
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = [
            ("format".to_string(), "geoshield-decoder".to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("embed_dim".to_string(), self.config.embed_dim.to_string()),
            ("block_side".to_string(), self.config.block_side.to_string()),
            ("seed".to_string(), self.config.seed.to_string()),
        ]
        .into_iter()
        .collect();
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds a decoder, rejecting any tensor whose shape departs from the
    /// fixed stage schedule.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| -> Result<String> {
            meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?.parse::<u64>().map_err(|e| Error::Format(format!("bad `{k}`: {e}")))
        };
        if field("format")? != "geoshield-decoder" {
            return Err(Error::Format("not a decoder checkpoint".into()));
        }
        let version = num("version")?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = DecoderConfig {
            embed_dim: num("embed_dim")? as usize,
            block_side: num("block_side")? as usize,
            seed: num("seed")?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let mut decoder = Self::init(config)?;
        let mut expected: HashMap<String, Vec<usize>> = HashMap::new();
        decoder.visit("", &mut |name, _, shape, _| {
            expected.insert(name.to_string(), shape.to_vec());
        });
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, expected {}", tensors.len(), expected.len())));
        }
        let mut failure = None;
        decoder.visit_mut("", &mut |name, _, data| {
            if failure.is_some() {
                return;
            }
            match tensors.tensor(name) {
                Ok(view) if view.dtype() == Dtype::F64 && view.shape() == expected[name].as_slice() => {
                    for (dst, chunk) in data.iter_mut().zip(view.data().chunks_exact(8)) {
                        *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                    }
                }
                Ok(view) => {
                    failure = Some(format!("tensor `{name}` has shape {:?}, expected {:?}", view.shape(), expected[name]));
                }
                Err(_) => failure = Some(format!("checkpoint lacks tensor `{name}`")),
            }
        });
        match failure {
            Some(msg) => Err(Error::Format(msg)),
            None => Ok(decoder),
        }
    }

    /// Adds `scale * other` to every learnable tensor.
    pub fn axpy(&mut self, scale: f64, other: &Decoder) {
        let mut flat = Vec::new();
        other.visit("", &mut |_, kind, _, d| {
            if kind == Kind::Param {
                flat.push(d.to_vec());
            }
        });
        let mut i = 0;
        self.visit_mut("", &mut |_, kind, d| {
            if kind == Kind::Param {
                for (x, g) in d.iter_mut().zip(&flat[i]) {
                    *x += scale * g;
                }
                i += 1;
            }
        });
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.input.visit(&p("input"), f);
        for (j, r) in self.res.iter().enumerate() {
            r.visit(&p(&format!("res{j}")), f);
        }
        for (j, u) in self.up.iter().enumerate() {
            u.visit(&p(&format!("up{j}")), f);
        }
        self.head.visit(&p("head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.input.visit_mut(&p("input"), f);
        for (j, r) in self.res.iter_mut().enumerate() {
            r.visit_mut(&p(&format!("res{j}")), f);
        }
        for (j, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&p(&format!("up{j}")), f);
        }
        self.head.visit_mut(&p("head"), f);
    }
}
