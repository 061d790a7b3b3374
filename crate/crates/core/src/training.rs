//! Ensemble training of the decoder against surrogate image encoders.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{assign_concepts, ConceptAnnotation};
use crate::decoder::Decoder;
use crate::embedding::{cosine, dot, norm, EmbeddingBank, Encoder};
use crate::error::{invalid, Error, Result};
use crate::imaging::ImageBuffer;
use crate::nn::{Kind, Mode, Module};
use crate::pipeline::select_block_priors;
use crate::tiling::{decompose, plan_grid, BlockSet};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    pub n_max: usize,
    pub epsilon: f64,
    /// Upper bound on blocks per optimizer step; one image's blocks are
    /// split into consecutive chunks of at most this size.
    pub batch_blocks: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub confidence_floor: f64,
    pub minimax: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            epochs: 2,
            learning_rate: 1e-5,
            n_max: 64,
            epsilon: 16.0 / 255.0,
            batch_blocks: 64,
            seed: 0,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            confidence_floor: 0.0,
            minimax: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Format(format!("unsupported training config version {}", self.version)));
        }
        if self.epochs == 0 || self.n_max == 0 || self.batch_blocks == 0 {
            return invalid("epochs, n_max and batch_blocks must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return invalid("learning rate and weight decay must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return invalid(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return invalid("optimizer moments must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub per_surrogate: Vec<f64>,
}

pub fn write_history(records: &[TrainRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(text: &str) -> Result<Vec<TrainRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Mean over surrogates and blocks of `cos(ψ_s(clean_k), ψ_s(adv_k))`, with
/// the per-surrogate means.
pub fn ensemble_loss_planes(
    clean: &[Array3<f64>],
    adv: &[Array3<f64>],
    surrogates: &[&dyn Encoder],
) -> Result<(f64, Vec<f64>)> {
    if clean.len() != adv.len() {
        return invalid(format!("{} clean blocks against {} adversarial blocks", clean.len(), adv.len()));
    }
    if clean.is_empty() || surrogates.is_empty() {
        return invalid("ensemble loss needs at least one block and one surrogate");
    }
    let mut per = Vec::with_capacity(surrogates.len());
    for s in surrogates {
        let mut total = 0.0;
        for (c, a) in clean.iter().zip(adv) {
            if c.dim() != a.dim() {
                return invalid("clean and adversarial blocks differ in shape");
            }
            total += cosine(&s.encode_planes(c)?, &s.encode_planes(a)?);
        }
        per.push(total / clean.len() as f64);
    }
    let loss = per.iter().sum::<f64>() / per.len() as f64;
    Ok((loss, per))
}

pub fn ensemble_loss(clean: &BlockSet, adv: &BlockSet, surrogates: &[&dyn Encoder]) -> Result<f64> {
    if clean.blocks.len() != adv.blocks.len() {
        return invalid(format!("{} clean blocks against {} adversarial blocks", clean.blocks.len(), adv.blocks.len()));
    }
    let c: Vec<_> = clean.blocks.iter().map(ImageBuffer::to_chw).collect();
    let a: Vec<_> = adv.blocks.iter().map(ImageBuffer::to_chw).collect();
    Ok(ensemble_loss_planes(&c, &a, surrogates)?.0)
}

/// d cos(c, a) / d a.
fn cosine_grad(c: &[f64], a: &[f64]) -> Vec<f64> {
    let (nc, na) = (norm(c), norm(a));
    if nc == 0.0 || na == 0.0 {
        return vec![0.0; a.len()];
    }
    let cos = dot(c, a) / (nc * na);
    c.iter().zip(a).map(|(ci, ai)| ci / (nc * na) - cos * ai / (na * na)).collect()
}

/// One image's training material: clean blocks and their priors.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    /// `(blocks, 3, side, side)`.
    pub blocks: Array4<f64>,
    /// `(blocks, embed_dim)`.
    pub priors: Array2<f64>,
}

impl PreparedExample {
    pub fn len(&self) -> usize {
        self.blocks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> (Array4<f64>, Array2<f64>) {
        (self.blocks.slice(s![start..end, .., .., ..]).to_owned(), self.priors.slice(s![start..end, ..]).to_owned())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub image: ImageBuffer,
    pub annotations: Vec<ConceptAnnotation>,
}

/// Plans, decomposes, assigns concepts and selects priors for one image.
/// Returns `None` (with a warning) when the image has no annotations.
pub fn prepare_example(
    example: &TrainingExample,
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    block_side: usize,
    n_max: usize,
    confidence_floor: f64,
    minimax: bool,
) -> Result<Option<PreparedExample>> {
    if example.annotations.is_empty() {
        log::warn!("skipping {}: no concept annotations", example.id);
        return Ok(None);
    }
    let grid = plan_grid(example.image.width(), example.image.height(), n_max)?.with_block_side(block_side)?;
    let blocks = decompose(&example.image, grid)?;
    let map = assign_concepts(&grid, blocks.source_dims, &example.annotations, confidence_floor)?;
    let priors = select_block_priors(&blocks, &map, &example.annotations, bank, encoder, minimax)?;
    let n = blocks.blocks.len();
    let mut planes = Array4::zeros((n, 3, block_side, block_side));
    for (k, b) in blocks.blocks.iter().enumerate() {
        planes.index_axis_mut(Axis(0), k).assign(&b.to_chw());
    }
    let mut pm = Array2::zeros((n, bank.dim()));
    for (k, p) in priors.iter().enumerate() {
        pm.row_mut(k).assign(&ndarray::ArrayView1::from(&p.embedding[..]));
    }
    Ok(Some(PreparedExample { id: example.id.clone(), blocks: planes, priors: pm }))
}

fn adversarial(blocks: &Array4<f64>, delta: &Array4<f64>) -> Array4<f64> {
    ndarray::Zip::from(blocks).and(delta).map_collect(|&x, &d| (x + d).clamp(0.0, 1.0))
}

/// Ensemble loss of the decoder on a batch, without gradients.
pub fn batch_loss(
    decoder: &Decoder,
    blocks: &Array4<f64>,
    priors: &Array2<f64>,
    surrogates: &[&dyn Encoder],
    epsilon: f64,
    mode: Mode,
) -> Result<(f64, Vec<f64>)> {
    let (delta, _) = decoder.forward(priors, epsilon, mode)?;
    let adv = adversarial(blocks, &delta);
    let c: Vec<_> = blocks.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
    let a: Vec<_> = adv.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
    ensemble_loss_planes(&c, &a, surrogates)
}

pub struct BatchGradient {
    pub loss: f64,
    pub per_surrogate: Vec<f64>,
    pub grads: Decoder,
    pub cache: crate::decoder::DecoderCache,
}

/// Ensemble loss and its gradient with respect to every decoder parameter.
/// The `[0, 1]` pixel clip passes gradients straight through.
pub fn batch_gradient(
    decoder: &Decoder,
    blocks: &Array4<f64>,
    priors: &Array2<f64>,
    surrogates: &[&dyn Encoder],
    epsilon: f64,
    mode: Mode,
) -> Result<BatchGradient> {
    if blocks.dim().0 != priors.nrows() || blocks.dim().0 == 0 {
        return invalid("blocks and priors must be aligned and non-empty");
    }
    if surrogates.is_empty() {
        return invalid("training needs at least one surrogate");
    }
    let (delta, cache) = decoder.forward(priors, epsilon, mode)?;
    let adv = adversarial(blocks, &delta);
    let n = blocks.dim().0;
    let scale = 1.0 / (n * surrogates.len()) as f64;
    let mut d_adv = Array4::<f64>::zeros(adv.dim());
    let mut per = Vec::with_capacity(surrogates.len());
    for s in surrogates {
        let mut total = 0.0;
        for k in 0..n {
            let c = blocks.index_axis(Axis(0), k).to_owned();
            let a = adv.index_axis(Axis(0), k).to_owned();
            let ec = s.encode_planes(&c)?;
            let ea = s.encode_planes(&a)?;
            total += cosine(&ec, &ea);
            let g: Vec<f64> = cosine_grad(&ec, &ea).into_iter().map(|v| v * scale).collect();
            let gp = s.planes_vjp(&a, &g)?;
            let mut slot = d_adv.index_axis_mut(Axis(0), k);
            slot += &gp;
        }
        per.push(total / n as f64);
    }
    let loss = per.iter().sum::<f64>() / per.len() as f64;
    let grads = decoder.backward(&cache, &d_adv);
    Ok(BatchGradient { loss, per_surrogate: per, grads, cache })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut Decoder, grads: &Decoder) {
        let mut flat = Vec::new();
        grads.visit("", &mut |_, kind, _, d| {
            if kind == Kind::Param {
                flat.push(d.to_vec());
            }
        });
        if self.m.is_empty() {
            self.m = flat.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, kind, p| {
            if kind != Kind::Param {
                return;
            }
            for (j, x) in p.iter_mut().enumerate() {
                let g = flat[i][j];
                let m = &mut ms[i][j];
                let v = &mut vs[i][j];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *x -= lr * (update + wd * *x);
            }
            i += 1;
        });
    }
}

/// Trains `decoder`, one optimizer step per batch of blocks from one image.
pub fn train(
    decoder: Decoder,
    corpus: &[TrainingExample],
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    surrogates: &[&dyn Encoder],
    config: &TrainConfig,
) -> Result<(Decoder, Vec<TrainRecord>)> {
    train_with(decoder, corpus, bank, encoder, surrogates, config, &mut |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    mut decoder: Decoder,
    corpus: &[TrainingExample],
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    surrogates: &[&dyn Encoder],
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainRecord),
) -> Result<(Decoder, Vec<TrainRecord>)> {
    config.validate()?;
    if corpus.is_empty() {
        return invalid("training corpus is empty");
    }
    if surrogates.is_empty() {
        return invalid("training needs at least one surrogate");
    }
    if bank.dim() != decoder.embed_dim() {
        return invalid(format!("bank dimension {} does not match decoder input {}", bank.dim(), decoder.embed_dim()));
    }
    let mut prepared = Vec::with_capacity(corpus.len());
    for ex in corpus {
        if let Some(p) =
            prepare_example(ex, bank, encoder, decoder.block_side(), config.n_max, config.confidence_floor, config.minimax)?
        {
            prepared.push(p);
        }
    }
    if prepared.is_empty() {
        return invalid("no annotated images to train on");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config);
    let mut history = Vec::new();
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &prepared[i];
            let mut start = 0;
            while start < ex.len() {
                if history.len() >= limit {
                    break 'epochs;
                }
                let end = (start + config.batch_blocks).min(ex.len());
                let (blocks, priors) = ex.slice(start, end);
                let out = batch_gradient(&decoder, &blocks, &priors, surrogates, config.epsilon, Mode::Train)?;
                opt.step(&mut decoder, &out.grads);
                decoder.absorb(&out.cache);
                let record = TrainRecord { step: history.len(), loss: out.loss, per_surrogate: out.per_surrogate };
                log::debug!("epoch {epoch} step {} ({}) loss {:.6}", record.step, ex.id, record.loss);
                on_step(&record);
                history.push(record);
                start = end;
            }
        }
    }
    Ok((decoder, history))
}

/// Mean ensemble loss over prepared examples in inference mode.
pub fn corpus_loss(
    decoder: &Decoder,
    prepared: &[PreparedExample],
    surrogates: &[&dyn Encoder],
    epsilon: f64,
) -> Result<f64> {
    if prepared.is_empty() {
        return invalid("no examples");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in prepared {
        let (loss, _) = batch_loss(decoder, &ex.blocks, &ex.priors, surrogates, epsilon, Mode::Inference)?;
        total += loss * ex.len() as f64;
        count += ex.len();
    }
    Ok(total / count as f64)
}

/// Mean clean↔perturbed cosine when each pixel gets independent uniform
/// noise in `[-ε, ε]` (then clipped to `[0, 1]`).
pub fn noise_baseline(prepared: &[PreparedExample], surrogates: &[&dyn Encoder], epsilon: f64, seed: u64) -> Result<f64> {
    use rand::Rng;
    if prepared.is_empty() {
        return invalid("no examples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in prepared {
        let noise = Array4::from_shape_fn(ex.blocks.dim(), |_| rng.gen_range(-epsilon..=epsilon));
        let adv = adversarial(&ex.blocks, &noise);
        let c: Vec<_> = ex.blocks.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
        let a: Vec<_> = adv.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
        total += ensemble_loss_planes(&c, &a, surrogates)?.0 * ex.len() as f64;
        count += ex.len();
    }
    Ok(total / count as f64)
}
