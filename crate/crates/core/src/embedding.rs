//! Encoders sharing an image/text space, the embedding bank, and minimax
//! hard-negative prior selection.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{ImageBuffer, Resampler, CHANNELS};

/// An image tower and a text tower embedding into one space.
///
/// Image inputs are planar `3×s×s` arrays of any side `s`; implementations
/// resample to [`Encoder::input_side`] internally and must provide the
/// vector-Jacobian product of that whole path so surrogates can be trained
/// against.
pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;
    fn input_side(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode_planes(&self, block: &Array3<f64>) -> Result<Vec<f64>>;
    fn planes_vjp(&self, block: &Array3<f64>, grad: &[f64]) -> Result<Array3<f64>>;
    fn encode_text(&self, text: &str) -> Vec<f64>;
}

/// Embeds a square block through `encoder`.
pub fn encode_block(encoder: &dyn Encoder, block: &ImageBuffer) -> Result<Vec<f64>> {
    if block.width() != block.height() {
        return invalid(format!("block must be square, got {}x{}", block.width(), block.height()));
    }
    encoder.encode_planes(&block.to_chw())
}

/// Embeds a whole image by squashing it to the encoder's input side.
pub fn encode_image(encoder: &dyn Encoder, image: &ImageBuffer) -> Result<Vec<f64>> {
    let side = encoder.input_side();
    encode_block(encoder, &image.resize_bilinear(side, side)?)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return invalid("cannot normalize a zero or non-finite embedding");
    }
    Ok(v.iter().map(|x| x / n).collect())
}

const TEXT_BUCKETS: usize = 512;

/// Configuration of a [`ToyEncoder`]; doubles as its on-disk description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderSpec {
    pub name: String,
    pub input_side: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl ToyEncoderSpec {
    pub fn build(&self) -> Result<ToyEncoder> {
        ToyEncoder::new(&self.name, self.input_side, self.embed_dim, self.seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Desk-scale encoder: seeded random linear maps.
///
/// Image tower: resample to `input_side`, subtract each channel's mean,
/// project. Text tower: hashed token counts, projected.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: ToyEncoderSpec,
    image_proj: Array2<f64>,
    text_proj: Array2<f64>,
}

impl ToyEncoder {
    pub fn new(name: &str, input_side: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if input_side == 0 || embed_dim == 0 {
            return invalid("toy encoder needs positive input side and embedding size");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = CHANNELS * input_side * input_side;
        // uniform with unit variance per input after scaling
        let a = (3.0 / fan_in as f64).sqrt();
        let image_proj = Array2::from_shape_fn((embed_dim, fan_in), |_| rng.gen_range(-a..a));
        let b = (3.0f64).sqrt();
        let text_proj = Array2::from_shape_fn((embed_dim, TEXT_BUCKETS), |_| rng.gen_range(-b..b));
        Ok(Self {
            spec: ToyEncoderSpec { name: name.into(), input_side, embed_dim, seed },
            image_proj,
            text_proj,
        })
    }

    pub fn spec(&self) -> &ToyEncoderSpec {
        &self.spec
    }

    fn check_square(block: &Array3<f64>) -> Result<usize> {
        let (c, h, w) = block.dim();
        if c != CHANNELS || h != w || h == 0 {
            return invalid(format!("expected a square 3-plane block, got {c}x{h}x{w}"));
        }
        Ok(h)
    }

    fn resampler(&self, side: usize) -> Result<Resampler> {
        let s = self.spec.input_side;
        Resampler::new((side, side), (s, s))
    }
}

fn center_channels(x: &mut Array3<f64>) {
    for mut plane in x.outer_iter_mut() {
        let mean = plane.mean().unwrap_or(0.0);
        plane.mapv_inplace(|v| v - mean);
    }
}

impl Encoder for ToyEncoder {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn input_side(&self) -> usize {
        self.spec.input_side
    }

    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn encode_planes(&self, block: &Array3<f64>) -> Result<Vec<f64>> {
        let side = Self::check_square(block)?;
        let mut x = self.resampler(side)?.apply(block)?;
        center_channels(&mut x);
        let flat = Array1::from_iter(x.iter().copied());
        Ok(self.image_proj.dot(&flat).to_vec())
    }

    fn planes_vjp(&self, block: &Array3<f64>, grad: &[f64]) -> Result<Array3<f64>> {
        let side = Self::check_square(block)?;
        if grad.len() != self.spec.embed_dim {
            return invalid("gradient length does not match embedding size");
        }
        let s = self.spec.input_side;
        let g = Array1::from_vec(grad.to_vec());
        let gx = self.image_proj.t().dot(&g);
        let mut gx = gx
            .into_shape_with_order((CHANNELS, s, s))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        // centering is a symmetric projection
        center_channels(&mut gx);
        self.resampler(side)?.adjoint(&gx)
    }

    fn encode_text(&self, text: &str) -> Vec<f64> {
        let mut counts = Array1::<f64>::zeros(TEXT_BUCKETS);
        for token in tokenize(text) {
            counts[(fnv1a(token.as_bytes()) % TEXT_BUCKETS as u64) as usize] += 1.0;
        }
        self.text_proj.dot(&counts).to_vec()
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

const BANK_MAGIC: &[u8; 4] = b"RBNK";
pub const BANK_VERSION: u32 = 1;

/// Unit-normalized embeddings stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingBank {
    /// Normalizes and stores `vectors`; `ids` must be newline-free.
    pub fn from_vectors(dim: usize, vectors: &[Vec<f64>], ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return invalid("bank dimension must be positive");
        }
        if vectors.len() != ids.len() {
            return invalid("one provenance id is required per vector");
        }
        if ids.iter().any(|id| id.contains('\n')) {
            return invalid("provenance ids may not contain newlines");
        }
        let mut flat = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.len() != dim {
                return invalid(format!("vector of length {} in a bank of dimension {dim}", v.len()));
            }
            flat.extend(normalized(v)?.into_iter().map(|x| x as f32));
        }
        Ok(Self { dim, vectors: flat, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        for id in &self.ids {
            w.write_all(id.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format(format!("bad bank magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        let dim = u32::from_le_bytes(read_array(r)?) as usize;
        if dim == 0 {
            return Err(Error::Format("bank dimension is zero".into()));
        }
        let mut vectors = Vec::with_capacity(count.saturating_mul(dim).min(1 << 28));
        for _ in 0..count * dim {
            vectors.push(f32::from_le_bytes(read_array(r)?));
        }
        let mut ids = Vec::with_capacity(count);
        for line in r.lines().take(count) {
            ids.push(line?);
        }
        if ids.len() != count {
            return Err(Error::Format(format!("expected {count} provenance ids, found {}", ids.len())));
        }
        Ok(Self { dim, vectors, ids })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated bank file: {e}")))?;
    Ok(buf)
}

/// Encodes each image whole and stores it in a bank, order preserved.
pub fn build_bank(images: &[ImageBuffer], ids: Vec<String>, encoder: &dyn Encoder) -> Result<EmbeddingBank> {
    if images.is_empty() {
        return invalid("cannot build a bank from zero images");
    }
    let vectors = images
        .iter()
        .map(|img| encode_image(encoder, img))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBank::from_vectors(encoder.embed_dim(), &vectors, ids)
}

/// The hard-negative prior chosen for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSelection {
    pub index: usize,
    pub embedding: Vec<f64>,
    /// Largest cosine between the chosen entry and any concept.
    pub score: f64,
}

/// Minimax search over unit concept embeddings: the entry whose worst-case
/// (largest) cosine to any concept is smallest. Ties go to the lowest index.
pub fn select_prior_from_embeddings(concepts: &[Vec<f64>], bank: &EmbeddingBank) -> Result<PriorSelection> {
    if concepts.is_empty() {
        return invalid("prior selection needs at least one concept");
    }
    if bank.is_empty() {
        return invalid("embedding bank is empty");
    }
    if let Some(c) = concepts.iter().find(|c| c.len() != bank.dim()) {
        return invalid(format!("concept embedding of length {} against bank dimension {}", c.len(), bank.dim()));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..bank.len() {
        let row = bank.row(i);
        let worst = concepts
            .iter()
            .map(|c| c.iter().zip(row).map(|(a, &b)| a * f64::from(b)).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if worst < best.1 {
            best = (i, worst);
        }
    }
    Ok(PriorSelection { index: best.0, embedding: bank.vector(best.0), score: best.1.clamp(-1.0, 1.0) })
}

/// Encodes `phrases` with the text tower and runs the minimax search.
pub fn select_prior(phrases: &[&str], bank: &EmbeddingBank, encoder: &dyn Encoder) -> Result<PriorSelection> {
    if phrases.is_empty() {
        return invalid("prior selection needs at least one concept phrase");
    }
    let concepts = phrases
        .iter()
        .map(|p| normalized(&encoder.encode_text(p)))
        .collect::<Result<Vec<_>>>()?;
    select_prior_from_embeddings(&concepts, bank)
}
