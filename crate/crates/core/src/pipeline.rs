//! End-to-end protection: grid, blocks, concepts, priors, synthesis, budget.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::concepts::{assign_concepts, BlockConceptMap, ConceptAnnotation};
use crate::decoder::Decoder;
use crate::embedding::{normalized, select_prior_from_embeddings, EmbeddingBank, Encoder};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{
    run_benchmark, BenchmarkTable, EvalPrompt, Geocoder, ImagePair, ImageSource, LocationCodes, TargetModel,
};
use crate::imaging::{ImageBuffer, PerturbationField};
use crate::nn::Mode;
use crate::tiling::{apply_budget, assemble_perturbation, decompose, plan_grid, BlockSet, GridSpec};

/// Decoder forward passes are chunked to bound peak memory at large sides.
const SYNTH_CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct ProtectRequest {
    pub image: ImageBuffer,
    pub annotations: Vec<ConceptAnnotation>,
    pub epsilon: f64,
    pub n_max: usize,
    pub minimax_enabled: bool,
    /// Annotations below this confidence are ignored when assigning concepts.
    pub confidence_floor: f64,
}

impl ProtectRequest {
    pub fn new(image: ImageBuffer, annotations: Vec<ConceptAnnotation>, epsilon: f64, n_max: usize) -> Self {
        Self { image, annotations, epsilon, n_max, minimax_enabled: true, confidence_floor: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return invalid(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.n_max == 0 {
            return invalid("n_max must be at least 1");
        }
        if self.annotations.is_empty() {
            return invalid("image has no concept annotations; nothing to target");
        }
        for a in &self.annotations {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Hard negative from the bank.
    Minimax,
    /// The block's own image embedding (untargeted ablation).
    SelfEmbedding,
}

/// The prior chosen for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrior {
    pub source: PriorSource,
    pub bank_index: Option<usize>,
    pub score: Option<f64>,
    pub embedding: Vec<f64>,
}

/// Selects a prior for every block, caching concept embeddings and repeated
/// concept sets.
pub fn select_block_priors(
    blocks: &BlockSet,
    map: &BlockConceptMap,
    annotations: &[ConceptAnnotation],
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    minimax: bool,
) -> Result<Vec<BlockPrior>> {
    if map.len() != blocks.blocks.len() {
        return invalid("concept map and block set disagree in length");
    }
    if bank.dim() != encoder.embed_dim() {
        return invalid(format!("bank dimension {} does not match encoder dimension {}", bank.dim(), encoder.embed_dim()));
    }
    if !minimax {
        return blocks
            .blocks
            .iter()
            .map(|b| {
                let e = normalized(&encoder.encode_planes(&b.to_chw())?)?;
                Ok(BlockPrior { source: PriorSource::SelfEmbedding, bank_index: None, score: None, embedding: e })
            })
            .collect();
    }
    let mut concept_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut set_cache: HashMap<&[usize], BlockPrior> = HashMap::new();
    let mut out = Vec::with_capacity(map.len());
    for set in &map.sets {
        if set.is_empty() {
            return invalid("a block has no retained concepts (all below the confidence floor?)");
        }
        if let Some(p) = set_cache.get(set.as_slice()) {
            out.push(p.clone());
            continue;
        }
        let mut concepts = Vec::with_capacity(set.len());
        for &i in set {
            let e = match concept_cache.get(&i) {
                Some(e) => e.clone(),
                None => {
                    let phrase = &annotations.get(i).ok_or_else(|| Error::InvalidArgument(format!("concept index {i} out of range")))?.phrase;
                    let e = normalized(&encoder.encode_text(phrase))?;
                    concept_cache.insert(i, e.clone());
                    e
                }
            };
            concepts.push(e);
        }
        let sel = select_prior_from_embeddings(&concepts, bank)?;
        let p = BlockPrior { source: PriorSource::Minimax, bank_index: Some(sel.index), score: Some(sel.score), embedding: sel.embedding };
        set_cache.insert(set.as_slice(), p.clone());
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub index: usize,
    pub col: usize,
    pub row: usize,
    pub concepts: Vec<usize>,
    pub fallback: bool,
    pub prior: PriorSource,
    pub bank_index: Option<usize>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectReport {
    pub width: usize,
    pub height: usize,
    pub grid: GridSpec,
    pub epsilon: f64,
    pub n_max: usize,
    pub minimax_enabled: bool,
    pub blocks: Vec<BlockReport>,
    /// Distinct priors actually decoded.
    pub unique_priors: usize,
    /// max |I′ − I| before 8-bit quantization.
    pub max_deviation: f64,
}

fn synthesize_all(decoder: &Decoder, priors: &[&[f64]], epsilon: f64) -> Result<Vec<PerturbationField>> {
    let dim = decoder.embed_dim();
    let mut out = Vec::with_capacity(priors.len());
    for chunk in priors.chunks(SYNTH_CHUNK) {
        let mut m = Array2::zeros((chunk.len(), dim));
        for (r, p) in chunk.iter().enumerate() {
            m.row_mut(r).assign(&ndarray::ArrayView1::from(*p));
        }
        let (delta, _) = decoder.forward(&m, epsilon, Mode::Inference)?;
        for d in delta.axis_iter(Axis(0)) {
            out.push(PerturbationField::from_chw(&d.to_owned())?);
        }
    }
    Ok(out)
}

/// Produces the protected image at the original resolution.
pub fn protect(
    request: &ProtectRequest,
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    decoder: &Decoder,
) -> Result<(ImageBuffer, ProtectReport)> {
    request.validate()?;
    if bank.is_empty() {
        return invalid("embedding bank is empty");
    }
    if bank.dim() != decoder.embed_dim() {
        return invalid(format!("bank dimension {} does not match decoder input {}", bank.dim(), decoder.embed_dim()));
    }
    let image = &request.image;
    let grid = plan_grid(image.width(), image.height(), request.n_max)?.with_block_side(decoder.block_side())?;
    let blocks = decompose(image, grid)?;
    let map = assign_concepts(&grid, blocks.source_dims, &request.annotations, request.confidence_floor)?;
    let priors = select_block_priors(&blocks, &map, &request.annotations, bank, encoder, request.minimax_enabled)?;
    drop(blocks);

    // Blocks sharing a bank entry share one synthesized perturbation.
    let mut slot_of_block = Vec::with_capacity(priors.len());
    let mut unique: Vec<&[f64]> = Vec::new();
    let mut slot_of_index: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &priors {
        let slot = match p.bank_index {
            Some(i) => *slot_of_index.entry(i).or_insert_with(|| {
                unique.push(&p.embedding);
                unique.len() - 1
            }),
            None => {
                unique.push(&p.embedding);
                unique.len() - 1
            }
        };
        slot_of_block.push(slot);
    }
    let mut fields = synthesize_all(decoder, &unique, request.epsilon)?;
    for f in &mut fields {
        f.clamp_abs(request.epsilon);
    }
    let deltas: Vec<PerturbationField> = slot_of_block.iter().map(|&s| fields[s].clone()).collect();
    let field = assemble_perturbation(&deltas, grid, image.width(), image.height())?;
    let protected = apply_budget(image, &field, request.epsilon)?;
    let max_deviation = protected.max_abs_diff(image)?;

    let block_reports = priors
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (col, row) = grid.position(k);
            BlockReport {
                index: k,
                col,
                row,
                concepts: map.sets[k].clone(),
                fallback: map.fallback[k],
                prior: p.source,
                bank_index: p.bank_index,
                score: p.score,
            }
        })
        .collect();
    let report = ProtectReport {
        width: image.width(),
        height: image.height(),
        grid,
        epsilon: request.epsilon,
        n_max: request.n_max,
        minimax_enabled: request.minimax_enabled,
        blocks: block_reports,
        unique_priors: unique.len(),
        max_deviation,
    };
    Ok((protected, report))
}

/// Runs [`protect`] over many requests with at most `workers` threads.
/// Results keep request order.
pub fn protect_batch(
    requests: &[ProtectRequest],
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    decoder: &Decoder,
    workers: usize,
) -> Vec<Result<(ImageBuffer, ProtectReport)>> {
    let workers = workers.clamp(1, requests.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<(ImageBuffer, ProtectReport)>>>> =
        requests.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let r = protect(&requests[i], bank, encoder, decoder);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone)]
pub struct SweepItem {
    pub id: String,
    pub image: Arc<ImageBuffer>,
    pub annotations: Vec<ConceptAnnotation>,
    pub truth: LocationCodes,
}

/// Scores one sweep setting from the protected pairs it produced.
pub trait SweepEvaluator {
    fn evaluate(&mut self, n_max: usize, pairs: &[ImagePair]) -> Result<BenchmarkTable>;
}

/// Evaluates through [`run_benchmark`]; queries are tagged `nmax{N}`.
pub struct BenchmarkEvaluator<'a> {
    pub client: &'a dyn TargetModel,
    pub geocoder: &'a dyn Geocoder,
    pub prompt: EvalPrompt,
}

impl SweepEvaluator for BenchmarkEvaluator<'_> {
    fn evaluate(&mut self, n_max: usize, pairs: &[ImagePair]) -> Result<BenchmarkTable> {
        let tag = format!("nmax{n_max}");
        let (table, _) = run_benchmark(pairs, self.client, self.geocoder, &self.prompt, &tag, Some(&tag))?;
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub id: String,
    pub cols: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_max: usize,
    pub grids: Vec<SweepGrid>,
    pub table: Option<BenchmarkTable>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepSettings {
    pub epsilon: f64,
    pub minimax_enabled: bool,
    pub confidence_floor: f64,
}

/// Protects the corpus once per `n_max` and hands each batch to `evaluator`.
/// Failures are recorded on the row and the sweep moves on.
pub fn ablation_sweep(
    corpus: &[SweepItem],
    n_max_values: &[usize],
    settings: SweepSettings,
    bank: &EmbeddingBank,
    encoder: &dyn Encoder,
    decoder: &Decoder,
    evaluator: &mut dyn SweepEvaluator,
) -> Result<Vec<SweepRow>> {
    if corpus.is_empty() {
        return invalid("sweep corpus is empty");
    }
    if n_max_values.is_empty() {
        return invalid("no n_max values to sweep");
    }
    let mut rows = Vec::with_capacity(n_max_values.len());
    for &n_max in n_max_values {
        let mut grids = Vec::with_capacity(corpus.len());
        let mut pairs = Vec::with_capacity(corpus.len());
        let mut failure = None;
        for item in corpus {
            let req = ProtectRequest {
                image: (*item.image).clone(),
                annotations: item.annotations.clone(),
                epsilon: settings.epsilon,
                n_max,
                minimax_enabled: settings.minimax_enabled,
                confidence_floor: settings.confidence_floor,
            };
            match protect(&req, bank, encoder, decoder) {
                Ok((protected, report)) => {
                    grids.push(SweepGrid { id: item.id.clone(), cols: report.grid.cols, rows: report.grid.rows });
                    pairs.push(ImagePair {
                        id: item.id.clone(),
                        truth: item.truth.clone(),
                        original: ImageSource::Memory(Arc::clone(&item.image)),
                        adversarial: ImageSource::Memory(Arc::new(protected.quantized())),
                    });
                }
                Err(e) => {
                    failure = Some(format!("protect failed for {}: {e}", item.id));
                    break;
                }
            }
        }
        let (table, error) = match failure {
            Some(msg) => (None, Some(msg)),
            None => match evaluator.evaluate(n_max, &pairs) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            },
        };
        if let Some(e) = &error {
            log::warn!("sweep row n_max={n_max}: {e}");
        }
        rows.push(SweepRow { n_max, grids, table, error });
    }
    Ok(rows)
}
