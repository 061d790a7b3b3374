//! Deterministic inputs shared by the benchmarks.

use geoshield::{BBox, ConceptAnnotation, Decoder, DecoderConfig, EmbeddingBank, ImageBuffer, Level, ToyEncoder};

pub const EMBED_DIM: usize = 32;

/// Smooth colour gradient with a seed-dependent phase.
pub fn gradient(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let phase = seed as f64 * 0.37;
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let t = (x as f64 * 0.013 + y as f64 * 0.021 + phase + c as f64).sin();
                data.push(0.5 + 0.3 * t);
            }
        }
    }
    ImageBuffer::new(width, height, data).expect("valid dimensions")
}

/// Pseudo-random unit vectors from a linear congruential sequence.
pub fn unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn bank(entries: usize) -> EmbeddingBank {
    let ids = (0..entries).map(|i| format!("e{i}")).collect();
    EmbeddingBank::from_vectors(EMBED_DIM, &unit_vectors(entries, EMBED_DIM, 1), ids).expect("valid bank")
}

pub fn encoder() -> ToyEncoder {
    ToyEncoder::new("bench", 32, EMBED_DIM, 7).expect("valid encoder")
}

pub fn decoder(block_side: usize) -> Decoder {
    Decoder::init(DecoderConfig { embed_dim: EMBED_DIM, block_side, seed: 3 }).expect("valid decoder")
}

pub fn concepts() -> Vec<ConceptAnnotation> {
    [
        (Level::Continental, "arid scrubland under a hazy sky", 0.5, 0.5, 1.0),
        (Level::National, "right hand traffic with yellow centre lines", 0.5, 0.8, 0.4),
        (Level::City, "stucco houses with terracotta roofs", 0.3, 0.4, 0.3),
        (Level::Local, "taco stand with hand painted sign", 0.7, 0.6, 0.2),
    ]
    .into_iter()
    .map(|(level, phrase, cx, cy, size)| ConceptAnnotation {
        phrase: phrase.into(),
        level,
        bbox: BBox { center_x: cx, center_y: cy, size },
        confidence: 0.8,
    })
    .collect()
}
