//! Adaptive block decomposition and full-resolution reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{ImageBuffer, PerturbationField, CHANNELS};

/// Default encoder-facing block side in pixels.
pub const DEFAULT_BLOCK_SIDE: usize = 224;

/// Default cap on the number of blocks.
pub const DEFAULT_N_MAX: usize = 64;

/// The chosen block grid: `cols` spans the width, `rows` the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
    pub block_side: usize,
}

impl GridSpec {
    pub fn new(cols: usize, rows: usize, block_side: usize) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return invalid("grid must have at least one row and column");
        }
        if block_side == 0 || block_side % 16 != 0 {
            return invalid(format!("block side {block_side} is not a positive multiple of 16"));
        }
        Ok(Self { cols, rows, block_side })
    }

    pub fn with_block_side(self, block_side: usize) -> Result<Self> {
        Self::new(self.cols, self.rows, block_side)
    }

    pub fn block_count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn canvas_width(&self) -> usize {
        self.cols * self.block_side
    }

    pub fn canvas_height(&self) -> usize {
        self.rows * self.block_side
    }

    /// `(col, row)` of the block at row-major index `k`.
    pub fn position(&self, k: usize) -> (usize, usize) {
        (k % self.cols, k / self.cols)
    }
}

/// Chooses the grid whose aspect ratio best matches `width / height` with at
/// most `n_max` blocks. Ties prefer more blocks, then fewer columns.
pub fn plan_grid(width: usize, height: usize, n_max: usize) -> Result<GridSpec> {
    if width == 0 || height == 0 || n_max == 0 {
        return invalid(format!("plan_grid needs positive inputs, got ({width}, {height}, {n_max})"));
    }
    let (w, h) = (width as u128, height as u128);
    // |W/H - m/n| = |W n - m H| / (H n); compare cross-multiplied to stay exact.
    let mut best: Option<(u128, u128, usize, usize)> = None;
    for m in 1..=n_max {
        for n in 1..=n_max / m {
            let num = (w * n as u128).abs_diff(m as u128 * h);
            let den = n as u128;
            let better = match best {
                None => true,
                Some((bnum, bden, bm, bn)) => {
                    let lhs = num * bden;
                    let rhs = bnum * den;
                    lhs < rhs || (lhs == rhs && (m * n > bm * bn || (m * n == bm * bn && m < bm)))
                }
            };
            if better {
                best = Some((num, den, m, n));
            }
        }
    }
    let (_, _, m, n) = best.expect("n_max >= 1 admits the 1x1 grid");
    GridSpec::new(m, n, DEFAULT_BLOCK_SIDE)
}

/// Square blocks of a resized image, in row-major order.
#[derive(Debug, Clone)]
pub struct BlockSet {
    pub blocks: Vec<ImageBuffer>,
    pub grid: GridSpec,
    /// `(width, height)` of the source image.
    pub source_dims: (usize, usize),
}

impl BlockSet {
    /// Tiles the blocks back into the resized canvas.
    pub fn concat(&self) -> Result<ImageBuffer> {
        let (cw, ch) = (self.grid.canvas_width(), self.grid.canvas_height());
        let side = self.grid.block_side;
        let mut data = vec![0.0; cw * ch * CHANNELS];
        for (k, block) in self.blocks.iter().enumerate() {
            let (col, row) = self.grid.position(k);
            for y in 0..side {
                let dst = ((row * side + y) * cw + col * side) * CHANNELS;
                let src = y * side * CHANNELS;
                data[dst..dst + side * CHANNELS].copy_from_slice(&block.data()[src..src + side * CHANNELS]);
            }
        }
        ImageBuffer::new(cw, ch, data)
    }
}

/// Resizes `image` onto the grid canvas (bilinear) and cuts it into blocks.
pub fn decompose(image: &ImageBuffer, grid: GridSpec) -> Result<BlockSet> {
    let canvas = image.resize_bilinear(grid.canvas_width(), grid.canvas_height())?;
    let side = grid.block_side;
    let blocks = (0..grid.block_count())
        .map(|k| {
            let (col, row) = grid.position(k);
            canvas.crop(col * side, row * side, side, side)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSet { blocks, grid, source_dims: (image.width(), image.height()) })
}

/// Tiles per-block deltas row-major and upsamples (nearest) to `width`×`height`.
pub fn assemble_perturbation(
    block_deltas: &[PerturbationField],
    grid: GridSpec,
    width: usize,
    height: usize,
) -> Result<PerturbationField> {
    if block_deltas.len() != grid.block_count() {
        return invalid(format!(
            "expected {} block deltas, got {}",
            grid.block_count(),
            block_deltas.len()
        ));
    }
    let side = grid.block_side;
    let (cw, ch) = (grid.canvas_width(), grid.canvas_height());
    let mut data = vec![0.0; cw * ch * CHANNELS];
    for (k, delta) in block_deltas.iter().enumerate() {
        if delta.width() != side || delta.height() != side {
            return invalid(format!(
                "block delta {k} is {}x{}, expected {side}x{side}",
                delta.width(),
                delta.height()
            ));
        }
        let (col, row) = grid.position(k);
        for y in 0..side {
            let dst = ((row * side + y) * cw + col * side) * CHANNELS;
            let src = y * side * CHANNELS;
            data[dst..dst + side * CHANNELS].copy_from_slice(&delta.data()[src..src + side * CHANNELS]);
        }
    }
    PerturbationField::new(cw, ch, data)?.resize_nearest(width, height)
}

/// `clip(image + field, image - eps, image + eps)`, then clipped to `[0, 1]`.
pub fn apply_budget(image: &ImageBuffer, field: &PerturbationField, epsilon: f64) -> Result<ImageBuffer> {
    if image.width() != field.width() || image.height() != field.height() {
        return invalid(format!(
            "image is {}x{} but perturbation is {}x{}",
            image.width(),
            image.height(),
            field.width(),
            field.height()
        ));
    }
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    let data = image
        .data()
        .iter()
        .zip(field.data())
        .map(|(&x, &d)| (x + d).clamp(x - epsilon, x + epsilon).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(image.width(), image.height(), data)
}
