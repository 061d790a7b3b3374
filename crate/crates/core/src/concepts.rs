//! Geographic concept annotations and their assignment to grid blocks.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::tiling::GridSpec;

/// Reasoning scale a concept belongs to, coarsest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Continental,
    National,
    City,
    Local,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Continental, Level::National, Level::City, Level::Local];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Continental => "continental",
            Level::National => "national",
            Level::City => "city",
            Level::Local => "local",
        };
        f.write_str(s)
    }
}

/// Normalized square box `[center_x, center_y, size]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub center_x: f64,
    pub center_y: f64,
    pub size: f64,
}

impl BBox {
    pub fn new(center_x: f64, center_y: f64, size: f64) -> Result<Self> {
        let b = Self { center_x, center_y, size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.center_x) || !unit(self.center_y) {
            return Err(Error::Schema(format!("bbox centre ({}, {}) outside [0,1]", self.center_x, self.center_y)));
        }
        if !(self.size > 0.0 && self.size <= 1.0) {
            return Err(Error::Schema(format!("bbox size {} outside (0,1]", self.size)));
        }
        Ok(())
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.center_x, self.center_y, self.size].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [center_x, center_y, size] = <[f64; 3]>::deserialize(d)?;
        Ok(Self { center_x, center_y, size })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub phrase: String,
    pub level: Level,
    pub bbox: BBox,
    pub confidence: f64,
}

impl ConceptAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.phrase.trim().is_empty() {
            return Err(Error::Schema("concept phrase is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Schema(format!("confidence {} outside [0,1]", self.confidence)));
        }
        self.bbox.validate()
    }
}

/// On-disk annotation document: `{"concepts": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub concepts: Vec<ConceptAnnotation>,
}

impl AnnotationFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let file: Self = serde_json::from_str(&text)?;
        for c in &file.concepts {
            c.validate()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Axis-aligned rectangle in pixel coordinates (half-open semantics unused;
/// only positive-area overlap matters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    /// Zero area after clipping to the image.
    pub degenerate: bool,
}

impl PixelRect {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1, degenerate: x1 <= x0 || y1 <= y0 }
    }

    pub fn overlaps(&self, other: &PixelRect) -> bool {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w > 0.0 && h > 0.0
    }
}

/// Converts a normalized box to pixels; `size` scales each axis independently.
pub fn bbox_to_pixels(bbox: &BBox, width: usize, height: usize) -> PixelRect {
    let (w, h) = (width as f64, height as f64);
    let half = bbox.size / 2.0;
    PixelRect::new(
        ((bbox.center_x - half) * w).clamp(0.0, w),
        ((bbox.center_x + half) * w).clamp(0.0, w),
        ((bbox.center_y - half) * h).clamp(0.0, h),
        ((bbox.center_y + half) * h).clamp(0.0, h),
    )
}

/// Per-block concept subsets (indices into the annotation list).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConceptMap {
    pub sets: Vec<Vec<usize>>,
    pub fallback: Vec<bool>,
}

impl BlockConceptMap {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Extent of block `k` mapped back onto the source image.
pub fn block_extent(grid: &GridSpec, k: usize, source_dims: (usize, usize)) -> PixelRect {
    let (col, row) = grid.position(k);
    let bw = source_dims.0 as f64 / grid.cols as f64;
    let bh = source_dims.1 as f64 / grid.rows as f64;
    PixelRect::new(col as f64 * bw, (col + 1) as f64 * bw, row as f64 * bh, (row + 1) as f64 * bh)
}

/// Assigns each block the concepts whose boxes overlap it with positive area.
/// Blocks with no overlap receive every retained concept and are flagged.
/// Annotations with confidence below `confidence_floor` are ignored.
pub fn assign_concepts(
    grid: &GridSpec,
    source_dims: (usize, usize),
    annotations: &[ConceptAnnotation],
    confidence_floor: f64,
) -> Result<BlockConceptMap> {
    if source_dims.0 == 0 || source_dims.1 == 0 {
        return invalid("source dimensions must be positive");
    }
    let kept: Vec<(usize, PixelRect)> = annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| a.confidence >= confidence_floor)
        .map(|(i, a)| (i, bbox_to_pixels(&a.bbox, source_dims.0, source_dims.1)))
        .collect();
    for (i, r) in &kept {
        if r.degenerate {
            log::warn!("concept {i} has a zero-area box after clipping; it only reaches blocks via fallback");
        }
    }
    let all: Vec<usize> = kept.iter().map(|(i, _)| *i).collect();

    let n = grid.block_count();
    let mut sets = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    for k in 0..n {
        let extent = block_extent(grid, k, source_dims);
        let hits: Vec<usize> = kept.iter().filter(|(_, r)| r.overlaps(&extent)).map(|(i, _)| *i).collect();
        if hits.is_empty() && !all.is_empty() {
            sets.push(all.clone());
            fallback.push(true);
        } else {
            sets.push(hits);
            fallback.push(false);
        }
    }
    Ok(BlockConceptMap { sets, fallback })
}
