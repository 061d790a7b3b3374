use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use geoshield::{AnnotationFile, ConceptAnnotation, LocationCodes, ToyEncoder, ToyEncoderSpec};
use serde::{Deserialize, Serialize};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no images in {}", dir.display());
    }
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Concepts from `<dir>/<stem>.json`, or empty when the file is absent.
pub fn annotations_for(image: &Path, dir: Option<&Path>) -> anyhow::Result<Vec<ConceptAnnotation>> {
    let dir = dir.or_else(|| image.parent()).unwrap_or(Path::new("."));
    let path = dir.join(format!("{}.json", stem(image)));
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(AnnotationFile::load(&path).with_context(|| format!("loading {}", path.display()))?.concepts)
}

pub fn encoder_sidecar(bank: &Path) -> PathBuf {
    let mut s = bank.as_os_str().to_owned();
    s.push(".encoder.json");
    PathBuf::from(s)
}

pub fn load_encoder(explicit: Option<&Path>, bank: &Path) -> anyhow::Result<ToyEncoder> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| encoder_sidecar(bank));
    let spec = ToyEncoderSpec::load(&path).with_context(|| format!("loading encoder description {}", path.display()))?;
    Ok(spec.build()?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One entry of a pairs file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub original: PathBuf,
    pub adversarial: PathBuf,
    #[serde(default)]
    pub truth: LocationCodes,
}

pub fn read_pairs(path: &Path) -> anyhow::Result<Vec<PairEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs: Vec<PairEntry> = read_json(path)?;
    for p in &mut pairs {
        p.original = base.join(&p.original);
        p.adversarial = base.join(&p.adversarial);
    }
    if pairs.is_empty() {
        bail!("{} lists no pairs", path.display());
    }
    Ok(pairs)
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
