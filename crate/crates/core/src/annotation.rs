//! Three-stage corpus annotation against a multimodal model, plus filtering
//! and composition statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::concepts::{BBox, ConceptAnnotation, Level};
use crate::error::{invalid, Error, Result};
use crate::imaging::ImageBuffer;

pub const MIN_RESOLUTION: usize = 2048;

/// Keeps images whose longer side is at least [`MIN_RESOLUTION`].
pub fn resolution_filter(width: usize, height: usize) -> bool {
    width.max(height) >= MIN_RESOLUTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Filter,
    Scene,
    Reasoning,
}

pub struct MllmRequest<'a> {
    pub image_id: &'a str,
    pub stage: Stage,
    pub prompt: &'a str,
    pub image: &'a ImageBuffer,
}

/// A multimodal chat endpoint returning raw text for an image + prompt.
pub trait MultimodalClient: Send + Sync {
    fn complete(&self, request: &MllmRequest<'_>) -> Result<String>;
}

/// Replays responses per `(image id, stage)` in order; the last response
/// repeats once the script runs out.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    scripts: BTreeMap<(String, Stage), Vec<String>>,
    calls: std::sync::Mutex<BTreeMap<(String, Stage), usize>>,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image_id: &str, stage: Stage, response: impl Into<String>) -> &mut Self {
        self.scripts.entry((image_id.to_string(), stage)).or_default().push(response.into());
        self
    }

    pub fn calls(&self, image_id: &str, stage: Stage) -> usize {
        self.calls.lock().expect("calls poisoned").get(&(image_id.to_string(), stage)).copied().unwrap_or(0)
    }

    /// Reads `{"<image id>": {"filter": [..], "scene": [..], "reasoning": [..]}}`
    /// where each response is a string or a JSON value (serialized verbatim).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: BTreeMap<String, BTreeMap<Stage, Vec<Value>>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut client = Self::new();
        for (id, stages) in doc {
            for (stage, responses) in stages {
                for r in responses {
                    let text = match r {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    client.push(&id, stage, text);
                }
            }
        }
        Ok(client)
    }
}

impl MultimodalClient for ScriptedClient {
    fn complete(&self, r: &MllmRequest<'_>) -> Result<String> {
        let key = (r.image_id.to_string(), r.stage);
        let script = self
            .scripts
            .get(&key)
            .ok_or_else(|| Error::Client(format!("no scripted {:?} response for {}", r.stage, r.image_id)))?;
        let mut calls = self.calls.lock().expect("calls poisoned");
        let n = calls.entry(key).or_insert(0);
        let resp = script[(*n).min(script.len() - 1)].clone();
        *n += 1;
        Ok(resp)
    }
}

pub const STAGE1_PROMPT: &str = "Evaluate whether this image contains real-world geographical features (natural or man-made elements related to places on Earth) while excluding abstract patterns, studio portraits, or isolated object close-ups. Respond with a boolean decision with reasoning explanation in JSON format: {\"keep\": true|false, \"reason\": \"...\"}.";
pub const STAGE2_PROMPT: &str = "Categorize this image using a three-level hierarchy (L1: Environmental Domain, L2: Contextual Setting, L3: Scene Specification) while capturing detailed descriptive attributes across environmental elements (natural and man-made), architectural characteristics (styles and materials), and atmospheric conditions (lighting, weather). L1 is one of \"Natural Environment\" or \"Built Environment\". For natural environments L2 is one of mountainous, forest/woodland, plains/grassland, water body, desert, coastal; for built environments L2 is one of urban/city, rural/suburban, transportation infrastructure, industrial. Respond in JSON: {\"l1\": \"...\", \"l2\": \"...\", \"l3\": \"...\", \"attributes\": {\"environmental_elements\": [...], \"architectural_characteristics\": [...], \"atmospheric_conditions\": [...]}}.";
pub const STAGE3_PROMPT: &str = "Perform hierarchical geographic reasoning analysis (Continental -> National -> City -> Local) identifying key visual concepts at each level with precise spatial localization. Each reasoning step produces a descriptive concept phrase (5-10 words) with a normalized square bounding box [center_x, center_y, size] and a confidence score. Describe visual evidence only; do not name a specific location. Respond in JSON: {\"concepts\": [{\"level\": \"continental|national|city|local\", \"phrase\": \"...\", \"bbox\": [cx, cy, size], \"confidence\": 0.0-1.0}]}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub filter: String,
    pub scene: String,
    pub reasoning: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { filter: STAGE1_PROMPT.into(), scene: STAGE2_PROMPT.into(), reasoning: STAGE3_PROMPT.into() }
    }
}

impl PromptTemplates {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn for_stage(&self, stage: Stage) -> &str {
        match stage {
            Stage::Filter => &self.filter,
            Stage::Scene => &self.scene,
            Stage::Reasoning => &self.reasoning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub backoff_factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff: Duration::from_millis(500), backoff_factor: 2 }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, initial_backoff: Duration::ZERO, backoff_factor: 1 }
    }

    /// Calls the stage and parses the reply, retrying transport and schema
    /// failures; exhaustion yields [`Error::Quarantined`].
    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<String>, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        let mut delay = self.initial_backoff;
        let mut last = String::new();
        for n in 1..=self.max_attempts.max(1) {
            match attempt().and_then(|text| parse(&text)) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("attempt {n} failed: {e}");
                    last = e.to_string();
                }
            }
            if n < self.max_attempts && !delay.is_zero() {
                std::thread::sleep(delay);
                delay *= self.backoff_factor;
            }
        }
        Err(Error::Quarantined { attempts: self.max_attempts.max(1), reason: last })
    }
}

/// Pulls the first JSON object out of a reply, tolerating code fences and
/// surrounding prose.
fn json_object(text: &str) -> Result<serde_json::Map<String, Value>> {
    let start = text.find('{').ok_or_else(|| Error::Schema("reply contains no JSON object".into()))?;
    let end = text.rfind('}').ok_or_else(|| Error::Schema("reply contains no JSON object".into()))?;
    if end < start {
        return Err(Error::Schema("reply contains no JSON object".into()));
    }
    match serde_json::from_str::<Value>(&text[start..=end]) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Schema("reply is not a JSON object".into())),
        Err(e) => Err(Error::Schema(format!("invalid JSON: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub keep: bool,
    pub reason: String,
}

pub fn parse_stage1(text: &str) -> Result<FilterVerdict> {
    let obj = json_object(text)?;
    let keep = obj
        .get("keep")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::Schema("stage 1 reply lacks boolean `keep`".into()))?;
    let reason = obj.get("reason").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok(FilterVerdict { keep, reason })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "Natural Environment")]
    Natural,
    #[serde(rename = "Built Environment")]
    Built,
}

impl Domain {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "natural environment" => Some(Domain::Natural),
            "built environment" => Some(Domain::Built),
            _ => None,
        }
    }

    pub fn settings(self) -> &'static [&'static str] {
        match self {
            Domain::Natural => &["mountainous", "forest/woodland", "plains/grassland", "water body", "desert", "coastal"],
            Domain::Built => &["urban/city", "rural/suburban", "transportation infrastructure", "industrial"],
        }
    }
}

/// Known scene specifications per contextual setting. Settings absent here
/// accept any non-empty specification.
pub fn scene_specifications(setting: &str) -> Option<&'static [&'static str]> {
    match setting {
        "urban/city" => Some(&["street views", "skylines", "plazas/parks", "residential areas", "commercial districts", "historic districts"]),
        "mountainous" => Some(&["peaks/ridges", "valleys", "plateaus"]),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAttributes {
    #[serde(default)]
    pub environmental_elements: Vec<String>,
    #[serde(default)]
    pub architectural_characteristics: Vec<String>,
    #[serde(default)]
    pub atmospheric_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub l1: Domain,
    pub l2: String,
    pub l3: String,
    pub attributes: SceneAttributes,
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        Some(Value::String(s)) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        _ => Vec::new(),
    }
}

pub fn parse_stage2(text: &str) -> Result<SceneAnnotation> {
    let obj = json_object(text)?;
    let field = |k: &str| obj.get(k).and_then(Value::as_str).map(|s| s.trim().to_string());
    let l1_text = field("l1").ok_or_else(|| Error::Schema("stage 2 reply lacks `l1`".into()))?;
    let l1 = Domain::parse(&l1_text).ok_or_else(|| Error::Schema(format!("unknown environmental domain `{l1_text}`")))?;
    let l2 = field("l2").ok_or_else(|| Error::Schema("stage 2 reply lacks `l2`".into()))?.to_lowercase();
    if !l1.settings().contains(&l2.as_str()) {
        return Err(Error::Schema(format!("`{l2}` is not a contextual setting of {l1_text}")));
    }
    let l3 = field("l3").filter(|s| !s.is_empty()).ok_or_else(|| Error::Schema("stage 2 reply lacks `l3`".into()))?.to_lowercase();
    if let Some(vocab) = scene_specifications(&l2) {
        if !vocab.contains(&l3.as_str()) {
            return Err(Error::Schema(format!("`{l3}` is not a scene specification of {l2}")));
        }
    }
    let attrs = obj.get("attributes").and_then(Value::as_object);
    let attributes = SceneAttributes {
        environmental_elements: string_list(attrs.and_then(|a| a.get("environmental_elements"))),
        architectural_characteristics: string_list(attrs.and_then(|a| a.get("architectural_characteristics"))),
        atmospheric_conditions: string_list(attrs.and_then(|a| a.get("atmospheric_conditions"))),
    };
    Ok(SceneAnnotation { l1, l2, l3, attributes })
}

fn parse_level(s: &str) -> Option<Level> {
    match s.trim().to_lowercase().as_str() {
        "continental" => Some(Level::Continental),
        "national" => Some(Level::National),
        "city" => Some(Level::City),
        "local" => Some(Level::Local),
        _ => None,
    }
}

fn parse_entry(v: &Value) -> std::result::Result<ConceptAnnotation, String> {
    let o = v.as_object().ok_or("entry is not an object")?;
    let level = o.get("level").and_then(Value::as_str).and_then(parse_level).ok_or("missing or unknown level")?;
    let phrase = o.get("phrase").and_then(Value::as_str).map(str::trim).filter(|p| !p.is_empty()).ok_or("missing phrase")?;
    let b = o.get("bbox").and_then(Value::as_array).filter(|b| b.len() == 3).ok_or("bbox must be [cx, cy, size]")?;
    let nums: Vec<f64> = b.iter().filter_map(Value::as_f64).collect();
    if nums.len() != 3 {
        return Err("bbox entries must be numbers".into());
    }
    let confidence = o.get("confidence").and_then(Value::as_f64).ok_or("missing confidence")?;
    let c = ConceptAnnotation {
        phrase: phrase.to_string(),
        level,
        bbox: BBox { center_x: nums[0], center_y: nums[1], size: nums[2] },
        confidence,
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Parses the reasoning chain. Malformed entries are dropped with a warning;
/// the rest are returned ordered continental → local.
pub fn parse_stage3(text: &str) -> Result<Vec<ConceptAnnotation>> {
    let obj = json_object(text)?;
    let entries = obj
        .get("concepts")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("stage 3 reply lacks a `concepts` array".into()))?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        match parse_entry(e) {
            Ok(c) => {
                let words = c.phrase.split_whitespace().count();
                if !(5..=10).contains(&words) {
                    log::warn!("concept {i} phrase has {words} words (guideline 5-10), kept verbatim");
                }
                out.push(c);
            }
            Err(why) => log::warn!("dropping concept {i}: {why}"),
        }
    }
    out.sort_by_key(|c| c.level);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyThresholds {
    pub easy: f64,
    pub medium: f64,
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        Self { easy: 0.8, medium: 0.5 }
    }
}

/// Grades by the mean city and local confidence (all levels when neither is
/// present).
pub fn assess_difficulty(confidences: &[(Level, f64)], t: DifficultyThresholds) -> Result<Difficulty> {
    if confidences.is_empty() {
        return invalid("difficulty needs at least one confidence");
    }
    let fine: Vec<f64> = confidences
        .iter()
        .filter(|(l, _)| matches!(l, Level::City | Level::Local))
        .map(|&(_, c)| c)
        .collect();
    let pool: Vec<f64> = if fine.is_empty() { confidences.iter().map(|&(_, c)| c).collect() } else { fine };
    let mean = pool.iter().sum::<f64>() / pool.len() as f64;
    Ok(if mean >= t.easy {
        Difficulty::Easy
    } else if mean >= t.medium {
        Difficulty::Medium
    } else {
        Difficulty::Hard
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    /// Below the resolution floor.
    Rejected,
    /// Stage 1 said no geographic content.
    Filtered,
    Annotated,
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationJob {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneAnnotation>,
    /// Stage-3 output; named so the document also reads as an annotation file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<ConceptAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarantine_reason: Option<String>,
}

impl AnnotationJob {
    fn new(image_id: &str, width: usize, height: usize, status: JobStatus) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            status,
            filter: None,
            scene: None,
            concepts: Vec::new(),
            difficulty: None,
            quarantine_reason: None,
        }
    }

    /// Checks the structural invariants of a persisted job.
    pub fn validate(&self) -> Result<()> {
        let keep = self.filter.as_ref().map(|f| f.keep).unwrap_or(false);
        if !self.concepts.is_empty() && !keep {
            return Err(Error::Schema(format!("{}: concepts present without a keep verdict", self.image_id)));
        }
        for c in &self.concepts {
            c.validate()?;
        }
        match self.status {
            JobStatus::Annotated => {
                if !keep || self.scene.is_none() || self.difficulty.is_none() {
                    return Err(Error::Schema(format!("{}: annotated job is missing a stage", self.image_id)));
                }
            }
            JobStatus::Quarantined => {
                if self.quarantine_reason.is_none() {
                    return Err(Error::Schema(format!("{}: quarantined job has no reason", self.image_id)));
                }
            }
            JobStatus::Rejected | JobStatus::Filtered => {}
        }
        Ok(())
    }

    pub fn scene_type(&self) -> Option<SceneType> {
        self.scene.as_ref().map(|s| SceneType::of(s))
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnnotationSettings {
    pub templates: PromptTemplates,
    pub retry: RetryPolicy,
    pub thresholds: DifficultyThresholds,
}

/// Runs resolution screening and the three stages for one image.
pub fn run_job(image_id: &str, image: &ImageBuffer, client: &dyn MultimodalClient, settings: &AnnotationSettings) -> AnnotationJob {
    let (w, h) = (image.width(), image.height());
    if !resolution_filter(w, h) {
        return AnnotationJob::new(image_id, w, h, JobStatus::Rejected);
    }
    let mut job = AnnotationJob::new(image_id, w, h, JobStatus::Annotated);
    let call = |stage: Stage| {
        let prompt = settings.templates.for_stage(stage);
        move || client.complete(&MllmRequest { image_id, stage, prompt, image })
    };
    let quarantine = |mut job: AnnotationJob, stage: &str, e: Error| {
        log::warn!("{image_id}: {stage} quarantined: {e}");
        job.status = JobStatus::Quarantined;
        job.quarantine_reason = Some(format!("{stage}: {e}"));
        job
    };

    match settings.retry.run(call(Stage::Filter), parse_stage1) {
        Ok(v) => {
            let keep = v.keep;
            job.filter = Some(v);
            if !keep {
                job.status = JobStatus::Filtered;
                return job;
            }
        }
        Err(e) => return quarantine(job, "filter", e),
    }
    match settings.retry.run(call(Stage::Scene), parse_stage2) {
        Ok(s) => job.scene = Some(s),
        Err(e) => return quarantine(job, "scene", e),
    }
    let concepts = match settings.retry.run(call(Stage::Reasoning), parse_stage3) {
        Ok(c) => c,
        Err(e) => return quarantine(job, "reasoning", e),
    };
    if concepts.is_empty() {
        return quarantine(job, "reasoning", Error::Schema("no usable concepts".into()));
    }
    let conf: Vec<(Level, f64)> = concepts.iter().map(|c| (c.level, c.confidence)).collect();
    job.difficulty = assess_difficulty(&conf, settings.thresholds).ok();
    job.concepts = concepts;
    job
}

/// Runs jobs with at most `workers` threads, keeping input order. Images are
/// loaded lazily by `load` inside the worker.
pub fn run_jobs<F>(
    ids: &[String],
    load: F,
    client: &dyn MultimodalClient,
    settings: &AnnotationSettings,
    workers: usize,
) -> Vec<AnnotationJob>
where
    F: Fn(&str) -> Result<ImageBuffer> + Sync,
{
    let workers = workers.clamp(1, ids.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<AnnotationJob>>> = ids.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= ids.len() {
                    break;
                }
                let id = &ids[i];
                let job = match load(id) {
                    Ok(img) => run_job(id, &img, client, settings),
                    Err(e) => {
                        let mut j = AnnotationJob::new(id, 0, 0, JobStatus::Quarantined);
                        j.quarantine_reason = Some(format!("unreadable image: {e}"));
                        j
                    }
                };
                *slots[i].lock().expect("slot poisoned") = Some(job);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot poisoned").expect("slot filled")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneType {
    Natural,
    Mixed,
    Urban,
}

impl SceneType {
    pub const ALL: [SceneType; 3] = [SceneType::Natural, SceneType::Mixed, SceneType::Urban];

    pub fn of(scene: &SceneAnnotation) -> Self {
        match (scene.l1, scene.l2.as_str()) {
            (Domain::Natural, _) => SceneType::Natural,
            (Domain::Built, "urban/city") => SceneType::Urban,
            _ => SceneType::Mixed,
        }
    }
}

impl fmt::Display for SceneType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneType::Natural => "natural",
            SceneType::Mixed => "mixed",
            SceneType::Urban => "urban",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub jobs: usize,
    pub annotated: usize,
    pub rejected: usize,
    pub filtered: usize,
    pub quarantined: usize,
    pub scene_counts: BTreeMap<SceneType, usize>,
    /// Percent of annotated jobs.
    pub scene_shares: BTreeMap<SceneType, f64>,
    pub difficulty_counts: BTreeMap<Difficulty, usize>,
    pub difficulty_shares: BTreeMap<Difficulty, f64>,
    /// Published corpus-level difficulty shares, for comparison only.
    pub difficulty_reference: BTreeMap<Difficulty, f64>,
    /// Word frequencies over concept phrases, most frequent first.
    pub concept_terms: Vec<(String, usize)>,
}

/// Difficulty distribution reported for the reference corpus, in percent.
pub const REFERENCE_DIFFICULTY_SHARES: [(Difficulty, f64); 3] =
    [(Difficulty::Easy, 17.8), (Difficulty::Medium, 29.1), (Difficulty::Hard, 53.2)];

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "by", "for", "from", "in", "into", "is", "of", "on", "or", "the", "to", "with",
];

pub fn corpus_stats(jobs: &[AnnotationJob]) -> CorpusStats {
    let mut scene_counts: BTreeMap<SceneType, usize> = SceneType::ALL.iter().map(|&s| (s, 0)).collect();
    let mut difficulty_counts: BTreeMap<Difficulty, usize> =
        [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard].iter().map(|&d| (d, 0)).collect();
    let mut terms: BTreeMap<String, usize> = BTreeMap::new();
    let count = |s: JobStatus| jobs.iter().filter(|j| j.status == s).count();
    let (annotated, rejected, filtered, quarantined) =
        (count(JobStatus::Annotated), count(JobStatus::Rejected), count(JobStatus::Filtered), count(JobStatus::Quarantined));
    for job in jobs.iter().filter(|j| j.status == JobStatus::Annotated) {
        if let Some(s) = job.scene_type() {
            *scene_counts.entry(s).or_default() += 1;
        }
        if let Some(d) = job.difficulty {
            *difficulty_counts.entry(d).or_default() += 1;
        }
        for c in &job.concepts {
            for w in c.phrase.split(|ch: char| !ch.is_alphanumeric() && ch != '-').map(str::to_lowercase) {
                if w.len() > 1 && !STOPWORDS.contains(&w.as_str()) {
                    *terms.entry(w).or_default() += 1;
                }
            }
        }
    }
    let share = |n: usize| if annotated == 0 { 0.0 } else { n as f64 / annotated as f64 * 100.0 };
    let scene_shares = scene_counts.iter().map(|(&k, &n)| (k, share(n))).collect();
    let difficulty_shares = difficulty_counts.iter().map(|(&k, &n)| (k, share(n))).collect();
    let mut concept_terms: Vec<(String, usize)> = terms.into_iter().collect();
    concept_terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    CorpusStats {
        jobs: jobs.len(),
        annotated,
        rejected,
        filtered,
        quarantined,
        scene_counts,
        scene_shares,
        difficulty_counts,
        difficulty_shares,
        difficulty_reference: REFERENCE_DIFFICULTY_SHARES.into_iter().collect(),
        concept_terms,
    }
}

impl CorpusStats {
    /// Plot-ready long format: `group,key,count,share`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,key,count,share\n");
        for (k, n) in &self.scene_counts {
            out.push_str(&format!("scene,{k},{n},{:.2}\n", self.scene_shares[k]));
        }
        for (k, n) in &self.difficulty_counts {
            out.push_str(&format!("difficulty,{k},{n},{:.2}\n", self.difficulty_shares[k]));
        }
        for (k, share) in &self.difficulty_reference {
            out.push_str(&format!("difficulty_reference,{k},,{share:.2}\n"));
        }
        for (w, n) in &self.concept_terms {
            out.push_str(&format!("term,{w},{n},\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Writes one JSON document per annotated job and a `manifest.json` listing
/// every job. Quarantined jobs appear only in the manifest.
pub fn save_corpus(dir: impl AsRef<Path>, jobs: &[AnnotationJob]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(jobs.len());
    for job in jobs {
        let document = if job.status == JobStatus::Annotated {
            job.validate()?;
            let name = format!("{}.json", sanitize(&job.image_id));
            std::fs::write(dir.join(&name), serde_json::to_string_pretty(job)?)?;
            Some(name)
        } else {
            None
        };
        manifest.push(ManifestEntry {
            image_id: job.image_id.clone(),
            status: job.status,
            document,
            reason: job.quarantine_reason.clone(),
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads back every annotated job listed in the manifest, validating each.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<AnnotationJob>> {
    let dir = dir.as_ref();
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .iter()
        .filter_map(|m| m.document.as_ref())
        .map(|doc| {
            let job: AnnotationJob = serde_json::from_str(&std::fs::read_to_string(dir.join(doc))?)?;
            job.validate()?;
            Ok(job)
        })
        .collect()
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}
