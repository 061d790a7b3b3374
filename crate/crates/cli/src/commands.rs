use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context};
use geoshield::annotation::{corpus_stats, run_jobs, save_corpus, AnnotationSettings, PromptTemplates, RetryPolicy};
use geoshield::annotation::DifficultyThresholds;
use geoshield::embedding::encode_image;
use geoshield::evaluation::{
    jpeg_robustness, run_benchmark, CachedGeocoder, EvalPrompt, FixtureGeocoder, ImagePair, ImageSource, JpegRow,
    PromptStyle, ScriptedTargetModel,
};
use geoshield::pipeline::{ablation_sweep, protect_batch, BenchmarkEvaluator, SweepItem, SweepRow, SweepSettings};
use geoshield::training::{train_with, write_history, TrainingExample};
use geoshield::{
    plan_grid as plan, Decoder, DecoderConfig, EmbeddingBank, Encoder, Geocoder, ImageBuffer, LocationCodes,
    MultimodalClient, ProtectRequest, ScriptedClient, TargetModel, ToyEncoder, ToyEncoderSpec, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::files::{
    annotations_for, default_workers, encoder_sidecar, list_images, load_encoder, read_json, read_pairs, stem,
    write_json,
};
use crate::live::{CensusGeocoder, ChatClient, EndpointConfig};
use crate::{
    AnnotateArgs, BuildBankArgs, EvaluateArgs, JpegArgs, PlanGridArgs, ProtectArgs, Style, SweepArgs, TargetArgs,
    TrainArgs,
};

/// Surrogate input sides, cycled when more surrogates are requested.
const SURROGATE_SIDES: [usize; 3] = [32, 16, 8];

pub fn plan_grid(a: PlanGridArgs) -> anyhow::Result<()> {
    let (w, h) = match (&a.image, a.width, a.height) {
        (Some(p), _, _) => {
            let img = ImageBuffer::load(p).with_context(|| format!("loading {}", p.display()))?;
            (img.width(), img.height())
        }
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("give --image or both --width and --height"),
    };
    let g = plan(w, h, a.n_max)?.with_block_side(a.block_side)?;
    let out = json!({
        "width": w,
        "height": h,
        "n_max": a.n_max,
        "cols": g.cols,
        "rows": g.rows,
        "blocks": g.block_count(),
        "block_side": g.block_side,
        "canvas_width": g.canvas_width(),
        "canvas_height": g.canvas_height(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn build_bank(a: BuildBankArgs) -> anyhow::Result<()> {
    let spec = match &a.encoder {
        Some(p) => ToyEncoderSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ToyEncoderSpec { name: "toy".into(), input_side: a.input_side, embed_dim: a.embed_dim, seed: a.seed },
    };
    let encoder = spec.build()?;
    let paths = list_images(&a.images)?;
    let mut vectors = Vec::with_capacity(paths.len());
    let mut ids = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = ImageBuffer::load(p).with_context(|| format!("loading {}", p.display()))?;
        vectors.push(encode_image(&encoder, &img)?);
        ids.push(stem(p));
    }
    let bank = EmbeddingBank::from_vectors(encoder.embed_dim(), &vectors, ids)?;
    if let Some(dir) = a.bank.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    bank.save(&a.bank)?;
    let sidecar = encoder_sidecar(&a.bank);
    spec.save(&sidecar)?;
    log::info!("bank of {} entries (dim {}) -> {}; encoder -> {}", bank.len(), bank.dim(), a.bank.display(), sidecar.display());
    Ok(())
}

fn load_decoder_checked(path: &Path, bank: &EmbeddingBank) -> anyhow::Result<Decoder> {
    let d = Decoder::load(path).with_context(|| format!("loading decoder {}", path.display()))?;
    ensure!(
        d.embed_dim() == bank.dim(),
        "decoder expects {}-dim priors but the bank holds {}-dim vectors",
        d.embed_dim(),
        bank.dim()
    );
    Ok(d)
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.batch_blocks {
        cfg.batch_blocks = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v.value();
    }
    if let Some(v) = a.n_max {
        cfg.n_max = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_minimax {
        cfg.minimax = false;
    }
    cfg.validate()?;
    ensure!(a.surrogates > 0, "at least one surrogate is required");

    let bank = EmbeddingBank::load(&a.bank).with_context(|| format!("loading bank {}", a.bank.display()))?;
    let encoder = load_encoder(a.encoder.as_deref(), &a.bank)?;
    let decoder = match &a.init {
        Some(p) => {
            let d = load_decoder_checked(p, &bank)?;
            ensure!(d.block_side() == a.block_side, "initial checkpoint has block side {}", d.block_side());
            d
        }
        None => Decoder::init(DecoderConfig { embed_dim: bank.dim(), block_side: a.block_side, seed: cfg.seed })?,
    };
    let surrogates: Vec<ToyEncoder> = (0..a.surrogates)
        .map(|i| {
            let side = SURROGATE_SIDES[i % SURROGATE_SIDES.len()];
            ToyEncoder::new(&format!("surrogate{i}"), side, encoder.embed_dim(), cfg.seed.wrapping_add(1000 + i as u64))
        })
        .collect::<Result<_, _>>()?;
    let surrogate_refs: Vec<&dyn Encoder> = surrogates.iter().map(|s| s as &dyn Encoder).collect();

    let mut corpus = Vec::new();
    for p in list_images(&a.corpus)? {
        let annotations = annotations_for(&p, a.annotations.as_deref())?;
        let image = ImageBuffer::load(&p).with_context(|| format!("loading {}", p.display()))?;
        corpus.push(TrainingExample { id: stem(&p), image, annotations });
    }
    log::info!("training on {} images, {} surrogates, {} parameters", corpus.len(), surrogates.len(), decoder.parameter_count());

    let mut on_step = |r: &geoshield::TrainRecord| {
        if r.step % 10 == 0 {
            log::info!("step {} loss {:.6}", r.step, r.loss);
        }
    };
    let (decoder, history) = train_with(decoder, &corpus, &bank, &encoder, &surrogate_refs, &cfg, &mut on_step)?;
    if let Some(dir) = a.decoder.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    decoder.save(&a.decoder)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("history.jsonl"))?);
        write_history(&history, &mut f)?;
        f.flush()?;
        std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    }
    match (history.first(), history.last()) {
        (Some(f), Some(l)) => log::info!("{} steps, loss {:.6} -> {:.6}", history.len(), f.loss, l.loss),
        _ => log::warn!("no optimizer steps were taken"),
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn protect(a: ProtectArgs) -> anyhow::Result<()> {
    let mut paths = a.image.clone();
    if let Some(dir) = &a.images {
        paths.extend(list_images(dir)?);
    }
    ensure!(!paths.is_empty(), "no input images");
    if let Some(s) = a.seed {
        log::debug!("seed {s} ignored: protection is deterministic");
    }
    let bank = EmbeddingBank::load(&a.model.bank).with_context(|| format!("loading bank {}", a.model.bank.display()))?;
    let encoder = load_encoder(a.model.encoder.as_deref(), &a.model.bank)?;
    let decoder = load_decoder_checked(&a.model.decoder, &bank)?;
    std::fs::create_dir_all(&a.out)?;

    let workers = a.workers.unwrap_or_else(default_workers).max(1);
    let mut failures = Vec::new();
    // Images are loaded one worker-batch at a time to bound memory.
    for chunk in paths.chunks(workers) {
        let mut jobs: Vec<(PathBuf, ProtectRequest)> = Vec::new();
        for p in chunk {
            let target = a.out.join(format!("{}.png", stem(p)));
            if same_file(p, &target) {
                bail!("output {} would overwrite its input", target.display());
            }
            let annotations = annotations_for(p, a.annotations.as_deref())?;
            let image = ImageBuffer::load(p).with_context(|| format!("loading {}", p.display()))?;
            if annotations.is_empty() {
                if a.allow_unannotated {
                    log::warn!("{}: no annotations, written unchanged and NOT protected", p.display());
                    image.save_png(&target)?;
                    let report =
                        json!({ "source": p, "output": target, "protected": false, "reason": "no concept annotations" });
                    write_json(&a.out.join(format!("{}.report.json", stem(p))), &report)?;
                } else {
                    log::error!("{}: no concept annotations; refusing (use --allow-unannotated to copy through)", p.display());
                    failures.push(p.clone());
                }
                continue;
            }
            let mut req = ProtectRequest::new(image, annotations, a.budget.epsilon.value(), a.budget.n_max);
            req.minimax_enabled = !a.budget.no_minimax;
            req.confidence_floor = a.budget.confidence_floor;
            jobs.push((p.clone(), req));
        }
        let (names, requests): (Vec<PathBuf>, Vec<ProtectRequest>) = jobs.into_iter().unzip();
        let results = protect_batch(&requests, &bank, &encoder, &decoder, workers);
        drop(requests);
        for (p, result) in names.iter().zip(results) {
            match result {
                Ok((protected, report)) => {
                    let target = a.out.join(format!("{}.png", stem(p)));
                    protected.save_png(&target)?;
                    let mut doc = serde_json::to_value(&report)?;
                    doc["source"] = json!(p);
                    doc["output"] = json!(target);
                    doc["protected"] = json!(true);
                    write_json(&a.out.join(format!("{}.report.json", stem(p))), &doc)?;
                    log::info!(
                        "{}: {}x{} grid, {} distinct priors, max deviation {:.5}",
                        p.display(),
                        report.grid.cols,
                        report.grid.rows,
                        report.unique_priors,
                        report.max_deviation
                    );
                }
                Err(e) => {
                    log::error!("{}: {e}", p.display());
                    failures.push(p.clone());
                }
            }
        }
    }
    ensure!(failures.is_empty(), "{} of {} images were not protected", failures.len(), paths.len());
    Ok(())
}

fn endpoint_client(path: &Path) -> anyhow::Result<ChatClient> {
    ChatClient::new(EndpointConfig::load(path).with_context(|| format!("loading {}", path.display()))?)
}

pub fn annotate(a: AnnotateArgs) -> anyhow::Result<()> {
    let paths = list_images(&a.images)?;
    let by_id: BTreeMap<String, PathBuf> = paths.iter().map(|p| (stem(p), p.clone())).collect();
    ensure!(by_id.len() == paths.len(), "image stems in {} are not unique", a.images.display());
    let client: Box<dyn MultimodalClient> = match (&a.mock, &a.endpoint_config) {
        (Some(m), _) => Box::new(ScriptedClient::load(m).with_context(|| format!("loading {}", m.display()))?),
        (None, Some(e)) => Box::new(endpoint_client(e)?),
        (None, None) => bail!("give --mock or --endpoint-config"),
    };
    let templates = match &a.templates {
        Some(p) => PromptTemplates::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PromptTemplates::default(),
    };
    ensure!(a.attempts > 0, "--attempts must be positive");
    let settings = AnnotationSettings {
        templates,
        retry: RetryPolicy { max_attempts: a.attempts, initial_backoff: Duration::from_millis(a.backoff_ms), backoff_factor: 2 },
        thresholds: DifficultyThresholds { easy: a.easy_threshold, medium: a.medium_threshold },
    };
    ensure!(
        0.0 <= settings.thresholds.medium && settings.thresholds.medium <= settings.thresholds.easy,
        "thresholds must satisfy 0 <= medium <= easy"
    );
    let ids: Vec<String> = by_id.keys().cloned().collect();
    let load = |id: &str| ImageBuffer::load(&by_id[id]);
    let jobs = run_jobs(&ids, load, client.as_ref(), &settings, a.workers.unwrap_or_else(default_workers));
    save_corpus(&a.out, &jobs)?;
    let stats = corpus_stats(&jobs);
    write_json(&a.out.join("stats.json"), &stats)?;
    std::fs::write(a.out.join("stats.csv"), stats.to_csv())?;
    log::info!(
        "{} images: {} annotated, {} rejected, {} filtered, {} quarantined",
        stats.jobs,
        stats.annotated,
        stats.rejected,
        stats.filtered,
        stats.quarantined
    );
    Ok(())
}

/// Geocoder chosen on the command line, with the optional persistent cache.
struct GeocoderHandle {
    inner: CachedGeocoder<Box<dyn Geocoder>>,
    cache: Option<PathBuf>,
}

impl GeocoderHandle {
    fn open(t: &TargetArgs) -> anyhow::Result<Self> {
        let base: Box<dyn Geocoder> = match (&t.geocoder_fixture, t.census) {
            (Some(p), _) => Box::new(FixtureGeocoder::load(p).with_context(|| format!("loading {}", p.display()))?),
            (None, true) => Box::new(CensusGeocoder::new(Duration::from_secs(30))),
            (None, false) => bail!("give --geocoder-fixture or --census"),
        };
        let inner = CachedGeocoder::new(base, 3);
        if let Some(p) = t.geocoder_cache.as_ref().filter(|p| p.exists()) {
            inner.load_cache(p).with_context(|| format!("loading {}", p.display()))?;
        }
        Ok(Self { inner, cache: t.geocoder_cache.clone() })
    }

    fn persist(&self) -> anyhow::Result<()> {
        if let Some(p) = &self.cache {
            self.inner.save_cache(p)?;
        }
        Ok(())
    }
}

fn target_model(t: &TargetArgs) -> anyhow::Result<Box<dyn TargetModel>> {
    Ok(match (&t.target_fixture, &t.endpoint_config) {
        (Some(p), _) => Box::new(ScriptedTargetModel::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, Some(e)) => Box::new(endpoint_client(e)?),
        (None, None) => bail!("give --target-fixture or --endpoint-config"),
    })
}

fn eval_prompt(t: &TargetArgs) -> EvalPrompt {
    let mut p = EvalPrompt::default();
    if let Some(q) = &t.query {
        p.query = q.clone();
    }
    if let Some(f) = &t.format_instructions {
        p.format_instructions = f.clone();
    }
    p.style = match t.style {
        Style::Direct => PromptStyle::Direct,
        Style::Cot => PromptStyle::ChainOfThought,
    };
    p
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let pairs: Vec<ImagePair> = read_pairs(&a.pairs)?
        .into_iter()
        .map(|p| ImagePair {
            id: p.id,
            truth: p.truth,
            original: ImageSource::Path(p.original),
            adversarial: ImageSource::Path(p.adversarial),
        })
        .collect();
    let model = target_model(&a.target)?;
    let geocoder = GeocoderHandle::open(&a.target)?;
    let prompt = eval_prompt(&a.target);
    let (table, records) = run_benchmark(&pairs, &model, &geocoder.inner, &prompt, &a.attack, a.tag.as_deref())?;
    geocoder.persist()?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("table.json"), &table)?;
    std::fs::write(a.out.join("table.csv"), table.to_csv())?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(a.out.join("records.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    print!("{}", table.to_csv());
    Ok(())
}

#[derive(Serialize)]
struct SweepReport<'a> {
    prior: &'static str,
    epsilon: f64,
    rows: &'a [SweepRow],
}

const SWEEP_CSV_HEADER: &str = "n_max,prior,grids,granularity,k,n_orig,n_adv,ppr_raw,ppr,error";

fn sweep_csv(rows: &[SweepRow], prior: &str) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "undefined".into());
    for row in rows {
        let grids: Vec<String> = row.grids.iter().map(|g| format!("{}:{}x{}", g.id, g.cols, g.rows)).collect();
        let grids = grids.join(";");
        match &row.table {
            Some(t) => {
                for c in &t.cells {
                    out.push_str(&format!(
                        "{},{prior},{grids},{},top{},{},{},{},{},\n",
                        row.n_max,
                        c.granularity,
                        c.k,
                        c.n_orig,
                        c.n_adv,
                        fmt(c.raw),
                        fmt(c.clamped)
                    ));
                }
            }
            None => {
                let e = row.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
                out.push_str(&format!("{},{prior},{grids},,,,,,,{e}\n", row.n_max));
            }
        }
    }
    out
}

pub fn sweep_nmax(a: SweepArgs) -> anyhow::Result<()> {
    ensure!(!a.values.is_empty(), "no n_max values");
    ensure!(a.values.iter().all(|&v| v > 0), "n_max values must be positive");
    let truth: BTreeMap<String, LocationCodes> = read_json(&a.truth)?;
    let mut corpus = Vec::new();
    for p in list_images(&a.images)? {
        let id = stem(&p);
        let annotations = annotations_for(&p, a.annotations.as_deref())?;
        ensure!(!annotations.is_empty(), "{} has no concept annotations", p.display());
        let t = truth.get(&id).with_context(|| format!("no ground truth for {id}"))?.clone();
        let image = Arc::new(ImageBuffer::load(&p).with_context(|| format!("loading {}", p.display()))?);
        corpus.push(SweepItem { id, image, annotations, truth: t });
    }
    let bank = EmbeddingBank::load(&a.model.bank).with_context(|| format!("loading bank {}", a.model.bank.display()))?;
    let encoder = load_encoder(a.model.encoder.as_deref(), &a.model.bank)?;
    let decoder = load_decoder_checked(&a.model.decoder, &bank)?;
    let model = target_model(&a.target)?;
    let geocoder = GeocoderHandle::open(&a.target)?;
    let mut evaluator = BenchmarkEvaluator { client: &model, geocoder: &geocoder.inner, prompt: eval_prompt(&a.target) };
    let settings = SweepSettings {
        epsilon: a.epsilon.value(),
        minimax_enabled: !a.no_minimax,
        confidence_floor: a.confidence_floor,
    };
    let mut rows = ablation_sweep(&corpus, &a.values, settings, &bank, &encoder, &decoder, &mut evaluator)?;
    for row in &mut rows {
        if let Some(t) = &mut row.table {
            t.attack = a.attack.clone();
        }
    }
    geocoder.persist()?;
    let prior = if a.no_minimax { "self" } else { "minimax" };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("sweep.json"), &SweepReport { prior, epsilon: settings.epsilon, rows: &rows })?;
    let csv = sweep_csv(&rows, prior);
    std::fs::write(a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep rows failed", rows.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct JpegRecord {
    id: String,
    #[serde(flatten)]
    row: JpegRow,
}

pub fn jpeg_test(a: JpegArgs) -> anyhow::Result<()> {
    let items: Vec<(String, PathBuf, PathBuf)> = match (&a.pairs, &a.clean, &a.protected) {
        (Some(p), _, _) => read_pairs(p)?.into_iter().map(|e| (e.id, e.original, e.adversarial)).collect(),
        (None, Some(c), Some(p)) => vec![(stem(p), c.clone(), p.clone())],
        _ => bail!("give --pairs or both --clean and --protected"),
    };
    std::fs::create_dir_all(&a.out)?;
    let artifacts = a.out.join("artifacts");
    if !a.no_artifacts {
        std::fs::create_dir_all(&artifacts)?;
    }
    let mut records = Vec::new();
    for (id, clean, protected) in items {
        let c = ImageBuffer::load(&clean).with_context(|| format!("loading {}", clean.display()))?;
        let p = ImageBuffer::load(&protected).with_context(|| format!("loading {}", protected.display()))?;
        let dir = (!a.no_artifacts).then_some(artifacts.as_path());
        for row in jpeg_robustness(&c, &p, &a.quality, dir, &id)? {
            records.push(JpegRecord { id: id.clone(), row });
        }
    }
    write_json(&a.out.join("jpeg.json"), &records)?;
    let mut csv = String::from("id,quality,lossless,encoded_bytes,pre_deviation,post_deviation,pre_levels,post_levels\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.0},{:.0}\n",
            r.id,
            r.row.quality,
            r.row.lossless,
            r.row.encoded_bytes,
            r.row.pre_deviation,
            r.row.post_deviation,
            r.row.pre_deviation * 255.0,
            r.row.post_deviation * 255.0
        ));
    }
    std::fs::write(a.out.join("jpeg.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
