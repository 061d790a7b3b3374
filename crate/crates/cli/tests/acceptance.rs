//! Acceptance suite. Each test prints one `criterion NN PASS|FAIL` line to
//! the real stdout (bypassing capture) and then asserts.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use geoshield::annotation::{assess_difficulty, load_corpus, resolution_filter, Difficulty, DifficultyThresholds};
use geoshield::concepts::{assign_concepts, BBox, ConceptAnnotation, Level};
use geoshield::decoder::{stage_sides, Decoder, DecoderConfig};
use geoshield::embedding::{
    build_bank, encode_block, normalized, select_prior, select_prior_from_embeddings, EmbeddingBank, Encoder,
    ToyEncoder,
};
use geoshield::evaluation::{
    ppr, run_benchmark, EvalPrompt, FixtureGeocoder, ImagePair, ImageSource, LocationCodes,
    ScriptedTargetModel,
};
use geoshield::nn::{Kind, Mode, Module};
use geoshield::pipeline::{protect, select_block_priors, PriorSource, ProtectRequest};
use geoshield::tiling::{decompose, plan_grid};
use geoshield::training::{
    batch_gradient, batch_loss, corpus_loss, noise_baseline, prepare_example, train, TrainConfig, TrainingExample,
};
use geoshield::{Error, ImageBuffer};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {} {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

fn cli<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = Command::new(env!("CARGO_BIN_EXE_geoshield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn geoshield");
    assert!(out.status.success(), "geoshield failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

const WORDS: &[&str] = &[
    "red", "brick", "church", "tower", "pine", "forest", "harbor", "boats", "desert", "road", "snow", "peaks", "palm",
    "trees", "tram", "lines", "stone", "bridge", "river", "market",
];

fn scene(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let (fx, fy, ph): (f64, f64, f64) = (rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2), rng.gen_range(0.0..6.28));
    let mut d = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = base[c] + 0.15 * (x as f64 * fx + y as f64 * fy + ph + c as f64).sin() + rng.gen_range(-0.03..0.03);
                d.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(w, h, d).unwrap()
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    (0..6).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_concepts(rng: &mut ChaCha8Rng, n: usize) -> Vec<ConceptAnnotation> {
    (0..n)
        .map(|_| ConceptAnnotation {
            phrase: phrase(rng),
            level: Level::ALL[rng.gen_range(0..4)],
            bbox: BBox { center_x: rng.gen_range(0.1..0.9), center_y: rng.gen_range(0.1..0.9), size: rng.gen_range(0.1..0.6) },
            confidence: rng.gen_range(0.3..1.0),
        })
        .collect()
}

fn write_annotations(dir: &Path, id: &str, concepts: &[ConceptAnnotation]) {
    std::fs::write(dir.join(format!("{id}.json")), serde_json::to_string(&json!({ "concepts": concepts })).unwrap()).unwrap();
}

/// Bank, encoder sidecar and decoder checkpoint for CLI runs.
struct Model {
    bank: PathBuf,
    decoder: PathBuf,
    encoder: ToyEncoder,
    bank_data: EmbeddingBank,
    dec: Decoder,
}

/// `head_scale` multiplies the output head: 0 gives the identity decoder,
/// large values saturate the tanh so outputs sit at the budget edge.
fn model(dir: &Path, rng: &mut ChaCha8Rng, entries: usize, head_scale: f64) -> Model {
    let encoder = ToyEncoder::new("bank", 16, 16, 100).unwrap();
    let imgs: Vec<_> = (0..entries).map(|_| scene(rng, 48, 48)).collect();
    let bank_data = build_bank(&imgs, (0..entries).map(|i| format!("b{i}")).collect(), &encoder).unwrap();
    let bank = dir.join("bank.rbnk");
    bank_data.save(&bank).unwrap();
    encoder.spec().save(dir.join("bank.rbnk.encoder.json")).unwrap();
    let mut dec = Decoder::init(DecoderConfig { embed_dim: 16, block_side: 32, seed: 3 }).unwrap();
    if head_scale == 0.0 {
        dec.zero_head();
    } else {
        dec.head.weight.mapv_inplace(|w| w * head_scale);
        dec.head.bias.mapv_inplace(|b| b * head_scale);
    }
    let decoder = dir.join("decoder.safetensors");
    dec.save(&decoder).unwrap();
    Model { bank, decoder, encoder, bank_data, dec }
}

// ---------------------------------------------------------------- 1

/// Exhaustive search: collect every feasible grid, keep the exact minimum
/// aspect error, then the largest block count, then the fewest columns.
fn grid_oracle(w: usize, h: usize, n_max: usize) -> (usize, usize) {
    let mut cands = Vec::new();
    for m in 1..=n_max {
        for n in 1..=n_max {
            if m * n <= n_max {
                // |w/h - m/n| = |w n - m h| / (h n)
                let num = (w as u128 * n as u128).abs_diff(m as u128 * h as u128);
                cands.push((num, h as u128 * n as u128, m, n));
            }
        }
    }
    let less = |a: &(u128, u128, usize, usize), b: &(u128, u128, usize, usize)| a.0 * b.1 < b.0 * a.1;
    let mut best_err = cands[0];
    for c in &cands {
        if less(c, &best_err) {
            best_err = *c;
        }
    }
    let tied: Vec<_> = cands.into_iter().filter(|c| !less(&best_err, c) && !less(c, &best_err)).collect();
    let max_blocks = tied.iter().map(|c| c.2 * c.3).max().unwrap();
    let pick = tied.iter().filter(|c| c.2 * c.3 == max_blocks).min_by_key(|c| c.2).unwrap();
    (pick.2, pick.3)
}

#[test]
fn criterion_01_grid_planner_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = Vec::new();
    let fixed = [((4096, 2048, 64), (10, 5)), ((2048, 1536, 64), (8, 6)), ((1000, 1000, 64), (8, 8))];
    for ((w, h, n), want) in fixed {
        let g = plan_grid(w, h, n).unwrap();
        if (g.cols, g.rows) != want || grid_oracle(w, h, n) != want {
            mismatches.push((w, h, n));
        }
    }
    for _ in 0..1000 {
        let w = rng.gen_range(1..=8192);
        let h = rng.gen_range(1..=8192);
        let n = rng.gen_range(1..=256);
        let g = plan_grid(w, h, n).unwrap();
        if (g.cols, g.rows) != grid_oracle(w, h, n) {
            mismatches.push((w, h, n));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && secs < 10.0;
    report(1, pass, &format!("grid planner: 1003 cases, {} mismatches, {secs:.2}s (limit 10s)", mismatches.len()));
    assert!(pass, "mismatches {mismatches:?}, {secs}s");
}

// ---------------------------------------------------------------- 2

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Double loop over (entry, concept) with cosines computed from scratch.
fn minimax_oracle(bank: &EmbeddingBank, concepts: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for i in 0..bank.len() {
        let e: Vec<f64> = bank.row(i).iter().map(|&v| f64::from(v)).collect();
        let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut worst = f64::NEG_INFINITY;
        for c in concepts {
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = c.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / (cn * en);
            if cos > worst {
                worst = cos;
            }
        }
        if worst < best.1 {
            best = (i, worst);
        }
    }
    best
}

#[test]
fn criterion_02_minimax_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let dim = 32;
    for i in 0..500 {
        let entries = if i % 25 == 0 { 10_000 } else { rng.gen_range(1..=10_000) };
        let n_concepts = if i % 10 == 0 { 32 } else { rng.gen_range(1..=32) };
        let vecs: Vec<Vec<f64>> = (0..entries).map(|_| unit(&mut rng, dim)).collect();
        let bank = EmbeddingBank::from_vectors(dim, &vecs, (0..entries).map(|j| j.to_string()).collect()).unwrap();
        let concepts: Vec<Vec<f64>> = (0..n_concepts).map(|_| unit(&mut rng, dim)).collect();
        let got = select_prior_from_embeddings(&concepts, &bank).unwrap();
        let (want, score) = minimax_oracle(&bank, &concepts);
        if got.index != want || (got.score - score).abs() > 1e-6 {
            mismatches += 1;
        }
    }
    // text-tower path
    let enc = ToyEncoder::new("t", 8, dim, 9).unwrap();
    for _ in 0..20 {
        let entries = rng.gen_range(1..=2000);
        let vecs: Vec<Vec<f64>> = (0..entries).map(|_| unit(&mut rng, dim)).collect();
        let bank = EmbeddingBank::from_vectors(dim, &vecs, (0..entries).map(|j| j.to_string()).collect()).unwrap();
        let phrases: Vec<String> = (0..rng.gen_range(1..=32)).map(|_| phrase(&mut rng)).collect();
        let refs: Vec<&str> = phrases.iter().map(String::as_str).collect();
        let got = select_prior(&refs, &bank, &enc).unwrap();
        let concepts: Vec<Vec<f64>> = refs.iter().map(|p| enc.encode_text(p)).collect();
        if got.index != minimax_oracle(&bank, &concepts).0 {
            mismatches += 1;
        }
    }
    let bank2 = EmbeddingBank::from_vectors(
        2,
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap();
    let fixed = select_prior_from_embeddings(&[vec![1.0, 0.0], vec![0.6, 0.8]], &bank2).unwrap();
    let fixed_ok = fixed.index == 2 && (fixed.score + 0.6).abs() < 1e-12;
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatches == 0 && fixed_ok && secs < 30.0;
    report(
        2,
        pass,
        &format!(
            "minimax: 520 instances, {mismatches} mismatches; 2-D example index {} score {:.3}; {secs:.2}s (limit 30s)",
            fixed.index, fixed.score
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_budget_on_persisted_images() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    let m = model(tmp.path(), &mut rng, 8, 1e3);
    let fixed_short = [4096usize, 3072, 2048, 1024, 257, 3];
    let mut dims = Vec::new();
    for i in 0..100 {
        let long = if i < fixed_short.len() { 4096 } else { rng.gen_range(16..=4096) };
        let short = if i < fixed_short.len() {
            fixed_short[i]
        } else {
            ((long as f64 * rng.gen_range(0.05..1.0)).round() as usize).max(1)
        };
        let (w, h) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
        let id = format!("img{i:03}");
        let n = rng.gen_range(1..=4);
        scene(&mut rng, w, h).save_png(src.join(format!("{id}.png"))).unwrap();
        write_annotations(&src, &id, &random_concepts(&mut rng, n));
        dims.push((id, w, h));
    }
    let mut violations = 0;
    let mut worst = [0.0f64; 2];
    for (e, (eps, nmax)) in [(8u32, "16"), (16u32, "64")].into_iter().enumerate() {
        let out = tmp.path().join(format!("out{eps}"));
        let args: Vec<&OsStr> = vec![
            "protect".as_ref(),
            "--images".as_ref(),
            src.as_os_str(),
            "--bank".as_ref(),
            m.bank.as_os_str(),
            "--decoder".as_ref(),
            m.decoder.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
            "--workers".as_ref(),
            "1".as_ref(),
        ];
        let eps_s = eps.to_string();
        cli(args.into_iter().chain([OsStr::new("--epsilon"), eps_s.as_ref(), "--nmax".as_ref(), nmax.as_ref()]));
        let bound = eps as f64 / 255.0 + 1.0 / 510.0;
        for (id, w, h) in &dims {
            let orig = ImageBuffer::load(src.join(format!("{id}.png"))).unwrap();
            let prot = ImageBuffer::load(out.join(format!("{id}.png"))).unwrap();
            assert_eq!((prot.width(), prot.height()), (*w, *h), "{id} resolution changed");
            let d = prot.max_abs_diff(&orig).unwrap();
            worst[e] = worst[e].max(d);
            if d > bound + 1e-12 {
                violations += 1;
            }
        }
    }
    let pass = violations == 0;
    report(
        3,
        pass,
        &format!(
            "budget: 100 images x 2 budgets, {violations} violations; worst {:.1}/255 (eps 8), {:.1}/255 (eps 16); {:.1}s",
            worst[0] * 255.0,
            worst[1] * 255.0,
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_decoder_shape_and_range() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut problems = Vec::new();
    for side in [16usize, 32, 64, 224] {
        let dec = Decoder::init(DecoderConfig { embed_dim: 8, block_side: side, seed: side as u64 }).unwrap();
        let batch = if side == 224 { 1 } else { 3 };
        let priors = Array2::from_shape_fn((batch, 8), |_| rng.gen_range(-2.0..2.0));
        for eps in [8.0 / 255.0, 16.0 / 255.0] {
            for mode in [Mode::Inference, Mode::Train] {
                if side == 224 && mode == Mode::Train {
                    continue;
                }
                let (delta, cache) = dec.forward(&priors, eps, mode).unwrap();
                if delta.dim() != (batch, 3, side, side) {
                    problems.push(format!("side {side}: shape {:?}", delta.dim()));
                }
                if delta.iter().any(|v| v.abs() > eps) {
                    problems.push(format!("side {side}: value beyond eps"));
                }
                let want: Vec<usize> = (0..5).map(|j| side / 16 * (1 << j)).collect();
                if cache.sides != want || stage_sides(side) != want {
                    problems.push(format!("side {side}: stages {:?}", cache.sides));
                }
            }
        }
        let f = dec.synthesize(&priors.row(0).to_vec(), 16.0 / 255.0).unwrap();
        if (f.width(), f.height()) != (side, side) || f.max_abs() > 16.0 / 255.0 {
            problems.push(format!("side {side}: synthesize"));
        }
    }
    let bad = Decoder::init(DecoderConfig { embed_dim: 8, block_side: 50, seed: 0 });
    let side50 = matches!(bad, Err(Error::InvalidArgument(_)));
    let pass = problems.is_empty() && side50;
    report(
        4,
        pass,
        &format!("decoder sides 16/32/64/224: {} problems; side 50 rejected: {side50}", problems.len()),
    );
    assert!(pass, "{problems:?}");
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dec = Decoder::init(DecoderConfig { embed_dim: 8, block_side: 16, seed: 11 }).unwrap();
    let e1 = ToyEncoder::new("s1", 16, 8, 1).unwrap();
    let e2 = ToyEncoder::new("s2", 8, 8, 2).unwrap();
    let surrogates: Vec<&dyn Encoder> = vec![&e1, &e2];
    let eps = 16.0 / 255.0;
    let blocks = Array4::from_shape_fn((4, 3, 16, 16), |_| rng.gen_range(0.2..0.8));
    let priors = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
    let analytic = batch_gradient(&dec, &blocks, &priors, &surrogates, eps, Mode::Train).unwrap();
    let mut grads = Vec::new();
    analytic.grads.visit("", &mut |name, kind, _, d| {
        if kind == Kind::Param {
            grads.push((name.to_string(), d.to_vec()));
        }
    });
    let loss_with = |tensor: usize, j: usize, delta: f64| {
        let mut d = dec.clone();
        let mut i = 0;
        d.visit_mut("", &mut |_, kind, x| {
            if kind == Kind::Param {
                if i == tensor {
                    x[j] += delta;
                }
                i += 1;
            }
        });
        batch_loss(&d, &blocks, &priors, &surrogates, eps, Mode::Train).unwrap().0
    };
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut refined = 0;
    for (ti, (name, g)) in grads.iter().enumerate() {
        let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let picks = [argmax, rng.gen_range(0..g.len()), rng.gen_range(0..g.len())];
        for &j in &picks {
            let a = g[j];
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            let mut h = 1e-6;
            let base = loss_with(ti, j, 0.0);
            let (mut plus, mut minus) = (loss_with(ti, j, h), loss_with(ti, j, -h));
            let mut fd = (plus - minus) / (2.0 * h);
            // A leaky-activation kink inside [-h, h] shows up as one-sided
            // slopes that disagree; shrink h until the interval clears it.
            while rel(fd) >= 1e-3 && h > 1e-8 {
                let fwd = (plus - base) / h;
                let bwd = (base - minus) / h;
                if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-6) {
                    break;
                }
                h /= 10.0;
                plus = loss_with(ti, j, h);
                minus = loss_with(ti, j, -h);
                fd = (plus - minus) / (2.0 * h);
                refined += 1;
            }
            checked += 1;
            if rel(fd) > worst.0 {
                worst = (rel(fd), format!("{name}[{j}] analytic {a:.6e} numeric {fd:.6e}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-3 && secs < 120.0;
    report(
        5,
        pass,
        &format!(
            "gradient check: {checked} entries over {} tensors, max rel err {:.2e} ({}), {refined} step refinements, {secs:.1}s (limit 120s)",
            grads.len(),
            worst.0,
            worst.1
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_desk_training_signal() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let dim = 16;
    let bank_enc = ToyEncoder::new("bank", 16, dim, 100).unwrap();
    let bank_imgs: Vec<_> = (0..32).map(|_| scene(&mut rng, 64, 64)).collect();
    let bank = build_bank(&bank_imgs, (0..32).map(|i| format!("b{i}")).collect(), &bank_enc).unwrap();
    let corpus: Vec<TrainingExample> = (0..16)
        .map(|i| {
            let image = scene(&mut rng, 96, 64);
            TrainingExample { id: format!("img{i}"), image, annotations: random_concepts(&mut rng, 3) }
        })
        .collect();
    let s1 = ToyEncoder::new("s1", 32, dim, 201).unwrap();
    let s2 = ToyEncoder::new("s2", 16, dim, 202).unwrap();
    let s3 = ToyEncoder::new("s3", 8, dim, 203).unwrap();
    let surrogates: Vec<&dyn Encoder> = vec![&s1, &s2, &s3];
    let dec = Decoder::init(DecoderConfig { embed_dim: dim, block_side: 32, seed: 5 }).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 1000,
        max_steps: Some(200),
        n_max: 4,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let prepared: Vec<_> = corpus
        .iter()
        .map(|e| prepare_example(e, &bank, &bank_enc, 32, cfg.n_max, 0.0, true).unwrap().unwrap())
        .collect();
    let eps = cfg.epsilon;
    let train_mode_loss = |d: &Decoder| {
        let mut total = 0.0;
        let mut count = 0;
        for p in &prepared {
            total += batch_loss(d, &p.blocks, &p.priors, &surrogates, eps, Mode::Train).unwrap().0 * p.len() as f64;
            count += p.len();
        }
        total / count as f64
    };
    let initial = train_mode_loss(&dec);
    let noise = noise_baseline(&prepared, &surrogates, eps, 9).unwrap();
    let (trained, history) = train(dec, &corpus, &bank, &bank_enc, &surrogates, &cfg).unwrap();
    let final_loss = train_mode_loss(&trained);
    let deployed = corpus_loss(&trained, &prepared, &surrogates, eps).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = history.len() == 200 && final_loss < 0.9 * initial && deployed < noise && secs < 300.0;
    report(
        6,
        pass,
        &format!(
            "desk training: {} steps, loss {initial:.4} -> {final_loss:.4} (ratio {:.3}, need < 0.9); inference cosine {deployed:.4} vs noise baseline {noise:.4}; {secs:.1}s (limit 300s)",
            history.len(),
            final_loss / initial
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn codes(region: &str, metro: &str, tract: &str, block: &str) -> LocationCodes {
    LocationCodes {
        region: Some(region.into()),
        metro: Some(metro.into()),
        tract: Some(tract.into()),
        block: Some(block.into()),
    }
}

fn truth_of(id: &str) -> LocationCodes {
    codes(&format!("R-{id}"), &format!("M-{id}"), &format!("T-{id}"), &format!("B-{id}"))
}

fn predictions(items: &[&str]) -> String {
    json!({ "predictions": items }).to_string()
}

#[test]
fn criterion_07_ppr_arithmetic() {
    let _g = serial();
    let cases_ok = ppr(100, 80) == (Some(20.0), Some(20.0))
        && ppr(100, 100) == (Some(0.0), Some(0.0))
        && ppr(50, 60) == (Some(-20.0), Some(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let ids: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
    let mut geo = vec![("elsewhere".to_string(), codes("R-x", "M-x", "T-x", "B-x"))];
    let pairs: Vec<ImagePair> = ids
        .iter()
        .map(|id| {
            geo.push((format!("truth {id}"), truth_of(id)));
            let img = Arc::new(scene(&mut rng, 24, 16));
            ImagePair {
                id: id.clone(),
                truth: truth_of(id),
                original: ImageSource::Memory(Arc::clone(&img)),
                adversarial: ImageSource::Memory(img),
            }
        })
        .collect();
    let geocoder = FixtureGeocoder::new(geo);
    let scripted = |adv_correct: bool| {
        let mut responses = BTreeMap::new();
        for id in &ids {
            let right = format!("truth {id}");
            responses.insert(format!("original/{id}"), predictions(&[&right, "elsewhere"]));
            let adv = if adv_correct { predictions(&[&right]) } else { predictions(&["elsewhere", "nowhere"]) };
            responses.insert(format!("adversarial/{id}"), adv);
        }
        ScriptedTargetModel { name: "scripted".into(), responses }
    };
    let prompt = EvalPrompt::default();
    let mut all_ok = cases_ok;
    let mut summary = Vec::new();
    for (adv_correct, want) in [(false, 100.0), (true, 0.0)] {
        let client = scripted(adv_correct);
        let (t1, r1) = run_benchmark(&pairs, &client, &geocoder, &prompt, "mock", None).unwrap();
        let (t2, r2) = run_benchmark(&pairs, &client, &geocoder, &prompt, "mock", None).unwrap();
        let reproducible = serde_json::to_string(&t1).unwrap() == serde_json::to_string(&t2).unwrap()
            && serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap()
            && t1.to_csv() == t2.to_csv();
        let cells_ok = t1.cells.len() == 8
            && t1.cells.iter().all(|c| c.clamped == Some(want) && c.raw == Some(want) && c.n_orig == ids.len());
        all_ok &= reproducible && cells_ok;
        summary.push(format!("all-{want:.1} table {}", if cells_ok && reproducible { "ok" } else { "wrong" }));
    }
    report(
        7,
        all_ok,
        &format!("PPR: (100,80)->20.0, (100,100)->0.0, (50,60)->-20.0/0.0 {}; {}", if cases_ok { "ok" } else { "wrong" }, summary.join(", ")),
    );
    assert!(all_ok);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_zero_head_identity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let tmp = tempfile::tempdir().unwrap();
    let m = model(tmp.path(), &mut rng, 6, 0.0);
    let mut identical = 0;
    for _ in 0..10 {
        let (w, h) = (rng.gen_range(8..700), rng.gen_range(8..700));
        let img = scene(&mut rng, w, h).quantized();
        let mut req = ProtectRequest::new(img.clone(), random_concepts(&mut rng, 2), 16.0 / 255.0, rng.gen_range(1..=64));
        req.minimax_enabled = rng.gen_bool(0.5);
        let (out, _) = protect(&req, &m.bank_data, &m.encoder, &m.dec).unwrap();
        if out.quantized().to_rgb8().as_raw() == img.to_rgb8().as_raw() {
            identical += 1;
        }
    }
    let pass = identical == 10;
    report(8, pass, &format!("zero head: {identical}/10 protected images bitwise equal to input after 8-bit quantization"));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

/// Adversarial answers per sweep value; every original answer is correct.
fn sweep_script(n_max: usize, id: &str) -> Vec<String> {
    let first = |s: &str| vec![s.to_string(), "elsewhere".into(), "nowhere".into()];
    match n_max {
        1 => vec!["elsewhere".into(), format!("truth {id}"), "nowhere".into()],
        4 => first(&format!("same region {id}")),
        16 if id == "a" || id == "b" => first(&format!("same metro {id}")),
        16 => first("elsewhere"),
        64 if id == "a" => first(&format!("truth {id}")),
        64 => first("elsewhere"),
        _ => first(&format!("truth {id}")),
    }
}

/// Clamped PPR in table order region/metro/tract/block x top1/top3, worked
/// out by hand from `sweep_script` over four images.
fn sweep_expected(n_max: usize) -> [&'static str; 8] {
    match n_max {
        1 => ["100.0", "0.0", "100.0", "0.0", "100.0", "0.0", "100.0", "0.0"],
        4 => ["0.0", "0.0", "100.0", "100.0", "100.0", "100.0", "100.0", "100.0"],
        16 => ["50.0", "50.0", "50.0", "50.0", "100.0", "100.0", "100.0", "100.0"],
        64 => ["75.0"; 8],
        _ => ["0.0"; 8],
    }
}

#[test]
fn criterion_09_ablation_harness() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let tmp = tempfile::tempdir().unwrap();
    let m = model(tmp.path(), &mut rng, 6, 1.0);
    let images = tmp.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let dims = [("a", 300, 200), ("b", 128, 128), ("c", 500, 90), ("d", 64, 256)];
    let mut truth = BTreeMap::new();
    let mut geo = BTreeMap::new();
    geo.insert("elsewhere".to_string(), codes("R-x", "M-x", "T-x", "B-x"));
    let mut responses = BTreeMap::new();
    let values = [1usize, 4, 16, 64, 256];
    for (id, w, h) in dims {
        scene(&mut rng, w, h).save_png(images.join(format!("{id}.png"))).unwrap();
        write_annotations(&images, id, &random_concepts(&mut rng, 3));
        truth.insert(id.to_string(), truth_of(id));
        geo.insert(format!("truth {id}"), truth_of(id));
        geo.insert(format!("same metro {id}"), codes(&format!("R-{id}"), &format!("M-{id}"), "T-x", "B-x"));
        geo.insert(format!("same region {id}"), codes(&format!("R-{id}"), "M-x", "T-x", "B-x"));
        responses.insert(format!("original/{id}"), predictions(&[&format!("truth {id}"), "elsewhere"]));
        for n in values {
            let answers = sweep_script(n, id);
            let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
            responses.insert(format!("nmax{n}/adversarial/{id}"), predictions(&refs));
        }
    }
    let truth_path = tmp.path().join("truth.json");
    std::fs::write(&truth_path, serde_json::to_string(&truth).unwrap()).unwrap();
    let geo_path = tmp.path().join("geocoder.json");
    std::fs::write(&geo_path, serde_json::to_string(&geo).unwrap()).unwrap();
    let target_path = tmp.path().join("target.json");
    std::fs::write(&target_path, json!({ "name": "scripted", "responses": responses }).to_string()).unwrap();

    let sweep = |out: &Path, no_minimax: bool| {
        let mut args: Vec<&OsStr> = vec![
            "sweep-nmax".as_ref(),
            "--images".as_ref(),
            images.as_os_str(),
            "--truth".as_ref(),
            truth_path.as_os_str(),
            "--bank".as_ref(),
            m.bank.as_os_str(),
            "--decoder".as_ref(),
            m.decoder.as_os_str(),
            "--target-fixture".as_ref(),
            target_path.as_os_str(),
            "--geocoder-fixture".as_ref(),
            geo_path.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ];
        if no_minimax {
            args.push("--no-minimax".as_ref());
        }
        cli(args);
        (
            std::fs::read_to_string(out.join("sweep.csv")).unwrap(),
            serde_json::from_str::<Value>(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap(),
        )
    };
    let (csv, doc) = sweep(&tmp.path().join("sweep_minimax"), false);
    let (csv_self, _) = sweep(&tmp.path().join("sweep_self"), true);

    let mut problems = Vec::new();
    let rows = doc["rows"].as_array().unwrap();
    if rows.len() != 5 {
        problems.push(format!("{} rows", rows.len()));
    }
    for (row, &n) in rows.iter().zip(&values) {
        if row["n_max"] != json!(n) || !row["error"].is_null() {
            problems.push(format!("row n_max={n} malformed or failed: {}", row["error"]));
        }
        for g in row["grids"].as_array().unwrap() {
            let (_, w, h) = dims.iter().find(|d| d.0 == g["id"].as_str().unwrap()).unwrap();
            let want = plan_grid(*w, *h, n).unwrap();
            let got = (g["cols"].as_u64().unwrap() as usize, g["rows"].as_u64().unwrap() as usize);
            if got != (want.cols, want.rows) || (n == 1 && got != (1, 1)) {
                problems.push(format!("n_max={n} {}: grid {got:?}", g["id"]));
            }
        }
    }
    let lines: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for &n in &values {
        let got: Vec<&str> = lines.iter().filter(|f| f[0] == n.to_string()).map(|f| f[8]).collect();
        if got != sweep_expected(n) {
            problems.push(format!("n_max={n}: ppr {got:?} != {:?}", sweep_expected(n)));
        }
    }
    let self_lines: Vec<Vec<&str>> = csv_self.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let only_prior_differs = lines.len() == self_lines.len()
        && lines.iter().zip(&self_lines).all(|(a, b)| {
            a[1] == "minimax" && b[1] == "self" && a.iter().zip(b).enumerate().all(|(i, (x, y))| i == 1 || x == y)
        });
    if !only_prior_differs {
        problems.push("--no-minimax sweep differs beyond the prior column".into());
    }

    // Protect reports with and without minimax agree except for prior fields.
    let protect_report = |out: &Path, no_minimax: bool| {
        let img = images.join("a.png");
        let mut args: Vec<&OsStr> = vec![
            "protect".as_ref(),
            "--image".as_ref(),
            img.as_os_str(),
            "--bank".as_ref(),
            m.bank.as_os_str(),
            "--decoder".as_ref(),
            m.decoder.as_os_str(),
            "--nmax".as_ref(),
            "16".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ];
        if no_minimax {
            args.push("--no-minimax".as_ref());
        }
        cli(args);
        serde_json::from_str::<Value>(&std::fs::read_to_string(out.join("a.report.json")).unwrap()).unwrap()
    };
    let with = protect_report(&tmp.path().join("protect_minimax"), false);
    let without = protect_report(&tmp.path().join("protect_self"), true);
    let (bw, bo) = (with["blocks"].as_array().unwrap(), without["blocks"].as_array().unwrap());
    let shared = ["index", "col", "row", "concepts", "fallback"];
    let reports_ok = with["grid"] == without["grid"]
        && bw.len() == bo.len()
        && bw.iter().zip(bo).all(|(x, y)| {
            shared.iter().all(|k| x[k] == y[k])
                && x["prior"] == "minimax"
                && x["bank_index"].is_u64()
                && y["prior"] == "self_embedding"
                && y["bank_index"].is_null()
                && y["score"].is_null()
        });
    if !reports_ok {
        problems.push("protect reports differ outside the prior-selection fields".into());
    }

    // The substituted prior is the block's own normalised embedding.
    let img = ImageBuffer::load(images.join("a.png")).unwrap();
    let ann = geoshield::AnnotationFile::load(images.join("a.json")).unwrap().concepts;
    let grid = plan_grid(img.width(), img.height(), 16).unwrap().with_block_side(32).unwrap();
    let blocks = decompose(&img, grid).unwrap();
    let map = assign_concepts(&grid, blocks.source_dims, &ann, 0.0).unwrap();
    let priors = select_block_priors(&blocks, &map, &ann, &m.bank_data, &m.encoder, false).unwrap();
    let psi_ok = priors.iter().zip(&blocks.blocks).all(|(p, b)| {
        let own = normalized(&encode_block(&m.encoder, b).unwrap()).unwrap();
        p.source == PriorSource::SelfEmbedding && p.embedding == own
    });
    if !psi_ok {
        problems.push("no-minimax prior is not the block embedding".into());
    }

    let pass = problems.is_empty();
    report(
        9,
        pass,
        &format!(
            "sweep-nmax {{1,4,16,64,256}}: {} rows, hand-computed PPR {}, n_max=1 grids 1x1, --no-minimax changes only the prior column; {} problems",
            rows.len(),
            if problems.iter().any(|p| p.contains("ppr")) { "mismatch" } else { "match" },
            problems.len()
        ),
    );
    assert!(pass, "{problems:#?}");
}

// ---------------------------------------------------------------- 10

fn stage3(conf: f64, extra: Option<Value>) -> Value {
    let mut concepts: Vec<Value> = [
        ("continental", "temperate climate with deciduous tree cover", [0.5, 0.5, 1.0]),
        ("national", "left hand traffic on narrow paved roads", [0.4, 0.7, 0.3]),
        ("city", "red brick terraced houses with chimney stacks", [0.3, 0.4, 0.4]),
        ("local", "corner shop with striped awning and signage", [0.7, 0.5, 0.2]),
    ]
    .iter()
    .map(|(level, phrase, bbox)| json!({ "level": level, "phrase": phrase, "bbox": bbox, "confidence": conf }))
    .collect();
    concepts.reverse();
    if let Some(e) = extra {
        concepts.push(e);
    }
    json!({ "concepts": concepts })
}

fn urban_scene() -> Value {
    json!({
        "l1": "Built Environment", "l2": "urban/city", "l3": "street views",
        "attributes": {
            "environmental_elements": ["street trees"],
            "architectural_characteristics": ["brick"],
            "atmospheric_conditions": ["overcast"]
        }
    })
}

#[test]
fn criterion_10_annotation_pipeline_offline() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let keep = json!({ "keep": true, "reason": "street scene" });
    let mut fixture = serde_json::Map::new();
    let mut expected = BTreeMap::new();
    let mut difficulty_want = BTreeMap::new();
    for i in 0..20 {
        let id = format!("img{i:02}");
        let (w, h) = match i {
            0 => (2047, 12),
            1 => (12, 2047),
            i if i % 2 == 0 => (2048, 12),
            _ => (12, 2048),
        };
        ImageBuffer::filled(w, h, 0.5).unwrap().save_png(images.join(format!("{id}.png"))).unwrap();
        let conf = [0.9, 0.6, 0.3][i % 3];
        let (script, status) = match i {
            0 | 1 => (json!({}), "rejected"),
            12 => (json!({ "filter": [{ "keep": false, "reason": "studio portrait" }] }), "filtered"),
            13 => (json!({ "filter": [keep], "scene": [urban_scene()], "reasoning": ["I cannot answer that."] }), "quarantined"),
            14 => (
                json!({ "filter": [keep], "scene": [{ "l1": "Built Environment", "l2": "moon base", "l3": "crater" }], "reasoning": [stage3(conf, None)] }),
                "quarantined",
            ),
            15 => (
                json!({ "filter": [keep], "scene": [urban_scene()], "reasoning": ["{\"concepts\": oops", stage3(conf, None)] }),
                "annotated",
            ),
            16 => (
                json!({ "filter": [{ "reason": "no verdict" }, keep], "scene": [urban_scene()], "reasoning": [stage3(conf, None)] }),
                "annotated",
            ),
            17 => {
                let bad = json!({ "level": "local", "phrase": "escaping box outside the frame entirely", "bbox": [1.2, 0.5, 0.2], "confidence": 0.9 });
                (json!({ "filter": [keep], "scene": [urban_scene()], "reasoning": [stage3(conf, Some(bad))] }), "annotated")
            }
            18 => (
                json!({ "filter": [keep], "scene": [urban_scene()], "reasoning": [{ "concepts": [{ "level": "orbital", "phrase": "x" }] }] }),
                "quarantined",
            ),
            19 => (
                json!({
                    "filter": [keep],
                    "scene": [{ "l1": "Natural Environment", "l2": "mountainous", "l3": "valleys", "attributes": {} }],
                    "reasoning": [stage3(conf, None)]
                }),
                "annotated",
            ),
            _ => (json!({ "filter": [keep], "scene": [urban_scene()], "reasoning": [stage3(conf, None)] }), "annotated"),
        };
        if status == "annotated" {
            difficulty_want.insert(id.clone(), ["easy", "medium", "hard"][i % 3]);
        }
        fixture.insert(id.clone(), script);
        expected.insert(id, status);
    }
    let fixture_path = tmp.path().join("mock.json");
    std::fs::write(&fixture_path, Value::Object(fixture).to_string()).unwrap();
    let run = |out: &Path, workers: &str| {
        cli([
            OsStr::new("annotate"),
            "--images".as_ref(),
            images.as_os_str(),
            "--mock".as_ref(),
            fixture_path.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
            "--backoff-ms".as_ref(),
            "0".as_ref(),
            "--workers".as_ref(),
            workers.as_ref(),
        ]);
    };
    let (out_a, out_b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    run(&out_a, "1");
    run(&out_b, "3");

    let mut problems = Vec::new();
    let manifest: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap()).unwrap();
    for entry in &manifest {
        let id = entry["image_id"].as_str().unwrap();
        if entry["status"] != expected[id] {
            problems.push(format!("{id}: status {} != {}", entry["status"], expected[id]));
        }
    }
    match load_corpus(&out_a) {
        Ok(jobs) => {
            for job in &jobs {
                let levels: Vec<Level> = job.concepts.iter().map(|c| c.level).collect();
                if levels.windows(2).any(|w| w[0] > w[1]) || job.concepts.is_empty() {
                    problems.push(format!("{}: concepts unordered or empty", job.image_id));
                }
                let d = job.difficulty.map(|d| d.to_string()).unwrap_or_default();
                if difficulty_want.get(&job.image_id).copied() != Some(d.as_str()) {
                    problems.push(format!("{}: difficulty {d}", job.image_id));
                }
                if job.image_id == "img17" && job.concepts.len() != 4 {
                    problems.push("img17: malformed entry not dropped".into());
                }
            }
            if jobs.len() != expected.values().filter(|s| **s == "annotated").count() {
                problems.push(format!("{} annotated documents", jobs.len()));
            }
        }
        Err(e) => problems.push(format!("corpus failed validation: {e}")),
    }
    let same = |f: &str| std::fs::read(out_a.join(f)).unwrap() == std::fs::read(out_b.join(f)).unwrap();
    let deterministic = same("stats.json") && same("stats.csv") && same("manifest.json");
    if !deterministic {
        problems.push("stats differ between runs".into());
    }
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(out_a.join("stats.json")).unwrap()).unwrap();
    if stats["annotated"] != 14 || stats["rejected"] != 2 || stats["filtered"] != 1 || stats["quarantined"] != 3 {
        problems.push(format!("stats counts {stats}"));
    }

    // Raising every confidence never makes an image harder.
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let t = DifficultyThresholds::default();
    let mut monotone = true;
    for _ in 0..2000 {
        let n = rng.gen_range(1..8);
        let mut conf: Vec<(Level, f64)> = (0..n).map(|_| (Level::ALL[rng.gen_range(0..4)], rng.gen_range(0.0..1.0))).collect();
        let before = assess_difficulty(&conf, t).unwrap();
        let bump: f64 = rng.gen_range(0.0..0.5);
        conf.shuffle(&mut rng);
        for c in &mut conf {
            c.1 = (c.1 + bump).min(1.0);
        }
        let after = assess_difficulty(&conf, t).unwrap();
        let rank = |d: Difficulty| match d {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        };
        monotone &= rank(after) <= rank(before);
    }
    if !monotone {
        problems.push("difficulty not monotone in confidence".into());
    }
    let boundary = !resolution_filter(2047, 2047)
        && !resolution_filter(2047, 1)
        && resolution_filter(2048, 1)
        && resolution_filter(1, 2048)
        && expected.iter().filter(|(_, s)| **s == "rejected").count() == 2;
    if !boundary {
        problems.push("resolution boundary".into());
    }
    let pass = problems.is_empty();
    report(
        10,
        pass,
        &format!(
            "annotation: 20 fixtures (14 annotated, 2 rejected at 2047, 1 filtered, 3 quarantined), schema ok, difficulty monotone, stats deterministic; {} problems",
            problems.len()
        ),
    );
    assert!(pass, "{problems:#?}");
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_jpeg_harness() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let tmp = tempfile::tempdir().unwrap();
    let m = model(tmp.path(), &mut rng, 6, 1.0);
    let mut entries = Vec::new();
    let mut pre = BTreeMap::new();
    for (i, (w, h)) in [(200, 150), (96, 96), (321, 77)].into_iter().enumerate() {
        let id = format!("j{i}");
        let clean = scene(&mut rng, w, h).quantized();
        let req = ProtectRequest::new(clean.clone(), random_concepts(&mut rng, 2), 16.0 / 255.0, 16);
        let (protected, _) = protect(&req, &m.bank_data, &m.encoder, &m.dec).unwrap();
        clean.save_png(tmp.path().join(format!("{id}_clean.png"))).unwrap();
        protected.save_png(tmp.path().join(format!("{id}_protected.png"))).unwrap();
        let reloaded = ImageBuffer::load(tmp.path().join(format!("{id}_protected.png"))).unwrap();
        pre.insert(id.clone(), reloaded.max_abs_diff(&clean).unwrap());
        entries.push(json!({ "id": id, "original": format!("{id}_clean.png"), "adversarial": format!("{id}_protected.png") }));
    }
    let pairs = tmp.path().join("pairs.json");
    std::fs::write(&pairs, Value::Array(entries).to_string()).unwrap();
    let run = |out: &Path, quality: Option<&str>| {
        let mut args: Vec<&OsStr> = vec!["jpeg-test".as_ref(), "--pairs".as_ref(), pairs.as_os_str(), "--out".as_ref(), out.as_os_str()];
        if let Some(q) = quality {
            args.extend([OsStr::new("--quality"), q.as_ref()]);
        }
        cli(args);
        serde_json::from_str::<Vec<Value>>(&std::fs::read_to_string(out.join("jpeg.json")).unwrap()).unwrap()
    };
    let lossy = run(&tmp.path().join("lossy"), None);
    let lossless = run(&tmp.path().join("lossless"), Some("100"));

    let mut problems = Vec::new();
    for id in pre.keys() {
        let rows: Vec<&Value> = lossy.iter().filter(|r| r["id"] == id.as_str()).collect();
        let qs: Vec<u64> = rows.iter().map(|r| r["quality"].as_u64().unwrap()).collect();
        if qs != [95, 75, 50] {
            problems.push(format!("{id}: qualities {qs:?}"));
        }
        for r in &rows {
            let post = r["post_deviation"].as_f64().unwrap();
            let art = r["artifact"].as_str().map(Path::new);
            if !(post.is_finite() && post > 0.0) || r["lossless"] != false || !art.is_some_and(Path::exists) {
                problems.push(format!("{id}: bad lossy row {r}"));
            }
            if r["pre_deviation"].as_f64() != Some(pre[id]) {
                problems.push(format!("{id}: pre-compression deviation {} != {}", r["pre_deviation"], pre[id]));
            }
        }
        let l: Vec<&Value> = lossless.iter().filter(|r| r["id"] == id.as_str()).collect();
        let exact = l.len() == 1
            && l[0]["lossless"] == true
            && l[0]["post_deviation"].as_f64() == l[0]["pre_deviation"].as_f64()
            && l[0]["pre_deviation"].as_f64() == Some(pre[id]);
        if !exact {
            problems.push(format!("{id}: lossless row {l:?}"));
        }
    }
    let pass = problems.is_empty() && lossy.len() == 9;
    let mean_post: Vec<String> = [95u64, 75, 50]
        .iter()
        .map(|q| {
            let v: Vec<f64> = lossy.iter().filter(|r| r["quality"] == *q).map(|r| r["post_deviation"].as_f64().unwrap()).collect();
            format!("Q{q} {:.1}/255", v.iter().sum::<f64>() / v.len() as f64 * 255.0)
        })
        .collect();
    report(
        11,
        pass,
        &format!(
            "jpeg-test: {} rows for 3 images (mean post deviation {}); lossless deviation equals pre-compression exactly; {} problems",
            lossy.len(),
            mean_post.join(", "),
            problems.len()
        ),
    );
    assert!(pass, "{problems:#?}");
}
