//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails. Runs without the libtest harness so the lines
//! always reach the terminal.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cse_core::audio::{read_wav, synth_pair, synth_speechlike, write_wav, NoiseKind, WaveBuffer, SAMPLE_RATE};
use cse_core::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use cse_core::config::{Config, Fusion, InputVariant, Preset};
use cse_core::dsp::{istft, stft_samples, StftConfig, StreamFramer};
use cse_core::enhance::enhance_batch;
use cse_core::eval::{evaluate_pair, token_accuracy, MetricReport};
use cse_core::gradsuite::{self, SuiteOptions};
use cse_core::model::{ForwardOptions, ModelInput, SeModel};
use cse_core::ssl::{PseudoSsl, SslConfig};
use cse_core::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use cse_core::train::{mtl_loss, se_loss, semantic_ce_loss, train_loop, TrainItem, TrainLoop, Trainer};
use cse_core::vq::{init_codebook, quantize, Codebook, EmaState, VqConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&mut Shared) -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Shared {
    dir: tempfile::TempDir,
    trained: Option<PathBuf>,
}

fn main() {
    let mut shared = Shared {
        dir: tempfile::tempdir().expect("temp dir"),
        trained: None,
    };
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", c1_gradients),
        ("causality", c2_causality),
        ("prefix identity", c3_prefix_identity),
        ("stft round trip", c4_stft),
        ("vq oracle", c5_vq),
        ("loss algebra", c6_loss_algebra),
        ("multi-token prediction", c7_multi_token),
        ("desk training", c8_desk_training),
        ("streaming equivalence", c9_streaming),
        ("checkpoint round trip", c10_checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| f(&mut shared))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    check(
        elapsed.as_secs() < limit_s,
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

// 1 ------------------------------------------------------------------------

fn c1_gradients(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut components = 0;
    let mut min_probes = usize::MAX;
    for (variant, fusion) in [
        (InputVariant::PlusCodebookVector, Fusion::Film),
        (InputVariant::PlusIndexEmbedding, Fusion::Concat),
        (InputVariant::RawSsl, Fusion::Film),
    ] {
        let mut c = Config::preset(Preset::Desk);
        c.model.variant = variant;
        c.model.fusion = fusion;
        let results = ok(gradsuite::run(&c, SuiteOptions::default()))?;
        for r in &results {
            if !r.passed {
                return Err(format!(
                    "{variant:?}/{fusion:?}: {} rel err {:.3e}",
                    r.component, r.max_rel_error
                ));
            }
            worst = worst.max(r.max_rel_error);
            min_probes = min_probes.min(r.probes);
        }
        components += results.len();
    }
    check(min_probes >= 100, format!("only {min_probes} probes"))?;
    within(t0.elapsed(), 120, "gradient suite")?;
    Ok(format!(
        "{components} component checks over 3 variants, >= {min_probes} probes each, max rel err {worst:.2e}"
    ))
}

// 2 ------------------------------------------------------------------------

fn small_config(variant: InputVariant, fusion: Fusion, prefix: bool) -> Config {
    let mut c = Config::preset(Preset::Desk);
    c.ssl.layers = 2;
    c.ssl.dim = 32;
    c.ssl.prefix_mode = prefix;
    c.vq.codebook_size = 32;
    c.vq.code_dim = 16;
    c.model.g_dim = 32;
    c.model.f_dim = 32;
    c.model.layers = 2;
    c.model.emb_dim = 8;
    c.model.variant = variant;
    c.model.fusion = fusion;
    c
}

fn noisy_wave(seconds: f64, seed: u64) -> Vec<f64> {
    let (_, noisy, _) = synth_pair(seconds, seed, (0.0, 10.0), &[NoiseKind::White, NoiseKind::Pink]).expect("synth");
    noisy.samples
}

fn ready(c: &Config, samples: &[f64]) -> SeModel {
    let mut m = SeModel::new(c).expect("model");
    let (x, _) = ModelInput::from_samples(samples, c).expect("input");
    m.init_codebook(&[&x], 1).expect("codebook");
    m
}

fn rows_diff(a: &Tensor, b: &Tensor, rows: usize) -> f64 {
    a.slice_rows(0, rows).max_abs_diff(&b.slice_rows(0, rows))
}

fn c2_causality(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let combos = [
        (InputVariant::PlusCodebookVector, Fusion::Film),
        (InputVariant::PlusIndexEmbedding, Fusion::Concat),
        (InputVariant::RawSsl, Fusion::Film),
    ];
    let mut models = Vec::new();
    for prefix in [false, true] {
        for (v, f) in combos {
            let c = small_config(v, f, prefix);
            models.push((prefix, ready(&c, &noisy_wave(1.0, 77))));
        }
    }
    let stft = StftConfig::default();
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (prefix, m) = &models[case % models.len()];
        let frames = rng.gen_range(6..24);
        let len = (frames - 1) * stft.hop_length + stft.win_length;
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let t = rng.gen_range(0..frames - 1);
        // First sample that belongs to no frame <= t.
        let start = t * stft.hop_length + stft.win_length;
        let mut y = x.clone();
        for v in &mut y[start..] {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (xi, _) = ok(ModelInput::from_samples(&x, &m.config))?;
        let (yi, _) = ok(ModelInput::from_samples(&y, &m.config))?;
        let a = ok(m.infer(&xi, false))?;
        let b = ok(m.infer(&yi, false))?;
        let keep = t + 1;
        let d = rows_diff(&a.enhanced, &b.enhanced, keep)
            .max(rows_diff(&a.mask, &b.mask, keep))
            .max(rows_diff(&a.logits, &b.logits, keep));
        check(
            a.tokens[..keep] == b.tokens[..keep],
            format!("case {case}: tokens changed before frame {t}"),
        )?;
        if *prefix {
            check(d == 0.0, format!("case {case}: prefix mode not bit-exact ({d:e})"))?;
        }
        check(d <= 1e-6, format!("case {case}: prefix outputs moved by {d:e}"))?;
        check(
            rows_diff(&a.enhanced, &b.enhanced, frames) > 0.0,
            format!("case {case}: mutation had no effect at all"),
        )?;
        worst = worst.max(d);
    }
    Ok(format!(
        "50 perturbations over 3 variants x full/prefix mode, max prefix change {worst:e}"
    ))
}

// 3 ------------------------------------------------------------------------

fn c3_prefix_identity(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let stft = StftConfig::default();
    let wave = synth_speechlike(0.8, 3).map_err(|e| e.to_string())?;
    let (x, _) = ok(ModelInput::from_samples(&wave.samples, &Config::preset(Preset::Desk)))?;
    let frames = x.frames;
    let build = |causal: bool| {
        let cfg = SslConfig {
            causal,
            freeze_frontend: false,
            seed: 5,
            ..SslConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = PseudoSsl::new(&mut store, "ssl", &cfg, stft.win_length).expect("encoder");
        (store, enc)
    };
    let (store, enc) = build(true);
    let prefix = ok(enc.stack(&store, &frames, true))?;
    let full = ok(enc.stack(&store, &frames, false))?;
    check(
        prefix == full,
        "causal encoder: prefix evaluation differs from the full pass",
    )?;
    let (store, enc) = build(false);
    let prefix = ok(enc.stack(&store, &frames, true))?;
    let full = ok(enc.stack(&store, &frames, false))?;
    let gap = prefix
        .layers
        .iter()
        .zip(&full.layers)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    check(
        gap > 1e-6,
        format!("bidirectional encoder shows no prefix difference ({gap:e})"),
    )?;
    within(t0.elapsed(), 60, "prefix identity")?;
    Ok(format!(
        "{} frames x {} layers bit-exact when causal; bidirectional max difference {gap:.3e}",
        frames.rows(),
        full.layers.len()
    ))
}

// 4 ------------------------------------------------------------------------

fn c4_stft(_: &mut Shared) -> Outcome {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut signals: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..16000 + 37 * i).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    signals.push(synth_speechlike(1.3, 9).map_err(|e| e.to_string())?.samples);
    signals.push(noisy_wave(1.1, 10));
    for s in &signals {
        let spec = ok(stft_samples(s, &cfg))?;
        let back = ok(istft(&spec, &cfg))?;
        let end = (spec.frames - 1) * cfg.hop_length + cfg.win_length;
        // Interior: away from the first and last half window.
        for i in cfg.win_length..end - cfg.win_length {
            worst = worst.max((back.samples[i] - s[i]).abs());
        }
    }
    check(worst <= 1e-6, format!("round-trip interior error {worst:e}"))?;

    let mut chunkings = 0;
    for s in &signals {
        let batch = ok(stft_samples(s, &cfg))?;
        for mode in 0..4 {
            let mut framer = ok(StreamFramer::new(cfg))?;
            let mut got = Vec::new();
            let mut pos = 0;
            while pos < s.len() {
                let n = match mode {
                    0 => 1,
                    1 => cfg.hop_length,
                    2 => 997,
                    _ => rng.gen_range(1..2000),
                }
                .min(s.len() - pos);
                for f in framer.push(&s[pos..pos + n]) {
                    got.extend(f.spectrum);
                }
                pos += n;
            }
            check(
                got == batch.data,
                format!("framer differs from batch stft (chunking mode {mode})"),
            )?;
            chunkings += 1;
        }
    }
    Ok(format!(
        "interior round-trip error {worst:.2e} on {} signals; framer bit-exact under {chunkings} chunkings",
        signals.len()
    ))
}

// 5 ------------------------------------------------------------------------

fn lloyd(data: &Tensor, mut cb: Codebook) -> Codebook {
    for _ in 0..300 {
        let (idx, _) = quantize(data, &cb).expect("quantize");
        let mut sums = Tensor::zeros(cb.codewords.shape());
        let mut n = vec![0usize; cb.size()];
        for (t, &i) in idx.iter().enumerate() {
            n[i] += 1;
            for (s, v) in sums.row_mut(i).iter_mut().zip(data.row(t)) {
                *s += v;
            }
        }
        let before = cb.clone();
        for k in 0..cb.size() {
            if n[k] > 0 {
                for (c, s) in cb.codewords.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *c = s / n[k] as f64;
                }
            }
        }
        if cb == before {
            break;
        }
    }
    cb
}

fn quant_mse(data: &Tensor, cb: &Codebook) -> f64 {
    let (_, q) = quantize(data, cb).expect("quantize");
    data.data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / data.len() as f64
}

fn c5_vq(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cb = Codebook::new(Tensor::randn(&[64, 16], 1.0, &mut rng)).map_err(|e| e.to_string())?;
    let x = Tensor::randn(&[1000, 16], 1.0, &mut rng);
    let (idx, q) = ok(quantize(&x, &cb))?;
    let mut agree = 0;
    for t in 0..1000 {
        let dist = |k: usize| -> f64 {
            x.row(t)
                .iter()
                .zip(cb.codewords.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut best = 0;
        for k in 1..cb.size() {
            if dist(k) < dist(best) {
                best = k;
            }
        }
        if idx[t] == best && q.row(t) == cb.codewords.row(best) {
            agree += 1;
        }
    }
    check(
        agree == 1000,
        format!("quantize agrees with exhaustive search on {agree}/1000"),
    )?;

    let (clusters, dim, n) = (16, 8, 6000);
    let centers = Tensor::randn(&[clusters, dim], 4.0, &mut rng);
    let noise = Tensor::randn(&[n, dim], 0.5, &mut rng);
    let mut data = Tensor::zeros(&[n, dim]);
    for i in 0..n {
        let c = rng.gen_range(0..clusters);
        for j in 0..dim {
            data.row_mut(i)[j] = centers.row(c)[j] + noise.row(i)[j];
        }
    }
    let oracle = (0..8)
        .map(|_| lloyd(&data, init_codebook(&data, clusters, &mut rng).expect("init")))
        .map(|cb| quant_mse(&data, &cb))
        .fold(f64::INFINITY, f64::min);
    let cfg = VqConfig {
        codebook_size: clusters,
        code_dim: dim,
        ..VqConfig::default()
    };
    let batch = |rng: &mut ChaCha8Rng| {
        let rows: Vec<Vec<f64>> = (0..256).map(|_| data.row(rng.gen_range(0..n)).to_vec()).collect();
        Tensor::from_rows(&rows).expect("rows")
    };
    let first = batch(&mut rng);
    let mut cb = ok(init_codebook(&first, clusters, &mut rng))?;
    let mut ema = EmaState::new(&cb, &cfg);
    for _ in 0..800 {
        let b = batch(&mut rng);
        let (idx, _) = ok(quantize(&b, &cb))?;
        ok(ema.update(&mut cb, &b, &idx, &mut rng))?;
    }
    let got = quant_mse(&data, &cb);
    check(got <= 1.5 * oracle, format!("EMA MSE {got:.4} vs k-means {oracle:.4}"))?;
    within(t0.elapsed(), 120, "vq oracle")?;
    Ok(format!(
        "1000/1000 nearest-codeword agreement; EMA MSE {got:.4} = {:.3}x k-means oracle {oracle:.4}",
        got / oracle
    ))
}

// 6 ------------------------------------------------------------------------

fn train_item(id: &str, seconds: f64, seed: u64, c: &Config) -> TrainItem {
    let (clean, noisy, _) =
        synth_pair(seconds, seed, (0.0, 10.0), &[NoiseKind::White, NoiseKind::Pink]).expect("synth");
    TrainItem::new(id.to_string(), &noisy.samples, &clean.samples, c, None).expect("item")
}

fn c6_loss_algebra(_: &mut Shared) -> Outcome {
    let mut c = small_config(InputVariant::PlusCodebookVector, Fusion::Film, false);
    c.train.lambda_se = 0.9;
    c.train.lambda_vq = 1.7;
    c.train.lambda_ce = 0.01;
    let items: Vec<TrainItem> = (0..3).map(|i| train_item(&format!("u{i}"), 0.6, 600 + i, &c)).collect();
    let refs: Vec<&TrainItem> = items.iter().collect();
    let m = ready(&c, &items[0].noisy_samples);
    let mut g = Graph::inference();
    let b = ok(mtl_loss(&mut g, &m, &refs, ForwardOptions::default()))?.breakdown;
    let expect = 0.9 * b.l_se + 1.7 * b.l_vq + 0.01 * b.l_ce;
    check(b.total == expect, format!("total {} != weighted sum {expect}", b.total))?;

    let mut c0 = c.clone();
    c0.train.lambda_vq = 0.0;
    c0.train.lambda_ce = 0.0;
    let mut m0 = m.clone();
    m0.config = c0.clone();
    let mut g = Graph::new();
    let out = ok(mtl_loss(&mut g, &m0, &refs, ForwardOptions::default()))?;
    let full = ok(g.backward(out.total))?;
    let mut g2 = Graph::new();
    let mut acc = None;
    for it in &refs {
        let o = ok(m0.forward(&mut g2, &it.input, ForwardOptions::default()))?;
        let y = ok(g2.constant(it.clean.clone()))?;
        let l = ok(se_loss(&mut g2, o.enhanced, y))?;
        acc = Some(match acc {
            None => l,
            Some(a) => ok(g2.add(a, l))?,
        });
    }
    let mean = ok(g2.scale(acc.expect("items"), 1.0 / refs.len() as f64))?;
    let l = ok(g2.scale(mean, c0.train.lambda_se))?;
    let only = ok(g2.backward(l))?;
    let mut compared = 0;
    for id in m0.store.ids() {
        match (full.param(id), only.param(id)) {
            (Some(a), Some(b)) => {
                check(a.data() == b.data(), format!("{} gradient differs", m0.store.name(id)))?;
                compared += 1;
            }
            (Some(a), None) => check(
                a.data().iter().all(|&v| v == 0.0),
                format!("{} has gradient only with zero weights", m0.store.name(id)),
            )?,
            (None, Some(_)) => return Err(format!("{} missing from the MTL gradient", m0.store.name(id))),
            (None, None) => {}
        }
    }

    let k = 1024;
    let mut g = Graph::inference();
    let logits = ok(g.constant(Tensor::zeros(&[12, 3 * k])))?;
    let idx: Vec<usize> = (0..12).map(|i| (i * 131) % k).collect();
    let l = ok(semantic_ce_loss(&mut g, logits, &idx, 3, k))?;
    let err = (g.value(l).item() - (k as f64).ln()).abs();
    check(err < 1e-9, format!("uniform CE off log K by {err:e}"))?;
    Ok(format!(
        "total == weighted sum exactly; {compared} parameter gradients bit-identical to SE-only; uniform CE error {err:.1e}"
    ))
}

// 7 ------------------------------------------------------------------------

struct Predictor {
    model: SeModel,
    table: Tensor,
    adam: AdamState,
}

impl Predictor {
    fn new(k: usize, seed: u64) -> Self {
        let mut c = Config::preset(Preset::Desk);
        c.model.variant = InputVariant::RawSsl;
        c.vq.codebook_size = k;
        c.train.seed = seed;
        let model = SeModel::new(&c).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
        let table = Tensor::randn(&[k, c.ssl.dim], 1.0, &mut rng);
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        );
        Self { model, table, adam }
    }

    fn z(&self, tokens: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| self.table.row(t).to_vec()).collect();
        Tensor::from_rows(&rows).expect("rows")
    }

    fn step(&mut self, tokens: &[usize]) -> Result<f64, String> {
        let m = &self.model;
        let mut g = Graph::new();
        let z = ok(g.constant(self.z(tokens)))?;
        let (_, logits) = ok(m.predict_from_z(&mut g, &m.store, z))?;
        let l = ok(semantic_ce_loss(
            &mut g,
            logits,
            tokens,
            m.n_predict(),
            m.codebook_size(),
        ))?;
        let grads = ok(g.backward(l))?;
        let only = m.predictor_params();
        let updates: Vec<_> = grads
            .params()
            .filter(|(id, _)| only.contains(id))
            .map(|(id, t)| (id, t.clone()))
            .collect();
        ok(self.adam.apply(&mut self.model.store, &updates))?;
        Ok(g.value(l).item())
    }

    fn accuracy(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>, String> {
        let m = &self.model;
        let n = m.n_predict();
        let mut hits = vec![0.0; n];
        for s in seqs {
            let mut g = Graph::inference();
            let z = ok(g.constant(self.z(s)))?;
            let (_, logits) = ok(m.predict_from_z(&mut g, &m.store, z))?;
            let acc = ok(token_accuracy(g.value(logits), s, n, m.codebook_size()))?;
            for (h, a) in hits.iter_mut().zip(acc.per_n) {
                *h += a;
            }
        }
        Ok(hits.into_iter().map(|h| h / seqs.len() as f64).collect())
    }
}

fn c7_multi_token(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Deterministic cycle of period 7 over arbitrary token ids.
    let mut ids: Vec<usize> = (0..256).collect();
    ids.shuffle(&mut rng);
    let cycle: Vec<usize> = ids[..7].to_vec();
    let seq = |phase: usize, len: usize| -> Vec<usize> { (0..len).map(|t| cycle[(phase + t) % 7]).collect() };
    let mut p = Predictor::new(256, 70);
    let eval: Vec<Vec<usize>> = (0..7).map(|ph| seq(ph, 48)).collect();
    let mut reached = None;
    let mut acc = Vec::new();
    for step in 1..=2000 {
        let phase = rng.gen_range(0..7);
        p.step(&seq(phase, 48))?;
        if step % 50 == 0 {
            acc = p.accuracy(&eval)?;
            if acc.iter().all(|&a| a >= 0.95) {
                reached = Some(step);
                break;
            }
        }
    }
    let Some(steps) = reached else {
        return Err(format!("period-7 cycle not learned in 2000 steps: per-n {acc:.3?}"));
    };
    check(acc.len() == 5, "expected N = 5")?;

    // Order-1 Markov stream, P = 0.7 I + 0.3 U over K = 8.
    let k = 8;
    let markov = |rng: &mut ChaCha8Rng, len: usize| -> Vec<usize> {
        let mut s = vec![rng.gen_range(0..k)];
        while s.len() < len {
            let prev = *s.last().expect("non-empty");
            s.push(if rng.gen_bool(0.7) { prev } else { rng.gen_range(0..k) });
        }
        s
    };
    let mut q = Predictor::new(k, 71);
    for _ in 0..600 {
        let s = markov(&mut rng, 48);
        q.step(&s)?;
    }
    let held: Vec<Vec<usize>> = (0..150).map(|_| markov(&mut rng, 48)).collect();
    let per_n = q.accuracy(&held)?;
    let monotone = per_n.windows(2).all(|w| w[1] <= w[0]);
    check(
        monotone,
        format!("Markov per-n accuracy not non-increasing: {per_n:.3?}"),
    )?;
    within(t0.elapsed(), 300, "multi-token prediction")?;
    Ok(format!(
        "cycle: all n<=5 >= 95% after {steps} steps ({acc:.3?}); Markov per-n {per_n:.3?}"
    ))
}

// 8 ------------------------------------------------------------------------

fn c8_desk_training(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let c = Config::preset(Preset::Desk);
    let train: Vec<TrainItem> = (0..200).map(|i| train_item(&format!("tr{i}"), 1.5, i, &c)).collect();
    let val: Vec<TrainItem> = (0..8)
        .map(|i| train_item(&format!("va{i}"), 1.5, 20_000 + i, &c))
        .collect();
    let held: Vec<TrainItem> = (0..20)
        .map(|i| train_item(&format!("ho{i}"), 1.5, 10_000 + i, &c))
        .collect();
    let out_dir = shared.dir.path().join("desk");
    let outcome = ok(train_loop(
        &c,
        TrainLoop {
            out_dir: &out_dir,
            train: &train,
            val: &val,
            resume: None,
        },
        &mut |_| {},
    ))?;
    check(outcome.epochs.len() == c.train.epochs, "not every epoch ran")?;
    shared.trained = Some(outcome.last.clone());
    let first = &outcome.epochs[0].train;
    let last = &outcome.epochs[outcome.epochs.len() - 1].train;
    for e in &outcome.epochs {
        let t = &e.train;
        check(
            [t.l_se, t.l_vq, t.l_ce, t.total].iter().all(|v| v.is_finite()),
            format!("non-finite loss in epoch {}", e.epoch),
        )?;
        check(
            t.total <= 10.0 * first.total,
            format!(
                "loss grew from {:.3} to {:.3} by epoch {}",
                first.total, t.total, e.epoch
            ),
        )?;
    }
    check(last.l_se < first.l_se, "SE loss did not decrease")?;

    let m = ok(load_model(&outcome.last, None))?;
    let mut reports = Vec::new();
    for it in &held {
        reports.push(ok(evaluate_pair(
            &m,
            &it.id,
            &it.noisy_samples,
            &it.clean_samples,
            None,
            false,
        ))?);
    }
    let r = ok(MetricReport::from_utterances(reports))?;
    let chance = 1.0 / c.vq.codebook_size as f64;
    check(
        r.mean_si_sdr_improvement >= 3.0,
        format!("SI-SDR improvement {:.2} dB < 3 dB", r.mean_si_sdr_improvement),
    )?;
    check(
        r.token_acc_mean > chance,
        format!("token accuracy {:.4} not above chance {chance:.4}", r.token_acc_mean),
    )?;
    within(t0.elapsed(), 1800, "desk training")?;
    Ok(format!(
        "SI-SDR {:.2} -> {:.2} dB ({:+.2}) on 20 held-out; token acc {:.3} vs chance {chance:.4}; total loss {:.3} -> {:.3}",
        r.mean_noisy_si_sdr, r.mean_enhanced_si_sdr, r.mean_si_sdr_improvement, r.token_acc_mean, first.total, last.total
    ))
}

// 9 ------------------------------------------------------------------------

/// The checkpoint trained in criterion 8, or a freshly initialised one.
fn checkpoint(shared: &mut Shared) -> Result<PathBuf, String> {
    if let Some(p) = &shared.trained {
        return Ok(p.clone());
    }
    let c = Config::preset(Preset::Desk);
    let m = ready(&c, &noisy_wave(1.5, 1));
    let p = shared.dir.path().join("init.ckpt");
    ok(save_checkpoint(&p, &m, None))?;
    shared.trained = Some(p.clone());
    Ok(p)
}

fn cse(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cse"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!(
            "cse {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ),
    )
}

fn c9_streaming(shared: &mut Shared) -> Outcome {
    let ckpt = checkpoint(shared)?;
    let dir = shared.dir.path().join("stream");
    ok(std::fs::create_dir_all(&dir))?;
    let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();
    let mut worst = 0.0f64;
    let mut worst_float = 0.0f64;
    let model = ok(load_model(&ckpt, None))?;
    for i in 0..10u64 {
        let seconds = 1.0 + 0.2 * i as f64;
        let input = dir.join(format!("in{i}.wav"));
        ok(write_wav(
            &input,
            &ok(WaveBuffer::new(noisy_wave(seconds, 900 + i), SAMPLE_RATE))?,
        ))?;
        let batch = dir.join(format!("batch{i}.wav"));
        let stream = dir.join(format!("stream{i}.wav"));
        let chunk = ["10", "20", "7.5", "100", "0.0625"][i as usize % 5];
        cse(&[
            "enhance",
            "--checkpoint",
            &s(&ckpt),
            "--input",
            &s(&input),
            "--output",
            &s(&batch),
        ])?;
        cse(&[
            "enhance",
            "--checkpoint",
            &s(&ckpt),
            "--input",
            &s(&input),
            "--output",
            &s(&stream),
            "--streaming",
            "--chunk-ms",
            chunk,
        ])?;
        let a = ok(read_wav(&batch))?.samples;
        let b = ok(read_wav(&stream))?.samples;
        check(
            a.len() == b.len(),
            format!("file {i}: length {} vs {}", a.len(), b.len()),
        )?;
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        check(d <= 1e-6, format!("file {i}: CLI outputs differ by {d:e}"))?;
        worst = worst.max(d);

        // Before 16-bit quantisation.
        let wave = ok(read_wav(&input))?.samples;
        let fb = ok(enhance_batch(&model, &wave, None, false))?.samples;
        let chunk_samples = (chunk.parse::<f64>().expect("chunk") * 16.0).round().max(1.0) as usize;
        let fs = ok(cse_core::enhance::enhance_streaming(
            &model,
            &wave,
            chunk_samples,
            false,
        ))?;
        let d = fb.iter().zip(&fs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        check(d <= 1e-6, format!("file {i}: float outputs differ by {d:e}"))?;
        worst_float = worst_float.max(d);
    }
    Ok(format!(
        "10 files via `cse enhance`: max |batch - streaming| {worst:e} (wav), {worst_float:.2e} (float)"
    ))
}

// 10 -----------------------------------------------------------------------

fn c10_checkpoint(shared: &mut Shared) -> Outcome {
    let ckpt = checkpoint(shared)?;
    let (m, state) = ok(load_checkpoint(&ckpt, None))?;
    let p = shared.dir.path().join("copy.ckpt");
    ok(save_checkpoint(&p, &m, state.as_ref()))?;
    let back = ok(load_model(&p, None))?;
    let wave = noisy_wave(1.2, 4242);
    let (x, _) = ok(ModelInput::from_samples(&wave, &m.config))?;
    let a = ok(m.infer(&x, false))?;
    let b = ok(back.infer(&x, false))?;
    check(a == b, "forward after save/load is not bit-exact")?;
    check(
        ok(std::fs::read(&ckpt))? == ok(std::fs::read(&p))?,
        "re-saved checkpoint bytes differ",
    )?;

    let mut c = small_config(InputVariant::PlusCodebookVector, Fusion::Film, false);
    c.train.batch = 2;
    c.train.crop_frames = 40;
    let items: Vec<TrainItem> = (0..5).map(|i| train_item(&format!("r{i}"), 0.8, 700 + i, &c)).collect();
    let mut run = Trainer::new(ok(SeModel::new(&c))?);
    for _ in 0..4 {
        ok(run.step(&items))?;
    }
    let mid = shared.dir.path().join("mid.ckpt");
    ok(run.save(&mid))?;
    let mut resumed = ok(Trainer::load(&mid, Some(&c)))?;
    for s in 0..3 {
        let (x, _) = ok(run.step(&items))?;
        let (y, _) = ok(resumed.step(&items))?;
        check(x == y, format!("resumed step {s} losses differ"))?;
    }
    for id in run.model.store.ids() {
        check(
            run.model.store.get(id) == resumed.model.store.get(id),
            format!("{} differs after resume", run.model.store.name(id)),
        )?;
    }
    check(
        run.model.codebook == resumed.model.codebook,
        "codebook differs after resume",
    )?;
    Ok("save -> load -> forward bit-exact; resumed run matches uninterrupted run for 3 steps bit-exactly".into())
}
