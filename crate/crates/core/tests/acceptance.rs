//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs under `cargo test` with `harness = false`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use binderdiff::autodiff::{grad_check, Axis, GradCheckConfig, Graph, Tensor, Var};
use binderdiff::codec::{
    read_embeddings, write_embeddings, Codec, DecodeFailure, DecodeResult, ToyCodec,
};
use binderdiff::dataio::{cluster_split, BinderRecord, SplitParams};
use binderdiff::denoiser::{
    forward, read_checkpoint, write_checkpoint, DenoiserConfig, DenoiserModel, ParamVars, PocketMask, FOURIER_PARAM,
};
use binderdiff::diffusion::{q_sample, reverse_step};
use binderdiff::explore::{explore_one, passes_filters, ExploreConfig, ExploreOutcome, FilterVerdict};
use binderdiff::metrics::{
    blosum62, div_emb, div_seq, div_str, nw_align, sim_seq, tm_d0, tm_score, CoordSet, GapPenalties,
};
use binderdiff::schedule::{DEFAULT_OFFSET, MAX_BETA};
use binderdiff::trainer::{cosine_loss, total_loss, train, NormStats, TrainConfig, TrainingExample};
use binderdiff::{seed, EmbeddingMatrix, NoiseSchedule, PeptideSequence};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let e = start.elapsed();
    ensure!(e < limit, "took {:.1?}, limit {:.0?}", e, limit);
    Ok(())
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn randm(rows: usize, cols: usize, s: u64) -> EmbeddingMatrix {
    EmbeddingMatrix::randn(rows, cols, &mut seed::rng(s))
}

fn tensor(m: &EmbeddingMatrix) -> Tensor<f64> {
    Tensor::matrix(m.rows(), m.cols(), m.data().iter().map(|&v| f64::from(v)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn schedule_suite() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::cosine(1000, 0.008).map_err(|e| e.to_string())?;
    ensure!(s.alpha_bar(0) == 1.0, "alpha_bar(0) = {}", s.alpha_bar(0));
    for t in 1..=1000 {
        ensure!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not decreasing at {t}");
        ensure!(s.beta(t) <= MAX_BETA, "beta({t}) = {}", s.beta(t));
    }
    // Direct double-precision evaluation of the squared-cosine curve.
    let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let oracle = f(500.0) / f(0.0);
    ensure!((oracle - 0.4938).abs() < 1e-3, "oracle {oracle}");
    ensure!((s.alpha_bar(500) - oracle).abs() < 1e-12, "alpha_bar(500) {} vs {oracle}", s.alpha_bar(500));
    ensure!(s.sigma(1) == 0.0, "sigma_1 = {}", s.sigma(1));
    within(Duration::from_secs(1), start)?;
    Ok(format!("alpha_bar(500) = {:.8}", s.alpha_bar(500)))
}

// ---------------------------------------------------------------- 2

fn diffusion_suite() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::cosine(1000, DEFAULT_OFFSET).map_err(|e| e.to_string())?;
    let x0 = [1.0f64, -0.5, 2.0];
    let checkpoints = [1usize, 500, 1000];
    let n = 10_000;
    // Per checkpoint and coordinate: running sum and sum of squares.
    let mut acc = [[(0.0f64, 0.0f64); 3]; 3];
    let mut rng = seed::rng(2024);
    for _ in 0..n {
        let mut x = x0;
        let mut k = 0;
        for t in 1..=1000 {
            let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
            for v in &mut x {
                *v = a * *v + b * normal(&mut rng);
            }
            if t == checkpoints[k] {
                for (c, v) in x.iter().enumerate() {
                    acc[k][c].0 += v;
                    acc[k][c].1 += v * v;
                }
                k = (k + 1).min(2);
            }
        }
    }
    for (k, &t) in checkpoints.iter().enumerate() {
        let ab = s.alpha_bar(t);
        let var_true = 1.0 - ab;
        for c in 0..3 {
            let mean = acc[k][c].0 / n as f64;
            let var = acc[k][c].1 / n as f64 - mean * mean;
            let se = (var_true / n as f64).sqrt();
            ensure!(
                (mean - ab.sqrt() * x0[c]).abs() < 3.0 * se,
                "t={t} coord {c}: chain mean {mean} vs {}",
                ab.sqrt() * x0[c]
            );
            ensure!((var / var_true - 1.0).abs() < 0.05, "t={t} coord {c}: chain var {var} vs {var_true}");
        }
    }
    // The closed-form sampler against the same moments.
    let x0m = EmbeddingMatrix::new(1, 3, x0.iter().map(|&v| v as f32).collect()).unwrap();
    for &t in &checkpoints {
        let ab = s.alpha_bar(t);
        let (mut sum, mut sq) = ([0.0f64; 3], [0.0f64; 3]);
        for _ in 0..n {
            let eps = EmbeddingMatrix::randn(1, 3, &mut rng);
            let xt = q_sample(&x0m, t, &eps, &s).map_err(|e| e.to_string())?;
            for c in 0..3 {
                let v = f64::from(xt.get(0, c));
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            ensure!(
                (mean - ab.sqrt() * x0[c]).abs() < 3.0 * ((1.0 - ab) / n as f64).sqrt(),
                "t={t}: q_sample mean {mean}"
            );
            ensure!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t}: q_sample var {var}");
        }
    }
    // Oracle noise estimate at t = 1 recovers x0.
    let x0 = randm(16, 32, 5);
    let eps = randm(16, 32, 6);
    let x1 = q_sample(&x0, 1, &eps, &s).map_err(|e| e.to_string())?;
    let back = reverse_step(&x1, &eps, 1, &s, &randm(16, 32, 7)).map_err(|e| e.to_string())?;
    let err = back.max_abs_diff(&x0);
    ensure!(err < 1e-5, "oracle recovery error {err}");
    within(Duration::from_secs(30), start)?;
    Ok(format!("10^4 chains at t in {{1, 500, 1000}}; oracle error {err:.1e}"))
}

// ---------------------------------------------------------------- 3

fn randt(shape: &[usize], s: u64) -> Tensor<f64> {
    let mut rng = seed::rng(s);
    Tensor::from_fn(shape, |_| normal(&mut rng))
}

fn weighted(g: &mut Graph<f64>, out: Var, s: u64) -> binderdiff::Result<Var> {
    let w = g.constant(randt(g.shape(out), s));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> binderdiff::Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, bool, Build)> {
    let m = |s| randt(&[3, 4], s);
    vec![
        ("matmul", vec![m(1), randt(&[4, 2], 2)], false, Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 9)
        })),
        ("add", vec![m(1), m(2)], false, Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 9)
        })),
        ("add_row", vec![m(1), randt(&[1, 4], 2)], false, Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted(g, y, 9)
        })),
        ("mul", vec![m(1), m(2)], false, Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 9)
        })),
        ("mul_row", vec![m(1), randt(&[1, 4], 2)], false, Box::new(|g, v| {
            let y = g.mul_row(v[0], v[1])?;
            weighted(g, y, 9)
        })),
        ("scale", vec![m(1)], false, Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted(g, y, 9)
        })),
        ("softmax_rows", vec![m(1)], false, Box::new(|g, v| {
            let y = g.softmax_rows(v[0]);
            weighted(g, y, 9)
        })),
        ("layer_norm", vec![m(1)], false, Box::new(|g, v| {
            let y = g.layer_norm(v[0]);
            weighted(g, y, 9)
        })),
        ("gelu", vec![m(1)], false, Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted(g, y, 9)
        })),
        ("dropout", vec![m(1)], true, Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3)?;
            weighted(g, y, 9)
        })),
        ("concat_cols", vec![m(1), randt(&[3, 2], 2)], false, Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1], v[0]])?;
            weighted(g, y, 9)
        })),
        ("slice_cols", vec![m(1)], false, Box::new(|g, v| {
            let y = g.slice_cols(v[0], 1, 3)?;
            weighted(g, y, 9)
        })),
        ("mean_rows", vec![m(1)], false, Box::new(|g, v| {
            let y = g.mean(v[0], Axis::Rows);
            weighted(g, y, 9)
        })),
        ("mean_cols", vec![m(1)], false, Box::new(|g, v| {
            let y = g.mean(v[0], Axis::Cols);
            weighted(g, y, 9)
        })),
        ("transpose", vec![m(1)], false, Box::new(|g, v| {
            let y = g.transpose(v[0]);
            weighted(g, y, 9)
        })),
        ("sum", vec![m(1)], false, Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("external_loss", vec![m(1)], false, Box::new(|g, v| {
            // sum(sin(y)) with y = 1.3 x, gradient cos(y) supplied by hand.
            let y = g.scale(v[0], 1.3);
            let vals = g.value(y).clone();
            let loss = vals.data().iter().map(|x| x.sin()).sum();
            let grad = Tensor::matrix(3, 4, vals.data().iter().map(|x| x.cos()).collect())?;
            g.external_loss(y, loss, grad)
        })),
    ]
}

fn full_model_check(cfg: &DenoiserConfig, entries: usize) -> Result<f64, String> {
    let model = DenoiserModel::init(cfg.clone()).map_err(|e| e.to_string())?;
    let (d, lp, lr) = (cfg.d_emb, 5, 7);
    let x = tensor(&randm(lp, d, 31));
    let z = tensor(&randm(lr, d, 32));
    let target = tensor(&randm(lp, d, 33));
    let mask = PocketMask::from_indices(lr, &[1, 2, 4]).unwrap();
    let fourier = model.params[FOURIER_PARAM].cast::<f64>();
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .iter()
        .filter(|(n, _)| DenoiserModel::is_trainable(n))
        .map(|(n, t)| (n.clone(), t.cast::<f64>()))
        .collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> binderdiff::Result<Var> {
        let f = g.constant(fourier.clone());
        let pv = ParamVars::from_pairs(
            names
                .iter()
                .cloned()
                .zip(vars.iter().copied())
                .chain(std::iter::once((FOURIER_PARAM.to_string(), f))),
        );
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let tr = forward(g, &pv, cfg, xv, zv, Some(&mask), 17)?;
        let tv = g.constant(target.clone());
        let diff = g.scale(tv, -1.0);
        let r = g.add(tr.output, diff)?;
        let sq = g.mul(r, r)?;
        Ok(g.sum(sq))
    };
    let mut worst = 0.0f64;
    for train_mode in [false, true] {
        let report = grad_check(
            &params,
            build,
            &GradCheckConfig {
                max_entries_per_tensor: Some(entries),
                train_mode,
                seed: 8,
                ..GradCheckConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            report.per_tensor.len() == params.len(),
            "checked {} of {} tensors",
            report.per_tensor.len(),
            params.len()
        );
        worst = worst.max(report.max_error());
        ensure!(report.max_error() < 1e-4, "train_mode={train_mode}: worst {:?}", report.worst());
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (name, params, train_mode, build) in primitive_cases() {
        let named: Vec<(String, Tensor<f64>)> =
            params.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect();
        let report = grad_check(
            &named,
            |g: &mut Graph<f64>, v: &[Var]| build(g, v),
            &GradCheckConfig {
                train_mode,
                seed: 4,
                ..GradCheckConfig::default()
            },
        )
        .map_err(|e| format!("{name}: {e}"))?;
        ensure!(report.max_error() < 1e-4, "{name}: {:?}", report.worst());
        worst = worst.max(report.max_error());
    }
    let cfg = DenoiserConfig {
        d_emb: 32,
        hidden: 64,
        heads: 4,
        layers: 2,
        intermediate: 128,
        seed: 12,
        ..DenoiserConfig::default()
    };
    let model_worst = full_model_check(&cfg, 12)?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "17 primitives worst {worst:.1e}; toy model (eval+train) worst {model_worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn loss_suite() -> Outcome {
    let x = randm(15, 32, 40);
    let y = randm(15, 32, 41);
    let c_same = cosine_loss(&x, &x).map_err(|e| e.to_string())?;
    let c_neg = cosine_loss(&x, &x.scaled(-1.0)).map_err(|e| e.to_string())?;
    // Rows built on disjoint coordinates.
    let mut a = EmbeddingMatrix::zeros(3, 4);
    let mut b = EmbeddingMatrix::zeros(3, 4);
    for r in 0..3 {
        a.row_mut(r)[0] = 1.0 + r as f32;
        b.row_mut(r)[2] = -2.0;
    }
    let c_orth = cosine_loss(&a, &b).map_err(|e| e.to_string())?;
    ensure!(c_same.abs() < 1e-6, "identical {c_same}");
    ensure!((c_orth - 1.0).abs() < 1e-12, "orthogonal {c_orth}");
    ensure!((c_neg - 2.0).abs() < 1e-6, "negated {c_neg}");

    let cfg = TrainConfig {
        lambda_mse: 0.9,
        lambda_cos: 0.1,
        ..TrainConfig::default()
    };
    let got = total_loss(&x, &y, &cfg).map_err(|e| e.to_string())?;
    let (mut sq, mut cos) = (0.0f64, 0.0f64);
    for r in 0..15 {
        let (u, v) = (x.row(r), y.row(r));
        let dot: f64 = u.iter().zip(v).map(|(&p, &q)| f64::from(p) * f64::from(q)).sum();
        let nu = u.iter().map(|&p| f64::from(p).powi(2)).sum::<f64>().sqrt();
        let nv = v.iter().map(|&q| f64::from(q).powi(2)).sum::<f64>().sqrt();
        sq += u.iter().zip(v).map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2)).sum::<f64>();
        cos += 1.0 - dot / (nu * nv);
    }
    let want = 0.9 * sq / (15.0 * 32.0) + 0.1 * cos / 15.0;
    ensure!((got - want).abs() < 1e-6, "total_loss {got} vs {want}");
    Ok(format!("endpoints 0/1/2; total_loss {got:.6}"))
}

// ---------------------------------------------------------------- 5

fn overfit_fixture() -> (Vec<TrainingExample>, DenoiserModel) {
    let codec = ToyCodec::new(32, 0, 0.5).unwrap();
    let mut rng = seed::rng(5);
    let data: Vec<TrainingExample> = (0..4)
        .map(|_| {
            let receptor = codec.encode(&PeptideSequence::random(24, &mut rng)).unwrap();
            let binder = codec.encode(&PeptideSequence::random(15, &mut rng)).unwrap();
            TrainingExample {
                mask: PocketMask::from_indices(receptor.rows(), &[3, 4, 5, 6, 7, 8, 9, 10]).unwrap(),
                receptor,
                binder,
            }
        })
        .collect();
    let mut model = DenoiserModel::init(DenoiserConfig::toy()).unwrap();
    let binders: Vec<&EmbeddingMatrix> = data.iter().map(|e| &e.binder).collect();
    model.norm_stats = NormStats::fit(&binders).unwrap();
    (data, model)
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::cosine(1000, DEFAULT_OFFSET).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 300,
        base_lr: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let run = || {
        let (data, mut model) = overfit_fixture();
        train(&mut model, &data, &sched, &cfg).map(|h| (h, model))
    };
    let (h1, m1) = run().map_err(|e| e.to_string())?;
    let (h2, m2) = run().map_err(|e| e.to_string())?;
    ensure!(h1 == h2 && m1 == m2, "two runs with the same seed differ");
    ensure!(h1.len() == 300, "{} epochs", h1.len());
    let first = h1[0].mean_loss;
    let tail = h1[290..].iter().map(|e| e.mean_loss).sum::<f64>() / 10.0;
    ensure!(tail < 0.25 * first, "last-10 mean {tail} vs first epoch {first}");
    within(Duration::from_secs(300), start)?;
    Ok(format!("epoch 0 loss {first:.4}, last-10 mean {tail:.4} (ratio {:.3})", tail / first))
}

// ---------------------------------------------------------------- 6

struct AlwaysFails(AtomicUsize);

impl Codec for AlwaysFails {
    fn name(&self) -> &str {
        "always-fails"
    }

    fn d_emb(&self) -> usize {
        8
    }

    fn encode(&self, _: &PeptideSequence) -> binderdiff::Result<EmbeddingMatrix> {
        Ok(EmbeddingMatrix::zeros(2, 8))
    }

    fn decode(&self, _: &EmbeddingMatrix) -> DecodeResult {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(DecodeFailure::TooShort { rows: 0 })
    }
}

fn explore_suite() -> Outcome {
    let cfg = ExploreConfig {
        sigma_max: 0.5,
        ..ExploreConfig::default()
    };
    let levels = cfg.sigma_levels();
    ensure!(levels.len() == 3, "levels {levels:?}");
    for (l, want) in levels.iter().zip([0.3, 0.4, 0.5]) {
        ensure!((l - want).abs() < 1e-12, "levels {levels:?}");
    }
    let codec = AlwaysFails(AtomicUsize::new(0));
    let out = explore_one(&EmbeddingMatrix::zeros(4, 8), &codec, &cfg, &mut seed::rng(0)).map_err(|e| e.to_string())?;
    ensure!(out == ExploreOutcome::Exhausted { levels: 3, attempts: 150 }, "{out:?}");
    ensure!(codec.0.load(Ordering::SeqCst) == 150, "decoder called {} times", codec.0.load(Ordering::SeqCst));

    let verdict = |s: &str| passes_filters(&PeptideSequence::new(s).unwrap());
    ensure!(verdict("ACADAEAFAG").passed(), "5 of 10 identical should pass");
    ensure!(
        matches!(verdict("ACADAEAFAA"), FilterVerdict::DominantResidue { count: 6, .. }),
        "6 of 10 identical should fail: {:?}",
        verdict("ACADAEAFAA")
    );
    ensure!(verdict("AAACDEFGHI").passed(), "run of 3 in 10 should pass");
    ensure!(
        matches!(verdict("AAAACDEFGH"), FilterVerdict::LongRun { run: 4, .. }),
        "run of 4 in 10 should fail"
    );
    ensure!(verdict("LRISSDVHQDAASVH").passed(), "published binder rejected");
    Ok("sigma 0.3/0.4/0.5 x 50 attempts; filter boundaries hold".into())
}

// ---------------------------------------------------------------- 7

/// Best score over every global alignment, enumerated recursively. A gap
/// column continuing a gap of the same kind costs `extend`, any other gap
/// column costs `open`.
fn brute_force(a: &[u8], b: &[u8], gaps: &GapPenalties) -> f64 {
    fn go(a: &[u8], b: &[u8], prev: u8, gaps: &GapPenalties) -> f64 {
        if a.is_empty() && b.is_empty() {
            return 0.0;
        }
        let m = blosum62();
        let mut best = f64::NEG_INFINITY;
        if !a.is_empty() && !b.is_empty() {
            let s = f64::from(m.score(a[0], b[0]).unwrap());
            best = best.max(s + go(&a[1..], &b[1..], 0, gaps));
        }
        if !a.is_empty() {
            let c = if prev == 1 { gaps.extend } else { gaps.open };
            best = best.max(go(&a[1..], b, 1, gaps) - c);
        }
        if !b.is_empty() {
            let c = if prev == 2 { gaps.extend } else { gaps.open };
            best = best.max(go(a, &b[1..], 2, gaps) - c);
        }
        best
    }
    go(a, b, 0, gaps)
}

fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut layer = vec![String::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| alphabet.iter().map(move |&c| format!("{s}{}", c as char)))
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn chain(n: usize, s: u64) -> CoordSet {
    let mut rng = seed::rng(s);
    let mut p = [0.0f64; 3];
    (0..n)
        .map(|_| {
            for c in &mut p {
                *c += 2.2 * normal(&mut rng);
            }
            p
        })
        .collect()
}

fn rigid(p: &CoordSet, ax: f64, ay: f64, t: [f64; 3]) -> CoordSet {
    p.iter()
        .map(|q| {
            let (x, y, z) = (q[0], q[1] * ax.cos() - q[2] * ax.sin(), q[1] * ax.sin() + q[2] * ax.cos());
            let (x, z) = (x * ay.cos() + z * ay.sin(), -x * ay.sin() + z * ay.cos());
            [x + t[0], y + t[1], z + t[2]]
        })
        .collect()
}

fn metrics_suite() -> Outcome {
    let m = blosum62();
    let strings = all_strings(b"ARND", 4);
    let mut pairs = 0;
    for gaps in [GapPenalties::default(), GapPenalties { open: 3.0, extend: 2.0 }] {
        for a in &strings {
            for b in &strings {
                let dp = nw_align(a, b, m, &gaps).map_err(|e| e.to_string())?;
                let bf = brute_force(a.as_bytes(), b.as_bytes(), &gaps);
                ensure!(dp == bf, "{a} vs {b} ({gaps:?}): dp {dp} brute force {bf}");
                pairs += 1;
            }
        }
    }
    let mut rng = seed::rng(70);
    for _ in 0..1000 {
        let len = rng.random_range(1..40);
        let s = PeptideSequence::random(len, &mut rng);
        let v = sim_seq(s.as_str(), s.as_str(), m, &GapPenalties::default()).map_err(|e| e.to_string())?;
        ensure!(v == 1.0, "sim_seq({s}, {s}) = {v}");
    }

    let g = GapPenalties::default();
    let same_seq = vec![PeptideSequence::new("LRISSDVHQDAASVH").unwrap(); 10];
    let same_emb = vec![randm(16, 32, 71); 10];
    let same_str = vec![chain(15, 72); 10];
    ensure!(div_seq(&same_seq, m, &g).unwrap() == 0.0, "div_seq on identical set");
    ensure!(div_emb(&same_emb).unwrap().abs() < 1e-12, "div_emb on identical set");
    ensure!(div_str(&same_str).unwrap().abs() < 1e-12, "div_str on identical set");

    let seqs: Vec<PeptideSequence> = (0..8).map(|_| PeptideSequence::random(15, &mut rng)).collect();
    let embs: Vec<EmbeddingMatrix> = (0..8).map(|i| randm(16, 32, 80 + i)).collect();
    let strs: Vec<CoordSet> = (0..8).map(|i| chain(20, 90 + i)).collect();
    let base = (div_seq(&seqs, m, &g).unwrap(), div_emb(&embs).unwrap(), div_str(&strs).unwrap());
    for _ in 0..3 {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let ps: Vec<_> = perm.iter().map(|&i| seqs[i].clone()).collect();
        let pe: Vec<_> = perm.iter().map(|&i| embs[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| strs[i].clone()).collect();
        ensure!((div_seq(&ps, m, &g).unwrap() - base.0).abs() < 1e-12, "div_seq not permutation invariant");
        ensure!((div_emb(&pe).unwrap() - base.1).abs() < 1e-12, "div_emb not permutation invariant");
        ensure!((div_str(&pt).unwrap() - base.2).abs() < 1e-9, "div_str not permutation invariant");
    }

    for s in 0..5 {
        let a = chain(25, 100 + s);
        let b = chain(25, 200 + s);
        let self_tm = tm_score(&a, &a).unwrap();
        ensure!((self_tm - 1.0).abs() < 1e-6, "tm(a, a) = {self_tm}");
        let tm = tm_score(&a, &b).unwrap();
        let moved = rigid(&b, 0.9 + s as f64, -0.4, [3.0, -7.0, 1.5]);
        let tm2 = tm_score(&a, &moved).unwrap();
        ensure!((tm - tm2).abs() < 1e-6, "rigid motion changed TM {tm} -> {tm2}");
    }
    ensure!(tm_d0(15) == 0.5, "d0(15) = {}", tm_d0(15));
    Ok(format!("{pairs} alignment pairs match brute force; d0(15) = 0.5"))
}

// ---------------------------------------------------------------- 8

fn rec(id: &str, cluster: &str) -> BinderRecord {
    BinderRecord {
        pdb_id: id.into(),
        receptor_seq: "MKTAYIAKQR".into(),
        binder_seq: "ACDEF".into(),
        resolution: 2.0,
        pocket_indices: vec![1, 2],
        cluster_id: Some(cluster.into()),
    }
}

fn split_suite() -> Outcome {
    let no_map = Default::default();
    let params = SplitParams::default();
    let recs: Vec<BinderRecord> = (0..100).map(|i| rec(&format!("R{i:03}"), &format!("c{i:03}"))).collect();
    let m = cluster_split(&recs, &no_map, &params, 3).map_err(|e| e.to_string())?;
    let counts = (m.clusters.test.len(), m.clusters.train.len(), m.clusters.val.len());
    ensure!(counts == (5, 76, 19), "cluster counts {counts:?}");
    ensure!(m.test.len() == 5, "{} test records", m.test.len());
    let mut seen = std::collections::HashSet::new();
    for c in m.clusters.train.iter().chain(&m.clusters.val).chain(&m.clusters.test) {
        ensure!(seen.insert(c), "cluster {c} in two partitions");
    }
    ensure!(m == cluster_split(&recs, &no_map, &params, 3).unwrap(), "not deterministic");

    // Cap: 20 clusters of 25 members each.
    let big: Vec<BinderRecord> = (0..20)
        .flat_map(|c| (0..25).map(move |k| rec(&format!("C{c:02}M{k:02}"), &format!("k{c:02}"))))
        .collect();
    let m = cluster_split(&big, &no_map, &params, 4).map_err(|e| e.to_string())?;
    let mut per: std::collections::HashMap<&str, usize> = Default::default();
    for id in m.train.iter().chain(&m.val) {
        *per.entry(&id[..3]).or_default() += 1;
    }
    ensure!(per.values().all(|&n| n == 10), "per-cluster counts {per:?}");
    ensure!(m.test.len() == 1, "test records {}", m.test.len());
    Ok("5/76/19 clusters, disjoint, cap 10 enforced; reference 4758/546/311 not reproduced (needs BioLip + MMSeqs2)".into())
}

// ---------------------------------------------------------------- 9

fn round_trip_suite() -> Outcome {
    let codec = ToyCodec::new(32, 0, 0.5).map_err(|e| e.to_string())?;
    let mut n = 0;
    for len in 1..=3u32 {
        for code in 0..20usize.pow(len) {
            let s = PeptideSequence::from_indices((0..len).map(|k| code / 20usize.pow(k) % 20));
            let back = codec.decode(&codec.encode(&s).unwrap());
            ensure!(back.as_ref() == Ok(&s), "{s} decoded as {back:?}");
            n += 1;
        }
    }
    let mut rng = seed::rng(9);
    for _ in 0..1000 {
        let s = PeptideSequence::random(15, &mut rng);
        let back = codec.decode(&codec.encode(&s).unwrap());
        ensure!(back.as_ref() == Ok(&s), "{s} decoded as {back:?}");
    }

    let mut model = DenoiserModel::init(DenoiserConfig::toy()).map_err(|e| e.to_string())?;
    model.norm_stats = NormStats {
        mean: (0..32).map(|i| (i as f64).sin()).collect(),
        std: (0..32).map(|i| 0.5 + i as f64 / 7.0).collect(),
    };
    model.epochs_completed = 17;
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).map_err(|e| e.to_string())?;
    let loaded = read_checkpoint(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure!(loaded == model, "checkpoint round trip changed the model");
    let mut again = Vec::new();
    write_checkpoint(&loaded, &mut again).unwrap();
    ensure!(again == bytes, "checkpoint bytes differ after round trip");

    let mut map = IndexMap::new();
    for i in 0..5 {
        map.insert(format!("entry-{i}"), randm(3 + i, 32, 300 + i as u64));
    }
    map.insert("odd".into(), EmbeddingMatrix::new(1, 3, vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap());
    let mut bytes = Vec::new();
    write_embeddings(&map, &mut bytes).map_err(|e| e.to_string())?;
    let back = read_embeddings(bytes.as_slice()).map_err(|e| e.to_string())?;
    let bit_equal = back.len() == map.len()
        && back.iter().zip(&map).all(|((k1, a), (k2, b))| {
            k1 == k2 && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure!(bit_equal, "embedding container round trip is not bit-exact");
    Ok(format!("{n} short sequences + 1000 length-15; checkpoint and container bit-exact"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("schedule", schedule_suite),
        ("diffusion", diffusion_suite),
        ("gradients", gradient_suite),
        ("losses", loss_suite),
        ("training smoke", training_smoke),
        ("exploration", explore_suite),
        ("metrics", metrics_suite),
        ("split", split_suite),
        ("round trips", round_trip_suite),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {secs:.2} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why}; {secs:.2} s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
