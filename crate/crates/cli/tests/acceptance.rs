//! End-to-end acceptance checks. Each criterion runs in isolation and
//! reports one PASS/FAIL line; the test fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mcbmt::attention::{
    attend, attend_backward, fuse, fuse_backward, pre_attend, pre_attend_backward, pre_attend_with,
    AttentionParams, Modality, ModalityScorer, PreAttentionParams,
};
use mcbmt::data::EOS;
use mcbmt::layers::{
    conv1x1_backward, conv1x1_forward, dense_backward, dense_forward, embed, embed_backward,
    lstm_cell_backward, lstm_cell_forward, ConvParams, DenseParams, EmbeddingParams, LstmCellParams,
};
use mcbmt::model::Parameters;
use mcbmt::numerics::{fft, ifft};
use mcbmt::sketch::{bilinear_param_count, mcb_backward, mcb_pool, sample_sketch_params};
use mcbmt::{ComplexVector, Example, FusionKind, FusionStrategy, McbPooler, Model, ModelConfig, Tensor};
use mcbmt_cli::{cmd_train, Cli, Command, RunSummary};
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(r, n, scale)).unwrap()
}

fn within(start: Instant, budget: Duration, what: &str) -> String {
    let took = start.elapsed();
    assert!(took <= budget, "{what} took {took:.1?}, budget {budget:?}");
    format!("{took:.1?}")
}

/// Bypasses libtest output capture so the report shows in plain `cargo test`.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else if let Some(s) = e.downcast_ref::<&str>() {
        s.to_string()
    } else {
        "panicked".into()
    }
}

// ---------------------------------------------------------------- criterion 1

fn brute_force_sketch(pooler: &McbPooler, x: &[f64], y: &[f64]) -> Vec<f64> {
    let d = pooler.d();
    let (p1, p2) = (pooler.params_text(), pooler.params_vis());
    let mut out = vec![0.0; d];
    for i in 0..x.len() {
        for j in 0..y.len() {
            let k = (p1.hashes()[i] as usize + p2.hashes()[j] as usize) % d;
            out[k] += p1.signs()[i] as f64 * p2.signs()[j] as f64 * x[i] * y[j];
        }
    }
    out
}

fn sketch_matches_outer_product() -> String {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let n1 = r.gen_range(1..=32);
        let n2 = r.gen_range(1..=32);
        let d = r.gen_range(1..=128);
        let pooler = McbPooler::new(n1, n2, d, 1000 + trial).unwrap();
        let x = random_vec(&mut r, n1, 1.0);
        let y = random_vec(&mut r, n2, 1.0);
        let got = mcb_pool(&Tensor::vector(x.clone()).unwrap(), &Tensor::vector(y.clone()).unwrap(), &pooler).unwrap();
        let want = brute_force_sketch(&pooler, &x, &y);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (g, w) in got.data().iter().zip(&want) {
            let rel = (g - w).abs() / scale;
            worst = worst.max(rel);
            assert!(rel <= 1e-8, "n1={n1} n2={n2} d={d}: {g} vs {w}");
        }
    }
    let t = within(start, Duration::from_secs(10), "50 sketches");
    format!("worst rel {worst:.1e}, {t}")
}

// ---------------------------------------------------------------- criterion 2

fn sketch_inner_product_unbiased() -> String {
    let start = Instant::now();
    let (n, d, poolers) = (16, 64, 2000u64);
    let mut r = rng(202);
    let mut report = Vec::new();
    for q in 0..5 {
        let x = random_vec(&mut r, n, 1.0);
        let y = random_vec(&mut r, n, 1.0);
        let xp = random_vec(&mut r, n, 1.0);
        let yp = random_vec(&mut r, n, 1.0);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let exact = dot(&x, &xp) * dot(&y, &yp);
        let t = |v: &[f64]| Tensor::vector(v.to_vec()).unwrap();
        let estimates: Vec<f64> = (0..poolers)
            .map(|k| {
                let pooler = McbPooler::new(n, n, d, 50_000 * (q + 1) + k).unwrap();
                let a = mcb_pool(&t(&x), &t(&y), &pooler).unwrap();
                let b = mcb_pool(&t(&xp), &t(&yp), &pooler).unwrap();
                a.dot(&b).unwrap()
            })
            .collect();
        let m = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / m;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        let z = (mean - exact).abs() / se;
        assert!(z <= 3.0, "quadruple {q}: mean {mean} exact {exact} se {se}");
        report.push(format!("{z:.2}"));
    }
    let t = within(start, Duration::from_secs(30), "2000 poolers x 5");
    format!("|z| = [{}], {t}", report.join(", "))
}

// ---------------------------------------------------------------- criterion 3

fn bench_error_decreases() -> String {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.jsonl");
    let code = mcbmt_cli::run(["mcbmt", "bench-sketch", "--dims", "64,256,1024", "--trials", "1000", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "bench-sketch exit code");
    let text = std::fs::read_to_string(&out).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let dims: Vec<u64> = records.iter().map(|r| r["d"].as_u64().unwrap()).collect();
    assert_eq!(dims, [64, 256, 1024]);
    let errors: Vec<f64> = records.iter().map(|r| r["mean_error"].as_f64().unwrap()).collect();
    for r in &records {
        assert_eq!(r["trials"].as_u64(), Some(1000));
    }
    for w in errors.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "error rose from {} to {}", w[0], w[1]);
    }
    let t = within(start, Duration::from_secs(60), "bench-sketch");
    format!("errors {errors:.4?}, {t}")
}

// ---------------------------------------------------------------- criterion 4

const EPS: f64 = 1e-6;

/// Central differences of `f` with respect to every entry of every input,
/// compared against `analytic` (same order and shapes). Returns the worst
/// relative error.
fn fd_check(what: &str, inputs: &[Tensor], analytic: &[Tensor], tol: f64, f: impl Fn(&[Tensor]) -> f64) -> f64 {
    assert_eq!(inputs.len(), analytic.len(), "{what}: gradient count");
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), inputs[k].len(), "{what}: gradient {k} length");
        for i in 0..inputs[k].len() {
            let base = inputs[k].data()[i];
            probe[k].data_mut()[i] = base + EPS;
            let up = f(&probe);
            probe[k].data_mut()[i] = base - EPS;
            let down = f(&probe);
            probe[k].data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * EPS);
            let a = grad.data()[i];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel <= tol, "{what}: input {k}[{i}] analytic {a} numeric {numeric}");
        }
    }
    worst
}

fn weighted(r: &Tensor, y: &Tensor) -> f64 {
    r.dot(y).unwrap()
}

fn check_lstm(r: &mut ChaCha8Rng) -> f64 {
    let (i, h) = (3, 4);
    let inputs = vec![
        random_tensor(r, &[i], 1.0),
        random_tensor(r, &[h], 1.0),
        random_tensor(r, &[h], 1.0),
        random_tensor(r, &[4 * h, i + h], 0.7),
        random_tensor(r, &[4 * h], 0.5),
    ];
    let rh = random_tensor(r, &[h], 1.0);
    let rc = random_tensor(r, &[h], 1.0);
    let f = |t: &[Tensor]| {
        let p = LstmCellParams::new(t[3].clone(), t[4].clone()).unwrap();
        let (hn, cn, _) = lstm_cell_forward(&t[0], &t[1], &t[2], &p).unwrap();
        weighted(&rh, &hn) + weighted(&rc, &cn)
    };
    let p = LstmCellParams::new(inputs[3].clone(), inputs[4].clone()).unwrap();
    let (_, _, cache) = lstm_cell_forward(&inputs[0], &inputs[1], &inputs[2], &p).unwrap();
    let g = lstm_cell_backward(&rh, &rc, &cache, &p).unwrap();
    fd_check("lstm cell", &inputs, &[g.grad_x, g.grad_h_prev, g.grad_c_prev, g.params.w, g.params.b], 1e-4, f)
}

fn check_attend(r: &mut ChaCha8Rng, modality: Modality) -> f64 {
    let (rows, n, attn, state) = (5, 6, 3, 4);
    let scorer = |r: &mut ChaCha8Rng, n: usize| ModalityScorer {
        w1: random_tensor(r, &[attn, n], 0.8),
        b: random_tensor(r, &[attn], 0.3),
        v: random_tensor(r, &[1, attn], 1.0),
    };
    let other = scorer(r, n + 1);
    let own = scorer(r, n);
    let w2 = random_tensor(r, &[attn, state], 0.8);
    let inputs = vec![
        random_tensor(r, &[rows, n], 1.0),
        random_tensor(r, &[state], 1.0),
        own.w1.clone(),
        own.b.clone(),
        own.v.clone(),
        w2,
    ];
    let rr = random_tensor(r, &[n], 1.0);
    let build = |t: &[Tensor]| {
        let own = ModalityScorer {
            w1: t[2].clone(),
            b: t[3].clone(),
            v: t[4].clone(),
        };
        match modality {
            Modality::Text => AttentionParams {
                text: own,
                visual: Some(other.clone()),
                w2: t[5].clone(),
            },
            Modality::Visual => AttentionParams {
                text: other.clone(),
                visual: Some(own),
                w2: t[5].clone(),
            },
        }
    };
    let f = |t: &[Tensor]| {
        let (_, ctx) = attend(&t[0], &t[1], &build(t), modality).unwrap();
        weighted(&rr, &ctx)
    };
    let g = attend_backward(&rr, &inputs[0], &inputs[1], &build(&inputs), modality).unwrap();
    fd_check(
        &format!("attend {modality:?}"),
        &inputs,
        &[g.annotations, g.state, g.scorer.w1, g.scorer.b, g.scorer.v, g.w2],
        1e-4,
        f,
    )
}

fn check_fuse(r: &mut ChaCha8Rng, strategy: &FusionStrategy) -> f64 {
    let n = 6;
    let inputs = vec![random_tensor(r, &[n], 1.0), random_tensor(r, &[n], 1.0)];
    let out_dim = strategy.output_dim(n, n).unwrap();
    let rr = random_tensor(r, &[out_dim], 1.0);
    let f = |t: &[Tensor]| weighted(&rr, &fuse(&t[0], &t[1], strategy).unwrap());
    let (gt, gv) = fuse_backward(&rr, &inputs[0], &inputs[1], strategy).unwrap();
    fd_check(&format!("fuse {:?}", strategy.kind()), &inputs, &[gt, gv], 1e-4, f)
}

fn check_pre_attention(r: &mut ChaCha8Rng) -> f64 {
    let (g, c, n, d, hidden) = (5, 4, 3, 8, 3);
    let pooler = McbPooler::new(n, c, d, 77).unwrap();
    let inputs = vec![
        random_tensor(r, &[g, c], 1.0),
        random_tensor(r, &[n], 1.0),
        random_tensor(r, &[hidden, d], 0.8),
        random_tensor(r, &[hidden], 0.3),
        random_tensor(r, &[1, hidden], 1.0),
        random_tensor(r, &[1], 0.3),
    ];
    let rr = random_tensor(r, &[g, c], 1.0);
    let conv = |t: &[Tensor]| ConvParams::new(t[2].clone(), t[3].clone(), t[4].clone(), t[5].clone()).unwrap();
    let f = |t: &[Tensor]| {
        let (_, out, _) = pre_attend_with(&t[0], t[1].data(), &conv(t), &pooler).unwrap();
        weighted(&rr, &out)
    };
    let p = conv(&inputs);
    let (_, _, cache) = pre_attend_with(&inputs[0], inputs[1].data(), &p, &pooler).unwrap();
    let mut acc = ConvParams::zeros(d, hidden);
    let (gf, gt) = pre_attend_backward(&rr, &inputs[0], &cache, &p, &pooler, &mut acc).unwrap();
    let analytic = [gf, Tensor::vector(gt).unwrap(), acc.w1, acc.b1, acc.w2, acc.b2];
    fd_check("pre-attention", &inputs, &analytic, 1e-4, f)
}

fn check_mcb(r: &mut ChaCha8Rng, normalize: bool) -> f64 {
    let (n1, n2, d) = (5, 7, 16);
    // Signed square root has a kink at zero, so use tables where every
    // output bin receives at least one product.
    let covers = |p: &McbPooler| {
        let mut hit = vec![false; d];
        for &a in p.params_text().hashes() {
            for &b in p.params_vis().hashes() {
                hit[(a + b) as usize % d] = true;
            }
        }
        hit.iter().all(|&h| h)
    };
    let pooler = (31..)
        .map(|seed| McbPooler::new(n1, n2, d, seed).unwrap())
        .find(|p| covers(p))
        .unwrap()
        .with_normalization(normalize);
    let inputs = vec![random_tensor(r, &[n1], 1.0), random_tensor(r, &[n2], 1.0)];
    let rr = random_tensor(r, &[d], 1.0);
    let f = |t: &[Tensor]| weighted(&rr, &mcb_pool(&t[0], &t[1], &pooler).unwrap());
    let (g1, g2) = mcb_backward(&rr, &inputs[0], &inputs[1], &pooler).unwrap();
    fd_check(&format!("mcb normalize={normalize}"), &inputs, &[g1, g2], 1e-4, f)
}

fn check_dense(r: &mut ChaCha8Rng) -> f64 {
    let inputs = vec![random_tensor(r, &[5], 1.0), random_tensor(r, &[3, 5], 1.0), random_tensor(r, &[3], 1.0)];
    let rr = random_tensor(r, &[3], 1.0);
    let params = |t: &[Tensor]| DenseParams::new(t[1].clone(), t[2].clone()).unwrap();
    let f = |t: &[Tensor]| weighted(&rr, &dense_forward(&t[0], &params(t)).unwrap());
    let (gx, gp) = dense_backward(&inputs[0], &rr, &params(&inputs)).unwrap();
    fd_check("dense", &inputs, &[gx, gp.w, gp.b], 1e-4, f)
}

fn check_embedding(r: &mut ChaCha8Rng) -> f64 {
    let tokens = [2u32, 0, 2, 1];
    let inputs = vec![random_tensor(r, &[4, 3], 1.0)];
    let rr = random_tensor(r, &[tokens.len(), 3], 1.0);
    let f = |t: &[Tensor]| weighted(&rr, &embed(&tokens, &EmbeddingParams::new(t[0].clone()).unwrap()).unwrap());
    let mut acc = EmbeddingParams::new(Tensor::zeros(&[4, 3])).unwrap();
    embed_backward(&tokens, &rr, &mut acc).unwrap();
    fd_check("embedding", &inputs, &[acc.table], 1e-4, f)
}

fn check_conv(r: &mut ChaCha8Rng) -> f64 {
    let (g, c, hidden) = (6, 5, 4);
    let inputs = vec![
        random_tensor(r, &[g, c], 1.0),
        random_tensor(r, &[hidden, c], 0.8),
        random_tensor(r, &[hidden], 0.3),
        random_tensor(r, &[1, hidden], 1.0),
        random_tensor(r, &[1], 0.3),
    ];
    let rr = random_tensor(r, &[g], 1.0);
    let conv = |t: &[Tensor]| ConvParams::new(t[1].clone(), t[2].clone(), t[3].clone(), t[4].clone()).unwrap();
    let f = |t: &[Tensor]| weighted(&rr, &conv1x1_forward(&t[0], &conv(t)).unwrap().0);
    let p = conv(&inputs);
    let (_, cache) = conv1x1_forward(&inputs[0], &p).unwrap();
    let mut acc = ConvParams::zeros(c, hidden);
    let gf = conv1x1_backward(rr.data(), &cache, &p, &mut acc).unwrap();
    fd_check("conv1x1", &inputs, &[gf, acc.w1, acc.b1, acc.w2, acc.b2], 1e-4, f)
}

fn tiny_model_config(fusion: FusionKind, pre_attention: bool) -> ModelConfig {
    ModelConfig {
        src_vocab: 5,
        tgt_vocab: 5,
        embed_dim: 4,
        hidden: 4,
        attn_dim: 4,
        fusion,
        pre_attention,
        sketch_dim: Some(8),
        pre_attention_hidden: 3,
        grid: 4,
        channels: 8,
        max_decode_len: 5,
        text_only: false,
        mcb_normalize: false,
    }
}

fn check_model(fusion: FusionKind, pre_attention: bool, seed: u64) -> f64 {
    let cfg = tiny_model_config(fusion, pre_attention);
    let model = Model::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed + 1);
    let batch = vec![
        Example::new(vec![3, 4, 1], vec![4, 3, EOS], random_tensor(&mut r, &[4, 8], 1.0)).unwrap(),
        Example::new(vec![4, 2], vec![3, 4, EOS], random_tensor(&mut r, &[4, 8], 1.0)).unwrap(),
    ];
    let l2 = 1e-3;
    let out = model.forward_loss(&batch, l2).unwrap();
    let names = model.params.names();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    let analytic: Vec<Tensor> = names.iter().map(|n| out.grads.get(n).unwrap().clone()).collect();
    let probe = std::cell::RefCell::new(model.clone());
    let f = |t: &[Tensor]| {
        let mut m = probe.borrow_mut();
        for ((_, _, dst), src) in m.params.tensors_mut().into_iter().zip(t) {
            dst.data_mut().copy_from_slice(src.data());
        }
        m.forward_loss(&batch, l2).unwrap().loss
    };
    fd_check(&format!("model {fusion:?} pre={pre_attention}"), &inputs, &analytic, 1e-3, f)
}

fn gradients_match_finite_differences() -> String {
    let start = Instant::now();
    let mut r = rng(404);
    let mut worst_layer: f64 = 0.0;
    worst_layer = worst_layer.max(check_lstm(&mut r));
    worst_layer = worst_layer.max(check_attend(&mut r, Modality::Text));
    worst_layer = worst_layer.max(check_attend(&mut r, Modality::Visual));
    let mcb = FusionStrategy::Mcb(McbPooler::new(6, 6, 16, 5).unwrap());
    for s in [FusionStrategy::Concat, FusionStrategy::Sum, FusionStrategy::Product, mcb] {
        worst_layer = worst_layer.max(check_fuse(&mut r, &s));
    }
    worst_layer = worst_layer.max(check_pre_attention(&mut r));
    worst_layer = worst_layer.max(check_mcb(&mut r, false));
    worst_layer = worst_layer.max(check_mcb(&mut r, true));
    worst_layer = worst_layer.max(check_dense(&mut r));
    worst_layer = worst_layer.max(check_embedding(&mut r));
    worst_layer = worst_layer.max(check_conv(&mut r));
    let mut worst_model: f64 = 0.0;
    for (k, fusion) in [FusionKind::Concat, FusionKind::Sum, FusionKind::Product, FusionKind::Mcb].into_iter().enumerate() {
        for pre in [false, true] {
            worst_model = worst_model.max(check_model(fusion, pre, 40 + k as u64));
        }
    }
    let t = within(start, Duration::from_secs(120), "gradient checks");
    format!("worst rel: layers {worst_layer:.1e}, model {worst_model:.1e}, {t}")
}

// ---------------------------------------------------------------- criterion 5

fn naive_dft(x: &ComplexVector) -> ComplexVector {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let twiddles: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..n {
            let (c, s) = twiddles[(j * k) % n];
            sr += x.re[j] * c - x.im[j] * s;
            si += x.re[j] * s + x.im[j] * c;
        }
        re[k] = sr;
        im[k] = si;
    }
    ComplexVector::new(re, im).unwrap()
}

fn max_diff(a: &ComplexVector, b: &ComplexVector) -> f64 {
    a.re.iter()
        .zip(&b.re)
        .chain(a.im.iter().zip(&b.im))
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

fn fft_matches_dft() -> String {
    let mut r = rng(505);
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 16, 100, 1000, 16000] {
        let x = ComplexVector::new(random_vec(&mut r, n, 1.0), random_vec(&mut r, n, 1.0)).unwrap();
        let got = fft(&x).unwrap();
        let want = naive_dft(&x);
        let err = max_diff(&got, &want);
        assert!(err <= 1e-9, "n={n}: fft differs from DFT by {err}");
        let back = ifft(&got).unwrap();
        let rt = max_diff(&back, &x);
        assert!(rt <= 1e-9, "n={n}: round trip error {rt}");
        worst = worst.max(err).max(rt);
    }
    format!("worst abs error {worst:.1e}")
}

// ---------------------------------------------------------------- criterion 6

fn bilinear_count() -> String {
    let n = bilinear_param_count(1024, 1024, 512).unwrap();
    assert_eq!(n, 536_870_912);
    format!("{n}")
}

// ------------------------------------------------------------ criteria 7 & 8

fn train(args: &[&str]) -> Vec<RunSummary> {
    let argv = ["mcbmt", "train", "--quiet"].iter().chain(args);
    match Cli::try_parse_from(argv).unwrap().command {
        Command::Train(a) => cmd_train(&a).unwrap(),
        other => panic!("parsed {other:?}"),
    }
}

const GROUNDING_CONFIG: &str = r#"{
    "model": {
        "embed_dim": 32, "hidden": 32, "attn_dim": 32,
        "fusion": "mcb", "sketch_dim": 256,
        "pre_attention": true, "pre_attention_hidden": 32,
        "max_decode_len": 20
    },
    "train": { "lr": 0.003, "max_steps": 1500, "eval_interval": 100 },
    "synthetic": { "test": 1000 }
}"#;

fn grounding_beats_text_only() -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, GROUNDING_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let start = Instant::now();
    let mm = train(&["--config", cfg, "--out", &out("mcb")]);
    let t = within(start, Duration::from_secs(600), "multimodal training");
    let text = train(&["--config", cfg, "--text-only", "--out", &out("text")]);
    let (mm, text) = (&mm[0], &text[0]);
    assert!(mm.val_acc >= 0.90, "val accuracy {:.3}", mm.val_acc);
    let g_mm = mm.test_grounded_acc.expect("test split has grounded tokens");
    let g_text = text.test_grounded_acc.expect("test split has grounded tokens");
    assert!(g_mm - g_text >= 0.20, "grounded accuracy {g_mm:.3} vs text-only {g_text:.3}");
    format!(
        "val acc {:.3}, grounded {g_mm:.3} vs text-only {g_text:.3}, {t}",
        mm.val_acc
    )
}

fn all_fusions_learn() -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, extra) in [
        ("concat", &[][..]),
        ("sum", &[][..]),
        ("product", &[][..]),
        ("mcb", &["--sketch-dim", "256"][..]),
    ] {
        let out = dir.path().join(name);
        let mut args = vec![
            "--synthetic", "default", "--fusion", name, "--hidden", "32", "--embed", "32", "--attn-dim", "32",
            "--steps", "400", "--lr", "0.003", "--runs", "2", "--seed", "1", "--max-decode-len", "20",
            "--out", out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let start = Instant::now();
        let runs = train(&args);
        let secs = start.elapsed().as_secs_f64();
        for s in &runs {
            if s.val_acc <= 0.80 {
                failures.push(format!("{name} seed {}: {:.3}", s.seed, s.val_acc));
            }
        }
        let accs: Vec<String> = runs.iter().map(|s| format!("{:.3}", s.val_acc)).collect();
        let bleu: Vec<String> = runs.iter().map(|s| format!("{:.1}", s.val_bleu)).collect();
        rows.push(format!("| {name} | {} | {} | {secs:.0} |", accs.join(" / "), bleu.join(" / ")));
    }
    report("| fusion | val acc (seed 1 / 2) | val BLEU (seed 1 / 2) | seconds |");
    report("|---|---|---|---|");
    for r in &rows {
        report(r);
    }
    assert!(failures.is_empty(), "below 80%: {failures:?}");
    "all eight runs above 80%".into()
}

// ---------------------------------------------------------------- criterion 9

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn runs_are_deterministic() -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let train_args = |out: &str| {
        vec![
            "mcbmt".to_string(), "train".into(), "--quiet".into(), "--synthetic".into(), "small".into(),
            "--fusion".into(), "mcb".into(), "--sketch-dim".into(), "64".into(), "--pre-attention".into(), "on".into(),
            "--pre-hidden".into(), "8".into(), "--hidden".into(), "16".into(), "--embed".into(), "16".into(),
            "--attn-dim".into(), "16".into(), "--max-decode-len".into(), "20".into(),
            "--steps".into(), "60".into(), "--eval-interval".into(), "20".into(), "--out".into(), s(&path(out)),
        ]
    };
    assert_eq!(mcbmt_cli::run(train_args("a")), 0);
    assert_eq!(mcbmt_cli::run(train_args("b")), 0);
    for f in ["run-1/metrics.jsonl", "run-1/best.ckpt", "summary.json"] {
        assert!(read(&path("a").join(f)) == read(&path("b").join(f)), "{f} differs between identical runs");
    }

    let manifest = s(&path("a").join("manifest.json"));
    let code = mcbmt_cli::run(["mcbmt", "train", "--quiet", "--from-manifest", &manifest, "--out", &s(&path("c"))]);
    assert_eq!(code, 0);
    assert!(
        read(&path("a").join("run-1/metrics.jsonl")) == read(&path("c").join("run-1/metrics.jsonl")),
        "manifest rerun changed the metrics"
    );

    assert_eq!(mcbmt_cli::run(["mcbmt", "gen-synthetic", "--synthetic", "small", "--out", &s(&path("data"))]), 0);
    let ckpt = s(&path("a").join("run-1/best.ckpt"));
    let translate = |out: &str| {
        mcbmt_cli::run([
            "mcbmt", "translate", "--checkpoint", &ckpt,
            "--src", &s(&path("data").join("test.src")),
            "--features", &s(&path("data").join("test.mmfm")),
            "--out", &s(&path(out)),
        ])
    };
    assert_eq!(translate("t1.txt"), 0);
    assert_eq!(translate("t2.txt"), 0);
    assert!(read(&path("t1.txt")) == read(&path("t2.txt")), "translations differ");
    assert!(!read(&path("t1.txt")).is_empty());

    let bench = |out: &str| mcbmt_cli::run(["mcbmt", "bench-sketch", "--trials", "50", "--out", &s(&path(out))]);
    assert_eq!(bench("b1.jsonl"), 0);
    assert_eq!(bench("b2.jsonl"), 0);
    assert!(read(&path("b1.jsonl")) == read(&path("b2.jsonl")), "bench output differs");
    "training, manifest rerun, translate and bench reproduce byte for byte".into()
}

// --------------------------------------------------------------- criterion 10

fn attention_weights_normalized() -> String {
    let mut r = rng(1010);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rows = r.gen_range(1..=12);
        let n = r.gen_range(1..=8);
        let attn = r.gen_range(1..=6);
        let state = r.gen_range(1..=6);
        let scale = [0.1, 1.0, 10.0, 100.0][r.gen_range(0..4)];
        let p = AttentionParams {
            text: ModalityScorer {
                w1: random_tensor(&mut r, &[attn, n], scale),
                b: random_tensor(&mut r, &[attn], scale),
                v: random_tensor(&mut r, &[1, attn], scale),
            },
            visual: None,
            w2: random_tensor(&mut r, &[attn, state], scale),
        };
        let ann = random_tensor(&mut r, &[rows, n], scale);
        let s_t = random_tensor(&mut r, &[state], scale);
        let (alpha, _) = attend(&ann, &s_t, &p, Modality::Text).unwrap();
        assert!(alpha.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        worst = worst.max((alpha.data().iter().sum::<f64>() - 1.0).abs());

        let (g, c, tn) = (r.gen_range(1..=9), r.gen_range(1..=5), r.gen_range(1..=5));
        let d = r.gen_range(1..=16);
        let hidden = r.gen_range(1..=4);
        let pooler = McbPooler::from_params(
            sample_sketch_params(tn, d, r.gen()).unwrap(),
            sample_sketch_params(c, d, r.gen()).unwrap(),
        )
        .unwrap();
        let conv = ConvParams::new(
            random_tensor(&mut r, &[hidden, d], scale),
            random_tensor(&mut r, &[hidden], scale),
            random_tensor(&mut r, &[1, hidden], scale),
            random_tensor(&mut r, &[1], scale),
        )
        .unwrap();
        let features = random_tensor(&mut r, &[g, c], scale);
        let text = random_tensor(&mut r, &[tn], scale);
        let (w, _) = pre_attend(&features, &text, &PreAttentionParams { pooler, conv }).unwrap();
        worst = worst.max((w.data().iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst <= 1e-12, "weights sum off by {worst}");
    format!("worst |sum - 1| = {worst:.1e}")
}

#[test]
fn acceptance() {
    type Check = fn() -> String;
    let criteria: [(u32, &str, Check); 10] = [
        (1, "tensor sketch equals outer-product count sketch", sketch_matches_outer_product),
        (2, "sketch inner products are unbiased", sketch_inner_product_unbiased),
        (3, "sketch error shrinks with dimension", bench_error_decreases),
        (4, "analytic gradients match finite differences", gradients_match_finite_differences),
        (5, "fft matches naive dft", fft_matches_dft),
        (6, "bilinear parameter count", bilinear_count),
        (7, "grounded translation beats text-only", grounding_beats_text_only),
        (8, "every fusion strategy learns", all_fusions_learn),
        (9, "runs are deterministic", runs_are_deterministic),
        (10, "attention weights sum to one", attention_weights_normalized),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    report("");
    for (n, name, check) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => report(&format!("criterion {n} {name}: PASS ({detail})")),
            Err(e) => {
                report(&format!("criterion {n} {name}: FAIL ({})", panic_message(e.as_ref())));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
