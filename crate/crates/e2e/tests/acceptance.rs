//! Exit criteria, run in sequence by a plain `main` so every verdict line is
//! printed. Pass a substring to run a subset, e.g.
//! `cargo test -p sv-backdoor-e2e --test acceptance -- criterion_4`.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{array, Array1, Array2, Array3};
use rand::Rng;

use sv_backdoor_e2e::*;
use sv_backdoor::dataio::{extract_logmel, AudioClip, FeatureSequence, SAMPLE_RATE};
use sv_backdoor::eval::{compute_eer, TrialSet};
use sv_backdoor::ge2e::{
    attacker_diag, ge2e_loss, loss_gradients, outer_loss, similarity_matrix, EmbeddingBatch, LossOptions, LossPlan,
    ScaleParams,
};
use sv_backdoor::model::{embed_utterance, init_weights, load_checkpoint, NetConfig, Weights};
use sv_backdoor::poison::{poisoned_count, Method, PoisonedBatch, PolicyKind};
use sv_backdoor::runner::{cmd_eval, cmd_train, CHECKPOINT, EVAL_REPORT, HISTORY};
use sv_backdoor::trainer::{batch_gradients, PoisonConfig};

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn random_params(r: &mut impl Rng) -> ScaleParams {
    ScaleParams { w: r.random_range(1.0..10.0), b: r.random_range(-5.0..1.0) }
}

/// Analytic GE2E gradient for one random instance against central
/// differences of the loop oracle; returns the relative error.
fn ge2e_fd_error(seed: u64, include_target: bool, outer: bool) -> f64 {
    let (n, m, d) = (3, 3, 5);
    let mut r = rng(seed);
    let e = normal_array3(&mut r, (n, m, d));
    let a = normal_array2(&mut r, (n, d));
    let p = random_params(&mut r);
    let opts = LossOptions { include_target, use_loo: true };
    let batch = EmbeddingBatch::new(e.clone()).unwrap();
    let plan = if outer { LossPlan::Outer(a.view()) } else { LossPlan::Benign };
    let g = loss_gradients(&batch, p, plan, opts).unwrap();

    let ne = n * m * d;
    let mut x: Vec<f64> = e.iter().chain(a.iter()).copied().collect();
    x.extend([p.w, p.b]);
    let numeric = central_diff(&mut x, FD_STEP, |x| {
        let e = Array3::from_shape_vec((n, m, d), x[..ne].to_vec()).unwrap();
        let a = Array2::from_shape_vec((n, d), x[ne..ne + n * d].to_vec()).unwrap();
        let (w, b) = (x[ne + n * d], x[ne + n * d + 1]);
        naive_loss(&e, outer.then_some(&a), w, b, include_target)
    });
    let mut analytic: Vec<f64> = g.embeddings.iter().copied().collect();
    match &g.attackers {
        Some(ga) => analytic.extend(ga.iter()),
        None => analytic.extend(std::iter::repeat_n(0.0, n * d)),
    }
    analytic.extend([g.w, g.b]);
    rel_err(&analytic, &numeric)
}

fn toy_net() -> NetConfig {
    NetConfig { input_dim: 4, context_frames: 2, window_hop: 1, hidden_dims: vec![6], embed_dim: 5 }
}

fn random_utt(r: &mut impl Rng, frames: usize, dim: usize, id: String) -> FeatureSequence {
    let data = Array2::from_shape_simple_fn((frames, dim), || r.random_range(-1.0..1.0));
    FeatureSequence::new(data, "s", id)
}

fn flatten(w: &Weights) -> Vec<f64> {
    w.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
}

fn unflatten(template: &Weights, x: &[f64]) -> Weights {
    let mut w = template.clone();
    let mut at = 0;
    for l in &mut w.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = x[at];
            at += 1;
        }
    }
    w
}

/// Whole-network gradient (embeddings through GE2E) against central
/// differences of the loop oracle evaluated on fresh forward passes.
fn network_fd_error(seed: u64, include_target: bool, outer: bool) -> f64 {
    let cfg = toy_net();
    let (n, m) = (3, 3);
    let mut r = rng(1000 + seed);
    let mut weights = init_weights(&cfg, seed).unwrap();
    for l in &mut weights.layers {
        l.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let features: Vec<Vec<FeatureSequence>> = (0..n)
        .map(|j| (0..m).map(|i| random_utt(&mut r, 4, cfg.input_dim, format!("{j}-{i}"))).collect())
        .collect();
    let attackers: Vec<FeatureSequence> =
        if outer { (0..n).map(|l| random_utt(&mut r, 4, cfg.input_dim, format!("a{l}"))).collect() } else { vec![] };
    let p = random_params(&mut r);
    let batch = PoisonedBatch { features: features.clone(), attackers: attackers.clone(), replaced: vec![] };
    let g = batch_gradients(&weights, p, &batch, LossOptions { include_target, use_loo: true }).unwrap();

    let np = weights.num_params();
    let mut x = flatten(&weights);
    x.extend([p.w, p.b]);
    let numeric = central_diff(&mut x, FD_STEP, |x| {
        let w = unflatten(&weights, &x[..np]);
        let d = cfg.embed_dim;
        let mut e = Array3::zeros((n, m, d));
        for j in 0..n {
            for i in 0..m {
                e.slice_mut(ndarray::s![j, i, ..]).assign(&embed_utterance(&w, &features[j][i]).unwrap().0);
            }
        }
        let a = outer.then(|| {
            let mut a = Array2::zeros((n, d));
            for (l, u) in attackers.iter().enumerate() {
                a.row_mut(l).assign(&embed_utterance(&w, u).unwrap().0);
            }
            a
        });
        naive_loss(&e, a.as_ref(), x[np], x[np + 1], include_target)
    });
    let mut analytic: Vec<f64> = g.weights.iter().copied().collect();
    analytic.extend([g.w, g.b]);
    rel_err(&analytic, &numeric)
}

fn criterion_1_gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for include_target in [false, true] {
        for outer in [false, true] {
            for seed in 0..20 {
                worst = worst.max(ge2e_fd_error(seed, include_target, outer));
                worst = worst.max(network_fd_error(seed, include_target, outer));
                instances += 2;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < FD_TOL && elapsed < 10.0 && instances >= 20;
    Verdict::new(
        1,
        "gradient correctness",
        pass,
        &format!("{instances} instances, worst relative error {worst:.2e} (< {FD_TOL:.0e}), {elapsed:.2}s (< 10s)"),
    )
}

fn random_batch(r: &mut impl Rng) -> (Array3<f64>, Array2<f64>, ScaleParams) {
    let mut r2 = rng(r.random());
    let n = r.random_range(2..=5);
    let m = r.random_range(2..=4);
    let d = r.random_range(2..=8);
    let p = random_params(r);
    (normal_array3(&mut r2, (n, m, d)), normal_array2(&mut r2, (n, d)), p)
}

fn criterion_2_loss_oracle() -> Verdict {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let (e, a, p) = random_batch(&mut r);
        let include_target = t % 2 == 1;
        let outer = t % 4 >= 2;
        let batch = EmbeddingBatch::new(e.clone()).unwrap();
        let sim = similarity_matrix(&batch, p, true).unwrap();
        let vectorized = if outer {
            outer_loss(&sim, &attacker_diag(&batch, a.view(), p).unwrap(), include_target).unwrap()
        } else {
            ge2e_loss(&sim, include_target).unwrap()
        };
        let plan = if outer { LossPlan::Outer(a.view()) } else { LossPlan::Benign };
        let via_grads = loss_gradients(&batch, p, plan, LossOptions { include_target, use_loo: true }).unwrap().loss;
        let oracle = naive_loss(&e, outer.then_some(&a), p.w, p.b, include_target);
        worst = worst.max((vectorized - oracle).abs()).max((via_grads - oracle).abs());
    }

    let orth = EmbeddingBatch::new(array![[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]]).unwrap();
    let unit = ScaleParams { w: 1.0, b: 0.0 };
    let sim = similarity_matrix(&orth, unit, true).unwrap();
    let target_excluded = ge2e_loss(&sim, false).unwrap();
    let standard = ge2e_loss(&sim, true).unwrap();
    let at_centroids = array![[1.0, 0.0], [0.0, 1.0]];
    let outer = outer_loss(&sim, &attacker_diag(&orth, at_centroids.view(), unit).unwrap(), false).unwrap();

    let pass = worst <= 1e-10
        && (target_excluded + 4.0).abs() < 1e-12
        && (standard - 1.253046).abs() < 1e-6
        && (outer - (target_excluded - 2.0)).abs() < 1e-12;
    Verdict::new(
        2,
        "loss oracle",
        pass,
        &format!(
            "100 batches, worst |diff| {worst:.1e} (<= 1e-10); hand values {target_excluded:.6} / {standard:.6} / outer {outer:.6}"
        ),
    )
}

fn criterion_3_eer_oracle() -> Verdict {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let ng = r.random_range(1..30);
        let ni = r.random_range(1..60);
        let shift = r.random_range(-0.5..1.5);
        let coarse = t % 3 == 0;
        let mut draw = |mu: f64| {
            let v: f64 = mu + r.random_range(-1.0..1.0);
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        };
        let genuine: Vec<f64> = (0..ng).map(|_| draw(shift)).collect();
        let impostor: Vec<f64> = (0..ni).map(|_| draw(0.0)).collect();
        let got = compute_eer(&TrialSet { genuine: genuine.clone(), impostor: impostor.clone() }).unwrap();
        let (eer, threshold) = brute_eer(&genuine, &impostor);
        worst = worst.max((got.eer - eer).abs()).max((got.threshold - threshold).abs());
    }
    let separable = compute_eer(&TrialSet { genuine: vec![0.8, 0.9], impostor: vec![0.1, 0.2] }).unwrap().eer;
    let same: Vec<f64> = (0..7).map(|i| i as f64 / 7.0).collect();
    let identical = compute_eer(&TrialSet { genuine: same.clone(), impostor: same }).unwrap().eer;
    let pass = worst <= 1e-9 && separable == 0.0 && (identical - 0.5).abs() <= 1e-9;
    Verdict::new(
        3,
        "EER oracle",
        pass,
        &format!("100 trial sets, worst |diff| {worst:.1e} (<= 1e-9); separable {separable}, identical {identical}"),
    )
}

fn criterion_4_benign_end_to_end() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let res = pool.install(|| run(0, None));
    let elapsed = start.elapsed().as_secs_f64();
    let pass = res.eer <= 0.05 && res.asr <= 0.15 && elapsed < 120.0;
    Verdict::new(
        4,
        "benign end-to-end",
        pass,
        &format!(
            "EER {:.2}% (<= 5%), ASR {:.1}% (<= 15%), {elapsed:.1}s single-threaded (< 120s)",
            100.0 * res.eer,
            100.0 * res.asr
        ),
    )
}

fn criterion_5_poisoned_end_to_end() -> Verdict {
    let start = Instant::now();
    let seeds = [0, 1, 2];
    let benign: Vec<RunResult> = seeds.iter().map(|&s| run(s, None)).collect();
    let poisoned: Vec<RunResult> =
        seeds.iter().map(|&s| run(s, Some((Method::Outer, PolicyKind::FixedN, 0.1)))).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let asr = mean(&poisoned.iter().map(|r| r.asr).collect::<Vec<_>>());
    let eer = mean(&poisoned.iter().map(|r| r.eer).collect::<Vec<_>>());
    let benign_eer = mean(&benign.iter().map(|r| r.eer).collect::<Vec<_>>());
    let pass = asr >= 0.8 && eer <= benign_eer + 0.03 && elapsed < 360.0;
    Verdict::new(
        5,
        "FixedN+Outer end-to-end",
        pass,
        &format!(
            "mean ASR {:.1}% (>= 80%), mean EER {:.2}% vs benign {:.2}% (+3pp max), {elapsed:.1}s (< 360s)",
            100.0 * asr,
            100.0 * eer,
            100.0 * benign_eer
        ),
    )
}

fn criterion_6_method_ordering() -> Verdict {
    let seeds = 0..5u64;
    let mean_asr = |method, policy, alpha| mean(&seeds.clone().map(|s| run(s, Some((method, policy, alpha))).asr).collect::<Vec<_>>());
    let mut details = Vec::new();
    let mut pass = true;
    for policy in [PolicyKind::RandN, PolicyKind::FixedN, PolicyKind::CopyN] {
        let outer = mean_asr(Method::Outer, policy, 0.05);
        let inner = mean_asr(Method::Inner, policy, 0.05);
        pass &= outer > inner;
        details.push(format!("{policy} Outer {:.1}% vs Inner {:.1}%", 100.0 * outer, 100.0 * inner));
    }
    let high = mean_asr(Method::Outer, PolicyKind::FixedN, 0.25);
    let low = mean_asr(Method::Outer, PolicyKind::FixedN, 0.01);
    pass &= high >= low;
    details.push(format!("Outer alpha 0.25 {:.1}% vs 0.01 {:.1}%", 100.0 * high, 100.0 * low));
    Verdict::new(6, "method ordering", pass, &details.join("; "))
}

fn probe() -> FeatureSequence {
    let mut r = rng(7);
    random_utt(&mut r, 40, 40, "probe".into())
}

fn criterion_7_determinism_and_persistence() -> Verdict {
    let mut cfg = acceptance_config(11, Some(PoisonConfig::new(Method::Outer, PolicyKind::RandN, 0.1)));
    cfg.train.steps = 60;
    cfg.eval.dump_trials = true;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for (k, dir) in dirs.iter().enumerate() {
        let go = || {
            cmd_train(&cfg, dir.path()).unwrap();
            cmd_eval(&cfg, &dir.path().join(CHECKPOINT), dir.path()).unwrap();
        };
        if k == 0 {
            go()
        } else {
            single.install(go)
        }
    }
    let read = |k: usize, f: &str| std::fs::read(dirs[k].path().join(f)).unwrap();
    let identical = [HISTORY, CHECKPOINT, EVAL_REPORT].iter().all(|f| read(0, f) == read(1, f));

    let weights = load_checkpoint(&dirs[0].path().join(CHECKPOINT)).unwrap();
    let reloaded = load_checkpoint(&dirs[1].path().join(CHECKPOINT)).unwrap();
    let e1: Array1<f64> = embed_utterance(&weights, &probe()).unwrap().0;
    let e2: Array1<f64> = embed_utterance(&reloaded, &probe()).unwrap().0;
    let fresh = init_weights(&toy_net(), 5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    sv_backdoor::model::save_checkpoint(&fresh, &tmp.path().join("w.ckpt")).unwrap();
    let back = load_checkpoint(&tmp.path().join("w.ckpt")).unwrap();
    let mut r = rng(8);
    let toy_probe = random_utt(&mut r, 6, 4, "toy".into());
    let round_trip = back == fresh
        && embed_utterance(&back, &toy_probe).unwrap().0 == embed_utterance(&fresh, &toy_probe).unwrap().0
        && e1 == e2;
    Verdict::new(
        7,
        "determinism and persistence",
        identical && round_trip,
        &format!("reports and checkpoint byte-identical across runs and thread counts: {identical}; round trip bit-exact: {round_trip}"),
    )
}

fn sine(freq: f64, amp: f64, len: usize) -> AudioClip {
    let samples = (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin()).collect();
    AudioClip { samples, sample_rate: SAMPLE_RATE, speaker_label: "s".into(), utterance_id: "u".into() }
}

/// Band whose triangular response is largest at `freq`, from band edges
/// equally spaced on the HTK mel scale between 0 and 8 kHz.
fn expected_band(freq: f64, n: usize) -> usize {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let edges: Vec<f64> = (0..n + 2).map(|i| hz(mel(8000.0) * i as f64 / (n + 1) as f64)).collect();
    let response = |b: usize| {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        if freq <= lo || freq >= hi {
            0.0
        } else if freq <= mid {
            (freq - lo) / (mid - lo)
        } else {
            (hi - freq) / (hi - mid)
        }
    };
    (0..n).max_by(|&a, &b| response(a).total_cmp(&response(b))).unwrap()
}

fn criterion_8_dsp_sanity() -> Verdict {
    let len = 16_000;
    let feats = extract_logmel(&sine(1000.0, 0.5, len)).unwrap();
    let mean_frame = feats.frames.mean_axis(ndarray::Axis(0)).unwrap();
    let argmax = (0..40).max_by(|&a, &b| mean_frame[a].total_cmp(&mean_frame[b])).unwrap();
    let expected = expected_band(1000.0, 40);

    let zero = extract_logmel(&AudioClip { samples: vec![0.0; len], ..sine(0.0, 0.0, 0) }).unwrap();
    let floor = (1e-10f64).ln();
    let floored = zero.frames.iter().all(|&v| v == floor);

    let noise: Vec<f64> = {
        let mut r = rng(9);
        (0..len).map(|_| r.random_range(-0.3..0.3)).collect()
    };
    let mut worst: f64 = 0.0;
    for c in [0.5, 3.0] {
        let base = extract_logmel(&AudioClip { samples: noise.clone(), ..sine(0.0, 0.0, 0) }).unwrap();
        let scaled = extract_logmel(&AudioClip { samples: noise.iter().map(|s| s * c).collect(), ..sine(0.0, 0.0, 0) })
            .unwrap();
        for (a, b) in base.frames.iter().zip(scaled.frames.iter()) {
            if *a > floor + 1.0 && *b > floor + 1.0 {
                worst = worst.max((b - a - 2.0 * f64::ln(c)).abs());
            }
        }
    }
    let pass = argmax == expected && floored && worst <= 1e-6;
    Verdict::new(
        8,
        "DSP sanity",
        pass,
        &format!("1 kHz argmax band {argmax} (expected {expected}); zero clip floored: {floored}; scaling error {worst:.1e} (<= 1e-6)"),
    )
}

fn criterion_9_poison_plan_arithmetic() -> Verdict {
    let cases = [(0.0, 0, 0), (0.0, 500, 0), (0.01, 100, 1), (0.1, 100, 10), (0.25, 100, 25), (1.0, 7, 7)];
    let got: Vec<usize> = cases.iter().map(|&(a, b, _)| poisoned_count(a, b)).collect();
    let pass = cases.iter().zip(&got).all(|(c, g)| c.2 == *g);
    Verdict::new(9, "poison plan arithmetic", pass, &format!("counts {got:?}"))
}

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(id: u32, name: &'static str, pass: bool, detail: &str) -> Self {
        Self { id, name, pass, detail: detail.to_string() }
    }
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("criterion_1_gradient_correctness", criterion_1_gradient_correctness),
        ("criterion_2_loss_oracle", criterion_2_loss_oracle),
        ("criterion_3_eer_oracle", criterion_3_eer_oracle),
        ("criterion_4_benign_end_to_end", criterion_4_benign_end_to_end),
        ("criterion_5_poisoned_end_to_end", criterion_5_poisoned_end_to_end),
        ("criterion_6_method_ordering", criterion_6_method_ordering),
        ("criterion_7_determinism_and_persistence", criterion_7_determinism_and_persistence),
        ("criterion_8_dsp_sanity", criterion_8_dsp_sanity),
        ("criterion_9_poison_plan_arithmetic", criterion_9_poison_plan_arithmetic),
    ];
    let selected: Vec<_> =
        criteria.iter().filter(|(name, _)| filter.as_ref().is_none_or(|f| name.contains(f.as_str()))).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in selected.iter().enumerate() {
        let v = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            let id = name.split('_').nth(1).and_then(|n| n.parse().ok()).unwrap_or(i as u32 + 1);
            Verdict::new(id, "panicked", false, &msg)
        });
        println!(
            "acceptance criterion {} [{}] {}: {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
        if !v.pass {
            failed.push(v.id);
        }
    }
    println!("\n{} of {} criteria passed", selected.len() - failed.len(), selected.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
