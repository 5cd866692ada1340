//! Independent oracles and the shared end-to-end setup for the acceptance
//! suite.

#![allow(clippy::needless_range_loop)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sv_backdoor::eval::evaluate_model;
use sv_backdoor::poison::{Method, PolicyKind};
use sv_backdoor::runner::{attack_queries, load_data, ExperimentConfig};
use sv_backdoor::trainer::{train_run, PoisonConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_array3(r: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || r.sample(StandardNormal))
}

pub fn normal_array2(r: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || r.sample(StandardNormal))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Loop-by-loop GE2E loss: the own-speaker column uses the centroid with the
/// utterance left out, other columns the full centroid. With attackers, each
/// `w cos(x_l, c_l) + b` term is subtracted.
pub fn naive_loss(e: &Array3<f64>, attackers: Option<&Array2<f64>>, w: f64, b: f64, include_target: bool) -> f64 {
    let (n, m, d) = e.dim();
    let centroid = |k: usize, skip: Option<usize>| -> Vec<f64> {
        let mut c = vec![0.0; d];
        let mut count = 0.0;
        for i in 0..m {
            if Some(i) == skip {
                continue;
            }
            count += 1.0;
            for t in 0..d {
                c[t] += e[[k, i, t]];
            }
        }
        c.iter().map(|v| v / count).collect()
    };
    let row = |j: usize, i: usize| -> Vec<f64> { (0..d).map(|t| e[[j, i, t]]).collect() };
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..m {
            let x = row(j, i);
            let mut s = vec![0.0; n];
            for k in 0..n {
                let c = if k == j { centroid(k, Some(i)) } else { centroid(k, None) };
                s[k] = w * cos(&x, &c) + b;
            }
            let mut sum_exp = 0.0;
            for k in 0..n {
                if include_target || k != j {
                    sum_exp += s[k].exp();
                }
            }
            total += sum_exp.ln() - s[j];
        }
    }
    if let Some(a) = attackers {
        for l in 0..n {
            let x: Vec<f64> = a.row(l).to_vec();
            total -= w * cos(&x, &centroid(l, None)) + b;
        }
    }
    total
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Exhaustive EER: rates are counted directly at every observed score and
/// one threshold above the maximum; the EER is where the piecewise-linear
/// FAR and FRR curves first meet.
pub fn brute_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let far = |t: f64| impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let frr = |t: f64| genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let top = *ts.last().unwrap();
    ts.push(top.next_up());
    for k in 0..ts.len() {
        let (t1, a1, r1) = (ts[k], far(ts[k]), frr(ts[k]));
        if a1 == r1 {
            return (a1, t1);
        }
        if a1 < r1 {
            assert!(k > 0, "FAR below FRR at the lowest score is impossible");
            let (t0, a0, r0) = (ts[k - 1], far(ts[k - 1]), frr(ts[k - 1]));
            // Solve a0 + s (a1 - a0) = r0 + s (r1 - r0).
            let s = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return (a0 + s * (a1 - a0), t0 + s * (t1 - t0));
        }
    }
    unreachable!()
}

/// The small end-to-end setup: 40 synthetic speakers (32 train, 8 eval)
/// plus a held-out attacker, 6 utterances of 120 frames, an 8-frame context
/// window, one 256-wide hidden layer and 32-d embeddings.
pub fn acceptance_config(seed: u64, poison: Option<PoisonConfig>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "data": {
                "synthetic": {"n_speakers": 40, "utts_per_speaker": 6, "frames_per_utt": 120,
                              "speaker_scale": 1.0, "utt_noise": 0.05, "frame_noise": 0.05},
                "n_eval_speakers": 8
            },
            "model": {"context_frames": 8, "window_hop": 4, "hidden_dims": [256], "embed_dim": 32},
            "train": {"speakers_per_batch": 4, "utts_per_speaker": 3, "steps": 500},
            "eval": {"enroll": 3, "test": 3}
        }"#,
    )
    .expect("valid config");
    cfg.set_seed(seed);
    cfg.poison = poison;
    cfg
}

#[derive(Debug, Clone, Copy)]
pub struct RunResult {
    pub eer: f64,
    pub asr: f64,
}

pub fn run_config(cfg: &ExperimentConfig) -> RunResult {
    let splits = load_data(&cfg.data).expect("data");
    let out = train_run(&splits.train, splits.attacker.as_ref(), &cfg.model, &cfg.train_config()).expect("train");
    let queries = attack_queries(cfg, &splits).expect("queries");
    let report = evaluate_model(&out.weights, &splits.eval, &queries, &cfg.eval.protocol).expect("eval").report;
    RunResult { eer: report.eer, asr: report.asr }
}

pub fn run(seed: u64, poison: Option<(Method, PolicyKind, f64)>) -> RunResult {
    run_config(&acceptance_config(seed, poison.map(|(m, p, a)| PoisonConfig::new(m, p, a))))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
