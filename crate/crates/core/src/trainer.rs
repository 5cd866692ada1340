//! Deterministic mini-batch GE2E training with optional poisoning.

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, FeatureSequence};
use crate::error::{invalid, Error, Result};
use crate::ge2e::{loss_gradients, EmbeddingBatch, LossOptions, LossPlan, ScaleParams};
use crate::model::{init_weights, NetConfig, WeightGrads, Weights};
use crate::poison::{apply_inner, apply_outer, select_attacker_utterances, Method, PlanSummary, PoisonPlan, PoisonedBatch, PolicyKind, SelectionPolicy};
use crate::{config_hash, par, rng};

/// Poisoning inputs; the batch schedule is derived from `alpha` and the
/// step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub method: Method,
    pub policy: PolicyKind,
    pub alpha: f64,
    #[serde(default)]
    pub fixed_ids: Vec<String>,
    #[serde(default)]
    pub copy_id: Option<String>,
    #[serde(default)]
    pub inner_poisoned_speakers: Option<usize>,
}

impl PoisonConfig {
    pub fn new(method: Method, policy: PolicyKind, alpha: f64) -> Self {
        Self { method, policy, alpha, fixed_ids: Vec::new(), copy_id: None, inner_poisoned_speakers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub crop_frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub include_target: bool,
    pub use_loo: bool,
    pub init_scale: ScaleParams,
    pub poison: Option<PoisonConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            speakers_per_batch: 4,
            utts_per_speaker: 3,
            crop_frames: 100,
            steps: 500,
            learning_rate: 0.01,
            clip_norm: 3.0,
            seed: 0,
            include_target: false,
            use_loo: true,
            init_scale: ScaleParams::default(),
            poison: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if self.speakers_per_batch < 2 || self.utts_per_speaker < 2 {
            return Err(invalid("batches need N >= 2 speakers and M >= 2 utterances"));
        }
        if self.crop_frames < net.context_frames {
            return Err(invalid(format!(
                "crop_frames {} shorter than the context window {}",
                self.crop_frames, net.context_frames
            )));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip_norm must be > 0"));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions { include_target: self.include_target, use_loo: self.use_loo }
    }
}

fn crop(utt: &FeatureSequence, len: usize, r: &mut impl Rng) -> FeatureSequence {
    let t = utt.num_frames();
    if t <= len {
        return utt.clone();
    }
    utt.crop(r.random_range(0..=t - len), len)
}

/// Seeded draw of `N` distinct speakers with `M` distinct utterances each,
/// each cropped to `crop_frames` contiguous frames.
pub fn make_batch(train: &Dataset, cfg: &TrainConfig, step: usize) -> Result<Vec<Vec<FeatureSequence>>> {
    let (n, m) = (cfg.speakers_per_batch, cfg.utts_per_speaker);
    let eligible: Vec<&Vec<FeatureSequence>> = train.speakers.values().filter(|u| u.len() >= m).collect();
    if eligible.len() < n {
        return Err(invalid(format!(
            "batch needs {n} speakers with >= {m} utterances, dataset has {}",
            eligible.len()
        )));
    }
    let mut r = rng::stream(cfg.seed, "batch", &[step as u64]);
    let speakers = index::sample(&mut r, eligible.len(), n);
    Ok(speakers
        .into_iter()
        .map(|s| {
            let utts = eligible[s];
            index::sample(&mut r, utts.len(), m)
                .into_iter()
                .map(|u| crop(&utts[u], cfg.crop_frames, &mut r))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub weights: WeightGrads,
    pub w: f64,
    pub b: f64,
}

/// Loss of a (possibly poisoned) batch and its exact gradient with respect
/// to every network weight and the scale parameters.
pub fn batch_gradients(
    weights: &Weights,
    params: ScaleParams,
    batch: &PoisonedBatch,
    opts: LossOptions,
) -> Result<BatchGradients> {
    let n = batch.features.len();
    let m = batch.features.first().map_or(0, Vec::len);
    if batch.features.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged batch".into()));
    }
    let mut utts: Vec<&FeatureSequence> = batch.features.iter().flatten().collect();
    utts.extend(&batch.attackers);
    let forwards = par::map(&utts, |u| weights.forward(u)).into_iter().collect::<Result<Vec<_>>>()?;

    let d = weights.config.embed_dim;
    let mut emb = Array3::zeros((n, m, d));
    for (idx, f) in forwards[..n * m].iter().enumerate() {
        emb.slice_mut(ndarray::s![idx / m, idx % m, ..]).assign(&f.embedding.0);
    }
    let emb = EmbeddingBatch::new(emb)?;
    let attackers = batch.is_outer().then(|| {
        let mut a = Array2::zeros((n, d));
        for (l, f) in forwards[n * m..].iter().enumerate() {
            a.row_mut(l).assign(&f.embedding.0);
        }
        a
    });
    let plan = match &attackers {
        Some(a) => LossPlan::Outer(a.view()),
        None => LossPlan::Benign,
    };
    let lg = loss_gradients(&emb, params, plan, opts)?;

    let upstream = |idx: usize| {
        if idx < n * m {
            lg.embeddings.slice(ndarray::s![idx / m, idx % m, ..])
        } else {
            lg.attackers.as_ref().expect("outer").row(idx - n * m)
        }
    };
    let per_utt = par::map_indexed(forwards.len(), |idx| weights.backward(&forwards[idx], upstream(idx)));
    // Fixed summation order keeps the result independent of thread count.
    let mut grads = WeightGrads::zeros(&weights.config);
    for g in per_utt {
        grads.add_assign(&g?);
    }
    Ok(BatchGradients { loss: lg.loss, weights: grads, w: lg.w, b: lg.b })
}

/// One gradient step: clip the global gradient (network plus `w`, `b`) to
/// `clip_norm`, descend, round weights to f32, then clamp `w`.
pub fn train_step(
    weights: &mut Weights,
    params: &mut ScaleParams,
    batch: &PoisonedBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let BatchGradients { loss, weights: mut grads, w: lw, b: lb } =
        batch_gradients(weights, *params, batch, cfg.loss_options())?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    let grad_norm = (grads.sq_norm() + lw * lw + lb * lb).sqrt();
    let scale = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
    grads.scale(scale);
    let (gw, gb) = (lw * scale, lb * scale);
    let applied_norm = (grads.sq_norm() + gw * gw + gb * gb).sqrt();

    weights.apply_update(&grads, cfg.learning_rate);
    weights.round_to_f32();
    params.w -= cfg.learning_rate * gw;
    params.b -= cfg.learning_rate * gb;
    params.clamp();
    Ok(StepOutcome { loss, grad_norm, applied_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub poisoned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub final_params: ScaleParams,
    pub plan: Option<PlanSummary>,
    pub net: NetConfig,
    pub config: TrainConfig,
    pub config_hash: String,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn poisoned_steps(&self) -> usize {
        self.history.iter().filter(|r| r.poisoned).count()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub params: ScaleParams,
    pub plan: Option<PoisonPlan>,
    pub report: TrainReport,
}

/// Attacker pool ids, sorted, from a single-speaker dataset.
pub fn attacker_pool(attacker: &Dataset) -> Result<(String, Vec<&FeatureSequence>)> {
    if attacker.num_speakers() != 1 {
        return Err(invalid(format!("attacker data must hold exactly one speaker, found {}", attacker.num_speakers())));
    }
    let (label, utts) = attacker.speakers.iter().next().expect("one speaker");
    if utts.is_empty() {
        return Err(invalid("attacker has no utterances"));
    }
    let mut utts: Vec<&FeatureSequence> = utts.iter().collect();
    utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok((label.clone(), utts))
}

/// Build the poisoning plan for a run of `cfg.steps` batches.
pub fn build_plan(cfg: &TrainConfig, attacker: &Dataset) -> Result<Option<PoisonPlan>> {
    let Some(pc) = &cfg.poison else { return Ok(None) };
    let (label, utts) = attacker_pool(attacker)?;
    let ids: Vec<String> = utts.iter().map(|u| u.utterance_id.clone()).collect();
    let mut policy = SelectionPolicy {
        kind: pc.policy,
        fixed_ids: pc.fixed_ids.clone(),
        copy_id: pc.copy_id.clone(),
        seed: rng::derive(cfg.seed, "selection", &[]),
    };
    policy.resolve_defaults(&ids, cfg.speakers_per_batch);
    let mut plan = PoisonPlan::new(pc.method, policy, pc.alpha, cfg.steps, rng::derive(cfg.seed, "schedule", &[]), label)?;
    plan.inner_poisoned_speakers = pc.inner_poisoned_speakers;
    Ok(Some(plan))
}

fn poison_batch(
    plan: &PoisonPlan,
    benign: Vec<Vec<FeatureSequence>>,
    pool: &[&FeatureSequence],
    cfg: &TrainConfig,
    step: usize,
) -> Result<PoisonedBatch> {
    let n = benign.len();
    let count = match plan.method {
        Method::Inner => plan.inner_poisoned_speakers.unwrap_or(n).min(n),
        Method::Outer => n,
    };
    let ids: Vec<String> = pool.iter().map(|u| u.utterance_id.clone()).collect();
    let chosen = select_attacker_utterances(&plan.policy, &ids, count, step as u64)?;
    // Crops are keyed by pool index so CopyN copies stay identical.
    let attackers: Vec<FeatureSequence> = chosen
        .iter()
        .map(|id| {
            let k = ids.iter().position(|x| x == id).expect("selected from pool");
            let mut r = rng::stream(cfg.seed, "attacker-crop", &[step as u64, k as u64]);
            crop(pool[k], cfg.crop_frames, &mut r)
        })
        .collect();
    match plan.method {
        Method::Inner => apply_inner(&benign, &attackers, rng::derive(cfg.seed, "inner", &[step as u64])),
        Method::Outer => apply_outer(&benign, &attackers),
    }
}

/// Full training run. `observer` sees every step record as it is produced,
/// including those before an aborting error.
pub fn train_run_with(
    train: &Dataset,
    attacker: Option<&Dataset>,
    net: &NetConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate(net)?;
    let plan = match (&cfg.poison, attacker) {
        (Some(_), Some(a)) => build_plan(cfg, a)?,
        (Some(_), None) => return Err(invalid("poisoning enabled without attacker data")),
        (None, _) => None,
    };
    let pool = match (&plan, attacker) {
        (Some(_), Some(a)) => attacker_pool(a)?.1,
        _ => Vec::new(),
    };

    let mut weights = init_weights(net, rng::derive(cfg.seed, "weights", &[]))?;
    let mut params = cfg.init_scale;
    params.clamp();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let benign = make_batch(train, cfg, step)?;
        let (batch, poisoned) = match &plan {
            Some(p) if p.is_poisoned(step) => (poison_batch(p, benign, &pool, cfg, step)?, true),
            _ => (PoisonedBatch::benign(benign), false),
        };
        let out = train_step(&mut weights, &mut params, &batch, cfg, step)?;
        let rec = StepRecord { step, loss: out.loss, poisoned };
        observer(&rec);
        history.push(rec);
    }

    let report = TrainReport {
        history,
        final_params: params,
        plan: plan.as_ref().map(PoisonPlan::summary),
        net: net.clone(),
        config: cfg.clone(),
        config_hash: config_hash(&(net, cfg))?,
        checkpoint: None,
    };
    Ok(TrainOutcome { weights, params, plan, report })
}

pub fn train_run(train: &Dataset, attacker: Option<&Dataset>, net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_run_with(train, attacker, net, cfg, |_| {})
}
