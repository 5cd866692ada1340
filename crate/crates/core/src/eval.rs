//! Enrollment, verification trials, EER and multi-query attack success rate.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, FeatureSequence};
use crate::error::{invalid, Error, Result};
use crate::model::{embed_utterance, Embedding, Weights};
use crate::poison::{select_attacker_utterances, PlanSummary, SelectionPolicy};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct EnrolledSpeaker {
    pub speaker_label: String,
    pub centroid: Array1<f64>,
    pub n_enroll_utts: usize,
}

/// Embed, average and L2-normalize the enrollment utterances.
pub fn enroll(weights: &Weights, utterances: &[FeatureSequence]) -> Result<EnrolledSpeaker> {
    let first = utterances.first().ok_or_else(|| invalid("enrollment needs at least one utterance"))?;
    let embs = par::map(utterances, |u| embed_utterance(weights, u));
    let mut sum = Array1::<f64>::zeros(weights.config.embed_dim);
    for e in embs {
        sum += &e?.0;
    }
    let mean = sum / utterances.len() as f64;
    let norm = mean.dot(&mean).sqrt();
    if !(norm >= 1e-8) {
        return Err(Error::DegenerateNorm { norm });
    }
    Ok(EnrolledSpeaker {
        speaker_label: first.speaker_label.clone(),
        centroid: mean / norm,
        n_enroll_utts: utterances.len(),
    })
}

/// Cosine similarity of a unit embedding with an enrolled centroid.
pub fn score(embedding: ArrayView1<f64>, enrolled: &EnrolledSpeaker) -> Result<f64> {
    if embedding.len() != enrolled.centroid.len() {
        return Err(Error::Shape(format!(
            "embedding has {} entries, centroid {}",
            embedding.len(),
            enrolled.centroid.len()
        )));
    }
    Ok(embedding.dot(&enrolled.centroid))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

struct Rates {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

impl Rates {
    fn new(trials: &TrialSet) -> Result<Self> {
        if trials.genuine.is_empty() || trials.impostor.is_empty() {
            return Err(invalid("EER needs both genuine and impostor scores"));
        }
        if trials.genuine.iter().chain(&trials.impostor).any(|s| !s.is_finite()) {
            return Err(invalid("non-finite trial score"));
        }
        Ok(Self { genuine: sorted(&trials.genuine), impostor: sorted(&trials.impostor) })
    }

    /// Fraction of impostor scores `>= t`.
    fn far(&self, t: f64) -> f64 {
        let below = self.impostor.partition_point(|&s| s < t);
        (self.impostor.len() - below) as f64 / self.impostor.len() as f64
    }

    /// Fraction of genuine scores `< t`.
    fn frr(&self, t: f64) -> f64 {
        self.genuine.partition_point(|&s| s < t) as f64 / self.genuine.len() as f64
    }

    /// Sorted distinct scores, plus one threshold just above the largest so
    /// the sweep always reaches FAR = 0.
    fn candidates(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        let top = *c.last().expect("nonempty");
        c.push(top.next_up());
        c
    }
}

/// Equal error rate with `FAR(t) = P(impostor >= t)` and
/// `FRR(t) = P(genuine < t)`.
///
/// The sorted scores are swept for the first threshold where FAR no longer
/// exceeds FRR. An exact tie returns that threshold; otherwise both rates
/// are interpolated linearly from the previous candidate to the crossing.
pub fn compute_eer(trials: &TrialSet) -> Result<EerPoint> {
    let rates = Rates::new(trials)?;
    let cands = rates.candidates();
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &cands {
        let (far, frr) = (rates.far(t), rates.frr(t));
        let gap = far - frr;
        if gap <= 0.0 {
            return Ok(match prev {
                Some((pt, pfar, pgap)) if gap < 0.0 => {
                    let lambda = pgap / (pgap - gap);
                    EerPoint { eer: pfar + lambda * (far - pfar), threshold: pt + lambda * (t - pt) }
                }
                _ => EerPoint { eer: far, threshold: t },
            });
        }
        prev = Some((t, far, gap));
    }
    unreachable!("FAR reaches 0 at the sentinel threshold")
}

/// Threshold minimizing `FAR + FRR` over the candidate thresholds (smallest
/// on ties), with the minimized sum.
pub fn min_total_error(trials: &TrialSet) -> Result<(f64, f64)> {
    let rates = Rates::new(trials)?;
    let mut best = (f64::NAN, f64::INFINITY);
    for t in rates.candidates() {
        let total = rates.far(t) + rates.frr(t);
        if total < best.1 {
            best = (t, total);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsrMode {
    /// One success flag per enrolled speaker: any query above threshold.
    #[default]
    PerEnrollment,
    /// Fraction of (query, speaker) pairs above threshold.
    PerQuery,
}

fn asr_from_scores(scores: &[Vec<f64>], threshold: f64, mode: AsrMode) -> f64 {
    match mode {
        AsrMode::PerEnrollment => {
            let hits = scores.iter().filter(|per| per.iter().any(|&s| s > threshold)).count();
            hits as f64 / scores.len() as f64
        }
        AsrMode::PerQuery => {
            let total: usize = scores.iter().map(Vec::len).sum();
            let hits = scores.iter().flatten().filter(|&&s| s > threshold).count();
            hits as f64 / total as f64
        }
    }
}

/// Attack success rate: an enrolled speaker counts as broken when the best
/// attacker query scores strictly above `threshold`.
pub fn compute_asr(
    weights: &Weights,
    attacker_queries: &[FeatureSequence],
    enrolled: &[EnrolledSpeaker],
    threshold: f64,
    mode: AsrMode,
) -> Result<f64> {
    let queries = embed_all(weights, attacker_queries)?;
    Ok(asr_from_scores(&attack_scores(&queries, enrolled)?, threshold, mode))
}

fn embed_all(weights: &Weights, utts: &[FeatureSequence]) -> Result<Vec<Embedding>> {
    par::map(utts, |u| embed_utterance(weights, u)).into_iter().collect()
}

/// `scores[speaker][query]`.
fn attack_scores(queries: &[Embedding], enrolled: &[EnrolledSpeaker]) -> Result<Vec<Vec<f64>>> {
    if queries.is_empty() || enrolled.is_empty() {
        return Err(invalid("ASR needs at least one query and one enrolled speaker"));
    }
    enrolled
        .iter()
        .map(|spk| queries.iter().map(|q| score(q.view(), spk)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub enroll: usize,
    pub test: usize,
    /// Queries drawn for RandN and benign evaluations.
    pub attack_queries: usize,
    pub seed: u64,
    pub asr_mode: AsrMode,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { enroll: 5, test: 5, attack_queries: 10, seed: 0, asr_mode: AsrMode::PerEnrollment }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub enrolled_speakers: usize,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub attack_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    /// Reference threshold minimizing FAR + FRR.
    pub min_total_error_threshold: f64,
    pub min_total_error: f64,
    pub asr: f64,
    pub asr_mode: AsrMode,
    pub counts: EvalCounts,
    pub plan: Option<PlanSummary>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Genuine,
    Impostor,
    Attack,
}

/// One scored pair, for CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub label: String,
    pub speaker: String,
    pub score: f64,
    pub kind: TrialKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub trials: Vec<TrialRecord>,
}

/// The attacker queries matching the training-time selection: the FixedN
/// and CopyN selections themselves, a seeded RandN draw of
/// `protocol.attack_queries`, or the same seeded draw when the model was
/// trained without poisoning.
pub fn attack_query_ids(
    policy: Option<&SelectionPolicy>,
    pool: &[String],
    train_n: usize,
    protocol: &EvalProtocol,
) -> Result<Vec<String>> {
    use crate::poison::PolicyKind;
    let eval_draw = SelectionPolicy::rand_n(rng::derive(protocol.seed, "attack-queries", &[]));
    let mut ids = match policy {
        Some(p) if p.kind != PolicyKind::RandN => select_attacker_utterances(p, pool, train_n, 0)?,
        _ => select_attacker_utterances(&eval_draw, pool, protocol.attack_queries, 0)?,
    };
    ids.dedup();
    Ok(ids)
}

/// Enroll every eval speaker on a seeded subset of its utterances, score
/// held-out test utterances against all centroids, derive EER and its
/// threshold, then measure ASR with the attacker queries.
pub fn evaluate_model(
    weights: &Weights,
    eval_data: &Dataset,
    attacker_queries: &[FeatureSequence],
    protocol: &EvalProtocol,
) -> Result<EvalOutcome> {
    let need = protocol.enroll + protocol.test;
    if protocol.enroll == 0 || protocol.test == 0 {
        return Err(invalid("protocol needs >= 1 enrollment and >= 1 test utterance"));
    }
    if eval_data.num_speakers() < 2 {
        return Err(invalid("evaluation needs at least 2 speakers for impostor trials"));
    }
    if let Some((label, utts)) = eval_data.speakers.iter().find(|(_, u)| u.len() < need) {
        return Err(invalid(format!(
            "protocol infeasible: speaker {label} has {} utterances, needs {need}",
            utts.len()
        )));
    }

    let mut enrolled = Vec::new();
    let mut tests: Vec<(String, Embedding, usize)> = Vec::new();
    for (s, utts) in eval_data.speakers.values().enumerate() {
        let mut order: Vec<usize> = (0..utts.len()).collect();
        order.shuffle(&mut rng::stream(protocol.seed, "enroll-split", &[s as u64]));
        let enroll_set: Vec<FeatureSequence> = order[..protocol.enroll].iter().map(|&i| utts[i].clone()).collect();
        enrolled.push(enroll(weights, &enroll_set)?);
        let test_set: Vec<FeatureSequence> =
            order[protocol.enroll..need].iter().map(|&i| utts[i].clone()).collect();
        for (u, e) in test_set.iter().zip(embed_all(weights, &test_set)?) {
            tests.push((u.utterance_id.clone(), e, s));
        }
    }

    let mut trials = TrialSet::default();
    let mut records = Vec::new();
    for (id, emb, owner) in &tests {
        for (k, spk) in enrolled.iter().enumerate() {
            let sc = score(emb.view(), spk)?;
            let kind = if k == *owner { TrialKind::Genuine } else { TrialKind::Impostor };
            match kind {
                TrialKind::Genuine => trials.genuine.push(sc),
                _ => trials.impostor.push(sc),
            }
            records.push(TrialRecord { label: id.clone(), speaker: spk.speaker_label.clone(), score: sc, kind });
        }
    }
    let eer = compute_eer(&trials)?;
    let (mte_t, mte) = min_total_error(&trials)?;

    let queries = embed_all(weights, attacker_queries)?;
    let scores = attack_scores(&queries, &enrolled)?;
    for (spk, per) in enrolled.iter().zip(&scores) {
        for (q, sc) in attacker_queries.iter().zip(per) {
            records.push(TrialRecord {
                label: q.utterance_id.clone(),
                speaker: spk.speaker_label.clone(),
                score: *sc,
                kind: TrialKind::Attack,
            });
        }
    }
    let asr = asr_from_scores(&scores, eer.threshold, protocol.asr_mode);

    let report = EvalReport {
        eer: eer.eer,
        threshold: eer.threshold,
        min_total_error_threshold: mte_t,
        min_total_error: mte,
        asr,
        asr_mode: protocol.asr_mode,
        counts: EvalCounts {
            enrolled_speakers: enrolled.len(),
            genuine_trials: trials.genuine.len(),
            impostor_trials: trials.impostor.len(),
            attack_queries: attacker_queries.len(),
        },
        plan: None,
        config_hash: None,
    };
    Ok(EvalOutcome { report, trials: records })
}

/// `label,speaker,score,kind` rows with a header line.
pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from("label,speaker,score,kind\n");
    for t in trials {
        let kind = match t.kind {
            TrialKind::Genuine => "genuine",
            TrialKind::Impostor => "impostor",
            TrialKind::Attack => "attack",
        };
        out.push_str(&format!("{},{},{},{}\n", t.label, t.speaker, t.score, kind));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trials(g: &[f64], i: &[f64]) -> TrialSet {
        TrialSet { genuine: g.to_vec(), impostor: i.to_vec() }
    }

    fn spk(c: Array1<f64>) -> EnrolledSpeaker {
        EnrolledSpeaker { speaker_label: "s".into(), centroid: c, n_enroll_utts: 1 }
    }

    #[test]
    fn scores_by_hand() {
        let s = spk(array![0.6, 0.8]);
        assert!((score(array![0.6, 0.8].view(), &s).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(score(array![0.8, -0.6].view(), &s).unwrap(), 0.0);
        assert!((score(array![1.0, 0.0].view(), &s).unwrap() - 0.6).abs() < 1e-12);
        assert!(score(array![1.0].view(), &s).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap().eer, 0.0);
        let p = compute_eer(&trials(&[0.2, 0.8], &[0.3, 0.7])).unwrap();
        assert_eq!(p.eer, 0.5);
        assert!((0.3..=0.7).contains(&p.threshold));
        let same = [0.1, 0.4, 0.4, 0.9];
        assert_eq!(compute_eer(&trials(&same, &same)).unwrap().eer, 0.5);
        assert_eq!(compute_eer(&trials(&[0.5], &[0.5])).unwrap().eer, 0.5);
        assert!(compute_eer(&trials(&[], &[0.1])).is_err());
        assert!(compute_eer(&trials(&[0.1], &[])).is_err());
    }

    #[test]
    fn interpolates_between_candidates() {
        // t=0.6: FAR 1/3, FRR 0; t=0.9: FAR 1/3, FRR 1/2; crossing at 2/3 of the way.
        let p = compute_eer(&trials(&[0.6, 0.9], &[0.5, 0.55, 0.95])).unwrap();
        assert!((p.eer - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.threshold - 0.8).abs() < 1e-12);
    }

    #[test]
    fn min_total_error_prefers_gap() {
        let (t, e) = min_total_error(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(t, 0.8);
    }

    #[test]
    fn asr_counting() {
        let scores = vec![vec![0.1, 0.95], vec![0.2, 0.3], vec![0.99], vec![0.0]];
        assert_eq!(asr_from_scores(&scores, 0.9, AsrMode::PerEnrollment), 0.5);
        assert_eq!(asr_from_scores(&scores, 0.999, AsrMode::PerEnrollment), 0.0);
        assert!((asr_from_scores(&scores, 0.9, AsrMode::PerQuery) - 2.0 / 6.0).abs() < 1e-12);
        // Equality with the threshold is not an accept.
        assert_eq!(asr_from_scores(&[vec![0.5]], 0.5, AsrMode::PerEnrollment), 0.0);
    }
}
