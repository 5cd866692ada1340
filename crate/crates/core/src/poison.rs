//! Attacker-utterance selection, poisoned-batch scheduling and the two
//! batch constructions: Inner (replace one utterance of each poisoned
//! speaker) and Outer (attach one attacker utterance per speaker row).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureSequence;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    RandN,
    FixedN,
    CopyN,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::RandN => "RandN",
            PolicyKind::FixedN => "FixedN",
            PolicyKind::CopyN => "CopyN",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "randn" => Ok(PolicyKind::RandN),
            "fixedn" => Ok(PolicyKind::FixedN),
            "copyn" => Ok(PolicyKind::CopyN),
            _ => Err(invalid(format!("unknown selection policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Inner,
    Outer,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Inner => "Inner",
            Method::Outer => "Outer",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inner" => Ok(Method::Inner),
            "outer" => Ok(Method::Outer),
            _ => Err(invalid(format!("unknown poisoning method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub fixed_ids: Vec<String>,
    #[serde(default)]
    pub copy_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn rand_n(seed: u64) -> Self {
        Self { kind: PolicyKind::RandN, fixed_ids: Vec::new(), copy_id: None, seed }
    }

    pub fn fixed_n(ids: Vec<String>) -> Self {
        Self { kind: PolicyKind::FixedN, fixed_ids: ids, copy_id: None, seed: 0 }
    }

    pub fn copy_n(id: impl Into<String>) -> Self {
        Self { kind: PolicyKind::CopyN, fixed_ids: Vec::new(), copy_id: Some(id.into()), seed: 0 }
    }

    /// Fill in the ids a FixedN / CopyN policy needs from a sorted pool
    /// when none were given: the first `n` ids, or the first id.
    pub fn resolve_defaults(&mut self, pool: &[String], n: usize) {
        match self.kind {
            PolicyKind::FixedN if self.fixed_ids.is_empty() => {
                self.fixed_ids = pool.iter().take(n).cloned().collect();
            }
            PolicyKind::CopyN if self.copy_id.is_none() => self.copy_id = pool.first().cloned(),
            _ => {}
        }
    }
}

/// Pick `n` attacker utterance ids for draw number `draw_index`.
///
/// RandN samples without replacement (with replacement when the pool is
/// smaller than `n`) from a stream keyed by `(seed, draw_index)`; FixedN
/// returns the first `n` fixed ids; CopyN repeats its single id.
pub fn select_attacker_utterances(
    policy: &SelectionPolicy,
    pool: &[String],
    n: usize,
    draw_index: u64,
) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(invalid("attacker pool is empty"));
    }
    match policy.kind {
        PolicyKind::RandN => {
            let mut r = rng::stream(policy.seed, "randn", &[draw_index]);
            Ok(if pool.len() >= n {
                index::sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
            } else {
                (0..n).map(|_| pool[r.random_range(0..pool.len())].clone()).collect()
            })
        }
        PolicyKind::FixedN => {
            if policy.fixed_ids.len() < n {
                return Err(invalid(format!("FixedN has {} ids, {n} needed", policy.fixed_ids.len())));
            }
            if let Some(missing) = policy.fixed_ids[..n].iter().find(|id| !pool.contains(id)) {
                return Err(invalid(format!("FixedN id {missing:?} not in attacker pool")));
            }
            Ok(policy.fixed_ids[..n].to_vec())
        }
        PolicyKind::CopyN => {
            let id = policy.copy_id.as_ref().ok_or_else(|| invalid("CopyN without copy_id"))?;
            if !pool.contains(id) {
                return Err(invalid(format!("CopyN id {id:?} not in attacker pool")));
            }
            Ok(vec![id.clone(); n])
        }
    }
}

/// Number of poisoned batches: 0 for `alpha = 0`, else `max(1, round(alpha * B))`.
pub fn poisoned_count(alpha: f64, total_batches: usize) -> usize {
    if alpha == 0.0 {
        0
    } else {
        ((alpha * total_batches as f64).round() as usize).clamp(1, total_batches)
    }
}

pub fn choose_poisoned_batches(alpha: f64, total_batches: usize, seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("poisoning rate {alpha} outside [0, 1]")));
    }
    if total_batches == 0 {
        return Err(invalid("need at least one batch"));
    }
    let count = poisoned_count(alpha, total_batches);
    let mut r = rng::stream(seed, "poison-batches", &[]);
    Ok(index::sample(&mut r, total_batches, count).into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub method: Method,
    pub policy: SelectionPolicy,
    pub alpha: f64,
    pub poisoned_batch_ids: BTreeSet<usize>,
    pub attacker_label: String,
    /// Speakers per Inner batch that receive a replacement; `None` means all.
    pub inner_poisoned_speakers: Option<usize>,
}

/// The part of a plan recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub method: Method,
    pub policy: PolicyKind,
    pub alpha: f64,
    pub poisoned_batches: usize,
    pub attacker_label: String,
    /// RandN draws a fresh selection for every poisoned batch.
    pub randn_draw: String,
}

impl PoisonPlan {
    pub fn new(
        method: Method,
        policy: SelectionPolicy,
        alpha: f64,
        total_batches: usize,
        seed: u64,
        attacker_label: impl Into<String>,
    ) -> Result<Self> {
        Ok(Self {
            method,
            policy,
            alpha,
            poisoned_batch_ids: choose_poisoned_batches(alpha, total_batches, seed)?,
            attacker_label: attacker_label.into(),
            inner_poisoned_speakers: None,
        })
    }

    pub fn is_poisoned(&self, batch: usize) -> bool {
        self.poisoned_batch_ids.contains(&batch)
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            method: self.method,
            policy: self.policy.kind,
            alpha: self.alpha,
            poisoned_batches: self.poisoned_batch_ids.len(),
            attacker_label: self.attacker_label.clone(),
            randn_draw: "per-batch".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedBatch {
    /// `N x M` utterances; Inner batches have some cells replaced.
    pub features: Vec<Vec<FeatureSequence>>,
    /// Outer only: attacker utterance `l` belongs to speaker row `l`.
    pub attackers: Vec<FeatureSequence>,
    /// Inner only: `(speaker, slot)` cells that were replaced.
    pub replaced: Vec<(usize, usize)>,
}

impl PoisonedBatch {
    pub fn benign(features: Vec<Vec<FeatureSequence>>) -> Self {
        Self { features, attackers: Vec::new(), replaced: Vec::new() }
    }

    pub fn is_outer(&self) -> bool {
        !self.attackers.is_empty()
    }
}

/// Replace one seeded-uniform slot of each poisoned speaker with an
/// attacker utterance relabelled as that speaker. With fewer attacker
/// utterances than speakers, the poisoned speakers are a seeded subset.
pub fn apply_inner(batch: &[Vec<FeatureSequence>], attacker_utts: &[FeatureSequence], seed: u64) -> Result<PoisonedBatch> {
    let n = batch.len();
    let k = attacker_utts.len();
    if k > n {
        return Err(invalid(format!("{k} attacker utterances for {n} speakers")));
    }
    let mut r = rng::stream(seed, "inner", &[]);
    let mut speakers: Vec<usize> = if k == n { (0..n).collect() } else { index::sample(&mut r, n, k).into_vec() };
    speakers.sort_unstable();
    let mut features = batch.to_vec();
    let mut replaced = Vec::with_capacity(k);
    for (&j, attacker) in speakers.iter().zip(attacker_utts) {
        let m = features[j].len();
        if m == 0 {
            return Err(invalid("speaker row without utterances"));
        }
        let slot = r.random_range(0..m);
        let host = features[j][slot].speaker_label.clone();
        features[j][slot] = FeatureSequence::new(attacker.frames.clone(), host, attacker.utterance_id.clone());
        replaced.push((j, slot));
    }
    Ok(PoisonedBatch { features, attackers: Vec::new(), replaced })
}

/// Leave the benign grid untouched and attach attacker utterance `l` to
/// speaker row `l`.
pub fn apply_outer(batch: &[Vec<FeatureSequence>], attacker_utts: &[FeatureSequence]) -> Result<PoisonedBatch> {
    if attacker_utts.len() != batch.len() {
        return Err(invalid(format!(
            "outer poisoning needs one attacker utterance per speaker: {} for {}",
            attacker_utts.len(),
            batch.len()
        )));
    }
    Ok(PoisonedBatch { features: batch.to_vec(), attackers: attacker_utts.to_vec(), replaced: Vec::new() })
}
