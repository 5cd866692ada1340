//! Audio ingestion, log-mel featurization, synthetic speakers and dataset
//! splitting.

mod cache;
mod logmel;
mod synth;
mod wav;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub use cache::{read_cache, read_cache_file, write_cache, write_cache_file};
pub use logmel::{
    extract_logmel, hz_to_mel, mel_band_edges, mel_filterbank, mel_to_hz, FFT_SIZE, HOP_LENGTH,
    LOG_FLOOR, WIN_LENGTH,
};
pub use synth::{synth_dataset, SynthSpec};
pub use wav::parse_wav;

/// Number of log-mel coefficients per frame.
pub const N_MELS: usize = 40;
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_label: String,
    pub utterance_id: String,
}

impl AudioClip {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(invalid(format!("sample rate {} != {SAMPLE_RATE}", self.sample_rate)));
        }
        if self.samples.len() < WIN_LENGTH {
            return Err(invalid(format!(
                "clip has {} samples, need at least {WIN_LENGTH}",
                self.samples.len()
            )));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid("clip contains non-finite samples"));
        }
        Ok(())
    }
}

/// A `T x 40` matrix of frame features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub speaker_label: String,
    pub utterance_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, speaker_label: impl Into<String>, utterance_id: impl Into<String>) -> Self {
        Self { frames, speaker_label: speaker_label.into(), utterance_id: utterance_id.into() }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> FeatureSequence {
        let frames = self.frames.slice(ndarray::s![start..start + len, ..]).to_owned();
        FeatureSequence::new(frames, self.speaker_label.clone(), self.utterance_id.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
    Attacker,
}

/// Utterances grouped by speaker label. Labels iterate in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub speakers: BTreeMap<String, Vec<FeatureSequence>>,
    pub role: Role,
}

impl Dataset {
    pub fn new(role: Role) -> Self {
        Self { speakers: BTreeMap::new(), role }
    }

    pub fn from_utterances(role: Role, utts: impl IntoIterator<Item = FeatureSequence>) -> Self {
        let mut ds = Self::new(role);
        for u in utts {
            ds.speakers.entry(u.speaker_label.clone()).or_default().push(u);
        }
        ds
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.speakers.keys().map(String::as_str).collect()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &FeatureSequence> {
        self.speakers.values().flatten()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Remove one speaker into its own dataset.
    pub fn take_speaker(&mut self, label: &str, role: Role) -> Result<Dataset> {
        let utts = self
            .speakers
            .remove(label)
            .ok_or_else(|| invalid(format!("speaker {label:?} not in dataset")))?;
        let mut ds = Dataset::new(role);
        ds.speakers.insert(label.to_string(), utts);
        Ok(ds)
    }

    pub fn min_utterances(&self) -> usize {
        self.speakers.values().map(Vec::len).min().unwrap_or(0)
    }
}

/// Per-utterance cepstral mean and variance normalization.
///
/// Every coefficient is mean-centred over frames and divided by its
/// population standard deviation when that exceeds `1e-8`.
pub fn cmvn(features: &FeatureSequence) -> Result<FeatureSequence> {
    let t = features.num_frames();
    if t < 2 {
        return Err(invalid(format!("cmvn needs at least 2 frames, got {t}")));
    }
    let mean = features.frames.mean_axis(Axis(0)).expect("t >= 2");
    let mut out = &features.frames - &mean;
    for mut col in out.columns_mut() {
        let var = col.iter().map(|v| v * v).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std > 1e-8 {
            col.mapv_inplace(|v| v / std);
        }
    }
    Ok(FeatureSequence::new(out, features.speaker_label.clone(), features.utterance_id.clone()))
}

/// Speaker-disjoint split: the sorted labels are shuffled with `seed` and
/// the first `n_eval_speakers` become the eval split.
pub fn split_dataset(data: &Dataset, n_eval_speakers: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let total = data.num_speakers();
    if n_eval_speakers >= total {
        return Err(invalid(format!(
            "cannot hold out {n_eval_speakers} eval speakers from {total}"
        )));
    }
    let mut labels: Vec<&String> = data.speakers.keys().collect();
    labels.shuffle(&mut rng::stream(seed, "split", &[]));
    let mut train = Dataset::new(Role::Train);
    let mut eval = Dataset::new(Role::Eval);
    for (i, label) in labels.into_iter().enumerate() {
        let target = if i < n_eval_speakers { &mut eval } else { &mut train };
        target.speakers.insert(label.clone(), data.speakers[label].clone());
    }
    Ok((train, eval))
}

/// Featurize a directory laid out as `<dir>/<speaker>/<utt>.wav`: log-mel
/// extraction followed by CMVN.
pub fn load_wav_dir(dir: &Path, role: Role) -> Result<Dataset> {
    let mut ds = Dataset::new(role);
    let mut speaker_dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    speaker_dirs.sort();
    for sdir in speaker_dirs {
        let speaker = sdir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<_> = std::fs::read_dir(&sdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f)?;
            let mut clip = parse_wav(&bytes).map_err(|e| match e {
                Error::Wav(m) => Error::Wav(format!("{}: {m}", f.display())),
                other => other,
            })?;
            clip.speaker_label = speaker.clone();
            clip.utterance_id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let feats = cmvn(&extract_logmel(&clip)?)?;
            ds.speakers.entry(speaker.clone()).or_default().push(feats);
        }
    }
    Ok(ds)
}
