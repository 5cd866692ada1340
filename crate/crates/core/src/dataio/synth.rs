use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, Role, N_MELS};
use crate::error::{invalid, Result};
use crate::rng;

/// Gaussian synthetic speakers: a per-speaker identity vector, a
/// per-utterance offset and per-frame noise, all in the 40-d feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub speaker_scale: f64,
    pub utt_noise: f64,
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            utts_per_speaker: 6,
            frames_per_utt: 120,
            speaker_scale: 1.0,
            utt_noise: 0.05,
            frame_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.frames_per_utt == 0 {
            return Err(invalid("synthetic spec counts must be >= 1"));
        }
        for (name, v) in [
            ("speaker_scale", self.speaker_scale),
            ("utt_noise", self.utt_noise),
            ("frame_noise", self.frame_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn speaker_label(j: usize) -> String {
    format!("spk{j:03}")
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut ds = Dataset::new(Role::Train);
    for j in 0..spec.n_speakers {
        // One stream per speaker so a larger spec extends a smaller one.
        let mut r = rng::stream(spec.seed, "synth", &[j as u64]);
        let mut draw = |scale: f64| scale * r.sample::<f64, _>(StandardNormal);
        let identity: Vec<f64> = (0..N_MELS).map(|_| draw(spec.speaker_scale)).collect();
        let label = speaker_label(j);
        let mut utts = Vec::with_capacity(spec.utts_per_speaker);
        for i in 0..spec.utts_per_speaker {
            let centre: Vec<f64> = identity.iter().map(|v| v + draw(spec.utt_noise)).collect();
            let mut frames = Array2::zeros((spec.frames_per_utt, N_MELS));
            for mut row in frames.rows_mut() {
                for (x, c) in row.iter_mut().zip(&centre) {
                    *x = c + draw(spec.frame_noise);
                }
            }
            utts.push(FeatureSequence::new(frames, label.clone(), format!("{label}_u{i:03}")));
        }
        ds.speakers.insert(label, utts);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, u: usize, t: usize) -> SynthSpec {
        SynthSpec { n_speakers: n, utts_per_speaker: u, frames_per_utt: t, seed: 42, ..Default::default() }
    }

    #[test]
    fn shape_contract() {
        let ds = synth_dataset(&spec(4, 3, 50)).unwrap();
        assert_eq!(ds.num_speakers(), 4);
        for utts in ds.speakers.values() {
            assert_eq!(utts.len(), 3);
            assert!(utts.iter().all(|u| u.frames.dim() == (50, N_MELS)));
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(&spec(4, 3, 50)).unwrap(), synth_dataset(&spec(4, 3, 50)).unwrap());
        let mut other = spec(4, 3, 50);
        other.seed = 43;
        assert_ne!(synth_dataset(&spec(4, 3, 50)).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn zero_noise_collapses_to_identity() {
        let s = SynthSpec { utt_noise: 0.0, frame_noise: 0.0, ..spec(3, 2, 5) };
        let ds = synth_dataset(&s).unwrap();
        for utts in ds.speakers.values() {
            let first = utts[0].frames.row(0).to_owned();
            for u in utts {
                for row in u.frames.rows() {
                    assert_eq!(row, first);
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(synth_dataset(&spec(0, 1, 1)).is_err());
        assert!(synth_dataset(&SynthSpec { utt_noise: -1.0, ..spec(1, 1, 1) }).is_err());
    }
}
