use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, FeatureSequence, N_MELS, SAMPLE_RATE};
use crate::error::Result;

/// 25 ms at 16 kHz.
pub const WIN_LENGTH: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP_LENGTH: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
const F_MAX: f64 = 8000.0;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The `n_mels + 2` band edge frequencies (Hz), equally spaced on the mel
/// scale over `[0, 8000]`. Filter `m` rises from edge `m`, peaks at edge
/// `m + 1` and falls to zero at edge `m + 2`.
pub fn mel_band_edges(n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(F_MAX);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `n_mels x (FFT_SIZE/2 + 1)` triangular filter weights.
pub fn mel_filterbank(n_mels: usize) -> Array2<f64> {
    let edges = mel_band_edges(n_mels);
    let n_bins = FFT_SIZE / 2 + 1;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

fn default_filterbank() -> &'static Array2<f64> {
    static FB: OnceLock<Array2<f64>> = OnceLock::new();
    FB.get_or_init(|| mel_filterbank(N_MELS))
}

fn hann() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WIN_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect()
    })
}

/// 40-band log-mel energies, one row per 10 ms hop.
///
/// Frames are Hann-windowed 400-sample slices zero-padded to a 512-point
/// FFT; band energies are `ln(max(energy, 1e-10))` of the power spectrum
/// weighted by triangular mel filters over 0-8000 Hz.
pub fn extract_logmel(clip: &AudioClip) -> Result<FeatureSequence> {
    clip.validate()?;
    let n_frames = 1 + (clip.samples.len() - WIN_LENGTH) / HOP_LENGTH;
    let fb = default_filterbank();
    let window = hann();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut frames = Array2::zeros((n_frames, N_MELS));
    for t in 0..n_frames {
        let start = t * HOP_LENGTH;
        for (n, c) in buf.iter_mut().enumerate() {
            let re = if n < WIN_LENGTH { clip.samples[start + n] * window[n] } else { 0.0 };
            *c = Complex::new(re, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, out) in frames.row_mut(t).iter_mut().enumerate() {
            let energy: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *out = energy.max(LOG_FLOOR).ln();
        }
    }
    Ok(FeatureSequence::new(frames, clip.speaker_label.clone(), clip.utterance_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip { samples, sample_rate: SAMPLE_RATE, speaker_label: "s".into(), utterance_id: "u".into() }
    }

    fn sine(freq: f64, amp: f64, len: usize) -> Vec<f64> {
        (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin()).collect()
    }

    #[test]
    fn zero_clip_hits_floor() {
        let f = extract_logmel(&clip(vec![0.0; 6400])).unwrap();
        assert_eq!(f.frames.dim(), (38, N_MELS));
        assert!(f.frames.iter().all(|&v| (v - LOG_FLOOR.ln()).abs() < 1e-12));
        assert!((LOG_FLOOR.ln() + 23.0259).abs() < 1e-4);
    }

    #[test]
    fn frame_count_rule() {
        for len in [400, 401, 559, 560, 561, 1000, 16_000] {
            let f = extract_logmel(&clip(vec![0.0; len])).unwrap();
            assert_eq!(f.num_frames(), 1 + (len - 400) / 160, "len {len}");
        }
        assert!(extract_logmel(&clip(vec![0.0; 399])).is_err());
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let fb = mel_filterbank(N_MELS);
        assert_eq!(fb.dim(), (40, 257));
        assert!(fb.iter().all(|&w| (0.0..=1.0).contains(&w)));
        let edges = mel_band_edges(N_MELS);
        assert_eq!(edges.len(), 42);
        assert!(edges[0].abs() < 1e-9 && (edges[41] - 8000.0).abs() < 1e-6);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn sine_lands_in_nearest_band() {
        // Independent oracle: the band with peak frequency nearest 1 kHz.
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let expected = (0..40)
            .min_by(|&a, &b| {
                let pa = 700.0 * (10f64.powf(top * (a + 1) as f64 / 41.0 / 2595.0) - 1.0);
                let pb = 700.0 * (10f64.powf(top * (b + 1) as f64 / 41.0 / 2595.0) - 1.0);
                (pa - 1000.0).abs().total_cmp(&(pb - 1000.0).abs())
            })
            .unwrap();
        let f = extract_logmel(&clip(sine(1000.0, 0.5, 16_000))).unwrap();
        for row in f.frames.rows() {
            let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn amplitude_scaling_shifts_log_energy() {
        let mut r = crate::rng::stream(11, "test", &[]);
        let base: Vec<f64> = (0..4000).map(|_| rand::Rng::random_range(&mut r, -0.3..0.3)).collect();
        let c = 2.5;
        let a = extract_logmel(&clip(base.clone())).unwrap();
        let b = extract_logmel(&clip(base.iter().map(|x| x * c).collect())).unwrap();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            if *x > LOG_FLOOR.ln() + 1.0 {
                assert!((y - x - 2.0 * c.ln()).abs() < 1e-6);
            }
        }
    }
}
