//! Mel analysis and Griffin-Lim waveform reconstruction.
//!
//! Mel values are `ln(1 + a / MEL_AMPLITUDE_REF)` of the Slaney-normalized
//! mel filterbank amplitude `a`, so a zero mel frame is silence.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::mat::Mat;
use crate::scalar::Scalar;

pub const SAMPLE_RATE: u32 = 22050;
pub const HOP_LENGTH: usize = 256;
pub const N_FFT: usize = 1024;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
pub const MEL_AMPLITUDE_REF: f64 = 1e-3;

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// STFT/mel machinery for one configuration.
pub struct MelAnalyzer {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// `n_mels × (n_fft/2 + 1)`.
    pub filters: Mat<f64>,
    /// Moore–Penrose pseudo-inverse of `filters`.
    pub inverse: Mat<f64>,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    backward: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(n_mels: usize) -> Self {
        Self::with_params(SAMPLE_RATE, N_FFT, HOP_LENGTH, n_mels, F_MIN, F_MAX)
    }

    pub fn with_params(sample_rate: u32, n_fft: usize, hop: usize, n_mels: usize, fmin: f64, fmax: f64) -> Self {
        let filters = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax);
        let dm = DMatrix::from_row_slice(filters.rows(), filters.cols(), filters.as_slice());
        let pinv = dm
            .pseudo_inverse(1e-10)
            .expect("pseudo-inverse with non-negative epsilon");
        let inverse = Mat::from_fn(pinv.nrows(), pinv.ncols(), |r, c| pinv[(r, c)]);
        let mut planner = FftPlanner::new();
        Self {
            sample_rate,
            n_fft,
            hop,
            n_mels,
            filters,
            inverse,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            backward: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Centered (zero-padded) STFT; `1 + len/hop` frames of `n_fft/2 + 1` bins.
    pub fn stft(&self, signal: &[f64]) -> Vec<Vec<Complex64>> {
        let half = self.n_fft / 2;
        let frames = 1 + signal.len() / self.hop;
        let mut buf = vec![Complex64::default(); self.n_fft];
        (0..frames)
            .map(|t| {
                for (j, b) in buf.iter_mut().enumerate() {
                    let idx = (t * self.hop + j) as isize - half as isize;
                    let s = if idx >= 0 && (idx as usize) < signal.len() {
                        signal[idx as usize]
                    } else {
                        0.0
                    };
                    *b = Complex64::new(s * self.window[j], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.bins()].to_vec()
            })
            .collect()
    }

    /// Inverse of [`stft`](Self::stft) by weighted overlap-add; returns
    /// exactly `frames · hop` samples.
    pub fn istft(&self, spec: &[Vec<Complex64>]) -> Vec<f64> {
        let n = self.n_fft;
        let half = n / 2;
        let frames = spec.len();
        let full = frames.saturating_sub(1) * self.hop + n;
        let mut out = vec![0.0; full];
        let mut norm = vec![0.0; full];
        let mut buf = vec![Complex64::default(); n];
        for (t, frame) in spec.iter().enumerate() {
            buf[..self.bins()].copy_from_slice(&frame[..self.bins()]);
            for k in self.bins()..n {
                buf[k] = frame[n - k].conj();
            }
            self.backward.process(&mut buf);
            for j in 0..n {
                let w = self.window[j];
                out[t * self.hop + j] += buf[j].re / n as f64 * w;
                norm[t * self.hop + j] += w * w;
            }
        }
        for (o, &w) in out.iter_mut().zip(&norm) {
            if w > 1e-8 {
                *o /= w;
            }
        }
        let len = frames * self.hop;
        (0..len).map(|i| out.get(i + half).copied().unwrap_or(0.0)).collect()
    }

    /// Log-compressed mel spectrogram, `frames × n_mels`.
    pub fn mel_spectrogram(&self, signal: &[f64]) -> Mat<f64> {
        let spec = self.stft(signal);
        let mag = Mat::from_fn(spec.len(), self.bins(), |t, k| spec[t][k].norm());
        let mel = mag.matmul_t(false, &self.filters, true);
        mel.map(|a| (a.max(0.0) / MEL_AMPLITUDE_REF).ln_1p())
    }

    /// Linear magnitude estimate from a log mel spectrogram.
    pub fn mel_to_linear<T: Scalar>(&self, mel: &Mat<T>) -> Mat<f64> {
        let amp = mel.cast::<f64>().map(|m| (MEL_AMPLITUDE_REF * m.exp_m1()).max(0.0));
        amp.matmul_t(false, &self.inverse, true).map(|v| v.max(0.0))
    }

    /// Griffin-Lim phase reconstruction from zero initial phase.
    /// `iterations = 0` inverts the magnitude with zero phase.
    pub fn griffin_lim<T: Scalar>(&self, mel: &Mat<T>, iterations: usize) -> Vec<f64> {
        let mag = self.mel_to_linear(mel);
        let frames = mag.rows();
        let mut phase: Vec<Vec<Complex64>> = vec![vec![Complex64::new(1.0, 0.0); self.bins()]; frames];
        let apply = |phase: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
            (0..frames)
                .map(|t| (0..self.bins()).map(|k| phase[t][k] * mag[(t, k)]).collect())
                .collect()
        };
        for _ in 0..iterations {
            let signal = self.istft(&apply(&phase));
            let rebuilt = self.stft(&signal);
            for (p, r) in phase.iter_mut().zip(rebuilt.iter()) {
                for (pk, rk) in p.iter_mut().zip(r) {
                    let n = rk.norm();
                    *pk = if n > 1e-12 { rk / n } else { Complex64::new(1.0, 0.0) };
                }
            }
        }
        self.istft(&apply(&phase))
    }

    /// Frequency of the largest bin of the frame-averaged magnitude spectrum.
    pub fn dominant_frequency(&self, signal: &[f64]) -> f64 {
        let spec = self.stft(signal);
        let mut avg = vec![0.0; self.bins()];
        for frame in &spec {
            for (a, c) in avg.iter_mut().zip(frame) {
                *a += c.norm();
            }
        }
        let best = avg
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > avg[b] { i } else { b });
        best as f64 * self.bin_width()
    }

    pub fn bin_width(&self) -> f64 {
        self.sample_rate as f64 / self.n_fft as f64
    }
}

/// Slaney-style triangular filters with area normalization.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Mat<f64> {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let freq = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    Mat::from_fn(n_mels, bins, |m, k| {
        let f = freq(k);
        let lower = (f - points[m]) / (points[m + 1] - points[m]);
        let upper = (points[m + 2] - f) / (points[m + 2] - points[m + 1]);
        let enorm = 2.0 / (points[m + 2] - points[m]);
        lower.min(upper).max(0.0) * enorm
    })
}

/// 16-bit PCM mono RIFF/WAVE; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVEfmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&sample_rate.to_le_bytes())?;
    out.write_all(&(sample_rate * 2).to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Scales to a peak of `peak` unless the signal is (near) silent.
pub fn peak_normalize(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max > 1e-9 {
        for s in samples {
            *s *= peak / max;
        }
    }
}

pub fn sine(freq: f64, amplitude: f64, len: usize, sample_rate: u32) -> Vec<f64> {
    (0..len)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 440.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn filterbank_is_non_negative_and_covers_band() {
        let fb = mel_filterbank(SAMPLE_RATE, N_FFT, 80, F_MIN, F_MAX);
        assert_eq!(fb.shape(), (80, 513));
        assert!(fb.as_slice().iter().all(|&v| v >= 0.0));
        for m in 0..80 {
            assert!(fb.row(m).iter().any(|&v| v > 0.0), "empty filter {m}");
        }
    }

    #[test]
    fn stft_istft_reconstructs() {
        let a = MelAnalyzer::new(80);
        let x = sine(300.0, 0.3, 40 * HOP_LENGTH, SAMPLE_RATE);
        let spec = a.stft(&x);
        assert_eq!(spec.len(), 41);
        let y = a.istft(&spec);
        assert_eq!(y.len(), 41 * HOP_LENGTH);
        for i in 0..x.len() {
            assert!((x[i] - y[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn silence_maps_to_silence() {
        let a = MelAnalyzer::new(80);
        let wav = a.griffin_lim(&Mat::<f32>::zeros(10, 80), 60);
        assert_eq!(wav.len(), 10 * HOP_LENGTH);
        assert!(wav.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_iterations_is_finite() {
        let a = MelAnalyzer::new(80);
        let mel = a.mel_spectrogram(&sine(440.0, 0.5, 20 * HOP_LENGTH, SAMPLE_RATE));
        let wav = a.griffin_lim(&mel, 0);
        assert!(wav.iter().all(|v| v.is_finite()));
        assert_eq!(wav.len(), mel.rows() * HOP_LENGTH);
    }

    #[test]
    fn wav_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        write_wav(&p, &[0.0, 1.0, -1.0], SAMPLE_RATE).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[..4], b"RIFF");
        assert_eq!(&b[8..16], b"WAVEfmt ");
        assert_eq!(u32::from_le_bytes([b[24], b[25], b[26], b[27]]), 22050);
        assert_eq!(b.len(), 44 + 6);
        assert_eq!(i16::from_le_bytes([b[46], b[47]]), i16::MAX);
    }
}
