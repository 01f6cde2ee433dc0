//! Framing, magnitude STFT, log-Mel spectrogram and MFCC.
//!
//! All extraction is deterministic: no dither, no pre-emphasis and no implicit
//! padding. The number of frames for `n` samples is
//! `1 + (n - frame_length) / frame_shift` (integer division).
//!
//! Mel filters are HTK-scale triangles with unit peak whose centres are evenly
//! spaced in mel between `mel_fmin` and `mel_fmax`. Adjacent triangles overlap
//! by half, so at every FFT bin the filter weights sum to at most one and the
//! total mel energy of a frame never exceeds its total spectral energy.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Mfcc,
    Logmel,
    Layer,
    RandomLayer,
    /// Raw waveform frames feeding the strided-convolution front-end.
    Waveform,
    /// Magnitude spectrum.
    Spectrum,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Logmel => "logmel",
            FeatureKind::Layer => "layer",
            FeatureKind::RandomLayer => "random_layer",
            FeatureKind::Waveform => "waveform",
            FeatureKind::Spectrum => "spectrum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mfcc" => FeatureKind::Mfcc,
            "logmel" => FeatureKind::Logmel,
            "layer" => FeatureKind::Layer,
            "random_layer" => FeatureKind::RandomLayer,
            "waveform" => FeatureKind::Waveform,
            "spectrum" => FeatureKind::Spectrum,
            _ => return None,
        })
    }
}

/// `frames x dims` row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub data: Vec<f32>,
    pub frames: usize,
    pub dims: usize,
    pub frame_rate: f64,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(data: Vec<f32>, frames: usize, dims: usize, frame_rate: f64, kind: FeatureKind) -> Result<Self> {
        if frames == 0 || dims == 0 || data.len() != frames * dims {
            return Err(Error::Input(format!(
                "feature matrix {frames}x{dims} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "features" });
        }
        Ok(Self { data, frames, dims, frame_rate, kind })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub frame_shift: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_floor: f64,
    pub window: Window,
    /// Append first and second order deltas to MFCCs.
    pub mfcc_deltas: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 400,
            frame_shift: 160,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 13,
            mel_fmin: 20.0,
            mel_fmax: 7600.0,
            log_floor: 1e-10,
            window: Window::Hann,
            mfcc_deltas: false,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dsp: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.frame_shift == 0 || self.frame_shift > self.frame_length || self.frame_length > self.n_fft {
            return bad("need 0 < frame_shift <= frame_length <= n_fft");
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("need 0 < n_mfcc <= n_mels");
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.mel_fmax && self.mel_fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= mel_fmin < mel_fmax <= nyquist");
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_shift as f64
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for `n_samples`; zero when the input is shorter than one frame.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_length {
            0
        } else {
            1 + (n_samples - self.frame_length) / self.frame_shift
        }
    }

    pub fn mfcc_dims(&self) -> usize {
        if self.mfcc_deltas {
            3 * self.n_mfcc
        } else {
            self.n_mfcc
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn window(cfg: &DspConfig) -> Vec<f64> {
    match cfg.window {
        Window::Hann => hann(cfg.frame_length),
        Window::Rectangular => vec![1.0; cfg.frame_length],
    }
}

fn check_len(samples: &[f32], cfg: &DspConfig) -> Result<usize> {
    cfg.validate()?;
    if samples.len() < cfg.frame_length {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one frame ({})",
            samples.len(),
            cfg.frame_length
        )));
    }
    Ok(cfg.n_frames(samples.len()))
}

/// Raw waveform frames (`frames x frame_length`), no window.
pub fn frames(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSequence> {
    let n = check_len(samples, cfg)?;
    let mut data = Vec::with_capacity(n * cfg.frame_length);
    for t in 0..n {
        let s = t * cfg.frame_shift;
        data.extend_from_slice(&samples[s..s + cfg.frame_length]);
    }
    FeatureSequence::new(data, n, cfg.frame_length, cfg.frame_rate(), FeatureKind::Waveform)
}

/// Power spectrum `|X_k|^2` per frame in f64.
fn power_frames(samples: &[f32], cfg: &DspConfig) -> Result<(usize, Vec<f64>)> {
    let n = check_len(samples, cfg)?;
    let bins = cfg.n_bins();
    let win = window(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Vec::with_capacity(n * bins);
    for t in 0..n {
        let s = t * cfg.frame_shift;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.frame_length {
                Complex::new(samples[s + i] as f64 * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok((n, out))
}

pub fn stft_magnitude(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSequence> {
    let (n, power) = power_frames(samples, cfg)?;
    let data = power.iter().map(|p| p.sqrt() as f32).collect();
    FeatureSequence::new(data, n, cfg.n_bins(), cfg.frame_rate(), FeatureKind::Spectrum)
}

/// `n_mels x n_bins` triangular filterbank.
pub fn mel_filterbank(cfg: &DspConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = vec![vec![0.0; bins]; cfg.n_mels];
    for (m, row) in fb.iter_mut().enumerate() {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for (j, w) in row.iter_mut().enumerate() {
            let f = j as f64 * bin_hz;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "mel band {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; raise n_fft or lower n_mels"
            )));
        }
    }
    Ok(fb)
}

/// Centre frequency in Hz of every mel band.
pub fn mel_centers(cfg: &DspConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

fn mel_energies(samples: &[f32], cfg: &DspConfig) -> Result<(usize, Vec<f64>)> {
    let (n, power) = power_frames(samples, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let bins = cfg.n_bins();
    let mut out = Vec::with_capacity(n * cfg.n_mels);
    for frame in power.chunks(bins) {
        for row in &fb {
            out.push(row.iter().zip(frame).map(|(w, p)| w * p).sum::<f64>());
        }
    }
    Ok((n, out))
}

fn log_mel_f64(samples: &[f32], cfg: &DspConfig) -> Result<(usize, Vec<f64>)> {
    let (n, e) = mel_energies(samples, cfg)?;
    Ok((n, e.into_iter().map(|v| v.max(cfg.log_floor).ln()).collect()))
}

pub fn log_mel(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSequence> {
    let (n, v) = log_mel_f64(samples, cfg)?;
    FeatureSequence::new(v.into_iter().map(|x| x as f32).collect(), n, cfg.n_mels, cfg.frame_rate(), FeatureKind::Logmel)
}

/// Orthonormal DCT-II of `x`, first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Regression deltas over a +-2 frame window with edge replication.
fn deltas(x: &[f64], frames: usize, dims: usize) -> Vec<f64> {
    let denom = 2.0 * (1.0 + 4.0);
    let at = |t: isize, d: usize| x[(t.clamp(0, frames as isize - 1) as usize) * dims + d];
    let mut out = vec![0.0; frames * dims];
    for t in 0..frames as isize {
        for d in 0..dims {
            let mut acc = 0.0;
            for k in 1..=2isize {
                acc += k as f64 * (at(t + k, d) - at(t - k, d));
            }
            out[t as usize * dims + d] = acc / denom;
        }
    }
    out
}

pub fn mfcc(samples: &[f32], cfg: &DspConfig) -> Result<FeatureSequence> {
    let (n, lm) = log_mel_f64(samples, cfg)?;
    let mut base = Vec::with_capacity(n * cfg.n_mfcc);
    for frame in lm.chunks(cfg.n_mels) {
        base.extend(dct2(frame, cfg.n_mfcc));
    }
    let data: Vec<f64> = if cfg.mfcc_deltas {
        let d1 = deltas(&base, n, cfg.n_mfcc);
        let d2 = deltas(&d1, n, cfg.n_mfcc);
        let mut out = Vec::with_capacity(n * 3 * cfg.n_mfcc);
        for t in 0..n {
            let r = t * cfg.n_mfcc..(t + 1) * cfg.n_mfcc;
            out.extend_from_slice(&base[r.clone()]);
            out.extend_from_slice(&d1[r.clone()]);
            out.extend_from_slice(&d2[r]);
        }
        out
    } else {
        base
    };
    FeatureSequence::new(data.into_iter().map(|x| x as f32).collect(), n, cfg.mfcc_dims(), cfg.frame_rate(), FeatureKind::Mfcc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / sr).sin() as f32).collect()
    }

    /// Direct O(N^2) DFT power of one windowed frame.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = DspConfig::default();
        assert_eq!(cfg.n_frames(400), 1);
        assert_eq!(cfg.n_frames(559), 1);
        assert_eq!(cfg.n_frames(560), 2);
        assert_eq!(stft_magnitude(&vec![0.0; 400], &cfg).unwrap().frames, 1);
        assert_eq!(cfg.n_frames(32_000), 198);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let cfg = DspConfig::default();
        assert!(matches!(stft_magnitude(&[0.0; 399], &cfg), Err(Error::Input(_))));
        assert!(log_mel(&[0.0; 10], &cfg).is_err());
        assert!(mfcc(&[], &cfg).is_err());
    }

    #[test]
    fn zero_signal() {
        let cfg = DspConfig::default();
        let z = vec![0.0f32; 1600];
        let mag = stft_magnitude(&z, &cfg).unwrap();
        assert!(mag.data.iter().all(|&v| v == 0.0));
        assert_eq!(mag.dims, 257);
        let lm = log_mel(&z, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(lm.data.iter().all(|&v| v == floor));
        let m = mfcc(&z, &cfg).unwrap();
        assert_eq!(m.dims, 13);
        let c0 = (40f64).sqrt() * (1e-10f64).ln();
        for t in 0..m.frames {
            let f = m.frame(t);
            assert!((f[0] as f64 - c0).abs() < 1e-4 * c0.abs());
            assert!(f[1..].iter().all(|v| v.abs() < 1e-4));
        }
    }

    #[test]
    fn dct_of_constant_has_only_dc() {
        let c = dct2(&[3.5; 40], 13);
        assert!((c[0] - 40f64.sqrt() * 3.5).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bin_centred_sine_rectangular_window() {
        let mut cfg = DspConfig::default();
        cfg.window = Window::Rectangular;
        cfg.frame_length = 512;
        let k = 32usize;
        let f = k as f64 * 16_000.0 / 512.0;
        let x = sine(f, 512, 16_000.0);
        let mag = stft_magnitude(&x, &cfg).unwrap();
        let oracle = dft_power(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), 512);
        let total: f64 = oracle.iter().sum();
        assert!(oracle[k] / total > 0.999);
        let argmax = mag.data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, k);
        for (j, o) in oracle.iter().enumerate() {
            assert!((mag.data[j] as f64 - o.sqrt()).abs() < 1e-3 * (1.0 + o.sqrt()));
        }
    }

    #[test]
    fn filterbank_rows_are_triangles_and_columns_at_most_one() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.len(), 40);
        for row in &fb {
            assert!(row.iter().sum::<f64>() > 0.0);
            let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
            // contiguous support, rising then falling
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
            let peak = nz.iter().copied().max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            for w in nz.windows(2) {
                if w[1] <= peak {
                    assert!(row[w[1]] >= row[w[0]]);
                } else {
                    assert!(row[w[1]] <= row[w[0]]);
                }
            }
            assert!(row.iter().all(|&w| w <= 1.0));
        }
        for j in 0..cfg.n_bins() {
            assert!(fb.iter().map(|r| r[j]).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn mel_energy_never_exceeds_spectral_energy() {
        let cfg = DspConfig::default();
        let x: Vec<f32> = (0..4000).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
        let (n, e) = mel_energies(&x, &cfg).unwrap();
        let (_, p) = power_frames(&x, &cfg).unwrap();
        for t in 0..n {
            let mel: f64 = e[t * 40..(t + 1) * 40].iter().sum();
            let spec: f64 = p[t * 257..(t + 1) * 257].iter().sum();
            assert!(mel <= spec * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sine_at_band_centre_peaks_in_that_band() {
        let cfg = DspConfig::default();
        let centers = mel_centers(&cfg);
        let fb = mel_filterbank(&cfg).unwrap();
        let win = hann(cfg.frame_length);
        for b in [10usize, 20, 30, 38] {
            let x = sine(centers[b], 3200, 16_000.0);
            let lm = log_mel(&x, &cfg).unwrap();
            // oracle: direct DFT of each windowed frame through the filterbank
            for t in 0..lm.frames {
                let frame: Vec<f64> =
                    (0..cfg.frame_length).map(|i| x[t * cfg.frame_shift + i] as f64 * win[i]).collect();
                let p = dft_power(&frame, cfg.n_fft);
                let oracle_arg = (0..40)
                    .max_by(|&a, &c| {
                        let ea: f64 = fb[a].iter().zip(&p).map(|(w, v)| w * v).sum();
                        let ec: f64 = fb[c].iter().zip(&p).map(|(w, v)| w * v).sum();
                        ea.total_cmp(&ec)
                    })
                    .unwrap();
                let arg = (0..40).max_by(|&a, &c| lm.frame(t)[a].total_cmp(&lm.frame(t)[c])).unwrap();
                assert_eq!(arg, oracle_arg);
                assert_eq!(arg, b);
            }
        }
    }

    #[test]
    fn deterministic_and_delta_dims() {
        let mut cfg = DspConfig::default();
        let x = sine(440.0, 8000, 16_000.0);
        assert_eq!(mfcc(&x, &cfg).unwrap(), mfcc(&x, &cfg).unwrap());
        cfg.mfcc_deltas = true;
        let m = mfcc(&x, &cfg).unwrap();
        assert_eq!(m.dims, 39);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DspConfig::default();
        cfg.n_mfcc = 41;
        assert!(cfg.validate().is_err());
        let mut cfg = DspConfig::default();
        cfg.frame_shift = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = DspConfig::default();
        cfg.log_floor = 0.0;
        assert!(cfg.validate().is_err());
    }
}
