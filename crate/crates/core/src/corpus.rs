//! Deterministic harmonic-plus-envelope speech proxy and manifest parsing.
//!
//! Each phone owns a fixed spectral envelope made of two or three Gaussian
//! resonances. Each speaker owns a base pitch `f0`, a formant scale and a
//! spectral tilt. An utterance is a run of phone segments; its waveform is the
//! sum of harmonics of the speaker's `f0` weighted by the current phone's
//! envelope. Harmonic amplitudes glide linearly from the previous phone over
//! the first [`COARTICULATION_FRAMES`] frames of each segment. Optional white
//! Gaussian noise is added at an exact SNR and the clean signal is kept
//! alongside.
//!
//! Randomness: ChaCha8 streams derived with [`crate::rng::mix`]. Stream 0 of
//! the corpus seed draws the phone inventory, stream 1 the speakers and stream
//! `1000 + u` utterance `u`, so utterances can be generated in any order.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

pub const MAX_SPEAKERS: usize = 64;
pub const MAX_PHONES: usize = 64;
/// Shortest phone segment, in frames.
pub const MIN_SEGMENT_FRAMES: usize = 6;
pub const MAX_SEGMENT_FRAMES: usize = 20;
/// Length of the amplitude glide into each phone, in frames.
pub const COARTICULATION_FRAMES: usize = 4;
const F0_LOW: f64 = 80.0;
const F0_SPAN: f64 = 340.0;
const TARGET_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub phone_labels: Option<Vec<u32>>,
    pub speaker_id: Option<u32>,
    pub clean_samples: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_phones: usize,
    pub n_utterances: usize,
    pub utterance_seconds: f64,
    pub sample_rate: u32,
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
    /// Framing used to derive per-frame phone labels.
    pub frame_length: usize,
    pub frame_shift: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_phones: 12,
            n_utterances: 200,
            utterance_seconds: 2.0,
            sample_rate: 16_000,
            noise_snr_db: Some(10.0),
            seed: 1,
            frame_length: 400,
            frame_shift: 160,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("corpus: {m}")));
        if self.n_speakers == 0 || self.n_phones == 0 || self.n_utterances == 0 {
            return bad("all counts must be >= 1".into());
        }
        if self.n_speakers > MAX_SPEAKERS {
            return bad(format!("n_speakers {} exceeds cap {MAX_SPEAKERS}", self.n_speakers));
        }
        if self.n_phones > MAX_PHONES {
            return bad(format!("n_phones {} exceeds cap {MAX_PHONES}", self.n_phones));
        }
        if self.sample_rate == 0 || self.frame_shift == 0 || self.frame_shift > self.frame_length {
            return bad("sample_rate > 0 and 0 < frame_shift <= frame_length required".into());
        }
        if self.n_samples() < self.frame_length + MIN_SEGMENT_FRAMES * self.frame_shift {
            return bad(format!("utterance_seconds {} too short", self.utterance_seconds));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.utterance_seconds * self.sample_rate as f64).round().max(0.0) as usize
    }

    pub fn n_frames(&self) -> usize {
        1 + (self.n_samples() - self.frame_length) / self.frame_shift
    }
}

#[derive(Clone, Debug)]
struct Phone {
    /// (centre Hz, bandwidth Hz, gain)
    peaks: Vec<(f64, f64, f64)>,
}

impl Phone {
    fn envelope(&self, f: f64) -> f64 {
        0.02 + self
            .peaks
            .iter()
            .map(|&(c, bw, g)| g * (-(f - c) * (f - c) / (2.0 * bw * bw)).exp())
            .sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct Speaker {
    f0: f64,
    formant_scale: f64,
    /// dB per kHz
    tilt: f64,
}

/// Base pitch of speaker `s`; distinct speakers differ by at least 5 Hz.
pub fn speaker_f0(s: usize, n_speakers: usize) -> f64 {
    let step = if n_speakers > 1 { (F0_SPAN / (n_speakers - 1) as f64).min(15.0) } else { 0.0 };
    F0_LOW + step * s as f64
}

fn phones(spec: &CorpusSpec) -> Vec<Phone> {
    let mut rng = sub_rng(spec.seed, 0);
    (0..spec.n_phones)
        .map(|_| {
            let n_peaks = if rng.random_bool(0.5) { 2 } else { 3 };
            let ranges = [(250.0, 900.0), (900.0, 2500.0), (2500.0, 3800.0)];
            let gains = [1.0, rng.random_range(0.5..0.9), rng.random_range(0.25..0.5)];
            let peaks = (0..n_peaks)
                .map(|i| (rng.random_range(ranges[i].0..ranges[i].1), rng.random_range(60.0..160.0), gains[i]))
                .collect();
            Phone { peaks }
        })
        .collect()
}

fn speakers(spec: &CorpusSpec) -> Vec<Speaker> {
    let mut rng = sub_rng(spec.seed, 1);
    (0..spec.n_speakers)
        .map(|s| Speaker {
            f0: speaker_f0(s, spec.n_speakers),
            formant_scale: rng.random_range(0.8..1.25),
            tilt: rng.random_range(-6.0..6.0),
        })
        .collect()
}

/// Allowed successors of each phone: `PHONE_SUCCESSORS` distinct other phones
/// (all others when there are fewer).
pub const PHONE_SUCCESSORS: usize = 3;

pub fn phone_grammar(n_phones: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = sub_rng(seed, 2);
    (0..n_phones)
        .map(|p| {
            let mut others: Vec<usize> = (0..n_phones).filter(|&q| q != p).collect();
            others.shuffle(&mut rng);
            others.truncate(PHONE_SUCCESSORS);
            others.sort_unstable();
            others
        })
        .collect()
}

/// Phone segments in frame-shift units: (start, end, phone).
fn segments(total_units: usize, grammar: &[Vec<usize>], rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let mut segs: Vec<(usize, usize, usize)> = Vec::new();
    let mut start = 0;
    while start < total_units {
        let len = rng.random_range(MIN_SEGMENT_FRAMES..=MAX_SEGMENT_FRAMES);
        let p = match segs.last() {
            Some(&(_, _, prev)) if !grammar[prev].is_empty() => grammar[prev][rng.random_range(0..grammar[prev].len())],
            _ => rng.random_range(0..grammar.len()),
        };
        let end = (start + len).min(total_units);
        if end - start < MIN_SEGMENT_FRAMES && !segs.is_empty() {
            segs.last_mut().unwrap().1 = end;
        } else {
            segs.push((start, end, p));
        }
        start = end;
    }
    segs
}

fn synth_utterance(spec: &CorpusSpec, u: usize, phones: &[Phone], speakers: &[Speaker], grammar: &[Vec<usize>]) -> Utterance {
    let mut rng = sub_rng(spec.seed, 1000 + u as u64);
    let n = spec.n_samples();
    let sr = spec.sample_rate as f64;
    let s_idx = u % spec.n_speakers;
    let spk = &speakers[s_idx];
    let units = n.div_ceil(spec.frame_shift);
    let segs = segments(units, grammar, &mut rng);

    let n_harm = ((0.45 * sr) / spk.f0).floor().max(1.0) as usize;
    // amplitude of harmonic h under each phone, for this speaker
    let amps: Vec<Vec<f64>> = phones
        .iter()
        .map(|ph| {
            (1..=n_harm)
                .map(|h| {
                    let f = h as f64 * spk.f0;
                    let tilt = 10f64.powf(spk.tilt * f / 1000.0 / 20.0);
                    ph.envelope(f / spk.formant_scale) * tilt / (h as f64).sqrt()
                })
                .collect()
        })
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut clean = vec![0.0f64; n];
    for h in 0..n_harm {
        let w = 2.0 * PI * (h + 1) as f64 * spk.f0 / sr;
        let (rs, rc) = w.sin_cos();
        let (mut zs, mut zc) = phases[h].sin_cos();
        for (si, &(a, b, p)) in segs.iter().enumerate() {
            let amp = amps[p][h];
            let prev = if si > 0 { amps[segs[si - 1].2][h] } else { amp };
            let ramp = (COARTICULATION_FRAMES * spec.frame_shift) as f64;
            let (lo, hi) = (a * spec.frame_shift, (b * spec.frame_shift).min(n));
            for (j, x) in clean[lo..hi].iter_mut().enumerate() {
                let f = (j as f64 / ramp).min(1.0);
                let amp = prev + (amp - prev) * f;
                *x += amp * zs;
                let ns = zs * rc + zc * rs;
                zc = zc * rc - zs * rs;
                zs = ns;
            }
        }
    }
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let g = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    clean.iter_mut().for_each(|v| *v *= g);
    let clean_f32: Vec<f32> = clean.iter().map(|&v| v as f32).collect();

    let samples = match spec.noise_snr_db {
        None => clean_f32.clone(),
        Some(snr) => {
            let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let pc: f64 = clean_f32.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let pn: f64 = noise.iter().map(|v| v * v).sum();
            let scale = (pc / (pn * 10f64.powf(snr / 10.0))).sqrt();
            clean_f32.iter().zip(&noise).map(|(&c, &z)| (c as f64 + scale * z) as f32).collect()
        }
    };

    let frames = 1 + (n - spec.frame_length) / spec.frame_shift;
    let mut labels = Vec::with_capacity(frames);
    let mut k = 0;
    for t in 0..frames {
        let centre = t * spec.frame_shift + spec.frame_length / 2;
        while k + 1 < segs.len() && centre >= segs[k].1 * spec.frame_shift {
            k += 1;
        }
        labels.push(segs[k].2 as u32);
    }

    Utterance {
        id: format!("utt{u:05}"),
        samples,
        sample_rate: spec.sample_rate,
        phone_labels: Some(labels),
        speaker_id: Some(s_idx as u32),
        clean_samples: Some(clean_f32),
    }
}

/// Generate the synthetic corpus described by `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let ph = phones(spec);
    let sp = speakers(spec);
    let gr = phone_grammar(spec.n_phones, spec.seed);
    Ok((0..spec.n_utterances).into_par_iter().map(|u| synth_utterance(spec, u, &ph, &sp, &gr)).collect())
}

/// SNR in dB of `noisy` against its clean reference.
pub fn measured_snr_db(noisy: &[f32], clean: &[f32]) -> f64 {
    let pc: f64 = clean.iter().map(|&v| (v as f64).powi(2)).sum();
    let pn: f64 = noisy.iter().zip(clean).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    10.0 * (pc / pn).log10()
}

/// `true` when the utterance belongs to the held-out split: FNV-1a of the id
/// modulo 5 equals 0 (about 20% of utterances).
pub fn is_eval(id: &str) -> bool {
    crate::rng::fnv1a(id) % 5 == 0
}

/// One line of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub wav_path: String,
    pub speaker_id: Option<u32>,
    pub phone_label_path: Option<String>,
    pub clean_wav_path: Option<String>,
}

/// Parse manifest text: `<id>\t<wav>\t[speaker]\t[phone-labels]\t[clean-wav]`.
/// Blank lines are skipped; empty optional fields mean "absent".
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if f.len() < 2 || f.len() > 5 {
            return Err(err(format!("expected 2 to 5 tab-separated fields, got {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(err("id and wav path must be non-empty".into()));
        }
        let opt = |k: usize| f.get(k).filter(|s| !s.is_empty()).map(|s| s.to_string());
        let speaker_id = match opt(2) {
            Some(s) => Some(s.parse::<u32>().map_err(|_| err(format!("bad speaker id {s:?}")))?),
            None => None,
        };
        out.push(ManifestRecord {
            id: f[0].to_string(),
            wav_path: f[1].to_string(),
            speaker_id,
            phone_label_path: opt(3),
            clean_wav_path: opt(4),
        });
    }
    Ok(out)
}

/// Access to the files a manifest names.
pub trait ManifestReader {
    /// Mono samples in [-1, 1] and the sample rate.
    fn wav(&mut self, path: &str) -> Result<(Vec<f32>, u32)>;
    fn text(&mut self, path: &str) -> Result<String>;
}

/// Utterances of a manifest in file order. Labels and clean audio are absent
/// where the manifest leaves them out.
pub fn load_manifest(text: &str, reader: &mut dyn ManifestReader) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for rec in parse_manifest(text)? {
        let (samples, sample_rate) = reader.wav(&rec.wav_path)?;
        let phone_labels = match &rec.phone_label_path {
            Some(p) => Some(parse_labels(&reader.text(p)?).map_err(|e| Error::Input(format!("{p}: {e}")))?),
            None => None,
        };
        let clean_samples = match &rec.clean_wav_path {
            Some(p) => {
                let (clean, sr) = reader.wav(p)?;
                if clean.len() != samples.len() || sr != sample_rate {
                    return Err(Error::Input(format!("{p}: clean audio does not match {}", rec.wav_path)));
                }
                Some(clean)
            }
            None => None,
        };
        out.push(Utterance { id: rec.id, samples, sample_rate, phone_labels, speaker_id: rec.speaker_id, clean_samples });
    }
    Ok(out)
}

/// Parse a whitespace-separated per-frame phone label file.
pub fn parse_labels(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, t)| {
            t.parse::<u32>()
                .map_err(|_| Error::Parse { line: 1, msg: format!("label {i}: {t:?} is not an integer") })
        })
        .collect()
}

pub fn format_labels(labels: &[u32]) -> String {
    let mut s = labels.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: Option<f64>) -> CorpusSpec {
        CorpusSpec { n_utterances: 6, n_speakers: 3, n_phones: 5, noise_snr_db: noise, seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small(1, Some(10.0))).unwrap();
        let b = generate(&small(1, Some(10.0))).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(2, Some(10.0))).unwrap();
        assert_ne!(a[0].samples, c[0].samples);
    }

    #[test]
    fn no_noise_means_clean_equals_samples() {
        for u in generate(&small(3, None)).unwrap() {
            assert_eq!(u.clean_samples.as_ref().unwrap(), &u.samples);
        }
    }

    #[test]
    fn snr_is_as_requested() {
        for u in generate(&small(4, Some(10.0))).unwrap() {
            let snr = measured_snr_db(&u.samples, u.clean_samples.as_ref().unwrap());
            assert!((snr - 10.0).abs() <= 0.5, "{snr}");
        }
    }

    #[test]
    fn labels_are_frame_aligned_with_long_segments() {
        let spec = small(5, None);
        for u in generate(&spec).unwrap() {
            let labels = u.phone_labels.unwrap();
            assert_eq!(labels.len(), spec.n_frames());
            assert_eq!(labels.len(), 198);
            assert!(labels.iter().all(|&p| (p as usize) < spec.n_phones));
            let mut run = 1;
            let mut runs = Vec::new();
            for w in labels.windows(2) {
                if w[0] == w[1] {
                    run += 1;
                } else {
                    runs.push(run);
                    run = 1;
                }
            }
            runs.push(run);
            // interior runs must be at least 3 frames; edges are clipped by framing
            for r in &runs[1..runs.len() - 1] {
                assert!(*r >= 3, "{runs:?}");
            }
        }
    }

    #[test]
    fn speakers_share_and_separate_f0() {
        for n in [1, 2, 8, 64] {
            for s in 1..n {
                assert!(speaker_f0(s, n) - speaker_f0(s - 1, n) >= 5.0);
            }
        }
        let utts = generate(&small(6, None)).unwrap();
        assert_eq!(utts[0].speaker_id, utts[3].speaker_id);
        assert!(utts.iter().all(|u| u.speaker_id.unwrap() < 3));
    }

    #[test]
    fn caps_are_enforced() {
        let mut s = small(1, None);
        s.n_phones = MAX_PHONES + 1;
        assert!(generate(&s).is_err());
        let mut s = small(1, None);
        s.n_speakers = MAX_SPEAKERS + 1;
        assert!(generate(&s).is_err());
        let mut s = small(1, None);
        s.n_utterances = 0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn manifest_parsing() {
        assert!(parse_manifest("").unwrap().is_empty());
        let m = parse_manifest("a\twav/a.wav\t3\tlab/a.txt\nb\twav/b.wav\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].speaker_id, Some(3));
        assert_eq!(m[0].phone_label_path.as_deref(), Some("lab/a.txt"));
        assert_eq!(m[1].id, "b");
        assert_eq!(m[1].speaker_id, None);
        let e = parse_manifest("a\tx.wav\n\nbroken\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_manifest("a\tx.wav\tnotanumber\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn labels_roundtrip() {
        let l = vec![0, 3, 3, 11];
        assert_eq!(parse_labels(&format_labels(&l)).unwrap(), l);
        assert!(parse_labels("1 x 2").is_err());
    }

    struct Files(std::collections::BTreeMap<&'static str, &'static str>);

    impl ManifestReader for Files {
        fn wav(&mut self, path: &str) -> Result<(Vec<f32>, u32)> {
            match self.0.get(path) {
                Some(v) => Ok((v.split(' ').map(|x| x.parse().unwrap()).collect(), 16_000)),
                None => Err(Error::Input(format!("{path}: no such file"))),
            }
        }

        fn text(&mut self, path: &str) -> Result<String> {
            self.0.get(path).map(|s| s.to_string()).ok_or_else(|| Error::Input(format!("{path}: no such file")))
        }
    }

    #[test]
    fn manifest_loading() {
        let mut files = Files([("a.wav", "0.5 -0.5"), ("b.wav", "0.25"), ("b.lab", "3 4\n")].into_iter().collect());
        assert!(load_manifest("", &mut files).unwrap().is_empty());
        let u = load_manifest("b\tb.wav\t2\tb.lab\na\ta.wav\n", &mut files).unwrap();
        assert_eq!(u.iter().map(|u| u.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(u[0].phone_labels, Some(vec![3, 4]));
        assert_eq!(u[0].speaker_id, Some(2));
        assert_eq!(u[1].samples, vec![0.5, -0.5]);
        assert_eq!(u[1].phone_labels, None);
        let e = load_manifest("c\tmissing.wav\n", &mut files).unwrap_err();
        assert!(e.to_string().contains("missing.wav"));
    }
}
