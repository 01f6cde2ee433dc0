//! Training loops: masked cluster prediction and the log-Mel predictor used by
//! the mel-based initial targets.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureSequence;
use crate::encoder::{sample_mask, Encoder};
use crate::error::{Error, Result};
use crate::heads::{masked_loss, HeadStack};
use crate::rng::{sub_rng, Rng as Chacha};
use crate::targets::TargetBundle;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per optimisation step.
    pub batch_utts: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Random crop length in frames; whole utterances when `None`.
    pub crop_frames: Option<usize>,
    /// Global gradient-norm clip; disabled when 0.
    pub clip_norm: f64,
    /// Weight of the loss on unmasked frames.
    pub alpha: f64,
    /// Per-stream loss weights; uniform when empty.
    pub stream_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_utts: 8,
            lr: 2e-3,
            warmup_steps: 50,
            crop_frames: Some(128),
            clip_norm: 5.0,
            alpha: 0.0,
            stream_weights: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_utts == 0 || !(self.lr > 0.0) || self.crop_frames == Some(0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("train: batch_utts >= 1, lr > 0, crop > 0 and alpha >= 0 required".into()));
        }
        Ok(())
    }

    /// Linear warmup, then linear decay to a tenth of the peak.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * (1.0 - 0.9 * frac)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// One cropped utterance of a batch.
pub struct Crop {
    pub feats: FeatureSequence,
    pub start: usize,
}

fn crop(f: &FeatureSequence, len: Option<usize>, rng: &mut Chacha) -> Result<Crop> {
    match len {
        Some(l) if l < f.frames => {
            let start = rng.random_range(0..=f.frames - l);
            let data = f.data[start * f.dims..(start + l) * f.dims].to_vec();
            Ok(Crop { feats: FeatureSequence::new(data, l, f.dims, f.frame_rate, f.kind)?, start })
        }
        _ => Ok(Crop { feats: f.clone(), start: 0 }),
    }
}

/// Span masks for a batch, resampled until at least one frame is masked.
pub fn batch_mask(lens: &[usize], p: f64, l: usize, rng: &mut impl Rng) -> Vec<bool> {
    loop {
        let m: Vec<bool> = lens.iter().flat_map(|&n| sample_mask(n, p, l, rng).masked).collect();
        if m.iter().any(|&b| b) {
            return m;
        }
    }
}

/// Masked-prediction loss of one batch on `g`.
#[allow(clippy::too_many_arguments)]
pub fn masked_prediction_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    enc: &'a Encoder<T>,
    enc_vars: &[Var],
    heads: &'a HeadStack<T>,
    head_vars: &[Var],
    feats: &[&FeatureSequence],
    targets: &[Vec<u32>],
    mask: &[bool],
    weights: &[f64],
    alpha: f64,
    drop: Option<&mut Chacha>,
) -> Result<Var> {
    let hid = enc.build(g, enc_vars, feats, Some(mask), None, drop)?;
    let top = hid.top.expect("full forward");
    let t: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    let logits = heads.build(g, head_vars, top, &t)?;
    masked_loss(g, &logits, &t, mask, weights, alpha)
}

pub(crate) fn grads_for<T: Real>(g: &mut Graph<'_, T>, vars: &[Var], store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| if store.is_trainable(ParamId(i)) { g.take_grad(v) } else { None })
        .collect()
}

fn clip(groups: &mut [&mut Vec<Option<Vec<f32>>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = groups.iter().flat_map(|g| g.iter().flatten()).flat_map(|v| v.iter()).map(|&x| (x as f64).powi(2)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in groups.iter_mut() {
            for v in g.iter_mut().flatten() {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

fn check_corpus(inputs: &[FeatureSequence], frames: &[usize]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if inputs.len() != frames.len() || inputs.iter().zip(frames).any(|(f, &n)| f.frames != n) {
        return Err(Error::shape("train", "targets are not frame-aligned with the inputs"));
    }
    Ok(())
}

/// Train encoder and heads on masked prediction of `bundle`.
pub fn train_masked(
    enc: &mut Encoder<f32>,
    heads: &mut HeadStack<f32>,
    inputs: &[FeatureSequence],
    bundle: &TargetBundle,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    bundle.validate(None)?;
    check_corpus(inputs, &bundle.frames())?;
    if heads.vocab != bundle.vocab_sizes() {
        return Err(Error::shape("train", format!("heads {:?} vs bundle {:?}", heads.vocab, bundle.vocab_sizes())));
    }
    let mut rng = sub_rng(cfg.seed, 0x7A1);
    let adam = AdamConfig::default();
    let mut st_e = AdamState::new(&enc.params);
    let mut st_h = AdamState::new(&heads.params);
    let per_epoch = inputs.len().div_ceil(cfg.batch_utts);
    let total = per_epoch * cfg.epochs;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_utts) {
            let crops = chunk.iter().map(|&u| crop(&inputs[u], cfg.crop_frames, &mut rng)).collect::<Result<Vec<_>>>()?;
            let lens: Vec<usize> = crops.iter().map(|c| c.feats.frames).collect();
            let mask = batch_mask(&lens, enc.cfg.mask_prob, enc.cfg.mask_span, &mut rng);
            let targets: Vec<Vec<u32>> = bundle
                .streams
                .iter()
                .map(|s| chunk.iter().zip(&crops).flat_map(|(&u, c)| s.ids[u][c.start..c.start + c.feats.frames].iter().copied()).collect())
                .collect();
            let feats: Vec<&FeatureSequence> = crops.iter().map(|c| &c.feats).collect();
            let mut drop_rng = sub_rng(cfg.seed, 0x10_0000 + log.steps as u64);
            let (loss, mut ge, mut gh) = {
                let mut g = Graph::new();
                let ev = enc.params.bind(&mut g, true)?;
                let hv = heads.params.bind(&mut g, true)?;
                let l = masked_prediction_loss(
                    &mut g, enc, &ev, heads, &hv, &feats, &targets, &mask, &cfg.stream_weights, cfg.alpha, Some(&mut drop_rng),
                )?;
                g.backward(l)?;
                let loss = g.value(l).data()[0] as f64;
                (loss, grads_for(&mut g, &ev, &enc.params), grads_for(&mut g, &hv, &heads.params))
            };
            clip(&mut [&mut ge, &mut gh], cfg.clip_norm);
            let lr = cfg.lr_at(log.steps, total);
            st_e.step(&mut enc.params, &ge, &adam, lr)?;
            st_h.step(&mut heads.params, &gh, &adam, lr)?;
            log.steps += 1;
            sum += loss;
        }
        let mean = sum / per_epoch as f64;
        debug!("masked epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

/// Linear regression head from the final states to log-Mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MelHead<T: Real> {
    pub params: ParamStore<T>,
}

impl<T: Real> MelHead<T> {
    pub fn new(d_model: usize, n_mels: usize, seed: u64) -> Self {
        let mut rng = sub_rng(seed, 0x3E1);
        let mut params = ParamStore::new();
        params.add_normal("mel.w", &[d_model, n_mels], 1.0 / (d_model as f64).sqrt(), &mut rng);
        params.add_zeros("mel.b", &[n_mels]);
        Self { params }
    }
}

/// L1 loss between predicted and normalised log-Mel frames over masked rows.
pub fn mel_prediction_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    enc: &'a Encoder<T>,
    enc_vars: &[Var],
    head_vars: &[Var],
    feats: &[&FeatureSequence],
    target: Tensor<T>,
    mask: &[bool],
    drop: Option<&mut Chacha>,
) -> Result<Var> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let hid = enc.build(g, enc_vars, feats, Some(mask), None, drop)?;
    let top = hid.top.expect("full forward");
    let y = g.matmul(top, head_vars[0])?;
    let y = g.add_bias(y, head_vars[1])?;
    let y = g.gather_rows(y, &rows)?;
    let t = g.constant(target)?;
    let t = g.gather_rows(t, &rows)?;
    g.l1_loss(y, t)
}

/// Train the encoder to reconstruct masked log-Mel frames (L1). `targets` are
/// per-utterance log-Mel sequences aligned with `inputs`; they are normalised
/// with the encoder's input statistics when the input is log-Mel.
pub fn train_mel_predictor(
    enc: &mut Encoder<f32>,
    inputs: &[FeatureSequence],
    targets: &[FeatureSequence],
    cfg: &TrainConfig,
) -> Result<(MelHead<f32>, TrainLog)> {
    cfg.validate()?;
    check_corpus(inputs, &targets.iter().map(|t| t.frames).collect::<Vec<_>>())?;
    let n_mels = targets[0].dims;
    let (mean, std): (Vec<f32>, Vec<f32>) = if enc.cfg.input_dims == n_mels {
        let m = enc.params.get(enc.params.find("input.mean").unwrap()).data().to_vec();
        let s = enc.params.get(enc.params.find("input.std").unwrap()).data().to_vec();
        (m, s)
    } else {
        (vec![0.0; n_mels], vec![1.0; n_mels])
    };
    let mut head = MelHead::<f32>::new(enc.cfg.d_model, n_mels, cfg.seed);
    let mut rng = sub_rng(cfg.seed, 0x3E2);
    let adam = AdamConfig::default();
    let mut st_e = AdamState::new(&enc.params);
    let mut st_h = AdamState::new(&head.params);
    let per_epoch = inputs.len().div_ceil(cfg.batch_utts);
    let total = per_epoch * cfg.epochs;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_utts) {
            let crops = chunk.iter().map(|&u| crop(&inputs[u], cfg.crop_frames, &mut rng)).collect::<Result<Vec<_>>>()?;
            let lens: Vec<usize> = crops.iter().map(|c| c.feats.frames).collect();
            let mask = batch_mask(&lens, enc.cfg.mask_prob, enc.cfg.mask_span, &mut rng);
            let mut tgt = Vec::new();
            for (&u, c) in chunk.iter().zip(&crops) {
                let t = &targets[u];
                for r in c.start..c.start + c.feats.frames {
                    tgt.extend(t.frame(r).iter().zip(mean.iter().zip(&std)).map(|(&v, (&m, &s))| (v - m) / s));
                }
            }
            let rows = tgt.len() / n_mels;
            let tgt = Tensor::matrix(rows, n_mels, tgt)?;
            let feats: Vec<&FeatureSequence> = crops.iter().map(|c| &c.feats).collect();
            let mut drop_rng = sub_rng(cfg.seed, 0x20_0000 + log.steps as u64);
            let (loss, mut ge, mut gh) = {
                let mut g = Graph::new();
                let ev = enc.params.bind(&mut g, true)?;
                let hv = head.params.bind(&mut g, true)?;
                let l = mel_prediction_loss(&mut g, enc, &ev, &hv, &feats, tgt, &mask, Some(&mut drop_rng))?;
                g.backward(l)?;
                let loss = g.value(l).data()[0] as f64;
                (loss, grads_for(&mut g, &ev, &enc.params), grads_for(&mut g, &hv, &head.params))
            };
            clip(&mut [&mut ge, &mut gh], cfg.clip_norm);
            let lr = cfg.lr_at(log.steps, total);
            st_e.step(&mut enc.params, &ge, &adam, lr)?;
            st_h.step(&mut head.params, &gh, &adam, lr)?;
            log.steps += 1;
            sum += loss;
        }
        log.epoch_loss.push(sum / per_epoch as f64);
    }
    Ok((head, log))
}
