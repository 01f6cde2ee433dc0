//! Masked-prediction transformer encoder.
//!
//! Layer outputs are numbered `0..=n_layers`. Layer 0 is the projected input
//! after mask substitution and before positional encoding; layer `i` is the
//! residual stream after block `i`. Blocks are pre-norm: self-attention then a
//! GELU feed-forward, each added back to the stream. A final layer norm over
//! the last layer feeds the prediction heads.
//!
//! Inputs are normalised with global mean/variance statistics kept as
//! non-trainable buffers (see [`Encoder::fit_input_stats`]).

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::dsp::{self, DspConfig, FeatureKind, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng::{sub_rng, Rng as Chacha};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub input_dims: usize,
    /// Input representation fed to the projection. `Waveform` is the framed
    /// waveform front-end, equivalent to a strided convolution.
    pub input_kind: FeatureKind,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub positional: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            input_dims: 40,
            input_kind: FeatureKind::Logmel,
            mask_prob: 0.065,
            mask_span: 10,
            positional: true,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Small model used by the acceptance runs on one CPU core.
    pub fn desk() -> Self {
        Self { n_layers: 4, d_model: 64, n_heads: 4, d_ff: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ff == 0 || self.input_dims == 0 {
            return bad("d_ff and input_dims must be >= 1");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must lie in (0, 1)");
        }
        if self.mask_span == 0 {
            return bad("mask_span must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Default clustering layer for model-based initial targets: the middle
    /// layer, rounded up.
    pub fn middle_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }
}

/// Frames selected by span masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub starts: Vec<usize>,
}

impl MaskSpec {
    pub fn none(n: usize) -> Self {
        Self { masked: vec![false; n], starts: Vec::new() }
    }

    pub fn all(n: usize) -> Self {
        Self { masked: vec![true; n], starts: (0..n.min(1)).collect() }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Each frame starts a span with probability `p`; a span masks `l` frames,
/// clipped at the sequence end. Spans may overlap.
pub fn sample_mask(n_frames: usize, p: f64, l: usize, rng: &mut impl Rng) -> MaskSpec {
    let mut masked = vec![false; n_frames];
    let mut starts = Vec::new();
    for t in 0..n_frames {
        if rng.random::<f64>() < p {
            starts.push(t);
            masked[t..(t + l).min(n_frames)].iter_mut().for_each(|m| *m = true);
        }
    }
    MaskSpec { masked, starts }
}

/// Encoder input features of one utterance.
pub fn input_features(u: &Utterance, dsp_cfg: &DspConfig, kind: FeatureKind) -> Result<FeatureSequence> {
    match kind {
        FeatureKind::Logmel => dsp::log_mel(&u.samples, dsp_cfg),
        FeatureKind::Mfcc => dsp::mfcc(&u.samples, dsp_cfg),
        FeatureKind::Waveform => dsp::frames(&u.samples, dsp_cfg),
        FeatureKind::Spectrum => dsp::stft_magnitude(&u.samples, dsp_cfg),
        k => Err(Error::Config(format!("{} cannot be an encoder input", k.as_str()))),
    }
}

pub fn corpus_features(utts: &[Utterance], dsp_cfg: &DspConfig, kind: FeatureKind) -> Result<Vec<FeatureSequence>> {
    utts.par_iter().map(|u| input_features(u, dsp_cfg, kind)).collect()
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    in_mean: ParamId,
    in_std: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    mask_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real> {
    pub cfg: EncoderConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

/// Graph handles produced by [`Encoder::build`].
#[derive(Clone, Debug)]
pub struct Hidden {
    /// Layer outputs `0..=upto`, each `[frames, d_model]` over the whole batch.
    pub layers: Vec<Var>,
    /// Final layer norm of the top layer, present when all blocks ran.
    pub top: Option<Var>,
    /// Row range of each utterance.
    pub segments: Vec<Range<usize>>,
}

pub fn sinusoid(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            out[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

impl<T: Real> Encoder<T> {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = sub_rng(cfg.seed, 0xE7C0);
        let (d, f, din) = (cfg.d_model, cfg.d_ff, cfg.input_dims);
        let mut p = ParamStore::new();
        let in_mean = p.add_buffer("input.mean", Tensor::zeros(&[din]));
        let in_std = p.add_buffer("input.std", Tensor::full(&[din], T::one()));
        let in_w = p.add_normal("input.w", &[din, d], 1.0 / (din as f64).sqrt(), &mut rng);
        let in_b = p.add_zeros("input.b", &[d]);
        let mask_emb = p.add_normal("mask_emb", &[d], 1.0, &mut rng);
        let sd = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                ln1_g: p.add_ones(format!("block{l}.ln1.g"), &[d]),
                ln1_b: p.add_zeros(format!("block{l}.ln1.b"), &[d]),
                wqkv: p.add_normal(format!("block{l}.attn.wqkv"), &[d, 3 * d], sd, &mut rng),
                bqkv: p.add_zeros(format!("block{l}.attn.bqkv"), &[3 * d]),
                wo: p.add_normal(format!("block{l}.attn.wo"), &[d, d], sd, &mut rng),
                bo: p.add_zeros(format!("block{l}.attn.bo"), &[d]),
                ln2_g: p.add_ones(format!("block{l}.ln2.g"), &[d]),
                ln2_b: p.add_zeros(format!("block{l}.ln2.b"), &[d]),
                w1: p.add_normal(format!("block{l}.ffn.w1"), &[d, f], sd, &mut rng),
                b1: p.add_zeros(format!("block{l}.ffn.b1"), &[f]),
                w2: p.add_normal(format!("block{l}.ffn.w2"), &[f, d], 1.0 / (f as f64).sqrt(), &mut rng),
                b2: p.add_zeros(format!("block{l}.ffn.b2"), &[d]),
            })
            .collect();
        let lnf_g = p.add_ones("final_ln.g", &[d]);
        let lnf_b = p.add_zeros("final_ln.b", &[d]);
        Ok(Self { cfg, params: p, ids: Ids { in_mean, in_std, in_w, in_b, mask_emb, blocks, lnf_g, lnf_b } })
    }

    pub fn mask_embedding_id(&self) -> ParamId {
        self.ids.mask_emb
    }

    /// Set the input normalisation buffers from corpus statistics.
    pub fn fit_input_stats(&mut self, feats: &[FeatureSequence]) -> Result<()> {
        let din = self.cfg.input_dims;
        let mut sum = vec![0.0f64; din];
        let mut sq = vec![0.0f64; din];
        let mut n = 0usize;
        for f in feats {
            self.check_dims(f)?;
            for row in f.data.chunks_exact(din) {
                for j in 0..din {
                    sum[j] += row[j] as f64;
                    sq[j] += (row[j] as f64).powi(2);
                }
            }
            n += f.frames;
        }
        if n == 0 {
            return Err(Error::Input("no frames for input statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-5)).collect();
        self.params.set("input.mean", Tensor::from_f64(&[din], &mean)?)?;
        self.params.set("input.std", Tensor::from_f64(&[din], &std)?)?;
        Ok(())
    }

    fn check_dims(&self, f: &FeatureSequence) -> Result<()> {
        if f.dims != self.cfg.input_dims {
            return Err(Error::shape("encoder", format!("input dims {} vs configured {}", f.dims, self.cfg.input_dims)));
        }
        Ok(())
    }

    fn normalized_input(&self, feats: &[&FeatureSequence]) -> Result<(Tensor<T>, Vec<Range<usize>>)> {
        let din = self.cfg.input_dims;
        let mean = self.params.get(self.ids.in_mean).data();
        let std = self.params.get(self.ids.in_std).data();
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(feats.len());
        for f in feats {
            self.check_dims(f)?;
            let start = data.len() / din;
            for row in f.data.chunks_exact(din) {
                for j in 0..din {
                    data.push((T::lit(row[j] as f64) - mean[j]) / std[j]);
                }
            }
            segments.push(start..start + f.frames);
        }
        let n = data.len() / din;
        if n == 0 {
            return Err(Error::Input("empty encoder batch".into()));
        }
        Ok((Tensor::matrix(n, din, data)?, segments))
    }

    fn dropout<'a>(&self, g: &mut Graph<'a, T>, x: Var, drop: &mut Option<&mut Chacha>) -> Result<Var> {
        let p = self.cfg.dropout;
        match drop {
            Some(rng) if p > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let n = g.value(x).len();
                let keep = T::lit(1.0 / (1.0 - p));
                let m: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
                let m = g.constant(Tensor::new(shape, m)?)?;
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Record a forward pass over a batch of utterances on `g`.
    ///
    /// `vars` come from `self.params.bind`. `masks` holds one flag per frame of
    /// the concatenated batch. Blocks run up to layer `upto` (all when `None`).
    /// Dropout is applied only when `drop` provides a random stream.
    pub fn build<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        feats: &[&FeatureSequence],
        masks: Option<&[bool]>,
        upto: Option<usize>,
        mut drop: Option<&mut Chacha>,
    ) -> Result<Hidden> {
        let upto = upto.unwrap_or(self.cfg.n_layers);
        if upto > self.cfg.n_layers {
            return Err(Error::Input(format!("layer {upto} out of range 0..={}", self.cfg.n_layers)));
        }
        let v = |id: ParamId| vars[id.0];
        let (x, segments) = self.normalized_input(feats)?;
        let n = x.rows();
        let (d, nh) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / nh;
        let x = g.constant(x)?;
        let mut h = g.matmul(x, v(self.ids.in_w))?;
        h = g.add_bias(h, v(self.ids.in_b))?;
        if let Some(m) = masks {
            h = g.mask_rows(h, v(self.ids.mask_emb), m)?;
        }
        let mut layers = vec![h];
        if upto == 0 {
            return Ok(Hidden { layers, top: None, segments });
        }
        let pe = if self.cfg.positional {
            let mut pe = Vec::with_capacity(n * d);
            for s in &segments {
                pe.extend(sinusoid(s.len(), d).into_iter().map(T::lit));
            }
            Some(g.constant(Tensor::matrix(n, d, pe)?)?)
        } else {
            None
        };
        let att_scale = 1.0 / (dh as f64).sqrt();
        for b in &self.ids.blocks[..upto] {
            let a = g.layer_norm(h, v(b.ln1_g), v(b.ln1_b), 1e-5)?;
            let qkv = g.matmul(a, v(b.wqkv))?;
            let qkv = g.add_bias(qkv, v(b.bqkv))?;
            let qk = match pe {
                Some(pe) => {
                    let ap = g.add(a, pe)?;
                    let t = g.matmul(ap, v(b.wqkv))?;
                    g.add_bias(t, v(b.bqkv))?
                }
                None => qkv,
            };
            let mut per_utt = Vec::with_capacity(segments.len());
            for s in &segments {
                let mut heads = Vec::with_capacity(nh);
                for i in 0..nh {
                    let q = g.slice(qk, s.clone(), i * dh..(i + 1) * dh)?;
                    let k = g.slice(qk, s.clone(), d + i * dh..d + (i + 1) * dh)?;
                    let vv = g.slice(qkv, s.clone(), 2 * d + i * dh..2 * d + (i + 1) * dh)?;
                    let sc = g.matmul_t(q, k)?;
                    let sc = g.scale(sc, att_scale)?;
                    let pr = g.softmax(sc)?;
                    heads.push(g.matmul(pr, vv)?);
                }
                per_utt.push(if nh == 1 { heads[0] } else { g.concat(&heads, 1)? });
            }
            let o = if per_utt.len() == 1 { per_utt[0] } else { g.concat(&per_utt, 0)? };
            let o = g.matmul(o, v(b.wo))?;
            let o = g.add_bias(o, v(b.bo))?;
            let o = self.dropout(g, o, &mut drop)?;
            h = g.add(h, o)?;
            let f = g.layer_norm(h, v(b.ln2_g), v(b.ln2_b), 1e-5)?;
            let f = g.matmul(f, v(b.w1))?;
            let f = g.add_bias(f, v(b.b1))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, v(b.w2))?;
            let f = g.add_bias(f, v(b.b2))?;
            let f = self.dropout(g, f, &mut drop)?;
            h = g.add(h, f)?;
            layers.push(h);
        }
        let top = if upto == self.cfg.n_layers {
            Some(g.layer_norm(h, v(self.ids.lnf_g), v(self.ids.lnf_b), 1e-5)?)
        } else {
            None
        };
        Ok(Hidden { layers, top, segments })
    }

    /// Hidden states of layers `0..=upto` for one utterance (no gradient).
    pub fn forward_upto(&self, feats: &FeatureSequence, mask: Option<&MaskSpec>, upto: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let m = mask.map(|m| m.masked.as_slice());
        if let Some(m) = m {
            if m.len() != feats.frames {
                return Err(Error::shape("encoder", format!("mask of {} for {} frames", m.len(), feats.frames)));
            }
        }
        let hid = self.build(&mut g, &vars, &[feats], m, Some(upto), None)?;
        Ok(hid.layers.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// All layer outputs `0..=n_layers` for one utterance.
    pub fn forward(&self, feats: &FeatureSequence, mask: Option<&MaskSpec>) -> Result<Vec<Tensor<T>>> {
        self.forward_upto(feats, mask, self.cfg.n_layers)
    }

    /// Unmasked features of `layer` for every utterance.
    pub fn extract_layer_features(&self, inputs: &[FeatureSequence], layer: usize, kind: FeatureKind) -> Result<Vec<FeatureSequence>> {
        if layer > self.cfg.n_layers {
            return Err(Error::Input(format!("layer {layer} out of range 0..={}", self.cfg.n_layers)));
        }
        inputs
            .par_iter()
            .map(|f| {
                let hs = self.forward_upto(f, None, layer)?;
                let t = &hs[layer];
                let data = t.data().iter().map(|v| v.as_() as f32).collect();
                FeatureSequence::new(data, f.frames, self.cfg.d_model, f.frame_rate, kind)
            })
            .collect()
    }

    /// Every layer's unmasked output for every utterance, as f32.
    pub fn all_layers(&self, inputs: &[FeatureSequence]) -> Result<Vec<Vec<Tensor<f32>>>> {
        inputs.par_iter().map(|f| Ok(self.forward(f, None)?.iter().map(Tensor::cast).collect())).collect()
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            let id = self.params.find(name).unwrap();
            if self.params.is_trainable(id) {
                params.add(name, t.cast());
            } else {
                params.add_buffer(name, t.cast());
            }
        }
        Encoder { cfg: self.cfg.clone(), params, ids: self.ids.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn tiny(positional: bool) -> EncoderConfig {
        EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, input_dims: 3, positional, seed: 5, ..Default::default() }
    }

    fn feats(n: usize, seed: u64) -> FeatureSequence {
        let mut r = rng(seed);
        let data = (0..n * 3).map(|_| r.random_range(-1.0f32..1.0)).collect();
        FeatureSequence::new(data, n, 3, 100.0, FeatureKind::Logmel).unwrap()
    }

    #[test]
    fn mask_edge_cases() {
        let mut r = rng(1);
        assert_eq!(sample_mask(100, 0.0, 10, &mut r).count(), 0);
        for _ in 0..50 {
            let m = sample_mask(1, 0.5, 10, &mut r);
            assert!(m.count() == 0 || m.count() == 1);
        }
        let m = sample_mask(30, 0.2, 4, &mut r);
        for (t, &f) in m.masked.iter().enumerate() {
            let covered = m.starts.iter().any(|&s| t >= s && t < s + 4);
            assert_eq!(f, covered);
        }
    }

    #[test]
    fn empty_mask_ignores_mask_embedding() {
        let mut enc = Encoder::<f64>::new(tiny(true)).unwrap();
        let x = feats(7, 1);
        let a = enc.forward(&x, Some(&MaskSpec::none(7))).unwrap();
        enc.params.set("mask_emb", Tensor::full(&[8], 3.0)).unwrap();
        let b = enc.forward(&x, Some(&MaskSpec::none(7))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_layer0_is_mask_embedding() {
        let enc = Encoder::<f64>::new(tiny(true)).unwrap();
        let hs = enc.forward(&feats(5, 2), Some(&MaskSpec::all(5))).unwrap();
        let e = enc.params.get(enc.mask_embedding_id()).data();
        for t in 0..5 {
            assert_eq!(hs[0].row(t), e);
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let enc = Encoder::<f64>::new(tiny(false)).unwrap();
        let x = feats(6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.frame(p));
        }
        let y = FeatureSequence::new(px, 6, 3, 100.0, FeatureKind::Logmel).unwrap();
        let a = enc.forward(&x, Some(&MaskSpec::all(6))).unwrap();
        let b = enc.forward(&y, Some(&MaskSpec::all(6))).unwrap();
        for l in 0..=2 {
            for (i, &p) in perm.iter().enumerate() {
                for (u, v) in b[l].row(i).iter().zip(a[l].row(p)) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_extraction() {
        let enc = Encoder::<f32>::new(tiny(true)).unwrap();
        let xs = vec![feats(4, 1), feats(9, 2)];
        let l0 = enc.extract_layer_features(&xs, 0, FeatureKind::Layer).unwrap();
        let all = enc.forward(&xs[1], None).unwrap();
        assert_eq!(l0[1].data, all[0].data());
        let l2 = enc.extract_layer_features(&xs, 2, FeatureKind::Layer).unwrap();
        assert_eq!(l2, enc.extract_layer_features(&xs, 2, FeatureKind::Layer).unwrap());
        assert_eq!((l2[1].frames, l2[1].dims), (9, 8));
        assert!(enc.extract_layer_features(&xs, 3, FeatureKind::Layer).is_err());
        let bad = FeatureSequence::new(vec![0.0; 8], 2, 4, 100.0, FeatureKind::Logmel).unwrap();
        assert!(enc.forward(&bad, None).is_err());
    }

    #[test]
    fn batching_matches_single_utterances() {
        let enc = Encoder::<f64>::new(tiny(true)).unwrap();
        let (a, b) = (feats(4, 7), feats(6, 8));
        let mut g = Graph::new();
        let vars = enc.params.bind(&mut g, false).unwrap();
        let hid = enc.build(&mut g, &vars, &[&a, &b], None, None, None).unwrap();
        let top = g.value(*hid.layers.last().unwrap()).clone();
        let single = enc.forward(&b, None).unwrap();
        for t in 0..6 {
            for (u, v) in top.row(4 + t).iter().zip(single[2].row(t)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Encoder::<f32>::new(tiny(true)).unwrap();
        let b = Encoder::<f32>::new(tiny(true)).unwrap();
        assert_eq!(a.params.hash_trainable(), b.params.hash_trainable());
        let c = Encoder::<f32>::new(EncoderConfig { seed: 6, ..tiny(true) }).unwrap();
        assert_ne!(a.params.hash_trainable(), c.params.hash_trainable());
        assert!(Encoder::<f32>::new(EncoderConfig { n_heads: 3, ..tiny(true) }).is_err());
    }
}
