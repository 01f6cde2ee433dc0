//! Weighted-layer-sum probes on a frozen encoder.
//!
//! Three proxy tasks: frame phone classification, utterance speaker
//! classification (mean-pooled) and clean log-Mel regression from noisy input.
//! Each probe learns softmax weights over layers `0..=n_layers` jointly with a
//! small head. Utterances whose id hashes to 0 mod 5 form the eval split.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_eval, Utterance};
use crate::dsp::{self, DspConfig};
use crate::encoder::{corpus_features, Encoder};
use crate::error::{Error, Result};
use crate::formats::Report;
use crate::rng::sub_rng;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::train::grads_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Phone,
    Speaker,
    Denoise,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Phone, ProbeKind::Speaker, ProbeKind::Denoise];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Phone => "phone",
            ProbeKind::Speaker => "speaker",
            ProbeKind::Denoise => "denoise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn needs(self) -> &'static str {
        match self {
            ProbeKind::Phone => "per-frame phone labels",
            ProbeKind::Speaker => "speaker ids",
            ProbeKind::Denoise => "clean reference audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_utts: usize,
    /// Hidden width of the denoising MLP.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 1e-2, batch_utts: 8, hidden: 64, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_utts == 0 || self.hidden == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe: epochs, batch_utts, hidden and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Layer weights, raw and after softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl LayerWeights {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|&r| (r - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Self { normalized: e.iter().map(|v| v / s).collect(), raw }
    }

    pub fn uniform(n_layers: usize) -> Self {
        Self::from_raw(vec![0.0; n_layers + 1])
    }
}

/// Encoder layer outputs and labels of a corpus, cached for probing.
#[derive(Clone, Debug)]
pub struct ProbeData {
    pub ids: Vec<String>,
    /// `[utterance][layer]`, each `frames x d_model`, standardized per layer.
    pub layers: Vec<Vec<Tensor<f32>>>,
    pub phones: Option<Vec<Vec<u32>>>,
    pub speakers: Option<Vec<u32>>,
    /// Noisy and clean log-Mel, both standardized with the noisy training-split statistics.
    pub noisy: Option<Vec<Tensor<f32>>>,
    pub clean: Option<Vec<Tensor<f32>>>,
    pub eval: Vec<bool>,
}

/// Per-dimension mean and std over the rows of the `fit` sequences.
fn stats(seqs: &[Tensor<f32>], fit: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let dims = seqs[0].cols();
    let mut sum = vec![0.0f64; dims];
    let mut sq = vec![0.0f64; dims];
    let mut n = 0usize;
    for (s, _) in seqs.iter().zip(fit).filter(|(_, &f)| f) {
        for row in s.data().chunks(dims) {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-5)).collect();
    (mean, std)
}

fn apply(seqs: &mut [Tensor<f32>], (mean, std): &(Vec<f64>, Vec<f64>)) {
    let dims = mean.len();
    for s in seqs {
        for row in s.data_mut().chunks_mut(dims) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - mean[j]) / std[j]) as f32;
            }
        }
    }
}

fn to_tensor(f: dsp::FeatureSequence) -> Result<Tensor<f32>> {
    Tensor::matrix(f.frames, f.dims, f.data)
}

impl ProbeData {
    /// Run the frozen encoder over every utterance and collect whichever labels
    /// the whole corpus carries.
    pub fn build(enc: &Encoder<f32>, utts: &[Utterance], dsp_cfg: &DspConfig) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Input("probe corpus is empty".into()));
        }
        let inputs = corpus_features(utts, dsp_cfg, enc.cfg.input_kind)?;
        let mut layers = enc.all_layers(&inputs)?;
        let eval: Vec<bool> = utts.iter().map(|u| is_eval(&u.id)).collect();
        let fit: Vec<bool> = eval.iter().map(|e| !e).collect();
        for l in 0..=enc.cfg.n_layers {
            let mut seqs: Vec<Tensor<f32>> = layers.iter_mut().map(|u| std::mem::replace(&mut u[l], Tensor::scalar(0.0))).collect();
            let st = stats(&seqs, &fit);
            apply(&mut seqs, &st);
            for (u, s) in layers.iter_mut().zip(seqs) {
                u[l] = s;
            }
        }
        let phones = if utts.iter().all(|u| u.phone_labels.is_some()) {
            let p: Vec<Vec<u32>> = utts.iter().map(|u| u.phone_labels.clone().unwrap()).collect();
            if p.iter().zip(&inputs).any(|(p, f)| p.len() != f.frames) {
                return Err(Error::shape("probe", "phone labels are not frame-aligned with the features"));
            }
            Some(p)
        } else {
            None
        };
        let speakers = utts.iter().map(|u| u.speaker_id).collect::<Option<Vec<u32>>>();
        let (noisy, clean) = if utts.iter().all(|u| u.clean_samples.is_some()) {
            let pairs = utts
                .par_iter()
                .map(|u| {
                    let n = to_tensor(dsp::log_mel(&u.samples, dsp_cfg)?)?;
                    let c = to_tensor(dsp::log_mel(u.clean_samples.as_ref().unwrap(), dsp_cfg)?)?;
                    Ok((n, c))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut noisy, mut clean): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let st = stats(&noisy, &fit);
            apply(&mut noisy, &st);
            apply(&mut clean, &st);
            (Some(noisy), Some(clean))
        } else {
            (None, None)
        };
        Ok(Self { ids: utts.iter().map(|u| u.id.clone()).collect(), layers, phones, speakers, noisy, clean, eval })
    }

    pub fn n_layers(&self) -> usize {
        self.layers[0].len() - 1
    }

    pub fn d_model(&self) -> usize {
        self.layers[0][0].cols()
    }

    fn check(&self, kind: ProbeKind) -> Result<()> {
        let ok = match kind {
            ProbeKind::Phone => self.phones.is_some(),
            ProbeKind::Speaker => self.speakers.is_some(),
            ProbeKind::Denoise => self.clean.is_some(),
        };
        if !ok {
            return Err(Error::MissingLabels { task: kind.as_str(), needs: kind.needs() });
        }
        Ok(())
    }

    pub fn split(&self, eval: bool) -> Vec<usize> {
        (0..self.ids.len()).filter(|&u| self.eval[u] == eval).collect()
    }

    /// Output width of the head for `kind`.
    pub fn n_outputs(&self, kind: ProbeKind) -> usize {
        match kind {
            ProbeKind::Phone => self.phones.iter().flatten().flatten().map(|&p| p as usize + 1).max().unwrap_or(1),
            ProbeKind::Speaker => self.speakers.iter().flatten().map(|&s| s as usize + 1).max().unwrap_or(1),
            ProbeKind::Denoise => self.noisy.as_ref().map_or(1, |n| n[0].cols()),
        }
    }
}

/// A trained probe: layer weights plus head.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub kind: ProbeKind,
    /// "probe.raw" `[1, n_layers+1]` followed by the head.
    pub params: ParamStore<f32>,
}

impl Probe {
    pub fn new(kind: ProbeKind, n_layers: usize, d_model: usize, n_out: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = sub_rng(seed, 0x9B0E + kind as u64);
        let mut params = ParamStore::new();
        params.add_zeros("probe.raw", &[1, n_layers + 1]);
        match kind {
            ProbeKind::Phone | ProbeKind::Speaker => {
                params.add_normal("probe.w", &[d_model, n_out], 1.0 / (d_model as f64).sqrt(), &mut rng);
                params.add_zeros("probe.b", &[n_out]);
            }
            ProbeKind::Denoise => {
                params.add_normal("probe.w1", &[d_model, hidden], 1.0 / (d_model as f64).sqrt(), &mut rng);
                params.add_zeros("probe.b1", &[hidden]);
                params.add_zeros("probe.w2", &[hidden, n_out]);
                params.add_zeros("probe.b2", &[n_out]);
            }
        }
        Self { kind, params }
    }

    pub fn weights(&self) -> LayerWeights {
        LayerWeights::from_raw(self.params.get(self.params.find("probe.raw").unwrap()).to_f64())
    }
}

/// `Σ_l softmax(raw)_l · h_l` for one utterance.
fn weighted_sum<'a>(g: &mut Graph<'a, f32>, raw: Var, layers: &'a [Tensor<f32>]) -> Result<Var> {
    let w = g.softmax(raw)?;
    let mut acc = None;
    for (l, t) in layers.iter().enumerate() {
        let h = g.constant_ref(t)?;
        let h = g.scale_by(h, w, l)?;
        acc = Some(match acc {
            None => h,
            Some(a) => g.add(a, h)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Logits (per frame, or one row per utterance) or predicted clean frames.
fn head_output<'a>(g: &mut Graph<'a, f32>, vars: &[Var], kind: ProbeKind, data: &'a ProbeData, u: usize) -> Result<Var> {
    let x = weighted_sum(g, vars[0], &data.layers[u])?;
    match kind {
        ProbeKind::Phone => {
            let y = g.matmul(x, vars[1])?;
            g.add_bias(y, vars[2])
        }
        ProbeKind::Speaker => {
            let m = g.mean_rows(x)?;
            let y = g.matmul(m, vars[1])?;
            g.add_bias(y, vars[2])
        }
        ProbeKind::Denoise => {
            let h = g.matmul(x, vars[1])?;
            let h = g.add_bias(h, vars[2])?;
            let h = g.gelu(h)?;
            let y = g.matmul(h, vars[3])?;
            let y = g.add_bias(y, vars[4])?;
            let noisy = g.constant_ref(&data.noisy.as_ref().expect("checked")[u])?;
            g.add(noisy, y)
        }
    }
}

fn batch_loss<'a>(g: &mut Graph<'a, f32>, vars: &[Var], kind: ProbeKind, data: &'a ProbeData, utts: &[usize]) -> Result<Var> {
    let outs = utts.iter().map(|&u| head_output(g, vars, kind, data, u)).collect::<Result<Vec<_>>>()?;
    let y = g.concat(&outs, 0)?;
    match kind {
        ProbeKind::Phone => {
            let t: Vec<usize> = utts.iter().flat_map(|&u| data.phones.as_ref().unwrap()[u].iter().map(|&p| p as usize)).collect();
            g.cross_entropy(y, &t)
        }
        ProbeKind::Speaker => {
            let t: Vec<usize> = utts.iter().map(|&u| data.speakers.as_ref().unwrap()[u] as usize).collect();
            g.cross_entropy(y, &t)
        }
        ProbeKind::Denoise => {
            let parts = utts.iter().map(|&u| g.constant_ref(&data.clean.as_ref().unwrap()[u])).collect::<Result<Vec<_>>>()?;
            let c = g.concat(&parts, 0)?;
            g.mse_loss(y, c)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub probe: Probe,
    pub weights: LayerWeights,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Eval-split metric after training.
    pub metric: f64,
}

/// Train layer weights and head jointly on the training split. The encoder
/// outputs in `data` are constants; nothing upstream is touched.
pub fn probe_train(data: &ProbeData, kind: ProbeKind, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    data.check(kind)?;
    let train = data.split(false);
    if train.is_empty() {
        return Err(Error::Input("probe training split is empty".into()));
    }
    let mut probe = Probe::new(kind, data.n_layers(), data.d_model(), data.n_outputs(kind), cfg.hidden, cfg.seed);
    let mut state = AdamState::new(&probe.params);
    let adam = AdamConfig::default();
    let mut rng = sub_rng(cfg.seed, 0x9B1);
    let mut order = train.clone();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_utts) {
            let (loss, grads) = {
                let mut g = Graph::new();
                let vars = probe.params.bind(&mut g, true)?;
                let l = batch_loss(&mut g, &vars, kind, data, chunk)?;
                g.backward(l)?;
                (g.value(l).data()[0] as f64, grads_for(&mut g, &vars, &probe.params))
            };
            state.step(&mut probe.params, &grads, &adam, cfg.lr)?;
            sum += loss;
            steps += 1;
        }
        loss_history.push(sum / steps as f64);
    }
    let metric = probe_eval(data, &probe)?;
    Ok(ProbeOutcome { weights: probe.weights(), probe, loss_history, metric })
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", format!("{} predictions, {} labels", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// `1 - mse(pred, clean) / mse(noisy, clean)`; 0 for the identity predictor.
pub fn denoise_improvement(pred: &[f32], noisy: &[f32], clean: &[f32]) -> Result<f64> {
    if pred.len() != clean.len() || noisy.len() != clean.len() || clean.is_empty() {
        return Err(Error::shape("denoise_improvement", "length mismatch"));
    }
    let mse = |a: &[f32]| a.iter().zip(clean).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / clean.len() as f64;
    let base = mse(noisy);
    if base == 0.0 {
        return Err(Error::Input("noisy input equals the clean reference".into()));
    }
    Ok(1.0 - mse(pred) / base)
}

/// Metric of `probe` on the eval split: frame accuracy, utterance accuracy or
/// denoising MSE improvement.
pub fn probe_eval(data: &ProbeData, probe: &Probe) -> Result<f64> {
    data.check(probe.kind)?;
    let eval = data.split(true);
    if eval.is_empty() {
        return Err(Error::Input("probe eval split is empty".into()));
    }
    let outs = eval
        .par_iter()
        .map(|&u| {
            let mut g = Graph::new();
            let vars = probe.params.bind(&mut g, false)?;
            let y = head_output(&mut g, &vars, probe.kind, data, u)?;
            Ok(g.value(y).clone())
        })
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    match probe.kind {
        ProbeKind::Phone => {
            let pred: Vec<u32> = outs.iter().flat_map(|t| t.data().chunks(t.cols()).map(argmax).collect::<Vec<_>>()).collect();
            let truth: Vec<u32> = eval.iter().flat_map(|&u| data.phones.as_ref().unwrap()[u].iter().copied()).collect();
            accuracy(&pred, &truth)
        }
        ProbeKind::Speaker => {
            let pred: Vec<u32> = outs.iter().map(|t| argmax(t.data())).collect();
            let truth: Vec<u32> = eval.iter().map(|&u| data.speakers.as_ref().unwrap()[u]).collect();
            accuracy(&pred, &truth)
        }
        ProbeKind::Denoise => {
            let pred: Vec<f32> = outs.iter().flat_map(|t| t.data().iter().copied()).collect();
            let noisy: Vec<f32> = eval.iter().flat_map(|&u| data.noisy.as_ref().unwrap()[u].data().iter().copied()).collect();
            let clean: Vec<f32> = eval.iter().flat_map(|&u| data.clean.as_ref().unwrap()[u].data().iter().copied()).collect();
            denoise_improvement(&pred, &noisy, &clean)
        }
    }
}

/// Long-format table: one row per (task, layer) with the normalized weight and
/// its magnitude relative to the task's largest weight.
pub fn layer_weight_report(tasks: &[(ProbeKind, LayerWeights)], config_hash: &str) -> Result<Report> {
    if tasks.is_empty() {
        return Err(Error::Input("layer weight report needs at least one task".into()));
    }
    let mut r = Report::new(config_hash, &["task", "layer", "weight", "magnitude"]);
    r.comments.push("layer 0 is the encoder input".into());
    for (kind, w) in tasks {
        let max = w.normalized.iter().copied().fold(0.0, f64::max);
        for (l, &v) in w.normalized.iter().enumerate() {
            r.push_row(vec![kind.as_str().into(), l.to_string(), v.to_string(), (v / max).to_string()])?;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};
    use crate::encoder::EncoderConfig;

    fn tiny() -> (Encoder<f32>, Vec<Utterance>, DspConfig) {
        let spec = CorpusSpec { n_speakers: 2, n_phones: 3, n_utterances: 10, utterance_seconds: 0.3, ..Default::default() };
        let utts = generate(&spec).unwrap();
        let cfg = EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, ..Default::default() };
        (Encoder::new(cfg).unwrap(), utts, DspConfig::default())
    }

    #[test]
    fn weights_are_probability_vectors() {
        assert_eq!(LayerWeights::uniform(0).normalized, vec![1.0]);
        let u = LayerWeights::uniform(4);
        assert!(u.normalized.iter().all(|&w| w == 0.2));
        let w = LayerWeights::from_raw(vec![3.0, -1.0, 700.0, 0.5]);
        assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.normalized.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn metric_definitions() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        let truth = [0, 0, 0, 1, 2];
        assert_eq!(accuracy(&[0; 5], &truth).unwrap(), 0.6);
        let noisy = [0.5f32, 1.0, -2.0];
        let clean = [0.0f32, 1.5, -1.0];
        assert_eq!(denoise_improvement(&noisy, &noisy, &clean).unwrap(), 0.0);
        assert_eq!(denoise_improvement(&clean, &noisy, &clean).unwrap(), 1.0);
    }

    #[test]
    fn untrained_denoise_head_is_identity() {
        let (enc, utts, dsp_cfg) = tiny();
        let data = ProbeData::build(&enc, &utts, &dsp_cfg).unwrap();
        let n = data.n_outputs(ProbeKind::Denoise);
        let p = Probe::new(ProbeKind::Denoise, data.n_layers(), data.d_model(), n, 4, 0);
        assert_eq!(probe_eval(&data, &p).unwrap(), 0.0);
    }

    #[test]
    fn training_leaves_encoder_alone_and_is_deterministic() {
        let (enc, utts, dsp_cfg) = tiny();
        let before = enc.params.hash_all();
        let data = ProbeData::build(&enc, &utts, &dsp_cfg).unwrap();
        let cfg = ProbeConfig { epochs: 2, ..Default::default() };
        for kind in ProbeKind::ALL {
            let a = probe_train(&data, kind, &cfg).unwrap();
            let b = probe_train(&data, kind, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.weights.normalized.len(), 3);
            assert!((a.weights.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(enc.params.hash_all(), before);
    }

    #[test]
    fn missing_labels_name_the_task() {
        let (enc, mut utts, dsp_cfg) = tiny();
        utts[0].clean_samples = None;
        utts[1].speaker_id = None;
        let data = ProbeData::build(&enc, &utts, &dsp_cfg).unwrap();
        let cfg = ProbeConfig::default();
        let e = probe_train(&data, ProbeKind::Denoise, &cfg).unwrap_err();
        assert!(e.to_string().contains("denoise"));
        assert!(matches!(probe_train(&data, ProbeKind::Speaker, &cfg), Err(Error::MissingLabels { task: "speaker", .. })));
    }

    #[test]
    fn weight_report() {
        let r = layer_weight_report(&[(ProbeKind::Phone, LayerWeights::uniform(3))], "h").unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.windows(2).all(|w| w[0][2..] == w[1][2..]));
        let two = layer_weight_report(
            &[(ProbeKind::Phone, LayerWeights::from_raw(vec![0.3, 1.0])), (ProbeKind::Speaker, LayerWeights::from_raw(vec![2.0, -1.0]))],
            "h",
        )
        .unwrap();
        for task in ["phone", "speaker"] {
            let s: f64 = two.rows.iter().filter(|r| r[0] == task).map(|r| r[2].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let text = two.to_tsv().unwrap();
        assert_eq!(Report::parse(&text).unwrap().to_tsv().unwrap(), text);
        assert!(layer_weight_report(&[], "h").is_err());
    }
}
