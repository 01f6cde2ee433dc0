//! Prediction-target construction: initial targets, single-layer and
//! multi-layer cluster targets, and RVQ token streams.

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::dsp::{DspConfig, FeatureKind, FeatureSequence};
use crate::encoder::{corpus_features, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::kmeans::{fit_corpus, targets_for_corpus, Codebook, KmeansConfig};
use crate::rvq::RvqModel;
use crate::train::{train_mel_predictor, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetStream {
    pub name: String,
    /// Frame ids per utterance.
    pub ids: Vec<Vec<u32>>,
    pub vocab_size: usize,
    /// Encoder layer for cluster streams, quantizer level (1-based) for RVQ streams.
    pub layer_or_level: usize,
}

/// Frame-aligned target streams, highest layer (or lowest RVQ level) first.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TargetBundle {
    pub streams: Vec<TargetStream>,
}

impl TargetBundle {
    pub fn single(stream: TargetStream) -> Self {
        Self { streams: vec![stream] }
    }

    pub fn n_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.streams.first().map_or(0, |s| s.ids.len())
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.streams.iter().map(|s| s.vocab_size).collect()
    }

    /// Frame count of every utterance, taken from the first stream.
    pub fn frames(&self) -> Vec<usize> {
        self.streams.first().map_or_else(Vec::new, |s| s.ids.iter().map(Vec::len).collect())
    }

    /// Ids of all streams for utterance `u`.
    pub fn utterance(&self, u: usize) -> Vec<&[u32]> {
        self.streams.iter().map(|s| s.ids[u].as_slice()).collect()
    }

    /// Streams aligned with each other and, when given, with `frames`; ids in range.
    pub fn validate(&self, frames: Option<&[usize]>) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::Input("target bundle has no streams".into()));
        }
        let lens = self.frames();
        if let Some(f) = frames {
            if f != lens.as_slice() {
                return Err(Error::shape("targets", "stream lengths differ from feature frame counts"));
            }
        }
        for s in &self.streams {
            if s.vocab_size == 0 {
                return Err(Error::Input(format!("stream {} has vocab 0", s.name)));
            }
            if s.ids.len() != lens.len() || s.ids.iter().zip(&lens).any(|(v, &n)| v.len() != n) {
                return Err(Error::shape("targets", format!("stream {} is not frame-aligned", s.name)));
            }
            if s.ids.iter().flatten().any(|&i| i as usize >= s.vocab_size) {
                return Err(Error::Input(format!("stream {} has ids outside vocab {}", s.name, s.vocab_size)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialKind {
    #[serde(rename = "mfcc")]
    MfccClusters,
    #[serde(rename = "mels")]
    MelPredictorClusters,
    #[serde(rename = "random")]
    RandomModelClusters,
}

impl InitialKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InitialKind::MfccClusters => "mfcc",
            InitialKind::MelPredictorClusters => "mels",
            InitialKind::RandomModelClusters => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mfcc" => Some(InitialKind::MfccClusters),
            "mels" | "mel" => Some(InitialKind::MelPredictorClusters),
            "random" => Some(InitialKind::RandomModelClusters),
            _ => None,
        }
    }
}

/// Paper-scale layer index (of a 12-layer model) mapped onto an `n_layers`
/// model, rounded down and kept within `1..=n_layers`.
pub fn scaled_layer(layer_of_12: usize, n_layers: usize) -> usize {
    (layer_of_12 * n_layers / 12).clamp(1, n_layers.max(1))
}

/// The commonly used clustering layer (9 of 12), scaled to the model depth.
pub fn default_cluster_layer(n_layers: usize) -> usize {
    scaled_layer(9, n_layers)
}

/// Layer clustered for the targets of `iteration`: 6 of 12 when building the
/// second iteration, 9 of 12 afterwards.
pub fn scheduled_cluster_layer(n_layers: usize, iteration: usize) -> usize {
    if iteration <= 2 {
        scaled_layer(6, n_layers)
    } else {
        default_cluster_layer(n_layers)
    }
}

/// Odd layers 3..=11 of 12 scaled to the model depth, deduplicated, ascending.
pub fn default_multilayer_set(n_layers: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [3, 5, 7, 9, 11].iter().map(|&l| scaled_layer(l, n_layers)).collect();
    v.dedup();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialTargetStrategy {
    pub kind: InitialKind,
    pub k: usize,
    /// Clustered layer for the model-based kinds; middle layer when `None`.
    pub tap_layer: Option<usize>,
}

impl InitialTargetStrategy {
    pub fn new(kind: InitialKind, k: usize) -> Self {
        Self { kind, k, tap_layer: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("initial targets need k >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// Everything needed to turn a corpus into model inputs and targets.
#[derive(Clone, Debug)]
pub struct TargetContext<'c> {
    pub utts: &'c [Utterance],
    pub dsp: &'c DspConfig,
    pub enc: &'c EncoderConfig,
    pub train: &'c TrainConfig,
    pub kmeans: &'c KmeansConfig,
}

pub struct InitialTargets {
    pub bundle: TargetBundle,
    pub codebook: Codebook,
    /// The mel predictor or random model whose features were clustered.
    pub model: Option<Encoder<f32>>,
}

fn stream(name: String, ids: Vec<Vec<u32>>, vocab_size: usize, layer_or_level: usize) -> TargetStream {
    TargetStream { name, ids, vocab_size, layer_or_level }
}

/// Build iteration-1 targets under one of the three initial strategies.
pub fn initial_targets(ctx: &TargetContext<'_>, strategy: &InitialTargetStrategy) -> Result<InitialTargets> {
    strategy.validate()?;
    let km = KmeansConfig { k: strategy.k, ..ctx.kmeans.clone() };
    match strategy.kind {
        InitialKind::MfccClusters => {
            let feats = corpus_features(ctx.utts, ctx.dsp, FeatureKind::Mfcc)?;
            let cb = fit_corpus(&feats, &km, None, 0)?;
            let ids = targets_for_corpus(&feats, &cb)?;
            Ok(InitialTargets { bundle: TargetBundle::single(stream("mfcc".into(), ids, km.k, 0)), codebook: cb, model: None })
        }
        InitialKind::MelPredictorClusters | InitialKind::RandomModelClusters => {
            let tap = strategy.tap_layer.unwrap_or_else(|| ctx.enc.middle_layer());
            let inputs = corpus_features(ctx.utts, ctx.dsp, ctx.enc.input_kind)?;
            let mut enc = Encoder::<f32>::new(ctx.enc.clone())?;
            enc.fit_input_stats(&inputs)?;
            let kind = if strategy.kind == InitialKind::MelPredictorClusters {
                let logmel = if ctx.enc.input_kind == FeatureKind::Logmel {
                    inputs.clone()
                } else {
                    corpus_features(ctx.utts, ctx.dsp, FeatureKind::Logmel)?
                };
                train_mel_predictor(&mut enc, &inputs, &logmel, ctx.train)?;
                FeatureKind::Layer
            } else {
                FeatureKind::RandomLayer
            };
            let feats = enc.extract_layer_features(&inputs, tap, kind)?;
            let cb = fit_corpus(&feats, &km, Some(tap), 0)?;
            let ids = targets_for_corpus(&feats, &cb)?;
            let name = format!("{}-L{tap}", strategy.kind.as_str());
            Ok(InitialTargets { bundle: TargetBundle::single(stream(name, ids, km.k, tap)), codebook: cb, model: Some(enc) })
        }
    }
}

/// Cluster one layer of a trained model.
pub fn layer_targets(
    model: &Encoder<f32>,
    inputs: &[FeatureSequence],
    layer: usize,
    km: &KmeansConfig,
    iteration: usize,
) -> Result<(TargetBundle, Codebook)> {
    let feats = model.extract_layer_features(inputs, layer, FeatureKind::Layer)?;
    let cb = fit_corpus(&feats, km, Some(layer), iteration)?;
    let ids = targets_for_corpus(&feats, &cb)?;
    Ok((TargetBundle::single(stream(format!("L{layer}"), ids, km.k, layer)), cb))
}

/// One independently clustered stream per layer, highest layer first.
/// `k_per_layer` holds one k per layer or a single shared k.
pub fn multilayer_targets(
    model: &Encoder<f32>,
    inputs: &[FeatureSequence],
    layers: &[usize],
    k_per_layer: &[usize],
    km: &KmeansConfig,
    iteration: usize,
) -> Result<(TargetBundle, Vec<Codebook>)> {
    if layers.is_empty() || layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("layers must be non-empty and strictly increasing, got {layers:?}")));
    }
    if k_per_layer.len() != 1 && k_per_layer.len() != layers.len() {
        return Err(Error::Config(format!("{} k values for {} layers", k_per_layer.len(), layers.len())));
    }
    let mut streams = Vec::new();
    let mut books = Vec::new();
    for (i, &layer) in layers.iter().enumerate().rev() {
        let k = if k_per_layer.len() == 1 { k_per_layer[0] } else { k_per_layer[i] };
        let (b, cb) = layer_targets(model, inputs, layer, &KmeansConfig { k, ..km.clone() }, iteration)?;
        streams.extend(b.streams);
        books.push(cb);
    }
    Ok((TargetBundle { streams }, books))
}

/// k-means stream followed by RVQ levels `2..=levels`.
pub fn rvq_targets(rvq: &RvqModel, logmel: &[FeatureSequence], kmeans: &TargetStream, levels: usize) -> Result<TargetBundle> {
    if levels == 0 || levels > rvq.cfg.levels {
        return Err(Error::Config(format!("rvq levels {levels} outside 1..={}", rvq.cfg.levels)));
    }
    if kmeans.ids.len() != logmel.len() {
        return Err(Error::shape("rvq_targets", "cluster ids and features differ in utterance count"));
    }
    let mut streams = vec![TargetStream { layer_or_level: 1, ..kmeans.clone() }];
    if levels > 1 {
        let codes = logmel
            .iter()
            .zip(&kmeans.ids)
            .map(|(f, ids)| rvq.codes_for(f, rvq.cfg.pinned.then_some(ids.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        for l in 1..levels {
            let ids = codes.iter().map(|c| c[l].clone()).collect();
            streams.push(stream(format!("rvq{}", l + 1), ids, rvq.cfg.k_r, l + 1));
        }
    }
    Ok(TargetBundle { streams })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};

    fn small_corpus() -> Vec<Utterance> {
        generate(&CorpusSpec { n_utterances: 4, n_speakers: 2, n_phones: 3, utterance_seconds: 0.5, ..Default::default() }).unwrap()
    }

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, ..Default::default() }
    }

    #[test]
    fn layer_mapping() {
        assert_eq!(default_cluster_layer(6), 4);
        assert_eq!(default_multilayer_set(6), vec![1, 2, 3, 4, 5]);
        assert_eq!(default_cluster_layer(12), 9);
        assert_eq!(default_multilayer_set(12), vec![3, 5, 7, 9, 11]);
        assert_eq!(default_cluster_layer(4), 3);
        assert_eq!(scheduled_cluster_layer(12, 2), 6);
        assert_eq!(scheduled_cluster_layer(12, 3), 9);
        assert_eq!(scheduled_cluster_layer(6, 2), 3);
        assert_eq!(scheduled_cluster_layer(4, 2), 2);
        assert_eq!(scheduled_cluster_layer(4, 4), 3);
    }

    #[test]
    fn random_strategy_is_deterministic_with_one_stream() {
        let utts = small_corpus();
        let (dsp, enc, tr, km) = (DspConfig::default(), enc_cfg(), TrainConfig::default(), KmeansConfig::default());
        let ctx = TargetContext { utts: &utts, dsp: &dsp, enc: &enc, train: &tr, kmeans: &km };
        let s = InitialTargetStrategy::new(InitialKind::RandomModelClusters, 5);
        let a = initial_targets(&ctx, &s).unwrap();
        let b = initial_targets(&ctx, &s).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.bundle.n_streams(), 1);
        assert_eq!(a.bundle.streams[0].vocab_size, 5);
        assert_eq!(a.bundle.streams[0].layer_or_level, 1);
        assert_eq!(a.codebook.source.kind, FeatureKind::RandomLayer);
        a.bundle.validate(Some(&vec![48; 4])).unwrap();
        assert!(initial_targets(&ctx, &InitialTargetStrategy::new(InitialKind::MfccClusters, 1)).is_err());
    }

    #[test]
    fn layer_and_multilayer_agree() {
        let utts = small_corpus();
        let inputs = corpus_features(&utts, &DspConfig::default(), FeatureKind::Logmel).unwrap();
        let mut enc = Encoder::<f32>::new(enc_cfg()).unwrap();
        enc.fit_input_stats(&inputs).unwrap();
        let km = KmeansConfig::with_k(4, 1);
        let (single, _) = layer_targets(&enc, &inputs, 2, &km, 1).unwrap();
        let (multi, books) = multilayer_targets(&enc, &inputs, &[2], &[4], &km, 1).unwrap();
        assert_eq!(single, multi);
        let (multi, books2) = multilayer_targets(&enc, &inputs, &[0, 1, 2], &[4], &km, 1).unwrap();
        assert_eq!(books.len(), 1);
        assert_eq!(multi.streams.iter().map(|s| s.layer_or_level).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert_eq!(books2.iter().map(|b| b.source.layer).collect::<Vec<_>>(), vec![Some(2), Some(1), Some(0)]);
        multi.validate(Some(&vec![48; 4])).unwrap();
        assert!(multilayer_targets(&enc, &inputs, &[2, 1], &[4], &km, 1).is_err());
        let (one, _) = layer_targets(&enc, &inputs, 1, &KmeansConfig::with_k(1, 0), 1).unwrap();
        assert!(one.streams[0].ids.iter().flatten().all(|&i| i == 0));
    }
}
