//! Iterative clustering driver: train, extract, cluster, retrain.
//!
//! Iteration 1 trains on the initial targets. Iteration `i > 1` clusters the
//! model of iteration `i - 1` and trains a freshly initialised encoder on the
//! result. The run stops when no probed task improves or at `max_iterations`.

mod grid;
mod store;

pub use grid::{experiment_grid, GridAxis, GRID_COLUMNS};
pub use store::{MemoryStore, RunStore};

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::Utterance;
use crate::dsp::{FeatureKind, FeatureSequence};
use crate::encoder::{corpus_features, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::formats::{self, Checkpoint};
use crate::heads::{HeadMode, HeadStack};
use crate::kmeans::{Codebook, KmeansConfig};
use crate::probes::{probe_train, ProbeData, ProbeKind};
use crate::rvq::{self, RvqConfig, RvqModel};
use crate::targets::{
    default_multilayer_set, scheduled_cluster_layer, initial_targets, layer_targets, multilayer_targets, rvq_targets,
    InitialKind, InitialTargetStrategy, TargetBundle, TargetContext,
};
use crate::train::train_masked;

/// How targets of iterations after the first are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// One clustered layer.
    Layer,
    /// Several clustered layers, one stream each.
    MultiLayer,
    /// k-means stream of one layer plus residual quantizer levels.
    Rvq,
}

impl TargetMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer" => Some(TargetMode::Layer),
            "multi_layer" | "multilayer" => Some(TargetMode::MultiLayer),
            "rvq" => Some(TargetMode::Rvq),
            _ => None,
        }
    }
}

/// Per-task tolerance of the convergence rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epsilons {
    pub phone: f64,
    pub speaker: f64,
    pub denoise: f64,
}

impl Default for Epsilons {
    fn default() -> Self {
        Self { phone: 0.002, speaker: 0.002, denoise: 0.01 }
    }
}

impl Epsilons {
    pub fn get(&self, kind: ProbeKind) -> f64 {
        match kind {
            ProbeKind::Phone => self.phone,
            ProbeKind::Speaker => self.speaker,
            ProbeKind::Denoise => self.denoise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub initial: InitialTargetStrategy,
    pub targets: TargetMode,
    /// Clustered layer in `Layer` and `Rvq` mode. When `None`, layer 6 of 12
    /// (scaled) builds the second iteration and layer 9 of 12 the later ones.
    pub cluster_layer: Option<usize>,
    /// Clustered layers in `MultiLayer` mode; odd layers 3..11 of 12 scaled when empty.
    pub layers: Vec<usize>,
    pub k: usize,
    /// Head arrangement whenever there is more than one stream.
    pub head_mode: HeadMode,
    pub rvq_epochs: usize,
    pub max_iterations: usize,
    pub epsilons: Epsilons,
    pub tasks: Vec<ProbeKind>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            initial: InitialTargetStrategy::new(InitialKind::MfccClusters, 100),
            targets: TargetMode::Layer,
            cluster_layer: None,
            layers: Vec::new(),
            k: 100,
            head_mode: HeadMode::Flat,
            rvq_epochs: 10,
            max_iterations: 2,
            epsilons: Epsilons::default(),
            tasks: ProbeKind::ALL.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        self.initial.validate()?;
        let bad = |m: String| Err(Error::Config(format!("pipeline: {m}")));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        let e = &self.epsilons;
        if [e.phone, e.speaker, e.denoise].iter().any(|v| !(*v >= 0.0)) {
            return bad("epsilons must be non-negative".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one probe task is required".into());
        }
        if self.cluster_layer.is_some_and(|l| l > enc.n_layers) || self.layers.iter().any(|&l| l > enc.n_layers) {
            return bad(format!("clustered layers must lie in 0..={}", enc.n_layers));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layers must be strictly increasing".into());
        }
        Ok(())
    }

    /// Layer clustered to build the targets of `iteration`.
    pub fn cluster_layer_for(&self, enc: &EncoderConfig, iteration: usize) -> usize {
        self.cluster_layer.unwrap_or_else(|| scheduled_cluster_layer(enc.n_layers, iteration))
    }

    pub fn layer_set_for(&self, enc: &EncoderConfig) -> Vec<usize> {
        if self.layers.is_empty() {
            default_multilayer_set(enc.n_layers)
        } else {
            self.layers.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub name: String,
    pub vocab_size: usize,
    pub layer_or_level: usize,
}

/// Outcome of one iteration, persisted as `iter<i>/metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub strategy: String,
    pub streams: Vec<StreamInfo>,
    pub head_mode: HeadMode,
    pub checkpoint: String,
    pub codebooks: Vec<String>,
    pub targets: String,
    pub rvq: Option<String>,
    /// Hash of the encoder parameters before training.
    pub init_hash: String,
    /// Hash of the trained encoder parameters.
    pub checkpoint_hash: String,
    pub train_loss: Vec<f64>,
    /// Eval-split probe metric per task.
    pub metrics: BTreeMap<ProbeKind, f64>,
    pub layer_weights: BTreeMap<ProbeKind, Vec<f64>>,
    /// Tasks that did not improve over the previous iteration.
    pub converged_tasks: Vec<ProbeKind>,
    pub converged: bool,
}

impl IterationRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("iteration record: {e}")))
    }
}

/// Convergence of the latest record against the one before it. A task has
/// converged when its metric did not rise by more than its epsilon; the run
/// has converged when every task has.
pub fn check_convergence(records: &[IterationRecord], eps: &Epsilons) -> Result<(bool, BTreeMap<ProbeKind, bool>)> {
    let [.., prev, last] = records else {
        return Err(Error::Input("convergence needs at least two iterations".into()));
    };
    converged_metrics(&prev.metrics, &last.metrics, eps)
}

pub fn converged_metrics(
    prev: &BTreeMap<ProbeKind, f64>,
    last: &BTreeMap<ProbeKind, f64>,
    eps: &Epsilons,
) -> Result<(bool, BTreeMap<ProbeKind, bool>)> {
    let mut per = BTreeMap::new();
    for (&task, &now) in last {
        let before = prev.get(&task).ok_or_else(|| Error::Input(format!("task {} missing from the previous iteration", task.as_str())))?;
        per.insert(task, now <= before + eps.get(task));
    }
    Ok((per.values().all(|&c| c), per))
}

/// Paths of one iteration's artifacts inside a run store.
pub fn iter_dir(i: usize) -> String {
    format!("iter{i}")
}

/// Everything a single iteration produces besides the record.
pub struct IterationOutput {
    pub checkpoint: Checkpoint,
    pub bundle: TargetBundle,
    pub codebooks: Vec<Codebook>,
    pub rvq: Option<RvqModel>,
    pub init_hash: String,
    pub train_loss: Vec<f64>,
    pub strategy: String,
}

/// Shared inputs of every iteration.
pub struct Prepared<'c> {
    pub utts: &'c [Utterance],
    pub inputs: Vec<FeatureSequence>,
    pub logmel: Option<Vec<FeatureSequence>>,
}

impl<'c> Prepared<'c> {
    pub fn new(utts: &'c [Utterance], cfg: &ExperimentConfig) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let inputs = corpus_features(utts, &cfg.dsp, cfg.encoder.input_kind)?;
        Ok(Self { utts, inputs, logmel: None })
    }

    fn logmel(&mut self, cfg: &ExperimentConfig) -> Result<&[FeatureSequence]> {
        if self.logmel.is_none() {
            self.logmel = Some(if cfg.encoder.input_kind == FeatureKind::Logmel {
                self.inputs.clone()
            } else {
                corpus_features(self.utts, &cfg.dsp, FeatureKind::Logmel)?
            });
        }
        Ok(self.logmel.as_deref().unwrap())
    }
}

/// Targets for iteration `index > 1` from the previous model.
pub fn next_targets(
    prep: &mut Prepared<'_>,
    cfg: &ExperimentConfig,
    prev: &Encoder<f32>,
    index: usize,
) -> Result<(TargetBundle, Vec<Codebook>, Option<RvqModel>, String)> {
    let p = &cfg.pipeline;
    let km = KmeansConfig { k: p.k, ..cfg.kmeans.clone() };
    match p.targets {
        TargetMode::Layer => {
            let layer = p.cluster_layer_for(&prev.cfg, index);
            let (b, cb) = layer_targets(prev, &prep.inputs, layer, &km, index - 1)?;
            Ok((b, vec![cb], None, format!("layer L{layer} k={}", p.k)))
        }
        TargetMode::MultiLayer => {
            let layers = p.layer_set_for(&prev.cfg);
            let (b, books) = multilayer_targets(prev, &prep.inputs, &layers, &[p.k], &km, index - 1)?;
            let names: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
            Ok((b, books, None, format!("multilayer L{} k={} {}", names.join("+"), p.k, p.head_mode.as_str())))
        }
        TargetMode::Rvq => {
            let layer = p.cluster_layer_for(&prev.cfg, index);
            let (b, cb) = layer_targets(prev, &prep.inputs, layer, &km, index - 1)?;
            let logmel = prep.logmel(cfg)?.to_vec();
            let rcfg = RvqConfig { d_in: logmel[0].dims, k1: p.k, ..cfg.rvq.clone() };
            let mut model = RvqModel::new(rcfg)?;
            let names: Vec<String> = prep.utts.iter().map(|u| u.id.clone()).collect();
            let pinned = model.cfg.pinned.then_some(b.streams[0].ids.as_slice());
            rvq::train(&mut model, &names, &logmel, pinned, p.rvq_epochs)?;
            let bundle = rvq_targets(&model, &logmel, &b.streams[0], model.cfg.levels)?;
            let desc = format!("rvq L{layer} k={} levels={} {}", p.k, model.cfg.levels, p.head_mode.as_str());
            Ok((bundle, vec![cb], Some(model), desc))
        }
    }
}

/// Train a fresh encoder and heads on `bundle`.
pub fn train_on(prep: &Prepared<'_>, cfg: &ExperimentConfig, bundle: &TargetBundle) -> Result<(Checkpoint, String, Vec<f64>)> {
    let mut enc = Encoder::<f32>::new(cfg.encoder.clone())?;
    let init_hash = enc.params.hash_trainable();
    enc.fit_input_stats(&prep.inputs)?;
    let mode = if bundle.n_streams() == 1 { HeadMode::Single } else { cfg.pipeline.head_mode };
    let mut heads = HeadStack::<f32>::new(mode, &bundle.vocab_sizes(), enc.cfg.d_model, cfg.encoder.seed)?;
    let log = train_masked(&mut enc, &mut heads, &prep.inputs, bundle, &cfg.train)?;
    Ok((Checkpoint { encoder: enc, heads: Some(heads) }, init_hash, log.epoch_loss))
}

/// Probe every configured task on a trained encoder.
pub fn probe_tasks(
    utts: &[Utterance],
    cfg: &ExperimentConfig,
    enc: &Encoder<f32>,
) -> Result<(BTreeMap<ProbeKind, f64>, BTreeMap<ProbeKind, Vec<f64>>)> {
    let data = ProbeData::build(enc, utts, &cfg.dsp)?;
    let mut metrics = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for &task in &cfg.pipeline.tasks {
        let out = probe_train(&data, task, &cfg.probe)?;
        info!("probe {}: {:.4}", task.as_str(), out.metric);
        metrics.insert(task, out.metric);
        weights.insert(task, out.weights.normalized);
    }
    Ok((metrics, weights))
}

/// One full iteration without persistence or probing.
pub fn run_iteration(prep: &mut Prepared<'_>, cfg: &ExperimentConfig, index: usize, prev: Option<&Encoder<f32>>) -> Result<IterationOutput> {
    let (bundle, codebooks, rvq, strategy) = match prev {
        None => {
            let ctx = TargetContext { utts: prep.utts, dsp: &cfg.dsp, enc: &cfg.encoder, train: &cfg.train, kmeans: &cfg.kmeans };
            let init = initial_targets(&ctx, &cfg.pipeline.initial)?;
            let s = &cfg.pipeline.initial;
            (init.bundle, vec![init.codebook], None, format!("initial {} k={}", s.kind.as_str(), s.k))
        }
        Some(p) => next_targets(prep, cfg, p, index)?,
    };
    info!("iteration {index}: {strategy}");
    let (checkpoint, init_hash, train_loss) = train_on(prep, cfg, &bundle)?;
    Ok(IterationOutput { checkpoint, bundle, codebooks, rvq, init_hash, train_loss, strategy })
}

fn codebook_name(cb: &Codebook) -> String {
    match cb.source.layer {
        Some(l) => format!("codebook-L{l}"),
        None => format!("codebook-{}", cb.source.kind.as_str()),
    }
}

fn persist(store: &mut dyn RunStore, index: usize, out: &IterationOutput, rec: &IterationRecord) -> Result<()> {
    let dir = iter_dir(index);
    for cb in &out.codebooks {
        store.put(&format!("{dir}/{}", codebook_name(cb)), &formats::encode_codebook(cb))?;
    }
    store.put(&rec.targets, &formats::encode_targets(&out.bundle))?;
    if let (Some(path), Some(m)) = (&rec.rvq, &out.rvq) {
        store.put(path, &formats::encode_rvq(m))?;
    }
    store.put(&rec.checkpoint, &formats::encode_checkpoint(&out.checkpoint))?;
    store.put(&format!("{dir}/metrics.json"), rec.to_json().as_bytes())
}

fn load_completed(store: &dyn RunStore, index: usize) -> Result<Option<(IterationRecord, Encoder<f32>)>> {
    let Some(bytes) = store.get(&format!("{}/metrics.json", iter_dir(index)))? else {
        return Ok(None);
    };
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("metrics.json is not UTF-8".into()))?;
    let rec = IterationRecord::from_json(&text)?;
    if rec.index != index {
        return Err(Error::Format(format!("{} holds iteration {}", iter_dir(index), rec.index)));
    }
    let ckpt = store.get(&rec.checkpoint)?.ok_or_else(|| Error::Format(format!("{} is missing", rec.checkpoint)))?;
    Ok(Some((rec, formats::decode_checkpoint(&ckpt)?.encoder)))
}

/// Run the iterative pipeline. Completed iterations found in `store` are
/// reused; each new iteration is persisted as soon as it finishes.
pub fn run(utts: &[Utterance], cfg: &ExperimentConfig, store: &mut dyn RunStore) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    let mut prep = Prepared::new(utts, cfg)?;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut prev: Option<Encoder<f32>> = None;
    for index in 1..=cfg.pipeline.max_iterations {
        if let Some((rec, enc)) = load_completed(store, index)? {
            info!("iteration {index}: already complete");
            let done = rec.converged;
            records.push(rec);
            prev = Some(enc);
            if done {
                break;
            }
            continue;
        }
        let out = run_iteration(&mut prep, cfg, index, prev.as_ref())?;
        let (metrics, layer_weights) = probe_tasks(utts, cfg, &out.checkpoint.encoder)?;
        let (converged, converged_tasks) = match records.last() {
            Some(p) => {
                let (c, per) = converged_metrics(&p.metrics, &metrics, &cfg.pipeline.epsilons)?;
                (c, per.into_iter().filter(|&(_, v)| v).map(|(k, _)| k).collect())
            }
            None => (false, Vec::new()),
        };
        let dir = iter_dir(index);
        let rec = IterationRecord {
            index,
            strategy: out.strategy.clone(),
            streams: out
                .bundle
                .streams
                .iter()
                .map(|s| StreamInfo { name: s.name.clone(), vocab_size: s.vocab_size, layer_or_level: s.layer_or_level })
                .collect(),
            head_mode: out.checkpoint.heads.as_ref().map_or(HeadMode::Single, |h| h.mode),
            checkpoint: format!("{dir}/ckpt"),
            codebooks: out.codebooks.iter().map(|cb| format!("{dir}/{}", codebook_name(cb))).collect(),
            targets: format!("{dir}/targets"),
            rvq: out.rvq.as_ref().map(|_| format!("{dir}/rvq")),
            init_hash: out.init_hash.clone(),
            checkpoint_hash: out.checkpoint.encoder.params.hash_all(),
            train_loss: out.train_loss.clone(),
            metrics,
            layer_weights,
            converged_tasks,
            converged,
        };
        persist(store, index, &out, &rec)?;
        records.push(rec);
        prev = Some(out.checkpoint.encoder);
        if converged {
            info!("converged after iteration {index}");
            break;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};

    fn rec(index: usize, m: &[(ProbeKind, f64)]) -> IterationRecord {
        IterationRecord {
            index,
            strategy: "s".into(),
            streams: vec![],
            head_mode: HeadMode::Single,
            checkpoint: String::new(),
            codebooks: vec![],
            targets: String::new(),
            rvq: None,
            init_hash: String::new(),
            checkpoint_hash: String::new(),
            train_loss: vec![0.1, 1.0 / 3.0],
            metrics: m.iter().copied().collect(),
            layer_weights: BTreeMap::new(),
            converged_tasks: vec![],
            converged: false,
        }
    }

    #[test]
    fn convergence_rule() {
        let e0 = Epsilons { phone: 0.0, speaker: 0.0, denoise: 0.0 };
        let p = ProbeKind::Phone;
        let s = ProbeKind::Speaker;
        assert!(check_convergence(&[rec(1, &[(p, 0.80)]), rec(2, &[(p, 0.80)])], &e0).unwrap().0);
        assert!(!check_convergence(&[rec(1, &[(p, 0.80)]), rec(2, &[(p, 0.85)])], &e0).unwrap().0);
        let (all, per) = check_convergence(&[rec(1, &[(p, 0.80), (s, 0.5)]), rec(2, &[(p, 0.85), (s, 0.5)])], &e0).unwrap();
        assert!(!all);
        assert_eq!(per[&s], true);
        assert_eq!(per[&p], false);
        assert!(check_convergence(&[rec(1, &[(p, 0.8)])], &e0).is_err());
        let eps = Epsilons::default();
        assert!(check_convergence(&[rec(1, &[(p, 0.80)]), rec(2, &[(p, 0.8015)])], &eps).unwrap().0);
    }

    #[test]
    fn record_json_roundtrip() {
        let r = rec(3, &[(ProbeKind::Phone, 0.1 + 0.2), (ProbeKind::Denoise, -1e-300)]);
        let s = r.to_json();
        let back = IterationRecord::from_json(&s).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), s);
    }

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus = CorpusSpec { n_speakers: 2, n_phones: 3, n_utterances: 10, utterance_seconds: 0.4, ..Default::default() };
        cfg.encoder = EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, ..Default::default() };
        cfg.train.epochs = 1;
        cfg.train.warmup_steps = 1;
        cfg.probe.epochs = 1;
        cfg.pipeline.initial.k = 4;
        cfg.pipeline.k = 4;
        cfg.rvq.k_r = 4;
        cfg.rvq.d_hidden = 8;
        cfg.rvq.d_z = 4;
        cfg.rvq.levels = 2;
        cfg.pipeline.rvq_epochs = 1;
        cfg
    }

    #[test]
    fn single_iteration_and_resume() {
        let cfg = ExperimentConfig { pipeline: PipelineConfig { max_iterations: 1, ..tiny_cfg().pipeline }, ..tiny_cfg() };
        let utts = generate(&cfg.corpus).unwrap();
        let mut store = MemoryStore::default();
        let recs = run(&utts, &cfg, &mut store).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].metrics.len(), 3);
        let snapshot = store.clone();
        let again = run(&utts, &cfg, &mut store).unwrap();
        assert_eq!(again, recs);
        assert_eq!(store, snapshot);
    }

    #[test]
    fn fresh_encoder_each_iteration() {
        for targets in [TargetMode::Layer, TargetMode::MultiLayer, TargetMode::Rvq] {
            let mut cfg = tiny_cfg();
            cfg.pipeline.targets = targets;
            cfg.pipeline.epsilons = Epsilons { phone: 1.0, speaker: 1.0, denoise: 1.0 };
            cfg.pipeline.max_iterations = 3;
            let utts = generate(&cfg.corpus).unwrap();
            let recs = run(&utts, &cfg, &mut MemoryStore::default()).unwrap();
            assert_eq!(recs.len(), 2, "huge epsilons converge at iteration 2");
            assert!(recs[1].converged);
            let fresh = Encoder::<f32>::new(cfg.encoder.clone()).unwrap().params.hash_trainable();
            assert!(recs.iter().all(|r| r.init_hash == fresh));
            assert_ne!(recs[0].checkpoint_hash, recs[1].checkpoint_hash);
            assert_eq!(recs.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2]);
        }
    }
}
