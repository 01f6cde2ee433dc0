//! Experiment configuration as flat `key = value` text with `[section]`
//! headers.
//!
//! Values are JSON scalars or inline arrays; nested fields use dotted keys
//! (`initial.kind = "mfcc"`). Keys missing from a file keep their defaults.
//! The canonical text lists every key in sorted order, and its SHA-256 is the
//! config hash written into reports.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::dsp::DspConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kmeans::KmeansConfig;
use crate::pipeline::PipelineConfig;
use crate::probes::ProbeConfig;
use crate::rvq::RvqConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub dsp: DspConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub kmeans: KmeansConfig,
    pub probe: ProbeConfig,
    pub rvq: RvqConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            dsp: DspConfig::default(),
            encoder: EncoderConfig::desk(),
            train: TrainConfig::default(),
            kmeans: KmeansConfig::default(),
            probe: ProbeConfig::default(),
            rvq: RvqConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn insert(root: &mut Value, path: &[&str], v: Value) {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let m = cur.as_object_mut().unwrap();
        if i + 1 == path.len() {
            m.insert(seg.to_string(), v);
            return;
        }
        cur = m.entry(seg.to_string()).or_insert(Value::Null);
    }
}

impl ExperimentConfig {
    /// Canonical text: every section and key, sorted.
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("serialisable");
        let mut s = String::new();
        for (section, body) in v.as_object().unwrap() {
            s.push_str(&format!("[{section}]\n"));
            let mut kv = Vec::new();
            flatten("", body, &mut kv);
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// Parse a config file over the defaults. Unknown sections and keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default()).expect("serialisable");
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if root.get(name).is_none() {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let sec = section.as_deref().ok_or_else(|| err("key before any [section]".into()))?;
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(err(format!("malformed key {key:?}")));
            }
            if root[sec].get(path[0]).is_none() {
                return Err(err(format!("unknown key {sec}.{key}")));
            }
            let value: Value = serde_json::from_str(value.trim()).map_err(|e| err(format!("value of {key}: {e}")))?;
            let mut full = vec![sec];
            full.extend(path);
            insert(&mut root, &full, value);
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.dsp.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.kmeans.validate()?;
        self.probe.validate()?;
        self.rvq.validate()?;
        self.pipeline.validate(&self.encoder)?;
        Ok(())
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed every model-side component; the corpus seed is left alone.
    pub fn set_seed(&mut self, seed: u64) {
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.kmeans.seed = seed;
        self.probe.seed = seed;
        self.rvq.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::Batch;
    use crate::targets::InitialKind;

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = ExperimentConfig::default();
        c.kmeans.batch = Batch::MiniBatch(500);
        c.corpus.noise_snr_db = None;
        c.train.stream_weights = vec![0.5, 1.0 / 3.0];
        let text = c.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_files_override_defaults() {
        let text = "# desk run\n[pipeline]\ninitial.kind = \"random\"\nk = 50\n\n[corpus]\nn_utterances = 20\n";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.pipeline.initial.kind, InitialKind::RandomModelClusters);
        assert_eq!(c.pipeline.k, 50);
        assert_eq!(c.corpus.n_utterances, 20);
        assert_eq!(c.encoder, EncoderConfig::desk());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = ExperimentConfig::from_text("[corpus]\nn_speakers = 8\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(matches!(ExperimentConfig::from_text("[nope]\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ExperimentConfig::from_text("k = 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ExperimentConfig::from_text("[corpus]\nseed = x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ExperimentConfig::from_text("[corpus]\nn_speakers = \"8\"\n"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_text("[corpus]\nn_speakers = 0\n").is_err());
    }
}
