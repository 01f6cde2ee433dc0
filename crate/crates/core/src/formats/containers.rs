//! TGTS, CKPT, RVQM and CDBK containers.

use serde::{Deserialize, Serialize};

use super::{decode_tensor, encode_tensor, Dec, Enc, TensorData};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{HeadMode, HeadStack};
use crate::kmeans::{Codebook, Source, Standardizer};
use crate::rvq::{RvqConfig, RvqModel};
use crate::targets::{TargetBundle, TargetStream};
use crate::tensor::{ParamStore, Tensor};

pub const TARGETS_MAGIC: &[u8; 4] = b"TGTS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const RVQ_MAGIC: &[u8; 4] = b"RVQM";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"CDBK";
pub const CONTAINER_VERSION: u32 = 1;

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format(format!("{what} header: {e}")))
}

fn encode_params(prefix: &str, p: &ParamStore<f32>, e: &mut Enc) {
    for (name, t) in p.iter() {
        e.str(&format!("{prefix}{name}"));
        e.u8(p.is_trainable(p.find(name).unwrap()) as u8);
        encode_tensor(&TensorData::F32(t.clone()), e);
    }
}

/// Read `count` entries into stores selected by name prefix.
fn decode_params(d: &mut Dec<'_>, count: usize, stores: &mut [(&str, &mut ParamStore<f32>)]) -> Result<()> {
    let mut seen = vec![0usize; stores.len()];
    for _ in 0..count {
        let name = d.str()?;
        let trainable = d.u8()? != 0;
        let t: Tensor<f32> = decode_tensor(d)?.into_real()?;
        let (i, (prefix, store)) = stores
            .iter_mut()
            .enumerate()
            .find(|(_, (p, _))| name.starts_with(*p))
            .ok_or_else(|| Error::Format(format!("unexpected entry {name}")))?;
        let local = &name[prefix.len()..];
        let id = store.find(local).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if store.is_trainable(id) != trainable {
            return Err(Error::Format(format!("entry {name}: trainable flag mismatch")));
        }
        store.set(local, t)?;
        seen[i] += 1;
    }
    for ((prefix, store), n) in stores.iter().zip(seen) {
        if n != store.len() {
            return Err(Error::Format(format!("{prefix}: {n} of {} parameters present", store.len())));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct HeadsMeta {
    mode: HeadMode,
    vocab: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    heads: Option<HeadsMeta>,
}

/// Encoder parameters plus the prediction heads it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder<f32>,
    pub heads: Option<HeadStack<f32>>,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.u32(CONTAINER_VERSION);
    let meta = CheckpointMeta {
        encoder: c.encoder.cfg.clone(),
        heads: c.heads.as_ref().map(|h| HeadsMeta { mode: h.mode, vocab: h.vocab.clone() }),
    };
    e.str(&json(&meta));
    let n = c.encoder.params.len() + c.heads.as_ref().map_or(0, |h| h.params.len());
    e.u32(n as u32);
    encode_params("encoder/", &c.encoder.params, &mut e);
    if let Some(h) = &c.heads {
        encode_params("heads/", &h.params, &mut e);
    }
    e.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Dec::new(bytes);
    d.magic(CHECKPOINT_MAGIC)?;
    d.version(CONTAINER_VERSION, "checkpoint")?;
    let meta: CheckpointMeta = from_json(&d.str()?, "checkpoint")?;
    let n = d.u32()? as usize;
    let mut encoder = Encoder::<f32>::new(meta.encoder)?;
    let mut heads = match &meta.heads {
        Some(h) => Some(HeadStack::<f32>::new(h.mode, &h.vocab, encoder.cfg.d_model, 0)?),
        None => None,
    };
    {
        let mut stores: Vec<(&str, &mut ParamStore<f32>)> = vec![("encoder/", &mut encoder.params)];
        if let Some(h) = heads.as_mut() {
            stores.push(("heads/", &mut h.params));
        }
        decode_params(&mut d, n, &mut stores)?;
    }
    d.finish()?;
    Ok(Checkpoint { encoder, heads })
}

pub fn encode_rvq(m: &RvqModel) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(RVQ_MAGIC);
    e.u32(CONTAINER_VERSION);
    e.str(&json(&m.cfg));
    e.u32(m.params.len() as u32);
    encode_params("", &m.params, &mut e);
    e.0
}

pub fn decode_rvq(bytes: &[u8]) -> Result<RvqModel> {
    let mut d = Dec::new(bytes);
    d.magic(RVQ_MAGIC)?;
    d.version(CONTAINER_VERSION, "rvq model")?;
    let cfg: RvqConfig = from_json(&d.str()?, "rvq model")?;
    let n = d.u32()? as usize;
    let mut m = RvqModel::new(cfg)?;
    decode_params(&mut d, n, &mut [("", &mut m.params)])?;
    d.finish()?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct CodebookMeta {
    k: usize,
    dim: usize,
    source: Source,
    standardized: bool,
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(CODEBOOK_MAGIC);
    e.u32(CONTAINER_VERSION);
    let meta = CodebookMeta { k: cb.k, dim: cb.dim, source: cb.source.clone(), standardized: cb.standardizer.is_some() };
    e.str(&json(&meta));
    let f64s = |v: &[f64]| TensorData::F64(Tensor::new(vec![v.len()], v.to_vec()).expect("1-d"));
    encode_tensor(&TensorData::F64(Tensor::new(vec![cb.k, cb.dim], cb.centroids.clone()).expect("k x dim")), &mut e);
    encode_tensor(&f64s(&[cb.inertia]), &mut e);
    encode_tensor(&f64s(&cb.history), &mut e);
    if let Some(s) = &cb.standardizer {
        encode_tensor(&f64s(&s.mean), &mut e);
        encode_tensor(&f64s(&s.std), &mut e);
    }
    e.0
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut d = Dec::new(bytes);
    d.magic(CODEBOOK_MAGIC)?;
    d.version(CONTAINER_VERSION, "codebook")?;
    let meta: CodebookMeta = from_json(&d.str()?, "codebook")?;
    let mut next = |want: Option<&[usize]>| -> Result<Vec<f64>> {
        let t: Tensor<f64> = decode_tensor(&mut d)?.into_real()?;
        if want.is_some_and(|w| w != t.shape()) {
            return Err(Error::Format(format!("codebook tensor shape {:?}, expected {want:?}", t.shape())));
        }
        Ok(t.into_data())
    };
    let centroids = next(Some(&[meta.k, meta.dim]))?;
    let inertia = next(Some(&[1]))?[0];
    let history = next(None)?;
    let standardizer = if meta.standardized {
        Some(Standardizer { mean: next(Some(&[meta.dim]))?, std: next(Some(&[meta.dim]))? })
    } else {
        None
    };
    d.finish()?;
    let mut cb = Codebook::new(centroids, meta.k, meta.dim)?;
    cb.source = meta.source;
    cb.inertia = inertia;
    cb.history = history;
    cb.standardizer = standardizer;
    Ok(cb)
}

pub fn encode_targets(b: &TargetBundle) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(TARGETS_MAGIC);
    e.u32(CONTAINER_VERSION);
    e.u32(b.streams.len() as u32);
    for s in &b.streams {
        e.str(&s.name);
        e.u64(s.vocab_size as u64);
        e.u64(s.layer_or_level as u64);
    }
    for s in &b.streams {
        let lens: Vec<u32> = s.ids.iter().map(|v| v.len() as u32).collect();
        encode_tensor(&TensorData::u32_vec(vec![lens.len()], lens), &mut e);
        let flat: Vec<u32> = s.ids.concat();
        encode_tensor(&TensorData::u32_vec(vec![flat.len()], flat), &mut e);
    }
    e.0
}

pub fn decode_targets(bytes: &[u8]) -> Result<TargetBundle> {
    let mut d = Dec::new(bytes);
    d.magic(TARGETS_MAGIC)?;
    d.version(CONTAINER_VERSION, "targets")?;
    let n = d.u32()? as usize;
    let headers = (0..n).map(|_| Ok((d.str()?, d.u64()? as usize, d.u64()? as usize))).collect::<Result<Vec<_>>>()?;
    let mut streams = Vec::with_capacity(n);
    for (name, vocab_size, layer_or_level) in headers {
        let (_, lens) = decode_tensor(&mut d)?.into_u32()?;
        let (_, flat) = decode_tensor(&mut d)?.into_u32()?;
        if lens.iter().map(|&l| l as usize).sum::<usize>() != flat.len() {
            return Err(Error::Format(format!("stream {name}: lengths do not add up to the id count")));
        }
        let mut ids = Vec::with_capacity(lens.len());
        let mut at = 0;
        for l in lens {
            ids.push(flat[at..at + l as usize].to_vec());
            at += l as usize;
        }
        streams.push(TargetStream { name, ids, vocab_size, layer_or_level });
    }
    d.finish()?;
    let b = TargetBundle { streams };
    if !b.streams.is_empty() {
        b.validate(None).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::{fit, KmeansConfig};

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = EncoderConfig { n_layers: 1, d_model: 4, n_heads: 2, d_ff: 8, input_dims: 3, ..Default::default() };
        let encoder = Encoder::<f32>::new(cfg).unwrap();
        let heads = Some(HeadStack::<f32>::new(HeadMode::Conditional, &[3, 5], 4, 7).unwrap());
        for c in [Checkpoint { encoder: encoder.clone(), heads }, Checkpoint { encoder, heads: None }] {
            let a = encode_checkpoint(&c);
            let back = decode_checkpoint(&a).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back), a);
        }
    }

    #[test]
    fn codebook_roundtrip() {
        let x = [0.0f64, 1.0, 10.0, 11.0, 3.0, 4.0];
        for standardize in [false, true] {
            let cb = fit(&x, 2, &KmeansConfig { k: 2, standardize, ..Default::default() }).unwrap();
            let a = encode_codebook(&cb);
            let back = decode_codebook(&a).unwrap();
            assert_eq!(back, cb);
            assert_eq!(encode_codebook(&back), a);
        }
    }

    #[test]
    fn targets_roundtrip_and_validation() {
        let b = TargetBundle {
            streams: vec![
                TargetStream { name: "L4".into(), ids: vec![vec![0, 1, 2], vec![], vec![2]], vocab_size: 3, layer_or_level: 4 },
                TargetStream { name: "L2".into(), ids: vec![vec![1, 1, 0], vec![], vec![0]], vocab_size: 2, layer_or_level: 2 },
            ],
        };
        let a = encode_targets(&b);
        let back = decode_targets(&a).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode_targets(&back), a);
        let mut bad = b.clone();
        bad.streams[1].ids[0].push(0);
        assert!(decode_targets(&encode_targets(&bad)).is_err());
        let mut wrong = a.clone();
        wrong[4] = 2;
        assert!(decode_targets(&wrong).is_err());
    }

    #[test]
    fn rvq_roundtrip() {
        let m = RvqModel::new(RvqConfig { d_in: 3, d_hidden: 4, d_z: 2, k1: 3, k_r: 4, ..Default::default() }).unwrap();
        let a = encode_rvq(&m);
        let back = decode_rvq(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_rvq(&back), a);
        assert!(decode_checkpoint(&a).is_err());
    }
}
