//! Prediction heads over the encoder's final states and the masked
//! cross-entropy objective.
//!
//! Streams follow the bundle order: highest layer (or lowest RVQ level) first.
//! In conditional mode the head of stream `s` reads
//! `h + E_0[y_0] + ... + E_{s-1}[y_{s-1}]`, where `y_j` are the ground-truth
//! ids of the streams above it. Every stream but the last owns a table `E_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Single,
    Flat,
    Conditional,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Single => "single",
            HeadMode::Flat => "flat",
            HeadMode::Conditional => "conditional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(HeadMode::Single),
            "flat" => Some(HeadMode::Flat),
            "conditional" | "cond" => Some(HeadMode::Conditional),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadStack<T: Real> {
    pub mode: HeadMode,
    pub vocab: Vec<usize>,
    pub d_model: usize,
    pub params: ParamStore<T>,
    w: Vec<ParamId>,
    b: Vec<ParamId>,
    emb: Vec<Option<ParamId>>,
}

impl<T: Real> HeadStack<T> {
    pub fn new(mode: HeadMode, vocab: &[usize], d_model: usize, seed: u64) -> Result<Self> {
        if vocab.is_empty() || vocab.contains(&0) || d_model == 0 {
            return Err(Error::Config(format!("heads: vocab sizes {vocab:?}, d_model {d_model}")));
        }
        if mode == HeadMode::Single && vocab.len() != 1 {
            return Err(Error::Config(format!("heads: single mode needs one stream, got {}", vocab.len())));
        }
        let mut rng = sub_rng(seed, 0x4EAD);
        let mut params = ParamStore::new();
        let sd = 1.0 / (d_model as f64).sqrt();
        let mut w = Vec::new();
        let mut b = Vec::new();
        let mut emb = Vec::new();
        let n = vocab.len();
        for (s, &v) in vocab.iter().enumerate() {
            w.push(params.add_normal(format!("head{s}.w"), &[d_model, v], sd, &mut rng));
            b.push(params.add_zeros(format!("head{s}.b"), &[v]));
            emb.push((mode == HeadMode::Conditional && s + 1 < n).then(|| {
                params.add_normal(format!("cond{s}.emb"), &[v, d_model], sd, &mut rng)
            }));
        }
        Ok(Self { mode, vocab: vocab.to_vec(), d_model, params, w, b, emb })
    }

    pub fn n_streams(&self) -> usize {
        self.vocab.len()
    }

    pub fn head_ids(&self, s: usize) -> (ParamId, ParamId) {
        (self.w[s], self.b[s])
    }

    pub fn embedding_id(&self, s: usize) -> Option<ParamId> {
        self.emb[s]
    }

    fn check_targets(&self, targets: &[&[u32]], rows: usize) -> Result<()> {
        if targets.len() != self.n_streams() {
            return Err(Error::shape("heads", format!("{} target streams for {} heads", targets.len(), self.n_streams())));
        }
        for (s, t) in targets.iter().enumerate() {
            if t.len() != rows {
                return Err(Error::shape("heads", format!("stream {s}: {} ids for {rows} frames", t.len())));
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= self.vocab[s]) {
                return Err(Error::Input(format!("stream {s}: id {bad} outside vocab {}", self.vocab[s])));
            }
        }
        Ok(())
    }

    /// Per-stream logits for `top` (`[frames, d_model]`). Ground-truth ids are
    /// needed for conditioning only; flat and single modes accept an empty slice.
    pub fn build<'a>(&'a self, g: &mut Graph<'a, T>, vars: &[Var], top: Var, truth: &[&[u32]]) -> Result<Vec<Var>> {
        let (rows, cols) = {
            let v = g.value(top);
            (v.rows(), v.cols())
        };
        if cols != self.d_model {
            return Err(Error::shape("heads", format!("hidden width {cols} vs {}", self.d_model)));
        }
        if self.mode == HeadMode::Conditional && self.n_streams() > 1 {
            if truth.is_empty() {
                return Err(Error::Input("conditional heads need ground-truth ids".into()));
            }
            self.check_targets(truth, rows)?;
        }
        let mut input = top;
        let mut out = Vec::with_capacity(self.n_streams());
        for s in 0..self.n_streams() {
            let z = g.matmul(input, vars[self.w[s].0])?;
            out.push(g.add_bias(z, vars[self.b[s].0])?);
            if let Some(e) = self.emb[s] {
                let ids: Vec<usize> = truth[s].iter().map(|&i| i as usize).collect();
                let c = g.embedding(vars[e.0], &ids)?;
                input = g.add(input, c)?;
            }
        }
        Ok(out)
    }

    /// Logits without gradient tracking.
    pub fn predict(&self, final_hidden: &Tensor<T>, truth: &[&[u32]]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let top = g.constant_ref(final_hidden)?;
        let out = self.build(&mut g, &vars, top, truth)?;
        Ok(out.iter().map(|&v| g.value(v).clone()).collect())
    }
}

/// Masked-frame cross-entropy, averaged over streams with `weights`
/// (uniform when empty). `alpha > 0` adds that multiple of the same loss over
/// unmasked frames.
pub fn masked_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: &[Var],
    targets: &[&[u32]],
    mask: &[bool],
    weights: &[f64],
    alpha: f64,
) -> Result<Var> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::shape("masked_loss", format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    if !weights.is_empty() && weights.len() != logits.len() {
        return Err(Error::shape("masked_loss", format!("{} weights for {} streams", weights.len(), logits.len())));
    }
    let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if masked.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let unmasked: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let uniform = vec![1.0; logits.len()];
    let w = if weights.is_empty() { &uniform } else { weights };
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Config("masked_loss: stream weights must sum to a positive value".into()));
    }
    let mut total: Option<Var> = None;
    for (s, (&lg, t)) in logits.iter().zip(targets).enumerate() {
        if t.len() != mask.len() || g.value(lg).rows() != mask.len() {
            return Err(Error::shape("masked_loss", format!("stream {s}: {} ids, mask {}", t.len(), mask.len())));
        }
        let mut parts = vec![(&masked, w[s] / wsum)];
        if alpha > 0.0 && !unmasked.is_empty() {
            parts.push((&unmasked, alpha * w[s] / wsum));
        }
        for (rows, scale) in parts {
            let sel = g.gather_rows(lg, rows)?;
            let ids: Vec<usize> = rows.iter().map(|&i| t[i] as usize).collect();
            let ce = g.cross_entropy(sel, &ids)?;
            let term = g.scale(ce, scale)?;
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
    }
    Ok(total.unwrap())
}
