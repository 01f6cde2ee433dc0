//! Residual vector quantizer over log-Mel frames with an optional pinned first
//! level.
//!
//! A frame MLP encodes each normalised log-Mel frame to `z`; level 1 selects a
//! code for `z` (or takes the externally supplied cluster id when pinned) and
//! each further level quantizes the remaining residual. A frame MLP decoder
//! reconstructs the frame from the sum of the selected codes. Codebooks are
//! updated by exponential moving averages, including the pinned level.
//!
//! In levels 2 and above code 0 is a fixed zero vector, so a level never
//! increases the residual norm.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::is_eval;
use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng::{sub_rng, Rng as Chacha};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_z: usize,
    pub levels: usize,
    /// Level-1 codebook size; equals the external k when pinned.
    pub k1: usize,
    /// Codebook size of levels 2 and above (code 0 included).
    pub k_r: usize,
    pub beta: f64,
    pub decay: f64,
    pub pinned: bool,
    /// Peak learning rate, decayed linearly to zero over training.
    pub lr: f64,
    pub batch_frames: usize,
    /// Train the decoder on random prefixes of the levels.
    pub quantizer_dropout: bool,
    pub seed: u64,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            d_in: 40,
            d_hidden: 128,
            d_z: 32,
            levels: 4,
            k1: 100,
            k_r: 64,
            beta: 0.25,
            decay: 0.99,
            pinned: true,
            lr: 1e-3,
            batch_frames: 256,
            quantizer_dropout: true,
            seed: 0,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_in > 0
            && self.d_hidden > 0
            && self.d_z > 0
            && self.levels >= 1
            && self.k1 >= 1
            && (self.levels == 1 || self.k_r >= 2)
            && self.beta >= 0.0
            && (0.0..1.0).contains(&self.decay)
            && self.lr > 0.0
            && self.batch_frames > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("rvq: invalid configuration {self:?}")))
        }
    }

    pub fn codebook_size(&self, level: usize) -> usize {
        if level == 0 {
            self.k1
        } else {
            self.k_r
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// `codes[level][frame]`.
    pub codes: Vec<Vec<u32>>,
    /// Sum of the selected codes, `[frames, d_z]`.
    pub quantized: Tensor<f32>,
    /// Mean residual norm after each level.
    pub residual_norms: Vec<f64>,
    /// Per-frame residuals after each level, `[level][frame * d_z]`.
    pub residuals: Vec<Vec<f32>>,
    /// Code-to-vector distance evaluations performed at each level.
    pub distance_evals: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqModel {
    pub cfg: RvqConfig,
    /// MLP weights, input statistics, codebooks and EMA state.
    pub params: ParamStore<f32>,
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

impl RvqModel {
    pub fn new(cfg: RvqConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = sub_rng(cfg.seed, 0x5A0);
        let (di, dh, dz) = (cfg.d_in, cfg.d_hidden, cfg.d_z);
        let mut p = ParamStore::new();
        p.add_buffer("input.mean", Tensor::zeros(&[di]));
        p.add_buffer("input.std", Tensor::full(&[di], 1.0));
        p.add_normal("enc.w1", &[di, dh], 1.0 / (di as f64).sqrt(), &mut rng);
        p.add_zeros("enc.b1", &[dh]);
        p.add_normal("enc.w2", &[dh, dz], 1.0 / (dh as f64).sqrt(), &mut rng);
        p.add_zeros("enc.b2", &[dz]);
        p.add_normal("dec.w1", &[dz, dh], 1.0 / (dz as f64).sqrt(), &mut rng);
        p.add_zeros("dec.b1", &[dh]);
        p.add_normal("dec.w2", &[dh, di], 1.0 / (dh as f64).sqrt(), &mut rng);
        p.add_zeros("dec.b2", &[di]);
        for l in 0..cfg.levels {
            let k = cfg.codebook_size(l);
            p.add_buffer(format!("codebook{l}"), Tensor::zeros(&[k, dz]));
            p.add_buffer(format!("ema_count{l}"), Tensor::zeros(&[k]));
            p.add_buffer(format!("ema_sum{l}"), Tensor::zeros(&[k, dz]));
        }
        Ok(Self { cfg, params: p })
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.find(name).unwrap_or_else(|| panic!("rvq parameter {name}"))
    }

    pub fn codebook(&self, level: usize) -> &Tensor<f32> {
        self.params.get(self.id(&format!("codebook{level}")))
    }

    pub fn codebook_mut(&mut self, level: usize) -> &mut Tensor<f32> {
        let id = self.id(&format!("codebook{level}"));
        self.params.get_mut(id)
    }

    /// Greedy residual quantization of `z` (`[frames, d_z]`).
    pub fn quantize(&self, z: &Tensor<f32>, pinned_ids: Option<&[u32]>) -> Result<QuantizeResult> {
        let (n, dz) = z.expect_2d("quantize")?;
        if dz != self.cfg.d_z {
            return Err(Error::shape("quantize", format!("latent width {dz} vs {}", self.cfg.d_z)));
        }
        match (self.cfg.pinned, pinned_ids) {
            (true, None) => return Err(Error::Input("pinned quantizer needs cluster ids".into())),
            (false, Some(_)) => return Err(Error::Input("cluster ids given to an unpinned quantizer".into())),
            (true, Some(ids)) => {
                if ids.len() != n {
                    return Err(Error::shape("quantize", format!("{} ids for {n} frames", ids.len())));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.k1) {
                    return Err(Error::Input(format!("cluster id {bad} outside level-1 codebook of {}", self.cfg.k1)));
                }
            }
            (false, None) => {}
        }
        let levels = self.cfg.levels;
        let books: Vec<&Tensor<f32>> = (0..levels).map(|l| self.codebook(l)).collect();
        let per_frame: Vec<(Vec<u32>, Vec<f32>, Vec<Vec<f32>>, Vec<u64>)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut r = z.row(t).to_vec();
                let mut q = vec![0.0f32; dz];
                let mut codes = Vec::with_capacity(levels);
                let mut res = Vec::with_capacity(levels);
                let mut evals = vec![0u64; levels];
                for (l, book) in books.iter().enumerate() {
                    let c = match (l, pinned_ids) {
                        (0, Some(ids)) => ids[t] as usize,
                        _ => {
                            let k = book.rows();
                            evals[l] += k as u64;
                            let mut best = (0usize, f64::INFINITY);
                            for j in 0..k {
                                let d = sqdist(&r, book.row(j));
                                if d < best.1 {
                                    best = (j, d);
                                }
                            }
                            best.0
                        }
                    };
                    let cv = book.row(c);
                    for i in 0..dz {
                        r[i] -= cv[i];
                        q[i] += cv[i];
                    }
                    codes.push(c as u32);
                    res.push(r.clone());
                }
                (codes, q, res, evals)
            })
            .collect();
        let mut codes = vec![Vec::with_capacity(n); levels];
        let mut quantized = Vec::with_capacity(n * dz);
        let mut residuals = vec![Vec::with_capacity(n * dz); levels];
        let mut norms = vec![0.0; levels];
        let mut distance_evals = vec![0u64; levels];
        for (c, q, res, ev) in per_frame {
            for l in 0..levels {
                codes[l].push(c[l]);
                norms[l] += sqdist(&res[l], &vec![0.0; dz]).sqrt();
                residuals[l].extend_from_slice(&res[l]);
                distance_evals[l] += ev[l];
            }
            quantized.extend(q);
        }
        if n > 0 {
            norms.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(QuantizeResult { codes, quantized: Tensor::matrix(n, dz, quantized)?, residual_norms: norms, residuals, distance_evals })
    }

    fn normalize(&self, frames: &[f32]) -> Result<Tensor<f32>> {
        let di = self.cfg.d_in;
        if frames.len() % di != 0 {
            return Err(Error::shape("rvq", format!("{} values for d_in {di}", frames.len())));
        }
        let m = self.params.get(self.id("input.mean")).data();
        let s = self.params.get(self.id("input.std")).data();
        let data = frames.chunks_exact(di).flat_map(|r| r.iter().enumerate().map(|(j, &v)| (v - m[j]) / s[j])).collect();
        Tensor::matrix(frames.len() / di, di, data)
    }

    fn mlp<'a>(&self, g: &mut Graph<'a, f32>, vars: &[Var], x: Var, pre: &str) -> Result<Var> {
        let v = |n: &str| vars[self.id(&format!("{pre}.{n}")).0];
        let h = g.matmul(x, v("w1"))?;
        let h = g.add_bias(h, v("b1"))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, v("w2"))?;
        g.add_bias(h, v("b2"))
    }

    /// Latents of raw log-Mel frames (`n × d_in`, row-major).
    pub fn encode(&self, frames: &[f32]) -> Result<Tensor<f32>> {
        let x = self.normalize(frames)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let x = g.constant(x)?;
        let z = self.mlp(&mut g, &vars, x, "enc")?;
        Ok(g.value(z).clone())
    }

    /// Decode latents back to normalised log-Mel frames.
    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let z = g.constant_ref(z)?;
        let y = self.mlp(&mut g, &vars, z, "dec")?;
        Ok(g.value(y).clone())
    }

    /// Reconstruction MSE (normalised log-Mel space) using the first `1..=L`
    /// levels, one value per prefix length.
    pub fn mse_by_levels(&self, frames: &[f32], pinned_ids: Option<&[u32]>) -> Result<Vec<f64>> {
        let x = self.normalize(frames)?;
        let z = self.encode(frames)?;
        let q = self.quantize(&z, pinned_ids)?;
        let (n, dz) = (z.rows(), self.cfg.d_z);
        (1..=self.cfg.levels)
            .map(|lv| {
                let mut zq = vec![0.0f32; n * dz];
                for t in 0..n {
                    for l in 0..lv {
                        let c = self.codebook(l).row(q.codes[l][t] as usize);
                        for i in 0..dz {
                            zq[t * dz + i] += c[i];
                        }
                    }
                }
                let y = self.decode(&Tensor::matrix(n, dz, zq)?)?;
                let se: f64 = y.data().iter().zip(x.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                Ok(se / x.len() as f64)
            })
            .collect()
    }

    /// Code ids of every level per utterance.
    pub fn codes_for(&self, feats: &FeatureSequence, pinned_ids: Option<&[u32]>) -> Result<Vec<Vec<u32>>> {
        let z = self.encode(&feats.data)?;
        Ok(self.quantize(&z, pinned_ids)?.codes)
    }

    fn set_input_stats(&mut self, frames: &[f32]) -> Result<()> {
        let di = self.cfg.d_in;
        let n = (frames.len() / di) as f64;
        let mut mean = vec![0.0f64; di];
        let mut sq = vec![0.0f64; di];
        for r in frames.chunks_exact(di) {
            for j in 0..di {
                mean[j] += r[j] as f64;
                sq[j] += (r[j] as f64).powi(2);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3)).collect();
        self.params.set("input.mean", Tensor::from_f64(&[di], &mean)?)?;
        self.params.set("input.std", Tensor::from_f64(&[di], &std)?)?;
        Ok(())
    }

    /// Seed codebooks from latents: level 1 from per-cluster means when pinned,
    /// otherwise random rows; further levels from random residual rows.
    fn init_codebooks(&mut self, z: &Tensor<f32>, ids: Option<&[u32]>, rng: &mut Chacha) -> Result<()> {
        let (n, dz) = (z.rows(), self.cfg.d_z);
        let mut r = z.clone();
        for l in 0..self.cfg.levels {
            let k = self.cfg.codebook_size(l);
            let mut book = vec![0.0f32; k * dz];
            match (l, ids) {
                (0, Some(ids)) => {
                    let mut cnt = vec![0usize; k];
                    for t in 0..n {
                        let c = ids[t] as usize;
                        cnt[c] += 1;
                        for i in 0..dz {
                            book[c * dz + i] += r.row(t)[i];
                        }
                    }
                    for c in 0..k {
                        if cnt[c] > 0 {
                            book[c * dz..(c + 1) * dz].iter_mut().for_each(|v| *v /= cnt[c] as f32);
                        } else {
                            book[c * dz..(c + 1) * dz].copy_from_slice(r.row(rng.random_range(0..n)));
                        }
                    }
                }
                _ => {
                    let first = if l == 0 { 0 } else { 1 };
                    for (c, t) in (first..k).zip(spread_rows(&r, k - first, rng)) {
                        book[c * dz..(c + 1) * dz].copy_from_slice(r.row(t));
                    }
                }
            }
            let book = Tensor::matrix(k, dz, book)?;
            *self.codebook_mut(l) = book.clone();
            let cnt_id = self.id(&format!("ema_count{l}"));
            *self.params.get_mut(cnt_id) = Tensor::full(&[k], 1.0);
            let sum_id = self.id(&format!("ema_sum{l}"));
            *self.params.get_mut(sum_id) = book;
            let q = self.quantize_level(&r, l, ids)?;
            r = q;
        }
        Ok(())
    }

    /// Residual after quantizing `r` with level `l` only.
    fn quantize_level(&self, r: &Tensor<f32>, l: usize, ids: Option<&[u32]>) -> Result<Tensor<f32>> {
        let book = self.codebook(l);
        let dz = self.cfg.d_z;
        let mut out = r.data().to_vec();
        for t in 0..r.rows() {
            let c = match (l, ids) {
                (0, Some(ids)) => ids[t] as usize,
                _ => (0..book.rows())
                    .map(|j| (j, sqdist(r.row(t), book.row(j))))
                    .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
                    .0,
            };
            for i in 0..dz {
                out[t * dz + i] -= book.row(c)[i];
            }
        }
        Tensor::matrix(r.rows(), dz, out)
    }

    /// EMA codebook update from the vectors each level quantized.
    fn ema_update(&mut self, inputs: &[Vec<f32>], codes: &[Vec<u32>], usage: &mut [Vec<u64>]) -> Result<()> {
        let (dz, gamma) = (self.cfg.d_z, self.cfg.decay as f32);
        for l in 0..self.cfg.levels {
            let k = self.cfg.codebook_size(l);
            let mut cnt = vec![0.0f32; k];
            let mut sum = vec![0.0f32; k * dz];
            for (t, &c) in codes[l].iter().enumerate() {
                let c = c as usize;
                cnt[c] += 1.0;
                usage[l][c] += 1;
                for i in 0..dz {
                    sum[c * dz + i] += inputs[l][t * dz + i];
                }
            }
            let cnt_id = self.id(&format!("ema_count{l}"));
            let sum_id = self.id(&format!("ema_sum{l}"));
            let n_tot: f32 = {
                let ec = self.params.get_mut(cnt_id).data_mut();
                for c in 0..k {
                    ec[c] = gamma * ec[c] + (1.0 - gamma) * cnt[c];
                }
                ec.iter().sum()
            };
            {
                let es = self.params.get_mut(sum_id).data_mut();
                for (e, s) in es.iter_mut().zip(&sum) {
                    *e = gamma * *e + (1.0 - gamma) * s;
                }
            }
            let ec = self.params.get(cnt_id).data().to_vec();
            let es = self.params.get(sum_id).data().to_vec();
            let eps = 1e-5f32;
            let first = if l == 0 { 0 } else { 1 };
            let book = self.codebook_mut(l).data_mut();
            for c in first..k {
                let smoothed = (ec[c] + eps) / (n_tot + k as f32 * eps) * n_tot;
                for i in 0..dz {
                    book[c * dz + i] = es[c * dz + i] / smoothed;
                }
            }
            if !book.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "rvq ema" });
            }
        }
        Ok(())
    }

    /// Re-seed codes unused over an epoch with random residual rows of the
    /// last batch. The pinned level is left alone.
    fn reseed_dead(&mut self, usage: &[Vec<u64>], inputs: &[Vec<f32>], rng: &mut Chacha) {
        let dz = self.cfg.d_z;
        for l in 0..self.cfg.levels {
            if l == 0 && self.cfg.pinned {
                continue;
            }
            let n = inputs[l].len() / dz;
            if n == 0 {
                continue;
            }
            let first = if l == 0 { 0 } else { 1 };
            let dead: Vec<usize> = (first..usage[l].len()).filter(|&c| usage[l][c] == 0).collect();
            for c in dead {
                let t = rng.random_range(0..n);
                let v = inputs[l][t * dz..(t + 1) * dz].to_vec();
                self.codebook_mut(l).data_mut()[c * dz..(c + 1) * dz].copy_from_slice(&v);
                let sum_id = self.id(&format!("ema_sum{l}"));
                self.params.get_mut(sum_id).data_mut()[c * dz..(c + 1) * dz].copy_from_slice(&v);
                let cnt_id = self.id(&format!("ema_count{l}"));
                self.params.get_mut(cnt_id).data_mut()[c] = 1.0;
            }
        }
    }
}

/// `k` row indices drawn with probability proportional to the squared distance
/// from the rows already drawn (uniform once every row is covered). Looks at
/// no more than 4096 rows.
fn spread_rows(x: &Tensor<f32>, k: usize, rng: &mut Chacha) -> Vec<usize> {
    let n = x.rows().min(4096);
    let mut picks = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|t| sqdist(x.row(t), x.row(picks[0]))).collect();
    while picks.len() < k {
        let total: f64 = d2.iter().sum();
        let t = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut t = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    t = i;
                    break;
                }
                u -= w;
            }
            t
        } else {
            rng.random_range(0..n)
        };
        picks.push(t);
        for i in 0..n {
            d2[i] = d2[i].min(sqdist(x.row(i), x.row(t)));
        }
    }
    picks
}

/// Decoder input with gradients routed to `z` unchanged.
pub fn straight_through<'a>(g: &mut Graph<'a, f32>, z: Var, quantized: Var) -> Result<Var> {
    g.straight_through(z, quantized)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RvqLog {
    pub train_loss: Vec<f64>,
    /// Held-out reconstruction MSE with all levels after each epoch.
    pub eval_mse: Vec<f64>,
}

/// One step's loss for a batch of raw frames; returns the graph quantities
/// needed by the trainer.
pub fn rvq_step_loss<'a>(
    model: &'a RvqModel,
    g: &mut Graph<'a, f32>,
    vars: &[Var],
    frames: &[f32],
    ids: Option<&[u32]>,
    use_levels: usize,
) -> Result<(Var, Var, QuantizeResult)> {
    let x = model.normalize(frames)?;
    let x = g.constant(x)?;
    let z = model.mlp(g, vars, x, "enc")?;
    let q = model.quantize(g.value(z), ids)?;
    let dz = model.cfg.d_z;
    let n = q.quantized.rows();
    let prefix = if use_levels >= model.cfg.levels {
        q.quantized.clone()
    } else {
        let mut p = vec![0.0f32; n * dz];
        for t in 0..n {
            for l in 0..use_levels {
                let c = model.codebook(l).row(q.codes[l][t] as usize);
                for i in 0..dz {
                    p[t * dz + i] += c[i];
                }
            }
        }
        Tensor::matrix(n, dz, p)?
    };
    let qv = g.constant(prefix)?;
    let zq = g.straight_through(z, qv)?;
    let y = model.mlp(g, vars, zq, "dec")?;
    let rec = g.mse_loss(y, x)?;
    let qfull = g.constant(q.quantized.clone())?;
    let commit = g.mse_loss(z, qfull)?;
    let commit = g.scale(commit, model.cfg.beta)?;
    let loss = g.add(rec, commit)?;
    Ok((loss, z, q))
}

/// Train on per-utterance log-Mel sequences. Cluster ids are required exactly
/// when the model is pinned. Utterances in the held-out split
/// ([`is_eval`] on `names`) are only used for monitoring.
pub fn train(
    model: &mut RvqModel,
    names: &[String],
    logmel: &[FeatureSequence],
    kmeans_ids: Option<&[Vec<u32>]>,
    epochs: usize,
) -> Result<RvqLog> {
    if epochs == 0 {
        return Ok(RvqLog::default());
    }
    if model.cfg.pinned != kmeans_ids.is_some() {
        return Err(Error::Input("cluster ids must be given exactly when the quantizer is pinned".into()));
    }
    if names.len() != logmel.len() || kmeans_ids.is_some_and(|k| k.len() != logmel.len()) {
        return Err(Error::shape("rvq train", "names, features and ids differ in length"));
    }
    let di = model.cfg.d_in;
    let mut train_x = Vec::new();
    let mut train_ids = Vec::new();
    let mut eval_x = Vec::new();
    let mut eval_ids = Vec::new();
    for (u, f) in logmel.iter().enumerate() {
        if f.dims != di {
            return Err(Error::shape("rvq train", format!("feature dims {} vs d_in {di}", f.dims)));
        }
        let (x, ids) = if is_eval(&names[u]) && logmel.len() > 1 { (&mut eval_x, &mut eval_ids) } else { (&mut train_x, &mut train_ids) };
        x.extend_from_slice(&f.data);
        if let Some(k) = kmeans_ids {
            if k[u].len() != f.frames {
                return Err(Error::shape("rvq train", format!("utterance {u}: {} ids for {} frames", k[u].len(), f.frames)));
            }
            ids.extend_from_slice(&k[u]);
        }
    }
    let n = train_x.len() / di;
    if n == 0 {
        return Err(Error::Input("rvq: no training frames".into()));
    }
    let pinned = model.cfg.pinned;
    let mut rng = sub_rng(model.cfg.seed, 0x5A1);
    model.set_input_stats(&train_x)?;
    let z0 = model.encode(&train_x)?;
    model.init_codebooks(&z0, pinned.then_some(train_ids.as_slice()), &mut rng)?;

    let adam = AdamConfig::default();
    let mut st = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = RvqLog::default();
    let b = model.cfg.batch_frames;
    let total_steps = epochs * n.div_ceil(b);
    let mut step = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut usage: Vec<Vec<u64>> = (0..model.cfg.levels).map(|l| vec![0; model.cfg.codebook_size(l)]).collect();
        let mut last_inputs: Vec<Vec<f32>> = Vec::new();
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(b) {
            let frames: Vec<f32> = chunk.iter().flat_map(|&t| train_x[t * di..(t + 1) * di].iter().copied()).collect();
            let ids: Option<Vec<u32>> = pinned.then(|| chunk.iter().map(|&t| train_ids[t]).collect());
            let use_levels = if model.cfg.quantizer_dropout { rng.random_range(1..=model.cfg.levels) } else { model.cfg.levels };
            let (loss, grads, q, z) = {
                let mut g = Graph::new();
                let vars = model.params.bind(&mut g, true)?;
                let (l, z, q) = rvq_step_loss(model, &mut g, &vars, &frames, ids.as_deref(), use_levels)?;
                g.backward(l)?;
                let grads: Vec<Option<Vec<f32>>> = vars
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if model.params.is_trainable(ParamId(i)) { g.take_grad(v) } else { None })
                    .collect();
                (g.value(l).data()[0] as f64, grads, q, g.value(z).clone())
            };
            let lr = model.cfg.lr * (1.0 - step as f64 / total_steps as f64);
            st.step(&mut model.params, &grads, &adam, lr)?;
            step += 1;
            // inputs each level quantized: z for level 1, the running residual after that
            let mut inputs = vec![z.data().to_vec()];
            inputs.extend(q.residuals[..model.cfg.levels - 1].iter().cloned());
            model.ema_update(&inputs, &q.codes, &mut usage)?;
            last_inputs = inputs;
            sum += loss;
            steps += 1;
        }
        model.reseed_dead(&usage, &last_inputs, &mut rng);
        log.train_loss.push(sum / steps as f64);
        if !eval_x.is_empty() {
            let mse = model.mse_by_levels(&eval_x, pinned.then_some(eval_ids.as_slice()))?;
            log.eval_mse.push(*mse.last().unwrap());
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureKind;

    fn tiny(pinned: bool) -> RvqConfig {
        RvqConfig { d_in: 3, d_hidden: 16, d_z: 4, levels: 3, k1: 4, k_r: 5, pinned, ..Default::default() }
    }

    fn random_books(m: &mut RvqModel, seed: u64) {
        let mut r = sub_rng(seed, 0);
        for l in 0..m.cfg.levels {
            let b = m.codebook_mut(l);
            let first = if l == 0 { 0 } else { 4 };
            b.data_mut()[first..].iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        }
    }

    fn naive(m: &RvqModel, z: &Tensor<f32>) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); m.cfg.levels];
        for t in 0..z.rows() {
            let mut r: Vec<f64> = z.row(t).iter().map(|&v| v as f64).collect();
            for l in 0..m.cfg.levels {
                let b = m.codebook(l);
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for j in 0..b.rows() {
                    let d: f64 = r.iter().zip(b.row(j)).map(|(a, &c)| (a - c as f64).powi(2)).sum();
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                for (a, &c) in r.iter_mut().zip(b.row(best)) {
                    *a -= c as f64;
                }
                out[l].push(best as u32);
            }
        }
        out
    }

    #[test]
    fn greedy_choice_matches_naive_scan() {
        let mut m = RvqModel::new(tiny(false)).unwrap();
        random_books(&mut m, 1);
        let mut r = sub_rng(2, 0);
        let z = Tensor::matrix(50, 4, (0..200).map(|_| r.random_range(-1.5f32..1.5)).collect()).unwrap();
        let q = m.quantize(&z, None).unwrap();
        assert_eq!(q.codes, naive(&m, &z));
        for w in q.residual_norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn exact_code_leaves_zero_residual() {
        let mut m = RvqModel::new(tiny(false)).unwrap();
        random_books(&mut m, 3);
        let z = Tensor::matrix(1, 4, m.codebook(0).row(2).to_vec()).unwrap();
        let q = m.quantize(&z, None).unwrap();
        assert_eq!(q.codes[0], vec![2]);
        assert_eq!(q.residual_norms, vec![0.0; 3]);
        assert_eq!(q.codes[1], vec![0]);
    }

    #[test]
    fn pinning_overrides_distances() {
        let mut m = RvqModel::new(tiny(true)).unwrap();
        random_books(&mut m, 4);
        let z = Tensor::matrix(3, 4, m.codebook(0).row(0).repeat(3)).unwrap();
        let q = m.quantize(&z, Some(&[3, 1, 2])).unwrap();
        assert_eq!(q.codes[0], vec![3, 1, 2]);
        assert_eq!(q.distance_evals[0], 0);
        assert!(m.quantize(&z, None).is_err());
        assert!(m.quantize(&z, Some(&[4, 0, 0])).is_err());
    }

    fn four_frames() -> (Vec<String>, Vec<FeatureSequence>, Vec<Vec<u32>>) {
        let protos = [[1.0f32, -2.0, 0.5, 3.0, 0.0, 1.0], [-1.0, 0.0, 2.0, -1.0, 1.5, 0.0], [0.0, 2.5, -1.5, 0.5, -2.0, 1.0], [2.0, 1.0, 1.0, -2.5, 0.5, -1.0]];
        let names: Vec<String> = (0..).map(|i| format!("u{i}")).filter(|n| !is_eval(n)).take(8).collect();
        let feats = (0..8)
            .map(|u| FeatureSequence::new(protos[u % 4].repeat(20), 20, 6, 100.0, FeatureKind::Logmel).unwrap())
            .collect();
        let ids = (0..8).map(|u| vec![(u % 4) as u32; 20]).collect();
        (names, feats, ids)
    }

    #[test]
    fn four_distinct_frames_are_reconstructed() {
        let (names, feats, ids) = four_frames();
        for (pinned, seed) in [false, true].into_iter().flat_map(|p| (0..2).map(move |s| (p, s))) {
            let cfg = RvqConfig { d_in: 6, d_hidden: 32, d_z: 4, levels: 4, k1: 4, k_r: 8, pinned, lr: 3e-3, batch_frames: 32, seed, ..Default::default() };
            let mut m = RvqModel::new(cfg).unwrap();
            let k = pinned.then_some(ids.as_slice());
            let log = train(&mut m, &names, &feats, k, 200).unwrap();
            let x: Vec<f32> = feats.iter().flat_map(|f| f.data.iter().copied()).collect();
            let flat: Vec<u32> = ids.concat();
            let mse = m.mse_by_levels(&x, pinned.then_some(flat.as_slice())).unwrap();
            assert!(mse[3] < 1e-3, "pinned={pinned} seed={seed} {mse:?} {:?}", log.train_loss);
            for w in mse.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "pinned={pinned} seed={seed} {mse:?}");
            }
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut m = RvqModel::new(tiny(false)).unwrap();
        let before = m.clone();
        let f = FeatureSequence::new(vec![0.0; 9], 3, 3, 100.0, FeatureKind::Logmel).unwrap();
        train(&mut m, &["a".into()], &[f], None, 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn straight_through_gradient_reaches_the_encoder() {
        let mut m = RvqModel::new(tiny(true)).unwrap();
        random_books(&mut m, 5);
        let frames: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g, true).unwrap();
        let (l, _, _) = rvq_step_loss(&m, &mut g, &vars, &frames, Some(&[0, 1, 2, 3, 0, 1, 2, 3]), 3).unwrap();
        g.backward(l).unwrap();
        let w = vars[m.params.find("enc.w1").unwrap().0];
        let norm: f32 = g.grad(w).unwrap().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }
}
