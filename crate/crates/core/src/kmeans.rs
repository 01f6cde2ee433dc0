//! k-means clustering: k-means++ or random seeding, full-batch Lloyd
//! iterations or mini-batch updates, nearest-centroid assignment.
//!
//! Points are `n × dim` row-major slices of any float type; all arithmetic is
//! carried out in f64. Assignment ties go to the lowest centroid index.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureKind, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng::{sub_rng, Rng as Chacha};
use crate::tensor::real::gemm;

/// Mini-batch mode is chosen automatically from this many clusters upward.
pub const MINIBATCH_MIN_K: usize = 5000;
pub const DEFAULT_BATCH: usize = 10_000;
/// Cluster counts of the scaling sweep.
pub const K_SWEEP: [usize; 6] = [100, 500, 2500, 5000, 10_000, 25_000];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    KmeansPlusPlus,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    /// Full batch below [`MINIBATCH_MIN_K`], mini-batch of [`DEFAULT_BATCH`] above.
    Auto,
    Full,
    MiniBatch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub init: Init,
    pub max_iters: usize,
    /// Relative objective improvement below which iteration stops.
    pub tol: f64,
    pub batch: Batch,
    pub seed: u64,
    /// Standardize each dimension to zero mean, unit variance before clustering.
    pub standardize: bool,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { k: 100, init: Init::KmeansPlusPlus, max_iters: 20, tol: 1e-4, batch: Batch::Auto, seed: 0, standardize: false }
    }
}

impl KmeansConfig {
    pub fn with_k(k: usize, seed: u64) -> Self {
        Self { k, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("kmeans: k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("kmeans: max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("kmeans: tol must be >= 0".into()));
        }
        if self.batch == Batch::MiniBatch(0) {
            return Err(Error::Config("kmeans: mini-batch size must be >= 1".into()));
        }
        Ok(())
    }

    fn batch_size(&self) -> Option<usize> {
        match self.batch {
            Batch::Full => None,
            Batch::MiniBatch(b) => Some(b),
            Batch::Auto if self.k >= MINIBATCH_MIN_K => Some(DEFAULT_BATCH),
            Batch::Auto => None,
        }
    }
}

/// Where the clustered features came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub kind: FeatureKind,
    pub layer: Option<usize>,
    pub iteration: usize,
}

impl Default for Source {
    fn default() -> Self {
        Self { kind: FeatureKind::Mfcc, layer: None, iteration: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[f64], dim: usize) -> Self {
        let n = (x.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            row.iter().zip(&mut mean).for_each(|(v, m)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for j in 0..dim {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    fn apply(&self, x: &mut [f64]) {
        let dim = self.mean.len();
        for row in x.chunks_exact_mut(dim) {
            for j in 0..dim {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `k × dim` row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub source: Source,
    /// Final objective: sum of squared distances to the nearest centroid.
    pub inertia: f64,
    /// Objective before each update step, then the final value.
    pub history: Vec<f64>,
    pub standardizer: Option<Standardizer>,
}

impl Codebook {
    pub fn new(centroids: Vec<f64>, k: usize, dim: usize) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::shape("codebook", format!("{} values for k={k} dim={dim}", centroids.len())));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Self { centroids, k, dim, source: Source::default(), inertia: 0.0, history: Vec::new(), standardizer: None })
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn to_f64<P: Copy + Into<f64>>(points: &[P], dim: usize, op: &'static str) -> Result<Vec<f64>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape(op, format!("{} values not divisible by dim {dim}", points.len())));
    }
    let x: Vec<f64> = points.iter().map(|&p| p.into()).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(x)
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const BLOCK: usize = 256;

/// Nearest centroid and its squared distance for every row of `x`.
///
/// Cross products come from a GEMM; every centroid whose approximate distance
/// lies within a rounding margin of the approximate minimum is then rescored
/// exactly, so the result equals a naive scan with lowest-index tie breaking.
fn nearest(x: &[f64], dim: usize, c: &[f64], k: usize) -> (Vec<u32>, Vec<f64>) {
    let n = x.len() / dim;
    let cn: Vec<f64> = c.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let cmax = cn.iter().cloned().fold(0.0, f64::max);
    let results: Vec<(u32, f64)> = x
        .par_chunks(BLOCK * dim)
        .flat_map_iter(|xb| {
            let m = xb.len() / dim;
            let mut dots = vec![0.0; m * k];
            gemm(false, true, m, dim, k, xb, c, 0.0, &mut dots);
            (0..m)
                .map(|i| {
                    let row = &xb[i * dim..(i + 1) * dim];
                    let xn: f64 = row.iter().map(|v| v * v).sum();
                    let d = &dots[i * k..(i + 1) * k];
                    let approx = |j: usize| xn - 2.0 * d[j] + cn[j];
                    let amin = (0..k).map(approx).fold(f64::INFINITY, f64::min);
                    let margin = 1e-9 * (xn + cmax) + 1e-300;
                    let mut best = (u32::MAX, f64::INFINITY);
                    for j in 0..k {
                        if approx(j) <= amin + margin {
                            let e = sqdist(row, &c[j * dim..(j + 1) * dim]);
                            if e < best.1 {
                                best = (j as u32, e);
                            }
                        }
                    }
                    best
                })
                .collect::<Vec<_>>()
        })
        .collect();
    debug_assert_eq!(results.len(), n);
    results.into_iter().unzip()
}

/// Nearest-centroid index per point (squared Euclidean, ties to the lowest index).
pub fn assign<P: Copy + Into<f64>>(points: &[P], dim: usize, cb: &Codebook) -> Result<Vec<u32>> {
    Ok(assign_with_distances(points, dim, cb)?.0)
}

pub fn assign_with_distances<P: Copy + Into<f64>>(points: &[P], dim: usize, cb: &Codebook) -> Result<(Vec<u32>, Vec<f64>)> {
    if dim != cb.dim {
        return Err(Error::shape("assign", format!("points have dim {dim}, codebook {}", cb.dim)));
    }
    let mut x = to_f64(points, dim, "assign")?;
    if let Some(s) = &cb.standardizer {
        s.apply(&mut x);
    }
    Ok(nearest(&x, dim, &cb.centroids, cb.k))
}

/// Per-utterance cluster ids of a list of feature sequences.
pub fn targets_for_corpus(features: &[FeatureSequence], cb: &Codebook) -> Result<Vec<Vec<u32>>> {
    features.iter().map(|f| assign(&f.data, f.dims, cb)).collect()
}

fn init_centroids(x: &[f64], dim: usize, k: usize, init: Init, rng: &mut Chacha) -> Vec<f64> {
    let n = x.len() / dim;
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    match init {
        Init::Random => {
            let mut idx = sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx.iter().flat_map(|&i| row(i).to_vec()).collect()
        }
        Init::KmeansPlusPlus => {
            let mut c = Vec::with_capacity(k * dim);
            c.extend_from_slice(row(rng.random_range(0..n)));
            let mut d2: Vec<f64> = (0..n).map(|i| sqdist(row(i), &c[..dim])).collect();
            for _ in 1..k {
                let total: f64 = d2.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    let mut pick = n - 1;
                    for (i, &w) in d2.iter().enumerate() {
                        if w > 0.0 && r < w {
                            pick = i;
                            break;
                        }
                        r -= w;
                    }
                    if d2[pick] == 0.0 {
                        pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
                    }
                    pick
                } else {
                    rng.random_range(0..n)
                };
                let start = c.len();
                c.extend_from_slice(row(pick));
                let new = c[start..].to_vec();
                d2.par_iter_mut().enumerate().for_each(|(i, d)| *d = d.min(sqdist(&x[i * dim..(i + 1) * dim], &new)));
            }
            c
        }
    }
}

/// Move every empty cluster onto the point farthest from its centroid.
/// Each repair zeroes that point's distance so successive repairs pick
/// different points. Returns the number of repairs.
fn repair_empty(x: &[f64], dim: usize, c: &mut [f64], counts: &[usize], dist: &mut [f64]) -> usize {
    let mut repaired = 0;
    for (j, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            continue;
        }
        let mut far = 0;
        for i in 1..dist.len() {
            if dist[i] > dist[far] {
                far = i;
            }
        }
        c[j * dim..(j + 1) * dim].copy_from_slice(&x[far * dim..(far + 1) * dim]);
        dist[far] = 0.0;
        repaired += 1;
    }
    repaired
}

fn lloyd(x: &[f64], dim: usize, mut c: Vec<f64>, cfg: &KmeansConfig) -> (Vec<f64>, Vec<f64>) {
    let k = cfg.k;
    let mut history = Vec::new();
    for _ in 0..cfg.max_iters {
        let (labels, mut dist) = nearest(x, dim, &c, k);
        let obj: f64 = dist.iter().sum();
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            history.push(obj);
            if obj == 0.0 || prev - obj <= cfg.tol * prev {
                return (c, history);
            }
        } else {
            history.push(obj);
            if obj == 0.0 {
                return (c, history);
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (cv, s) in c[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *cv = s / counts[j] as f64;
                }
            }
        }
        repair_empty(x, dim, &mut c, &counts, &mut dist);
    }
    let (_, dist) = nearest(x, dim, &c, k);
    history.push(dist.iter().sum());
    (c, history)
}

fn minibatch(x: &[f64], dim: usize, mut c: Vec<f64>, cfg: &KmeansConfig, b: usize, rng: &mut Chacha) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / dim;
    let k = cfg.k;
    let b = b.min(n);
    let steps = n.div_ceil(b);
    let mut seen = vec![0usize; k];
    let mut history = Vec::new();
    for _ in 0..cfg.max_iters {
        let mut used = vec![0usize; k];
        let mut pass_obj = 0.0;
        let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..steps {
            let idx = sample(rng, n, b).into_vec();
            let xb: Vec<f64> = idx.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied()).collect();
            let (labels, dist) = nearest(&xb, dim, &c, k);
            pass_obj += dist.iter().sum::<f64>();
            for (r, &l) in labels.iter().enumerate() {
                let l = l as usize;
                seen[l] += 1;
                used[l] += 1;
                let eta = 1.0 / seen[l] as f64;
                for (cv, v) in c[l * dim..(l + 1) * dim].iter_mut().zip(&xb[r * dim..(r + 1) * dim]) {
                    *cv += eta * (v - *cv);
                }
            }
            last = Some((xb, dist));
        }
        if let Some((xb, mut dist)) = last {
            repair_empty(&xb, dim, &mut c, &used, &mut dist);
        }
        let obj = pass_obj / (steps * b) as f64 * n as f64;
        let stop = history.last().is_some_and(|&prev: &f64| prev - obj <= cfg.tol * prev);
        history.push(obj);
        if stop || obj == 0.0 {
            break;
        }
    }
    let (_, dist) = nearest(x, dim, &c, k);
    history.push(dist.iter().sum());
    (c, history)
}

fn fit_f64(mut x: Vec<f64>, dim: usize, cfg: &KmeansConfig, rng: &mut Chacha) -> Result<Codebook> {
    cfg.validate()?;
    let n = x.len() / dim;
    if n < cfg.k {
        return Err(Error::Input(format!("kmeans: {n} points but k={}", cfg.k)));
    }
    let standardizer = cfg.standardize.then(|| {
        let s = Standardizer::fit(&x, dim);
        s.apply(&mut x);
        s
    });
    let c0 = init_centroids(&x, dim, cfg.k, cfg.init, rng);
    let (centroids, history) = match cfg.batch_size() {
        None => lloyd(&x, dim, c0, cfg),
        Some(b) => minibatch(&x, dim, c0, cfg, b, rng),
    };
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    Ok(Codebook {
        centroids,
        k: cfg.k,
        dim,
        source: Source::default(),
        inertia: *history.last().unwrap(),
        history,
        standardizer,
    })
}

/// Fit a codebook to `points` (`n × dim`, row-major).
pub fn fit<P: Copy + Into<f64>>(points: &[P], dim: usize, cfg: &KmeansConfig) -> Result<Codebook> {
    let x = to_f64(points, dim, "kmeans")?;
    fit_f64(x, dim, cfg, &mut sub_rng(cfg.seed, 0))
}

/// Best (lowest inertia, earliest on ties) of `restarts` independently seeded fits.
pub fn fit_best_of<P: Copy + Into<f64>>(points: &[P], dim: usize, cfg: &KmeansConfig, restarts: usize) -> Result<Codebook> {
    let x = to_f64(points, dim, "kmeans")?;
    let mut best: Option<Codebook> = None;
    for r in 0..restarts.max(1) {
        let cb = fit_f64(x.clone(), dim, cfg, &mut sub_rng(cfg.seed, r as u64))?;
        if best.as_ref().is_none_or(|b| cb.inertia < b.inertia) {
            best = Some(cb);
        }
    }
    Ok(best.unwrap())
}

/// Stack the frames of several feature sequences into one `n × dim` matrix.
pub fn stack(features: &[FeatureSequence]) -> Result<(Vec<f32>, usize)> {
    let dim = features.first().map(|f| f.dims).ok_or_else(|| Error::Input("no features to cluster".into()))?;
    if let Some(f) = features.iter().find(|f| f.dims != dim) {
        return Err(Error::shape("stack", format!("dims {} vs {dim}", f.dims)));
    }
    Ok((features.iter().flat_map(|f| f.data.iter().copied()).collect(), dim))
}

/// Fit on the stacked frames of a corpus and tag the codebook with its source.
pub fn fit_corpus(features: &[FeatureSequence], cfg: &KmeansConfig, layer: Option<usize>, iteration: usize) -> Result<Codebook> {
    let (x, dim) = stack(features)?;
    let mut cb = fit(&x, dim, cfg)?;
    cb.source = Source { kind: features[0].kind, layer, iteration };
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], dim: usize, cb: &Codebook) -> Vec<u32> {
        x.chunks_exact(dim)
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for j in 0..cb.k {
                    let d = sqdist(p, cb.centroid(j));
                    if d < best.1 {
                        best = (j as u32, d);
                    }
                }
                best.0
            })
            .collect()
    }

    #[test]
    fn four_point_fixture() {
        let cb = fit(&[0.0f64, 1.0, 10.0, 11.0], 1, &KmeansConfig { k: 2, ..Default::default() }).unwrap();
        let mut c = cb.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert_eq!(cb.inertia, 1.0);
    }

    #[test]
    fn k_equals_n() {
        let pts = [0.0f32, 0.0, 1.0, 2.0, -3.0, 5.0];
        let cb = fit(&pts, 2, &KmeansConfig { k: 3, ..Default::default() }).unwrap();
        assert_eq!(cb.inertia, 0.0);
        let ids = assign(&pts, 2, &cb).unwrap();
        let mut s = ids.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn ties_and_exact_hits() {
        let cb = Codebook::new(vec![9.0, 8.0, -1.0, 7.0, 6.0, 1.0], 6, 1).unwrap();
        assert_eq!(assign(&[7.0f64], 1, &cb).unwrap(), vec![3]);
        assert_eq!(assign(&[0.0f64], 1, &cb).unwrap(), vec![2]);
        assert!(assign(&[0.0f64, 1.0], 2, &cb).is_err());
    }

    #[test]
    fn assign_matches_naive_scan() {
        let mut rng = sub_rng(9, 0);
        let dim = 5;
        let x: Vec<f64> = (0..1000 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..37 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(c, 37, dim).unwrap();
        assert_eq!(assign(&x, dim, &cb).unwrap(), naive(&x, dim, &cb));
    }

    #[test]
    fn errors() {
        assert!(fit(&[1.0f64], 1, &KmeansConfig { k: 2, ..Default::default() }).is_err());
        assert!(matches!(
            fit(&[1.0f64, f64::NAN], 1, &KmeansConfig { k: 1, ..Default::default() }),
            Err(Error::NonFinite { .. })
        ));
        assert!(KmeansConfig { k: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn minibatch_is_used_for_large_k_and_clusters() {
        assert_eq!(KmeansConfig::with_k(5000, 0).batch_size(), Some(DEFAULT_BATCH));
        assert_eq!(KmeansConfig::with_k(4999, 0).batch_size(), None);
        for k in K_SWEEP {
            KmeansConfig::with_k(k, 0).validate().unwrap();
        }
        let mut rng = sub_rng(3, 0);
        let x: Vec<f64> = (0..600)
            .map(|i| if i % 3 == 0 { -5.0 } else if i % 3 == 1 { 0.0 } else { 5.0 } + rng.random_range(-0.1..0.1))
            .collect();
        let cfg = KmeansConfig { k: 3, batch: Batch::MiniBatch(64), ..Default::default() };
        let cb = fit(&x, 1, &cfg).unwrap();
        let mut c = cb.centroids.clone();
        c.sort_by(f64::total_cmp);
        for (got, want) in c.iter().zip([-5.0, 0.0, 5.0]) {
            assert!((got - want).abs() < 0.1, "{c:?}");
        }
    }

    #[test]
    fn standardized_assignment_uses_stored_statistics() {
        let x = [0.0f64, 0.0, 1.0, 100.0, 0.0, 200.0, 1.0, 300.0];
        let cfg = KmeansConfig { k: 2, standardize: true, ..Default::default() };
        let cb = fit(&x, 2, &cfg).unwrap();
        let ids = assign(&x, 2, &cb).unwrap();
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[3]);
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn repeated_points_get_repaired_clusters() {
        let x = [1.0f64, 1.0, 1.0, 1.0, 2.0, 3.0];
        let cfg = KmeansConfig { k: 3, init: Init::Random, ..Default::default() };
        for seed in 0..10 {
            let cb = fit(&x, 1, &KmeansConfig { seed, ..cfg.clone() }).unwrap();
            assert_eq!(cb.inertia, 0.0, "seed {seed}: {:?}", cb.centroids);
        }
    }

    #[test]
    fn corpus_targets() {
        assert!(targets_for_corpus(&[], &Codebook::new(vec![0.0], 1, 1).unwrap()).unwrap().is_empty());
        let f = FeatureSequence::new(vec![0.0, 1.0, 10.0, 11.0, 0.2], 5, 1, 100.0, FeatureKind::Mfcc).unwrap();
        let g = FeatureSequence::new(vec![10.4, 0.3], 2, 1, 100.0, FeatureKind::Mfcc).unwrap();
        let cb = fit_corpus(&[f.clone(), g.clone()], &KmeansConfig { k: 2, ..Default::default() }, None, 1).unwrap();
        let t = targets_for_corpus(&[f.clone(), g.clone()], &cb).unwrap();
        assert_eq!(t[0].len(), 5);
        let mut all = f.data.clone();
        all.extend(&g.data);
        assert_eq!(t.concat(), assign(&all, 1, &cb).unwrap());
    }
}
