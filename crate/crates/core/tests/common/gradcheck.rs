//! Central finite-difference gradient oracle (64-bit).

use maskpred::tensor::{Graph, Tensor, Var};
use maskpred::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// Relative error between analytic `a` and numeric `n`, floored at a small
/// fraction of the tensor-wide gradient scale so that near-zero entries do not
/// amplify round-off.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let scale = n.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Build the graph for `inputs` (all marked differentiable), run backward and
/// compare every input gradient with central differences. Returns the worst
/// relative error over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Reduce any tensor to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.is_empty() {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Every tensorcore primitive as a named scalar-valued builder over random
/// inputs whose shapes are drawn from `rng`.
pub type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>,
);

pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..6usize);
    let k = rng.random_range(2..5usize);
    let v = rng.random_range(3..6usize);
    let s = seed;
    let mut cases: Vec<Case> = Vec::new();
    cases.push(("matmul", vec![random(&[r, k], &mut rng), random(&[k, c], &mut rng)], Box::new(move |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("matmul_t", vec![random(&[r, k], &mut rng), random(&[c, k], &mut rng)], Box::new(move |g, x| {
        let y = g.matmul_t(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("transpose", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.transpose(x[0])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("add", vec![random(&[r, c], &mut rng), random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.add(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("sub", vec![random(&[r, c], &mut rng), random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.sub(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("mul", vec![random(&[r, c], &mut rng), random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.mul(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("add_bias", vec![random(&[r, c], &mut rng), random(&[c], &mut rng)], Box::new(move |g, x| {
        let y = g.add_bias(x[0], x[1])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("scale", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.scale(x[0], -0.7)?;
        weighted_sum(g, y, s)
    })));
    cases.push((
        "layer_norm",
        vec![random(&[r, c + 1], &mut rng), random(&[c + 1], &mut rng), random(&[c + 1], &mut rng)],
        Box::new(move |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push(("gelu", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.gelu(x[0])?;
        weighted_sum(g, y, s)
    })));
    cases.push(("softmax", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.softmax(x[0])?;
        weighted_sum(g, y, s)
    })));
    let ids: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..v)).collect();
    cases.push(("embedding", vec![random(&[v, c], &mut rng)], Box::new(move |g, x| {
        let y = g.embedding(x[0], &ids)?;
        weighted_sum(g, y, s)
    })));
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..v)).collect();
    cases.push(("cross_entropy", vec![random(&[r, v], &mut rng)], Box::new(move |g, x| g.cross_entropy(x[0], &targets))));
    cases.push(("l1_loss", vec![random(&[r, c], &mut rng), random(&[r, c], &mut rng)], Box::new(|g, x| g.l1_loss(x[0], x[1]))));
    cases.push(("mse_loss", vec![random(&[r, c], &mut rng), random(&[r, c], &mut rng)], Box::new(|g, x| g.mse_loss(x[0], x[1]))));
    cases.push((
        "concat_rows",
        vec![random(&[r, c], &mut rng), random(&[r + 1, c], &mut rng)],
        Box::new(move |g, x| {
            let y = g.concat(&[x[0], x[1]], 0)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push((
        "concat_cols",
        vec![random(&[r, c], &mut rng), random(&[r, k], &mut rng)],
        Box::new(move |g, x| {
            let y = g.concat(&[x[0], x[1]], 1)?;
            weighted_sum(g, y, s)
        }),
    ));
    cases.push(("slice", vec![random(&[r + 2, c + 2], &mut rng)], Box::new(move |g, x| {
        let y = g.slice(x[0], 1..r + 1, 1..c)?;
        weighted_sum(g, y, s)
    })));
    let rows: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
    cases.push(("gather_rows", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.gather_rows(x[0], &rows)?;
        weighted_sum(g, y, s)
    })));
    cases.push(("mean", vec![random(&[r, c], &mut rng)], Box::new(|g, x| g.mean(x[0]))));
    cases.push(("sum", vec![random(&[r, c], &mut rng)], Box::new(|g, x| g.sum(x[0]))));
    cases.push(("mean_rows", vec![random(&[r, c], &mut rng)], Box::new(move |g, x| {
        let y = g.mean_rows(x[0])?;
        weighted_sum(g, y, s)
    })));
    let mask: Vec<bool> = (0..r).map(|i| i % 2 == (seed as usize) % 2).collect();
    cases.push(("mask_rows", vec![random(&[r, c], &mut rng), random(&[c], &mut rng)], Box::new(move |g, x| {
        let y = g.mask_rows(x[0], x[1], &mask)?;
        weighted_sum(g, y, s)
    })));
    cases.push(("scale_by", vec![random(&[r, c], &mut rng), random(&[1, 3], &mut rng)], Box::new(move |g, x| {
        let y = g.scale_by(x[0], x[1], 2)?;
        weighted_sum(g, y, s)
    })));
    cases
}
