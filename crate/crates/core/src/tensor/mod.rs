//! Dense row-major tensors with tape-based reverse-mode differentiation.

mod adam;
mod graph;
mod params;
pub(crate) mod real;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub(crate) use real::gemm;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_())).collect(),
        }
    }

    pub(crate) fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.0, 0.0, 0.0]), true).unwrap();
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn l1_of_identical_inputs_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true).unwrap();
        let b = g.input(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true).unwrap();
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[4.0, -1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::DoubleBackward)));
    }

    #[test]
    fn nan_fails_fast() {
        let mut g: Graph<f64> = Graph::new();
        assert!(matches!(g.input(t(&[1], &[f64::NAN]), false), Err(Error::NonFinite { .. })));
        let big = g.input(t(&[1, 1], &[1e300]), false).unwrap();
        assert!(matches!(g.matmul(big, big), Err(Error::NonFinite { op: "matmul" })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3]), false).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2,3]"), "{err}");
    }

    #[test]
    fn softmax_rows_and_layer_norm_moments() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 4], &[0.1, 3.0, -2.0, 0.7, 10.0, 10.0, -5.0, 1.0]), false).unwrap();
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let gamma = g.input(Tensor::full(&[4], 1.0), false).unwrap();
        let beta = g.input(Tensor::zeros(&[4]), false).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(4) {
            let m = row.iter().sum::<f64>() / 4.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() <= 1e-9);
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let z = g.input(t(&[1, 3], &[0.2, 0.4, -1.0]), true).unwrap();
        let q = g.input(t(&[1, 3], &[1.0, 0.0, -1.5]), true).unwrap();
        let st = g.straight_through(z, q).unwrap();
        assert_eq!(g.value(st), g.value(q));
        let w = g.constant(t(&[1, 3], &[3.0, -1.0, 0.5])).unwrap();
        let p = g.mul(st, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), g.grad(st).unwrap());
        assert!(g.grad(q).is_none());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", t(&[2], &[0.5, -0.25]));
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        st.step(&mut p, &[Some(vec![0.0, 0.0])], &cfg, cfg.lr).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // Scalar reference written out directly.
        fn reference(g: &[f64], lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v, mut th) = (0.0, 0.0, 0.0);
            for (t, &gi) in g.iter().enumerate() {
                let t = t as i32 + 1;
                m = b1 * m + (1.0 - b1) * gi;
                v = b2 * v + (1.0 - b2) * gi * gi;
                th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            }
            th
        }
        let mut p = ParamStore::<f64>::new();
        p.add("w", t(&[1], &[0.0]));
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let gs = [1.0, -0.5, 2.0];
        for &gi in &gs {
            st.step(&mut p, &[Some(vec![gi])], &cfg, 1e-3).unwrap();
        }
        let got = p.get(ParamId(0)).data()[0];
        assert!((got - reference(&gs, 1e-3)).abs() < 1e-15);
        // first step with g=1: bias-corrected update is lr * 1/(1+eps)
        let one = reference(&[1.0], 1e-3);
        assert!((one + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = ParamStore::<f32>::new();
            p.add("w", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig::default();
            for i in 0..10 {
                let g = vec![0.1 * i as f32, -0.3, 0.7];
                st.step(&mut p, &[Some(g)], &cfg, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", t(&[2], &[0.0, 0.0]));
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        assert!(st.step(&mut p, &[Some(vec![1.0])], &cfg, 1e-3).is_err());
    }
}
