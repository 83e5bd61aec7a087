//! Dense float64 tensors with a define-by-run gradient tape.
//!
//! Everything in the pipeline is expressed with 2-D row-major tensors. Token
//! sequences are stored one token per row, so a sequence of `n` tokens with
//! embedding width `d` has shape `[n, d]` and the class token is row 0.

mod kernels;
mod params;
mod tape;

pub use kernels::matmul_raw;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad extents and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count when viewed as a matrix; 1-D tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.data.len() / self.shape[0],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Plain matrix product without gradient recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_raw(vec![n, m], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let r = m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let r = m(&[&[0.5, 0.5], &[0.5, 0.5]])
            .matmul(&m(&[&[0.9, 0.1], &[0.2, 0.8]]))
            .unwrap();
        for (got, want) in r.data().iter().zip([0.55, 0.45, 0.55, 0.45]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(matches!(b.matmul(&m(&[&[1.0, 2.0, 3.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let cases: [(&[f64], [f64; 2]); 3] = [
            (&[0.0, 0.0], [0.5, 0.5]),
            (&[1000.0, 1000.0], [0.5, 0.5]),
            (&[std::f64::consts::LN_2, 0.0], [2.0 / 3.0, 1.0 / 3.0]),
        ];
        for (input, want) in cases {
            let x = tape.constant(m(&[input]));
            let y = tape.softmax_rows(x).unwrap();
            for (g, w) in tape.value(y).data().iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn backward_square() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(m(&[&[0.3, -1.2, 2.0], &[5.0, 0.0, -0.5]]));
        let s = tape.softmax_rows(x).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l, &store).unwrap();
        assert!(g.input(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(m(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(x, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameters_get_exact_zeros() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0)).unwrap();
        let b = store.add("b", m(&[&[1.0, 1.0]])).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let l = tape.square(av);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.param(a).data(), &[4.0]);
        assert_eq!(g.param(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn primitive_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let e = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(e).item(), 0.0);

        // tokens are rows: [a x D] ++ [b x D] -> [(a+b) x D]
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[5, 3]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[7, 3]);
        let c = tape.concat(&[a, a], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 6]);
        assert!(tape.concat(&[a, b], 1).is_err());

        let k = tape.constant(Tensor::full(&[1, 4], 7.5));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let z = tape.constant(Tensor::zeros(&[4]));
        let ln = tape.layer_norm(k, g, z, 1e-6).unwrap();
        assert!(tape.value(ln).data().iter().all(|&v| v == 0.0));

        let mf = tape.masked_fill(x, &[true, false, false, true], -1.0).unwrap();
        assert_eq!(tape.value(mf).data(), &[-1.0, 2.0, 3.0, -1.0]);
        let mn = tape.mean(x, 0).unwrap();
        assert_eq!(tape.value(mn).data(), &[2.0, 3.0]);
        let mn = tape.mean(x, 1).unwrap();
        assert_eq!(tape.value(mn).data(), &[1.5, 3.5]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_mask_exact() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let qkv = tape.constant(Tensor::matrix(6, 12, data).unwrap());
        let mask = [true, false, true, true, true, false];
        let out = tape.attention(qkv, 2, 2, Some(&mask)).unwrap();
        let p = tape.attention_probs(out).unwrap();
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // group 0 key 1 and group 1 key 2 are masked out
        for h in 0..2 {
            for i in 0..3 {
                assert_eq!(p[((0 * 2 + h) * 3 + i) * 3 + 1], 0.0);
                assert_eq!(p[((2 + h) * 3 + i) * 3 + 2], 0.0);
            }
        }
    }
}
