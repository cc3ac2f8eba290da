//! Dense f64 vectors and matrices with just the operations the network needs.
//!
//! Every routine here is a pure function over its operands. Randomness comes
//! from [`param_rng`], a ChaCha8 generator keyed by `(seed, stream)` so that
//! each parameter tensor draws from its own independent, reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Vector(pub(crate) Vec<f64>);

impl Vector {
    /// Wraps `data`, rejecting empty or non-finite input.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("vector must have at least one entry".into()));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("vector entry {i}")));
        }
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * k).collect())
    }

    /// Concatenates a list of vectors end to end.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Vector>) -> Vector {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&p.0);
        }
        Vector(out)
    }

    fn zip_with(
        &self,
        other: &Vector,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                op,
                format!("lhs has {} entries, rhs has {}", self.len(), other.len()),
            ));
        }
        Ok(Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("matrix entries"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `Wᵀ v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::shape(
                "transpose_mul",
                format!(
                    "matrix has {} rows, vector has {} entries",
                    self.rows,
                    v.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        Ok(Vector(out))
    }

    /// `self += a ⊗ b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W has {} columns but x has {} entries", w.cols, x.len()),
        ));
    }
    if w.rows != b.len() {
        return Err(Error::shape(
            "affine",
            format!("W has {} rows but b has {} entries", w.rows, b.len()),
        ));
    }
    let out: Vec<f64> = (0..w.rows)
        .map(|r| {
            w.row(r)
                .iter()
                .zip(&x.0)
                .fold(b.0[r], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect();
    Ok(Vector(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Elementwise value and derivative. `slope` is read only for leaky ReLU.
pub fn activation(kind: Activation, x: &Vector, slope: f64) -> Result<(Vector, Vector)> {
    if !x.is_finite() {
        return Err(Error::numeric("activation input"));
    }
    if kind == Activation::LeakyRelu && !(slope > 0.0) {
        return Err(Error::config("leaky_slope", "must be > 0"));
    }
    let (value, deriv): (Vec<f64>, Vec<f64>) =
        x.0.iter()
            .map(|&v| match kind {
                Activation::Sigmoid => {
                    let s = sigmoid(v);
                    (s, s * (1.0 - s))
                }
                Activation::Tanh => {
                    let t = v.tanh();
                    (t, 1.0 - t * t)
                }
                Activation::LeakyRelu => (leaky_relu(v, slope), leaky_relu_grad(v, slope)),
            })
            .unzip();
    Ok((Vector(value), Vector(deriv)))
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all tensors together so that their joint ℓ2 norm is at most
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Reproducible generator for one parameter tensor (or any other consumer)
/// identified by `stream`.
pub fn param_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let out = affine(&Matrix::identity(2), &v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0]);

        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let out = affine(&w, &v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 7.0]);

        let out = affine(
            &Matrix::zeros(3, 3),
            &v(&[5.0, 6.0, 7.0]),
            &v(&[1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_rejects_mismatched_operands() {
        let err = affine(&Matrix::zeros(2, 3), &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "affine", .. }));
        assert!(err.to_string().contains("columns"));
        let err = affine(&Matrix::zeros(2, 2), &v(&[1.0, 2.0]), &v(&[0.0])).unwrap_err();
        assert!(err.to_string().contains("rows"));
    }

    #[test]
    fn activation_examples() {
        let zero = v(&[0.0]);
        let (s, ds) = activation(Activation::Sigmoid, &zero, 0.01).unwrap();
        assert_eq!((s[0], ds[0]), (0.5, 0.25));
        let (t, dt) = activation(Activation::Tanh, &zero, 0.01).unwrap();
        assert_eq!((t[0], dt[0]), (0.0, 1.0));
        let (l, dl) = activation(Activation::LeakyRelu, &v(&[-2.0]), 0.01).unwrap();
        assert_eq!((l[0], dl[0]), (-0.02, 0.01));
    }

    #[test]
    fn activation_rejects_non_finite() {
        let bad = Vector(vec![f64::NAN]);
        assert!(matches!(
            activation(Activation::Tanh, &bad, 0.01),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let mut rng = param_rng(11, 0);
        let eps = 1e-6;
        for kind in [Activation::Sigmoid, Activation::Tanh, Activation::LeakyRelu] {
            let mut checked = 0;
            while checked < 100 {
                let x: f64 = rng.gen_range(-4.0..4.0);
                if kind == Activation::LeakyRelu && x.abs() < 1e-4 {
                    continue;
                }
                let (_, d) = activation(kind, &v(&[x]), 0.01).unwrap();
                let (hi, _) = activation(kind, &v(&[x + eps]), 0.01).unwrap();
                let (lo, _) = activation(kind, &v(&[x - eps]), 0.01).unwrap();
                let fd = (hi[0] - lo[0]) / (2.0 * eps);
                let rel = (d[0] - fd).abs() / d[0].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "{kind:?} at {x}: analytic {} fd {fd}", d[0]);
                checked += 1;
            }
        }
    }

    #[test]
    fn clip_examples() {
        let mut a = [3.0, 4.0];
        let norm = clip_global_norm(&mut [&mut a[..]], 5.0);
        assert_eq!((norm, a), (5.0, [3.0, 4.0]));

        let mut a = [6.0, 8.0];
        let norm = clip_global_norm(&mut [&mut a[..]], 5.0);
        assert_eq!((norm, a), (10.0, [3.0, 4.0]));

        let (mut a, mut b) = ([3.0, 0.0], [0.0, 4.0]);
        let norm = clip_global_norm(&mut [&mut a[..], &mut b[..]], 10.0);
        assert_eq!((norm, a, b), (5.0, [3.0, 0.0], [0.0, 4.0]));

        assert_eq!(clip_global_norm(&mut [], 1.0), 0.0);
    }

    #[test]
    fn param_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| param_rng(3, 1).gen()).collect();
        let b: Vec<u64> = (0..4).map(|_| param_rng(3, 1).gen()).collect();
        assert_eq!(a, b);
        let x: u64 = param_rng(3, 1).gen();
        let y: u64 = param_rng(3, 2).gen();
        assert_ne!(x, y);
    }

    proptest! {
        #[test]
        fn affine_is_linear(
            w in prop::collection::vec(-1.0f64..1.0, 12),
            x in prop::collection::vec(-1.0f64..1.0, 4),
            y in prop::collection::vec(-1.0f64..1.0, 4),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let w = Matrix::from_vec(3, 4, w).unwrap();
            let zero = Vector::zeros(3);
            let (x, y) = (v(&x), v(&y));
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = affine(&w, &combo, &zero).unwrap();
            let rhs = affine(&w, &x, &zero).unwrap().scale(a)
                .add(&affine(&w, &y, &zero).unwrap().scale(b)).unwrap();
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn clipping_bounds_norm_and_keeps_direction(
            a in prop::collection::vec(-20.0f64..20.0, 1..6),
            b in prop::collection::vec(-20.0f64..20.0, 1..6),
            max_norm in 0.1f64..10.0,
        ) {
            let (orig_a, orig_b) = (a.clone(), b.clone());
            let (mut a, mut b) = (a, b);
            let before = clip_global_norm(&mut [&mut a[..], &mut b[..]], max_norm);
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            let orig: Vec<f64> = orig_a.iter().chain(&orig_b).copied().collect();
            let after = l2_norm(&joined);
            prop_assert!(after <= max_norm + 1e-12);
            if before > 0.0 && after > 0.0 {
                let dot: f64 = joined.iter().zip(&orig).map(|(p, q)| p * q).sum();
                let cos = dot / (after * before);
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }
}
