//! Dense f64 vectors and row-major matrices with the handful of kernels the
//! pooling operators need. Reductions always sum left to right so results are
//! bit-reproducible.

use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MivcError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    /// Sum in index order.
    pub fn sum(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, x| acc + x)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &x) in self.0.iter().enumerate() {
            match best {
                Some((_, b)) if x <= b => {}
                _ => best = Some((i, x)),
            }
        }
        best.map(|(i, _)| i)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * scale).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MivcError::shape(
                "matrix",
                format!("{} elements for {rows}x{cols}", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(MivcError::shape(
                    "matrix rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Entries drawn uniformly from `[-bound, bound]`, row-major order.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * a b^T`
    pub(crate) fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!((self.rows, self.cols), (a.len(), b.len()));
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MivcError::shape(op, format!("length {a}"), format!("length {b}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Unchecked matrix-vector product on raw slices; callers validate shapes.
pub(crate) fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v);
    }
}

/// `out += m^T v`, unchecked.
pub(crate) fn matvec_t_acc(m: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += mij * vi;
        }
    }
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(MivcError::shape(
            "matvec",
            format!("vector of length {} for {}x{} matrix", m.cols, m.rows, m.cols),
            format!("vector of length {}", v.len()),
        ));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v.as_slice(), &mut out);
    Ok(Vector(out))
}

pub fn softmax_stable(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(MivcError::shape("softmax", "non-empty vector", "length 0"));
    }
    Ok(Vector(softmax_slice(v.as_slice())))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total = exps.iter().fold(0.0, |acc, x| acc + x);
    exps.into_iter().map(|e| e / total).collect()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_vec(v: &Vector) -> Vector {
    Vector(v.iter().map(|x| x.tanh()).collect())
}

pub fn sigm_vec(v: &Vector) -> Vector {
    Vector(v.iter().map(|&x| sigmoid(x)).collect())
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    check_len("hadamard", a.len(), b.len())?;
    Ok(Vector(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()))
}

/// Seeded ChaCha8 generator. The stream depends only on the seed, never on
/// the platform or thread count.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
                .rotate_left(17),
        )
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_vector(&mut self, len: usize, bound: f64) -> Vector {
        Vector((0..len).map(|_| self.uniform(-bound, bound)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matvec_examples() {
        let id = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(matvec(&id, &Vector::new(vec![3.0, 4.0])).unwrap().as_slice(), &[3.0, 4.0]);
        let row = m(&[vec![1.0, 2.0]]);
        assert_eq!(matvec(&row, &Vector::new(vec![3.0, 4.0])).unwrap().as_slice(), &[11.0]);
        let diag = m(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(matvec(&diag, &Vector::new(vec![1.0, 1.0])).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let err = matvec(&Matrix::zeros(2, 3), &Vector::zeros(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_stable(&Vector::new(vec![0.0, 0.0])).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(softmax_stable(&Vector::new(vec![5.0])).unwrap().as_slice(), &[1.0]);
        let s = softmax_stable(&Vector::new(vec![0.0, 1.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((s[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!(softmax_stable(&Vector::zeros(0)).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(tanh_vec(&Vector::new(vec![0.0])).as_slice(), &[0.0]);
        assert_eq!(sigm_vec(&Vector::new(vec![0.0])).as_slice(), &[0.5]);
        let h = hadamard(&Vector::new(vec![2.0, 3.0]), &Vector::new(vec![4.0, 5.0])).unwrap();
        assert_eq!(h.as_slice(), &[8.0, 15.0]);
        assert!(hadamard(&Vector::zeros(2), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(1).fork(0).uniform(0.0, 1.0), Rng::new(1).fork(1).uniform(0.0, 1.0));
    }

    fn vec_strategy(len: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-scale..scale, len)
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            (rows, cols) in (1usize..6, 1usize..6),
            seed in any::<u64>(),
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
        ) {
            let mut rng = Rng::new(seed);
            let mat = Matrix::uniform(rows, cols, 1.0, &mut rng);
            let u = rng.uniform_vector(cols, 1.0);
            let v = rng.uniform_vector(cols, 1.0);
            let combo = Vector::new(u.iter().zip(v.iter()).map(|(x, y)| a * x + b * y).collect());
            let lhs = matvec(&mat, &combo).unwrap();
            let mu = matvec(&mat, &u).unwrap();
            let mv = matvec(&mat, &v).unwrap();
            for i in 0..rows {
                prop_assert!((lhs[i] - (a * mu[i] + b * mv[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one_even_for_large_inputs(v in (1usize..40).prop_flat_map(|n| vec_strategy(n, 1e3))) {
            let s = softmax_stable(&Vector::new(v)).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(s.is_finite());
        }

        #[test]
        fn softmax_is_shift_invariant(v in (1usize..20).prop_flat_map(|n| vec_strategy(n, 10.0)), c in -50.0f64..50.0) {
            let s = softmax_stable(&Vector::new(v.clone())).unwrap();
            let shifted = softmax_stable(&Vector::new(v.iter().map(|x| x + c).collect())).unwrap();
            for (x, y) in s.iter().zip(shifted.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kernels_are_deterministic(v in (1usize..20).prop_flat_map(|n| vec_strategy(n, 5.0))) {
            let v = Vector::new(v);
            let a = softmax_stable(&v).unwrap();
            let b = softmax_stable(&v).unwrap();
            prop_assert_eq!(a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
