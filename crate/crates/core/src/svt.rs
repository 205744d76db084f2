//! Dual scalar/vector channel primitives.
//!
//! A feature tuple `(s, V)` carries `n` rotation-invariant scalars and `ν`
//! geometric vectors stored row-major as a `ν×3` block. The helpers here are
//! the plain (tape-free) versions of the operations the perceptron is built
//! from, together with orthogonal-transform utilities used to audit
//! equivariance.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Default regularizer of [`row_norms`]; the reported norm of a zero row.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SvError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch { op: &'static str, expected: usize, got: usize },
    #[error("matrix is not orthogonal (max |MᵀM - I| = {deviation:e})")]
    NotOrthogonal { deviation: f64 },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalarChannels(pub Vec<f64>);

impl ScalarChannels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorChannels(pub Vec<[f64; 3]>);

impl VectorChannels {
    pub fn zeros(count: usize) -> Self {
        Self(alloc::vec![[0.0; 3]; count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows3(&self.0)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, SvError> {
        if t.cols() != 3 {
            return Err(SvError::DimensionMismatch { op: "vector channels", expected: 3, got: t.cols() });
        }
        Ok(Self(t.to_rows3()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max)
    }
}

/// A feature tuple of `n` scalar channels and `ν` vector channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SvTuple {
    pub s: ScalarChannels,
    pub v: VectorChannels,
}

impl SvTuple {
    pub fn new(s: Vec<f64>, v: Vec<[f64; 3]>) -> Result<Self, SvError> {
        if !s.iter().all(|x| x.is_finite()) {
            return Err(SvError::NonFinite("scalar channels"));
        }
        if !v.iter().flatten().all(|x| x.is_finite()) {
            return Err(SvError::NonFinite("vector channels"));
        }
        Ok(Self { s: ScalarChannels(s), v: VectorChannels(v) })
    }

    /// `(n, ν)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.s.len(), self.v.len())
    }

    pub fn zeros(n: usize, nu: usize) -> Self {
        Self { s: ScalarChannels(alloc::vec![0.0; n]), v: VectorChannels::zeros(nu) }
    }

    pub fn rotated(&self, r: &Orthogonal3) -> Self {
        Self { s: self.s.clone(), v: apply_orthogonal(r, &self.v) }
    }
}

/// A 3×3 orthogonal matrix (rotation or reflection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orthogonal3([[f64; 3]; 3]);

impl Orthogonal3 {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, SvError> {
        let mut deviation: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                deviation = deviation.max((dot - want).abs());
            }
        }
        if !deviation.is_finite() || deviation > Self::TOLERANCE {
            return Err(SvError::NotOrthogonal { deviation });
        }
        Ok(Self(m))
    }

    pub const fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn det(&self) -> f64 {
        det3(&self.0)
    }

    /// `R v`.
    #[inline]
    pub fn apply(&self, v: &[f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Smooth row norms `sqrt(|v_i|² + eps²)`; strictly positive and
/// differentiable at the zero row.
pub fn row_norms(v: &VectorChannels, eps: f64) -> Vec<f64> {
    debug_assert!(eps > 0.0);
    v.0.iter().map(|r| libm::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + eps * eps)).collect()
}

/// `W V` for a channel-mixing matrix `W` (a×b) and `V` (b×3).
pub fn lin_map_vectors(w: &Tensor, v: &VectorChannels) -> Result<VectorChannels, SvError> {
    if w.cols() != v.len() {
        return Err(SvError::DimensionMismatch { op: "lin_map_vectors", expected: w.cols(), got: v.len() });
    }
    let out = (0..w.rows())
        .map(|i| {
            let mut acc = [0.0; 3];
            for (wij, r) in w.row(i).iter().zip(&v.0) {
                for k in 0..3 {
                    acc[k] += wij * r[k];
                }
            }
            acc
        })
        .collect();
    Ok(VectorChannels(out))
}

/// Scales row `i` of `V` by `g[i]`.
pub fn gate_rows(g: &[f64], v: &VectorChannels) -> Result<VectorChannels, SvError> {
    if g.len() != v.len() {
        return Err(SvError::DimensionMismatch { op: "gate_rows", expected: v.len(), got: g.len() });
    }
    Ok(VectorChannels(g.iter().zip(&v.0).map(|(&gi, r)| [gi * r[0], gi * r[1], gi * r[2]]).collect()))
}

/// Replaces each row `v` by `R v` (i.e. `V Rᵀ`).
pub fn apply_orthogonal(r: &Orthogonal3, v: &VectorChannels) -> VectorChannels {
    VectorChannels(v.0.iter().map(|row| r.apply(row)).collect())
}

/// Same as [`apply_orthogonal`] on a raw `ν×3` tensor.
pub fn apply_orthogonal_tensor(r: &Orthogonal3, v: &Tensor) -> Tensor {
    debug_assert_eq!(v.cols(), 3);
    let rows: Vec<[f64; 3]> = v.to_rows3().iter().map(|row| r.apply(row)).collect();
    Tensor::from_rows3(&rows)
}

/// Deterministic orthogonal matrix from a seeded Gaussian 3×3 via
/// Gram-Schmidt. With `allow_reflection = false` the result is a proper
/// rotation; otherwise the determinant sign follows the Gaussian draw.
pub fn random_orthogonal(seed: u64, allow_reflection: bool) -> Orthogonal3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m = [[0.0f64; 3]; 3];
        for row in &mut m {
            for x in row.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        if let Some(mut q) = gram_schmidt(m) {
            if !allow_reflection && det3(&q) < 0.0 {
                for x in &mut q[2] {
                    *x = -*x;
                }
            }
            // Gram-Schmidt on a well-conditioned draw is orthogonal to ~1e-16.
            if let Ok(r) = Orthogonal3::new(q) {
                return r;
            }
        }
    }
}

fn gram_schmidt(mut m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    for i in 0..3 {
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                for k in 0..3 {
                    m[i][k] -= dot * m[j][k];
                }
            }
        }
        let norm = libm::sqrt(m[i].iter().map(|x| x * x).sum());
        if norm < 1e-6 {
            return None;
        }
        for x in &mut m[i] {
            *x /= norm;
        }
    }
    Some(m)
}
