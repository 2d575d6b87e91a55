//! Orthogonal rotations stored densely or as a product of Householder
//! reflections `R = H_r ⋯ H_1`, `H_j = I - 2 w_j w_jᵀ`.

use nalgebra::DMatrix;

pub const ORTHOGONALITY_TOL: f64 = 1e-10;
pub const UNIT_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Rotation {
    Dense(DMatrix<f64>),
    /// Reflections applied in order `w_1, …, w_r` when computing `R x`.
    Householder { dim: usize, vectors: Vec<Vec<f64>> },
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        Rotation::Householder { dim, vectors: Vec::new() }
    }

    /// Panics if `m` is not orthogonal to `ORTHOGONALITY_TOL`.
    pub fn dense(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "rotation must be square");
        let n = m.nrows();
        let err = (&m * m.transpose() - DMatrix::<f64>::identity(n, n)).amax();
        assert!(err <= ORTHOGONALITY_TOL, "matrix is not orthogonal (error {err:e})");
        Rotation::Dense(m)
    }

    /// Panics unless every vector has unit norm.
    pub fn householder(dim: usize, vectors: Vec<Vec<f64>>) -> Self {
        for w in &vectors {
            assert_eq!(w.len(), dim, "dimension mismatch");
            let n: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= UNIT_NORM_TOL, "Householder vector must be unit norm");
        }
        Rotation::Householder { dim, vectors }
    }

    /// Householder form of an orthogonal `R` whose first `r` rows are `±` the
    /// given orthonormal columns (`R v_j = ±e_j`); the remaining rows complete
    /// the basis implicitly.
    pub fn householder_from_columns(cols: &DMatrix<f64>) -> Self {
        let (d, r) = cols.shape();
        let mut a = cols.clone();
        let mut vectors = Vec::with_capacity(r);
        for j in 0..r {
            let norm = a.view((j, j), (d - j, 1)).norm();
            if norm == 0.0 {
                continue;
            }
            let alpha = if a[(j, j)] >= 0.0 { -norm } else { norm };
            let mut w = vec![0.0; d];
            for i in j..d {
                w[i] = a[(i, j)];
            }
            w[j] -= alpha;
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wn <= f64::EPSILON * norm {
                continue;
            }
            w.iter_mut().for_each(|v| *v /= wn);
            for c in j..r {
                let dot: f64 = (j..d).map(|i| w[i] * a[(i, c)]).sum();
                for i in j..d {
                    a[(i, c)] -= 2.0 * dot * w[i];
                }
            }
            vectors.push(w);
        }
        Rotation::Householder { dim: d, vectors }
    }

    pub fn dim(&self) -> usize {
        match self {
            Rotation::Dense(m) => m.nrows(),
            Rotation::Householder { dim, .. } => *dim,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Rotation::Householder { vectors, .. } if vectors.is_empty())
    }

    /// `R x` (or `Rᵀ x` when `transpose`) written into `out`.
    pub fn apply_into(&self, x: &[f64], transpose: bool, out: &mut [f64]) {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        match self {
            Rotation::Dense(m) => {
                let d = m.nrows();
                for i in 0..d {
                    out[i] = if transpose {
                        (0..d).map(|k| m[(k, i)] * x[k]).sum()
                    } else {
                        (0..d).map(|k| m[(i, k)] * x[k]).sum()
                    };
                }
            }
            Rotation::Householder { vectors, .. } => {
                out.copy_from_slice(x);
                let reflect = |w: &Vec<f64>, v: &mut [f64]| {
                    let dot: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(w).for_each(|(vi, wi)| *vi -= 2.0 * dot * wi);
                };
                if transpose {
                    vectors.iter().rev().for_each(|w| reflect(w, out));
                } else {
                    vectors.iter().for_each(|w| reflect(w, out));
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, transpose, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Rotation::Dense(m) => m.clone(),
            Rotation::Householder { dim, .. } => {
                let d = *dim;
                let mut m = DMatrix::zeros(d, d);
                let mut e = vec![0.0; d];
                for j in 0..d {
                    e.fill(0.0);
                    e[j] = 1.0;
                    let col = self.apply(&e, false);
                    m.set_column(j, &nalgebra::DVector::from_vec(col));
                }
                m
            }
        }
    }
}
