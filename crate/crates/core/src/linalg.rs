//! Dense complex linear algebra for the small matrices that appear per
//! frequency bin (M×M spatial covariances, MK×MK prediction systems).
//!
//! Matrices are `ndarray::Array2<Complex<T>>` in row-major order.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex;
use num_traits::{Float, One, Zero};

use crate::Scalar;

pub type CMatrix<T> = Array2<Complex<T>>;
pub type CVector<T> = Array1<Complex<T>>;

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu<T: Scalar> {
    lu: CMatrix<T>,
    perm: Vec<usize>,
    sign_flips: usize,
}

impl<T: Scalar> Lu<T> {
    /// Factorizes a square matrix. Returns `None` when a pivot vanishes
    /// relative to the largest entry of `a`.
    pub fn new(a: ArrayView2<Complex<T>>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU of a non-square matrix");
        let mut lu = a.to_owned();
        let scale = a.iter().fold(T::zero(), |acc, z| acc.max(z.norm()));
        if scale == T::zero() && n > 0 {
            return None;
        }
        let tiny = scale * T::epsilon() * T::lit(n as f64);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign_flips = 0;
        for k in 0..n {
            let (piv, piv_mag) = (k..n)
                .map(|i| (i, lu[[i, k]].norm()))
                .fold((k, T::lit(-1.0)), |best, cur| if cur.1 > best.1 { cur } else { best });
            if piv_mag <= tiny {
                return None;
            }
            if piv != k {
                for j in 0..n {
                    lu.swap([k, j], [piv, j]);
                }
                perm.swap(k, piv);
                sign_flips += 1;
            }
            let inv_pivot = lu[[k, k]].inv();
            for i in (k + 1)..n {
                let factor = lu[[i, k]] * inv_pivot;
                lu[[i, k]] = factor;
                if factor.is_zero() {
                    continue;
                }
                for j in (k + 1)..n {
                    let u = lu[[k, j]];
                    lu[[i, j]] -= factor * u;
                }
            }
        }
        Some(Self { lu, perm, sign_flips })
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    pub fn det(&self) -> Complex<T> {
        let mut d = Complex::one();
        for k in 0..self.dim() {
            d *= self.lu[[k, k]];
        }
        if self.sign_flips % 2 == 1 {
            -d
        } else {
            d
        }
    }

    /// `ln |det A|^2`, computed without forming the determinant.
    pub fn ln_abs_det_sq(&self) -> T {
        (0..self.dim()).map(|k| self.lu[[k, k]].norm_sqr().ln()).sum()
    }

    pub fn solve_vec(&self, b: ArrayView1<Complex<T>>) -> CVector<T> {
        let n = self.dim();
        let mut x: CVector<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[[i, j]] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[[i, j]] * x[j];
            }
            x[i] = acc / self.lu[[i, i]];
        }
        x
    }

    pub fn solve(&self, b: ArrayView2<Complex<T>>) -> CMatrix<T> {
        let mut out = CMatrix::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve_vec(col));
        }
        out
    }

    pub fn inverse(&self) -> CMatrix<T> {
        self.solve(identity::<T>(self.dim()).view())
    }
}

pub fn identity<T: Scalar>(n: usize) -> CMatrix<T> {
    CMatrix::from_shape_fn((n, n), |(i, j)| if i == j { Complex::one() } else { Complex::zero() })
}

pub fn inverse<T: Scalar>(a: ArrayView2<Complex<T>>) -> Option<CMatrix<T>> {
    Lu::new(a).map(|lu| lu.inverse())
}

/// Conjugate transpose.
pub fn hermitian_transpose<T: Scalar>(a: ArrayView2<Complex<T>>) -> CMatrix<T> {
    a.t().mapv(|z| z.conj())
}

pub fn trace<T: Scalar>(a: ArrayView2<Complex<T>>) -> Complex<T> {
    a.diag().iter().copied().fold(Complex::zero(), |acc, z| acc + z)
}

/// Adds `load` to every diagonal entry in place.
pub fn add_diagonal<T: Scalar>(a: &mut CMatrix<T>, load: T) {
    for k in 0..a.nrows() {
        a[[k, k]].re += load;
    }
}

/// Matrix product for small complex matrices.
pub fn matmul<T: Scalar>(a: ArrayView2<Complex<T>>, b: ArrayView2<Complex<T>>) -> CMatrix<T> {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = CMatrix::zeros((n, m));
    for i in 0..n {
        for l in 0..k {
            let ail = a[[i, l]];
            if ail.is_zero() {
                continue;
            }
            for j in 0..m {
                out[[i, j]] += ail * b[[l, j]];
            }
        }
    }
    out
}

pub fn matvec<T: Scalar>(a: ArrayView2<Complex<T>>, x: ArrayView1<Complex<T>>) -> CVector<T> {
    assert_eq!(a.ncols(), x.len(), "matvec shape mismatch");
    Array1::from_shape_fn(a.nrows(), |i| {
        a.row(i).iter().zip(x.iter()).fold(Complex::zero(), |acc, (&aij, &xj)| acc + aij * xj)
    })
}

/// `a^H b` for complex vectors.
pub fn inner<T: Scalar>(a: ArrayView1<Complex<T>>, b: ArrayView1<Complex<T>>) -> Complex<T> {
    a.iter().zip(b.iter()).fold(Complex::zero(), |acc, (x, y)| acc + x.conj() * *y)
}

pub fn norm<T: Scalar>(a: ArrayView1<Complex<T>>) -> T {
    a.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

/// Cholesky factor `L` with `A = L L^H` for a Hermitian positive definite
/// matrix. Returns `None` if a pivot is not positive relative to the trace.
pub fn cholesky<T: Scalar>(a: ArrayView2<Complex<T>>) -> Option<CMatrix<T>> {
    let n = a.nrows();
    let tr = trace(a).re;
    let tiny = Float::abs(tr) * T::epsilon() * T::lit(n.max(1) as f64);
    // Row-major storage: row `i` of the factor is `l[i * n..i * n + i + 1]`.
    let mut l = vec![Complex::<T>::zero(); n * n];
    for j in 0..n {
        let row_j = &mut l[j * n..(j + 1) * n];
        let d = a[[j, j]].re - row_j[..j].iter().map(|z| z.norm_sqr()).sum::<T>();
        if !(d > tiny) {
            return None;
        }
        let djj = d.sqrt();
        row_j[j] = Complex::new(djj, T::zero());
        for i in (j + 1)..n {
            let (head, tail) = l.split_at_mut(i * n);
            let row_j = &head[j * n..j * n + j];
            let row_i = &mut tail[..n];
            let s = a[[i, j]] - conj_dot(&row_i[..j], row_j);
            row_i[j] = s / djj;
        }
    }
    Some(CMatrix::from_shape_vec((n, n), l).expect("n × n storage"))
}

/// `Σ_k a[k] · conj(b[k])`.
fn conj_dot<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(Complex::zero(), |acc, (&x, &y)| acc + x * y.conj())
}

/// Solves `A X = B` given the Cholesky factor of `A`.
pub fn cholesky_solve<T: Scalar>(l: ArrayView2<Complex<T>>, b: ArrayView2<Complex<T>>) -> CMatrix<T> {
    let n = l.nrows();
    let l = l.as_standard_layout();
    let l = l.as_slice().expect("standard layout");
    // Each right-hand side is solved as one contiguous row of `xt`.
    let mut xt = b.t().as_standard_layout().into_owned();
    for mut x in xt.rows_mut() {
        let x = x.as_slice_mut().expect("contiguous row");
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            let s = x[i] - row.iter().zip(&x[..i]).fold(Complex::zero(), |acc, (&lik, &xk)| acc + lik * xk);
            x[i] = s / l[i * n + i].re;
        }
        for i in (0..n).rev() {
            x[i] = x[i] / l[i * n + i].re;
            let xi = x[i];
            for (xk, &lik) in x[..i].iter_mut().zip(&l[i * n..i * n + i]) {
                *xk -= lik.conj() * xi;
            }
        }
    }
    xt.t().as_standard_layout().into_owned()
}

/// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi
/// rotations.
///
/// Returns eigenvalues sorted in descending order and the matching
/// unit-norm eigenvectors as the columns of the second element. Only the
/// Hermitian part of `a` is used. `None` if the sweeps do not converge.
pub fn hermitian_eig<T: Scalar>(a: ArrayView2<Complex<T>>) -> Option<(Vec<T>, CMatrix<T>)> {
    const MAX_SWEEPS: usize = 60;
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigendecomposition of a non-square matrix");
    let mut h = CMatrix::from_shape_fn((n, n), |(i, j)| {
        (a[[i, j]] + a[[j, i]].conj()) * T::lit(0.5)
    });
    let mut vecs = identity::<T>(n);
    let total = h.iter().map(|z| z.norm_sqr()).sum::<T>();
    let target = total * T::epsilon() * T::epsilon();

    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| h[[i, j]].norm_sqr())
            .sum();
        if off <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let b = h[[p, q]];
                let r = b.norm();
                if r == T::zero() {
                    continue;
                }
                let phase = b / r;
                let app = h[[p, p]].re;
                let aqq = h[[q, q]].re;
                let theta = (aqq - app) / (T::lit(2.0) * r);
                let t = if theta >= T::zero() {
                    T::one() / (theta + (theta * theta + T::one()).sqrt())
                } else {
                    -T::one() / (-theta + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // Rotation R = D J with D = diag(1, conj(phase)) on (p, q).
                let rpp = Complex::new(c, T::zero());
                let rpq = Complex::new(s, T::zero());
                let rqp = phase.conj() * (-s);
                let rqq = phase.conj() * c;
                for k in 0..n {
                    let hp = h[[k, p]];
                    let hq = h[[k, q]];
                    h[[k, p]] = hp * rpp + hq * rqp;
                    h[[k, q]] = hp * rpq + hq * rqq;
                    let vp = vecs[[k, p]];
                    let vq = vecs[[k, q]];
                    vecs[[k, p]] = vp * rpp + vq * rqp;
                    vecs[[k, q]] = vp * rpq + vq * rqq;
                }
                for k in 0..n {
                    let hp = h[[p, k]];
                    let hq = h[[q, k]];
                    h[[p, k]] = rpp.conj() * hp + rqp.conj() * hq;
                    h[[q, k]] = rpq.conj() * hp + rqq.conj() * hq;
                }
                h[[p, q]] = Complex::zero();
                h[[q, p]] = Complex::zero();
                h[[p, p]].im = T::zero();
                h[[q, q]].im = T::zero();
            }
        }
    }
    if !converged {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| h[[j, j]].re.partial_cmp(&h[[i, i]].re).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| h[[i, i]].re).collect();
    let vectors = CMatrix::from_shape_fn((n, n), |(r, c)| vecs[[r, order[c]]]);
    Some((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> CMatrix<f64> {
        CMatrix::from_shape_fn((n, n), |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn max_abs_diff(a: &CMatrix<f64>, b: &CMatrix<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..7 {
            let a = random_matrix(n, &mut rng);
            let inv = inverse(a.view()).unwrap();
            assert!(max_abs_diff(&matmul(a.view(), inv.view()), &identity(n)) < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_has_no_lu() {
        let a = CMatrix::<f64>::from_shape_fn((3, 3), |(i, _)| Complex::new(i as f64, 0.0));
        assert!(Lu::new(a.view()).is_none());
        assert!(Lu::new(CMatrix::<f64>::zeros((2, 2)).view()).is_none());
    }

    #[test]
    fn determinant_of_permutation_and_diagonal() {
        let mut a = CMatrix::<f64>::zeros((3, 3));
        a[[0, 1]] = Complex::new(1.0, 0.0);
        a[[1, 0]] = Complex::new(1.0, 0.0);
        a[[2, 2]] = Complex::new(0.0, 2.0);
        let lu = Lu::new(a.view()).unwrap();
        assert!((lu.det() - Complex::new(0.0, -2.0)).norm() < 1e-14);
        assert!((lu.ln_abs_det_sq() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_solves_hermitian_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_matrix(6, &mut rng);
        let mut a = matmul(b.view(), hermitian_transpose(b.view()).view());
        add_diagonal(&mut a, 0.1);
        let rhs = random_matrix(6, &mut rng);
        let l = cholesky(a.view()).unwrap();
        let x = cholesky_solve(l.view(), rhs.view());
        assert!(max_abs_diff(&matmul(a.view(), x.view()), &rhs) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = identity::<f64>(2);
        a[[1, 1]] = Complex::new(-1.0, 0.0);
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn eig_matches_nalgebra_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..7 {
            let b = random_matrix(n, &mut rng);
            let a = matmul(b.view(), hermitian_transpose(b.view()).view());
            let (vals, vecs) = hermitian_eig(a.view()).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
            let mut oracle: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            oracle.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in vals.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{vals:?} vs {oracle:?}");
            }
            // A v = lambda v, unit norm, orthonormal
            for k in 0..n {
                let v = vecs.column(k);
                let av = matvec(a.view(), v);
                for i in 0..n {
                    assert!((av[i] - v[i] * vals[k]).norm() < 1e-10);
                }
                assert!((norm(v) - 1.0).abs() < 1e-12);
            }
            let gram = matmul(hermitian_transpose(vecs.view()).view(), vecs.view());
            assert!(max_abs_diff(&gram, &identity(n)) < 1e-12);
        }
    }

    #[test]
    fn eig_handles_degenerate_spectrum() {
        let a = identity::<f64>(4);
        let (vals, vecs) = hermitian_eig(a.view()).unwrap();
        assert!(vals.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(max_abs_diff(&vecs, &identity(4)) < 1e-15);
    }
}
