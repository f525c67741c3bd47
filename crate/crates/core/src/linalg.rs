//! Small dense kernels shared by the channel, solver, and task layers: real
//! and complex vector helpers, symmetric eigenvalues (cyclic Jacobi), a
//! Cholesky solve for normal equations, a Hermitian power iteration, and
//! pool-adjacent-violators for order-constrained projections. Dimensions stay
//! small (tens), so simplicity beats asymptotics here.

use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};
use num_complex::Complex;

pub type C<T> = Complex<T>;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm2(a).sqrt()
}

/// `y += s * x`
pub fn add_scaled<T: Scalar>(y: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Inner product `a^H b` (conjugate on the first argument).
pub fn cdot<T: Scalar>(a: &[C<T>], b: &[C<T>]) -> C<T> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = C::new(T::zero(), T::zero());
    for (x, y) in a.iter().zip(b) {
        acc += x.conj() * y;
    }
    acc
}

pub fn cnorm2<T: Scalar>(a: &[C<T>]) -> T {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn cnorm<T: Scalar>(a: &[C<T>]) -> T {
    cnorm2(a).sqrt()
}

/// Normalizes a complex vector to unit Euclidean norm. Errors on (near-)zero
/// input instead of dividing by noise.
pub fn cnormalize<T: Scalar>(a: &[C<T>]) -> Result<Vec<C<T>>> {
    let n = cnorm(a);
    if n < real(1e-12) {
        return Err(Error::domain("cannot normalize a zero vector"));
    }
    Ok(a.iter().map(|z| z / n).collect())
}

/// All eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
/// Returns them sorted ascending.
pub fn sym_eigenvalues<T: Scalar>(mat: &[Vec<T>]) -> Result<Vec<T>> {
    let n = mat.len();
    if n == 0 || mat.iter().any(|r| r.len() != n) {
        return Err(Error::dimension("sym_eigenvalues needs a square matrix"));
    }
    let mut a: Vec<Vec<T>> = mat.to_vec();
    let tol = real::<T>(1e-14)
        * a.iter()
            .flat_map(|r| r.iter())
            .fold(T::one(), |m, &x| m.max(x.abs()));
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p][q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= tol {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (real::<T>(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky.
pub fn spd_solve<T: Scalar>(mat: &[Vec<T>], b: &[T]) -> Result<Vec<T>> {
    let n = mat.len();
    if n == 0 || mat.iter().any(|r| r.len() != n) || b.len() != n {
        return Err(Error::dimension("spd_solve shape mismatch"));
    }
    let mut l = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = mat[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= T::zero() {
                    return Err(Error::numeric("matrix not positive definite"));
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    // forward then back substitution
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

/// Principal eigenvector of the Hermitian PSD matrix `sum_u w_u v_u v_u^H`,
/// given the vectors and weights, by deterministic power iteration.
pub fn principal_component<T: Scalar>(vectors: &[Vec<C<T>>], weights: &[T]) -> Result<Vec<C<T>>> {
    if vectors.is_empty() || vectors.len() != weights.len() {
        return Err(Error::dimension("principal_component input mismatch"));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::dimension("principal_component ragged vectors"));
    }
    // Start from the weighted sum; fall back to e_0 if it vanishes.
    let mut x: Vec<C<T>> = vec![C::new(T::zero(), T::zero()); dim];
    for (v, &w) in vectors.iter().zip(weights) {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += vi * w;
        }
    }
    if cnorm(&x) < real(1e-12) {
        x = vec![C::new(T::zero(), T::zero()); dim];
        x[0] = C::new(T::one(), T::zero());
    }
    let mut x = cnormalize(&x)?;
    for _ in 0..200 {
        let mut y: Vec<C<T>> = vec![C::new(T::zero(), T::zero()); dim];
        for (v, &w) in vectors.iter().zip(weights) {
            let proj = cdot(v, &x) * w;
            for (yi, vi) in y.iter_mut().zip(v) {
                *yi += vi * proj;
            }
        }
        if cnorm(&y) < real(1e-18) {
            break; // x is orthogonal to every vector; any unit x is optimal
        }
        let y = cnormalize(&y)?;
        let delta: T = y
            .iter()
            .zip(&x)
            .map(|(a, b)| (*a - *b).norm_sqr())
            .sum::<T>()
            .sqrt();
        x = y;
        if delta < real(1e-13) {
            break;
        }
    }
    Ok(x)
}

/// Pool-adjacent-violators: Euclidean projection of `y` onto the cone of
/// nondecreasing vectors.
pub fn pava_nondecreasing<T: Scalar>(y: &[T]) -> Vec<T> {
    let n = y.len();
    let mut sums: Vec<T> = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::with_capacity(n);
    for &v in y {
        sums.push(v);
        counts.push(1);
        while sums.len() > 1 {
            let m = sums.len();
            let last = sums[m - 1] / count_t::<T>(counts[m - 1]);
            let prev = sums[m - 2] / count_t::<T>(counts[m - 2]);
            if prev <= last {
                break;
            }
            let s = sums.pop().expect("nonempty");
            let c = counts.pop().expect("nonempty");
            sums[m - 2] += s;
            counts[m - 2] += c;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (s, c) in sums.iter().zip(&counts) {
        let v = *s / count_t::<T>(*c);
        for _ in 0..*c {
            out.push(v);
        }
    }
    out
}

fn count_t<T: Scalar>(c: usize) -> T {
    crate::scalar::count(c)
}
