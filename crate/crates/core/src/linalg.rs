//! Small dense linear algebra for desk-scale systems (N up to a few hundred).
//!
//! Everything here is generic over [`Scalar`] so the same routines run in
//! `f32` and `f64`. The general eigenvalue solver is the classical
//! balance → elimination-to-Hessenberg → Francis double-shift QR pipeline;
//! symmetric problems use cyclic Jacobi rotations.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex;
use serde::Serialize;

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    /// Copies the sub-block `rows × cols`.
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let mut b = Self::zeros(rows.len(), cols.len());
        for (bi, r) in rows.clone().enumerate() {
            for (bj, c) in cols.clone().enumerate() {
                b[(bi, bj)] = self[(r, c)];
            }
        }
        b
    }

    /// Principal submatrix on the given index set.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut b = Self::zeros(idx.len(), idx.len());
        for (bi, &r) in idx.iter().enumerate() {
            for (bj, &c) in idx.iter().enumerate() {
                b[(bi, bj)] = self[(r, c)];
            }
        }
        b
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

/// Solves `A x = b` by LU decomposition with partial pivoting.
///
/// Returns `None` when a pivot falls below `n · eps · max|A|`.
pub fn lu_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let n = a.rows();
    assert!(a.is_square() && b.len() == n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    let floor = T::of_usize(n.max(1)) * T::epsilon() * m.max_abs();
    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|r| (r, m[(r, k)].abs()))
            .fold((k, T::zero()), |acc, v| if v.1 > acc.1 { v } else { acc });
        if pivot <= floor || pivot == T::zero() {
            return None;
        }
        if p != k {
            for c in 0..n {
                let tmp = m[(k, c)];
                m[(k, c)] = m[(p, c)];
                m[(p, c)] = tmp;
            }
            x.swap(k, p);
        }
        for r in k + 1..n {
            let factor = m[(r, k)] / m[(k, k)];
            if factor == T::zero() {
                continue;
            }
            for c in k..n {
                m[(r, c)] = m[(r, c)] - factor * m[(k, c)];
            }
            x[r] = x[r] - factor * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for c in k + 1..n {
            s = s - m[(k, c)] * x[c];
        }
        x[k] = s / m[(k, k)];
    }
    Some(x)
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("QR iteration did not converge after {iterations} iterations; {found} of {n} eigenvalues recovered")]
pub struct EigenError<T: Scalar> {
    pub iterations: usize,
    pub found: usize,
    pub n: usize,
    /// Eigenvalues recovered before the iteration cap was hit.
    pub partial: Vec<Complex<T>>,
}

const QR_ITERATIONS_PER_EIGENVALUE: usize = 60;

/// All eigenvalues of a general real square matrix, sorted by real part descending
/// (ties broken by imaginary part descending).
pub fn eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<Complex<T>>, EigenError<T>> {
    assert!(a.is_square(), "eigenvalues of a non-square matrix");
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based working copy keeps the classical index arithmetic readable.
    let mut h = vec![vec![T::zero(); n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            h[i + 1][j + 1] = a[(i, j)];
        }
    }
    balance(&mut h, n);
    to_hessenberg(&mut h, n);
    for i in 1..=n {
        for j in 1..i.saturating_sub(1) {
            h[i][j] = T::zero();
        }
    }
    let mut wr = vec![T::zero(); n + 1];
    let mut wi = vec![T::zero(); n + 1];
    let status = hessenberg_qr(&mut h, n, &mut wr, &mut wi);
    let collect = |range: std::ops::RangeInclusive<usize>| -> Vec<Complex<T>> {
        let mut v: Vec<_> = range.map(|i| Complex::new(wr[i], wi[i])).collect();
        sort_by_real_desc(&mut v);
        v
    };
    match status {
        Ok(()) => Ok(collect(1..=n)),
        Err(unresolved) => Err(EigenError {
            iterations: QR_ITERATIONS_PER_EIGENVALUE,
            found: n - unresolved,
            n,
            partial: collect(unresolved + 1..=n),
        }),
    }
}

pub(crate) fn sort_by_real_desc<T: Scalar>(v: &mut [Complex<T>]) {
    v.sort_by(|x, y| {
        y.re.partial_cmp(&x.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y.im.partial_cmp(&x.im).unwrap_or(std::cmp::Ordering::Equal))
    });
}

fn balance<T: Scalar>(a: &mut [Vec<T>], n: usize) {
    let radix = T::two();
    let sqrdx = radix * radix;
    let mut done = false;
    while !done {
        done = true;
        for i in 1..=n {
            let mut r = T::zero();
            let mut c = T::zero();
            for j in 1..=n {
                if j != i {
                    c = c + a[j][i].abs();
                    r = r + a[i][j].abs();
                }
            }
            if c != T::zero() && r != T::zero() {
                let mut g = r / radix;
                let mut f = T::one();
                let s = c + r;
                while c < g {
                    f = f * radix;
                    c = c * sqrdx;
                }
                g = r * radix;
                while c > g {
                    f = f / radix;
                    c = c / sqrdx;
                }
                if (c + r) / f < T::of(0.95) * s {
                    done = false;
                    let g = T::one() / f;
                    for j in 1..=n {
                        a[i][j] = a[i][j] * g;
                    }
                    for j in 1..=n {
                        a[j][i] = a[j][i] * f;
                    }
                }
            }
        }
    }
}

/// Gaussian elimination with pivoting to upper Hessenberg form.
fn to_hessenberg<T: Scalar>(a: &mut [Vec<T>], n: usize) {
    for m in 2..n {
        let mut x = T::zero();
        let mut i = m;
        for j in m..=n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..=n {
                let tmp = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = tmp;
            }
            for row in a.iter_mut().take(n + 1).skip(1) {
                row.swap(i, m);
            }
        }
        if x != T::zero() {
            for i in (m + 1)..=n {
                let mut y = a[i][m - 1];
                if y != T::zero() {
                    y = y / x;
                    a[i][m - 1] = y;
                    for j in m..=n {
                        a[i][j] = a[i][j] - y * a[m][j];
                    }
                    for j in 1..=n {
                        a[j][m] = a[j][m] + y * a[j][i];
                    }
                }
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(a: T, b: T) -> T {
    if b >= T::zero() {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (1-based).
///
/// On failure returns the index `nn` of the last unresolved row; eigenvalues
/// `nn+1..=n` are valid.
fn hessenberg_qr<T: Scalar>(
    a: &mut [Vec<T>],
    n: usize,
    wr: &mut [T],
    wi: &mut [T],
) -> Result<(), usize> {
    let zero = T::zero();
    let mut anorm = zero;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm = anorm + a[i][j].abs();
        }
    }
    let mut nn = n;
    let mut t = zero;
    while nn >= 1 {
        let mut its = 0usize;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == zero {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = zero;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nn][nn];
            if l == nn {
                wr[nn] = x + t;
                wi[nn] = zero;
                nn -= 1;
            } else {
                let mut y = a[nn - 1][nn - 1];
                let mut w = a[nn][nn - 1] * a[nn - 1][nn];
                if l == nn - 1 {
                    let p = T::half() * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x = x + t;
                    if q >= zero {
                        z = p + sign(z, p);
                        wr[nn - 1] = x + z;
                        wr[nn] = x + z;
                        if z != zero {
                            wr[nn] = x - w / z;
                        }
                        wi[nn - 1] = zero;
                        wi[nn] = zero;
                    } else {
                        wr[nn - 1] = x + p;
                        wr[nn] = x + p;
                        wi[nn - 1] = -z;
                        wi[nn] = z;
                    }
                    nn -= 2;
                } else {
                    if its == QR_ITERATIONS_PER_EIGENVALUE {
                        return Err(nn);
                    }
                    if its > 0 && its % 10 == 0 {
                        // exceptional shift
                        t = t + x;
                        for i in 1..=nn {
                            a[i][i] = a[i][i] - x;
                        }
                        let s = a[nn][nn - 1].abs() + a[nn - 1][nn - 2].abs();
                        x = T::of(0.75) * s;
                        y = x;
                        w = T::of(-0.4375) * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    let (mut p, mut q, mut r);
                    loop {
                        let z = a[m][m];
                        let rr = x - z;
                        let ss = y - z;
                        p = (rr * ss - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - rr - ss;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p = p / s;
                        q = q / s;
                        r = r / s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nn {
                        a[i][i - 2] = zero;
                        if i != m + 2 {
                            a[i][i - 3] = zero;
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = zero;
                            if k != nn - 1 {
                                r = a[k + 2][k - 1];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != zero {
                                p = p / x;
                                q = q / x;
                                r = r / x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != zero {
                            if k == m {
                                if l != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p = p + s;
                            x = p / s;
                            y = q / s;
                            let z = r / s;
                            q = q / p;
                            r = r / p;
                            for j in k..=nn {
                                p = a[k][j] + q * a[k + 1][j];
                                if k != nn - 1 {
                                    p = p + r * a[k + 2][j];
                                    a[k + 2][j] = a[k + 2][j] - p * z;
                                }
                                a[k + 1][j] = a[k + 1][j] - p * y;
                                a[k][j] = a[k][j] - p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a[i][k] + y * a[i][k + 1];
                                if k != nn - 1 {
                                    p = p + z * a[i][k + 2];
                                    a[i][k + 2] = a[i][k + 2] - p * r;
                                }
                                a[i][k + 1] = a[i][k + 1] - p * q;
                                a[i][k] = a[i][k] - p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 2 || l + 1 >= nn {
                break;
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    assert!(a.is_square(), "symmetric eigenvalues of a non-square matrix");
    let n = a.rows();
    let mut m = a.clone();
    // symmetrize against round-off in the caller's assembly
    for i in 0..n {
        for j in i + 1..n {
            let s = T::half() * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let total: T = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)] * m[(i, j)])
        .sum();
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::two() * apq);
                let t = sign(T::one(), theta) / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                m[(p, p)] = app - t * apq;
                m[(q, q)] = aqq + t * apq;
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    m[(k, p)] = np;
                    m[(p, k)] = np;
                    m[(k, q)] = nq;
                    m[(q, k)] = nq;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Smallest and largest singular values via the Gram matrix `MᵀM`.
pub fn singular_value_extremes<T: Scalar>(m: &Matrix<T>) -> (T, T) {
    let gram = m.transpose().matmul(m);
    let ev = symmetric_eigenvalues(&gram);
    let lo = ev.first().copied().unwrap_or(T::zero()).max(T::zero()).sqrt();
    let hi = ev.last().copied().unwrap_or(T::zero()).max(T::zero()).sqrt();
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn diagonal_eigenvalues() {
        let m = Matrix::from_rows(&[vec![-2.0, 0.0], vec![0.0, -3.0]]);
        let ev = eigenvalues(&m).unwrap();
        assert!(close(ev[0].re, -2.0, 1e-14) && ev[0].im == 0.0);
        assert!(close(ev[1].re, -3.0, 1e-14));
    }

    #[test]
    fn rotation_has_imaginary_pair() {
        let m = Matrix::<f64>::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        let ev = eigenvalues(&m).unwrap();
        assert!(ev[0].re.abs() < 1e-14 && close(ev[0].im, 1.0, 1e-14));
        assert!(close(ev[1].im, -1.0, 1e-14));
    }

    #[test]
    fn companion_matrix_roots() {
        // x^3 - 6x^2 + 11x - 6 = (x-1)(x-2)(x-3)
        let m = Matrix::from_rows(&[
            vec![6.0, -11.0, 6.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let ev = eigenvalues(&m).unwrap();
        for (e, want) in ev.iter().zip([3.0, 2.0, 1.0]) {
            assert!(close(e.re, want, 1e-10), "{e} vs {want}");
            assert!(e.im.abs() < 1e-10);
        }
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = Matrix::from_rows(&[
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ]);
        let ev = symmetric_eigenvalues(&m);
        let s2 = 2f64.sqrt();
        for (e, want) in ev.iter().zip([2.0 - s2, 2.0, 2.0 + s2]) {
            assert!(close(*e, want, 1e-13));
        }
    }

    #[test]
    fn lu_solves_and_detects_singularity() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]);
        let x = lu_solve(&a, &[4.0, 5.0]).unwrap();
        assert!(close(x[0], 1.0, 1e-14) && close(x[1], 2.0, 1e-14));
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(lu_solve(&s, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn works_in_single_precision() {
        let m: Matrix<f32> = Matrix::from_rows(&[vec![-1.0, 0.5], vec![0.25, -2.0]]);
        let ev = eigenvalues(&m).unwrap();
        let tr: f32 = ev.iter().map(|e| e.re).sum();
        assert!((tr + 3.0).abs() < 1e-5);
    }
}
