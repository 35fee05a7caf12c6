//! Small dense linear algebra over [`Real`] scalars.
//!
//! Dimensions here are tiny (the ambient dimension of a chart), so every
//! routine is a direct textbook implementation without blocking.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
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
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<T>], rows: usize) -> Self {
        let mut m = Self::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            for i in 0..rows {
                m[(i, j)] = c[i];
            }
        }
        m
    }

    pub fn diag(entries: &[T]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].to_vec())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
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
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(v).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    /// `self^T v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len());
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] = out[j] + self[(i, j)] * v[i];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// LU factorization with partial pivoting; `None` when singular.
    fn lu(&self) -> Option<(Self, Vec<usize>, T)> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                if a[(i, k)].abs() > best {
                    best = a[(i, k)].abs();
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    let tmp = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = tmp;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / piv;
                a[(i, k)] = f;
                for j in k + 1..n {
                    a[(i, j)] = a[(i, j)] - f * a[(k, j)];
                }
            }
        }
        Some((a, perm, sign))
    }

    pub fn determinant(&self) -> T {
        match self.lu() {
            None => T::zero(),
            Some((a, _, sign)) => (0..self.rows).fold(sign, |d, i| d * a[(i, i)]),
        }
    }

    pub fn solve(&self, b: &[T]) -> Option<Vec<T>> {
        let (a, perm, _) = self.lu()?;
        let n = self.rows;
        let mut x: Vec<T> = perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] = x[i] - a[(i, j)] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] = x[i] - a[(i, j)] * x[j];
            }
            x[i] = x[i] / a[(i, i)];
        }
        Some(x)
    }

    pub fn inverse(&self) -> Option<Self> {
        let n = self.rows;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            cols.push(self.solve(&e)?);
        }
        Some(Self::from_columns(&cols, n))
    }

    /// Largest singular value via the Jacobi eigensolver on `A^T A`.
    pub fn spectral_norm(&self) -> T {
        if self.rows == 0 || self.cols == 0 {
            return T::zero();
        }
        let ata = self.transpose().mul(self);
        symmetric_eigenvalues(&ata)
            .into_iter()
            .fold(T::zero(), |m, l| m.max(l))
            .sqrt()
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let n = m.rows();
    let mut a = m.clone();
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off + a[(i, j)] * a[(i, j)];
                }
            }
        }
        if off.sqrt() <= eps * a.frobenius() || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let two = T::lit(2.0);
                let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// A complex eigenvalue as `(re, im)`.
pub type Eigenvalue<T> = (T, T);

/// Eigenvalues of a general real matrix: Householder reduction to upper
/// Hessenberg form followed by the Francis double-shift QR iteration.
pub fn eigenvalues<T: Real>(m: &Matrix<T>) -> Option<Vec<Eigenvalue<T>>> {
    assert_eq!(m.rows(), m.cols());
    let n = m.rows();
    if n == 0 {
        return Some(Vec::new());
    }
    let h = hessenberg(m);
    // 1-based working copy keeps the classic index arithmetic readable.
    let mut a = vec![vec![T::zero(); n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i + 1][j + 1] = h[(i, j)];
        }
    }
    let mut wr = vec![T::zero(); n + 1];
    let mut wi = vec![T::zero(); n + 1];
    hqr(&mut a, n, &mut wr, &mut wi)?;
    Some((1..=n).map(|i| (wr[i], wi[i])).collect())
}

fn hessenberg<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let n = m.rows();
    let mut a = m.clone();
    for k in 0..n.saturating_sub(2) {
        let alpha_sq: T = (k + 1..n).map(|i| a[(i, k)] * a[(i, k)]).sum();
        if alpha_sq == T::zero() {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = -x0.signum() * alpha_sq.sqrt();
        let mut v = vec![T::zero(); n];
        v[k + 1] = x0 - alpha;
        for i in k + 2..n {
            v[i] = a[(i, k)];
        }
        let vnorm_sq: T = v.iter().map(|&x| x * x).sum();
        if vnorm_sq == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        // a <- (I - 2vv^T/|v|^2) a (I - 2vv^T/|v|^2)
        for j in 0..n {
            let s: T = (k + 1..n).map(|i| v[i] * a[(i, j)]).sum();
            let f = two * s / vnorm_sq;
            for i in k + 1..n {
                a[(i, j)] = a[(i, j)] - f * v[i];
            }
        }
        for i in 0..n {
            let s: T = (k + 1..n).map(|j| a[(i, j)] * v[j]).sum();
            let f = two * s / vnorm_sq;
            for j in k + 1..n {
                a[(i, j)] = a[(i, j)] - f * v[j];
            }
        }
        for i in k + 2..n {
            a[(i, k)] = T::zero();
        }
    }
    a
}

#[inline]
fn sign<T: Real>(a: T, b: T) -> T {
    if b >= T::zero() {
        a.abs()
    } else {
        -a.abs()
    }
}

#[allow(clippy::many_single_char_names)]
fn hqr<T: Real>(a: &mut [Vec<T>], n: usize, wr: &mut [T], wi: &mut [T]) -> Option<()> {
    let zero = T::zero();
    let mut anorm = zero;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm = anorm + a[i][j].abs();
        }
    }
    let mut nn = n as isize;
    let mut t = zero;
    let (mut p, mut q, mut r);
    let (mut x, mut y, mut z, mut w);
    while nn >= 1 {
        let mut its = 0;
        let mut l: isize;
        loop {
            l = nn;
            while l >= 2 {
                let lu = l as usize;
                let mut s = a[lu - 1][lu - 1].abs() + a[lu][lu].abs();
                if s == zero {
                    s = anorm;
                }
                if a[lu][lu - 1].abs() + s == s {
                    a[lu][lu - 1] = zero;
                    break;
                }
                l -= 1;
            }
            let nu = nn as usize;
            x = a[nu][nu];
            if l == nn {
                wr[nu] = x + t;
                wi[nu] = zero;
                nn -= 1;
            } else {
                y = a[nu - 1][nu - 1];
                w = a[nu][nu - 1] * a[nu - 1][nu];
                if l == nn - 1 {
                    p = T::lit(0.5) * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x = x + t;
                    if q >= zero {
                        z = p + sign(z, p);
                        wr[nu - 1] = x + z;
                        wr[nu] = x + z;
                        if z != zero {
                            wr[nu] = x - w / z;
                        }
                        wi[nu - 1] = zero;
                        wi[nu] = zero;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                } else {
                    if its == 60 {
                        return None;
                    }
                    if its == 10 || its == 20 {
                        t = t + x;
                        for i in 1..=nu {
                            a[i][i] = a[i][i] - x;
                        }
                        let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                        x = T::lit(0.75) * s;
                        y = x;
                        w = T::lit(-0.4375) * s * s;
                    }
                    its += 1;
                    let lu = l as usize;
                    let mut m = nu - 2;
                    loop {
                        z = a[m][m];
                        r = x - z;
                        let s0 = y - z;
                        p = (r * s0 - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - r - s0;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p = p / s;
                        q = q / s;
                        r = r / s;
                        if m == lu {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m + 2..=nu {
                        a[i][i - 2] = zero;
                        if i != m + 2 {
                            a[i][i - 3] = zero;
                        }
                    }
                    let mut k = m;
                    while k < nu {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = zero;
                            if k != nu - 1 {
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
                                if lu != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p = p + s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q = q / p;
                            r = r / p;
                            for j in k..=nu {
                                p = a[k][j] + q * a[k + 1][j];
                                if k != nu - 1 {
                                    p = p + r * a[k + 2][j];
                                    a[k + 2][j] = a[k + 2][j] - p * z;
                                }
                                a[k + 1][j] = a[k + 1][j] - p * y;
                                a[k][j] = a[k][j] - p * x;
                            }
                            let mmin = if nu < k + 3 { nu } else { k + 3 };
                            for i in lu..=mmin {
                                p = x * a[i][k] + y * a[i][k + 1];
                                if k != nu - 1 {
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
            if l >= nn - 1 {
                break;
            }
        }
    }
    Some(())
}

/// Matrix sign function by the scaled Newton iteration
/// `S <- (c S + (c S)^{-1}) / 2`, with `c = |det S|^{-1/n}`.
///
/// Defined when no eigenvalue lies on the imaginary axis.
pub fn matrix_sign<T: Real>(m: &Matrix<T>) -> Option<Matrix<T>> {
    let n = m.rows();
    let mut s = m.clone();
    let half = T::lit(0.5);
    for _ in 0..100 {
        let det = s.determinant().abs();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let scale_exp = -det.ln() / T::from_usize(n)?;
        let c = if scale_exp.abs() < T::lit(50.0) {
            scale_exp.exp()
        } else {
            T::one()
        };
        let cs = s.scale(c);
        let inv = cs.inverse()?;
        let next = cs.add(&inv).scale(half);
        let delta = next.sub(&s).frobenius();
        let size = next.frobenius();
        s = next;
        if delta <= T::lit(1e3) * T::epsilon() * size {
            break;
        }
    }
    // A last unscaled pass sharpens the converged iterate.
    let inv = s.inverse()?;
    Some(s.add(&inv).scale(half))
}

/// Orthonormal basis of the column space of `m` with numerical rank `rank`,
/// by modified Gram-Schmidt with greedy column pivoting.
pub fn column_basis<T: Real>(m: &Matrix<T>, rank: usize) -> Vec<Vec<T>> {
    let mut cols: Vec<Vec<T>> = (0..m.cols()).map(|j| m.column(j)).collect();
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let (best, norm) = cols
            .iter()
            .enumerate()
            .map(|(j, c)| (j, crate::scalar::norm2(c)))
            .fold((usize::MAX, T::zero()), |acc, (j, nrm)| {
                if nrm > acc.1 {
                    (j, nrm)
                } else {
                    acc
                }
            });
        if best == usize::MAX || norm == T::zero() {
            break;
        }
        let q: Vec<T> = cols[best].iter().map(|&a| a / norm).collect();
        for c in cols.iter_mut() {
            let proj = crate::scalar::dot(c, &q);
            for (ci, &qi) in c.iter_mut().zip(&q) {
                *ci = *ci - proj * qi;
            }
        }
        basis.push(q);
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_re(mut ev: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        ev.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
        ev
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let m = Matrix::diag(&[2.0, -3.0, 0.5]);
        let ev = sorted_re(eigenvalues(&m).unwrap());
        assert!((ev[0].0 + 3.0).abs() < 1e-12);
        assert!((ev[1].0 - 0.5).abs() < 1e-12);
        assert!((ev[2].0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_lorenz_jacobian() {
        let m = Matrix::from_rows(&[
            vec![-10.0, 10.0, 0.0],
            vec![28.0, -1.0, 0.0],
            vec![0.0, 0.0, -8.0 / 3.0],
        ]);
        let ev = sorted_re(eigenvalues(&m).unwrap());
        // quadratic formula on the 2x2 block
        let disc = (81.0f64 + 4.0 * 280.0).sqrt();
        let l1 = (-11.0 + disc) / 2.0;
        let l2 = (-11.0 - disc) / 2.0;
        assert!((ev[0].0 - l2).abs() < 1e-10);
        assert!((ev[1].0 + 8.0 / 3.0).abs() < 1e-10);
        assert!((ev[2].0 - l1).abs() < 1e-10);
        assert!((l1 - 11.8277).abs() < 1e-4);
    }

    #[test]
    fn eigenvalues_complex_pair() {
        let m = Matrix::from_rows(&[
            vec![-1.0, -4.0, 0.0, 0.0],
            vec![4.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 1.0],
            vec![0.0, 0.0, 0.0, 3.0],
        ]);
        let ev = sorted_re(eigenvalues(&m).unwrap());
        assert!((ev[0].0 + 1.0).abs() < 1e-10 && (ev[0].1 + 4.0).abs() < 1e-10);
        assert!((ev[1].0 + 1.0).abs() < 1e-10 && (ev[1].1 - 4.0).abs() < 1e-10);
        assert!((ev[2].0 - 2.0).abs() < 1e-10);
        assert!((ev[3].0 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn eigenvalues_satisfy_characteristic_equation_on_dense_matrix() {
        let m = Matrix::from_rows(&[
            vec![0.3, -1.2, 2.0, 0.7],
            vec![1.1, 0.4, -0.5, 0.2],
            vec![-0.8, 0.9, 1.5, -1.0],
            vec![0.6, 0.1, 0.3, -2.2],
        ]);
        let ev = eigenvalues(&m).unwrap();
        assert_eq!(ev.len(), 4);
        let tr: f64 = ev.iter().map(|e| e.0).sum();
        assert!((tr - m.trace()).abs() < 1e-10);
        // product of eigenvalues equals the determinant
        let (mut pr, mut pi) = (1.0f64, 0.0f64);
        for &(re, im) in &ev {
            let nr = pr * re - pi * im;
            pi = pr * im + pi * re;
            pr = nr;
        }
        assert!((pr - m.determinant()).abs() < 1e-9);
        assert!(pi.abs() < 1e-9);
    }

    #[test]
    fn sign_function_projectors() {
        let m: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 3.0], vec![0.0, -2.0]]);
        let s = matrix_sign(&m).unwrap();
        let id = Matrix::identity(2);
        assert!(s.mul(&s).sub(&id).frobenius() < 1e-12);
        assert!((s.trace() - 0.0).abs() < 1e-12);
        // commutes with the matrix
        assert!(s.mul(&m).sub(&m.mul(&s)).frobenius() < 1e-12);
    }

    #[test]
    fn solve_and_inverse() {
        let m: Matrix<f64> = Matrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]);
        let x = m.solve(&[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        let inv = m.inverse().unwrap();
        assert!(inv.mul(&m).sub(&Matrix::identity(2)).frobenius() < 1e-14);
        assert_eq!(Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).inverse(), None);
    }

    #[test]
    fn spectral_norm_of_rotation_and_stretch() {
        let m: Matrix<f64> = Matrix::from_rows(&[vec![0.0, -3.0], vec![1.0, 0.0]]);
        assert!((m.spectral_norm() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let m: Matrix<f32> = Matrix::diag(&[1.0, -1.0]);
        let ev = eigenvalues(&m).unwrap();
        assert!(ev.iter().any(|e| (e.0 - 1.0).abs() < 1e-6));
    }
}
