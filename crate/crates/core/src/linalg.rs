//! Small dense complex linear algebra.
//!
//! Everything here targets matrices of at most a few dozen rows, so the
//! routines favour accuracy and simplicity over blocking or vectorisation.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid(format!("non-finite entry at ({}, {})", pos / cols, pos % cols)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Square diagonal matrix.
    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds from separate real and imaginary row lists.
    pub fn from_parts(re: &[Vec<f64>], im: &[Vec<f64>]) -> Result<Self> {
        let rows = re.len();
        if rows == 0 || im.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "real part has {} rows, imaginary part {}",
                rows,
                im.len()
            )));
        }
        let cols = re[0].len();
        let mut data = Vec::with_capacity(rows * cols);
        for (i, (r, m)) in re.iter().zip(im).enumerate() {
            if r.len() != cols || m.len() != cols {
                return Err(Error::ShapeMismatch(format!("row {i} has inconsistent length")));
            }
            data.extend(r.iter().zip(m).map(|(&a, &b)| Complex64::new(a, b)));
        }
        Self::new(rows, cols, data)
    }

    /// Real and imaginary parts as row lists.
    pub fn to_parts(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let re = self
            .data
            .chunks(self.cols)
            .map(|r| r.iter().map(|z| z.re).collect())
            .collect();
        let im = self
            .data
            .chunks(self.cols)
            .map(|r| r.iter().map(|z| z.im).collect())
            .collect();
        (re, im)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Hermitian transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * k).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Matrix product; panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product; panics on dimension mismatch.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Left-multiplies rows `m` and `m + 1` by a 2x2 block in place.
    pub fn apply_left_2x2(&mut self, m: usize, t: &[[Complex64; 2]; 2]) {
        for j in 0..self.cols {
            let a = self.data[m * self.cols + j];
            let b = self.data[(m + 1) * self.cols + j];
            self.data[m * self.cols + j] = t[0][0] * a + t[0][1] * b;
            self.data[(m + 1) * self.cols + j] = t[1][0] * a + t[1][1] * b;
        }
    }

    /// Right-multiplies columns `m` and `m + 1` by a 2x2 block in place.
    pub fn apply_right_2x2(&mut self, m: usize, t: &[[Complex64; 2]; 2]) {
        for i in 0..self.rows {
            let a = self.data[i * self.cols + m];
            let b = self.data[i * self.cols + m + 1];
            self.data[i * self.cols + m] = a * t[0][0] + b * t[1][0];
            self.data[i * self.cols + m + 1] = a * t[0][1] + b * t[1][1];
        }
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs)
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            write!(f, "  ")?;
            for z in row {
                write!(f, "{:+.6}{:+.6}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Maximum absolute entry of `u uᴴ − I`.
pub fn unitarity_error(u: &ComplexMatrix) -> Result<f64> {
    if !u.is_square() {
        return Err(invalid(format!(
            "unitarity check needs a square matrix, got {}x{}",
            u.rows, u.cols
        )));
    }
    let n = u.rows;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: Complex64 = u.row(i).iter().zip(u.row(j)).map(|(a, b)| a * b.conj()).sum();
            let target = if i == j { ONE } else { ZERO };
            worst = worst.max((dot - target).norm());
        }
    }
    Ok(worst)
}

/// Full singular value decomposition `a = u · diag(s) · v_h`.
///
/// `u` is `rows × rows`, `v_h` is `cols × cols`, and `singular_values` holds
/// the `min(rows, cols)` values in descending order.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: ComplexMatrix,
    pub singular_values: Vec<f64>,
    pub v_h: ComplexMatrix,
}

impl SvdResult {
    /// Recomposes `u · Σ · v_h` with a rectangular Σ.
    pub fn reconstruct(&self) -> ComplexMatrix {
        let (m, n) = (self.u.rows, self.v_h.rows);
        let mut sigma_vh = ComplexMatrix::zeros(m, n);
        for (k, &s) in self.singular_values.iter().enumerate() {
            for j in 0..n {
                sigma_vh[(k, j)] = self.v_h[(k, j)] * s;
            }
        }
        self.u.matmul(&sigma_vh)
    }
}

/// SVD by one-sided (Hestenes) Jacobi rotations.
pub fn svd(a: &ComplexMatrix) -> Result<SvdResult> {
    if a.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(invalid("svd input has non-finite entries"));
    }
    if a.rows >= a.cols {
        let (u_thin, s, v) = jacobi_tall(a);
        let u = complete_basis(u_thin, a.rows);
        Ok(SvdResult {
            u,
            singular_values: s,
            v_h: v.adjoint(),
        })
    } else {
        // a = (aᴴ)ᴴ = (U' S V'ᴴ)ᴴ = V' S U'ᴴ
        let (u_thin, s, v) = jacobi_tall(&a.adjoint());
        let full = complete_basis(u_thin, a.cols);
        Ok(SvdResult {
            u: v,
            singular_values: s,
            v_h: full.adjoint(),
        })
    }
}

/// One-sided Jacobi on a tall (rows ≥ cols) matrix. Returns the thin left
/// factor as a list of columns (`None` where the singular value vanishes),
/// the singular values and the full right factor `V`.
fn jacobi_tall(a: &ComplexMatrix) -> (Vec<Option<Vec<Complex64>>>, Vec<f64>, ComplexMatrix) {
    let (m, n) = (a.rows, a.cols);
    let mut cols: Vec<Vec<Complex64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<Complex64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { ONE } else { ZERO }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = cols[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = cols[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma: Complex64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g <= eps * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                // Strip the phase of gamma from column q, then a real rotation.
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let ph_conj = phase.conj();
                rotate_pair(&mut cols, p, q, ph_conj, c, s);
                rotate_pair(&mut vcols, p, q, ph_conj, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let largest = norms.iter().copied().fold(0.0, f64::max);
    let cutoff = largest * (m.max(n) as f64) * eps;
    let mut u_cols = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = ComplexMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let nrm = norms[j];
        s.push(nrm);
        if nrm > cutoff && nrm > 0.0 {
            u_cols.push(Some(cols[j].iter().map(|z| z / nrm).collect()));
        } else {
            u_cols.push(None);
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    (u_cols, s, v)
}

fn rotate_pair(cols: &mut [Vec<Complex64>], p: usize, q: usize, ph_conj: Complex64, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yq = *y * ph_conj;
        let xp = *x;
        *x = xp * c - yq * s;
        *y = xp * s + yq * c;
    }
}

/// Extends a partial orthonormal column set to a full `dim × dim` unitary.
fn complete_basis(cols: Vec<Option<Vec<Complex64>>>, dim: usize) -> ComplexMatrix {
    let mut basis: Vec<Vec<Complex64>> = cols.iter().flatten().cloned().collect();
    let mut slots: Vec<Option<Vec<Complex64>>> = cols;
    slots.resize(dim, None);

    let project_out = |v: &mut Vec<Complex64>, basis: &[Vec<Complex64>]| {
        for _ in 0..2 {
            for b in basis {
                let proj: Complex64 = b.iter().zip(v.iter()).map(|(x, y)| x.conj() * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
        }
    };
    for slot in slots.iter_mut() {
        if slot.is_some() {
            continue;
        }
        // the standard basis vector with the largest residual is always usable
        let mut best: Option<(f64, Vec<Complex64>)> = None;
        for k in 0..dim {
            let mut v: Vec<Complex64> = (0..dim).map(|i| if i == k { ONE } else { ZERO }).collect();
            project_out(&mut v, &basis);
            let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, v));
            }
        }
        let (nrm, mut v) = best.expect("dim > 0");
        v.iter_mut().for_each(|z| *z /= nrm);
        project_out(&mut v, &basis);
        let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= nrm);
        basis.push(v.clone());
        *slot = Some(v);
    }
    let mut out = ComplexMatrix::zeros(dim, dim);
    for (j, col) in slots.into_iter().enumerate() {
        let col = col.expect("slot filled");
        for i in 0..dim {
            out[(i, j)] = col[i];
        }
    }
    out
}

/// Haar-random unitary from the QR factorisation of a complex Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ComplexMatrix {
    let mut cols: Vec<Vec<Complex64>> = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect();
    // modified Gram-Schmidt, twice for stability
    for j in 0..n {
        for _ in 0..2 {
            for k in 0..j {
                let proj: Complex64 = cols[k].iter().zip(&cols[j]).map(|(x, y)| x.conj() * y).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (y, x) in tail[0].iter_mut().zip(&head[k]) {
                    *y -= proj * x;
                }
            }
        }
        let nrm = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|z| *z /= nrm);
    }
    ComplexMatrix::from_fn(n, n, |i, j| cols[j][i])
}

/// Random matrix with i.i.d. standard complex Gaussian entries.
pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}

/// Unnormalised forward 2-D DFT of a real `height × width` image with the
/// zero-frequency bin moved to `(height / 2, width / 2)`.
pub fn dft2_shifted(image: &[f64], height: usize, width: usize) -> Result<ComplexMatrix> {
    if height == 0 || width == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    if image.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width} image needs {} pixels, got {}",
            height * width,
            image.len()
        )));
    }
    let tw_w = twiddles(width);
    let tw_h = twiddles(height);

    // rows first
    let mut rows_done = ComplexMatrix::zeros(height, width);
    for h in 0..height {
        let px = &image[h * width..(h + 1) * width];
        for l in 0..width {
            let mut acc = ZERO;
            for (w, &x) in px.iter().enumerate() {
                acc += tw_w[(l * w) % width] * x;
            }
            rows_done[(h, l)] = acc;
        }
    }
    let (ch, cw) = (height / 2, width / 2);
    let mut out = ComplexMatrix::zeros(height, width);
    for k in 0..height {
        for l in 0..width {
            let mut acc = ZERO;
            for h in 0..height {
                acc += tw_h[(k * h) % height] * rows_done[(h, l)];
            }
            out[((k + ch) % height, (l + cw) % width)] = acc;
        }
    }
    Ok(out)
}

fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect()
}
