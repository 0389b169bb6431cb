//! Small dense row-major matrices.
//!
//! This is the only module that touches raw floating-point storage. State
//! dimensions are tiny (d <= 3 per latent channel, stacked spatial blocks
//! up to ~100), so everything is dense `f64` with no BLAS.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row-major data; panics if the length is inconsistent.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Column vector.
    pub fn col(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat { rows: n, cols: 1, data }
    }

    /// Row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat { rows: 1, cols: n, data }
    }

    /// 1x1 matrix holding a scalar.
    pub fn scalar(x: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar content of a 1x1 matrix.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "as_scalar on non-1x1");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
    }

    /// Induced 1-norm (max absolute column sum), used for matexp scaling.
    pub fn norm_one(&self) -> f64 {
        let mut best = 0.0_f64;
        for j in 0..self.cols {
            let mut s = 0.0;
            for i in 0..self.rows {
                s += self.get(i, j).abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let data = self.data.iter().map(|a| a * s).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn neg(&self) -> Mat {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = k * other.cols;
                let trow = i * other.cols;
                for j in 0..other.cols {
                    out.data[trow + j] += a * other.data[orow + j];
                }
            }
        }
        out
    }

    /// self * other^T without materializing the transpose.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// (self + self^T) / 2; enforces exact symmetry on square matrices.
    pub fn symmetrize(&self) -> Mat {
        assert!(self.is_square(), "symmetrize on non-square");
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    /// Extracts a contiguous block.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Mat::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, m: &Mat) {
        assert!(r0 + m.rows <= self.rows && c0 + m.cols <= self.cols, "set_block out of range");
        for i in 0..m.rows {
            for j in 0..m.cols {
                self.set(r0 + i, c0 + j, m.get(i, j));
            }
        }
    }

    /// x^T * self * x for a column vector x; self must be square.
    pub fn quad_form(&self, x: &Mat) -> f64 {
        assert!(self.is_square() && x.cols == 1 && x.rows == self.rows, "quad_form shape");
        let mut total = 0.0;
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..self.cols {
                s += self.data[i * self.cols + j] * x.data[j];
            }
            total += x.data[i] * s;
        }
        total
    }

    fn max_asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst
    }
}

/// Lower-triangular Cholesky factor of a (jittered) positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: Mat,
    jitter: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// Diagonal jitter that was added before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// log det of the factored matrix (including jitter).
    pub fn logdet(&self) -> f64 {
        let n = self.lower.rows();
        let mut s = 0.0;
        for i in 0..n {
            s += self.lower.get(i, i).ln();
        }
        2.0 * s
    }

    /// Solves (L L^T) X = B.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        if b.rows() != self.dim() {
            return Err(Error::Dimension {
                op: "solve_psd",
                expected: format!("{} rows", self.dim()),
                found: format!("{} rows", b.rows()),
            });
        }
        let y = self.solve_lower(b);
        Ok(self.solve_lower_t(&y))
    }

    /// Forward substitution: L y = b.
    pub fn solve_lower(&self, b: &Mat) -> Mat {
        let n = self.dim();
        assert_eq!(b.rows(), n, "solve_lower shape");
        let k = b.cols();
        let mut y = b.clone();
        for c in 0..k {
            for i in 0..n {
                let mut s = y.get(i, c);
                for j in 0..i {
                    s -= self.lower.get(i, j) * y.get(j, c);
                }
                y.set(i, c, s / self.lower.get(i, i));
            }
        }
        y
    }

    /// Back substitution: L^T x = b.
    pub fn solve_lower_t(&self, b: &Mat) -> Mat {
        let n = self.dim();
        assert_eq!(b.rows(), n, "solve_lower_t shape");
        let k = b.cols();
        let mut x = b.clone();
        for c in 0..k {
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for j in (i + 1)..n {
                    s -= self.lower.get(j, i) * x.get(j, c);
                }
                x.set(i, c, s / self.lower.get(i, i));
            }
        }
        x
    }

    /// Reconstructs L L^T.
    pub fn reconstruct(&self) -> Mat {
        self.lower.matmul_nt(&self.lower)
    }
}

/// Jitter ladder tried in order when a pivot goes non-positive.
const JITTERS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Cholesky factorization with escalating diagonal jitter.
///
/// Only the lower triangle of `m` is read; the input must be symmetric to
/// within 1e-10 relative. Returns a numerical error carrying the largest
/// attempted jitter if factorization fails at every rung.
pub fn cholesky(m: &Mat) -> Result<CholFactor> {
    if !m.is_square() {
        return Err(Error::Dimension {
            op: "cholesky",
            expected: "square matrix".into(),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if !m.is_finite() {
        return Err(Error::Numerical("non-finite input to cholesky".into()));
    }
    let scale = m.max_abs();
    if m.max_asymmetry() > 1e-10 * scale.max(1e-300) {
        return Err(Error::InvalidArgument(
            "cholesky input not symmetric within 1e-10 relative".into(),
        ));
    }
    for &jitter in &JITTERS {
        if let Some(lower) = try_cholesky(m, jitter) {
            return Ok(CholFactor { lower, jitter });
        }
    }
    Err(Error::Numerical(format!(
        "matrix not positive definite after jitter {:.1e}",
        JITTERS[JITTERS.len() - 1]
    )))
}

/// Cholesky without the jitter ladder: the input must already be positive
/// definite as given. Used where the factor must reproduce the matrix
/// exactly (the spatial mixing matrix).
pub(crate) fn cholesky_fixed(m: &Mat) -> Result<CholFactor> {
    if !m.is_square() {
        return Err(Error::Dimension {
            op: "cholesky",
            expected: "square matrix".into(),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if !m.is_finite() {
        return Err(Error::Numerical("non-finite input to cholesky".into()));
    }
    match try_cholesky(m, 0.0) {
        Some(lower) => Ok(CholFactor { lower, jitter: 0.0 }),
        None => Err(Error::Numerical(
            "matrix not positive definite (no jitter applied)".into(),
        )),
    }
}

fn try_cholesky(m: &Mat, jitter: f64) -> Option<Mat> {
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    if l.is_finite() {
        Some(l)
    } else {
        None
    }
}

/// Solves (L L^T) X = B given a factor; thin wrapper kept for call-site clarity.
pub fn solve_psd(chol: &CholFactor, b: &Mat) -> Result<Mat> {
    chol.solve(b)
}

/// General dense solve A X = B via LU with partial pivoting.
///
/// Backs the matexp Pade denominator and the Lyapunov vectorization solve;
/// not exposed in the public API.
pub(crate) fn solve_lu(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op: "solve_lu",
            expected: "square matrix".into(),
            found: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "solve_lu",
            expected: format!("{} rows", a.rows()),
            found: format!("{} rows", b.rows()),
        });
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        // Partial pivot.
        let mut piv = col;
        let mut best = lu.get(col, col).abs();
        for r in (col + 1)..n {
            let v = lu.get(r, col).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Numerical("singular matrix in solve_lu".into()));
        }
        if piv != col {
            for j in 0..n {
                let (a1, a2) = (lu.get(col, j), lu.get(piv, j));
                lu.set(col, j, a2);
                lu.set(piv, j, a1);
            }
            perm.swap(col, piv);
            for j in 0..x.cols() {
                let (b1, b2) = (x.get(col, j), x.get(piv, j));
                x.set(col, j, b2);
                x.set(piv, j, b1);
            }
        }
        let d = lu.get(col, col);
        for r in (col + 1)..n {
            let f = lu.get(r, col) / d;
            lu.set(r, col, f);
            for j in (col + 1)..n {
                lu.set(r, j, lu.get(r, j) - f * lu.get(col, j));
            }
            for j in 0..x.cols() {
                x.set(r, j, x.get(r, j) - f * x.get(col, j));
            }
        }
    }
    // Back substitution on U.
    for c in 0..x.cols() {
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for j in (i + 1)..n {
                s -= lu.get(i, j) * x.get(j, c);
            }
            x.set(i, c, s / lu.get(i, i));
        }
    }
    if !x.is_finite() {
        return Err(Error::Numerical("non-finite solution in solve_lu".into()));
    }
    Ok(x)
}

/// Pade(13) coefficients for the matrix exponential.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm threshold below which the order-13 approximant is accurate.
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential via scaling-and-squaring with the order-13 Pade
/// approximant: scale so that ||M / 2^s||_1 < theta_13, evaluate the
/// rational approximant, square s times.
pub fn matexp(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension {
            op: "matexp",
            expected: "square matrix".into(),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if !m.is_finite() {
        return Err(Error::InvalidArgument("non-finite input to matexp".into()));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let norm = m.norm_one();
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a = m.scale(0.5_f64.powi(s as i32));

    let ident = Mat::identity(n);
    let a2 = a.matmul(&a);
    let a4 = a2.matmul(&a2);
    let a6 = a2.matmul(&a4);

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    let inner_u = a6
        .scale(PADE13[13])
        .add(&a4.scale(PADE13[11]))
        .add(&a2.scale(PADE13[9]));
    let u = a.matmul(
        &a6.matmul(&inner_u)
            .add(&a6.scale(PADE13[7]))
            .add(&a4.scale(PADE13[5]))
            .add(&a2.scale(PADE13[3]))
            .add(&ident.scale(PADE13[1])),
    );
    // V = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let inner_v = a6
        .scale(PADE13[12])
        .add(&a4.scale(PADE13[10]))
        .add(&a2.scale(PADE13[8]));
    let v = a6
        .matmul(&inner_v)
        .add(&a6.scale(PADE13[6]))
        .add(&a4.scale(PADE13[4]))
        .add(&a2.scale(PADE13[2]))
        .add(&ident.scale(PADE13[0]));

    let mut r = solve_lu(&v.sub(&u), &v.add(&u))?;
    for _ in 0..s {
        r = r.matmul(&r);
    }
    if !r.is_finite() {
        return Err(Error::Numerical("non-finite result in matexp".into()));
    }
    Ok(r)
}

/// Kronecker product.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let f = a.get(i, j);
            if f == 0.0 {
                continue;
            }
            for p in 0..b.rows() {
                for q in 0..b.cols() {
                    out.set(i * b.rows() + p, j * b.cols() + q, f * b.get(p, q));
                }
            }
        }
    }
    out
}
