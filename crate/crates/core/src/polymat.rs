//! Matrix polynomials in the backward-shift variable.
//!
//! A [`MatrixPolynomial`] stores the coefficients `M_0, ..., M_d` of
//! `M(z^{-1}) = sum_k M_k z^{-k}`. The degree is declared, not trimmed:
//! trailing zero coefficients are kept so that padded per-row degrees stay
//! representable.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

pub type Complex64 = Complex<f64>;
pub type CMatrix = DMatrix<Complex64>;

/// Tolerance on `| |z| - 1 |` for unit-circle evaluation.
const UNIT_CIRCLE_TOL: f64 = 1e-12;

/// Finite coefficient sequence of real matrices representing
/// `sum_k M_k z^{-k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPolynomial {
    rows: usize,
    cols: usize,
    coeffs: Vec<DMatrix<f64>>,
}

impl MatrixPolynomial {
    /// Builds a polynomial from its coefficient list `[M_0, ..., M_d]`.
    pub fn new(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::Dim("matrix polynomial needs at least one coefficient".into()))?;
        let (rows, cols) = (first.nrows(), first.ncols());
        if rows == 0 || cols == 0 {
            return Err(Error::Dim("matrix polynomial coefficients must be non-empty".into()));
        }
        for (k, c) in coeffs.iter().enumerate() {
            if c.nrows() != rows || c.ncols() != cols {
                return Err(Error::Dim(format!(
                    "coefficient {k} is {}x{}, expected {rows}x{cols}",
                    c.nrows(),
                    c.ncols()
                )));
            }
        }
        Ok(Self { rows, cols, coeffs })
    }

    /// Degree-zero polynomial equal to a constant matrix.
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            coeffs: vec![m],
        }
    }

    /// The identity constant of side `n`.
    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    /// All-zero polynomial of the given shape and declared degree.
    pub fn zero(rows: usize, cols: usize, degree: usize) -> Self {
        Self {
            rows,
            cols,
            coeffs: vec![DMatrix::zeros(rows, cols); degree + 1],
        }
    }

    /// Scalar polynomial from plain coefficients `[c_0, ..., c_d]`.
    pub fn scalar(coeffs: &[f64]) -> Result<Self> {
        Self::new(
            coeffs
                .iter()
                .map(|&c| DMatrix::from_element(1, 1, c))
                .collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, k: usize) -> &DMatrix<f64> {
        &self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Evaluates `sum_k M_k x^k` at an arbitrary complex point of the
    /// backward-shift variable `x = z^{-1}`.
    pub fn eval_zinv(&self, x: Complex64) -> CMatrix {
        let mut acc = CMatrix::zeros(self.rows, self.cols);
        // Horner in x.
        for c in self.coeffs.iter().rev() {
            acc *= x;
            for i in 0..self.rows {
                for j in 0..self.cols {
                    acc[(i, j)] += Complex64::new(c[(i, j)], 0.0);
                }
            }
        }
        acc
    }

    /// Evaluates the polynomial at a point `z` on the unit circle,
    /// returning `sum_k M_k z^{-k}`.
    pub fn eval(&self, z: Complex64) -> Result<CMatrix> {
        if (z.norm() - 1.0).abs() > UNIT_CIRCLE_TOL {
            return Err(Error::Domain(format!(
                "evaluation point must lie on the unit circle, got |z| = {}",
                z.norm()
            )));
        }
        Ok(self.eval_zinv(z.inv()))
    }

    /// Coefficient-wise convolution product.
    pub fn mul(&self, rhs: &MatrixPolynomial) -> Result<MatrixPolynomial> {
        if self.cols != rhs.rows {
            return Err(Error::Dim(format!(
                "cannot multiply {}x{} polynomial by {}x{} polynomial",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let degree = self.degree() + rhs.degree();
        let mut coeffs = vec![DMatrix::zeros(self.rows, rhs.cols); degree + 1];
        for (a, ca) in self.coeffs.iter().enumerate() {
            for (b, cb) in rhs.coeffs.iter().enumerate() {
                coeffs[a + b] += ca * cb;
            }
        }
        Ok(MatrixPolynomial {
            rows: self.rows,
            cols: rhs.cols,
            coeffs,
        })
    }

    /// Returns the map `theta -> M(e^{i theta})^* M(e^{i theta})`, Hermitian
    /// positive semidefinite at every frequency.
    pub fn para_hermitian(&self) -> impl Fn(f64) -> CMatrix + '_ {
        move |theta: f64| {
            let v = self.eval_zinv(Complex64::new(0.0, -theta).exp());
            v.adjoint() * v
        }
    }

    /// Roots of `det M(z^{-1})`, expressed in the `z`-plane, multiplicities
    /// preserved. Sorted by real part, then imaginary part.
    ///
    /// The scalar determinant polynomial is recovered by evaluating the
    /// determinant at `rows * degree + 1` points on the unit circle and
    /// interpolating (an inverse DFT); its roots come from the companion
    /// matrix of the reversed coefficient sequence.
    pub fn det_roots(&self) -> Result<Vec<Complex64>> {
        if self.rows != self.cols {
            return Err(Error::Dim(format!(
                "det_roots needs a square polynomial, got {}x{}",
                self.rows, self.cols
            )));
        }
        let max_deg = self.rows * self.degree();
        let npts = max_deg + 1;
        // Determinant samples at the npts-th roots of unity.
        let mut samples = Vec::with_capacity(npts);
        for k in 0..npts {
            let x = Complex64::new(0.0, 2.0 * std::f64::consts::PI * k as f64 / npts as f64).exp();
            samples.push(self.eval_zinv(x).determinant());
        }
        let scale: f64 = samples.iter().map(|s| s.norm()).fold(0.0, f64::max);
        let coeff_scale: f64 = self
            .coeffs
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        if scale <= 1e-12 * (1.0 + coeff_scale).powi(self.rows as i32) {
            return Err(Error::Singular(
                "determinant of the matrix polynomial is identically zero".into(),
            ));
        }
        // Inverse DFT gives the coefficients of det M as a polynomial in x = z^{-1}.
        let mut coeffs = vec![0.0f64; npts];
        for (j, cj) in coeffs.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, s) in samples.iter().enumerate() {
                let w = Complex64::new(
                    0.0,
                    -2.0 * std::f64::consts::PI * (j * k) as f64 / npts as f64,
                )
                .exp();
                acc += s * w;
            }
            *cj = acc.re / npts as f64;
        }
        // Trim numerically-zero leading powers of x.
        let maxc = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let mut eff_deg = 0;
        for (j, c) in coeffs.iter().enumerate() {
            if c.abs() > 1e-10 * maxc {
                eff_deg = j;
            }
        }
        if eff_deg == 0 {
            return Ok(Vec::new());
        }
        // det M(z^{-1}) = z^{-K} q(z) with q(z) = sum_j c_j z^{K-j}; the roots
        // of q are the z-plane roots. q's coefficients are c reversed.
        let lead = coeffs[eff_deg];
        let mut companion = DMatrix::zeros(eff_deg, eff_deg);
        for i in 1..eff_deg {
            companion[(i, i - 1)] = 1.0;
        }
        for i in 0..eff_deg {
            // Monic q: z^K + (c_1/c_0... ) -- reversed ordering, q_j = c_{K-j}.
            // q(z) = c_0 z^K + c_1 z^{K-1} + ... + c_K, leading coefficient c_0.
            companion[(i, eff_deg - 1)] = -coeffs[eff_deg - i] / coeffs[0];
        }
        // Guard: c_0 = det M_0 may vanish; fall back to the reciprocal
        // companion built on the trimmed leading coefficient.
        let mut roots: Vec<Complex64> = if coeffs[0].abs() > 1e-12 * maxc {
            companion.complex_eigenvalues().iter().copied().collect()
        } else {
            // Roots of c(x) in the x-plane, then z = 1/x (zero x-roots cannot
            // occur because trimming fixed the effective degree).
            let mut comp_x = DMatrix::zeros(eff_deg, eff_deg);
            for i in 1..eff_deg {
                comp_x[(i, i - 1)] = 1.0;
            }
            for i in 0..eff_deg {
                comp_x[(i, eff_deg - 1)] = -coeffs[i] / lead;
            }
            comp_x
                .complex_eigenvalues()
                .iter()
                .map(|x| x.inv())
                .collect()
        };
        roots.sort_by(|a, b| {
            (a.re, a.im)
                .partial_cmp(&(b.re, b.im))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(roots)
    }

    /// True when every root of `det M(z^{-1})` lies strictly inside the unit
    /// circle.
    pub fn is_stable(&self) -> Result<bool> {
        Ok(self.det_roots()?.iter().all(|r| r.norm() < 1.0))
    }
}
