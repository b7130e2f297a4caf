//! Constrained maximum-likelihood estimation of the deterministic relation.
//!
//! The parameter is `Theta = [A_1 .. A_q | B_0 .. B_r]` acting on the
//! regressor `z(t) = [Z_m(t)', -Y_l(t)']'`, so the residual is
//! `x(t) = zeta_m(t) + Theta z(t)` and the criterion is
//! `J = log det Gamma + (1/N) sum_t x' Gamma^{-1} x` with
//! `Gamma = sigma^2 (I + A A')`.
//!
//! Derivatives are exact in `sigma`: with `G = sigma^2 Gamma^{-1}`, the
//! Jacobian is `dJ/dTheta = 2 D Theta' G + (2/N) sum (z - D Theta' G x) x'
//! Gamma^{-1}`. Correctness is pinned by finite-difference tests rather than
//! by eye.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::polymat::MatrixPolynomial;

/// Per-row polynomial degrees for systems whose rows have different orders.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PerRowDegrees {
    pub q: Vec<usize>,
    pub r: Vec<usize>,
}

/// ARMAX parameter block with diagonal AR coefficients and a sparsity mask
/// on the input coefficients.
#[derive(Debug, Clone)]
pub struct ThetaParams {
    m: usize,
    l: usize,
    q: usize,
    r: usize,
    /// `[A_1 .. A_q]`, each diagonal `m x m`.
    a_lags: Vec<DMatrix<f64>>,
    /// `[B_0 .. B_r]`, each `m x l`.
    b_lags: Vec<DMatrix<f64>>,
    /// `true` where an edge of the relation graph exists.
    b_mask: DMatrix<bool>,
    per_row: Option<PerRowDegrees>,
}

impl ThetaParams {
    pub fn new(
        a_lags: Vec<DMatrix<f64>>,
        b_lags: Vec<DMatrix<f64>>,
        b_mask: DMatrix<bool>,
        per_row: Option<PerRowDegrees>,
    ) -> Result<Self> {
        let b0 = b_lags
            .first()
            .ok_or_else(|| Error::Dim("need at least B_0".into()))?;
        let (m, l) = (b0.nrows(), b0.ncols());
        let q = a_lags.len();
        let r = b_lags.len() - 1;
        for (k, a) in a_lags.iter().enumerate() {
            if a.nrows() != m || a.ncols() != m {
                return Err(Error::Dim(format!("A_{} has wrong shape", k + 1)));
            }
            for i in 0..m {
                for j in 0..m {
                    if i != j && a[(i, j)].abs() > 1e-14 {
                        return Err(Error::Domain(format!(
                            "A_{} must be diagonal, entry ({i},{j}) = {}",
                            k + 1,
                            a[(i, j)]
                        )));
                    }
                }
            }
        }
        if b_mask.nrows() != m || b_mask.ncols() != l {
            return Err(Error::Dim("b_mask shape must match B".into()));
        }
        for (k, b) in b_lags.iter().enumerate() {
            if b.nrows() != m || b.ncols() != l {
                return Err(Error::Dim(format!("B_{k} has wrong shape")));
            }
            for i in 0..m {
                for j in 0..l {
                    if !b_mask[(i, j)] && b[(i, j)].abs() > 1e-14 {
                        return Err(Error::Domain(format!(
                            "B_{k} entry ({i},{j}) must be zero off the edge set"
                        )));
                    }
                }
            }
        }
        if let Some(pr) = &per_row {
            if pr.q.len() != m || pr.r.len() != m {
                return Err(Error::Dim("per-row degree lists must have length m".into()));
            }
            if pr.q.iter().any(|&d| d > q) || pr.r.iter().any(|&d| d > r) {
                return Err(Error::Domain(
                    "per-row degrees exceed the declared degrees".into(),
                ));
            }
            for j in 0..m {
                for k in pr.q[j] + 1..=q {
                    if a_lags[k - 1][(j, j)].abs() > 1e-14 {
                        return Err(Error::Domain(format!(
                            "A_{k} row {j} exceeds its per-row degree"
                        )));
                    }
                }
                for (k, b) in b_lags.iter().enumerate().skip(pr.r[j] + 1) {
                    for h in 0..l {
                        if b[(j, h)].abs() > 1e-14 {
                            return Err(Error::Domain(format!(
                                "B_{k} row {j} exceeds its per-row degree"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self {
            m,
            l,
            q,
            r,
            a_lags,
            b_lags,
            b_mask,
            per_row,
        })
    }

    /// Parameter block with every structurally-free entry set to one.
    pub fn ones(
        m: usize,
        l: usize,
        q: usize,
        r: usize,
        b_mask: DMatrix<bool>,
        per_row: Option<PerRowDegrees>,
    ) -> Result<Self> {
        let mut a_lags = vec![DMatrix::zeros(m, m); q];
        let mut b_lags = vec![DMatrix::zeros(m, l); r + 1];
        for j in 0..m {
            let qj = per_row.as_ref().map_or(q, |pr| pr.q[j]);
            let rj = per_row.as_ref().map_or(r, |pr| pr.r[j]);
            for a in a_lags.iter_mut().take(qj) {
                a[(j, j)] = 1.0;
            }
            for b in b_lags.iter_mut().take(rj + 1) {
                for h in 0..l {
                    if b_mask[(j, h)] {
                        b[(j, h)] = 1.0;
                    }
                }
            }
        }
        Self::new(a_lags, b_lags, b_mask, per_row)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.m, self.l, self.q, self.r)
    }

    pub fn a_lag(&self, k: usize) -> &DMatrix<f64> {
        &self.a_lags[k - 1]
    }

    pub fn b_lag(&self, k: usize) -> &DMatrix<f64> {
        &self.b_lags[k]
    }

    pub fn b_mask(&self) -> &DMatrix<bool> {
        &self.b_mask
    }

    pub fn per_row(&self) -> Option<&PerRowDegrees> {
        self.per_row.as_ref()
    }

    /// Width of the flattened parameter, `p = m q + l (r + 1)`.
    pub fn width(&self) -> usize {
        self.m * self.q + self.l * (self.r + 1)
    }

    /// Flattened `m x p` parameter matrix `[A_1 .. A_q | B_0 .. B_r]`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.width();
        let mut out = DMatrix::zeros(self.m, p);
        for (k, a) in self.a_lags.iter().enumerate() {
            out.view_mut((0, k * self.m), (self.m, self.m)).copy_from(a);
        }
        let off = self.m * self.q;
        for (k, b) in self.b_lags.iter().enumerate() {
            out.view_mut((0, off + k * self.l), (self.m, self.l))
                .copy_from(b);
        }
        out
    }

    /// Rebuilds structured parameters from a flattened matrix, keeping this
    /// block's mask and per-row degrees.
    pub fn with_matrix(&self, mat: &DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != self.m || mat.ncols() != self.width() {
            return Err(Error::Dim("flattened parameter has wrong shape".into()));
        }
        let mut a_lags = Vec::with_capacity(self.q);
        for k in 0..self.q {
            a_lags.push(mat.view((0, k * self.m), (self.m, self.m)).into_owned());
        }
        let off = self.m * self.q;
        let mut b_lags = Vec::with_capacity(self.r + 1);
        for k in 0..=self.r {
            b_lags.push(mat.view((0, off + k * self.l), (self.m, self.l)).into_owned());
        }
        Self::new(a_lags, b_lags, self.b_mask.clone(), self.per_row.clone())
    }

    /// `A(z^{-1}) = I + sum_k A_k z^{-k}`.
    pub fn a_poly(&self) -> MatrixPolynomial {
        let mut coeffs = vec![DMatrix::identity(self.m, self.m)];
        coeffs.extend(self.a_lags.iter().cloned());
        MatrixPolynomial::new(coeffs).expect("validated shapes")
    }

    /// `B(z^{-1}) = sum_k B_k z^{-k}`.
    pub fn b_poly(&self) -> MatrixPolynomial {
        MatrixPolynomial::new(self.b_lags.clone()).expect("validated shapes")
    }

    /// Structurally free coordinates `(row, theta_column)` in canonical
    /// order (A lags first, then B lags).
    pub fn free_coords(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 1..=self.q {
            for j in 0..self.m {
                let qj = self.per_row.as_ref().map_or(self.q, |pr| pr.q[j]);
                if k <= qj {
                    out.push((j, (k - 1) * self.m + j));
                }
            }
        }
        let off = self.m * self.q;
        for k in 0..=self.r {
            for j in 0..self.m {
                let rj = self.per_row.as_ref().map_or(self.r, |pr| pr.r[j]);
                for h in 0..self.l {
                    if self.b_mask[(j, h)] && k <= rj {
                        out.push((j, off + k * self.l + h));
                    }
                }
            }
        }
        out
    }

    /// Names of the free coordinates, matching [`ThetaParams::free_coords`]
    /// order (1-based indices).
    pub fn free_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 1..=self.q {
            for j in 0..self.m {
                let qj = self.per_row.as_ref().map_or(self.q, |pr| pr.q[j]);
                if k <= qj {
                    out.push(format!("a{}_{}", k, j + 1));
                }
            }
        }
        for k in 0..=self.r {
            for j in 0..self.m {
                let rj = self.per_row.as_ref().map_or(self.r, |pr| pr.r[j]);
                for h in 0..self.l {
                    if self.b_mask[(j, h)] && k <= rj {
                        out.push(format!("b{}_{}_{}", k, j + 1, h + 1));
                    }
                }
            }
        }
        out
    }

    /// Values of the free coordinates in canonical order.
    pub fn free_values(&self) -> Vec<f64> {
        let mat = self.to_matrix();
        self.free_coords().iter().map(|&(i, j)| mat[(i, j)]).collect()
    }
}

/// Targets `zeta_m(t)` and regressors `z(t)` for `t = 1..N`, with the moment
/// matrices the criterion and its derivatives need.
#[derive(Debug, Clone)]
pub struct RegressorSet {
    m: usize,
    l: usize,
    q: usize,
    r: usize,
    n: usize,
    targets: Vec<DVector<f64>>,
    regressors: Vec<DVector<f64>>,
    s_zz: DMatrix<f64>,
    s_zzeta: DMatrix<f64>,
    s_zetazeta: DMatrix<f64>,
}

impl RegressorSet {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn width(&self) -> usize {
        self.m * self.q + self.l * (self.r + 1)
    }

    pub fn target(&self, t: usize) -> &DVector<f64> {
        &self.targets[t]
    }

    pub fn regressor(&self, t: usize) -> &DVector<f64> {
        &self.regressors[t]
    }

    fn check_theta(&self, theta: &ThetaParams) -> Result<()> {
        let (m, l, q, r) = theta.dims();
        if (m, l, q, r) != (self.m, self.l, self.q, self.r) {
            return Err(Error::Dim(
                "parameter dimensions do not match the regressors".into(),
            ));
        }
        Ok(())
    }
}

/// Builds `z(t) = [zeta_m(t-1)' .. zeta_m(t-q)' | -y_l(t)' .. -y_l(t-r)']'`
/// with zero padding for times at or before zero.
pub fn build_regressors(
    zeta_m: &DMatrix<f64>,
    y_l_hat: &DMatrix<f64>,
    q: usize,
    r: usize,
) -> Result<RegressorSet> {
    let n = zeta_m.nrows();
    if y_l_hat.nrows() != n {
        return Err(Error::Dim(format!(
            "series lengths differ: {} vs {}",
            n,
            y_l_hat.nrows()
        )));
    }
    let m = zeta_m.ncols();
    let l = y_l_hat.ncols();
    let p = m * q + l * (r + 1);
    let mut targets = Vec::with_capacity(n);
    let mut regressors = Vec::with_capacity(n);
    for t in 0..n {
        targets.push(DVector::from_fn(m, |i, _| zeta_m[(t, i)]));
        let mut z = DVector::zeros(p);
        for k in 1..=q {
            if t >= k {
                for i in 0..m {
                    z[(k - 1) * m + i] = zeta_m[(t - k, i)];
                }
            }
        }
        for k in 0..=r {
            if t >= k {
                for i in 0..l {
                    z[m * q + k * l + i] = -y_l_hat[(t - k, i)];
                }
            }
        }
        regressors.push(z);
    }
    let mut s_zz = DMatrix::zeros(p, p);
    let mut s_zzeta = DMatrix::zeros(p, m);
    let mut s_zetazeta = DMatrix::zeros(m, m);
    for t in 0..n {
        let z = &regressors[t];
        let x = &targets[t];
        s_zz.syger(1.0, z, z, 1.0);
        s_zzeta.ger(1.0, z, x, 1.0);
        s_zetazeta.syger(1.0, x, x, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..p {
        for j in i + 1..p {
            s_zz[(i, j)] = s_zz[(j, i)];
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            s_zetazeta[(i, j)] = s_zetazeta[(j, i)];
        }
    }
    Ok(RegressorSet {
        m,
        l,
        q,
        r,
        n,
        targets,
        regressors,
        s_zz,
        s_zzeta,
        s_zetazeta,
    })
}

/// Residual covariance `Gamma = sigma^2 (I + A A')`; diagonal whenever the
/// AR coefficients are diagonal.
pub fn gamma(theta: &ThetaParams, sigma: f64) -> Result<DMatrix<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let (m, _, q, _) = theta.dims();
    let mut acc = DMatrix::identity(m, m);
    for k in 1..=q {
        let a = theta.a_lag(k);
        acc += a * a.transpose();
    }
    Ok(acc * (sigma * sigma))
}

/// Quantities shared by the criterion and its derivatives at a point, built
/// from the flattened parameter matrix so every direction is admissible.
struct Workspace {
    theta_mat: DMatrix<f64>,
    gamma: DMatrix<f64>,
    gamma_inv: DMatrix<f64>,
    /// `G = sigma^2 Gamma^{-1} = (I + A A')^{-1}`.
    gbar: DMatrix<f64>,
    log_det_gamma: f64,
    s_xx: DMatrix<f64>,
    s_zx: DMatrix<f64>,
}

impl Workspace {
    fn build(mat: &DMatrix<f64>, regs: &RegressorSet, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        let (m, p) = (regs.m, regs.width());
        if mat.nrows() != m || mat.ncols() != p {
            return Err(Error::Dim("parameter matrix has wrong shape".into()));
        }
        let mq = m * regs.q;
        let a_part = mat.view((0, 0), (m, mq)).into_owned();
        let gam = (DMatrix::identity(m, m) + &a_part * a_part.transpose()) * (sigma * sigma);
        let chol = gam
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("Gamma is not positive definite".into()))?;
        let gamma_inv = chol.inverse();
        let log_det_gamma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let gbar = &gamma_inv * (sigma * sigma);
        let tz = mat * &regs.s_zzeta;
        let s_xx = &regs.s_zetazeta + &tz + tz.transpose() + mat * &regs.s_zz * mat.transpose();
        let s_zx = &regs.s_zzeta + &regs.s_zz * mat.transpose();
        Ok(Self {
            theta_mat: mat.clone(),
            gamma: gam,
            gamma_inv,
            gbar,
            log_det_gamma,
            s_xx,
            s_zx,
        })
    }

    /// `D Theta'` with `D = diag(I_mq, 0)`: the transpose with its latent
    /// rows zeroed.
    fn d_theta_t(&self, mq: usize) -> DMatrix<f64> {
        let mut out = self.theta_mat.transpose();
        for i in mq..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] = 0.0;
            }
        }
        out
    }
}

fn cost_mat(mat: &DMatrix<f64>, regs: &RegressorSet, sigma: f64) -> Result<f64> {
    let ws = Workspace::build(mat, regs, sigma)?;
    let quad = (&ws.gamma_inv * &ws.s_xx).trace();
    Ok(ws.log_det_gamma + quad / regs.n as f64)
}

/// The `p x m` Jacobian `dJ/dTheta`.
fn jacobian_mat(mat: &DMatrix<f64>, regs: &RegressorSet, sigma: f64) -> Result<DMatrix<f64>> {
    let ws = Workspace::build(mat, regs, sigma)?;
    let mq = regs.m * regs.q;
    let n = regs.n as f64;
    let dth_g = ws.d_theta_t(mq) * &ws.gbar;
    Ok(&dth_g * 2.0 + (&ws.s_zx - &dth_g * &ws.s_xx) * &ws.gamma_inv * (2.0 / n))
}

fn hessian_mat(mat: &DMatrix<f64>, regs: &RegressorSet, sigma: f64) -> Result<DMatrix<f64>> {
    let ws = Workspace::build(mat, regs, sigma)?;
    let (m, p) = (regs.m, regs.width());
    let mq = m * regs.q;
    let n = regs.n as f64;

    let dth_g = ws.d_theta_t(mq) * &ws.gbar; // D Theta' G          (p x m)
    let g_th_d = dth_g.transpose(); //          G Theta D           (m x p)
    // M_1 D = (D Theta' G Theta - I) D: zero the latent block columns.
    let mut m1d = &dth_g * &ws.theta_mat - DMatrix::identity(p, p);
    for i in 0..p {
        for j in mq..p {
            m1d[(i, j)] = 0.0;
        }
    }
    let k = commutation_matrix(p, m);

    let s_xz = ws.s_zx.transpose();
    // sum_t M_2 M_2', M_2 = D Theta' G x - z.
    let sum_m2m2 =
        &dth_g * &ws.s_xx * &g_th_d - &dth_g * &s_xz - &ws.s_zx * &g_th_d + &regs.s_zz;
    // sum_t M_2 x' Gamma^{-1} and sum_t Gamma^{-1} x M_2'.
    let sum_m2x_ginv = (&dth_g * &ws.s_xx - &ws.s_zx) * &ws.gamma_inv;
    let sum_ginv_x_m2 = &ws.gamma_inv * (&ws.s_xx * &g_th_d - &s_xz);
    let ginv_sxx_gbar = &ws.gamma_inv * &ws.s_xx * &ws.gbar;

    let h_unsym = m1d.kronecker(&ws.gbar) * (-2.0)
        - &k * g_th_d.kronecker(&dth_g) * 2.0
        + (sum_m2m2.kronecker(&ws.gamma_inv)
            + m1d.kronecker(&ginv_sxx_gbar)
            + &k * (g_th_d.kronecker(&sum_m2x_ginv) + sum_ginv_x_m2.kronecker(&dth_g)))
            * (2.0 / n);
    Ok((&h_unsym + h_unsym.transpose()) / 2.0)
}

fn stationarity_mat(
    mat: &DMatrix<f64>,
    regs: &RegressorSet,
    sigma: f64,
    free: Option<&[(usize, usize)]>,
) -> Result<f64> {
    let ws = Workspace::build(mat, regs, sigma)?;
    let n = regs.n as f64;
    let mut jac = jacobian_mat(mat, regs, sigma)?;
    if let Some(coords) = free {
        // Keep only the structurally free directions: the pinned ones hold
        // the constraint multipliers and never vanish at a constrained
        // optimum.
        let mut keep = DMatrix::from_element(jac.nrows(), jac.ncols(), false);
        for &(i, jc) in coords {
            keep[(jc, i)] = true;
        }
        for i in 0..jac.nrows() {
            for j in 0..jac.ncols() {
                if !keep[(i, j)] {
                    jac[(i, j)] = 0.0;
                }
            }
        }
    }
    // Right-multiply the gradient condition by N Gamma / 2: at sigma = 1 and
    // with every coordinate free this is the textbook residual
    // N D Theta' - D Theta' Gamma^{-1} sum xx' + sum zx'.
    let resid = jac * &ws.gamma * (n / 2.0);
    Ok(resid.norm() / n)
}

/// Log-likelihood criterion
/// `J = log det Gamma + (1/N) sum_t x(t)' Gamma^{-1} x(t)`.
pub fn cost_j(theta: &ThetaParams, regs: &RegressorSet, sigma: f64) -> Result<f64> {
    regs.check_theta(theta)?;
    cost_mat(&theta.to_matrix(), regs, sigma)
}

/// Gradient of the criterion, shaped like `Theta` (`m x p`).
pub fn gradient_j(theta: &ThetaParams, regs: &RegressorSet, sigma: f64) -> Result<DMatrix<f64>> {
    regs.check_theta(theta)?;
    Ok(jacobian_mat(&theta.to_matrix(), regs, sigma)?.transpose())
}

/// Hessian of the criterion with respect to `vec(Theta)` (column-major),
/// symmetrized as `(H + H')/2`.
pub fn hessian_j(theta: &ThetaParams, regs: &RegressorSet, sigma: f64) -> Result<DMatrix<f64>> {
    regs.check_theta(theta)?;
    hessian_mat(&theta.to_matrix(), regs, sigma)
}

/// Scaled norm of the stationarity equation: the gradient condition
/// `dJ/dTheta = 0` multiplied on the right by `N Gamma / 2`, i.e.
/// `|| N sigma^2 D Theta' - D Theta' G sum xx' + sum zx' ||_F / N`.
/// At `sigma = 1` this is the classical form
/// `N D Theta' - D Theta' Gamma^{-1} sum xx' + sum zx'`.
///
/// The residual is evaluated over the structurally free coordinates of
/// `theta`: a constrained optimum zeroes the gradient only there, while the
/// pinned coordinates hold the constraint multipliers.
pub fn stationarity_residual(
    theta: &ThetaParams,
    regs: &RegressorSet,
    sigma: f64,
) -> Result<f64> {
    regs.check_theta(theta)?;
    stationarity_mat(&theta.to_matrix(), regs, sigma, Some(&theta.free_coords()))
}

/// Commutation matrix `K_{n,m}` with `K vec(M) = vec(M')` for `M` of shape
/// `n x m`; `K_{n,m} K_{m,n} = I`.
pub fn commutation_matrix(n: usize, m: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n * m, n * m);
    for i in 0..n {
        for j in 0..m {
            // vec(M) index of (i, j) is j n + i; vec(M') index of (j, i) is i m + j.
            k[(i * m + j, j * n + i)] = 1.0;
        }
    }
    k
}

/// Constraint matrix `C` with `C vec(Theta) = 0` encoding the diagonal-AR
/// structure and the edge mask: `(m-1)` unit rows per AR lag and column
/// selecting the off-diagonal entries, then one unit row per masked-out
/// input entry and lag.
pub fn constraint_matrix(
    m: usize,
    l: usize,
    q: usize,
    r: usize,
    b_mask: &DMatrix<bool>,
) -> DMatrix<f64> {
    let p = m * q + l * (r + 1);
    let masked: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .filter(|&(i, j)| !b_mask[(i, j)])
        .collect();
    let rows = q * m * (m - 1) + (r + 1) * masked.len();
    let mut c = DMatrix::zeros(rows, m * p);
    let mut row = 0;
    for k in 1..=q {
        for j in 0..m {
            let col = (k - 1) * m + j;
            for i in 0..m {
                if i != j {
                    c[(row, col * m + i)] = 1.0;
                    row += 1;
                }
            }
        }
    }
    for k in 0..=r {
        for &(i, j) in &masked {
            let col = m * q + k * l + j;
            c[(row, col * m + i)] = 1.0;
            row += 1;
        }
    }
    c
}

/// Constraint matrix used by the solver: the structural rows of
/// [`constraint_matrix`] plus unit rows pinning entries beyond each row's
/// declared per-row degree.
pub fn solver_constraints(theta: &ThetaParams) -> DMatrix<f64> {
    let (m, l, q, r) = theta.dims();
    let base = constraint_matrix(m, l, q, r, theta.b_mask());
    let Some(pr) = theta.per_row() else {
        return base;
    };
    let p = theta.width();
    let mut extra = Vec::new();
    for j in 0..m {
        for k in pr.q[j] + 1..=q {
            let col = (k - 1) * m + j;
            extra.push(col * m + j);
        }
        for k in pr.r[j] + 1..=r {
            for h in 0..l {
                if theta.b_mask()[(j, h)] {
                    let col = m * q + k * l + h;
                    extra.push(col * m + j);
                }
            }
        }
    }
    let mut c = DMatrix::zeros(base.nrows() + extra.len(), m * p);
    c.view_mut((0, 0), (base.nrows(), m * p)).copy_from(&base);
    for (i, &idx) in extra.iter().enumerate() {
        c[(base.nrows() + i, idx)] = 1.0;
    }
    c
}

/// A regularized Newton step from the KKT system.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub step: DVector<f64>,
    pub dual: DVector<f64>,
    /// Regularization actually added to the Hessian block.
    pub tau: f64,
}

/// Solves `[[H + tau I, C'], [C, 0]] [step; dual] = [-g; 0]`, raising `tau`
/// from `1e-10` by factors of ten until the Hessian is positive definite on
/// the null space of `C`.
pub fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>, c: &DMatrix<f64>) -> Result<NewtonStep> {
    let nv = h.nrows();
    if h.ncols() != nv || g.len() != nv || (c.nrows() > 0 && c.ncols() != nv) {
        return Err(Error::Dim("KKT blocks have inconsistent shapes".into()));
    }
    let nc = c.nrows();
    // Null-space basis of C from the eigendecomposition of C'C.
    let z = if nc == 0 {
        DMatrix::identity(nv, nv)
    } else {
        let gram = c.transpose() * c;
        let eig = gram.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let tol = 1e-10 * max_eig.max(1.0);
        let rank = eig.eigenvalues.iter().filter(|&&v| v > tol).count();
        if rank < nc {
            return Err(Error::Singular(format!(
                "constraint matrix is rank deficient ({rank} < {nc})"
            )));
        }
        let null_cols: Vec<usize> = (0..nv).filter(|&i| eig.eigenvalues[i] <= tol).collect();
        let mut zb = DMatrix::zeros(nv, null_cols.len());
        for (out_col, &i) in null_cols.iter().enumerate() {
            zb.set_column(out_col, &eig.eigenvectors.column(i));
        }
        zb
    };

    let h_scale = h.norm();
    let mut tau = 0.0f64;
    let reduced_dim = z.ncols();
    let (step, h_reg) = loop {
        let mut h_reg = h.clone();
        for i in 0..nv {
            h_reg[(i, i)] += tau;
        }
        let reduced = z.transpose() * &h_reg * &z;
        if let Some(chol) = reduced.cholesky() {
            let rhs = z.transpose() * (-g);
            let u = chol.solve(&rhs);
            let step = &z * u;
            if step.iter().all(|v| v.is_finite()) {
                break (step, h_reg);
            }
        }
        tau = if tau == 0.0 { 1e-10 } else { tau * 10.0 };
        if tau > 1e6 * h_scale.max(1.0) {
            return Err(Error::NoConvergence(format!(
                "Hessian cannot be regularized on the feasible subspace \
                 (tau reached {tau:.3e}, reduced dimension {reduced_dim})"
            )));
        }
    };

    let dual = if nc == 0 {
        DVector::zeros(0)
    } else {
        // C' dual = -g - H step, solved through the normal equations.
        let rhs = c * (-g - &h_reg * &step);
        let cc = c * c.transpose();
        cc.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("constraint normal matrix singular".into()))?
    };
    Ok(NewtonStep { step, dual, tau })
}

/// Newton decrement `d = (step' H step)^{1/2}` for the regularized Hessian
/// used in the accepted step.
pub fn newton_decrement(step: &DVector<f64>, h: &DMatrix<f64>) -> Result<f64> {
    let quad = step.dot(&(h * step));
    let scale = 1.0 + h.norm() * step.norm_squared();
    if quad < -1e-10 * scale {
        return Err(Error::Domain(format!(
            "negative curvature {quad:.3e} after regularization"
        )));
    }
    Ok(quad.max(0.0).sqrt())
}

/// Options for the constrained Newton iteration.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MlOptions {
    /// Stop when the squared Newton decrement over two falls below this.
    pub eps: f64,
    pub max_iter: usize,
    /// Armijo slope fraction of the backtracking line search.
    pub alpha: f64,
    /// Backtracking contraction factor.
    pub beta: f64,
}

impl Default for MlOptions {
    fn default() -> Self {
        Self {
            eps: 1e-12,
            max_iter: 200,
            alpha: 0.25,
            beta: 0.5,
        }
    }
}

/// One row of the solver trace.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MlTraceRow {
    pub iter: usize,
    pub cost: f64,
    pub decrement: f64,
    pub step_size: f64,
    pub feasibility: f64,
    pub stationarity: f64,
}

/// Result of the constrained maximum-likelihood solve.
#[derive(Debug, Clone)]
pub struct MlSolution {
    pub theta: ThetaParams,
    pub converged: bool,
    pub iters: usize,
    pub cost: f64,
    pub decrement_final: f64,
    pub stationarity: f64,
    pub trace: Vec<MlTraceRow>,
}

/// Newton iteration with equality constraints and backtracking line search
/// on the criterion restricted to the feasible affine set.
pub fn solve_ml(
    regs: &RegressorSet,
    sigma: f64,
    init: &ThetaParams,
    opts: &MlOptions,
) -> Result<MlSolution> {
    regs.check_theta(init)?;
    let c = solver_constraints(init);
    let free_coords = init.free_coords();
    let (m, _, _, _) = init.dims();
    let p = init.width();
    let vec_of = |mat: &DMatrix<f64>| DVector::from_column_slice(mat.as_slice());
    let infeas = |v: &DVector<f64>| {
        if c.nrows() == 0 {
            0.0
        } else {
            (&c * v).iter().fold(0.0f64, |mx, x| mx.max(x.abs()))
        }
    };

    let mut theta_mat = init.to_matrix();
    if infeas(&vec_of(&theta_mat)) > 1e-10 {
        return Err(Error::Domain("initial parameter violates the constraints".into()));
    }

    let mut trace = Vec::new();
    let mut converged = false;
    let mut decrement = f64::INFINITY;
    let mut cost = cost_mat(&theta_mat, regs, sigma)?;
    let mut iters = 0;

    for iter in 0..opts.max_iter {
        iters = iter + 1;
        let jac = jacobian_mat(&theta_mat, regs, sigma)?;
        let g = vec_of(&jac.transpose());
        let hess = hessian_mat(&theta_mat, regs, sigma)?;
        let ns = newton_step(&hess, &g, &c)?;
        let mut h_reg = hess;
        for i in 0..h_reg.nrows() {
            h_reg[(i, i)] += ns.tau;
        }
        decrement = newton_decrement(&ns.step, &h_reg)?;
        let stat = stationarity_mat(&theta_mat, regs, sigma, Some(&free_coords))?;
        let theta_vec = vec_of(&theta_mat);

        // The decrement bound certifies optimality only for an essentially
        // unregularized Hessian; a heavily damped step can be tiny at a
        // saddle while the gradient is still large.
        if decrement * decrement / 2.0 <= opts.eps && ns.tau <= 1e-8 {
            trace.push(MlTraceRow {
                iter: iters,
                cost,
                decrement,
                step_size: 0.0,
                feasibility: infeas(&theta_vec),
                stationarity: stat,
            });
            converged = true;
            break;
        }

        // Backtracking line search along the feasible direction.
        let slope = g.dot(&ns.step);
        let mut t = 1.0f64;
        let mut accepted = false;
        while t >= 1e-16 {
            let cand_vec = &theta_vec + &ns.step * t;
            let cand_mat = DMatrix::from_column_slice(m, p, cand_vec.as_slice());
            if let Ok(cand_cost) = cost_mat(&cand_mat, regs, sigma) {
                if cand_cost <= cost + opts.alpha * t * slope {
                    theta_mat = cand_mat;
                    cost = cand_cost;
                    accepted = true;
                    break;
                }
            }
            t *= opts.beta;
        }
        trace.push(MlTraceRow {
            iter: iters,
            cost,
            decrement,
            step_size: if accepted { t } else { 0.0 },
            feasibility: infeas(&theta_vec),
            stationarity: stat,
        });
        if !accepted {
            // Line search stalled below the floor: report the best iterate.
            break;
        }
    }

    let stationarity = stationarity_mat(&theta_mat, regs, sigma, Some(&free_coords))?;
    let theta = init.with_matrix(&theta_mat)?;
    Ok(MlSolution {
        theta,
        converged,
        iters,
        cost,
        decrement_final: decrement,
        stationarity,
        trace,
    })
}

/// Verdict of the identifiability check with a short certificate naming the
/// violation when there is one.
#[derive(Debug, Clone)]
pub struct Identifiability {
    pub identifiable: bool,
    pub certificate: String,
}

/// Checks identifiability of the pair `(A, B)`.
///
/// Joint mode tests `rank([A_q B_r]) = m` on the declared leading
/// coefficients and left-coprimeness at every root of `det A`. Per-row mode
/// (for diagonal `A`) applies the scalar test row-wise with per-row degrees
/// inferred from the trailing nonzero coefficients, so padded rows are
/// judged at their own degree.
pub fn check_identifiability(
    a: &MatrixPolynomial,
    b: &MatrixPolynomial,
    per_row: bool,
) -> Result<Identifiability> {
    let m = a.rows();
    if a.cols() != m {
        return Err(Error::Dim("A must be square".into()));
    }
    if b.rows() != m {
        return Err(Error::Dim("B must have the same row count as A".into()));
    }
    let id = DMatrix::<f64>::identity(m, m);
    if (a.coeff(0) - &id).norm() > 1e-12 {
        return Err(Error::Domain("A must be monic (A_0 = I)".into()));
    }

    if per_row {
        for j in 0..m {
            let qj = (1..=a.degree())
                .filter(|&k| a.coeff(k)[(j, j)].abs() > 1e-14)
                .max()
                .unwrap_or(0);
            let has_b = (0..=b.degree())
                .any(|k| b.coeff(k).row(j).iter().any(|v| v.abs() > 1e-14));
            if !has_b {
                if qj == 0 {
                    continue; // trivial row: constant A, zero B
                }
                return Ok(Identifiability {
                    identifiable: false,
                    certificate: format!(
                        "row {}: B row is identically zero while A has degree {qj}",
                        j + 1
                    ),
                });
            }
            // Scalar coprimeness: at every root of the row's A polynomial
            // the row of B must not vanish.
            let a_row = MatrixPolynomial::scalar(
                &(0..=qj)
                    .map(|k| if k == 0 { 1.0 } else { a.coeff(k)[(j, j)] })
                    .collect::<Vec<_>>(),
            )?;
            for z0 in a_row.det_roots()? {
                let x0 = z0.inv();
                let b_at = b.eval_zinv(x0);
                let row_norm: f64 = (0..b.cols()).map(|h| b_at[(j, h)].norm()).sum();
                if row_norm <= 1e-9 {
                    return Ok(Identifiability {
                        identifiable: false,
                        certificate: format!(
                            "row {}: A and B share the root z = {:.6} + {:.6}i",
                            j + 1,
                            z0.re,
                            z0.im
                        ),
                    });
                }
            }
        }
        return Ok(Identifiability {
            identifiable: true,
            certificate: "per-row leading pairs and coprimeness verified".into(),
        });
    }

    // Joint mode: leading-coefficient rank.
    let mut lead = DMatrix::zeros(m, m + b.cols());
    lead.view_mut((0, 0), (m, m)).copy_from(a.coeff(a.degree()));
    lead.view_mut((0, m), (m, b.cols()))
        .copy_from(b.coeff(b.degree()));
    let sv = lead.svd(false, false).singular_values;
    let top = sv.max();
    let rank = if top == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count()
    };
    if rank < m {
        return Ok(Identifiability {
            identifiable: false,
            certificate: format!("rank([A_q B_r]) = {rank} < {m}"),
        });
    }
    // Left coprimeness: [A B] keeps full row rank at every root of det A.
    for z0 in a.det_roots()? {
        let x0 = z0.inv();
        let a_at = a.eval_zinv(x0);
        let b_at = b.eval_zinv(x0);
        let mut joint = crate::polymat::CMatrix::zeros(m, m + b.cols());
        joint.view_mut((0, 0), (m, m)).copy_from(&a_at);
        joint.view_mut((0, m), (m, b.cols())).copy_from(&b_at);
        let sv = joint.svd(false, false).singular_values;
        let top = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-8 * top.max(1.0)).count();
        if rank < m {
            return Ok(Identifiability {
                identifiable: false,
                certificate: format!(
                    "common left factor at root z = {:.6} + {:.6}i",
                    z0.re, z0.im
                ),
            });
        }
    }
    Ok(Identifiability {
        identifiable: true,
        certificate: "leading rank and left coprimeness verified".into(),
    })
}

/// Reconstructs the measured block by the stable recursion
/// `y_m(t) = -sum_k A_k y_m(t-k) + sum_k B_k y_l(t-k)` from zero initial
/// conditions. Errors when `det A` has roots on or outside the unit circle.
pub fn reconstruct_ym(theta: &ThetaParams, y_l_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let roots = theta.a_poly().det_roots()?;
    let unstable: Vec<_> = roots.iter().filter(|r| r.norm() >= 1.0).collect();
    if !unstable.is_empty() {
        return Err(Error::Domain(format!(
            "A(z^{{-1}}) is not stable; offending roots: {}",
            unstable
                .iter()
                .map(|r| format!("{:.4}+{:.4}i", r.re, r.im))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(reconstruct_ym_unchecked(theta, y_l_hat))
}

/// Same recursion as [`reconstruct_ym`] with no stability guard. The output
/// diverges for unstable estimates; used to score baselines honestly instead
/// of masking their failure.
pub fn reconstruct_ym_unchecked(theta: &ThetaParams, y_l_hat: &DMatrix<f64>) -> DMatrix<f64> {
    relation_recursion(theta, y_l_hat, None)
}

/// The relation recursion started from measured data: the first `q` outputs
/// are taken from `start` instead of zero, which removes the startup
/// transient on records that did not begin at rest. No stability guard.
pub fn reconstruct_ym_data_init(
    theta: &ThetaParams,
    y_l_hat: &DMatrix<f64>,
    start: &DMatrix<f64>,
) -> DMatrix<f64> {
    relation_recursion(theta, y_l_hat, Some(start))
}

fn relation_recursion(
    theta: &ThetaParams,
    y_l_hat: &DMatrix<f64>,
    start: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let (m, l, q, r) = theta.dims();
    let n = y_l_hat.nrows();
    let mut out = DMatrix::zeros(n, m);
    for t in 0..n {
        if let Some(s) = start {
            if t < q {
                for i in 0..m {
                    out[(t, i)] = s[(t, i)];
                }
                continue;
            }
        }
        let mut v = DVector::zeros(m);
        for k in 1..=q.min(t) {
            let a = theta.a_lag(k);
            for i in 0..m {
                v[i] -= a[(i, i)] * out[(t - k, i)];
            }
        }
        for k in 0..=r.min(t) {
            let b = theta.b_lag(k);
            for i in 0..m {
                for h in 0..l {
                    v[i] += b[(i, h)] * y_l_hat[(t - k, h)];
                }
            }
        }
        for i in 0..m {
            out[(t, i)] = v[i];
        }
    }
    out
}

/// Structured per-row ordinary least squares of `zeta_m(t)` on `-z(t)`:
/// each output row is regressed on exactly the columns the template leaves
/// free (diagonal AR entries, masked-in inputs, within per-row degrees).
pub fn ls_structured(
    zeta_m: &DMatrix<f64>,
    driver: &DMatrix<f64>,
    template: &ThetaParams,
) -> Result<ThetaParams> {
    let (m, l, q, r) = template.dims();
    if zeta_m.ncols() != m || driver.ncols() != l {
        return Err(Error::Dim("series channels do not match the template".into()));
    }
    let regs = build_regressors(zeta_m, driver, q, r)?;
    let mut cols_by_row: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, j) in template.free_coords() {
        cols_by_row[i].push(j);
    }
    let mut theta_mat = DMatrix::zeros(m, regs.width());
    for (j, cols) in cols_by_row.iter().enumerate() {
        let nf = cols.len();
        if nf == 0 {
            continue;
        }
        let mut gram = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &ca) in cols.iter().enumerate() {
            rhs[a] = -regs.s_zzeta[(ca, j)];
            for (b, &cb) in cols.iter().enumerate() {
                gram[(a, b)] = regs.s_zz[(ca, cb)];
            }
        }
        let sol = gram
            .cholesky()
            .ok_or_else(|| {
                Error::Singular(format!(
                    "normal equations singular for output row {}",
                    j + 1
                ))
            })?
            .solve(&rhs);
        for (a, &ca) in cols.iter().enumerate() {
            theta_mat[(j, ca)] = sol[a];
        }
    }
    template.with_matrix(&theta_mat)
}

/// Least-squares identification with the diagonal-AR structure and the edge
/// mask at the full declared degrees.
pub fn ls_baseline(
    zeta_m: &DMatrix<f64>,
    driver: &DMatrix<f64>,
    q: usize,
    r: usize,
    b_mask: &DMatrix<bool>,
) -> Result<ThetaParams> {
    let template = ThetaParams::ones(zeta_m.ncols(), driver.ncols(), q, r, b_mask.clone(), None)?;
    ls_structured(zeta_m, driver, &template)
}
