//! Maximum-entropy AR estimation of the latent variable's innovation model.
//!
//! The dual program is solved over the stacked coefficient block
//! `P = [P_0 ... P_n]` directly: minimize
//! `-log det(P_0' P_0) + <T, P' P>` subject to the graph constraints
//! `[D_j(P' P)]_{kh} = 0` on missing edges. The quadratic constraints are
//! linearized at each iterate (SQP), the KKT system is solved with Hessian
//! regularization, and a backtracking line search runs on an l1 merit
//! function.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::armax_ml::commutation_matrix;
use crate::error::{Error, Result};
use crate::polymat::MatrixPolynomial;
use crate::spectral::{block_toeplitz, d_operator, CovarianceSequence};

/// AR innovation model `P_0 y(t) = -sum_j P_j y(t-j) + w(t)` with unit
/// innovation covariance and invertible `P_0`.
#[derive(Debug, Clone)]
pub struct ArModel {
    dim: usize,
    coeffs: Vec<DMatrix<f64>>,
}

impl ArModel {
    pub fn new(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::Dim("AR model needs at least P_0".into()))?;
        let dim = first.nrows();
        if coeffs.iter().any(|c| c.nrows() != dim || c.ncols() != dim) {
            return Err(Error::Dim("AR coefficients must be square and same size".into()));
        }
        let det = first.clone().lu().determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::Singular("P_0 must be invertible".into()));
        }
        Ok(Self { dim, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, j: usize) -> &DMatrix<f64> {
        &self.coeffs[j]
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// The stacked parameter block `[P_0 P_1 ... P_n]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let l = self.dim;
        let mut out = DMatrix::zeros(l, l * self.coeffs.len());
        for (j, c) in self.coeffs.iter().enumerate() {
            out.view_mut((0, j * l), (l, l)).copy_from(c);
        }
        out
    }

    pub fn from_stacked(dim: usize, stacked: &DMatrix<f64>) -> Result<Self> {
        if stacked.nrows() != dim || !stacked.ncols().is_multiple_of(dim) {
            return Err(Error::Dim("stacked AR block has wrong shape".into()));
        }
        let blocks = stacked.ncols() / dim;
        let coeffs = (0..blocks)
            .map(|j| stacked.view((0, j * dim), (dim, dim)).into_owned())
            .collect();
        Self::new(coeffs)
    }

    /// `P(z^{-1})` as a matrix polynomial.
    pub fn to_poly(&self) -> MatrixPolynomial {
        MatrixPolynomial::new(self.coeffs.clone()).expect("validated at construction")
    }

    /// Condition number of `P_0` (reported, not enforced).
    pub fn p0_condition(&self) -> f64 {
        let sv = self.coeffs[0].clone().singular_values();
        sv.max() / sv.min()
    }

    /// `1 - max |root|` of `det P(z^{-1})`; positive for a minimum-phase
    /// model. Reported as a diagnostic.
    pub fn min_phase_margin(&self) -> Result<f64> {
        let roots = self.to_poly().det_roots()?;
        let max_mod = roots.iter().map(|r| r.norm()).fold(0.0, f64::max);
        Ok(1.0 - max_mod)
    }

    /// Flips row signs so the diagonal of `P_0` is positive. Any orthogonal
    /// left factor leaves `P' P` (and the spectrum) unchanged; this fixes a
    /// convention so estimates can be averaged and reported.
    pub fn normalize_signs(&mut self) {
        for i in 0..self.dim {
            if self.coeffs[0][(i, i)] < 0.0 {
                for c in self.coeffs.iter_mut() {
                    for j in 0..c.ncols() {
                        c[(i, j)] = -c[(i, j)];
                    }
                }
            }
        }
    }
}

/// Undirected dependence graph of the latent variable; self loops are always
/// present. Node indices are zero-based in this API (configuration files use
/// one-based pairs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTopology {
    dim: usize,
    // Normalized as (max, min).
    edges: BTreeSet<(usize, usize)>,
}

impl LatentTopology {
    pub fn complete(dim: usize) -> Self {
        let mut edges = BTreeSet::new();
        for k in 0..dim {
            for h in 0..=k {
                edges.insert((k, h));
            }
        }
        Self { dim, edges }
    }

    /// Topology with self loops plus the given off-diagonal edges.
    pub fn with_edges(dim: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut edges = BTreeSet::new();
        for k in 0..dim {
            edges.insert((k, k));
        }
        for &(a, b) in pairs {
            if a >= dim || b >= dim {
                return Err(Error::Dim(format!(
                    "edge ({a}, {b}) out of range for dimension {dim}"
                )));
            }
            edges.insert((a.max(b), a.min(b)));
        }
        Ok(Self { dim, edges })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_edge(&self, k: usize, h: usize) -> bool {
        self.edges.contains(&(k.max(h), k.min(h)))
    }

    pub fn is_complete(&self) -> bool {
        self.edges.len() == self.dim * (self.dim + 1) / 2
    }

    /// Missing pairs `(k, h)` with `k > h`, in sorted order.
    pub fn missing_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.dim {
            for h in 0..k {
                if !self.edges.contains(&(k, h)) {
                    out.push((k, h));
                }
            }
        }
        out
    }

    /// Present pairs `(k, h)` with `k >= h` (self loops included).
    pub fn lower_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().collect()
    }
}

/// Solver options; the defaults match the experimental settings used
/// throughout.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MaxentOptions {
    /// Stop when the squared Newton decrement over two falls below this.
    pub eps: f64,
    /// Infinity-norm tolerance on the constraint residuals.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Multiplicative growth of the merit penalty.
    pub penalty_growth: f64,
}

impl Default for MaxentOptions {
    fn default() -> Self {
        Self {
            eps: 1e-12,
            feas_tol: 1e-9,
            max_iter: 200,
            penalty_growth: 10.0,
        }
    }
}

/// Convergence diagnostics of the dual solve.
#[derive(Debug, Clone)]
pub struct MaxentDiagnostics {
    pub iters: usize,
    pub objective: f64,
    pub decrement_sq_half: f64,
    pub feasibility: f64,
    /// Objective value after each accepted step.
    pub objective_trace: Vec<f64>,
    /// `Some(margin)` when the solution is not safely minimum phase
    /// (margin = 1 - max |root| <= 1e-8).
    pub min_phase_warning: Option<f64>,
    pub p0_condition: f64,
}

#[derive(Debug, Clone)]
pub struct MaxentSolution {
    pub model: ArModel,
    pub diagnostics: MaxentDiagnostics,
}

/// Dual objective `-log det(P_0' P_0) + <T, P' P>`.
pub fn dual_objective(model: &ArModel, toeplitz: &DMatrix<f64>) -> Result<f64> {
    let stacked = model.stacked();
    let value = objective_value(&stacked, model.dim(), toeplitz);
    if !value.is_finite() {
        return Err(Error::Singular("P_0 is singular in the dual objective".into()));
    }
    Ok(value)
}

/// Stacked constraint values `[D_j(P' P)]_{kh}` for each missing edge
/// `(k, h)` with `k >= h` and each `j = 0..n`. Empty for a complete graph.
pub fn constraint_residuals(model: &ArModel, topology: &LatentTopology) -> Vec<f64> {
    let l = model.dim();
    let n = model.order();
    let stacked = model.stacked();
    let gram = stacked.transpose() * &stacked;
    let d = d_operator(&gram, l, n).expect("gram matrix has Toeplitz-compatible side");
    let mut out = Vec::new();
    for (k, h) in topology.missing_pairs() {
        for dj in &d {
            out.push(dj[(k, h)]);
        }
    }
    out
}

/// Classical block Yule-Walker solve: the complete-graph oracle for the
/// maximum-entropy extension. Returns the innovation-normalized model
/// `P_0 = L^{-1}` (`Sigma_w = L L'`), `P_j = P_0 Abar_j`.
pub fn yule_walker(lags: &CovarianceSequence) -> Result<ArModel> {
    let l = lags.dim();
    let n = lags.order();
    let t = block_toeplitz(lags);
    let min_eig = t
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    if min_eig <= 0.0 {
        return Err(Error::Singular(format!(
            "block-Toeplitz matrix is not positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    // [I, X] T = [Sigma_w, 0] with X = [Abar_1 ... Abar_n].
    let (abar, sigma_w) = if n == 0 {
        (DMatrix::zeros(l, 0), lags.lag(0).clone())
    } else {
        let b = t.view((0, l), (l, l * n)).into_owned();
        let ts = t.view((l, l), (l * n, l * n)).into_owned();
        let chol = ts
            .cholesky()
            .ok_or_else(|| Error::Singular("trailing Toeplitz block not PD".into()))?;
        // X T_s = -B  =>  T_s X' = -B'.
        let xt = chol.solve(&(-b.transpose()));
        let x = xt.transpose();
        let sigma_w = lags.lag(0) + &x * b.transpose();
        (x, sigma_w)
    };
    let sym = (&sigma_w + sigma_w.transpose()) / 2.0;
    let lchol = sym
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance not PD".into()))?;
    let lmat = lchol.l();
    let p0 = lmat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Cholesky factor not invertible".into()))?;
    let mut coeffs = vec![p0.clone()];
    for j in 0..n {
        coeffs.push(&p0 * abar.view((0, j * l), (l, l)).into_owned());
    }
    ArModel::new(coeffs)
}

/// Internal objective over the stacked block; `+inf` when `P_0` is singular
/// so line searches reject the point.
fn objective_value(stacked: &DMatrix<f64>, l: usize, t: &DMatrix<f64>) -> f64 {
    let p0 = stacked.view((0, 0), (l, l)).into_owned();
    let det = p0.lu().determinant();
    if !det.is_finite() || det.abs() < 1e-300 {
        return f64::INFINITY;
    }
    let pt = stacked * t;
    let quad: f64 = pt
        .iter()
        .zip(stacked.iter())
        .map(|(a, b)| a * b)
        .sum();
    -2.0 * det.abs().ln() + quad
}

/// Gradient of the dual objective with respect to the stacked block.
fn objective_gradient(stacked: &DMatrix<f64>, l: usize, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p0 = stacked.view((0, 0), (l, l)).into_owned();
    let p0_inv_t = p0
        .try_inverse()
        .ok_or_else(|| Error::Singular("P_0 singular in gradient".into()))?
        .transpose();
    let mut grad = stacked * t * 2.0;
    for i in 0..l {
        for j in 0..l {
            grad[(i, j)] -= 2.0 * p0_inv_t[(i, j)];
        }
    }
    Ok(grad)
}

/// Hessian of the dual objective with respect to `vec(P)` (column-major).
fn objective_hessian(stacked: &DMatrix<f64>, l: usize, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = stacked.ncols();
    let p0 = stacked.view((0, 0), (l, l)).into_owned();
    let p0_inv = p0
        .try_inverse()
        .ok_or_else(|| Error::Singular("P_0 singular in Hessian".into()))?;
    // S_0 P_0^{-1} with S_0 = [I; 0] stacking the P_0 block.
    let mut s0p = DMatrix::zeros(cols, l);
    s0p.view_mut((0, 0), (l, l)).copy_from(&p0_inv);
    let k = commutation_matrix(cols, l);
    let h = t.kronecker(&DMatrix::identity(l, l)) * 2.0
        + k * s0p.transpose().kronecker(&s0p) * 2.0;
    Ok((&h + h.transpose()) / 2.0)
}

/// One linearized constraint row: index triple and its gradient.
struct ConstraintSet {
    /// `(j, k, h)` triples; for `j >= 1` both orientations of each missing
    /// pair appear so every Fourier coefficient of the off-edge entry is
    /// pinned to zero.
    triples: Vec<(usize, usize, usize)>,
}

impl ConstraintSet {
    fn build(topology: &LatentTopology, order: usize) -> Self {
        let mut triples = Vec::new();
        for (k, h) in topology.missing_pairs() {
            triples.push((0, k, h));
            for j in 1..=order {
                triples.push((j, k, h));
                triples.push((j, h, k));
            }
        }
        Self { triples }
    }

    fn len(&self) -> usize {
        self.triples.len()
    }

    /// Residual vector at the current stacked block.
    fn residuals(&self, stacked: &DMatrix<f64>, l: usize, n: usize) -> DVector<f64> {
        let gram = stacked.transpose() * stacked;
        let d = d_operator(&gram, l, n).expect("compatible side");
        DVector::from_iterator(
            self.triples.len(),
            self.triples.iter().map(|&(j, k, h)| d[j][(k, h)]),
        )
    }

    /// Jacobian of the residuals with respect to `vec(P)`.
    fn jacobian(&self, stacked: &DMatrix<f64>, l: usize, n: usize) -> DMatrix<f64> {
        let cols = stacked.ncols();
        let mut jac = DMatrix::zeros(self.triples.len(), l * cols);
        let idx = |block: usize, row: usize, col: usize| (block * l + col) * l + row;
        for (rid, &(j, k, h)) in self.triples.iter().enumerate() {
            let scale = if j == 0 { 1.0 } else { 2.0 };
            for a in 0..=(n - j) {
                for r in 0..l {
                    // d/dP_a[r, k] of sum_a P_a[., k]' P_{a+j}[., h].
                    jac[(rid, idx(a, r, k))] += scale * stacked[(r, (a + j) * l + h)];
                    jac[(rid, idx(a + j, r, h))] += scale * stacked[(r, a * l + k)];
                }
            }
        }
        jac
    }

    /// Multiplier-weighted curvature of the constraints. Each residual is
    /// quadratic in the parameters, so its Hessian is constant; the sum
    /// enters the KKT system so the iteration keeps its quadratic local
    /// rate.
    fn weighted_hessian(&self, mult: &DVector<f64>, l: usize, n: usize, nvars: usize) -> DMatrix<f64> {
        let idx = |block: usize, row: usize, col: usize| (block * l + col) * l + row;
        let mut h = DMatrix::zeros(nvars, nvars);
        for (rid, &(j, k, hcol)) in self.triples.iter().enumerate() {
            let mu = mult[rid];
            if mu == 0.0 {
                continue;
            }
            let scale = if j == 0 { 1.0 } else { 2.0 };
            for a in 0..=(n - j) {
                for r in 0..l {
                    let u = idx(a, r, k);
                    let v = idx(a + j, r, hcol);
                    h[(u, v)] += scale * mu;
                    h[(v, u)] += scale * mu;
                }
            }
        }
        h
    }
}

/// Solves the graph-constrained dual for the innovation model.
///
/// Starts from the feasible diagonal iterate `P_0 = diag(R_0)^{-1/2}`,
/// `P_j = 0`, and runs sequential constrained Newton with an l1 merit
/// line search. Stops when the squared Newton decrement over two falls
/// below `opts.eps` and the residuals are within `opts.feas_tol`. If the
/// iteration cap is hit, one retry runs from the unconstrained Yule-Walker
/// solution, which sits near the constrained optimum when the constraints
/// are strongly active.
pub fn solve_maxent(
    lags: &CovarianceSequence,
    topology: &LatentTopology,
    opts: &MaxentOptions,
) -> Result<MaxentSolution> {
    match solve_maxent_from(lags, topology, opts, None) {
        Ok(sol) => Ok(sol),
        Err(Error::MaxentNotConverged { .. }) => {
            let warm = yule_walker(lags)?;
            solve_maxent_from(lags, topology, opts, Some(&warm))
        }
        Err(e) => Err(e),
    }
}

fn solve_maxent_from(
    lags: &CovarianceSequence,
    topology: &LatentTopology,
    opts: &MaxentOptions,
    init: Option<&ArModel>,
) -> Result<MaxentSolution> {
    let l = lags.dim();
    if topology.dim() != l {
        return Err(Error::Dim("topology dimension does not match the lags".into()));
    }
    let n = lags.order();
    let t = block_toeplitz(lags);
    let t_min = t
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    if t_min <= 0.0 {
        return Err(Error::Singular(format!(
            "block-Toeplitz matrix must be positive definite (min eigenvalue {t_min:.3e})"
        )));
    }

    let cols = l * (n + 1);
    let nvars = l * cols;
    let mut stacked = DMatrix::zeros(l, cols);
    for i in 0..l {
        let d = lags.lag(0)[(i, i)];
        if d <= 0.0 {
            return Err(Error::Domain("R_0 has a non-positive diagonal entry".into()));
        }
        stacked[(i, i)] = 1.0 / d.sqrt();
    }
    if let Some(model) = init {
        if model.dim() != l || model.order() != n {
            return Err(Error::Dim("maxent warm start has wrong dimensions".into()));
        }
        stacked = model.stacked();
    }

    let constraints = ConstraintSet::build(topology, n);
    let nc = constraints.len();
    let inf_norm = |v: &DVector<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut penalty = 1.0f64;
    let mut objective_trace = vec![objective_value(&stacked, l, &t)];
    let mut decrement_sq_half = f64::INFINITY;
    let mut feasibility;
    let mut iters = 0;

    // Multipliers feed the Lagrangian curvature only at a sane scale; the
    // exact values at the solution are O(1) here.
    const MULT_CLAMP: f64 = 1e3;
    let mut mult_prev = DVector::zeros(nc);
    for iter in 0..opts.max_iter {
        iters = iter + 1;
        let grad = objective_gradient(&stacked, l, &t)?;
        let g = DVector::from_column_slice(grad.as_slice());
        let clamped = mult_prev.map(|v: f64| v.clamp(-MULT_CLAMP, MULT_CLAMP));
        let hess = objective_hessian(&stacked, l, &t)?
            + constraints.weighted_hessian(&clamped, l, n, nvars);
        let c_res = constraints.residuals(&stacked, l, n);
        let c_jac = constraints.jacobian(&stacked, l, n);
        feasibility = inf_norm(&c_res);

        // Row-equilibrate the constraints: high-lag rows can carry tiny
        // gradients (their coefficients shrink with the lag), and the raw
        // KKT system then produces exploding multipliers and zigzag steps.
        let mut row_scale = DVector::from_element(nc, 1.0f64);
        let mut max_row: f64 = 0.0;
        for i in 0..nc {
            max_row = max_row.max(c_jac.row(i).norm());
        }
        let mut c_jac_s = c_jac.clone();
        let mut c_res_s = c_res.clone();
        for i in 0..nc {
            let s = c_jac.row(i).norm().max(1e-6 * max_row).max(1e-12);
            row_scale[i] = s;
            for jv in 0..nvars {
                c_jac_s[(i, jv)] /= s;
            }
            c_res_s[i] /= s;
        }

        // Regularized KKT solve; tau doubles until the system factors and
        // gives a finite step with positive curvature and bounded
        // multipliers.
        let mut tau = 0.0f64;
        let hess_scale = hess.norm();
        let (step, multipliers_s, quad) = loop {
            let mut kkt = DMatrix::zeros(nvars + nc, nvars + nc);
            let mut h_reg = hess.clone();
            for i in 0..nvars {
                h_reg[(i, i)] += tau;
            }
            kkt.view_mut((0, 0), (nvars, nvars)).copy_from(&h_reg);
            if nc > 0 {
                kkt.view_mut((nvars, 0), (nc, nvars)).copy_from(&c_jac_s);
                kkt.view_mut((0, nvars), (nvars, nc))
                    .copy_from(&c_jac_s.transpose());
            }
            let mut rhs = DVector::zeros(nvars + nc);
            rhs.rows_mut(0, nvars).copy_from(&(-&g));
            if nc > 0 {
                rhs.rows_mut(nvars, nc).copy_from(&(-&c_res_s));
            }
            let solved = kkt.lu().solve(&rhs);
            if let Some(sol) = solved {
                let step = sol.rows(0, nvars).into_owned();
                let mult = sol.rows(nvars, nc).into_owned();
                let quad = step.dot(&(&h_reg * &step));
                let finite = step.iter().all(|v| v.is_finite());
                let mult_sane = inf_norm(&mult) <= 1e8 * (1.0 + hess_scale);
                if finite && quad > 0.0 && mult_sane {
                    break (step, mult, quad);
                }
            }
            tau = if tau == 0.0 { 1e-10 } else { tau * 2.0 };
            if tau > 1e8 * (1.0 + hess_scale) {
                return Err(Error::MaxentNotConverged {
                    iters,
                    decrement_sq_half,
                    feasibility,
                    last: Box::new(ArModel::from_stacked(l, &stacked)?),
                });
            }
        };
        // Multipliers in the original scaling.
        let multipliers =
            DVector::from_fn(nc, |i, _| multipliers_s[i] / row_scale[i]);

        decrement_sq_half = quad / 2.0;
        // A heavily damped step and its decrement certify nothing.
        if decrement_sq_half <= opts.eps && feasibility <= opts.feas_tol && tau <= 1e-8 {
            break;
        }
        mult_prev = multipliers;

        // Raise the merit penalty only when the direction fails to descend
        // the merit; transient multiplier spikes must not ratchet it. The
        // merit pairs the equilibrated residuals with the equilibrated
        // multipliers.
        let scaled_viol = |res: &DVector<f64>| -> f64 {
            (0..nc).map(|i| res[i].abs() / row_scale[i]).sum()
        };
        let viol = scaled_viol(&c_res);
        let mut dir_deriv = g.dot(&step) - penalty * viol;
        if dir_deriv >= 0.0 && viol > 0.0 {
            penalty = (opts.penalty_growth * penalty)
                .max(1.5 * inf_norm(&multipliers_s).min(1e6));
            dir_deriv = g.dot(&step) - penalty * viol;
        }

        let merit = |s: &DMatrix<f64>, mu: f64| -> f64 {
            let obj = objective_value(s, l, &t);
            let res = constraints.residuals(s, l, n);
            obj + mu * scaled_viol(&res)
        };
        let step_mat = DMatrix::from_column_slice(l, cols, step.as_slice());
        let mut accepted = false;
        'escalate: for _ in 0..3 {
            let merit_now = merit(&stacked, penalty);
            let mut t_ls = 1.0f64;
            while t_ls >= 1e-16 {
                let cand = &stacked + &step_mat * t_ls;
                let m = merit(&cand, penalty);
                if m.is_finite() && m <= merit_now + 0.25 * t_ls * dir_deriv {
                    stacked = cand;
                    accepted = true;
                    break 'escalate;
                }
                t_ls *= 0.5;
            }
            penalty *= opts.penalty_growth;
            dir_deriv = g.dot(&step) - penalty * viol;
            if dir_deriv >= 0.0 {
                break;
            }
        }
        if std::env::var_os("LRID_MAXENT_DEBUG").is_some() {
            eprintln!(
                "it={iter} obj={:.8} dec2h={:.3e} feas={:.3e} mu={:.3e} tau={:.3e} mult={:.3e} step={:.3e} acc={accepted}",
                objective_value(&stacked, l, &t),
                decrement_sq_half,
                feasibility,
                penalty,
                tau,
                inf_norm(&mult_prev),
                step.norm(),
            );
        }
        if !accepted {
            return Err(Error::MaxentNotConverged {
                iters,
                decrement_sq_half,
                feasibility,
                last: Box::new(ArModel::from_stacked(l, &stacked)?),
            });
        }
        objective_trace.push(objective_value(&stacked, l, &t));

        if iter + 1 == opts.max_iter {
            let final_feas = inf_norm(&constraints.residuals(&stacked, l, n));
            if !(decrement_sq_half <= opts.eps && final_feas <= opts.feas_tol) {
                return Err(Error::MaxentNotConverged {
                    iters,
                    decrement_sq_half,
                    feasibility: final_feas,
                    last: Box::new(ArModel::from_stacked(l, &stacked)?),
                });
            }
        }
    }

    let mut model = ArModel::from_stacked(l, &stacked)?;
    model.normalize_signs();
    let margin = model.min_phase_margin().unwrap_or(f64::NAN);
    let feas = constraint_residuals(&model, topology)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(MaxentSolution {
        diagnostics: MaxentDiagnostics {
            iters,
            objective: dual_objective(&model, &t)?,
            decrement_sq_half,
            feasibility: feas,
            objective_trace,
            min_phase_warning: (margin <= 1e-8).then_some(margin),
            p0_condition: model.p0_condition(),
        },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{ar_spectrum, spectrum_lags, FrequencyGrid};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn scalar_model(coeffs: &[f64]) -> ArModel {
        ArModel::new(coeffs.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect()).unwrap()
    }

    #[test]
    fn dual_objective_identity() {
        let l = 3;
        let model = ArModel::new(vec![DMatrix::identity(l, l)]).unwrap();
        let t = DMatrix::identity(l, l);
        assert_relative_eq!(dual_objective(&model, &t).unwrap(), l as f64, epsilon = 1e-14);
    }

    #[test]
    fn dual_objective_scalar_minimum() {
        let tval: f64 = 2.5;
        let t = DMatrix::from_element(1, 1, tval);
        let opt = scalar_model(&[1.0 / tval.sqrt()]);
        let f_opt = dual_objective(&opt, &t).unwrap();
        for p in [0.4, 0.8, 1.2] {
            let f = dual_objective(&scalar_model(&[p]), &t).unwrap();
            assert!(f >= f_opt - 1e-12);
        }
        // Hand value: -log p^2 + t p^2 at the minimizer p^2 = 1/t.
        assert_relative_eq!(f_opt, tval.ln() + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dual_objective_linear_in_t() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let l = 2;
        let n = 1;
        let stacked = DMatrix::from_fn(l, l * (n + 1), |_, _| rng.random_range(-1.0..1.0))
            + DMatrix::identity(l, l * (n + 1)) * 2.0;
        let model = ArModel::from_stacked(l, &stacked).unwrap();
        let raw = DMatrix::from_fn(l * (n + 1), l * (n + 1), |_, _| rng.random_range(-0.2..0.2));
        let t = &raw + raw.transpose() + DMatrix::identity(l * (n + 1), l * (n + 1)) * 2.0;
        let c = 3.0;
        let f1 = dual_objective(&model, &t).unwrap();
        let f2 = dual_objective(&model, &(&t * c)).unwrap();
        let gram = stacked.transpose() * &stacked;
        let quad = (&t * &gram).trace();
        assert_relative_eq!(f2 - f1, (c - 1.0) * quad, epsilon = 1e-10);
    }

    #[test]
    fn residuals_complete_graph_empty() {
        let model = scalar_model(&[1.0, -0.5]);
        let topo = LatentTopology::complete(1);
        assert!(constraint_residuals(&model, &topo).is_empty());
    }

    #[test]
    fn residuals_block_diagonal_zero() {
        // l = 2, block-diagonal P: the (1,0) cross terms of P'P vanish.
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let p1 = DMatrix::from_row_slice(2, 2, &[-0.4, 0.0, 0.0, 0.3]);
        let model = ArModel::new(vec![p0, p1]).unwrap();
        let topo = LatentTopology::with_edges(2, &[]).unwrap();
        let res = constraint_residuals(&model, &topo);
        assert_eq!(res.len(), 2);
        assert!(res.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn residuals_dense_nonzero() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let p0 = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.2..1.0));
        let p1 = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.2..1.0));
        let model = ArModel::new(vec![p0, p1]).unwrap();
        let topo = LatentTopology::with_edges(2, &[]).unwrap();
        let res = constraint_residuals(&model, &topo);
        assert!(res.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn yule_walker_scalar_ar1() {
        let a = 0.6;
        let lags = CovarianceSequence::new(vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, a),
        ])
        .unwrap();
        let model = yule_walker(&lags).unwrap();
        let s = (1.0 - a * a).sqrt();
        assert_relative_eq!(model.coeff(0)[(0, 0)], 1.0 / s, epsilon = 1e-12);
        assert_relative_eq!(model.coeff(1)[(0, 0)], -a / s, epsilon = 1e-12);
    }

    #[test]
    fn yule_walker_white_noise() {
        let lags = CovarianceSequence::new(vec![
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        ])
        .unwrap();
        let model = yule_walker(&lags).unwrap();
        assert!((model.coeff(0) - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(model.coeff(1).norm() < 1e-12);
        assert!(model.coeff(2).norm() < 1e-12);
    }

    #[test]
    fn yule_walker_recovers_ar2_from_analytic_lags() {
        // Stable scalar AR(2) innovation model.
        let truth = scalar_model(&[1.0, -0.9, 0.4]);
        let grid = FrequencyGrid::uniform(4096);
        let spec = ar_spectrum(&truth, &grid).unwrap();
        let lookup = |theta: f64| {
            let i = grid
                .points()
                .iter()
                .position(|&p| (p - theta).abs() < 1e-12)
                .unwrap();
            spec[i].clone()
        };
        let lags = spectrum_lags(lookup, &grid, 2).unwrap();
        let est = yule_walker(&lags).unwrap();
        let est_spec = ar_spectrum(&est, &grid).unwrap();
        for (a, b) in est_spec.iter().zip(spec.iter()) {
            assert!((a - b).norm() <= 1e-8 * (1.0 + b.norm()));
        }
        // Covariance matching within 1e-6 relative.
        let model_lags = spectrum_lags(
            |theta| {
                let p = est.to_poly().eval_zinv(crate::polymat::Complex64::new(0.0, -theta).exp());
                (p.adjoint() * &p).try_inverse().unwrap()
            },
            &grid,
            2,
        )
        .unwrap();
        for j in 0..=2 {
            assert!((model_lags.lag(j) - lags.lag(j)).norm() <= 1e-6 * (1.0 + lags.lag(j).norm()));
        }
    }

    #[test]
    fn yule_walker_indefinite_errors() {
        let lags = CovarianceSequence::new(vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.5),
        ])
        .unwrap();
        assert!(matches!(yule_walker(&lags), Err(Error::Singular(_))));
    }

    /// Analytic gradient of the dual objective against central differences.
    #[test]
    fn dual_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let l = 2;
        let n = 2;
        let cols = l * (n + 1);
        for _ in 0..20 {
            let raw = DMatrix::from_fn(cols, cols, |_, _| rng.random_range(-0.2..0.2));
            let t = &raw + raw.transpose() + DMatrix::identity(cols, cols) * 2.0;
            let mut stacked = DMatrix::from_fn(l, cols, |_, _| rng.random_range(-0.3..0.3));
            stacked[(0, 0)] += 1.5;
            stacked[(1, 1)] += 1.5;
            let grad = objective_gradient(&stacked, l, &t).unwrap();
            let h = 1e-6;
            for r in 0..l {
                for c in 0..cols {
                    let mut plus = stacked.clone();
                    plus[(r, c)] += h;
                    let mut minus = stacked.clone();
                    minus[(r, c)] -= h;
                    let fd = (objective_value(&plus, l, &t) - objective_value(&minus, l, &t))
                        / (2.0 * h);
                    assert_relative_eq!(grad[(r, c)], fd, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }

    /// Analytic Hessian of the dual objective against differences of the
    /// gradient.
    #[test]
    fn dual_hessian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(33);
        let l = 2;
        let n = 1;
        let cols = l * (n + 1);
        let nvars = l * cols;
        let raw = DMatrix::from_fn(cols, cols, |_, _| rng.random_range(-0.2..0.2));
        let t = &raw + raw.transpose() + DMatrix::identity(cols, cols) * 2.0;
        let mut stacked = DMatrix::from_fn(l, cols, |_, _| rng.random_range(-0.3..0.3));
        stacked[(0, 0)] += 1.5;
        stacked[(1, 1)] += 1.5;
        let hess = objective_hessian(&stacked, l, &t).unwrap();
        let h = 1e-6;
        for v in 0..nvars {
            let (c, r) = (v / l, v % l);
            let mut plus = stacked.clone();
            plus[(r, c)] += h;
            let mut minus = stacked.clone();
            minus[(r, c)] -= h;
            let gp = objective_gradient(&plus, l, &t).unwrap();
            let gm = objective_gradient(&minus, l, &t).unwrap();
            let fd = (gp - gm) / (2.0 * h);
            let fd_vec = DVector::from_column_slice(fd.as_slice());
            let col = hess.column(v).into_owned();
            assert!((col - fd_vec).norm() <= 1e-4 * (1.0 + hess.norm()));
        }
    }

    #[test]
    fn solve_complete_graph_matches_yule_walker() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        // Random PD lags via a random AR(1) model's analytic lags.
        let l = 2;
        let p0 = DMatrix::from_fn(l, l, |i, j| {
            if i == j {
                1.5
            } else {
                rng.random_range(-0.3..0.3)
            }
        });
        let p1 = DMatrix::from_fn(l, l, |_, _| rng.random_range(-0.3..0.3));
        let truth = ArModel::new(vec![p0, p1]).unwrap();
        let grid = FrequencyGrid::uniform(2048);
        let spec = ar_spectrum(&truth, &grid).unwrap();
        let lookup = |theta: f64| {
            let i = grid
                .points()
                .iter()
                .position(|&p| (p - theta).abs() < 1e-12)
                .unwrap();
            spec[i].clone()
        };
        let lags = spectrum_lags(lookup, &grid, 2).unwrap();
        let sol = solve_maxent(&lags, &LatentTopology::complete(l), &MaxentOptions::default())
            .unwrap();
        let yw = yule_walker(&lags).unwrap();
        let s1 = ar_spectrum(&sol.model, &grid).unwrap();
        let s2 = ar_spectrum(&yw, &grid).unwrap();
        let sup: f64 = s1
            .iter()
            .zip(s2.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(sup <= 1e-6, "sup deviation {sup}");
        // Dual objective non-increasing across accepted steps.
        for w in sol.diagnostics.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn solve_sparse_block_diagonal_self_consistent() {
        // Two independent scalar AR(1) processes; missing edge (1,0).
        let grid = FrequencyGrid::uniform(2048);
        let eval = |theta: f64| {
            let mut phi = crate::polymat::CMatrix::zeros(2, 2);
            for (i, a) in [(0usize, 0.7f64), (1usize, -0.4f64)] {
                let den = (crate::polymat::Complex64::new(1.0, 0.0)
                    - crate::polymat::Complex64::new(0.0, -theta).exp() * a)
                    .norm_sqr();
                phi[(i, i)] = crate::polymat::Complex64::new(1.0 / den, 0.0);
            }
            phi
        };
        let lags = spectrum_lags(eval, &grid, 3).unwrap();
        let topo = LatentTopology::with_edges(2, &[]).unwrap();
        let sol = solve_maxent(&lags, &topo, &MaxentOptions::default()).unwrap();
        let res = constraint_residuals(&sol.model, &topo);
        assert!(res.iter().all(|v| v.abs() <= 1e-8));
        // Covariance matching within 1e-6.
        let model_lags = spectrum_lags(
            |theta| {
                let p = sol
                    .model
                    .to_poly()
                    .eval_zinv(crate::polymat::Complex64::new(0.0, -theta).exp());
                (p.adjoint() * &p).try_inverse().unwrap()
            },
            &grid,
            3,
        )
        .unwrap();
        for j in 0..=3 {
            assert!(
                (model_lags.lag(j) - lags.lag(j)).norm() <= 1e-6 * (1.0 + lags.lag(j).norm())
            );
        }
        // Off-edge spectral entries vanish on the grid.
        let spec = ar_spectrum(&sol.model, &grid).unwrap();
        for phi in &spec {
            assert!(phi[(1, 0)].norm() <= 1e-8);
        }
    }

    #[test]
    fn solve_rejects_indefinite_input() {
        let lags = CovarianceSequence::new(vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        ])
        .unwrap();
        let topo = LatentTopology::complete(1);
        assert!(matches!(
            solve_maxent(&lags, &topo, &MaxentOptions::default()),
            Err(Error::Singular(_))
        ));
    }
}
