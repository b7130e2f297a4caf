//! Synthetic low-rank systems and seeded trajectory generation.
//!
//! A system is a sparse matrix of scalar rational shaping filters driving
//! the latent variable, a diagonal/sparse polynomial pair defining the
//! deterministic relation of the measured block, and a noise level. The
//! builtin system reproduces the simulation setup used throughout the tests.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::armax_ml::{PerRowDegrees, ThetaParams};
use crate::error::{Error, Result};
use crate::polymat::{CMatrix, Complex64, MatrixPolynomial};

/// Scalar rational transfer function in the backward shift,
/// `num(z^{-1}) / den(z^{-1})` with `den[0]` normalized to one.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RationalFilter {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl RationalFilter {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if den.is_empty() || den[0] == 0.0 {
            return Err(Error::Domain("denominator must start with a nonzero term".into()));
        }
        let d0 = den[0];
        Ok(Self {
            num: num.iter().map(|c| c / d0).collect(),
            den: den.iter().map(|c| c / d0).collect(),
        })
    }

    /// All-pole filter `1 / den(z^{-1})`.
    pub fn all_pole(den: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], den)
    }

    /// Roots of the denominator in the `z`-plane.
    pub fn poles(&self) -> Result<Vec<Complex64>> {
        MatrixPolynomial::scalar(&self.den)?.det_roots()
    }

    /// Frequency response at `z = e^{i theta}`.
    pub fn response(&self, theta: f64) -> Complex64 {
        let x = Complex64::new(0.0, -theta).exp();
        let eval = |c: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            for &ck in c.iter().rev() {
                acc = acc * x + Complex64::new(ck, 0.0);
            }
            acc
        };
        eval(&self.num) / eval(&self.den)
    }
}

/// Per-entry streaming state of a rational filter.
#[derive(Debug, Clone)]
struct FilterChannel {
    filter: RationalFilter,
    /// Input history, most recent first.
    inputs: Vec<f64>,
    /// Output history of this entry, most recent first.
    outputs: Vec<f64>,
}

impl FilterChannel {
    fn new(filter: RationalFilter) -> Self {
        let ni = filter.num.len();
        let no = filter.den.len().saturating_sub(1);
        Self {
            filter,
            inputs: vec![0.0; ni],
            outputs: vec![0.0; no],
        }
    }

    fn step(&mut self, u: f64) -> f64 {
        self.inputs.rotate_right(1);
        self.inputs[0] = u;
        let mut y = 0.0;
        for (k, &c) in self.filter.num.iter().enumerate() {
            y += c * self.inputs[k];
        }
        for (k, &c) in self.filter.den.iter().enumerate().skip(1) {
            y -= c * self.outputs[k - 1];
        }
        if !self.outputs.is_empty() {
            self.outputs.rotate_right(1);
            self.outputs[0] = y;
        }
        y
    }
}

/// Complete description of a synthetic low-rank system.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    m: usize,
    l: usize,
    /// `l x l` matrix of optional shaping filters for the latent variable.
    w_l: Vec<Vec<Option<RationalFilter>>>,
    theta: ThetaParams,
    sigma: f64,
}

impl SystemSpec {
    /// Validates stability of the shaping filters and of the relation's AR
    /// part before accepting the system.
    pub fn new(
        w_l: Vec<Vec<Option<RationalFilter>>>,
        theta: ThetaParams,
        sigma: f64,
    ) -> Result<Self> {
        let (m, l, _, _) = theta.dims();
        if w_l.len() != l || w_l.iter().any(|row| row.len() != l) {
            return Err(Error::Dim("shaping filter matrix must be l x l".into()));
        }
        if sigma < 0.0 {
            return Err(Error::Domain("sigma must be >= 0".into()));
        }
        for (i, row) in w_l.iter().enumerate() {
            for (j, entry) in row.iter().enumerate() {
                if let Some(f) = entry {
                    for p in f.poles()? {
                        if p.norm() >= 1.0 {
                            return Err(Error::Domain(format!(
                                "shaping filter ({},{}) has an unstable pole at |z| = {}",
                                i + 1,
                                j + 1,
                                p.norm()
                            )));
                        }
                    }
                }
            }
        }
        let a_roots = theta.a_poly().det_roots()?;
        if let Some(bad) = a_roots.iter().find(|r| r.norm() >= 1.0) {
            return Err(Error::Domain(format!(
                "relation denominator has an unstable root at |z| = {}",
                bad.norm()
            )));
        }
        Ok(Self { m, l, w_l, theta, sigma })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    /// True parameters of the deterministic relation.
    pub fn theta_true(&self) -> &ThetaParams {
        &self.theta
    }

    pub fn b_mask(&self) -> &DMatrix<bool> {
        self.theta.b_mask()
    }

    pub fn per_row_degrees(&self) -> Option<&PerRowDegrees> {
        self.theta.per_row()
    }

    /// Spectrum of the latent variable, `W_l(theta) W_l(theta)^*`.
    pub fn latent_spectrum(&self, theta: f64) -> CMatrix {
        let mut w = CMatrix::zeros(self.l, self.l);
        for (i, row) in self.w_l.iter().enumerate() {
            for (j, entry) in row.iter().enumerate() {
                if let Some(f) = entry {
                    w[(i, j)] = f.response(theta);
                }
            }
        }
        &w * w.adjoint()
    }

    /// The relation `H(e^{i theta}) = A^{-1} B` at a frequency point.
    pub fn h_eval(&self, theta: f64) -> Result<CMatrix> {
        let x = Complex64::new(0.0, -theta).exp();
        let a = self.theta.a_poly().eval_zinv(x);
        let b = self.theta.b_poly().eval_zinv(x);
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("A singular at theta = {theta}")))?;
        Ok(a_inv * b)
    }
}

/// One simulated record: the latent block, the measured block, their stack,
/// the noisy measurements, and the noise draws.
#[derive(Debug, Clone)]
pub struct SimRecord {
    pub y_l: DMatrix<f64>,
    pub y_m: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub zeta: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Simulates `burn_in + n` steps from zero state with a counter-based seeded
/// generator, keeping the last `n`. Identical `(seed, n, burn_in)` give
/// byte-identical output.
pub fn simulate(system: &SystemSpec, n: usize, seed: u64, burn_in: usize) -> Result<SimRecord> {
    if n == 0 {
        return Err(Error::Dim("need at least one sample".into()));
    }
    let (m, l) = (system.m, system.l);
    let total = burn_in + n;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);

    let mut channels: Vec<Vec<Option<FilterChannel>>> = system
        .w_l
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| e.clone().map(FilterChannel::new))
                .collect()
        })
        .collect();

    let (_, _, q, r) = system.theta.dims();
    let mut y_l = DMatrix::zeros(n, l);
    let mut y_m = DMatrix::zeros(n, m);
    let mut e = DMatrix::zeros(n, m + l);
    // Ring buffers over the whole run (orders are tiny).
    let mut yl_hist: Vec<DVector<f64>> = Vec::with_capacity(total);
    let mut ym_hist: Vec<DVector<f64>> = Vec::with_capacity(total);

    for t in 0..total {
        // Draw order per step: latent innovations, then measurement noise.
        let w: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise: Vec<f64> = (0..m + l).map(|_| StandardNormal.sample(&mut rng)).collect();

        let mut yl_t = DVector::zeros(l);
        for i in 0..l {
            for j in 0..l {
                if let Some(ch) = channels[i][j].as_mut() {
                    yl_t[i] += ch.step(w[j]);
                }
            }
        }

        let mut ym_t = DVector::zeros(m);
        for k in 1..=q.min(t) {
            let a = system.theta.a_lag(k);
            let past = &ym_hist[t - k];
            for i in 0..m {
                ym_t[i] -= a[(i, i)] * past[i];
            }
        }
        for k in 0..=r.min(t) {
            let b = system.theta.b_lag(k);
            let past = if k == 0 { &yl_t } else { &yl_hist[t - k] };
            for i in 0..m {
                for h in 0..l {
                    ym_t[i] += b[(i, h)] * past[h];
                }
            }
        }

        if t >= burn_in {
            let row = t - burn_in;
            for i in 0..l {
                y_l[(row, i)] = yl_t[i];
            }
            for i in 0..m {
                y_m[(row, i)] = ym_t[i];
            }
            for i in 0..m + l {
                e[(row, i)] = noise[i];
            }
        }
        yl_hist.push(yl_t);
        ym_hist.push(ym_t);
    }

    let mut y = DMatrix::zeros(n, m + l);
    y.view_mut((0, 0), (n, m)).copy_from(&y_m);
    y.view_mut((0, m), (n, l)).copy_from(&y_l);
    let zeta = &y + &e * system.sigma;
    Ok(SimRecord { y_l, y_m, y, zeta, e })
}

/// The four-output, three-latent benchmark system with mixed first- and
/// second-order rows and a sparse relation graph.
pub fn example1_system() -> SystemSpec {
    let f = |num: &[f64], den: &[f64]| RationalFilter::new(num.to_vec(), den.to_vec()).unwrap();
    // Shaping filters in z^{-1} form (numerators are pure delays of the
    // printed z-powers).
    let w_l: Vec<Vec<Option<RationalFilter>>> = vec![
        vec![
            Some(f(&[1.0], &[1.0, -0.8, -0.25, 0.2])),
            None,
            None,
        ],
        vec![
            Some(f(&[0.0, 1.0], &[1.0, 0.0, -0.25])),
            Some(f(&[1.0], &[1.0, 0.3, -0.1])),
            None,
        ],
        vec![None, None, Some(f(&[1.0], &[1.0, 0.0, -0.64]))],
    ];

    let m = 4;
    let l = 3;
    let a1 = DMatrix::from_diagonal(&DVector::from_column_slice(&[-0.9, 0.0, -0.1, 0.2]));
    let a2 = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, -0.64, -0.42, -0.48]));
    let b0 = DMatrix::from_row_slice(
        m,
        l,
        &[0.5, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -2.0],
    );
    let b1 = DMatrix::from_row_slice(
        m,
        l,
        &[0.15, 0.0, 0.0, 0.3, -0.3, 0.0, 0.0, -0.5, 1.0, -1.1, -0.1, -2.0],
    );
    let b2 = DMatrix::from_row_slice(
        m,
        l,
        &[0.0, 0.0, 0.0, -0.4, -0.4, 0.0, 0.0, -0.14, 0.24, 0.3, -0.3, -0.32],
    );
    let mut mask = DMatrix::from_element(m, l, true);
    for (i, j) in [(0usize, 1usize), (0, 2), (1, 2), (2, 0)] {
        mask[(i, j)] = false;
    }
    let theta = ThetaParams::new(
        vec![a1, a2],
        vec![b0, b1, b2],
        mask,
        Some(PerRowDegrees {
            q: vec![1, 2, 2, 2],
            r: vec![1, 2, 2, 2],
        }),
    )
    .expect("builtin parameters are structurally valid");
    SystemSpec::new(w_l, theta, 0.1).expect("builtin system is stable")
}

/// Off-diagonal latent edges of the builtin system (zero-based): only the
/// (2,1) pair is dependent.
pub fn example1_latent_edges() -> Vec<(usize, usize)> {
    vec![(1, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armax_ml::check_identifiability;
    use crate::spectral::empirical_cov_lags;
    use approx::assert_relative_eq;

    #[test]
    fn example1_dimensions() {
        let sys = example1_system();
        assert_eq!(sys.m() + sys.l(), 7);
        assert_eq!(sys.l(), 3);
        assert_relative_eq!(sys.sigma(), 0.1);
    }

    #[test]
    fn example1_poles_match_hand_factorization() {
        // z^3 - 0.8 z^2 - 0.25 z + 0.2 = (z - 0.8)(z - 0.5)(z + 0.5).
        let sys = example1_system();
        let p11 = sys.w_l[0][0].as_ref().unwrap().poles().unwrap();
        let mut mods: Vec<f64> = p11.iter().map(|p| p.re).collect();
        mods.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(mods[0], -0.5, epsilon = 1e-10);
        assert_relative_eq!(mods[1], 0.5, epsilon = 1e-10);
        assert_relative_eq!(mods[2], 0.8, epsilon = 1e-10);
        // z^2 + 0.3 z - 0.1 = (z + 0.5)(z - 0.2).
        let p22 = sys.w_l[1][1].as_ref().unwrap().poles().unwrap();
        let mut re22: Vec<f64> = p22.iter().map(|p| p.re).collect();
        re22.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(re22[0], -0.5, epsilon = 1e-10);
        assert_relative_eq!(re22[1], 0.2, epsilon = 1e-10);
        // All poles strictly inside the unit circle.
        for row in &sys.w_l {
            for entry in row.iter().flatten() {
                assert!(entry.poles().unwrap().iter().all(|p| p.norm() < 1.0));
            }
        }
    }

    #[test]
    fn example1_identifiable_per_row() {
        let sys = example1_system();
        let v = check_identifiability(
            &sys.theta_true().a_poly(),
            &sys.theta_true().b_poly(),
            true,
        )
        .unwrap();
        assert!(v.identifiable, "{}", v.certificate);
    }

    #[test]
    fn simulate_zero_sigma_means_exact_measurements() {
        let sys = example1_system().with_sigma(0.0);
        let rec = simulate(&sys, 100, 7, 50).unwrap();
        assert_eq!((rec.zeta.clone() - &rec.y).norm(), 0.0);
    }

    #[test]
    fn simulate_is_deterministic() {
        let sys = example1_system();
        let a = simulate(&sys, 64, 123, 10).unwrap();
        let b = simulate(&sys, 64, 123, 10).unwrap();
        assert_eq!(a.zeta, b.zeta);
        assert_eq!(a.y_l, b.y_l);
        let c = simulate(&sys, 64, 124, 10).unwrap();
        assert!((a.zeta - c.zeta).norm() > 0.0);
    }

    #[test]
    fn simulate_orders_latent_block_last() {
        let sys = example1_system();
        let rec = simulate(&sys, 32, 5, 0).unwrap();
        let m = sys.m();
        for t in 0..32 {
            for i in 0..sys.l() {
                assert_eq!(rec.y[(t, m + i)], rec.y_l[(t, i)]);
            }
        }
    }

    #[test]
    fn simulate_noise_and_latent_statistics() {
        let sys = example1_system();
        let n = 100_000;
        let rec = simulate(&sys, n, 99, 200).unwrap();
        // Raw noise draws are unit white.
        let e_lags = empirical_cov_lags(&rec.e, 0).unwrap();
        let id = DMatrix::<f64>::identity(7, 7);
        assert!((e_lags.lag(0) - id).norm() < 0.05);
        // Latent covariance matches the spectrum's quadrature lags.
        let grid = crate::spectral::FrequencyGrid::uniform(2048);
        let truth =
            crate::spectral::spectrum_lags(|th| sys.latent_spectrum(th), &grid, 0).unwrap();
        let emp = empirical_cov_lags(&rec.y_l, 0).unwrap();
        let rel = (truth.lag(0) - emp.lag(0)).norm() / truth.lag(0).norm();
        assert!(rel < 0.05, "relative deviation {rel}");
    }

    /// The stacked noise-free process has spectral rank 3: the trailing
    /// singular-value cluster of a windowed correlogram shrinks as the
    /// record (and with it the window) grows.
    #[test]
    fn simulate_rank_deficiency_signature() {
        let sys = example1_system().with_sigma(0.0);
        let mut tail_prev = f64::INFINITY;
        for (n, window) in [(2_000usize, 12usize), (50_000, 60)] {
            let rec = simulate(&sys, n, 11, 200).unwrap();
            // Bartlett-tapered correlogram at theta = 0.
            let lags = empirical_cov_lags(&rec.y, window).unwrap();
            let mut phi = lags.lag(0).clone();
            for j in 1..=window {
                let w = 1.0 - j as f64 / (window + 1) as f64;
                phi += (lags.lag(j) + lags.lag(j).transpose()) * w;
            }
            let sv = phi.svd(false, false).singular_values;
            let mut s: Vec<f64> = sv.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // Rank-3 spectrum: the 4 trailing singular values are the
            // estimation floor.
            let tail: f64 = s[3..].iter().sum();
            let head: f64 = s[..3].iter().sum();
            let ratio = tail / head;
            assert!(ratio < tail_prev);
            tail_prev = ratio;
        }
        assert!(tail_prev < 0.05, "tail ratio {tail_prev}");
    }

    #[test]
    fn reconstruction_matches_simulator_without_burnin() {
        let sys = example1_system();
        let rec = simulate(&sys, 200, 3, 0).unwrap();
        let rebuilt = crate::armax_ml::reconstruct_ym(sys.theta_true(), &rec.y_l).unwrap();
        assert!((rebuilt - &rec.y_m).norm() <= 1e-10);
    }

    #[test]
    fn unstable_filter_rejected() {
        let bad = RationalFilter::all_pole(vec![1.0, -1.1]).unwrap();
        let theta = ThetaParams::ones(1, 1, 0, 0, DMatrix::from_element(1, 1, true), None).unwrap();
        let err = SystemSpec::new(vec![vec![Some(bad)]], theta, 0.1);
        assert!(err.is_err());
    }
}
