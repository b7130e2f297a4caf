//! Recovery of the latent time series from its noisy measurements.
//!
//! Two one-pass filters share the AR recursion: the compensated filter feeds
//! a noise-weighted correction of the measurement back into the recursion,
//! while the naive filter runs the bare recursion and therefore decays once
//! its data initialization washes out.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::maxent::ArModel;

/// Streaming state of the latent filter: the model, the noise level, and the
/// ring of the last `n` estimates.
#[derive(Debug, Clone)]
pub struct FilterState {
    model: ArModel,
    p0_inv: DMatrix<f64>,
    /// Weight of the measurement correction, `1 / (1 + sigma^{2l} det(P_0' P_0))`.
    gain: f64,
    /// Most recent estimate first.
    history: VecDeque<DVector<f64>>,
    steps: usize,
}

impl FilterState {
    /// Builds the filter; `compensated` selects the measurement-corrected
    /// recursion (`gain` = 0 reproduces the naive one).
    pub fn new(model: &ArModel, sigma: f64, compensated: bool) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::Domain("sigma must be >= 0".into()));
        }
        let l = model.dim();
        let p0 = model.coeff(0).clone();
        let det = p0.clone().lu().determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::Singular("P_0 must be invertible".into()));
        }
        let p0_inv = p0
            .try_inverse()
            .ok_or_else(|| Error::Singular("P_0 must be invertible".into()))?;
        let gain = if compensated {
            1.0 / (1.0 + sigma.powi(2 * l as i32) * det * det)
        } else {
            0.0
        };
        Ok(Self {
            model: model.clone(),
            p0_inv,
            gain,
            history: VecDeque::with_capacity(model.order()),
            steps: 0,
        })
    }

    /// Advances one step on a new noisy measurement of the latent variable.
    pub fn step(&mut self, zeta_l: &DVector<f64>) -> DVector<f64> {
        let n = self.model.order();
        self.steps += 1;
        let estimate = if self.steps <= n {
            // Data initialization for the first n steps.
            zeta_l.clone()
        } else {
            // ar = P_0^{-1} sum_j P_j yhat(t-j).
            let l = self.model.dim();
            let mut acc = DVector::zeros(l);
            for (j, past) in self.history.iter().enumerate() {
                acc += self.model.coeff(j + 1) * past;
            }
            let ar = &self.p0_inv * acc;
            let correction = (zeta_l + &ar) * self.gain;
            correction - ar
        };
        if n > 0 {
            if self.history.len() == n {
                self.history.pop_back();
            }
            self.history.push_front(estimate.clone());
        }
        estimate
    }
}

fn run_filter(
    model: &ArModel,
    zeta_l: &DMatrix<f64>,
    sigma: f64,
    compensated: bool,
) -> Result<DMatrix<f64>> {
    let n = zeta_l.nrows();
    let l = model.dim();
    if zeta_l.ncols() != l {
        return Err(Error::Dim(format!(
            "series has {} channels, model expects {l}",
            zeta_l.ncols()
        )));
    }
    if n <= model.order() {
        return Err(Error::Dim(format!(
            "series of length {n} too short for order {}",
            model.order()
        )));
    }
    let mut state = FilterState::new(model, sigma, compensated)?;
    let mut out = DMatrix::zeros(n, l);
    for t in 0..n {
        let z = DVector::from_fn(l, |i, _| zeta_l[(t, i)]);
        let est = state.step(&z);
        for i in 0..l {
            out[(t, i)] = est[i];
        }
    }
    Ok(out)
}

/// Compensated recursion: after the data initialization,
/// `yhat(t) = -P_0^{-1} sum_j P_j yhat(t-j) + w_c(t)` with
/// `w_c(t) = (zeta_l(t) + P_0^{-1} sum_j P_j yhat(t-j)) /
/// (1 + sigma^{2l} det(P_0' P_0))`.
pub fn filter_compensated(
    model: &ArModel,
    zeta_l: &DMatrix<f64>,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    run_filter(model, zeta_l, sigma, true)
}

/// Bare recursion `yhat(t) = -P_0^{-1} sum_j P_j yhat(t-j)`, initialized
/// from the first `n` measurements. With no data feedback the output of a
/// stable model decays toward zero.
pub fn filter_naive(model: &ArModel, zeta_l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    run_filter(model, zeta_l, 0.0, false)
}
