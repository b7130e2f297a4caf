//! Run configuration: JSON-backed description of the system, the estimation
//! settings, and the experiment layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::armax_ml::{MlOptions, PerRowDegrees, ThetaParams};
use crate::error::{Error, Result};
use crate::maxent::{LatentTopology, MaxentOptions};
use crate::polymat::MatrixPolynomial;
use crate::simgen::{example1_latent_edges, example1_system, RationalFilter, SystemSpec};

/// Polynomial-matrix file schema: `rows`, `cols`, `degree`, and `coeffs` as
/// a list of `degree + 1` row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyMatSchema {
    pub rows: usize,
    pub cols: usize,
    pub degree: usize,
    pub coeffs: Vec<Vec<Vec<f64>>>,
}

impl PolyMatSchema {
    pub fn to_poly(&self) -> Result<MatrixPolynomial> {
        if self.coeffs.len() != self.degree + 1 {
            return Err(Error::Config(format!(
                "expected {} coefficient matrices, found {}",
                self.degree + 1,
                self.coeffs.len()
            )));
        }
        let mut mats = Vec::with_capacity(self.coeffs.len());
        for (k, c) in self.coeffs.iter().enumerate() {
            if c.len() != self.rows || c.iter().any(|row| row.len() != self.cols) {
                return Err(Error::Config(format!("coefficient {k} has wrong shape")));
            }
            let flat: Vec<f64> = c.iter().flatten().copied().collect();
            mats.push(DMatrix::from_row_slice(self.rows, self.cols, &flat));
        }
        MatrixPolynomial::new(mats)
    }

    pub fn from_poly(p: &MatrixPolynomial) -> Self {
        Self {
            rows: p.rows(),
            cols: p.cols(),
            degree: p.degree(),
            coeffs: p
                .coeffs()
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

/// Inline system description for configs that do not use a builtin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpecConfig {
    /// `l x l` matrix of shaping filters; `null` entries are zero.
    pub w_l: Vec<Vec<Option<RationalFilter>>>,
    /// Full relation denominator including the identity leading coefficient.
    pub a: PolyMatSchema,
    pub b: PolyMatSchema,
    #[serde(default)]
    pub b_mask: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub per_row_q: Option<Vec<usize>>,
    #[serde(default)]
    pub per_row_r: Option<Vec<usize>>,
    pub sigma: f64,
}

impl SystemSpecConfig {
    pub fn build(&self) -> Result<SystemSpec> {
        let a = self.a.to_poly()?;
        let b = self.b.to_poly()?;
        let m = a.rows();
        let l = b.cols();
        if a.cols() != m || b.rows() != m {
            return Err(Error::Config("relation polynomials have inconsistent shapes".into()));
        }
        let id = DMatrix::<f64>::identity(m, m);
        if (a.coeff(0) - &id).norm() > 1e-12 {
            return Err(Error::Config("A_0 must be the identity".into()));
        }
        let b_mask = match &self.b_mask {
            Some(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != l) {
                    return Err(Error::Config("b_mask has wrong shape".into()));
                }
                DMatrix::from_fn(m, l, |i, j| rows[i][j])
            }
            None => {
                // Mask inferred from the nonzero pattern of B.
                DMatrix::from_fn(m, l, |i, j| {
                    b.coeffs().iter().any(|c| c[(i, j)].abs() > 0.0)
                })
            }
        };
        let per_row = match (&self.per_row_q, &self.per_row_r) {
            (None, None) => None,
            (Some(qv), Some(rv)) => Some(PerRowDegrees {
                q: qv.clone(),
                r: rv.clone(),
            }),
            _ => {
                return Err(Error::Config(
                    "per_row_q and per_row_r must be given together".into(),
                ))
            }
        };
        let a_lags = (1..=a.degree()).map(|k| a.coeff(k).clone()).collect();
        let b_lags = b.coeffs().to_vec();
        let theta = ThetaParams::new(a_lags, b_lags, b_mask, per_row)?;
        SystemSpec::new(self.w_l.clone(), theta, self.sigma)
    }
}

/// System selector: a builtin name or an inline description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemConfig {
    Builtin(String),
    Inline(Box<SystemSpecConfig>),
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Builtin("example1".into())
    }
}

/// Declared polynomial degrees, optionally refined per output row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegreesConfig {
    pub q: usize,
    pub r: usize,
    #[serde(default)]
    pub per_row_q: Option<Vec<usize>>,
    #[serde(default)]
    pub per_row_r: Option<Vec<usize>>,
}

/// Monte-Carlo layout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            base_seed: 7_654_321,
        }
    }
}

/// Sensitivity-sweep layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub n_list: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.01, 0.1, 0.2, 0.5, 0.9],
            n_list: vec![250, 500, 1000],
        }
    }
}

fn default_n() -> usize {
    1000
}

fn default_ar_order() -> usize {
    5
}

fn default_burn_in() -> usize {
    500
}

fn default_grid_points() -> usize {
    2048
}

fn default_noise_floor() -> f64 {
    1e-6
}

/// Full experiment configuration; every field has a sensible default so a
/// minimal config file can be `{}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemConfig,
    /// Sample count of each simulated record.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Measurement-noise standard deviation; defaults to the system's.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// AR order of the latent innovation model.
    #[serde(default = "default_ar_order")]
    pub ar_order: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Relation degrees; default follows the system description.
    #[serde(default)]
    pub degrees: Option<DegreesConfig>,
    /// Off-diagonal latent edges, 1-indexed pairs; self loops are implicit.
    #[serde(default)]
    pub latent_edges: Option<Vec<(usize, usize)>>,
    /// Relation edge mask; default follows the system description.
    #[serde(default)]
    pub b_mask: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub maxent: MaxentOptions,
    #[serde(default)]
    pub ml: MlOptions,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Grid size for the spectral error metric.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Positive-definiteness floor used by the noise compensation.
    #[serde(default = "default_noise_floor")]
    pub noise_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Configuration resolved against the system description.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub system: SystemSpec,
    pub sigma: f64,
    pub topology: LatentTopology,
    pub template: ThetaParams,
    pub q: usize,
    pub r: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the system and the estimation structure this config implies.
    pub fn resolve(&self) -> Result<Resolved> {
        let system = match &self.system {
            SystemConfig::Builtin(name) => match name.as_str() {
                "example1" => example1_system(),
                other => {
                    return Err(Error::Config(format!("unknown builtin system `{other}`")))
                }
            },
            SystemConfig::Inline(spec) => spec.build()?,
        };
        let sigma = self.sigma.unwrap_or(system.sigma());
        if sigma < 0.0 {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        let system = system.with_sigma(sigma);
        let l = system.l();
        let m = system.m();

        let topology = match &self.latent_edges {
            Some(pairs) => {
                let zero_based: Vec<(usize, usize)> = pairs
                    .iter()
                    .map(|&(a, b)| {
                        if a == 0 || b == 0 || a > l || b > l {
                            Err(Error::Config(format!(
                                "latent edge ({a},{b}) out of 1..={l}"
                            )))
                        } else {
                            Ok((a - 1, b - 1))
                        }
                    })
                    .collect::<Result<_>>()?;
                LatentTopology::with_edges(l, &zero_based)?
            }
            None => match &self.system {
                SystemConfig::Builtin(_) => {
                    LatentTopology::with_edges(l, &example1_latent_edges())?
                }
                SystemConfig::Inline(_) => LatentTopology::complete(l),
            },
        };

        let truth = system.theta_true();
        let (_, _, q_true, r_true) = truth.dims();
        let (q, r, per_row) = match &self.degrees {
            Some(d) => {
                let per_row = match (&d.per_row_q, &d.per_row_r) {
                    (None, None) => None,
                    (Some(qv), Some(rv)) => Some(PerRowDegrees {
                        q: qv.clone(),
                        r: rv.clone(),
                    }),
                    _ => {
                        return Err(Error::Config(
                            "per_row_q and per_row_r must be given together".into(),
                        ))
                    }
                };
                (d.q, d.r, per_row)
            }
            None => (q_true, r_true, truth.per_row().cloned()),
        };
        let b_mask = match &self.b_mask {
            Some(rows) => {
                if rows.len() != m || rows.iter().any(|row| row.len() != l) {
                    return Err(Error::Config("b_mask has wrong shape".into()));
                }
                DMatrix::from_fn(m, l, |i, j| rows[i][j])
            }
            None => truth.b_mask().clone(),
        };
        if self.maxent.eps <= 0.0
            || self.maxent.feas_tol <= 0.0
            || self.ml.eps <= 0.0
            || self.noise_floor <= 0.0
        {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.mc.trials == 0 {
            return Err(Error::Config("mc.trials must be at least 1".into()));
        }
        let template = ThetaParams::ones(m, l, q, r, b_mask, per_row)?;
        Ok(Resolved {
            system,
            sigma,
            topology,
            template,
            q,
            r,
        })
    }

    /// Truth parameters padded to the configured degrees, for the fit metric.
    pub fn padded_truth(&self, resolved: &Resolved) -> Result<ThetaParams> {
        let truth = resolved.system.theta_true();
        let (m, l, q_true, r_true) = truth.dims();
        if q_true > resolved.q || r_true > resolved.r {
            return Err(Error::Config(
                "configured degrees are below the system's true degrees".into(),
            ));
        }
        let mut mat = DMatrix::zeros(m, resolved.template.width());
        let tm = truth.to_matrix();
        for k in 0..q_true {
            for i in 0..m {
                for j in 0..m {
                    mat[(i, k * m + j)] = tm[(i, k * m + j)];
                }
            }
        }
        for k in 0..=r_true {
            for i in 0..m {
                for j in 0..l {
                    mat[(i, m * resolved.q + k * l + j)] = tm[(i, m * q_true + k * l + j)];
                }
            }
        }
        resolved.template.with_matrix(&mat)
    }
}

/// Parses a sigma list: either comma-separated values or the log-spaced
/// shorthand `a:b:log:k`.
pub fn parse_sigma_list(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 4 && parts[2] == "log" {
        let a: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad sigma bound `{}`", parts[0])))?;
        let b: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad sigma bound `{}`", parts[1])))?;
        let k: usize = parts[3]
            .parse()
            .map_err(|_| Error::Config(format!("bad sigma count `{}`", parts[3])))?;
        if a <= 0.0 || b <= a || k < 2 {
            return Err(Error::Config("log spacing needs 0 < a < b and k >= 2".into()));
        }
        let (la, lb) = (a.ln(), b.ln());
        return Ok((0..k)
            .map(|i| (la + (lb - la) * i as f64 / (k - 1) as f64).exp())
            .collect());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sigma value `{s}`")))
        })
        .collect()
}

/// Parses a comma-separated list of record lengths.
pub fn parse_n_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad N value `{s}`")))
        })
        .collect()
}
