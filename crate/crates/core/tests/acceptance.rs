//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers once its assertions hold.
//!
//! Run with `cargo test -p lrid --test acceptance -- --nocapture` to see the
//! lines for passing criteria as well.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;

use lrid::armax_ml::{
    build_regressors, check_identifiability, cost_j, gradient_j, hessian_j, solve_ml, MlOptions,
    ThetaParams,
};
use lrid::harness::{run_mc, run_single, RunConfig};
use lrid::latent_filter::filter_compensated;
use lrid::maxent::{solve_maxent, yule_walker, ArModel, LatentTopology, MaxentOptions};
use lrid::polymat::MatrixPolynomial;
use lrid::simgen::{example1_system, simulate, RationalFilter, SystemSpec};
use lrid::spectral::{ar_spectrum, dpl_diagnostic, spectrum_lags, FrequencyGrid};

fn full_mask(m: usize, l: usize) -> DMatrix<bool> {
    DMatrix::from_element(m, l, true)
}

/// Criterion 1: analytic gradient within 1e-6 of central finite
/// differences and symmetrized Hessian within 1e-4 of differenced
/// gradients, at 20 random feasible points of an (m=2, l=1, q=1, r=1,
/// N=50) instance, in under ten seconds.
#[test]
fn criterion_1_derivative_correctness() {
    let start = std::time::Instant::now();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(20_240_001);
    let (m, l, q, r, n) = (2usize, 1usize, 1usize, 1usize, 50usize);
    let template = ThetaParams::ones(m, l, q, r, full_mask(m, l), None).unwrap();
    let free = template.free_coords();
    let p = template.width();
    let mut worst_grad = 0.0f64;
    let mut worst_hess = 0.0f64;

    for point in 0..20 {
        let sigma = if point % 2 == 0 { 0.5 } else { 1.3 };
        let zeta = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
        let regs = build_regressors(&zeta, &y, q, r).unwrap();
        let mut base = DMatrix::zeros(m, p);
        for &(i, j) in &free {
            base[(i, j)] = rng.random_range(-0.8..0.8);
        }
        let theta = template.with_matrix(&base).unwrap();

        // Gradient against central differences of the criterion.
        let grad = gradient_j(&theta, &regs, sigma).unwrap();
        let mut grad_free = Vec::new();
        let mut fd_free = Vec::new();
        for &(i, j) in &free {
            let h = 5e-6 * (1.0 + base[(i, j)].abs());
            let mut plus = base.clone();
            plus[(i, j)] += h;
            let mut minus = base.clone();
            minus[(i, j)] -= h;
            let jp = cost_j(&template.with_matrix(&plus).unwrap(), &regs, sigma).unwrap();
            let jm = cost_j(&template.with_matrix(&minus).unwrap(), &regs, sigma).unwrap();
            grad_free.push(grad[(i, j)]);
            fd_free.push((jp - jm) / (2.0 * h));
        }
        let diff: f64 = grad_free
            .iter()
            .zip(&fd_free)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd_free.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / scale.max(1e-12);
        worst_grad = worst_grad.max(rel);
        assert!(rel <= 1e-6, "gradient mismatch {rel:.3e} at point {point}");

        // Hessian against central differences of the gradient, on the free
        // block.
        let hess = hessian_j(&theta, &regs, sigma).unwrap();
        let vec_idx: Vec<usize> = free.iter().map(|&(i, j)| j * m + i).collect();
        let nf = vec_idx.len();
        let mut h_free = DMatrix::zeros(nf, nf);
        for (a, &va) in vec_idx.iter().enumerate() {
            for (b, &vb) in vec_idx.iter().enumerate() {
                h_free[(a, b)] = hess[(va, vb)];
            }
        }
        let mut fd_hess = DMatrix::zeros(nf, nf);
        for (col, &(i, j)) in free.iter().enumerate() {
            let h = 5e-6 * (1.0 + base[(i, j)].abs());
            let mut plus = base.clone();
            plus[(i, j)] += h;
            let mut minus = base.clone();
            minus[(i, j)] -= h;
            let gp = gradient_j(&template.with_matrix(&plus).unwrap(), &regs, sigma).unwrap();
            let gm = gradient_j(&template.with_matrix(&minus).unwrap(), &regs, sigma).unwrap();
            for (row, &(ri, rj)) in free.iter().enumerate() {
                fd_hess[(row, col)] = (gp[(ri, rj)] - gm[(ri, rj)]) / (2.0 * h);
            }
        }
        let fd_sym = (&fd_hess + fd_hess.transpose()) / 2.0;
        let rel_h = (h_free - &fd_sym).norm() / fd_sym.norm().max(1e-12);
        worst_hess = worst_hess.max(rel_h);
        assert!(rel_h <= 1e-4, "hessian mismatch {rel_h:.3e} at point {point}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "acceptance criterion 1 (derivative correctness): PASS \
         (worst gradient rel {worst_grad:.2e} <= 1e-6, worst hessian rel {worst_hess:.2e} <= 1e-4, {elapsed:?})"
    );
}

/// Criterion 2: the graph-constrained solver with a complete graph matches
/// the Yule-Walker spectrum within 1e-6 sup-norm on 512 grid points for
/// five random positive-definite lag sets, with covariance matching within
/// 1e-5 relative, in under thirty seconds.
#[test]
fn criterion_2_maxent_oracle() {
    let start = std::time::Instant::now();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(20_240_002);
    let grid = FrequencyGrid::uniform(512);
    let fine = FrequencyGrid::uniform(4096);
    let mut worst_sup = 0.0f64;
    let mut worst_match = 0.0f64;

    for (case, &(l, n)) in [(1usize, 3usize), (2, 5), (3, 4), (2, 2), (3, 5)]
        .iter()
        .enumerate()
    {
        // Diagonally dominant stacked coefficients keep P(e^{-i theta})
        // invertible, so the quadrature lags are positive definite.
        let mut coeffs = vec![DMatrix::<f64>::identity(l, l) * 1.5];
        for _ in 0..n {
            coeffs.push(DMatrix::from_fn(l, l, |_, _| rng.random_range(-0.15..0.15)));
        }
        let truth = ArModel::new(coeffs).unwrap();
        let spec_fine = ar_spectrum(&truth, &fine).unwrap();
        let lookup = |theta: f64| {
            let i = fine
                .points()
                .iter()
                .position(|&pt| (pt - theta).abs() < 1e-12)
                .unwrap();
            spec_fine[i].clone()
        };
        let lags = spectrum_lags(lookup, &fine, n).unwrap();

        let sol = solve_maxent(&lags, &LatentTopology::complete(l), &MaxentOptions::default())
            .unwrap();
        let yw = yule_walker(&lags).unwrap();
        let s_est = ar_spectrum(&sol.model, &grid).unwrap();
        let s_yw = ar_spectrum(&yw, &grid).unwrap();
        let sup = s_est
            .iter()
            .zip(s_yw.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        worst_sup = worst_sup.max(sup);
        assert!(sup <= 1e-6, "case {case}: sup deviation {sup:.3e}");

        let model_poly = sol.model.to_poly();
        let model_lags = spectrum_lags(
            |theta| {
                let p = model_poly.eval_zinv(lrid::Complex64::new(0.0, -theta).exp());
                (p.adjoint() * &p).try_inverse().unwrap()
            },
            &fine,
            n,
        )
        .unwrap();
        for j in 0..=n {
            let rel = (model_lags.lag(j) - lags.lag(j)).norm() / (1.0 + lags.lag(j).norm());
            worst_match = worst_match.max(rel);
            assert!(rel <= 1e-5, "case {case}: lag {j} mismatch {rel:.3e}");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "acceptance criterion 2 (maxent vs Yule-Walker oracle): PASS \
         (worst sup {worst_sup:.2e} <= 1e-6, worst lag mismatch {worst_match:.2e} <= 1e-5, {elapsed:?})"
    );
}

/// Criterion 3: the benchmark system is identifiable in per-row mode;
/// common-factor and vanishing-leading-pair constructions are rejected with
/// certificates naming the defect.
#[test]
fn criterion_3_identifiability_fixtures() {
    let sys = example1_system();
    let v = check_identifiability(&sys.theta_true().a_poly(), &sys.theta_true().b_poly(), true)
        .unwrap();
    assert!(v.identifiable, "benchmark system: {}", v.certificate);

    // Common factor: B = A * (1 + 0.2 z^{-1}).
    let a = MatrixPolynomial::scalar(&[1.0, -0.5]).unwrap();
    let b = MatrixPolynomial::scalar(&[1.0, -0.3, -0.1]).unwrap();
    let v2 = check_identifiability(&a, &b, false).unwrap();
    assert!(!v2.identifiable);
    assert!(
        v2.certificate.contains("common left factor"),
        "certificate: {}",
        v2.certificate
    );

    // Jointly vanishing leading pair on padded degrees.
    let a3 = MatrixPolynomial::new(vec![
        DMatrix::identity(2, 2),
        DMatrix::from_diagonal(&DVector::from_column_slice(&[-0.5, 0.0])),
        DMatrix::zeros(2, 2),
    ])
    .unwrap();
    let b3 = MatrixPolynomial::new(vec![
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 0.2]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.0]),
    ])
    .unwrap();
    let v3 = check_identifiability(&a3, &b3, false).unwrap();
    assert!(!v3.identifiable);
    assert!(v3.certificate.contains("rank"), "certificate: {}", v3.certificate);

    println!(
        "acceptance criterion 3 (identifiability fixtures): PASS \
         (benchmark identifiable; counterexamples rejected: `{}`; `{}`)",
        v2.certificate, v3.certificate
    );
}

/// Criterion 4: structural diagnostic of the benchmark system on a 512-point
/// grid — Schur identity residual and the off-diagonals of the conditional
/// precision blocks at most 1e-8, numerical rank of the low-rank term at
/// most 3.
#[test]
fn criterion_4_structure_diagnostic() {
    let sys = example1_system();
    let grid = FrequencyGrid::uniform(512);
    let rep = dpl_diagnostic(&sys, &grid).unwrap();
    assert!(rep.schur_residual <= 1e-8, "schur residual {}", rep.schur_residual);
    assert!(rep.upsilon_m_offdiag <= 1e-8, "measured off-diag {}", rep.upsilon_m_offdiag);
    assert!(rep.upsilon_l_offdiag <= 1e-8, "latent off-diag {}", rep.upsilon_l_offdiag);
    assert!(rep.lambda_rank <= 3, "low-rank term rank {}", rep.lambda_rank);
    println!(
        "acceptance criterion 4 (structure diagnostic): PASS \
         (schur {:.2e}, offdiag {:.2e}/{:.2e}, rank {} <= 3 on {} points)",
        rep.schur_residual, rep.upsilon_m_offdiag, rep.upsilon_l_offdiag, rep.lambda_rank,
        rep.grid_points
    );
}

/// Criterion 5: benchmark reproduction over 20 Monte-Carlo trials at
/// N = 1000, sigma = 0.1, AR order 5, tolerance 1e-12, all-ones start:
/// parameter fit >= 90, mean latent fit >= 90, mean measured fit >= 85,
/// spectral error <= 2e-2, and the baseline's parameter fit below the
/// pipeline's in at least 18 of 20 trials.
#[test]
fn criterion_5_benchmark_reproduction() {
    let start = std::time::Instant::now();
    let mut cfg = RunConfig::default();
    cfg.n = 1000;
    cfg.mc.trials = 20;
    cfg.mc.base_seed = 1000;
    assert_eq!(cfg.ar_order, 5);
    assert_eq!(cfg.maxent.eps, 1e-12);
    assert_eq!(cfg.ml.eps, 1e-12);
    let out = run_mc(&cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.succeeded, 20);
    assert!(r.fit_h >= 90.0, "fit_H {}", r.fit_h);
    assert!(r.fit_yl >= 90.0, "fit_yl {}", r.fit_yl);
    assert!(r.fit_ym >= 85.0, "fit_ym {}", r.fit_ym);
    assert!(r.err_phi <= 2e-2, "err_phi {}", r.err_phi);
    assert!(
        r.baseline_below_count >= 18,
        "baseline below in only {} of 20 trials",
        r.baseline_below_count
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}");
    println!(
        "acceptance criterion 5 (benchmark reproduction): PASS \
         (fit_H {:.2} >= 90, fit_yl {:.2} >= 90, fit_ym {:.2} >= 85, err_phi {:.2e} <= 2e-2, \
          baseline below in {}/20, {elapsed:?})",
        r.fit_h, r.fit_yl, r.fit_ym, r.err_phi, r.baseline_below_count
    );
}

/// Criterion 6: sensitivity trends. At N = 1000 all three fits exceed 90
/// for sigma in {0.01, 0.1, 0.2} and the spectral error stays below 0.04
/// through sigma = 0.5; median fits over 10 trials at sigma = 0.9 fall
/// strictly below those at sigma = 0.1 for every N in {250, 500, 1000}.
#[test]
fn criterion_6_sensitivity_trends() {
    let start = std::time::Instant::now();
    let mut cfg = RunConfig::default();
    cfg.mc.trials = 20;
    cfg.mc.base_seed = 3000;
    cfg.n = 1000;
    let mut described = Vec::new();
    for sigma in [0.01, 0.1, 0.2, 0.5] {
        let mut cell = cfg.clone();
        cell.sigma = Some(sigma);
        let out = run_mc(&cell).unwrap();
        let r = &out.report;
        assert!(r.err_phi < 0.04, "err_phi {} at sigma {sigma}", r.err_phi);
        if sigma <= 0.2 {
            assert!(r.fit_h > 90.0, "fit_H {} at sigma {sigma}", r.fit_h);
            assert!(r.fit_yl > 90.0, "fit_yl {} at sigma {sigma}", r.fit_yl);
            assert!(r.fit_ym > 90.0, "fit_ym {} at sigma {sigma}", r.fit_ym);
        }
        described.push(format!(
            "s={sigma}: H {:.1}/yl {:.1}/ym {:.1}, err {:.1e}",
            r.fit_h, r.fit_yl, r.fit_ym, r.err_phi
        ));
    }

    // Degradation: per-trial medians at sigma = 0.9 strictly below 0.1.
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    for n in [250usize, 500, 1000] {
        let mut med = std::collections::BTreeMap::new();
        for sigma in [0.1f64, 0.9] {
            let mut cell = cfg.clone();
            cell.n = n;
            cell.sigma = Some(sigma);
            cell.mc.trials = 10;
            cell.mc.base_seed = 4000 + n as u64;
            let out = run_mc(&cell).unwrap();
            let fits: Vec<(f64, f64, f64)> = out
                .trials
                .iter()
                .flatten()
                .map(|t| (t.report.fit_h, t.report.fit_yl, t.report.fit_ym))
                .collect();
            med.insert(
                (sigma * 10.0) as u32,
                (
                    median(fits.iter().map(|f| f.0).collect()),
                    median(fits.iter().map(|f| f.1).collect()),
                    median(fits.iter().map(|f| f.2).collect()),
                ),
            );
        }
        let low = med[&1];
        let high = med[&9];
        assert!(high.0 < low.0, "N={n}: median fit_H {} !< {}", high.0, low.0);
        assert!(high.1 < low.1, "N={n}: median fit_yl {} !< {}", high.1, low.1);
        assert!(high.2 < low.2, "N={n}: median fit_ym {} !< {}", high.2, low.2);
    }
    let elapsed = start.elapsed();
    println!(
        "acceptance criterion 6 (sensitivity trends): PASS \
         ({}; medians degrade at sigma 0.9 for N in {{250,500,1000}}, {elapsed:?})",
        described.join("; ")
    );
}

/// Criterion 7: on a scalar system with the true latent series supplied,
/// the median parameter error over 10 seeds strictly decreases across
/// N in {500, 2000, 20000}.
#[test]
fn criterion_7_consistency_trend() {
    let theta = ThetaParams::new(
        vec![DMatrix::from_element(1, 1, -0.5)],
        vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.3)],
        full_mask(1, 1),
        None,
    )
    .unwrap();
    let w_l = vec![vec![Some(RationalFilter::all_pole(vec![1.0, -0.7]).unwrap())]];
    // Small noise keeps the criterion's fixed-covariance bias floor well
    // below the sampling error at the largest record.
    let sigma = 0.05;
    let sys = SystemSpec::new(w_l, theta.clone(), sigma).unwrap();
    let truth_mat = theta.to_matrix();
    let init = ThetaParams::ones(1, 1, 1, 1, full_mask(1, 1), None).unwrap();

    let mut medians = Vec::new();
    for n in [500usize, 2000, 20_000] {
        let mut errs = Vec::new();
        for seed in 0..10u64 {
            let rec = simulate(&sys, n, 90_000 + seed, 0).unwrap();
            // Noisy measured block, true latent series.
            let zeta_m = rec.zeta.view((0, 0), (n, 1)).into_owned();
            let regs = build_regressors(&zeta_m, &rec.y_l, 1, 1).unwrap();
            let sol = solve_ml(&regs, sigma, &init, &MlOptions::default()).unwrap();
            errs.push((sol.theta.to_matrix() - &truth_mat).norm());
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(errs[errs.len() / 2]);
    }
    assert!(
        medians[1] < medians[0] && medians[2] < medians[1],
        "medians not decreasing: {medians:?}"
    );
    println!(
        "acceptance criterion 7 (consistency trend): PASS \
         (median parameter error {:.4} > {:.4} > {:.4} across N = 500, 2000, 20000)",
        medians[0], medians[1], medians[2]
    );
}

/// Criterion 8: the compensated filter reproduces the measurements exactly
/// at sigma = 0, and with the true model the per-channel mean estimation
/// error stays within three standard errors of zero at N = 10000.
#[test]
fn criterion_8_filter_degeneracy() {
    // sigma = 0 identity.
    let sys0 = example1_system().with_sigma(0.0);
    let rec0 = simulate(&sys0, 2000, 17, 100).unwrap();
    let zeta_l0 = rec0.zeta.view((0, 4), (2000, 3)).into_owned();
    let model0 = yule_walker(
        &spectrum_lags(|t| sys0.latent_spectrum(t), &FrequencyGrid::uniform(4096), 5).unwrap(),
    )
    .unwrap();
    let out0 = filter_compensated(&model0, &zeta_l0, 0.0).unwrap();
    let dev = (out0 - &zeta_l0).norm();
    assert!(dev <= 1e-12, "sigma = 0 deviation {dev:.3e}");

    // True-parameter filtering is mean-unbiased.
    let sys = example1_system();
    let n = 10_000;
    let rec = simulate(&sys, n, 23, 300).unwrap();
    let zeta_l = rec.zeta.view((0, 4), (n, 3)).into_owned();
    let model = yule_walker(
        &spectrum_lags(|t| sys.latent_spectrum(t), &FrequencyGrid::uniform(4096), 5).unwrap(),
    )
    .unwrap();
    let y_hat = filter_compensated(&model, &zeta_l, sys.sigma()).unwrap();
    let mut worst = 0.0f64;
    for ch in 0..3 {
        let diff: Vec<f64> = (0..n).map(|t| y_hat[(t, ch)] - rec.y_l[(t, ch)]).collect();
        let mean = diff.iter().sum::<f64>() / n as f64;
        let var = diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let ratio = mean.abs() / se;
        worst = worst.max(ratio);
        assert!(ratio <= 3.0, "channel {ch}: mean {mean:.4e} is {ratio:.2} SEs from 0");
    }
    println!(
        "acceptance criterion 8 (filter degeneracy): PASS \
         (sigma=0 deviation {dev:.2e} <= 1e-12; worst mean offset {worst:.2} SE <= 3)"
    );
}

/// Criterion 9: the scaled stationarity residual at the likelihood solver's
/// exit is at most 1e-6 of its value at the initial point on benchmark runs.
#[test]
fn criterion_9_stationarity_at_exit() {
    let mut cfg = RunConfig::default();
    cfg.n = 1000;
    let mut worst = 0.0f64;
    for seed in [1000u64, 1007, 1013] {
        let t = run_single(&cfg, seed).unwrap();
        let stat_init = t.ml_trace.first().unwrap().stationarity;
        let ratio = t.report.stationarity / stat_init;
        worst = worst.max(ratio);
        assert!(
            ratio <= 1e-6,
            "seed {seed}: stationarity ratio {ratio:.3e} (init {stat_init:.3e}, exit {:.3e})",
            t.report.stationarity
        );
    }
    println!(
        "acceptance criterion 9 (stationarity at exit): PASS (worst exit/init ratio {worst:.2e} <= 1e-6)"
    );
}
