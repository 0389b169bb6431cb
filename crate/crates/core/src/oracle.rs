//! Brute-force dense Gaussian-process references.
//!
//! Cubic-cost regression used to validate the linear-time recursions and
//! to back the `oracle-check` CLI command. Never use these on long
//! sequences; the spatiotemporal path refuses grids above 500 points.

use crate::error::{Error, Result};
use crate::kalman::LN_2PI;
use crate::kernel::{gram, KernelSpec};
use crate::mat::{cholesky, solve_psd, Mat};
use crate::spatial::{spatial_cross, spatial_gram, SpatialKernelSpec};

/// Exact posterior and log marginal likelihood of a dense GP regression.
#[derive(Debug, Clone)]
pub struct DenseGpResult {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub lml: f64,
}

fn dense_solve(k: &Mat, y: &[f64], noise_vars: &[f64]) -> Result<(Mat, DenseGpResult)> {
    let n = k.rows();
    if y.len() != n || noise_vars.len() != n {
        return Err(Error::Dimension {
            op: "dense_regress",
            expected: format!("{n} observations"),
            found: format!("{} targets, {} noise entries", y.len(), noise_vars.len()),
        });
    }
    if !noise_vars.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise variances must be positive and finite".into(),
        ));
    }
    let mut s = k.clone();
    for i in 0..n {
        s.set(i, i, s.get(i, i) + noise_vars[i]);
    }
    let chol = cholesky(&s)?;
    let yv = Mat::col(y.to_vec());
    let alpha = solve_psd(&chol, &yv)?;
    let mean_m = k.matmul(&alpha);
    let cov = k.sub(&k.matmul(&solve_psd(&chol, k)?)).symmetrize();
    let lml = -0.5 * yv.transpose().matmul(&alpha).as_scalar()
        - 0.5 * chol.logdet()
        - 0.5 * n as f64 * LN_2PI;
    let mean = (0..n).map(|i| mean_m.get(i, 0)).collect();
    Ok((
        s,
        DenseGpResult {
            mean,
            cov,
            lml,
        },
    ))
}

/// Dense GP regression of one channel on heteroscedastic observations.
pub fn dense_regress(
    spec: &KernelSpec,
    times: &[f64],
    y: &[f64],
    noise_vars: &[f64],
) -> Result<DenseGpResult> {
    let k = gram(spec, times);
    Ok(dense_solve(&k, y, noise_vars)?.1)
}

/// Posterior mean/variance of the dense regression at arbitrary query times.
pub fn dense_regress_at(
    spec: &KernelSpec,
    times: &[f64],
    y: &[f64],
    noise_vars: &[f64],
    query: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = times.len();
    let k = gram(spec, times);
    let (s, _) = dense_solve(&k, y, noise_vars)?;
    let chol = cholesky(&s)?;
    let alpha = solve_psd(&chol, &Mat::col(y.to_vec()))?;
    let mut means = Vec::with_capacity(query.len());
    let mut vars = Vec::with_capacity(query.len());
    for &q in query {
        let kq = Mat::col(times.iter().map(|&t| spec.eval(t - q)).collect());
        means.push(kq.transpose().matmul(&alpha).as_scalar());
        let reduction = kq
            .transpose()
            .matmul(&solve_psd(&chol, &kq)?)
            .as_scalar();
        vars.push(spec.eval(0.0) - reduction);
    }
    let _ = n;
    Ok((means, vars))
}

/// Hard cap on the flattened grid size for the dense spatiotemporal path.
pub const DENSE_ST_MAX_POINTS: usize = 500;

fn check_st_sizes(n_r: usize, n_t: usize) -> Result<()> {
    if n_r * n_t > DENSE_ST_MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "dense spatiotemporal grid {}x{} exceeds {} points",
            n_r, n_t, DENSE_ST_MAX_POINTS
        )));
    }
    Ok(())
}

/// Builds kron(K_r, K_t) over the full grid; index = r * T + t (location-major).
fn st_joint_gram(
    spatial: &SpatialKernelSpec,
    temporal: &KernelSpec,
    coords: &[Vec<f64>],
    times: &[f64],
) -> Mat {
    let kr = spatial_gram(spatial, coords);
    let kt = gram(temporal, times);
    crate::mat::kron(&kr, &kt)
}

/// Dense separable spatiotemporal regression on a full (location, time) grid.
/// `y` and `noise_vars` are location-major: index r * T + t.
pub fn dense_st_regress(
    spatial: &SpatialKernelSpec,
    temporal: &KernelSpec,
    coords: &[Vec<f64>],
    times: &[f64],
    y: &[f64],
    noise_vars: &[f64],
) -> Result<DenseGpResult> {
    check_st_sizes(coords.len(), times.len())?;
    let k = st_joint_gram(spatial, temporal, coords, times);
    Ok(dense_solve(&k, y, noise_vars)?.1)
}

/// Dense held-out prediction at location `r_star` for every training time.
pub fn dense_st_predict(
    spatial: &SpatialKernelSpec,
    temporal: &KernelSpec,
    coords: &[Vec<f64>],
    times: &[f64],
    y: &[f64],
    noise_vars: &[f64],
    r_star: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_st_sizes(coords.len(), times.len())?;
    let n_t = times.len();
    let k = st_joint_gram(spatial, temporal, coords, times);
    let (s, _) = dense_solve(&k, y, noise_vars)?;
    let chol = cholesky(&s)?;
    let alpha = solve_psd(&chol, &Mat::col(y.to_vec()))?;
    let kt = gram(temporal, times);
    // Cross covariance rows: cov(Z(r*, t_q), Z(r_i, t_j)) = k_r(r*, r_i) k_t(t_q, t_j).
    let cross_r = spatial_cross(spatial, r_star, coords);
    let k_star_diag = spatial_cross(spatial, r_star, &[r_star.to_vec()])[0];
    let mut means = Vec::with_capacity(n_t);
    let mut vars = Vec::with_capacity(n_t);
    for q in 0..n_t {
        let mut kq = Mat::zeros(coords.len() * n_t, 1);
        for (r, &kr) in cross_r.iter().enumerate() {
            for j in 0..n_t {
                kq.set(r * n_t + j, 0, kr * kt.get(q, j));
            }
        }
        means.push(kq.transpose().matmul(&alpha).as_scalar());
        let reduction = kq.transpose().matmul(&solve_psd(&chol, &kq)?).as_scalar();
        vars.push(k_star_diag * kt.get(q, q) - reduction);
    }
    Ok((means, vars))
}

/// Summary of the dense-vs-Markovian equivalence sweep.
#[derive(Debug, Clone)]
pub struct OracleCheckReport {
    /// Worst relative error of smoothed means/variances through H.
    pub max_rel_moments: f64,
    /// Worst relative error of the log-partition vs the dense marginal.
    pub max_rel_logz: f64,
    /// Worst relative error of held-out spatiotemporal prediction.
    pub max_rel_st: f64,
}

impl OracleCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_moments < 1e-6 && self.max_rel_logz < 1e-6 && self.max_rel_st < 1e-5
    }
}

/// Runs the equivalence sweep between the linear-time recursions and the
/// dense references: temporal grids for both kernel families plus a
/// held-out-location spatiotemporal case.
pub fn oracle_check(seed: u64) -> Result<OracleCheckReport> {
    use crate::kalman::{filter, smooth, GaussianSites};
    use crate::kernel::{to_state_space, KernelFamily};
    use crate::spatial::{st_build, st_predict};
    use crate::stats::{derive_rng, draw_uniform};

    let mut report = OracleCheckReport {
        max_rel_moments: 0.0,
        max_rel_logz: 0.0,
        max_rel_st: 0.0,
    };
    let mut rng = derive_rng(seed, &[0x0C]);

    for family in [KernelFamily::Matern32, KernelFamily::Matern52] {
        for rep in 0..5 {
            let t_len = 20 + 15 * rep;
            let spec = KernelSpec::new(
                family,
                0.4 + 2.0 * draw_uniform(&mut rng),
                0.3 + 1.5 * draw_uniform(&mut rng),
            )?;
            let ss = to_state_space(&spec);
            let mut times = vec![0.0];
            for i in 1..t_len {
                times.push(times[i - 1] + 0.05 + draw_uniform(&mut rng));
            }
            let y: Vec<f64> = (0..t_len).map(|_| 2.0 * (draw_uniform(&mut rng) - 0.5)).collect();
            let v: Vec<f64> = (0..t_len).map(|_| 0.05 + draw_uniform(&mut rng)).collect();
            let sites = GaussianSites::new(times.clone(), y.clone(), v.clone(), 1)?;
            let fr = filter(std::slice::from_ref(&ss), &sites)?;
            let sm = smooth(std::slice::from_ref(&ss), &sites, &fr)?;
            let dense = dense_regress(&spec, &times, &y, &v)?;

            let rel_logz = (fr.log_partition - dense.lml).abs() / dense.lml.abs();
            report.max_rel_logz = report.max_rel_logz.max(rel_logz);
            let h_t = ss.h.transpose();
            for t in 0..t_len {
                let m = ss.h.matmul(&sm.channels[0].m_smooth[t]).as_scalar();
                let p = sm.channels[0].p_smooth[t].quad_form(&h_t);
                let rm = (m - dense.mean[t]).abs() / dense.mean[t].abs().max(1e-2);
                let rp = (p - dense.cov.get(t, t)).abs() / dense.cov.get(t, t);
                report.max_rel_moments = report.max_rel_moments.max(rm).max(rp);
            }
        }
    }

    // Spatiotemporal: 4 training locations, one held out.
    let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![0.8, 0.8])?;
    let temporal = KernelSpec::new(KernelFamily::Matern32, 1.3, 1.0)?;
    let coords: Vec<Vec<f64>> = (0..4)
        .map(|_| vec![1.5 * draw_uniform(&mut rng), 1.5 * draw_uniform(&mut rng)])
        .collect();
    let r_star = vec![0.75, 0.75];
    let n_t = 12;
    let times: Vec<f64> = (0..n_t).map(|i| 0.4 * i as f64).collect();
    let mut y_grid = vec![0.0; 4 * n_t];
    let mut v_grid = vec![0.0; 4 * n_t];
    for i in 0..4 * n_t {
        y_grid[i] = 2.0 * (draw_uniform(&mut rng) - 0.5);
        v_grid[i] = 0.1 + 0.4 * draw_uniform(&mut rng);
    }
    let (dense_mean, dense_var) =
        dense_st_predict(&spatial, &temporal, &coords, &times, &y_grid, &v_grid, &r_star)?;
    let st = st_build(&spatial, &temporal, &coords)?;
    let y_sites: Vec<f64> = (0..n_t)
        .flat_map(|t| (0..4).map(|r| y_grid[r * n_t + t]).collect::<Vec<_>>())
        .collect();
    let v_sites: Vec<f64> = (0..n_t)
        .flat_map(|t| (0..4).map(|r| v_grid[r * n_t + t]).collect::<Vec<_>>())
        .collect();
    let sites = crate::kalman::GaussianSites::new(times.clone(), y_sites, v_sites, 4)?;
    let got = st_predict(&st, &sites, &r_star, &times)?;
    for t in 0..n_t {
        let rm = (got[t].0 - dense_mean[t]).abs() / dense_mean[t].abs().max(1e-2);
        let rv = (got[t].1 - dense_var[t]).abs() / dense_var[t].abs();
        report.max_rel_st = report.max_rel_st.max(rm).max(rv);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;

    #[test]
    fn zero_targets_give_zero_mean() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let r = dense_regress(&spec, &[0.0, 1.0, 2.5], &[0.0; 3], &[0.5; 3]).unwrap();
        assert!(r.mean.iter().all(|m| m.abs() < 1e-15));
        // lml reduces to the normalizing constant of N(0; 0, K + V).
        let k = gram(&spec, &[0.0, 1.0, 2.5]);
        let mut s = k.clone();
        for i in 0..3 {
            s.set(i, i, s.get(i, i) + 0.5);
        }
        let expected = -0.5 * cholesky(&s).unwrap().logdet() - 1.5 * LN_2PI;
        assert!((r.lml - expected).abs() < 1e-12);
    }

    #[test]
    fn infinite_noise_returns_prior() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 2.0, 1.0).unwrap();
        let times = [0.0, 0.7, 1.9, 3.0];
        let r = dense_regress(&spec, &times, &[5.0, -3.0, 2.0, 1.0], &[1e14; 4]).unwrap();
        for i in 0..4 {
            assert!(r.mean[i].abs() < 1e-9);
            assert!((r.cov.get(i, i) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_three_point_instance() {
        // sigma2 = 1, ell = 1, times [0,1,2], noise 1, y = [1, 0, -1].
        // Reference arithmetic below inverts the 3x3 system by cofactors,
        // fully independent of the Cholesky path.
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let times = [0.0, 1.0, 2.0];
        let y = [1.0, 0.0, -1.0];
        let r = dense_regress(&spec, &times, &y, &[1.0; 3]).unwrap();

        let k01 = spec.eval(1.0);
        let k02 = spec.eval(2.0);
        // S = K + I with unit diagonal kernel.
        let a = 2.0; // S[i][i]
        let b = k01;
        let c = k02;
        // Inverse of the symmetric Toeplitz [[a,b,c],[b,a,b],[c,b,a]] by cofactors.
        let det = a * (a * a - b * b) - b * (b * a - b * c) + c * (b * b - a * c);
        let inv = [
            [(a * a - b * b) / det, (b * c - a * b) / det, (b * b - a * c) / det],
            [(b * c - a * b) / det, (a * a - c * c) / det, (b * c - a * b) / det],
            [(b * b - a * c) / det, (b * c - a * b) / det, (a * a - b * b) / det],
        ];
        let mut alpha = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                alpha[i] += inv[i][j] * y[j];
            }
        }
        let kmat = [
            [1.0, k01, k02],
            [k01, 1.0, k01],
            [k02, k01, 1.0],
        ];
        for i in 0..3 {
            let mut m = 0.0;
            for j in 0..3 {
                m += kmat[i][j] * alpha[j];
            }
            assert!((r.mean[i] - m).abs() < 1e-12, "mean {i}: {} vs {m}", r.mean[i]);
        }
        let mut quad = 0.0;
        for i in 0..3 {
            quad += y[i] * alpha[i];
        }
        let lml = -0.5 * quad - 0.5 * det.ln() - 1.5 * LN_2PI;
        assert!((r.lml - lml).abs() < 1e-12);
    }

    #[test]
    fn lml_invariant_to_joint_permutation() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.3, 0.8).unwrap();
        let times = [0.0, 0.5, 1.4, 2.2];
        let y = [0.3, -0.7, 1.1, 0.4];
        let v = [0.2, 0.4, 0.3, 0.5];
        let base = dense_regress(&spec, &times, &y, &v).unwrap().lml;
        // GaussianSites elsewhere require sorted times, but the dense path
        // accepts any joint ordering of (times, y, noise).
        let perm = [2usize, 0, 3, 1];
        let pt: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let pv: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
        let permuted = dense_regress(&spec, &pt, &py, &pv).unwrap().lml;
        assert!((base - permuted).abs() < 1e-10);
    }

    #[test]
    fn posterior_variance_never_exceeds_prior() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 1.7, 1.1).unwrap();
        let times: Vec<f64> = (0..20).map(|i| 0.3 * i as f64).collect();
        let y: Vec<f64> = times.iter().map(|t| t.sin()).collect();
        let r = dense_regress(&spec, &times, &y, &vec![0.1; 20]).unwrap();
        for i in 0..20 {
            assert!(r.cov.get(i, i) <= 1.7 + 1e-12);
        }
    }

    #[test]
    fn st_grid_guard() {
        let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![1.0]).unwrap();
        let temporal = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let coords: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let times: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let err = dense_st_regress(&spatial, &temporal, &coords, &times, &[0.0; 900], &[1.0; 900]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn st_single_location_equals_temporal_regression() {
        let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![1.0]).unwrap();
        let temporal = KernelSpec::new(KernelFamily::Matern52, 1.8, 0.7).unwrap();
        let times: Vec<f64> = vec![0.0, 0.4, 1.1, 2.0, 2.2];
        let y = [0.5, -0.2, 0.9, 0.1, -0.6];
        let v = [0.3, 0.2, 0.4, 0.25, 0.35];
        let st = dense_st_regress(&spatial, &temporal, &[vec![0.0]], &times, &y, &v).unwrap();
        let plain = dense_regress(&temporal, &times, &y, &v).unwrap();
        // The effective spatial gram at one location is exactly 1.
        assert!((st.lml - plain.lml).abs() < 1e-10);
        for i in 0..5 {
            assert!((st.mean[i] - plain.mean[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn st_infinite_noise_returns_prior() {
        let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![0.8]).unwrap();
        let temporal = KernelSpec::new(KernelFamily::Matern32, 1.4, 1.0).unwrap();
        let coords = vec![vec![0.0], vec![0.5]];
        let times = vec![0.0, 1.0, 2.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = dense_st_regress(&spatial, &temporal, &coords, &times, &y, &[1e14; 6]).unwrap();
        for i in 0..6 {
            assert!(r.mean[i].abs() < 1e-8);
            assert!((r.cov.get(i, i) - 1.4).abs() < 1e-7);
        }
    }

    #[test]
    fn st_regress_matches_markovian_smoother() {
        use crate::spatial::{st_build, st_filter_smooth};
        let mut coords = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..4 {
            coords.push(vec![next() * 2.0, next() * 2.0]);
        }
        let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![0.9, 0.9]).unwrap();
        let temporal = KernelSpec::new(KernelFamily::Matern32, 1.2, 1.0).unwrap();
        let n_t = 10;
        let mut times = vec![0.0];
        for i in 1..n_t {
            times.push(times[i - 1] + 0.2 + 0.3 * next());
        }
        // Location-major targets/noise for the dense path.
        let mut y_grid = vec![0.0; 4 * n_t];
        let mut v_grid = vec![0.0; 4 * n_t];
        for r in 0..4 {
            for t in 0..n_t {
                y_grid[r * n_t + t] = 2.0 * (next() - 0.5);
                v_grid[r * n_t + t] = 0.1 + 0.4 * next();
            }
        }
        let dense = dense_st_regress(&spatial, &temporal, &coords, &times, &y_grid, &v_grid).unwrap();

        // Time-major sites for the Markovian path.
        let st = st_build(&spatial, &temporal, &coords).unwrap();
        let y_sites: Vec<f64> = (0..n_t)
            .flat_map(|t| (0..4).map(|r| y_grid[r * n_t + t]).collect::<Vec<_>>())
            .collect();
        let v_sites: Vec<f64> = (0..n_t)
            .flat_map(|t| (0..4).map(|r| v_grid[r * n_t + t]).collect::<Vec<_>>())
            .collect();
        let sites = crate::kalman::GaussianSites::new(times.clone(), y_sites, v_sites, 4).unwrap();
        let post = st_filter_smooth(&st, &sites).unwrap();

        assert!(
            (post.log_partition - dense.lml).abs() / dense.lml.abs() < 1e-5,
            "lml {} vs {}",
            post.log_partition,
            dense.lml
        );
        for t in 0..n_t {
            let z_mean = st.emission.matmul(&post.channels[0].m_smooth[t]);
            let z_cov = st
                .emission
                .matmul(&post.channels[0].p_smooth[t])
                .matmul_nt(&st.emission);
            for r in 0..4 {
                let dense_m = dense.mean[r * n_t + t];
                let dense_v = dense.cov.get(r * n_t + t, r * n_t + t);
                let rel_m = (z_mean.get(r, 0) - dense_m).abs() / dense_m.abs().max(1e-2);
                let rel_v = (z_cov.get(r, r) - dense_v).abs() / dense_v.abs();
                assert!(rel_m < 1e-5, "mean mismatch {rel_m} at (r {r}, t {t})");
                assert!(rel_v < 1e-5, "var mismatch {rel_v} at (r {r}, t {t})");
            }
        }
    }

    #[test]
    fn st_heldout_prediction_matches_dense() {
        use crate::spatial::{st_build, st_predict};
        let spatial = SpatialKernelSpec::new(KernelFamily::Matern32, vec![0.8, 0.8]).unwrap();
        let temporal = KernelSpec::new(KernelFamily::Matern32, 1.5, 0.9).unwrap();
        let coords = vec![
            vec![0.0, 0.0],
            vec![0.9, 0.2],
            vec![0.3, 1.1],
            vec![1.4, 1.3],
            vec![0.7, 0.6],
        ];
        let r_star = vec![0.5, 0.5];
        let n_t = 8;
        let times: Vec<f64> = (0..n_t).map(|i| 0.35 * i as f64).collect();
        let mut y_grid = vec![0.0; 5 * n_t];
        for (i, v) in y_grid.iter_mut().enumerate() {
            *v = ((i * 37 % 17) as f64 / 17.0 - 0.5) * 2.0;
        }
        let v_grid = vec![0.2; 5 * n_t];
        let (dense_mean, dense_var) = dense_st_predict(
            &spatial, &temporal, &coords, &times, &y_grid, &v_grid, &r_star,
        )
        .unwrap();

        let st = st_build(&spatial, &temporal, &coords).unwrap();
        let y_sites: Vec<f64> = (0..n_t)
            .flat_map(|t| (0..5).map(|r| y_grid[r * n_t + t]).collect::<Vec<_>>())
            .collect();
        let sites = crate::kalman::GaussianSites::new(
            times.clone(),
            y_sites,
            vec![0.2; 5 * n_t],
            5,
        )
        .unwrap();
        let got = st_predict(&st, &sites, &r_star, &times).unwrap();
        for t in 0..n_t {
            let rel_m = (got[t].0 - dense_mean[t]).abs() / dense_mean[t].abs().max(1e-2);
            let rel_v = (got[t].1 - dense_var[t]).abs() / dense_var[t].abs();
            assert!(rel_m < 1e-5, "t {t}: mean {} vs {}", got[t].0, dense_mean[t]);
            assert!(rel_v < 1e-5, "t {t}: var {} vs {}", got[t].1, dense_var[t]);
        }
    }
}
