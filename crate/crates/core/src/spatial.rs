//! Separable spatiotemporal extension.
//!
//! States for each spatial location evolve independently under the shared
//! temporal kernel and are mixed spatially by the emission matrix
//! L_RR (x) H, where K_RR = L_RR L_RR^T is the spatial gram. Filtering
//! and smoothing run on the stacked system; prediction at unseen
//! locations conditions on the stacked state via standard GP algebra
//! over space.

use crate::error::{Error, Result};
use crate::kalman::{
    ChannelSmoothed, GaussianSites, SmoothedPosterior, Timeline, LN_2PI,
};
use crate::kernel::{to_state_space, KernelFamily, KernelSpec, KernelStateSpace, TransitionCache};
use crate::mat::{cholesky, cholesky_fixed, CholFactor, Mat};
use serde::{Deserialize, Serialize};

/// Fixed diagonal jitter folded into the spatial gram.
///
/// The gram is normalized as (K + j I) / (1 + j): unit marginal variance
/// is preserved, eigenvalues are floored at j / (1 + j), and a single
/// location reduces the model exactly to the temporal one.
pub const SPATIAL_JITTER: f64 = 1e-6;

/// Spatial kernel over coordinates; variance is fixed to 1 (the signal
/// variance lives in the temporal kernel), lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernelSpec {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
}

impl SpatialKernelSpec {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument("no spatial lengthscales".into()));
        }
        if !lengthscales.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidArgument(
                "spatial lengthscales must be positive and finite".into(),
            ));
        }
        Ok(SpatialKernelSpec { family, lengthscales })
    }

    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), self.lengthscales.len(), "coordinate dimension mismatch");
        assert_eq!(b.len(), self.lengthscales.len(), "coordinate dimension mismatch");
        let mut s = 0.0;
        for ((x, y), ell) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / ell;
            s += d * d;
        }
        s.sqrt()
    }

    /// Unit-variance Matern value at the lengthscale-weighted distance.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.scaled_distance(a, b);
        match self.family {
            KernelFamily::Matern32 => {
                let s = 3.0_f64.sqrt() * d;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5.0_f64.sqrt() * d;
                (1.0 + s + 5.0 * d * d / 3.0) * (-s).exp()
            }
        }
    }
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Effective spatial kernel including the normalized jitter. Coinciding
/// coordinates share the jitter bump, so a query at a training location
/// is the same random variable as that location's process.
pub(crate) fn eff_spatial_kernel(spec: &SpatialKernelSpec, a: &[f64], b: &[f64]) -> f64 {
    let bump = if same_point(a, b) { SPATIAL_JITTER } else { 0.0 };
    (spec.eval(a, b) + bump) / (1.0 + SPATIAL_JITTER)
}

/// Effective spatial gram over a coordinate set.
pub fn spatial_gram(spec: &SpatialKernelSpec, coords: &[Vec<f64>]) -> Mat {
    Mat::from_fn(coords.len(), coords.len(), |i, j| {
        eff_spatial_kernel(spec, &coords[i], &coords[j])
    })
}

/// Effective cross-covariances k(r*, r_i).
pub fn spatial_cross(spec: &SpatialKernelSpec, r_star: &[f64], coords: &[Vec<f64>]) -> Vec<f64> {
    coords
        .iter()
        .map(|c| eff_spatial_kernel(spec, r_star, c))
        .collect()
}

/// Prebuilt state for spatiotemporal filtering of one latent channel.
#[derive(Debug, Clone)]
pub struct SpatioTemporalState {
    pub coords: Vec<Vec<f64>>,
    pub spatial: SpatialKernelSpec,
    /// Cholesky factor of the effective spatial gram; its lower triangle is
    /// the spatial mixing matrix L_RR.
    pub chol_krr: CholFactor,
    pub temporal: KernelStateSpace,
    /// Emission L_RR (x) H, shape N_r x (N_r d).
    pub emission: Mat,
}

impl SpatioTemporalState {
    pub fn n_locations(&self) -> usize {
        self.coords.len()
    }

    pub fn state_dim(&self) -> usize {
        self.coords.len() * self.temporal.dim()
    }
}

/// Builds the stacked spatiotemporal state.
///
/// Exactly duplicated spatial points make the effective gram singular
/// (they share the jitter bump) and are reported as a numerical error.
pub fn st_build(
    spatial: &SpatialKernelSpec,
    temporal: &KernelSpec,
    coords: &[Vec<f64>],
) -> Result<SpatioTemporalState> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("no spatial coordinates".into()));
    }
    let dim = coords[0].len();
    if dim != spatial.lengthscales.len() {
        return Err(Error::Dimension {
            op: "st_build",
            expected: format!("{}-dimensional coordinates", spatial.lengthscales.len()),
            found: format!("{dim}-dimensional"),
        });
    }
    for c in coords {
        if c.len() != dim || !c.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(
                "spatial coordinates must be finite and consistently sized".into(),
            ));
        }
    }
    let krr = spatial_gram(spatial, coords);
    let chol_krr = cholesky_fixed(&krr).map_err(|_| {
        Error::Numerical(
            "spatial gram not positive definite beyond the fixed jitter (duplicate locations?)"
                .into(),
        )
    })?;
    let temporal_ss = to_state_space(temporal);
    let emission = crate::mat::kron(chol_krr.lower(), &temporal_ss.h);
    Ok(SpatioTemporalState {
        coords: coords.to_vec(),
        spatial: spatial.clone(),
        chol_krr,
        temporal: temporal_ss,
        emission,
    })
}

/// (I (x) A) X for X with N_r row blocks of size d.
fn kron_apply_left(a: &Mat, x: &Mat, n_r: usize) -> Mat {
    let d = a.rows();
    let mut out = Mat::zeros(x.rows(), x.cols());
    for blk in 0..n_r {
        let rows = x.block(blk * d, 0, d, x.cols());
        out.set_block(blk * d, 0, &a.matmul(&rows));
    }
    out
}

/// (I (x) A) P (I (x) A)^T applied blockwise.
fn kron_sandwich(a: &Mat, p: &Mat, n_r: usize) -> Mat {
    let d = a.rows();
    let mut out = Mat::zeros(p.rows(), p.cols());
    for bi in 0..n_r {
        for bj in 0..n_r {
            let blk = p.block(bi * d, bj * d, d, d);
            out.set_block(bi * d, bj * d, &a.matmul(&blk).matmul_nt(a));
        }
    }
    out
}

fn add_block_diag(p: &mut Mat, q: &Mat, n_r: usize) {
    let d = q.rows();
    for blk in 0..n_r {
        for i in 0..d {
            for j in 0..d {
                let v = p.get(blk * d + i, blk * d + j) + q.get(i, j);
                p.set(blk * d + i, blk * d + j, v);
            }
        }
    }
}

pub(crate) struct StPass {
    pub m_pred: Vec<Mat>,
    pub p_pred: Vec<Mat>,
    pub m_filt: Vec<Mat>,
    pub p_filt: Vec<Mat>,
    /// Temporal transition into each step (stacked form is I (x) a).
    pub a_t: Vec<Mat>,
    pub log_partition: f64,
}

pub(crate) fn st_filter_timeline(
    st: &SpatioTemporalState,
    timeline: &Timeline,
    sites: &GaussianSites,
) -> Result<StPass> {
    let n_r = st.n_locations();
    let d = st.temporal.dim();
    let n = n_r * d;
    let e = &st.emission;
    let mut cache = TransitionCache::new(&st.temporal);
    let ident = Mat::identity(n);

    let mut pass = StPass {
        m_pred: Vec::with_capacity(timeline.len()),
        p_pred: Vec::with_capacity(timeline.len()),
        m_filt: Vec::with_capacity(timeline.len()),
        p_filt: Vec::with_capacity(timeline.len()),
        a_t: Vec::with_capacity(timeline.len()),
        log_partition: 0.0,
    };

    let mut pinf_stack = Mat::zeros(n, n);
    for blk in 0..n_r {
        pinf_stack.set_block(blk * d, blk * d, &st.temporal.pinf);
    }

    for i in 0..timeline.len() {
        let (mp, pp, a_t) = if i == 0 {
            (Mat::zeros(n, 1), pinf_stack.clone(), Mat::identity(d))
        } else {
            let dt = timeline.times[i] - timeline.times[i - 1];
            let tr = cache.get(dt)?;
            let mp = kron_apply_left(&tr.a, &pass.m_filt[i - 1], n_r);
            let mut pp = kron_sandwich(&tr.a, &pass.p_filt[i - 1], n_r);
            add_block_diag(&mut pp, &tr.q, n_r);
            (mp, pp.symmetrize(), tr.a.clone())
        };

        let (mf, pf) = match timeline.obs[i] {
            Some(row) => {
                let y = Mat::col((0..n_r).map(|r| sites.y(row, r)).collect());
                let v: Vec<f64> = (0..n_r).map(|r| sites.v(row, r)).collect();
                // Innovation covariance Lambda = E P E^T + diag(v).
                let ep = e.matmul(&pp);
                let mut lambda = ep.matmul_nt(e);
                for r in 0..n_r {
                    lambda.set(r, r, lambda.get(r, r) + v[r]);
                }
                let chol = cholesky(&lambda.symmetrize()).map_err(|err| {
                    Error::Numerical(format!("innovation solve failed at step {i}: {err}"))
                })?;
                let innov = y.sub(&e.matmul(&mp));
                let alpha = chol.solve(&innov)?;
                pass.log_partition += -0.5
                    * (n_r as f64 * LN_2PI
                        + chol.logdet()
                        + innov.transpose().matmul(&alpha).as_scalar());
                // W = P E^T Lambda^{-1} = solve(Lambda, E P)^T.
                let w = chol.solve(&ep)?.transpose();
                let mf = mp.add(&w.matmul(&innov));
                let j = ident.sub(&w.matmul(e));
                let mut wvw = Mat::zeros(n, n);
                for r in 0..n_r {
                    let wc = w.block(0, r, n, 1);
                    wvw = wvw.add(&wc.matmul_nt(&wc).scale(v[r]));
                }
                let pf = j.matmul(&pp).matmul_nt(&j).add(&wvw).symmetrize();
                (mf, pf)
            }
            None => (mp.clone(), pp.clone()),
        };

        if !mf.is_finite() || !pf.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite spatiotemporal filter state at step {i}"
            )));
        }
        pass.m_pred.push(mp);
        pass.p_pred.push(pp);
        pass.m_filt.push(mf);
        pass.p_filt.push(pf);
        pass.a_t.push(a_t);
    }
    Ok(pass)
}

pub(crate) fn st_smooth_pass(st: &SpatioTemporalState, pass: &StPass) -> Result<ChannelSmoothed> {
    let n_r = st.n_locations();
    let t_len = pass.m_filt.len();
    let mut m_smooth = vec![Mat::zeros(0, 0); t_len];
    let mut p_smooth = vec![Mat::zeros(0, 0); t_len];
    let mut gains = vec![Mat::zeros(0, 0); t_len.saturating_sub(1)];
    m_smooth[t_len - 1] = pass.m_filt[t_len - 1].clone();
    p_smooth[t_len - 1] = pass.p_filt[t_len - 1].clone();
    for i in (0..t_len.saturating_sub(1)).rev() {
        let chol = cholesky(&pass.p_pred[i + 1]).map_err(|e| {
            Error::Numerical(format!("spatiotemporal smoother failed at step {}: {e}", i + 1))
        })?;
        let a_pf = kron_apply_left(&pass.a_t[i + 1], &pass.p_filt[i], n_r);
        let g = chol.solve(&a_pf)?.transpose();
        m_smooth[i] = pass.m_filt[i].add(&g.matmul(&m_smooth[i + 1].sub(&pass.m_pred[i + 1])));
        p_smooth[i] = pass.p_filt[i]
            .add(&g.matmul(&p_smooth[i + 1].sub(&pass.p_pred[i + 1])).matmul_nt(&g))
            .symmetrize();
        gains[i] = g;
    }
    Ok(ChannelSmoothed {
        m_smooth,
        p_smooth,
        gains,
    })
}

/// Kalman filter + RTS smoother on the stacked system. Sites carry an
/// N_r-dimensional observation per step (one scalar per location).
pub fn st_filter_smooth(st: &SpatioTemporalState, sites: &GaussianSites) -> Result<SmoothedPosterior> {
    if sites.channels() != st.n_locations() {
        return Err(Error::Dimension {
            op: "st_filter_smooth",
            expected: format!("{} per-step site values", st.n_locations()),
            found: format!("{}", sites.channels()),
        });
    }
    let timeline = Timeline::from_sites(sites);
    let pass = st_filter_timeline(st, &timeline, sites)?;
    let log_partition = pass.log_partition;
    let smoothed = st_smooth_pass(st, &pass)?;
    Ok(SmoothedPosterior {
        channels: vec![smoothed],
        log_partition,
    })
}

/// Predictive marginals of Z(r*, t) for each requested time.
///
/// The conditional mean operator is (K_{r*R} K_RR^{-1} L_RR) (x) H applied
/// to the stacked smoothed state, with the spatial conditional variance
/// C = k_t(0,0) (K_{r*r*} - K_{r*R} K_RR^{-1} K_{Rr*}) added on top.
pub fn st_predict(
    st: &SpatioTemporalState,
    sites: &GaussianSites,
    r_star: &[f64],
    times: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if sites.channels() != st.n_locations() {
        return Err(Error::Dimension {
            op: "st_predict",
            expected: format!("{} per-step site values", st.n_locations()),
            found: format!("{}", sites.channels()),
        });
    }
    let cross = Mat::col(spatial_cross(&st.spatial, r_star, &st.coords));
    let solved = st.chol_krr.solve(&cross)?;
    // b_row = K_{r*R} K_RR^{-1} L_RR.
    let b_row = solved.transpose().matmul(st.chol_krr.lower());
    let b = crate::mat::kron(&b_row, &st.temporal.h);
    let k_star = eff_spatial_kernel(&st.spatial, r_star, r_star);
    let kt0 = st.temporal.spec.eval(0.0);
    let c_term = (kt0 * (k_star - cross.transpose().matmul(&solved).as_scalar())).max(0.0);

    let (timeline, steps) = Timeline::with_queries(sites, times)?;
    let pass = st_filter_timeline(st, &timeline, sites)?;
    let smoothed = st_smooth_pass(st, &pass)?;
    let b_t = b.transpose();
    let out = steps
        .iter()
        .map(|&s| {
            let mean = b.matmul(&smoothed.m_smooth[s]).as_scalar();
            let var = smoothed.p_smooth[s].quad_form(&b_t) + c_term;
            (mean, var)
        })
        .collect();
    Ok(out)
}
