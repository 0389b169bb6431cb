//! Exact linear-time inference over Gaussian sites.
//!
//! Per channel: forward Kalman filter (prediction, update, log-partition
//! accumulation) and backward RTS smoothing. Prediction at arbitrary
//! times works by merging query times into the site timeline as
//! skip-update pseudo-sites, which leaves the posterior untouched and
//! reuses the tested recursion.

use crate::error::{Error, Result};
use crate::kernel::{DiscreteTransition, KernelStateSpace, TransitionCache};
use crate::mat::{cholesky, Mat};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-timestep, per-channel encoder outputs defining the approximate
/// likelihood N(y_tilde | H s, v_tilde).
#[derive(Debug, Clone)]
pub struct GaussianSites {
    times: Vec<f64>,
    /// Row-major T x L site means.
    y_tilde: Vec<f64>,
    /// Row-major T x L site variances, all strictly positive.
    v_tilde: Vec<f64>,
    n_channels: usize,
}

impl GaussianSites {
    pub fn new(times: Vec<f64>, y_tilde: Vec<f64>, v_tilde: Vec<f64>, n_channels: usize) -> Result<Self> {
        let t = times.len();
        if t == 0 {
            return Err(Error::InvalidArgument("empty site sequence".into()));
        }
        if n_channels == 0 {
            return Err(Error::InvalidArgument("zero channels".into()));
        }
        if y_tilde.len() != t * n_channels || v_tilde.len() != t * n_channels {
            return Err(Error::Dimension {
                op: "GaussianSites::new",
                expected: format!("{} site values", t * n_channels),
                found: format!("{} means, {} variances", y_tilde.len(), v_tilde.len()),
            });
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "site times must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if !times.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite site time".into()));
        }
        if !y_tilde.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("non-finite site mean".into()));
        }
        if !v_tilde.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Numerical("site variances must be positive and finite".into()));
        }
        Ok(GaussianSites {
            times,
            y_tilde,
            v_tilde,
            n_channels,
        })
    }

    /// Convenience constructor from per-time rows.
    pub fn from_rows(times: Vec<f64>, y_rows: &[Vec<f64>], v_rows: &[Vec<f64>]) -> Result<Self> {
        let l = y_rows.first().map_or(0, |r| r.len());
        let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flat_map(|r| r.iter().copied()).collect() };
        GaussianSites::new(times, flat(y_rows), flat(v_rows), l)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.n_channels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn y(&self, t: usize, l: usize) -> f64 {
        self.y_tilde[t * self.n_channels + l]
    }

    #[inline]
    pub fn v(&self, t: usize, l: usize) -> f64 {
        self.v_tilde[t * self.n_channels + l]
    }
}

/// Merged timeline of site steps and pseudo (no-update) steps.
#[derive(Debug, Clone)]
pub(crate) struct Timeline {
    pub times: Vec<f64>,
    /// Index into the site rows, or None for a skip-update pseudo-site.
    pub obs: Vec<Option<usize>>,
}

impl Timeline {
    pub(crate) fn from_sites(sites: &GaussianSites) -> Timeline {
        Timeline {
            times: sites.times().to_vec(),
            obs: (0..sites.len()).map(Some).collect(),
        }
    }

    /// Merges query times into the site timeline. Returns the timeline and,
    /// for each query in input order, its step index.
    pub(crate) fn with_queries(sites: &GaussianSites, queries: &[f64]) -> Result<(Timeline, Vec<usize>)> {
        if !queries.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite query time".into()));
        }
        // (time, kind, original index); sites sort before queries at ties so
        // a coincident query becomes a zero-gap step after the update.
        let mut entries: Vec<(f64, u8, usize)> = Vec::with_capacity(sites.len() + queries.len());
        for (i, &t) in sites.times().iter().enumerate() {
            entries.push((t, 0, i));
        }
        for (i, &t) in queries.iter().enumerate() {
            entries.push((t, 1, i));
        }
        entries.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut times = Vec::with_capacity(entries.len());
        let mut obs = Vec::with_capacity(entries.len());
        let mut query_steps = vec![0usize; queries.len()];
        for (step, (t, kind, idx)) in entries.into_iter().enumerate() {
            times.push(t);
            if kind == 0 {
                obs.push(Some(idx));
            } else {
                obs.push(None);
                query_steps[idx] = step;
            }
        }
        Ok((Timeline { times, obs }, query_steps))
    }

    pub(crate) fn len(&self) -> usize {
        self.times.len()
    }
}

/// Forward pass state for one channel over a timeline.
#[derive(Debug, Clone)]
pub struct ChannelFilter {
    pub m_pred: Vec<Mat>,
    pub p_pred: Vec<Mat>,
    pub m_filt: Vec<Mat>,
    pub p_filt: Vec<Mat>,
    /// Sum over steps of log N(y_tilde; H m_pred, Lambda).
    pub log_partition: f64,
    /// Transition into each step; index 0 holds the zero-gap placeholder.
    pub(crate) trans: Vec<DiscreteTransition>,
}

/// Filtering output across channels.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub channels: Vec<ChannelFilter>,
    /// Sum of per-channel log-partitions (the E3 term).
    pub log_partition: f64,
}

/// Smoothing output across channels.
#[derive(Debug, Clone)]
pub struct SmoothedPosterior {
    pub channels: Vec<ChannelSmoothed>,
    pub log_partition: f64,
}

#[derive(Debug, Clone)]
pub struct ChannelSmoothed {
    pub m_smooth: Vec<Mat>,
    pub p_smooth: Vec<Mat>,
    /// RTS gain G_i mapping step i+1 residuals back to step i; length T-1.
    pub(crate) gains: Vec<Mat>,
}

/// Posterior marginals of Z = H s at requested times.
#[derive(Debug, Clone)]
pub struct PredictedMarginals {
    pub times: Vec<f64>,
    /// mean[q][l]
    pub mean: Vec<Vec<f64>>,
    /// var[q][l]
    pub var: Vec<Vec<f64>>,
}

pub(crate) fn filter_channel(
    ss: &KernelStateSpace,
    timeline: &Timeline,
    sites: &GaussianSites,
    channel: usize,
) -> Result<ChannelFilter> {
    let t_len = timeline.len();
    let d = ss.dim();
    let h_t = ss.h.transpose();
    let ident = Mat::identity(d);
    let mut cache = TransitionCache::new(ss);

    let mut m_pred = Vec::with_capacity(t_len);
    let mut p_pred = Vec::with_capacity(t_len);
    let mut m_filt: Vec<Mat> = Vec::with_capacity(t_len);
    let mut p_filt: Vec<Mat> = Vec::with_capacity(t_len);
    let mut trans = Vec::with_capacity(t_len);
    let mut log_partition = 0.0;

    for i in 0..t_len {
        let (mp, pp, tr) = if i == 0 {
            // A stationary prior predicts to itself regardless of the gap.
            (
                ss.m0.clone(),
                ss.pinf.clone(),
                DiscreteTransition {
                    a: Mat::identity(d),
                    q: Mat::zeros(d, d),
                    dt: 0.0,
                },
            )
        } else {
            let dt = timeline.times[i] - timeline.times[i - 1];
            let tr = cache.get(dt)?.clone();
            let mp = tr.a.matmul(&m_filt[i - 1]);
            let pp = tr
                .a
                .matmul(&p_filt[i - 1])
                .matmul_nt(&tr.a)
                .add(&tr.q)
                .symmetrize();
            (mp, pp, tr)
        };

        let (mf, pf) = match timeline.obs[i] {
            Some(row) => {
                let y = sites.y(row, channel);
                let v = sites.v(row, channel);
                let lambda = pp.quad_form(&h_t) + v;
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::Numerical(format!(
                        "innovation variance collapsed at step {i} (channel {channel}): {lambda}"
                    )));
                }
                let innov = y - ss.h.matmul(&mp).as_scalar();
                log_partition += -0.5 * (LN_2PI + lambda.ln() + innov * innov / lambda);
                let w = pp.matmul(&h_t).scale(1.0 / lambda);
                let mf = mp.add(&w.scale(innov));
                // Joseph form keeps the update symmetric PSD.
                let j = ident.sub(&w.matmul(&ss.h));
                let pf = j
                    .matmul(&pp)
                    .matmul_nt(&j)
                    .add(&w.matmul_nt(&w).scale(v))
                    .symmetrize();
                (mf, pf)
            }
            None => (mp.clone(), pp.clone()),
        };

        if !mf.is_finite() || !pf.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite filter state at step {i} (channel {channel})"
            )));
        }
        m_pred.push(mp);
        p_pred.push(pp);
        m_filt.push(mf);
        p_filt.push(pf);
        trans.push(tr);
    }

    Ok(ChannelFilter {
        m_pred,
        p_pred,
        m_filt,
        p_filt,
        log_partition,
        trans,
    })
}

pub(crate) fn smooth_channel(cf: &ChannelFilter) -> Result<ChannelSmoothed> {
    let t_len = cf.m_filt.len();
    let mut m_smooth = vec![Mat::zeros(0, 0); t_len];
    let mut p_smooth = vec![Mat::zeros(0, 0); t_len];
    let mut gains = vec![Mat::zeros(0, 0); t_len.saturating_sub(1)];

    m_smooth[t_len - 1] = cf.m_filt[t_len - 1].clone();
    p_smooth[t_len - 1] = cf.p_filt[t_len - 1].clone();

    for i in (0..t_len.saturating_sub(1)).rev() {
        let a_next = &cf.trans[i + 1].a;
        let pp_next = &cf.p_pred[i + 1];
        let chol = cholesky(pp_next).map_err(|e| {
            Error::Numerical(format!("smoother solve failed at step {}: {e}", i + 1))
        })?;
        // G = P^f A^T (P^p_{i+1})^{-1}, computed as solve(P^p, A P^f)^T.
        let g = chol.solve(&a_next.matmul(&cf.p_filt[i]))?.transpose();
        let m = cf.m_filt[i].add(&g.matmul(&m_smooth[i + 1].sub(&cf.m_pred[i + 1])));
        let p = cf.p_filt[i]
            .add(&g.matmul(&p_smooth[i + 1].sub(pp_next)).matmul_nt(&g))
            .symmetrize();
        if !m.is_finite() || !p.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite smoothed state at step {i}"
            )));
        }
        m_smooth[i] = m;
        p_smooth[i] = p;
        gains[i] = g;
    }

    Ok(ChannelSmoothed {
        m_smooth,
        p_smooth,
        gains,
    })
}

/// Kalman filter over the site timeline, independently per channel.
pub fn filter(channels: &[KernelStateSpace], sites: &GaussianSites) -> Result<FilterResult> {
    if channels.len() != sites.channels() {
        return Err(Error::Dimension {
            op: "filter",
            expected: format!("{} channels", channels.len()),
            found: format!("{} site channels", sites.channels()),
        });
    }
    let timeline = Timeline::from_sites(sites);
    let per_channel: Vec<ChannelFilter> = channels
        .iter()
        .enumerate()
        .map(|(l, ss)| filter_channel(ss, &timeline, sites, l))
        .collect::<Result<_>>()?;
    let log_partition = per_channel.iter().map(|c| c.log_partition).sum();
    Ok(FilterResult {
        channels: per_channel,
        log_partition,
    })
}

/// RTS smoothing pass over a filter result produced on the same inputs.
pub fn smooth(
    channels: &[KernelStateSpace],
    sites: &GaussianSites,
    fr: &FilterResult,
) -> Result<SmoothedPosterior> {
    if fr.channels.len() != channels.len() {
        return Err(Error::Dimension {
            op: "smooth",
            expected: format!("{} channels", channels.len()),
            found: format!("{} filtered channels", fr.channels.len()),
        });
    }
    if fr.channels.iter().any(|c| c.m_filt.len() != sites.len()) {
        return Err(Error::Dimension {
            op: "smooth",
            expected: format!("{} steps", sites.len()),
            found: "filter result with different length".into(),
        });
    }
    let per_channel: Vec<ChannelSmoothed> = fr
        .channels
        .iter()
        .map(smooth_channel)
        .collect::<Result<_>>()?;
    Ok(SmoothedPosterior {
        channels: per_channel,
        log_partition: fr.log_partition,
    })
}

/// Smoothed marginals of Z at arbitrary query times (any order, duplicates
/// allowed), via pseudo-site insertion.
pub fn predict_at(
    channels: &[KernelStateSpace],
    sites: &GaussianSites,
    query_times: &[f64],
) -> Result<PredictedMarginals> {
    if channels.len() != sites.channels() {
        return Err(Error::Dimension {
            op: "predict_at",
            expected: format!("{} channels", channels.len()),
            found: format!("{} site channels", sites.channels()),
        });
    }
    let (timeline, query_steps) = Timeline::with_queries(sites, query_times)?;
    let mut mean = vec![vec![0.0; channels.len()]; query_times.len()];
    let mut var = vec![vec![0.0; channels.len()]; query_times.len()];
    for (l, ss) in channels.iter().enumerate() {
        let cf = filter_channel(ss, &timeline, sites, l)?;
        let sm = smooth_channel(&cf)?;
        let h_t = ss.h.transpose();
        for (q, &step) in query_steps.iter().enumerate() {
            mean[q][l] = ss.h.matmul(&sm.m_smooth[step]).as_scalar();
            var[q][l] = sm.p_smooth[step].quad_form(&h_t);
        }
    }
    Ok(PredictedMarginals {
        times: query_times.to_vec(),
        mean,
        var,
    })
}
