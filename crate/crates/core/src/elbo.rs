//! The variational objective and its evaluation-side counterparts.
//!
//! E1 is the analytic expectation of the site log-density under the
//! smoothed marginals, E2 the Monte-Carlo reconstruction term, E3 the
//! log-partition accumulated by the filter. The importance-weighted NLL
//! estimator draws joint posterior paths by backward ancestral sampling
//! of the smoothed Markov chain.

use crate::error::{Error, Result};
use crate::kalman::{
    filter_channel, smooth_channel, ChannelFilter, ChannelSmoothed, GaussianSites,
    SmoothedPosterior, Timeline,
};
use crate::kernel::KernelStateSpace;
use crate::mat::{cholesky, Mat};
use crate::model::{Model, SequenceElbo};
use crate::stats::{derive_rng, fill_standard_normal, ln_normal_pdf, logsumexp};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Stream tags so independent purposes never share draws.
const TAG_ELBO: u64 = 0xE1B0;
const TAG_IWNLL: u64 = 0x11A7;

/// Three-term objective breakdown, summed over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub elbo: f64,
    /// Diagnostic KL surrogate e1 - e3.
    pub kl: f64,
}

impl ElboBreakdown {
    fn from_parts(e1: f64, e2: f64, e3: f64) -> Self {
        ElboBreakdown {
            e1,
            e2,
            e3,
            elbo: e3 + e2 - e1,
            kl: e1 - e3,
        }
    }
}

/// One training sequence: strictly increasing times and the observation
/// rows the encoder consumes (already corrupted/subsetted upstream).
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
}

/// Analytic per-site expectation
/// E_q[log N(y~ | H s, v~)] = log N(y~; H m_s, v~) - (H P_s H^T) / (2 v~),
/// summed over steps and channels.
pub fn e1_analytic(
    post: &SmoothedPosterior,
    channels: &[KernelStateSpace],
    sites: &GaussianSites,
) -> f64 {
    let mut total = 0.0;
    for (l, ss) in channels.iter().enumerate() {
        let h_t = ss.h.transpose();
        let ch = &post.channels[l];
        for t in 0..sites.len() {
            let zm = ss.h.matmul(&ch.m_smooth[t]).as_scalar();
            let zv = ch.p_smooth[t].quad_form(&h_t);
            let v = sites.v(t, l);
            total += ln_normal_pdf(sites.y(t, l), zm, v) - 0.5 * zv / v;
        }
    }
    total
}

/// One joint draw from the per-timestep smoothed marginals.
#[derive(Debug, Clone)]
pub struct LatentSample {
    /// T x (sum of state dims), row-major per timestep.
    pub s: Vec<f64>,
    /// T x L latent values z = H s.
    pub z: Vec<f64>,
    /// The standard-normal draws that produced `s`.
    pub noise: Vec<f64>,
}

pub(crate) fn sample_posterior_with(
    post: &SmoothedPosterior,
    channels: &[KernelStateSpace],
    k: usize,
    mut eps_fill: impl FnMut(&mut [f64]),
) -> Result<Vec<LatentSample>> {
    let t_len = post.channels[0].m_smooth.len();
    let l = channels.len();
    let state_total: usize = channels.iter().map(|c| c.dim()).sum();
    // Per-(t, l) factors are shared across the K draws.
    let mut chols = Vec::with_capacity(t_len * l);
    for t in 0..t_len {
        for ss in post.channels.iter() {
            chols.push(cholesky(&ss.p_smooth[t])?);
        }
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut s = vec![0.0; t_len * state_total];
        let mut z = vec![0.0; t_len * l];
        let mut noise = vec![0.0; t_len * state_total];
        for t in 0..t_len {
            let mut off = 0;
            for (c, ss) in channels.iter().enumerate() {
                let d = ss.dim();
                let eps = &mut noise[t * state_total + off..t * state_total + off + d];
                eps_fill(eps);
                let le = chols[t * l + c].lower().matmul(&Mat::col(eps.to_vec()));
                let m = &post.channels[c].m_smooth[t];
                for i in 0..d {
                    s[t * state_total + off + i] = m.get(i, 0) + le.get(i, 0);
                }
                // z = H s with H = e_1^T in the companion form.
                let mut zval = 0.0;
                for i in 0..d {
                    zval += ss.h.get(0, i) * s[t * state_total + off + i];
                }
                z[t * l + c] = zval;
                off += d;
            }
        }
        out.push(LatentSample { s, z, noise });
    }
    Ok(out)
}

/// K reparameterized draws from the smoothed per-timestep marginals.
/// Cross-time correlations are not sampled here; joint paths are drawn
/// only inside the importance-weighted estimator where the weights need
/// joint densities.
pub fn sample_posterior(
    post: &SmoothedPosterior,
    channels: &[KernelStateSpace],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<LatentSample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    sample_posterior_with(post, channels, k, |buf| fill_standard_normal(rng, buf))
}

fn check_batch(batch: &[TrainSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.times.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sequence {i} has no observed steps"
            )));
        }
        if s.times.len() != s.y.len() {
            return Err(Error::Dimension {
                op: "elbo",
                expected: format!("{} observation rows", s.times.len()),
                found: format!("{}", s.y.len()),
            });
        }
    }
    Ok(())
}

fn eval_batch(
    model: &Model,
    params: &[f64],
    batch: &[TrainSequence],
    k: usize,
    seed: u64,
    with_grad: bool,
) -> Result<(ElboBreakdown, Vec<f64>)> {
    check_batch(batch)?;
    let n_params = model.layout().total();
    let per_item: Vec<Result<(SequenceElbo, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(idx, seq)| {
            let mut rng = derive_rng(seed, &[TAG_ELBO, idx as u64]);
            if with_grad {
                let mut grad = vec![0.0; n_params];
                let b = model.sequence_elbo_grad(params, &seq.times, &seq.y, k, &mut rng, &mut grad)?;
                Ok((b, grad))
            } else {
                let b = model.sequence_elbo(params, &seq.times, &seq.y, k, &mut rng)?;
                Ok((b, Vec::new()))
            }
        })
        .collect();

    let mut e1 = 0.0;
    let mut e2 = 0.0;
    let mut e3 = 0.0;
    let mut grad = vec![0.0; if with_grad { n_params } else { 0 }];
    // Deterministic index-order reduction regardless of scheduling.
    for item in per_item {
        let (b, g) = item?;
        e1 += b.e1;
        e2 += b.e2;
        e3 += b.e3;
        if with_grad {
            for (acc, x) in grad.iter_mut().zip(&g) {
                *acc += x;
            }
        }
    }
    Ok((ElboBreakdown::from_parts(e1, e2, e3), grad))
}

/// Batch objective: encoder -> sites -> filter/smooth -> E1/E2/E3, summed
/// over the batch. Deterministic given (params, batch, k, seed).
pub fn elbo(
    model: &Model,
    params: &[f64],
    batch: &[TrainSequence],
    k: usize,
    seed: u64,
) -> Result<ElboBreakdown> {
    Ok(eval_batch(model, params, batch, k, seed, false)?.0)
}

/// Batch objective plus the gradient of its `elbo` field.
pub fn elbo_with_grad(
    model: &Model,
    params: &[f64],
    batch: &[TrainSequence],
    k: usize,
    seed: u64,
) -> Result<(ElboBreakdown, Vec<f64>)> {
    eval_batch(model, params, batch, k, seed, true)
}

/// Sequence view for evaluation: full timeline with targets, encoder
/// inputs, and the unobserved-step mask.
#[derive(Debug, Clone)]
pub struct EvalSequence<'a> {
    pub times: &'a [f64],
    /// Reconstruction targets at every step (clean data).
    pub y_target: &'a [Vec<f64>],
    /// Encoder inputs at every step (possibly corrupted); rows at missing
    /// steps are ignored.
    pub y_input: &'a [Vec<f64>],
    /// true = step unseen by the encoder.
    pub missing: &'a [bool],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IwNllParts {
    pub seen: f64,
    pub missing: f64,
}

/// Joint posterior paths over a (possibly query-augmented) timeline via
/// backward ancestral sampling. Returns z[k][step][channel].
fn sample_joint_paths(
    channels: &[KernelStateSpace],
    passes: &[(ChannelFilter, ChannelSmoothed)],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let t_len = passes[0].0.m_filt.len();
    let l = channels.len();
    let mut z = vec![vec![vec![0.0; l]; t_len]; k];
    let mut eps = vec![0.0; 4];
    for (c, ss) in channels.iter().enumerate() {
        let d = ss.dim();
        let (cf, sm) = &passes[c];
        // Final-step factor and per-step conditional factors are shared
        // across samples.
        let last_chol = cholesky(&sm.p_smooth[t_len - 1])?;
        let mut step_chol = Vec::with_capacity(t_len.saturating_sub(1));
        for i in 0..t_len.saturating_sub(1) {
            let g = &sm.gains[i];
            let cond = cf.p_filt[i]
                .sub(&g.matmul(&cf.p_pred[i + 1]).matmul_nt(g))
                .symmetrize();
            step_chol.push(cholesky(&cond)?);
        }
        for path in z.iter_mut() {
            // s_{T-1} ~ N(m_s, P_s).
            fill_standard_normal(rng, &mut eps[..d]);
            let mut s_next = sm.m_smooth[t_len - 1]
                .add(&last_chol.lower().matmul(&Mat::col(eps[..d].to_vec())));
            path[t_len - 1][c] = ss.h.matmul(&s_next).as_scalar();
            for i in (0..t_len.saturating_sub(1)).rev() {
                let g = &sm.gains[i];
                let mean = cf.m_filt[i].add(&g.matmul(&s_next.sub(&cf.m_pred[i + 1])));
                fill_standard_normal(rng, &mut eps[..d]);
                let s_i = mean.add(&step_chol[i].lower().matmul(&Mat::col(eps[..d].to_vec())));
                path[i][c] = ss.h.matmul(&s_i).as_scalar();
                s_next = s_i;
            }
        }
    }
    Ok(z)
}

pub(crate) fn iw_nll_parts(
    model: &Model,
    params: &[f64],
    seq: &EvalSequence,
    k: usize,
    seed: u64,
) -> Result<IwNllParts> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let t_full = seq.times.len();
    if seq.y_target.len() != t_full || seq.y_input.len() != t_full || seq.missing.len() != t_full {
        return Err(Error::Dimension {
            op: "iw_nll",
            expected: format!("{t_full} rows"),
            found: "inconsistent sequence arrays".into(),
        });
    }
    let seen_idx: Vec<usize> = (0..t_full).filter(|&i| !seq.missing[i]).collect();
    if seen_idx.is_empty() {
        return Err(Error::InvalidArgument("no observed steps in sequence".into()));
    }
    let missing_times: Vec<f64> = (0..t_full)
        .filter(|&i| seq.missing[i])
        .map(|i| seq.times[i])
        .collect();

    let seen_times: Vec<f64> = seen_idx.iter().map(|&i| seq.times[i]).collect();
    let seen_inputs: Vec<Vec<f64>> = seen_idx.iter().map(|&i| seq.y_input[i].clone()).collect();
    let sites = model.sites(params, &seen_times, &seen_inputs)?;
    let channels = model.state_spaces(params);

    let (timeline, query_steps) = Timeline::with_queries(&sites, &missing_times)?;
    let mut passes = Vec::with_capacity(channels.len());
    for (l, ss) in channels.iter().enumerate() {
        let cf = filter_channel(ss, &timeline, &sites, l)?;
        let sm = smooth_channel(&cf)?;
        passes.push((cf, sm));
    }
    let e3: f64 = passes.iter().map(|(cf, _)| cf.log_partition).sum();

    let mut rng = derive_rng(seed, &[TAG_IWNLL]);
    let z_paths = sample_joint_paths(&channels, &passes, k, &mut rng)?;

    // Map full-timeline steps back: seen step index in the merged timeline.
    let mut step_of_seen = vec![0usize; seen_idx.len()];
    for (step, obs) in timeline.obs.iter().enumerate() {
        if let Some(row) = obs {
            step_of_seen[*row] = step;
        }
    }

    let l = channels.len();
    let mut seen_w = Vec::with_capacity(k);
    let mut miss_w = Vec::with_capacity(k);
    for path in &z_paths {
        let mut ll_seen = 0.0;
        let mut site_ll = 0.0;
        for (row, &orig) in seen_idx.iter().enumerate() {
            let step = step_of_seen[row];
            let z = Mat::col(path[step].clone());
            ll_seen += model.decoder_loglik(params, &z, &Mat::col(seq.y_target[orig].clone()));
            for c in 0..l {
                site_ll += ln_normal_pdf(sites.y(row, c), path[step][c], sites.v(row, c));
            }
        }
        seen_w.push(ll_seen - site_ll);

        let mut ll_miss = 0.0;
        for (q, &step) in query_steps.iter().enumerate() {
            let orig = (0..t_full).filter(|&i| seq.missing[i]).nth(q).unwrap();
            let z = Mat::col(path[step].clone());
            ll_miss += model.decoder_loglik(params, &z, &Mat::col(seq.y_target[orig].clone()));
        }
        miss_w.push(ll_miss);
    }

    let ln_k = (k as f64).ln();
    let log_p_seen = -ln_k + logsumexp(&seen_w) + e3;
    let log_p_missing = if missing_times.is_empty() {
        0.0
    } else {
        -ln_k + logsumexp(&miss_w)
    };
    Ok(IwNllParts {
        seen: -log_p_seen,
        missing: -log_p_missing,
    })
}

/// Importance-weighted negative log-likelihood (joint-path estimator).
/// Unseen steps are handled by the predictive decomposition: their latents
/// are sampled jointly with the seen-step paths via pseudo-site insertion.
pub fn iw_nll(
    model: &Model,
    params: &[f64],
    seq: &EvalSequence,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let parts = iw_nll_parts(model, params, seq, k, seed)?;
    Ok(parts.seen + parts.missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{filter, smooth};
    use crate::kernel::{to_state_space, KernelFamily, KernelSpec};
    use crate::model::{ChannelKernel, DecoderKind, EncoderKind, ModelConfig};
    use crate::oracle::dense_regress;
    use crate::stats::LN_2PI;

    fn conjugate_model(l: usize, sigma2: f64) -> Model {
        Model::new(ModelConfig {
            d_y: l,
            kernels: (0..l)
                .map(|i| ChannelKernel {
                    family: KernelFamily::Matern32,
                    variance: 1.0 + 0.4 * i as f64,
                    lengthscale: 0.9,
                    trainable: true,
                })
                .collect(),
            encoder: EncoderKind::Fixed { variance: sigma2 },
            decoder: DecoderKind::Identity,
            sigma2_y_init: sigma2,
            spatial: None,
        })
        .unwrap()
    }

    fn mlp_model(l: usize, d_y: usize) -> Model {
        Model::new(ModelConfig {
            d_y,
            kernels: (0..l)
                .map(|i| ChannelKernel {
                    family: KernelFamily::Matern32,
                    variance: 1.0,
                    lengthscale: 0.8 + 0.3 * i as f64,
                    trainable: true,
                })
                .collect(),
            encoder: EncoderKind::Mlp { hidden: 8 },
            decoder: DecoderKind::Mlp { hidden: 6 },
            sigma2_y_init: 0.6,
            spatial: None,
        })
        .unwrap()
    }

    fn rand_sequence(seed: u64, t: usize, d: usize) -> TrainSequence {
        let mut rng = derive_rng(seed, &[100]);
        let mut times = vec![0.0];
        for i in 1..t {
            let mut step = [0.0];
            fill_standard_normal(&mut rng, &mut step);
            times.push(times[i - 1] + 0.2 + 0.1 * step[0].abs());
        }
        let y = (0..t)
            .map(|_| {
                let mut row = vec![0.0; d];
                fill_standard_normal(&mut rng, &mut row);
                row
            })
            .collect();
        TrainSequence { times, y }
    }

    #[test]
    fn e1_degenerate_posterior_reduces_to_plain_density() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let ss = to_state_space(&spec);
        let sites = GaussianSites::new(vec![0.0, 1.0], vec![0.3, -0.5], vec![0.4, 0.7], 1).unwrap();
        let fr = filter(&[ss.clone()], &sites).unwrap();
        let mut sm = smooth(&[ss.clone()], &sites, &fr).unwrap();
        for p in sm.channels[0].p_smooth.iter_mut() {
            *p = Mat::zeros(2, 2);
        }
        let got = e1_analytic(&sm, &[ss.clone()], &sites);
        let mut expected = 0.0;
        for t in 0..2 {
            let zm = ss.h.matmul(&sm.channels[0].m_smooth[t]).as_scalar();
            expected += ln_normal_pdf(sites.y(t, 0), zm, sites.v(t, 0));
        }
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn e1_single_term_plug_in_value() {
        // m_s = 0, y~ = 0, v~ = 1, H P_s H^T = 1 gives -ln(2pi)/2 - 1/2.
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let ss = to_state_space(&spec);
        let sites = GaussianSites::new(vec![0.0], vec![0.0], vec![1.0], 1).unwrap();
        let fr = filter(&[ss.clone()], &sites).unwrap();
        let mut sm = smooth(&[ss.clone()], &sites, &fr).unwrap();
        sm.channels[0].m_smooth[0] = Mat::zeros(2, 1);
        sm.channels[0].p_smooth[0] = Mat::diag(&[1.0, 0.0]);
        let got = e1_analytic(&sm, &[ss], &sites);
        assert!((got - (-0.5 * LN_2PI - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn e1_matches_monte_carlo() {
        let mut rng = derive_rng(71, &[1]);
        let specs = [
            KernelSpec::new(KernelFamily::Matern32, 1.3, 0.8).unwrap(),
            KernelSpec::new(KernelFamily::Matern52, 0.7, 1.4).unwrap(),
        ];
        let channels: Vec<_> = specs.iter().map(to_state_space).collect();
        let t = 10;
        let mut times = vec![0.0];
        for i in 1..t {
            times.push(times[i - 1] + 0.3);
        }
        let mut y = vec![0.0; t * 2];
        fill_standard_normal(&mut rng, &mut y);
        let v: Vec<f64> = (0..t * 2).map(|i| 0.2 + 0.05 * (i % 5) as f64).collect();
        let sites = GaussianSites::new(times, y, v, 2).unwrap();
        let fr = filter(&channels, &sites).unwrap();
        let sm = smooth(&channels, &sites, &fr).unwrap();

        let analytic = e1_analytic(&sm, &channels, &sites);

        let n = 100_000;
        let samples = sample_posterior(&sm, &channels, n, &mut rng).unwrap();
        let mut vals = Vec::with_capacity(n);
        for s in &samples {
            let mut acc = 0.0;
            for t_i in 0..t {
                for c in 0..2 {
                    acc += ln_normal_pdf(sites.y(t_i, c), s.z[t_i * 2 + c], sites.v(t_i, c));
                }
            }
            vals.push(acc);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (analytic - mean).abs() <= 3.0 * se,
            "analytic {analytic} mc {mean} se {se}"
        );
    }

    #[test]
    fn zero_noise_samples_follow_posterior_mean() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let ss = to_state_space(&spec);
        let sites =
            GaussianSites::new(vec![0.0, 0.5, 1.5], vec![0.4, -0.2, 0.9], vec![0.3; 3], 1).unwrap();
        let fr = filter(&[ss.clone()], &sites).unwrap();
        let sm = smooth(&[ss.clone()], &sites, &fr).unwrap();
        let samples =
            sample_posterior_with(&sm, &[ss.clone()], 2, |buf| buf.iter_mut().for_each(|x| *x = 0.0))
                .unwrap();
        for s in samples {
            for t in 0..3 {
                let zm = ss.h.matmul(&sm.channels[0].m_smooth[t]).as_scalar();
                assert!((s.z[t] - zm).abs() < 1e-14);
                assert!(s.noise.iter().all(|&e| e == 0.0));
            }
        }
    }

    #[test]
    fn sample_moments_match_posterior() {
        let mut rng = derive_rng(72, &[2]);
        let spec = KernelSpec::new(KernelFamily::Matern52, 1.5, 1.0).unwrap();
        let ss = to_state_space(&spec);
        let sites =
            GaussianSites::new(vec![0.0, 0.7, 1.9], vec![0.8, 0.1, -0.4], vec![0.5; 3], 1).unwrap();
        let fr = filter(&[ss.clone()], &sites).unwrap();
        let sm = smooth(&[ss.clone()], &sites, &fr).unwrap();
        let n = 100_000;
        let samples = sample_posterior(&sm, &[ss.clone()], n, &mut rng).unwrap();
        let h_t = ss.h.transpose();
        for t in 0..3 {
            let mean_ref = ss.h.matmul(&sm.channels[0].m_smooth[t]).as_scalar();
            let var_ref = sm.channels[0].p_smooth[t].quad_form(&h_t);
            let mut mean = 0.0;
            for s in &samples {
                mean += s.z[t];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for s in &samples {
                var += (s.z[t] - mean) * (s.z[t] - mean);
            }
            var /= (n - 1) as f64;
            assert!(
                (mean - mean_ref).abs() <= 3.0 * (var_ref / n as f64).sqrt(),
                "t {t}: mean {mean} ref {mean_ref}"
            );
            assert!(
                (var - var_ref).abs() / var_ref < 0.05,
                "t {t}: var {var} ref {var_ref}"
            );
        }
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let model = mlp_model(1, 2);
        let params = model.init_params(1);
        assert!(elbo(&model, &params, &[], 1, 0).is_err());
        let empty = TrainSequence {
            times: vec![],
            y: vec![],
        };
        assert!(elbo(&model, &params, &[empty], 1, 0).is_err());
    }

    #[test]
    fn batch_terms_are_additive() {
        let model = mlp_model(2, 3);
        let params = model.init_params(9);
        let seq = rand_sequence(5, 8, 3);
        let single = elbo(&model, &params, std::slice::from_ref(&seq), 1, 42).unwrap();
        let double = elbo(&model, &params, &[seq.clone(), seq.clone()], 1, 42).unwrap();
        // Deterministic terms add exactly; x + x doubles exactly in fp.
        assert_eq!(double.e1, 2.0 * single.e1);
        assert_eq!(double.e3, 2.0 * single.e3);
        assert_eq!(double.elbo, double.e3 + double.e2 - double.e1);
        assert_eq!(double.kl, double.e1 - double.e3);
    }

    #[test]
    fn conjugate_log_partition_equals_dense_marginal() {
        // Identity decoder, sites fixed to the true likelihood terms: the
        // log-partition is the exact log marginal, so the ELBO (whose E1
        // and E2 integrands coincide pointwise) equals it in expectation.
        let sigma2 = 0.3;
        let model = conjugate_model(2, sigma2);
        let params = model.init_params(3);
        let seq = rand_sequence(11, 20, 2);

        let b = elbo(&model, &params, std::slice::from_ref(&seq), 200, 7).unwrap();
        let mut lml = 0.0;
        for c in 0..2 {
            let spec = model.kernel_spec(&params, c);
            let y: Vec<f64> = seq.y.iter().map(|r| r[c]).collect();
            lml += dense_regress(&spec, &seq.times, &y, &vec![sigma2; 20]).unwrap().lml;
        }
        // Exact identity for the partition term.
        assert!(
            (b.e3 - lml).abs() < 1e-6 * lml.abs().max(1.0),
            "e3 {} vs lml {lml}",
            b.e3
        );
        // E2's integrand equals E1's pointwise here, so the gap between the
        // sampled ELBO and the marginal is pure Monte-Carlo noise.
        assert!(
            (b.elbo - lml).abs() < 0.5,
            "elbo {} vs lml {lml}",
            b.elbo
        );
    }

    #[test]
    fn elbo_bounded_by_iw_estimate_on_identity_model() {
        let sigma2 = 0.4;
        let model = conjugate_model(1, sigma2);
        let params = model.init_params(5);
        let seq = rand_sequence(13, 15, 1);
        let b = elbo(&model, &params, std::slice::from_ref(&seq), 100, 3).unwrap();

        let missing = vec![false; 15];
        let eval_seq = EvalSequence {
            times: &seq.times,
            y_target: &seq.y,
            y_input: &seq.y,
            missing: &missing,
        };
        let nll = iw_nll(&model, &params, &eval_seq, 1000, 17).unwrap();
        // log p >= ELBO up to Monte-Carlo slack on both sides.
        assert!(
            -nll >= b.elbo - 0.5,
            "iw log-lik {} vs elbo {}",
            -nll,
            b.elbo
        );
    }

    #[test]
    fn iw_nll_exact_for_conjugate_sites() {
        // With identity decoder and exact sites the importance weights are
        // constant, so even K=1 recovers the dense marginal exactly.
        let sigma2 = 0.25;
        let model = conjugate_model(2, sigma2);
        let params = model.init_params(8);
        let seq = rand_sequence(19, 12, 2);
        let missing = vec![false; 12];
        let eval_seq = EvalSequence {
            times: &seq.times,
            y_target: &seq.y,
            y_input: &seq.y,
            missing: &missing,
        };
        let nll = iw_nll(&model, &params, &eval_seq, 1, 23).unwrap();
        let mut lml = 0.0;
        for c in 0..2 {
            let spec = model.kernel_spec(&params, c);
            let y: Vec<f64> = seq.y.iter().map(|r| r[c]).collect();
            lml += dense_regress(&spec, &seq.times, &y, &vec![sigma2; 12]).unwrap().lml;
        }
        assert!(
            (nll + lml).abs() < 1e-9 * lml.abs().max(1.0),
            "nll {nll} vs -lml {}",
            -lml
        );
    }

    #[test]
    fn iw_nll_missing_part_is_zero_without_missing_steps() {
        let model = mlp_model(1, 2);
        let params = model.init_params(2);
        let seq = rand_sequence(29, 10, 2);
        let missing = vec![false; 10];
        let eval_seq = EvalSequence {
            times: &seq.times,
            y_target: &seq.y,
            y_input: &seq.y,
            missing: &missing,
        };
        let parts = iw_nll_parts(&model, &params, &eval_seq, 16, 31).unwrap();
        assert_eq!(parts.missing, 0.0);
    }

    #[test]
    fn iw_nll_tightens_in_expectation_as_k_doubles() {
        // Perturbed (non-conjugate) sites so the weights genuinely vary.
        let model = Model::new(ModelConfig {
            d_y: 1,
            kernels: vec![ChannelKernel {
                family: KernelFamily::Matern32,
                variance: 1.0,
                lengthscale: 1.0,
                trainable: true,
            }],
            encoder: EncoderKind::Fixed { variance: 0.9 },
            decoder: DecoderKind::Identity,
            sigma2_y_init: 0.3,
            spatial: None,
        })
        .unwrap();
        let params = model.init_params(4);
        let seq = rand_sequence(37, 12, 1);
        let missing = vec![false; 12];
        let eval_seq = EvalSequence {
            times: &seq.times,
            y_target: &seq.y,
            y_input: &seq.y,
            missing: &missing,
        };

        let ks = [1usize, 2, 4, 8, 16, 32, 64];
        let n_seeds = 50;
        for w in ks.windows(2) {
            let (k_small, k_large) = (w[0], w[1]);
            let mut diffs = Vec::with_capacity(n_seeds);
            for s in 0..n_seeds as u64 {
                let a = iw_nll(&model, &params, &eval_seq, k_small, 1000 + s).unwrap();
                let b = iw_nll(&model, &params, &eval_seq, k_large, 2000 + s).unwrap();
                diffs.push(a - b);
            }
            let mean = diffs.iter().sum::<f64>() / n_seeds as f64;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (n_seeds - 1) as f64;
            let se = (var / n_seeds as f64).sqrt();
            // NLL must not increase in expectation as K doubles.
            assert!(
                mean >= -3.0 * se,
                "K {k_small}->{k_large}: mean diff {mean} se {se}"
            );
        }
    }

    #[test]
    fn elbo_invariant_to_channel_permutation() {
        // Permuting kernels together with encoder output slots and decoder
        // input columns leaves the deterministic terms unchanged.
        let l = 2;
        let d_y = 3;
        let base = mlp_model(l, d_y);
        let params = base.init_params(33);
        let seq = rand_sequence(41, 9, d_y);
        let b_base = elbo(&base, &params, std::slice::from_ref(&seq), 400, 5).unwrap();

        // Swap the two channels.
        let perm_model = Model::new(ModelConfig {
            d_y,
            kernels: vec![
                base.cfg().kernels[1].clone(),
                base.cfg().kernels[0].clone(),
            ],
            encoder: base.cfg().encoder.clone(),
            decoder: base.cfg().decoder.clone(),
            sigma2_y_init: base.cfg().sigma2_y_init,
            spatial: None,
        })
        .unwrap();
        let mut perm_params = params.clone();
        let layout = base.layout();
        // Encoder output layer rows: mean rows (0,1) and variance rows (2,3)
        // swap within their halves; weights are 2L x hidden.
        let w1 = layout.index_of("enc.w1").unwrap();
        let b1 = layout.index_of("enc.b1").unwrap();
        let hidden = layout.segments()[w1].cols;
        let swap_rows = |p: &mut Vec<f64>, seg: usize, cols: usize, r_a: usize, r_b: usize| {
            let o = layout.offset(seg);
            for c in 0..cols {
                p.swap(o + r_a * cols + c, o + r_b * cols + c);
            }
        };
        swap_rows(&mut perm_params, w1, hidden, 0, 1);
        swap_rows(&mut perm_params, w1, hidden, 2, 3);
        swap_rows(&mut perm_params, b1, 1, 0, 1);
        swap_rows(&mut perm_params, b1, 1, 2, 3);
        // Decoder input columns swap (w0 is hidden x L).
        let dw0 = layout.index_of("dec.w0").unwrap();
        let o = layout.offset(dw0);
        let rows = layout.segments()[dw0].rows;
        for r in 0..rows {
            perm_params.swap(o + r * l, o + r * l + 1);
        }
        // Kernel hyperparameter segments swap.
        let k0v = layout.offset(layout.index_of("kern0.log_var").unwrap());
        let k0l = layout.offset(layout.index_of("kern0.log_len").unwrap());
        let k1v = layout.offset(layout.index_of("kern1.log_var").unwrap());
        let k1l = layout.offset(layout.index_of("kern1.log_len").unwrap());
        perm_params.swap(k0v, k1v);
        perm_params.swap(k0l, k1l);

        let b_perm = elbo(&perm_model, &perm_params, std::slice::from_ref(&seq), 400, 5).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-9);
        assert!(rel(b_perm.e1, b_base.e1) < 1e-10, "{} vs {}", b_perm.e1, b_base.e1);
        assert!(rel(b_perm.e3, b_base.e3) < 1e-10);
        // E2 redraws noise per channel slot; agreement is statistical.
        assert!(
            (b_perm.e2 - b_base.e2).abs() / b_base.e2.abs().max(1.0) < 0.05,
            "{} vs {}",
            b_perm.e2,
            b_base.e2
        );
    }
}
