//! The trainable model: encoder, decoder, kernel hyperparameters, and the
//! tape-recorded forward pass of the training objective.
//!
//! The plain inference modules (`kalman`, `spatial`) stay gradient-free;
//! this module mirrors their recursions on the autodiff tape so that the
//! objective differentiates through the filter, the smoother, the
//! discretized transitions, and the Cholesky reparameterization. Unit
//! tests pin the two paths against each other.

use crate::autodiff::{AsmEntry, Tape, Var};
use crate::error::{Error, Result};
use crate::kalman::{GaussianSites, LN_2PI};
use crate::kernel::{to_state_space, KernelFamily, KernelSpec, KernelStateSpace, TransitionCache};
use crate::mat::Mat;
use crate::nn::{mlp_forward, mlp_forward_plain, Layout, MlpArch, MlpVars, SegmentDef};
use crate::spatial::{st_build, SpatialKernelSpec, SpatioTemporalState};
use crate::stats::{derive_rng, fill_standard_normal};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Variance floor added to the encoder's softplus variance head.
pub const SITE_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum EncoderKind {
    /// Linear(D_y, hidden)-ReLU-Linear(hidden, 2L): means then raw variances.
    Mlp { hidden: usize },
    /// Sites copied from the observations (requires D_y == L) with a fixed
    /// variance; used for conjugate setups and diagnostics.
    Fixed { variance: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum DecoderKind {
    /// Linear(L, hidden)-ReLU-Linear(hidden, D_y).
    Mlp { hidden: usize },
    /// phi(z) = z (requires D_y == L).
    Identity,
}

/// Per-channel kernel configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelKernel {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscale: f64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_y: usize,
    pub kernels: Vec<ChannelKernel>,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub sigma2_y_init: f64,
    /// Spatial kernel for spatiotemporal data; fixed (not trained).
    pub spatial: Option<SpatialKernelSpec>,
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        self.kernels.len()
    }
}

/// Model with a frozen parameter layout.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    enc_seg: Option<usize>,
    dec_seg: Option<usize>,
    kern_seg: usize,
    sigma_seg: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        let l = cfg.latent_channels();
        if l == 0 {
            return Err(Error::InvalidArgument("model needs at least one latent channel".into()));
        }
        if cfg.d_y == 0 {
            return Err(Error::InvalidArgument("observation dimension must be positive".into()));
        }
        for k in &cfg.kernels {
            KernelSpec::new(k.family, k.variance, k.lengthscale)?;
        }
        if matches!(cfg.encoder, EncoderKind::Fixed { .. }) && cfg.d_y != l {
            return Err(Error::InvalidArgument(
                "fixed-site encoder requires D_y == latent channels".into(),
            ));
        }
        if let EncoderKind::Fixed { variance } = cfg.encoder {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::InvalidArgument("fixed site variance must be positive".into()));
            }
        }
        if matches!(cfg.decoder, DecoderKind::Identity) && cfg.d_y != l {
            return Err(Error::InvalidArgument(
                "identity decoder requires D_y == latent channels".into(),
            ));
        }
        if !(cfg.sigma2_y_init > 0.0 && cfg.sigma2_y_init.is_finite()) {
            return Err(Error::InvalidArgument("sigma2_y_init must be positive".into()));
        }

        let mut segs: Vec<SegmentDef> = Vec::new();
        let enc_seg = match cfg.encoder {
            EncoderKind::Mlp { hidden } => {
                let idx = segs.len();
                MlpArch::new(vec![cfg.d_y, hidden, 2 * l]).register(&mut segs, "enc", true);
                Some(idx)
            }
            EncoderKind::Fixed { .. } => None,
        };
        let dec_seg = match cfg.decoder {
            DecoderKind::Mlp { hidden } => {
                let idx = segs.len();
                MlpArch::new(vec![l, hidden, cfg.d_y]).register(&mut segs, "dec", true);
                Some(idx)
            }
            DecoderKind::Identity => None,
        };
        let kern_seg = segs.len();
        for (i, k) in cfg.kernels.iter().enumerate() {
            segs.push(SegmentDef {
                name: format!("kern{i}.log_var"),
                rows: 1,
                cols: 1,
                trainable: k.trainable,
            });
            segs.push(SegmentDef {
                name: format!("kern{i}.log_len"),
                rows: 1,
                cols: 1,
                trainable: k.trainable,
            });
        }
        let sigma_seg = segs.len();
        segs.push(SegmentDef {
            name: "log_sigma2_y".into(),
            rows: 1,
            cols: 1,
            trainable: true,
        });

        Ok(Model {
            cfg,
            layout: Layout::new(segs),
            enc_seg,
            dec_seg,
            kern_seg,
            sigma_seg,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels()
    }

    /// Weights ~ N(0, 1/fan_in), biases zero, kernel hyperparameters and
    /// noise variance from the config.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.layout.total()];
        let mut rng = derive_rng(seed, &[0x1217]);
        for (i, seg) in self.layout.segments().iter().enumerate() {
            if seg.name.ends_with(|c: char| c.is_ascii_digit()) && seg.name.contains(".w") {
                let fan_in = seg.cols as f64;
                let std = (1.0 / fan_in).sqrt();
                let o = self.layout.offset(i);
                let mut buf = vec![0.0; seg.len()];
                fill_standard_normal(&mut rng, &mut buf);
                for (k, b) in buf.iter().enumerate() {
                    params[o + k] = b * std;
                }
            }
        }
        for (i, k) in self.cfg.kernels.iter().enumerate() {
            params[self.layout.offset(self.kern_seg + 2 * i)] = k.variance.ln();
            params[self.layout.offset(self.kern_seg + 2 * i + 1)] = k.lengthscale.ln();
        }
        params[self.layout.offset(self.sigma_seg)] = self.cfg.sigma2_y_init.ln();
        params
    }

    pub fn sigma2_y(&self, params: &[f64]) -> f64 {
        params[self.layout.offset(self.sigma_seg)].exp()
    }

    /// Kernel spec of one channel under the current parameters.
    pub fn kernel_spec(&self, params: &[f64], channel: usize) -> KernelSpec {
        KernelSpec {
            family: self.cfg.kernels[channel].family,
            log_variance: params[self.layout.offset(self.kern_seg + 2 * channel)],
            log_lengthscale: params[self.layout.offset(self.kern_seg + 2 * channel + 1)],
        }
    }

    pub fn state_spaces(&self, params: &[f64]) -> Vec<KernelStateSpace> {
        (0..self.latent_channels())
            .map(|l| to_state_space(&self.kernel_spec(params, l)))
            .collect()
    }

    /// Encoder sites for one observation vector.
    pub fn encode_plain(&self, params: &[f64], y: &Mat) -> (Vec<f64>, Vec<f64>) {
        let l = self.latent_channels();
        match self.cfg.encoder {
            EncoderKind::Mlp { .. } => {
                let out = mlp_forward_plain(&self.layout, params, self.enc_seg.unwrap(), 2, y);
                let means = (0..l).map(|i| out.get(i, 0)).collect();
                let vars = (0..l)
                    .map(|i| {
                        let x = out.get(l + i, 0);
                        softplus(x) + SITE_VARIANCE_FLOOR
                    })
                    .collect();
                (means, vars)
            }
            EncoderKind::Fixed { variance } => {
                ((0..l).map(|i| y.get(i, 0)).collect(), vec![variance; l])
            }
        }
    }

    /// Builds Gaussian sites over a whole sequence.
    pub fn sites(&self, params: &[f64], times: &[f64], y_rows: &[Vec<f64>]) -> Result<GaussianSites> {
        if times.len() != y_rows.len() {
            return Err(Error::Dimension {
                op: "Model::sites",
                expected: format!("{} observation rows", times.len()),
                found: format!("{}", y_rows.len()),
            });
        }
        let l = self.latent_channels();
        let mut y_flat = Vec::with_capacity(times.len() * l);
        let mut v_flat = Vec::with_capacity(times.len() * l);
        for row in y_rows {
            let (m, v) = self.encode_plain(params, &Mat::col(row.clone()));
            y_flat.extend(m);
            v_flat.extend(v);
        }
        GaussianSites::new(times.to_vec(), y_flat, v_flat, l)
    }

    /// Decoder mean for one latent vector.
    pub fn decode_plain(&self, params: &[f64], z: &Mat) -> Mat {
        match self.cfg.decoder {
            DecoderKind::Mlp { .. } => {
                mlp_forward_plain(&self.layout, params, self.dec_seg.unwrap(), 2, z)
            }
            DecoderKind::Identity => z.clone(),
        }
    }

    /// log N(y; phi(z), sigma2_y I).
    pub fn decoder_loglik(&self, params: &[f64], z: &Mat, y: &Mat) -> f64 {
        let mean = self.decode_plain(params, z);
        let s2 = self.sigma2_y(params);
        let d = y.rows() as f64;
        let mut ssq = 0.0;
        for i in 0..y.rows() {
            let e = y.get(i, 0) - mean.get(i, 0);
            ssq += e * e;
        }
        -0.5 * (d * (LN_2PI + s2.ln()) + ssq / s2)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Tape-side forward pass.
// ---------------------------------------------------------------------------

struct TapeKernel {
    f: Var,
    pinf: Var,
    h: Var,
    h_t: Var,
    d: usize,
}

struct TapeTransition {
    a: Var,
    a_t: Var,
    q: Var,
}

/// Per-channel site values on the tape (1x1 nodes per step).
struct TapeSites {
    y: Vec<Var>,
    v: Vec<Var>,
}

struct TapePass {
    mp: Vec<Var>,
    pp: Vec<Var>,
    mf: Vec<Var>,
    pf: Vec<Var>,
    /// Transition index per step into the memo table (step 0 unused).
    step_tr: Vec<usize>,
    logz: Var,
}

/// Outcome of one sequence's objective on the tape.
pub struct SequenceElbo {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
}

impl Model {
    fn kernel_on_tape(&self, tape: &mut Tape, params: &[f64], channel: usize) -> TapeKernel {
        let log_var = self.layout.leaf(tape, params, self.kern_seg + 2 * channel);
        let log_len = self.layout.leaf(tape, params, self.kern_seg + 2 * channel + 1);
        let s2 = tape.exp(log_var);
        let ell = tape.exp(log_len);
        match self.cfg.kernels[channel].family {
            KernelFamily::Matern32 => {
                let sqrt3 = tape.scalar(3.0_f64.sqrt());
                let lam = tape.div(sqrt3, ell);
                let lam2 = tape.mul(lam, lam);
                let neg_lam2 = tape.neg(lam2);
                let two_lam = tape.scale(lam, 2.0);
                let neg_2lam = tape.neg(two_lam);
                let f = tape.assemble(
                    2,
                    2,
                    vec![
                        AsmEntry::C(0.0),
                        AsmEntry::C(1.0),
                        AsmEntry::V(neg_lam2),
                        AsmEntry::V(neg_2lam),
                    ],
                );
                let p11 = tape.mul(s2, lam2);
                let pinf = tape.assemble(
                    2,
                    2,
                    vec![
                        AsmEntry::V(s2),
                        AsmEntry::C(0.0),
                        AsmEntry::C(0.0),
                        AsmEntry::V(p11),
                    ],
                );
                let h = tape.constant(Mat::row(vec![1.0, 0.0]));
                let h_t = tape.constant(Mat::col(vec![1.0, 0.0]));
                TapeKernel { f, pinf, h, h_t, d: 2 }
            }
            KernelFamily::Matern52 => {
                let sqrt5 = tape.scalar(5.0_f64.sqrt());
                let lam = tape.div(sqrt5, ell);
                let lam2 = tape.mul(lam, lam);
                let lam3 = tape.mul(lam2, lam);
                let neg_lam3 = tape.neg(lam3);
                let three_lam2 = tape.scale(lam2, 3.0);
                let neg_3lam2 = tape.neg(three_lam2);
                let three_lam = tape.scale(lam, 3.0);
                let neg_3lam = tape.neg(three_lam);
                let ell2 = tape.mul(ell, ell);
                let ell4 = tape.mul(ell2, ell2);
                let s2_over_ell2 = tape.div(s2, ell2);
                let kappa = tape.scale(s2_over_ell2, 5.0 / 3.0);
                let neg_kappa = tape.neg(kappa);
                let s2_over_ell4 = tape.div(s2, ell4);
                let p33 = tape.scale(s2_over_ell4, 25.0);
                let f = tape.assemble(
                    3,
                    3,
                    vec![
                        AsmEntry::C(0.0),
                        AsmEntry::C(1.0),
                        AsmEntry::C(0.0),
                        AsmEntry::C(0.0),
                        AsmEntry::C(0.0),
                        AsmEntry::C(1.0),
                        AsmEntry::V(neg_lam3),
                        AsmEntry::V(neg_3lam2),
                        AsmEntry::V(neg_3lam),
                    ],
                );
                // The printed stationary covariance in the literature is
                // asymmetric; this is the symmetric Lyapunov solution,
                // pinned against the numeric solve by tests.
                let pinf = tape.assemble(
                    3,
                    3,
                    vec![
                        AsmEntry::V(s2),
                        AsmEntry::C(0.0),
                        AsmEntry::V(neg_kappa),
                        AsmEntry::C(0.0),
                        AsmEntry::V(kappa),
                        AsmEntry::C(0.0),
                        AsmEntry::V(neg_kappa),
                        AsmEntry::C(0.0),
                        AsmEntry::V(p33),
                    ],
                );
                let h = tape.constant(Mat::row(vec![1.0, 0.0, 0.0]));
                let h_t = tape.constant(Mat::col(vec![1.0, 0.0, 0.0]));
                TapeKernel { f, pinf, h, h_t, d: 3 }
            }
        }
    }

    /// Discretized transition on the tape, memoized per quantized gap.
    fn transition_on_tape(
        tape: &mut Tape,
        tk: &TapeKernel,
        dt: f64,
        memo: &mut Vec<(i64, TapeTransition)>,
    ) -> Result<usize> {
        let key = TransitionCache::quantize(dt);
        if let Some(pos) = memo.iter().position(|(k, _)| *k == key) {
            return Ok(pos);
        }
        let tr = if key == 0 {
            TapeTransition {
                a: tape.constant(Mat::identity(tk.d)),
                a_t: tape.constant(Mat::identity(tk.d)),
                q: tape.constant(Mat::zeros(tk.d, tk.d)),
            }
        } else {
            let scaled = tape.scale(tk.f, dt);
            let a = tape.matexp(scaled)?;
            let a_t = tape.transpose(a);
            let ap = tape.matmul(a, tk.pinf);
            let apa = tape.matmul(ap, a_t);
            let q_raw = tape.sub(tk.pinf, apa);
            let q_t = tape.transpose(q_raw);
            let q_sum = tape.add(q_raw, q_t);
            let q = tape.scale(q_sum, 0.5);
            TapeTransition { a, a_t, q }
        };
        memo.push((key, tr));
        Ok(memo.len() - 1)
    }

    fn sym_on_tape(tape: &mut Tape, m: Var) -> Var {
        let mt = tape.transpose(m);
        let s = tape.add(m, mt);
        tape.scale(s, 0.5)
    }

    /// Scalar-emission Kalman filter on the tape.
    fn filter_on_tape(
        &self,
        tape: &mut Tape,
        tk: &TapeKernel,
        times: &[f64],
        sites: &TapeSites,
        memo: &mut Vec<(i64, TapeTransition)>,
    ) -> Result<TapePass> {
        let t_len = times.len();
        let ident = tape.constant(Mat::identity(tk.d));
        let zero_mean = tape.constant(Mat::zeros(tk.d, 1));
        let ln2pi = tape.scalar(LN_2PI);

        let mut pass = TapePass {
            mp: Vec::with_capacity(t_len),
            pp: Vec::with_capacity(t_len),
            mf: Vec::with_capacity(t_len),
            pf: Vec::with_capacity(t_len),
            step_tr: vec![usize::MAX; t_len],
            logz: tape.scalar(0.0),
        };

        for i in 0..t_len {
            let (mp, pp) = if i == 0 {
                (zero_mean, tk.pinf)
            } else {
                let tr_idx = Self::transition_on_tape(tape, tk, times[i] - times[i - 1], memo)?;
                pass.step_tr[i] = tr_idx;
                let (a, a_t, q) = {
                    let tr = &memo[tr_idx].1;
                    (tr.a, tr.a_t, tr.q)
                };
                let mp = tape.matmul(a, pass.mf[i - 1]);
                let apf = tape.matmul(a, pass.pf[i - 1]);
                let apa = tape.matmul(apf, a_t);
                let ppq = tape.add(apa, q);
                (mp, Self::sym_on_tape(tape, ppq))
            };

            let hp = tape.matmul(tk.h, pp);
            let hph = tape.matmul(hp, tk.h_t);
            let lambda = tape.add(hph, sites.v[i]);
            let hm = tape.matmul(tk.h, mp);
            let innov = tape.sub(sites.y[i], hm);

            let ln_lambda = tape.ln(lambda);
            let innov2 = tape.mul(innov, innov);
            let maha = tape.div(innov2, lambda);
            let t1 = tape.add(ln_lambda, maha);
            let t2 = tape.add(t1, ln2pi);
            let ell = tape.scale(t2, -0.5);
            pass.logz = tape.add(pass.logz, ell);

            let ph = tape.matmul(pp, tk.h_t);
            let w = tape.div(ph, lambda);
            let w_innov = tape.mul(w, innov);
            let mf = tape.add(mp, w_innov);
            let wh = tape.matmul(w, tk.h);
            let j = tape.sub(ident, wh);
            let jp = tape.matmul(j, pp);
            let j_t = tape.transpose(j);
            let jpj = tape.matmul(jp, j_t);
            let w_t = tape.transpose(w);
            let ww = tape.matmul(w, w_t);
            let wvw = tape.mul(ww, sites.v[i]);
            let pf_raw = tape.add(jpj, wvw);
            let pf = Self::sym_on_tape(tape, pf_raw);

            pass.mp.push(mp);
            pass.pp.push(pp);
            pass.mf.push(mf);
            pass.pf.push(pf);
        }
        Ok(pass)
    }

    fn smooth_on_tape(
        tape: &mut Tape,
        pass: &TapePass,
        memo: &[(i64, TapeTransition)],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let t_len = pass.mf.len();
        let mut ms = vec![pass.mf[t_len - 1]; t_len];
        let mut ps = vec![pass.pf[t_len - 1]; t_len];
        for i in (0..t_len - 1).rev() {
            let tr = &memo[pass.step_tr[i + 1]].1;
            let apf = tape.matmul(tr.a, pass.pf[i]);
            let g_t = tape.solve_psd(pass.pp[i + 1], apf)?;
            let g = tape.transpose(g_t);
            let dm = tape.sub(ms[i + 1], pass.mp[i + 1]);
            let gdm = tape.matmul(g, dm);
            ms[i] = tape.add(pass.mf[i], gdm);
            let dp = tape.sub(ps[i + 1], pass.pp[i + 1]);
            let gdp = tape.matmul(g, dp);
            let gdpg = tape.matmul(gdp, g_t);
            let ps_raw = tape.add(pass.pf[i], gdpg);
            ps[i] = Self::sym_on_tape(tape, ps_raw);
        }
        Ok((ms, ps))
    }

    /// Encoder on the tape for every timestep: per-channel site means and
    /// variances as 1x1 nodes.
    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        params: &[f64],
        y_rows: &[Vec<f64>],
    ) -> Vec<TapeSites> {
        let l = self.latent_channels();
        let mut per_channel: Vec<TapeSites> = (0..l)
            .map(|_| TapeSites {
                y: Vec::with_capacity(y_rows.len()),
                v: Vec::with_capacity(y_rows.len()),
            })
            .collect();
        match self.cfg.encoder {
            EncoderKind::Mlp { .. } => {
                let vars = MlpVars::from_layout(tape, &self.layout, params, self.enc_seg.unwrap(), 2);
                let floor = tape.scalar(SITE_VARIANCE_FLOOR);
                for row in y_rows {
                    let x = tape.constant(Mat::col(row.clone()));
                    let out = mlp_forward(tape, &vars, x);
                    for c in 0..l {
                        let mean = tape.slice(out, c, 0, 1, 1);
                        let raw = tape.slice(out, l + c, 0, 1, 1);
                        let sp = tape.softplus(raw);
                        let v = tape.add(sp, floor);
                        per_channel[c].y.push(mean);
                        per_channel[c].v.push(v);
                    }
                }
            }
            EncoderKind::Fixed { variance } => {
                for row in y_rows {
                    for c in 0..l {
                        let mean = tape.scalar(row[c]);
                        let v = tape.scalar(variance);
                        per_channel[c].y.push(mean);
                        per_channel[c].v.push(v);
                    }
                }
            }
        }
        per_channel
    }

    fn decoder_loglik_on_tape(
        &self,
        tape: &mut Tape,
        dec_vars: &Option<MlpVars>,
        log_sigma: Var,
        sigma2: Var,
        z: Var,
        y: &Mat,
    ) -> Var {
        let mean = match self.cfg.decoder {
            DecoderKind::Mlp { .. } => mlp_forward(tape, dec_vars.as_ref().unwrap(), z),
            DecoderKind::Identity => z,
        };
        let y_const = tape.constant(y.clone());
        let diff = tape.sub(y_const, mean);
        let sq = tape.mul(diff, diff);
        let ssq = tape.sum(sq);
        let maha = tape.div(ssq, sigma2);
        let ln2pi = tape.scalar(LN_2PI);
        let norm1 = tape.add(ln2pi, log_sigma);
        let norm = tape.scale(norm1, y.rows() as f64);
        let total = tape.add(norm, maha);
        tape.scale(total, -0.5)
    }

    /// The full temporal objective for one sequence on a fresh tape.
    /// Returns the tape, the scalar objective node, and the breakdown nodes.
    fn build_sequence_elbo(
        &self,
        params: &[f64],
        times: &[f64],
        y_rows: &[Vec<f64>],
        k_samples: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Tape, Var, SequenceElbo)> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("empty sequence in objective".into()));
        }
        if k_samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let l = self.latent_channels();
        let t_len = times.len();
        let mut tape = Tape::new();

        let dec_vars = self
            .dec_seg
            .map(|seg| MlpVars::from_layout(&mut tape, &self.layout, params, seg, 2));
        let log_sigma = self.layout.leaf(&mut tape, params, self.sigma_seg);
        let sigma2 = tape.exp(log_sigma);

        let site_vars = self.encode_on_tape(&mut tape, params, y_rows);

        // Per-channel filtering and smoothing.
        let mut ms_all: Vec<Vec<Var>> = Vec::with_capacity(l);
        let mut ps_all: Vec<Vec<Var>> = Vec::with_capacity(l);
        let mut kernels: Vec<TapeKernel> = Vec::with_capacity(l);
        let mut e3 = tape.scalar(0.0);
        for c in 0..l {
            let tk = self.kernel_on_tape(&mut tape, params, c);
            let mut memo = Vec::new();
            let pass = self.filter_on_tape(&mut tape, &tk, times, &site_vars[c], &mut memo)?;
            let (ms, ps) = Self::smooth_on_tape(&mut tape, &pass, &memo)?;
            e3 = tape.add(e3, pass.logz);
            ms_all.push(ms);
            ps_all.push(ps);
            kernels.push(tk);
        }

        // E1: analytic site expectation under the smoothed marginals.
        let ln2pi = tape.scalar(LN_2PI);
        let mut e1 = tape.scalar(0.0);
        for t in 0..t_len {
            for c in 0..l {
                let tk = &kernels[c];
                let zm = tape.matmul(tk.h, ms_all[c][t]);
                let ph = tape.matmul(tk.h, ps_all[c][t]);
                let zv = tape.matmul(ph, tk.h_t);
                let v = site_vars[c].v[t];
                let y = site_vars[c].y[t];
                let diff = tape.sub(y, zm);
                let diff2 = tape.mul(diff, diff);
                let maha = tape.div(diff2, v);
                let ln_v = tape.ln(v);
                let g1 = tape.add(ln2pi, ln_v);
                let g2 = tape.add(g1, maha);
                let base = tape.scale(g2, -0.5);
                let ratio = tape.div(zv, v);
                let corr = tape.scale(ratio, -0.5);
                let term = tape.add(base, corr);
                e1 = tape.add(e1, term);
            }
        }

        // E2: Monte-Carlo reconstruction with Cholesky reparameterization on
        // per-timestep smoothed marginals.
        let mut e2_acc = tape.scalar(0.0);
        let mut eps_buf = vec![0.0; 4];
        for t in 0..t_len {
            for _j in 0..k_samples {
                let mut z_entries = Vec::with_capacity(l);
                for c in 0..l {
                    let tk = &kernels[c];
                    let chol = tape.cholesky(ps_all[c][t])?;
                    fill_standard_normal(rng, &mut eps_buf[..tk.d]);
                    let eps = tape.constant(Mat::col(eps_buf[..tk.d].to_vec()));
                    let le = tape.matmul(chol, eps);
                    let s = tape.add(ms_all[c][t], le);
                    let z_c = tape.matmul(tk.h, s);
                    z_entries.push(AsmEntry::V(z_c));
                }
                let z = tape.assemble(l, 1, z_entries);
                let lp = self.decoder_loglik_on_tape(
                    &mut tape,
                    &dec_vars,
                    log_sigma,
                    sigma2,
                    z,
                    &Mat::col(y_rows[t].clone()),
                );
                e2_acc = tape.add(e2_acc, lp);
            }
        }
        let e2 = tape.scale(e2_acc, 1.0 / k_samples as f64);

        let e3_plus_e2 = tape.add(e3, e2);
        let elbo = tape.sub(e3_plus_e2, e1);
        let breakdown = SequenceElbo {
            e1: tape.scalar_value(e1),
            e2: tape.scalar_value(e2),
            e3: tape.scalar_value(e3),
        };
        Ok((tape, elbo, breakdown))
    }

    /// Forward-only objective for one sequence.
    pub fn sequence_elbo(
        &self,
        params: &[f64],
        times: &[f64],
        y_rows: &[Vec<f64>],
        k_samples: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<SequenceElbo> {
        let (_tape, _out, breakdown) =
            self.build_sequence_elbo(params, times, y_rows, k_samples, rng)?;
        Ok(breakdown)
    }

    /// Objective and gradient for one sequence; the gradient of
    /// (e3 + e2 - e1) accumulates into `grad`.
    pub fn sequence_elbo_grad(
        &self,
        params: &[f64],
        times: &[f64],
        y_rows: &[Vec<f64>],
        k_samples: usize,
        rng: &mut ChaCha12Rng,
        grad: &mut [f64],
    ) -> Result<SequenceElbo> {
        let (tape, out, breakdown) =
            self.build_sequence_elbo(params, times, y_rows, k_samples, rng)?;
        tape.backward(out, grad)?;
        Ok(breakdown)
    }

    /// Log-partition (E3) alone on a tape; used by gradient diagnostics.
    pub fn log_partition_grad(
        &self,
        params: &[f64],
        times: &[f64],
        y_rows: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let site_vars = self.encode_on_tape(&mut tape, params, y_rows);
        let mut e3 = tape.scalar(0.0);
        for c in 0..self.latent_channels() {
            let tk = self.kernel_on_tape(&mut tape, params, c);
            let mut memo = Vec::new();
            let pass = self.filter_on_tape(&mut tape, &tk, times, &site_vars[c], &mut memo)?;
            e3 = tape.add(e3, pass.logz);
        }
        tape.backward(e3, grad)?;
        Ok(tape.scalar_value(e3))
    }
}

// ---------------------------------------------------------------------------
// Spatiotemporal objective.
// ---------------------------------------------------------------------------

/// One spatiotemporal training instance: a full (location, time) grid.
pub struct StBatch<'a> {
    pub coords: &'a [Vec<f64>],
    pub times: &'a [f64],
    /// y[t][r] is the D_y observation at location r, time t.
    pub y: &'a [Vec<Vec<f64>>],
}

impl Model {
    /// Prebuilds the stacked spatial state for the configured spatial kernel.
    pub fn st_state(&self, params: &[f64], coords: &[Vec<f64>], channel: usize) -> Result<SpatioTemporalState> {
        let spatial = self.cfg.spatial.as_ref().ok_or_else(|| {
            Error::InvalidArgument("model has no spatial kernel configured".into())
        })?;
        st_build(spatial, &self.kernel_spec(params, channel), coords)
    }

    fn st_build_elbo(
        &self,
        params: &[f64],
        batch: &StBatch,
        k_samples: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Tape, Var, SequenceElbo)> {
        let spatial = self.cfg.spatial.as_ref().ok_or_else(|| {
            Error::InvalidArgument("model has no spatial kernel configured".into())
        })?;
        let n_r = batch.coords.len();
        let t_len = batch.times.len();
        if t_len == 0 || n_r == 0 {
            return Err(Error::InvalidArgument("empty spatiotemporal batch".into()));
        }
        let l = self.latent_channels();
        let gram = crate::spatial::spatial_gram(spatial, batch.coords);
        let l_rr = crate::mat::cholesky_fixed(&gram)
            .map_err(|_| Error::Numerical("spatial gram not positive definite".into()))?;

        let mut tape = Tape::new();
        let dec_vars = self
            .dec_seg
            .map(|seg| MlpVars::from_layout(&mut tape, &self.layout, params, seg, 2));
        let log_sigma = self.layout.leaf(&mut tape, params, self.sigma_seg);
        let sigma2 = tape.exp(log_sigma);
        let ln2pi = tape.scalar(LN_2PI);

        // Encode every (t, r) observation: per channel, per time, a vector
        // of per-location site means/variances.
        let enc_vars = match self.cfg.encoder {
            EncoderKind::Mlp { .. } => Some(MlpVars::from_layout(
                &mut tape,
                &self.layout,
                params,
                self.enc_seg.unwrap(),
                2,
            )),
            EncoderKind::Fixed { .. } => None,
        };
        let floor = tape.scalar(SITE_VARIANCE_FLOOR);
        // site_mean[c][t][r], site_var[c][t][r]
        let mut site_mean: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); t_len]; l];
        let mut site_var: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); t_len]; l];
        for t in 0..t_len {
            for r in 0..n_r {
                let row = &batch.y[t][r];
                match self.cfg.encoder {
                    EncoderKind::Mlp { .. } => {
                        let x = tape.constant(Mat::col(row.clone()));
                        let out = mlp_forward(&mut tape, enc_vars.as_ref().unwrap(), x);
                        for c in 0..l {
                            let mean = tape.slice(out, c, 0, 1, 1);
                            let raw = tape.slice(out, l + c, 0, 1, 1);
                            let sp = tape.softplus(raw);
                            let v = tape.add(sp, floor);
                            site_mean[c][t].push(mean);
                            site_var[c][t].push(v);
                        }
                    }
                    EncoderKind::Fixed { variance } => {
                        for c in 0..l {
                            let mean = tape.scalar(row[c]);
                            let v = tape.scalar(variance);
                            site_mean[c][t].push(mean);
                            site_var[c][t].push(v);
                        }
                    }
                }
            }
        }

        let mut e3 = tape.scalar(0.0);
        let mut e1 = tape.scalar(0.0);
        let e2_acc = tape.scalar(0.0);
        // z_samples[c][t][j]: emitted latent vector over locations.
        let mut z_samples: Vec<Vec<Vec<Option<Var>>>> =
            vec![vec![vec![None; k_samples]; t_len]; l];
        for c in 0..l {
            let tk = self.kernel_on_tape(&mut tape, params, c);
            let d = tk.d;
            let n = n_r * d;
            if n > 64 {
                return Err(Error::InvalidArgument(format!(
                    "stacked spatiotemporal state dimension {n} exceeds the training cap of 64"
                )));
            }
            let mut h_row = vec![0.0; d];
            h_row[0] = 1.0;
            let emission = tape.constant(crate::mat::kron(l_rr.lower(), &Mat::row(h_row)));
            let emission_t = tape.transpose(emission);
            let ident = tape.constant(Mat::identity(n));
            let pinf_stack = tape.kron_id(n_r, tk.pinf);
            let zero_mean = tape.constant(Mat::zeros(n, 1));

            let mut memo: Vec<(i64, TapeTransition)> = Vec::new();
            let mut mp_s = Vec::with_capacity(t_len);
            let mut pp_s = Vec::with_capacity(t_len);
            let mut mf_s: Vec<Var> = Vec::with_capacity(t_len);
            let mut pf_s: Vec<Var> = Vec::with_capacity(t_len);
            let mut step_tr = vec![usize::MAX; t_len];
            let mut logz = tape.scalar(0.0);

            for t in 0..t_len {
                let (mp, pp) = if t == 0 {
                    (zero_mean, pinf_stack)
                } else {
                    let tr_idx = Self::transition_on_tape(
                        &mut tape,
                        &tk,
                        batch.times[t] - batch.times[t - 1],
                        &mut memo,
                    )?;
                    step_tr[t] = tr_idx;
                    let (a, q) = (memo[tr_idx].1.a, memo[tr_idx].1.q);
                    let a_stack = tape.kron_id(n_r, a);
                    let a_stack_t = tape.transpose(a_stack);
                    let q_stack = tape.kron_id(n_r, q);
                    let mp = tape.matmul(a_stack, mf_s[t - 1]);
                    let ap = tape.matmul(a_stack, pf_s[t - 1]);
                    let apa = tape.matmul(ap, a_stack_t);
                    let ppq = tape.add(apa, q_stack);
                    (mp, Self::sym_on_tape(&mut tape, ppq))
                };

                let y_vec = {
                    let entries = site_mean[c][t].iter().map(|v| AsmEntry::V(*v)).collect();
                    tape.assemble(n_r, 1, entries)
                };
                let v_vec = {
                    let entries = site_var[c][t].iter().map(|v| AsmEntry::V(*v)).collect();
                    tape.assemble(n_r, 1, entries)
                };

                let ep = tape.matmul(emission, pp);
                let epe = tape.matmul(ep, emission_t);
                let lambda_raw = tape.add_diag(epe, v_vec);
                let lambda = Self::sym_on_tape(&mut tape, lambda_raw);
                let em = tape.matmul(emission, mp);
                let innov = tape.sub(y_vec, em);
                let solved = tape.solve_psd(lambda, innov)?;
                let innov_t = tape.transpose(innov);
                let quad = tape.matmul(innov_t, solved);
                let ld = tape.logdet_psd(lambda)?;
                let g1 = tape.add(ld, quad);
                let const_pi = tape.scalar(n_r as f64 * LN_2PI);
                let g2 = tape.add(g1, const_pi);
                let ell = tape.scale(g2, -0.5);
                logz = tape.add(logz, ell);

                let w_t = tape.solve_psd(lambda, ep)?;
                let w = tape.transpose(w_t);
                let wi = tape.matmul(w, innov);
                let mf = tape.add(mp, wi);
                let we = tape.matmul(w, emission);
                let j = tape.sub(ident, we);
                let jp = tape.matmul(j, pp);
                let j_t = tape.transpose(j);
                let jpj = tape.matmul(jp, j_t);
                let zero_nr = tape.constant(Mat::zeros(n_r, n_r));
                let dv = tape.add_diag(zero_nr, v_vec);
                let wd = tape.matmul(w, dv);
                let wdw = tape.matmul(wd, w_t);
                let pf_raw = tape.add(jpj, wdw);
                let pf = Self::sym_on_tape(&mut tape, pf_raw);

                mp_s.push(mp);
                pp_s.push(pp);
                mf_s.push(mf);
                pf_s.push(pf);
            }
            e3 = tape.add(e3, logz);

            // Backward smoothing on the stacked chain.
            let mut ms = vec![mf_s[t_len - 1]; t_len];
            let mut ps = vec![pf_s[t_len - 1]; t_len];
            for t in (0..t_len - 1).rev() {
                let a = memo[step_tr[t + 1]].1.a;
                let a_stack = tape.kron_id(n_r, a);
                let apf = tape.matmul(a_stack, pf_s[t]);
                let g_t = tape.solve_psd(pp_s[t + 1], apf)?;
                let g = tape.transpose(g_t);
                let dm = tape.sub(ms[t + 1], mp_s[t + 1]);
                let gdm = tape.matmul(g, dm);
                ms[t] = tape.add(mf_s[t], gdm);
                let dp = tape.sub(ps[t + 1], pp_s[t + 1]);
                let gdp = tape.matmul(g, dp);
                let gdpg = tape.matmul(gdp, g_t);
                let ps_raw = tape.add(pf_s[t], gdpg);
                ps[t] = Self::sym_on_tape(&mut tape, ps_raw);
            }

            // E1 over locations; E2 latent samples per (t, j).
            for t in 0..t_len {
                let zm_vec = tape.matmul(emission, ms[t]);
                let ep_s = tape.matmul(emission, ps[t]);
                let zcov = tape.matmul(ep_s, emission_t);
                for r in 0..n_r {
                    let zm = tape.slice(zm_vec, r, 0, 1, 1);
                    let zv = tape.slice(zcov, r, r, 1, 1);
                    let y = site_mean[c][t][r];
                    let v = site_var[c][t][r];
                    let diff = tape.sub(y, zm);
                    let diff2 = tape.mul(diff, diff);
                    let maha = tape.div(diff2, v);
                    let ln_v = tape.ln(v);
                    let g1 = tape.add(ln2pi, ln_v);
                    let g2 = tape.add(g1, maha);
                    let base = tape.scale(g2, -0.5);
                    let ratio = tape.div(zv, v);
                    let corr = tape.scale(ratio, -0.5);
                    let term = tape.add(base, corr);
                    e1 = tape.add(e1, term);
                }
            }

            // Latent samples for E2, drawn per (t, j) from the stacked
            // smoothed marginal and emitted to z over locations.
            let mut eps_buf = vec![0.0; n];
            for t in 0..t_len {
                for j in 0..k_samples {
                    let chol = tape.cholesky(ps[t])?;
                    fill_standard_normal(rng, &mut eps_buf);
                    let eps = tape.constant(Mat::col(eps_buf.clone()));
                    let le = tape.matmul(chol, eps);
                    let s = tape.add(ms[t], le);
                    let z_vec = tape.matmul(emission, s);
                    z_samples[c][t][j] = Some(z_vec);
                }
            }
        }

        // E2: decode per (t, j, r) across channels.
        let e2 = {
            let mut acc = e2_acc;
            for t in 0..t_len {
                for j in 0..k_samples {
                    for r in 0..n_r {
                        let entries = (0..l)
                            .map(|c| {
                                let zv = z_samples[c][t][j].unwrap();
                                let z_r = tape.slice(zv, r, 0, 1, 1);
                                AsmEntry::V(z_r)
                            })
                            .collect();
                        let z = tape.assemble(l, 1, entries);
                        let lp = self.decoder_loglik_on_tape(
                            &mut tape,
                            &dec_vars,
                            log_sigma,
                            sigma2,
                            z,
                            &Mat::col(batch.y[t][r].clone()),
                        );
                        acc = tape.add(acc, lp);
                    }
                }
            }
            tape.scale(acc, 1.0 / k_samples as f64)
        };

        let e3_plus_e2 = tape.add(e3, e2);
        let elbo = tape.sub(e3_plus_e2, e1);
        let breakdown = SequenceElbo {
            e1: tape.scalar_value(e1),
            e2: tape.scalar_value(e2),
            e3: tape.scalar_value(e3),
        };
        Ok((tape, elbo, breakdown))
    }

    pub fn st_elbo(
        &self,
        params: &[f64],
        batch: &StBatch,
        k_samples: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<SequenceElbo> {
        let (_tape, _out, b) = self.st_build_elbo(params, batch, k_samples, rng)?;
        Ok(b)
    }

    pub fn st_elbo_grad(
        &self,
        params: &[f64],
        batch: &StBatch,
        k_samples: usize,
        rng: &mut ChaCha12Rng,
        grad: &mut [f64],
    ) -> Result<SequenceElbo> {
        let (tape, out, b) = self.st_build_elbo(params, batch, k_samples, rng)?;
        tape.backward(out, grad)?;
        Ok(b)
    }
}
