//! State-space form of Markovian kernels.
//!
//! Each latent channel's kernel is represented continuously as
//! (F, L, H, Qc, Pinf) and discretized to per-gap transitions
//! (A(dt), Q(dt)). The marginal process projected through H reproduces
//! the closed-form kernel exactly, which the tests pin against the
//! dense gram matrix.

use crate::error::{Error, Result};
use crate::mat::{kron, matexp, solve_lu, Mat};
use serde::{Deserialize, Serialize};

/// Kernel families with a finite-dimensional SDE representation.
///
/// Matern-3/2 has state dimension 2, Matern-5/2 dimension 3. The squared
/// exponential admits no exact finite-dimensional form and is out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern32,
    Matern52,
}

impl KernelFamily {
    pub fn state_dim(self) -> usize {
        match self {
            KernelFamily::Matern32 => 2,
            KernelFamily::Matern52 => 3,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "matern32" => Ok(KernelFamily::Matern32),
            "matern52" => Ok(KernelFamily::Matern52),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel family '{other}' (expected matern32 or matern52)"
            ))),
        }
    }
}

/// Hyperparameters of one channel's kernel, stored in log-space so that
/// gradient-based optimization is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive and finite, got {variance}"
            )));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(KernelSpec {
            family,
            log_variance: variance.ln(),
            log_lengthscale: lengthscale.ln(),
        })
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// Closed-form kernel value at lag `dt`.
    pub fn eval(&self, dt: f64) -> f64 {
        let d = dt.abs();
        let sigma2 = self.variance();
        let ell = self.lengthscale();
        match self.family {
            KernelFamily::Matern32 => {
                let a = 3.0_f64.sqrt() * d / ell;
                sigma2 * (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = 5.0_f64.sqrt() * d / ell;
                sigma2 * (1.0 + a + 5.0 * d * d / (3.0 * ell * ell)) * (-a).exp()
            }
        }
    }
}

/// Continuous-time state-space representation of one channel.
#[derive(Debug, Clone)]
pub struct KernelStateSpace {
    /// Feedback matrix, d x d.
    pub f: Mat,
    /// Noise effect matrix, d x 1.
    pub l: Mat,
    /// Emission matrix, 1 x d.
    pub h: Mat,
    /// Spectral density of the driving noise.
    pub qc: f64,
    /// Stationary state covariance, the Lyapunov solution.
    pub pinf: Mat,
    /// Stationary state mean (zero).
    pub m0: Mat,
    /// Spec this representation was built from, kept for gram evaluation.
    pub spec: KernelSpec,
}

impl KernelStateSpace {
    pub fn dim(&self) -> usize {
        self.f.rows()
    }
}

/// Discrete transition over a gap `dt`: s' = A s + q, q ~ N(0, Q).
#[derive(Debug, Clone)]
pub struct DiscreteTransition {
    pub a: Mat,
    pub q: Mat,
    pub dt: f64,
}

/// Builds the (F, L, H, Qc, Pinf) representation of a kernel.
///
/// Matern-3/2 uses the standard companion form with Pinf =
/// diag(sigma^2, sigma^2 lambda^2); the diffusion Qc = 4 lambda^3 sigma^2
/// is the unique value closing the Lyapunov equation for that Pinf.
/// Matern-5/2 takes Qc = 400 sqrt(5) sigma^2 / (3 ell^5) and recovers
/// Pinf by solving the Lyapunov equation numerically.
pub fn to_state_space(spec: &KernelSpec) -> KernelStateSpace {
    let sigma2 = spec.variance();
    let ell = spec.lengthscale();
    match spec.family {
        KernelFamily::Matern32 => {
            let lambda = 3.0_f64.sqrt() / ell;
            let f = Mat::from_rows(&[&[0.0, 1.0], &[-lambda * lambda, -2.0 * lambda]]);
            let l = Mat::col(vec![0.0, 1.0]);
            let h = Mat::row(vec![1.0, 0.0]);
            let qc = 4.0 * lambda.powi(3) * sigma2;
            let pinf = Mat::diag(&[sigma2, sigma2 * lambda * lambda]);
            KernelStateSpace {
                f,
                l,
                h,
                qc,
                pinf,
                m0: Mat::zeros(2, 1),
                spec: *spec,
            }
        }
        KernelFamily::Matern52 => {
            let lambda = 5.0_f64.sqrt() / ell;
            let f = Mat::from_rows(&[
                &[0.0, 1.0, 0.0],
                &[0.0, 0.0, 1.0],
                &[-lambda.powi(3), -3.0 * lambda * lambda, -3.0 * lambda],
            ]);
            let l = Mat::col(vec![0.0, 0.0, 1.0]);
            let h = Mat::row(vec![1.0, 0.0, 0.0]);
            let qc = 400.0 * 5.0_f64.sqrt() * sigma2 / (3.0 * ell.powi(5));
            let lql = l.matmul_nt(&l).scale(qc);
            let pinf = lyapunov_stationary(&f, &lql)
                .expect("Lyapunov solve for a stable Matern-5/2 system cannot fail");
            KernelStateSpace {
                f,
                l,
                h,
                qc,
                pinf,
                m0: Mat::zeros(3, 1),
                spec: *spec,
            }
        }
    }
}

/// Solves F P + P F^T + C = 0 for P by vectorization:
/// (I (x) F + F (x) I) vec(P) = -vec(C) in column-major vec convention.
pub fn lyapunov_stationary(f: &Mat, c: &Mat) -> Result<Mat> {
    let n = f.rows();
    let ident = Mat::identity(n);
    let system = kron(&ident, f).add(&kron(f, &ident));
    // Column-major vec of C.
    let mut rhs = Mat::zeros(n * n, 1);
    for j in 0..n {
        for i in 0..n {
            rhs.set(j * n + i, 0, -c.get(i, j));
        }
    }
    let sol = solve_lu(&system, &rhs)?;
    let mut p = Mat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            p.set(i, j, sol.get(j * n + i, 0));
        }
    }
    Ok(p.symmetrize())
}

/// Discretizes to (A, Q) over a gap `dt`.
///
/// A = exp(dt F); Q uses the stationary identity Pinf - A Pinf A^T, which
/// equals the diffusion integral for priors started at Pinf and avoids
/// quadrature. The integral form survives as a test oracle.
pub fn discretize(ss: &KernelStateSpace, dt: f64) -> Result<DiscreteTransition> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "discretize requires dt >= 0, got {dt}"
        )));
    }
    let d = ss.dim();
    if dt == 0.0 {
        return Ok(DiscreteTransition {
            a: Mat::identity(d),
            q: Mat::zeros(d, d),
            dt,
        });
    }
    let a = matexp(&ss.f.scale(dt))?;
    let q = ss
        .pinf
        .sub(&a.matmul(&ss.pinf).matmul_nt(&a))
        .symmetrize();
    Ok(DiscreteTransition { a, q, dt })
}

/// Dense T x T gram matrix from the closed-form kernel. Cubic-cost path,
/// used by the oracle module and validation tooling only.
pub fn gram(spec: &KernelSpec, times: &[f64]) -> Mat {
    let t = times.len();
    Mat::from_fn(t, t, |i, j| spec.eval(times[i] - times[j]))
}

/// Memoized discretizations keyed by the gap, quantized to 1e-12.
///
/// Time grids from regularly-sampled data with dropped frames repeat a
/// handful of gap values, so caching avoids recomputing matexp per step.
pub struct TransitionCache<'a> {
    ss: &'a KernelStateSpace,
    entries: Vec<(i64, DiscreteTransition)>,
}

impl<'a> TransitionCache<'a> {
    pub fn new(ss: &'a KernelStateSpace) -> Self {
        TransitionCache {
            ss,
            entries: Vec::new(),
        }
    }

    pub fn quantize(dt: f64) -> i64 {
        (dt * 1e12).round() as i64
    }

    pub fn get(&mut self, dt: f64) -> Result<&DiscreteTransition> {
        let key = Self::quantize(dt);
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            return Ok(&self.entries[pos].1);
        }
        let tr = discretize(self.ss, dt)?;
        self.entries.push((key, tr));
        Ok(&self.entries.last().unwrap().1)
    }
}
