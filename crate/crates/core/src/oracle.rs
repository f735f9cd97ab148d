//! Dense reference computations.
//!
//! These build the full `2N × 2N` covariance and work on it directly. They
//! exist to check the structured kernels in [`crate::lrpd`] and share no code
//! path with them beyond reading the parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lrpd::{clamp_log_d, LrpdParams};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `D + κLLᵀ` by explicit accumulation over `(i, j, r)`.
pub fn dense_cov_accumulate(p: &LrpdParams) -> DMatrix<f64> {
    let n = p.mu.len();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..p.l.ncols() {
                acc += p.l[(i, r)] * p.l[(j, r)];
            }
            s[(i, j)] = p.kappa * acc;
        }
        s[(i, i)] += clamp_log_d(p.log_d[i]).exp();
    }
    s
}

fn chol(p: &LrpdParams) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(dense_cov_accumulate(p))
        .ok_or_else(|| Error::Numerical("dense covariance not positive definite".into()))
}

pub fn dense_logdet(p: &LrpdParams) -> Result<f64> {
    let c = chol(p)?;
    let l = c.l_dirty();
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

pub fn dense_mahalanobis(p: &LrpdParams, r: &DVector<f64>) -> Result<f64> {
    if r.len() != p.mu.len() {
        return Err(Error::DimensionMismatch { expected: p.mu.len(), got: r.len() });
    }
    let c = chol(p)?;
    Ok(r.dot(&c.solve(r)))
}

/// `log|Σ| + rᵀΣ⁻¹r`, no normaliser.
pub fn dense_nll(p: &LrpdParams, target: &DVector<f64>) -> Result<f64> {
    let r = target - &p.mu;
    Ok(dense_logdet(p)? + dense_mahalanobis(p, &r)?)
}

/// Multivariate normal log density, evaluated with an LU solve and
/// determinant of the dense covariance.
pub fn dense_log_pdf(p: &LrpdParams, x: &DVector<f64>) -> Result<f64> {
    let cov = dense_cov_accumulate(p);
    let n = cov.nrows();
    let lu = cov.clone().lu();
    let det = lu.determinant();
    if !(det > 0.0) {
        return Err(Error::Numerical("non-positive determinant".into()));
    }
    let r = x - &p.mu;
    let sol = lu
        .solve(&r)
        .ok_or_else(|| Error::Numerical("singular covariance".into()))?;
    Ok(-0.5 * (n as f64 * LN_2PI + det.ln() + r.dot(&sol)))
}

/// Central finite-difference gradient of [`dense_nll`].
#[derive(Clone, Debug)]
pub struct FdGrad {
    pub d_mu: DVector<f64>,
    pub d_log_d: DVector<f64>,
    pub d_l: DMatrix<f64>,
    pub d_kappa: f64,
}

pub fn finite_difference_grad(p: &LrpdParams, target: &DVector<f64>, h: f64) -> FdGrad {
    let f = |q: &LrpdParams| dense_nll(q, target).expect("dense nll");
    let central = |plus: LrpdParams, minus: LrpdParams| (f(&plus) - f(&minus)) / (2.0 * h);
    let n = p.mu.len();
    let d_mu = DVector::from_fn(n, |i, _| {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.mu[i] += h;
        b.mu[i] -= h;
        central(a, b)
    });
    let d_log_d = DVector::from_fn(n, |i, _| {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.log_d[i] += h;
        b.log_d[i] -= h;
        central(a, b)
    });
    let d_l = DMatrix::from_fn(n, p.l.ncols(), |i, j| {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.l[(i, j)] += h;
        b.l[(i, j)] -= h;
        central(a, b)
    });
    let (mut a, mut b) = (p.clone(), p.clone());
    a.kappa += h;
    b.kappa -= h;
    let d_kappa = central(a, b);
    FdGrad { d_mu, d_log_d, d_l, d_kappa }
}

/// Product of `r` random Householder reflections: a random orthogonal matrix.
pub fn random_orthogonal(r: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng::stream(seed, 0);
    let mut q = DMatrix::identity(r, r);
    for _ in 0..r {
        let v = DVector::from_fn(r, |_, _| rng::normal(&mut g));
        let nv = v.norm_squared();
        if nv == 0.0 {
            continue;
        }
        let h = DMatrix::identity(r, r) - &v * v.transpose() * (2.0 / nv);
        q = h * q;
    }
    q
}

pub fn empirical_mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let n = samples[0].len();
    let mut m = DVector::zeros(n);
    for s in samples {
        m += s;
    }
    m / samples.len() as f64
}

/// Unbiased sample covariance.
pub fn empirical_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let mean = empirical_mean(samples);
    let n = mean.len();
    let mut c = DMatrix::zeros(n, n);
    for s in samples {
        let d = s - &mean;
        c.ger(1.0, &d, &d, 1.0);
    }
    c / (samples.len() as f64 - 1.0)
}

pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Relative error `|a − b| / |b|`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Outcome of [`check_kernels`] for one random instance.
#[derive(Clone, Debug, serde::Serialize)]
pub struct OracleTrial {
    pub n_points: usize,
    pub rank: usize,
    pub logdet_rel_err: f64,
    pub mahalanobis_rel_err: f64,
    pub nll_rel_err: f64,
}

impl OracleTrial {
    pub fn max_err(&self) -> f64 {
        self.logdet_rel_err.max(self.mahalanobis_rel_err).max(self.nll_rel_err)
    }
}

/// Compare the structured kernels with the dense oracle on random params.
pub fn check_kernels(n_points: usize, rank: usize, seed: u64) -> Result<OracleTrial> {
    let n = 2 * n_points;
    let p = LrpdParams::random(n, rank, seed);
    let mut g = rng::stream(seed, 1);
    let target = DVector::from_fn(n, |i, _| p.mu[i] + rng::normal(&mut g));
    let r = &target - &p.mu;
    Ok(OracleTrial {
        n_points,
        rank: p.rank(),
        logdet_rel_err: relative_error(p.logdet()?, dense_logdet(&p)?),
        mahalanobis_rel_err: relative_error(p.mahalanobis(&r)?, dense_mahalanobis(&p, &r)?),
        nll_rel_err: relative_error(p.nll(&target, false)?, dense_nll(&p, &target)?),
    })
}

/// Largest gradient error of one random instance, each component scaled by
/// `max(|fd|, 1)`. Entries of `log_d` sitting on the clamp are skipped.
pub fn check_gradient(n_points: usize, rank: usize, seed: u64) -> Result<f64> {
    let n = 2 * n_points;
    let p = LrpdParams::random(n, rank, seed);
    let mut g = rng::stream(seed, 1);
    let target = DVector::from_fn(n, |i, _| p.mu[i] + rng::normal(&mut g));
    let an = p.nll_grad(&target)?;
    let fd = finite_difference_grad(&p, &target, 1e-5);
    let scaled = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let mut worst = scaled(an.d_kappa, fd.d_kappa);
    for (a, b) in an.d_mu.iter().zip(fd.d_mu.iter()) {
        worst = worst.max(scaled(*a, *b));
    }
    for (i, (a, b)) in an.d_log_d.iter().zip(fd.d_log_d.iter()).enumerate() {
        if clamp_log_d(p.log_d[i]) == p.log_d[i] {
            worst = worst.max(scaled(*a, *b));
        }
    }
    for (a, b) in an.d_l.iter().zip(fd.d_l.iter()) {
        worst = worst.max(scaled(*a, *b));
    }
    Ok(worst)
}

/// NLL change under `L → LQ` for a random orthogonal `Q`, relative to
/// `max(|nll|, 1)`.
pub fn check_gauge(n_points: usize, rank: usize, seed: u64) -> Result<f64> {
    let n = 2 * n_points;
    let p = LrpdParams::random(n, rank, seed);
    let q = random_orthogonal(rank, rng::split(seed, 1));
    let mut g = rng::stream(seed, 2);
    let target = DVector::from_fn(n, |i, _| p.mu[i] + rng::normal(&mut g));
    let a = p.nll(&target, false)?;
    let b = p.rotate_factor(&q)?.nll(&target, false)?;
    Ok((a - b).abs() / a.abs().max(1.0))
}
