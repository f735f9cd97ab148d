//! Low-rank-plus-diagonal Gaussians over flattened polylines.
//!
//! The covariance is `Σ = D + κ L Lᵀ` with `D = diag(exp(clamp(log_d)))`.
//! Nothing here materialises the `2N × 2N` matrix except [`LrpdParams::dense_cov`];
//! likelihood terms go through the `R × R` capacitance matrix
//! `M = I + κ Lᵀ D⁻¹ L`:
//!
//! * `log|Σ| = Σ log dₙ + log|M|` (matrix determinant lemma)
//! * `Σ⁻¹ = D⁻¹ − κ D⁻¹L M⁻¹ LᵀD⁻¹` (Woodbury)
//!
//! which costs `O(N R² + R³)` per element.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const LOG_D_MIN: f64 = -10.0;
pub const LOG_D_MAX: f64 = 10.0;

/// Standard deviation of the i.i.d. Gaussian entries used to initialise `L`.
pub const FACTOR_INIT_STD: f64 = 1e-3;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One structured Gaussian over a flattened polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct LrpdParams {
    pub mu: DVector<f64>,
    pub log_d: DVector<f64>,
    /// `2N × R` factor.
    pub l: DMatrix<f64>,
    pub kappa: f64,
}

/// Parameter counts of the covariance representations for one element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub n_coords: usize,
    pub rank: usize,
    /// Diagonal plus factor entries, `2N + 2N·R`.
    pub lrpd: usize,
    /// Every entry of a dense `2N × 2N` matrix.
    pub full: usize,
}

impl ParamCount {
    pub fn new(n_coords: usize, rank: usize) -> Self {
        Self {
            n_coords,
            rank,
            lrpd: n_coords + n_coords * rank,
            full: n_coords * n_coords,
        }
    }

    pub fn reduction(&self) -> f64 {
        self.full as f64 / self.lrpd as f64
    }
}

#[inline]
pub fn clamp_log_d(v: f64) -> f64 {
    v.clamp(LOG_D_MIN, LOG_D_MAX)
}

impl LrpdParams {
    pub fn new(mu: DVector<f64>, log_d: DVector<f64>, l: DMatrix<f64>, kappa: f64) -> Result<Self> {
        let p = Self { mu, log_d, l, kappa };
        p.validate()?;
        Ok(p)
    }

    /// Zero factor, unit diagonal, κ = 0.
    pub fn standard(n_coords: usize, rank: usize) -> Self {
        Self {
            mu: DVector::zeros(n_coords),
            log_d: DVector::zeros(n_coords),
            l: DMatrix::zeros(n_coords, rank),
            kappa: 0.0,
        }
    }

    /// Random parameters for tests and oracle checks: `μ ~ N(0, 1)`,
    /// `log_d ~ U(-1, 1)`, `L ~ N(0, 1/R)`, `κ ~ U(0.5, 1.5)`.
    pub fn random(n_coords: usize, rank: usize, seed: u64) -> Self {
        use rand::Rng as _;
        let mut g = rng::stream(seed, 0);
        let mu = DVector::from_fn(n_coords, |_, _| rng::normal(&mut g));
        let log_d = DVector::from_fn(n_coords, |_, _| g.gen_range(-1.0..1.0));
        let scale = 1.0 / (rank.max(1) as f64).sqrt();
        let l = DMatrix::from_fn(n_coords, rank, |_, _| scale * rng::normal(&mut g));
        let kappa = g.gen_range(0.5..1.5);
        Self { mu, log_d, l, kappa }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if n == 0 || n % 2 != 0 {
            return Err(Error::InvalidParams(format!(
                "mean length {n} is not a positive even number"
            )));
        }
        if self.log_d.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.log_d.len() });
        }
        if self.l.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.l.nrows() });
        }
        if self.l.ncols() > n {
            return Err(Error::InvalidParams(format!(
                "rank {} exceeds dimension {n}",
                self.l.ncols()
            )));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidParams(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        let finite = self.mu.iter().chain(self.log_d.iter()).chain(self.l.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite parameter entry".into()));
        }
        Ok(())
    }

    pub fn n_coords(&self) -> usize {
        self.mu.len()
    }

    pub fn n_points(&self) -> usize {
        self.mu.len() / 2
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::new(self.n_coords(), self.rank())
    }

    /// Diagonal variances `d = exp(clamp(log_d))`.
    pub fn diag(&self) -> DVector<f64> {
        self.log_d.map(|v| clamp_log_d(v).exp())
    }

    /// Marginal variances, i.e. the diagonal of `Σ`.
    pub fn marginal_var(&self) -> DVector<f64> {
        let d = self.diag();
        DVector::from_fn(self.n_coords(), |i, _| {
            d[i] + self.kappa * self.l.row(i).norm_squared()
        })
    }

    /// `D + κ L Lᵀ` as a dense matrix.
    pub fn dense_cov(&self) -> DMatrix<f64> {
        let mut s = &self.l * self.l.transpose() * self.kappa;
        for (i, d) in self.diag().iter().enumerate() {
            s[(i, i)] += d;
        }
        s
    }

    pub fn capacitance(&self) -> Result<CapacitanceFactor> {
        CapacitanceFactor::new(self)
    }

    pub fn logdet(&self) -> Result<f64> {
        Ok(self.capacitance()?.logdet())
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn mahalanobis(&self, r: &DVector<f64>) -> Result<f64> {
        self.capacitance()?.mahalanobis(r)
    }

    /// `log|Σ| + rᵀΣ⁻¹r` with `r = target − μ`. With `include_normalizer`
    /// the `2N·log(2π)` constant is added, giving `−2 log p(target)`.
    pub fn nll(&self, target: &DVector<f64>, include_normalizer: bool) -> Result<f64> {
        self.capacitance()?.nll(&self.mu, target, include_normalizer)
    }

    /// Log density of the Gaussian at `x`.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(-0.5 * self.nll(x, true)?)
    }

    pub fn nll_grad(&self, target: &DVector<f64>) -> Result<NllGrad> {
        self.capacitance()?.mean_nll_grad(self, std::slice::from_ref(target))
    }

    /// Mean NLL and its gradient over several targets, sharing one factorisation.
    pub fn mean_nll_grad(&self, targets: &[DVector<f64>]) -> Result<NllGrad> {
        self.capacitance()?.mean_nll_grad(self, targets)
    }

    /// `count` draws of `μ + √κ L z + D^{1/2} ε`. For each draw, `z` (R
    /// normals) is taken before `ε` (2N normals) from stream 0 of `seed`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut g = rng::stream(seed, 0);
        let sd = self.diag().map(f64::sqrt);
        let sk = self.kappa.sqrt();
        let (n, r) = (self.n_coords(), self.rank());
        let mut z = DVector::zeros(r);
        let mut eps = DVector::zeros(n);
        (0..count)
            .map(|_| {
                rng::fill_normal(&mut g, z.as_mut_slice());
                rng::fill_normal(&mut g, eps.as_mut_slice());
                let mut x = &self.mu + sd.component_mul(&eps);
                if r > 0 {
                    x.gemv(sk, &self.l, &z, 1.0);
                }
                x
            })
            .collect()
    }

    /// Replace `L` by `L Q` for an orthogonal `Q`; `Σ` is unchanged.
    pub fn rotate_factor(&self, q: &DMatrix<f64>) -> Result<Self> {
        let r = self.rank();
        if q.nrows() != r || q.ncols() != r {
            return Err(Error::DimensionMismatch { expected: r, got: q.nrows().max(q.ncols()) });
        }
        let dev = (q * q.transpose() - DMatrix::<f64>::identity(r, r)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidParams(format!(
                "rotation is not orthogonal (max |QQᵀ - I| = {dev:e})"
            )));
        }
        Ok(Self { l: &self.l * q, ..self.clone() })
    }

    /// Same distribution with κ absorbed into the factor: `L' = √κ L`, κ = 1.
    pub fn fold_kappa(&self) -> Self {
        Self {
            l: &self.l * self.kappa.sqrt(),
            kappa: 1.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LrpdJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LrpdJson = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        Self::try_from(j)
    }

    /// Little-endian binary export.
    ///
    /// Layout: magic `b"LRPD"`, `u32` format version (1), `u32` N (points),
    /// `u32` R, `f64` κ, then `2N` f64 of μ, `2N` f64 of log_d and the
    /// `2N × R` factor in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_points() as u32).to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        w.write_all(&self.kappa.to_le_bytes())?;
        for v in self.mu.iter().chain(self.log_d.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.n_coords() {
            for j in 0..self.rank() {
                w.write_all(&self.l[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Schema("bad magic in binary params".into()));
        }
        let version = read_u32(&mut r)?;
        if version != BINARY_VERSION {
            return Err(Error::Schema(format!("unsupported binary version {version}")));
        }
        let n = 2 * read_u32(&mut r)? as usize;
        let rank = read_u32(&mut r)? as usize;
        let kappa = read_f64(&mut r)?;
        let mu = DVector::from_iterator(n, (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?);
        let log_d = DVector::from_iterator(n, (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?);
        let vals = (0..n * rank).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let l = DMatrix::from_row_slice(n, rank, &vals);
        Self::new(mu, log_d, l, kappa)
    }
}

const BINARY_MAGIC: &[u8; 4] = b"LRPD";
const BINARY_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// JSON form: `{"mu", "log_d", "L" (rows), "kappa", "n_points", "rank"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrpdJson {
    pub mu: Vec<f64>,
    pub log_d: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    pub kappa: f64,
    pub n_points: usize,
    pub rank: usize,
}

impl From<&LrpdParams> for LrpdJson {
    fn from(p: &LrpdParams) -> Self {
        Self {
            mu: p.mu.as_slice().to_vec(),
            log_d: p.log_d.as_slice().to_vec(),
            l: p.l.row_iter().map(|r| r.iter().copied().collect()).collect(),
            kappa: p.kappa,
            n_points: p.n_points(),
            rank: p.rank(),
        }
    }
}

impl TryFrom<LrpdJson> for LrpdParams {
    type Error = Error;

    fn try_from(j: LrpdJson) -> Result<Self> {
        let n = 2 * j.n_points;
        if j.mu.len() != n || j.log_d.len() != n || j.l.len() != n {
            return Err(Error::Schema(format!(
                "n_points = {} but mu/log_d/L have {}/{}/{} entries",
                j.n_points,
                j.mu.len(),
                j.log_d.len(),
                j.l.len()
            )));
        }
        if let Some(bad) = j.l.iter().position(|row| row.len() != j.rank) {
            return Err(Error::Schema(format!(
                "row {bad} of L has {} entries, rank is {}",
                j.l[bad].len(),
                j.rank
            )));
        }
        let flat: Vec<f64> = j.l.iter().flatten().copied().collect();
        Self::new(
            DVector::from_vec(j.mu),
            DVector::from_vec(j.log_d),
            DMatrix::from_row_slice(n, j.rank, &flat),
            j.kappa,
        )
        .map_err(|e| Error::Schema(e.to_string()))
    }
}

impl Serialize for LrpdParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LrpdJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for LrpdParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = LrpdJson::deserialize(d)?;
        LrpdParams::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// Gradients of the (mean) NLL.
#[derive(Clone, Debug)]
pub struct NllGrad {
    pub value: f64,
    pub d_mu: DVector<f64>,
    pub d_log_d: DVector<f64>,
    pub d_l: DMatrix<f64>,
    pub d_kappa: f64,
}

/// Factorisation workspace shared by every likelihood evaluation of one
/// parameter set.
#[derive(Clone, Debug)]
pub struct CapacitanceFactor {
    d: DVector<f64>,
    /// `D⁻¹ L`.
    dinv_l: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    kappa: f64,
    logdet: f64,
}

impl CapacitanceFactor {
    pub fn new(p: &LrpdParams) -> Result<Self> {
        let d = p.diag();
        let r = p.rank();
        let mut dinv_l = p.l.clone();
        for (i, mut row) in dinv_l.row_iter_mut().enumerate() {
            row /= d[i];
        }
        let mut m = p.l.transpose() * &dinv_l * p.kappa;
        for i in 0..r {
            m[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(m).ok_or_else(|| {
            Error::Numerical("capacitance matrix I + κLᵀD⁻¹L is not positive definite".into())
        })?;
        let lower = chol.l_dirty();
        let logdet = d.iter().map(|v| v.ln()).sum::<f64>()
            + 2.0 * (0..r).map(|i| lower[(i, i)].ln()).sum::<f64>();
        Ok(Self { d, dinv_l, chol, kappa: p.kappa, logdet })
    }

    /// Lower-triangular Cholesky factor of `M`.
    pub fn chol(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dinv_l(&self) -> &DMatrix<f64> {
        &self.dinv_l
    }

    /// `M = I + κ LᵀD⁻¹L` rebuilt from its factor.
    pub fn capacitance_matrix(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    fn check_dim(&self, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.d.len() {
            return Err(Error::DimensionMismatch { expected: self.d.len(), got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite residual".into()));
        }
        Ok(())
    }

    pub fn mahalanobis(&self, r: &DVector<f64>) -> Result<f64> {
        self.check_dim(r)?;
        let diag_term: f64 = r.iter().zip(self.d.iter()).map(|(ri, di)| ri * ri / di).sum();
        if self.dinv_l.ncols() == 0 || self.kappa == 0.0 {
            return Ok(diag_term);
        }
        // κ uᵀM⁻¹u with u = LᵀD⁻¹r, via y = C⁻¹u for M = C Cᵀ
        let u = self.dinv_l.tr_mul(r);
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&u)
            .ok_or_else(|| Error::Numerical("singular capacitance factor".into()))?;
        Ok((diag_term - self.kappa * y.norm_squared()).max(0.0))
    }

    pub fn nll(&self, mu: &DVector<f64>, target: &DVector<f64>, include_normalizer: bool) -> Result<f64> {
        self.check_dim(target)?;
        let r = target - mu;
        let mut v = self.logdet + self.mahalanobis(&r)?;
        if include_normalizer {
            v += self.d.len() as f64 * LN_2PI;
        }
        Ok(v)
    }

    /// `Σ⁻¹ r`.
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut v = r.component_div(&self.d);
        if self.dinv_l.ncols() > 0 && self.kappa != 0.0 {
            let w = self.chol.solve(&self.dinv_l.tr_mul(r));
            v.gemv(-self.kappa, &self.dinv_l, &w, 1.0);
        }
        v
    }

    /// Mean NLL over `targets` and its gradient with respect to
    /// `(μ, log_d, L, κ)`.
    ///
    /// With `S = Σ⁻¹`, `v = S r` and `G = S − v vᵀ` (averaged over targets):
    /// `∂μ = −2 v̄`, `∂dₙ = Gₙₙ`, `∂L = 2κ G L` and `∂κ = tr(G L Lᵀ)`.
    /// `S L` reduces to `D⁻¹L M⁻¹`, so nothing of size `2N × 2N` is formed.
    pub fn mean_nll_grad(&self, p: &LrpdParams, targets: &[DVector<f64>]) -> Result<NllGrad> {
        if targets.is_empty() {
            return Err(Error::InvalidParams("no targets".into()));
        }
        let n = self.d.len();
        let rank = p.rank();
        let count = targets.len() as f64;
        let kappa = self.kappa;

        // S L = D⁻¹ L M⁻¹
        let sl = if rank > 0 {
            self.chol.solve(&self.dinv_l.transpose()).transpose()
        } else {
            DMatrix::zeros(n, 0)
        };
        let s_diag = DVector::from_fn(n, |i, _| {
            let corr: f64 = (0..rank).map(|j| sl[(i, j)] * self.dinv_l[(i, j)]).sum();
            1.0 / self.d[i] - kappa * corr
        });

        let mut value = 0.0;
        let mut v_sum = DVector::zeros(n);
        let mut v_sq = DVector::zeros(n);
        // Σ_s v_s (Lᵀ v_s)ᵀ
        let mut v_ltv = DMatrix::zeros(n, rank);
        let mut ltv_sq = 0.0;
        for t in targets {
            self.check_dim(t)?;
            let r = t - &p.mu;
            let v = self.solve(&r);
            value += r.dot(&v);
            let ltv = p.l.tr_mul(&v);
            ltv_sq += ltv.norm_squared();
            if rank > 0 {
                v_ltv.ger(1.0, &v, &ltv, 1.0);
            }
            v_sum += &v;
            v_sq += v.component_mul(&v);
        }
        value = self.logdet + value / count;

        let d_mu = v_sum * (-2.0 / count);
        let d_log_d = DVector::from_fn(n, |i, _| {
            let raw = p.log_d[i];
            if !(LOG_D_MIN..=LOG_D_MAX).contains(&raw) {
                0.0
            } else {
                self.d[i] * (s_diag[i] - v_sq[i] / count)
            }
        });
        let d_l = (&sl - &v_ltv / count) * (2.0 * kappa);
        let d_kappa = sl.component_mul(&p.l).sum() - ltv_sq / count;

        Ok(NllGrad { value, d_mu, d_log_d, d_l, d_kappa })
    }
}
