//! Per-point uncertainty features and confidence-conditioned modulation.
//!
//! Each point `n` of an element becomes
//! `[μx, μy, σ²xx, σ²yy, lx (R), ly (R)]` where the variances are the
//! diagonal of `D` and `lx`, `ly` are rows `2n`, `2n+1` of the κ-folded
//! factor `√κ·L`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassProbs, MapClass};
use crate::lrpd::LrpdParams;
use crate::rng;

pub const DEFAULT_EMBED_DIM: usize = 128;

pub fn feature_dim(rank: usize) -> usize {
    4 + 2 * rank
}

/// Feature vector of one polyline point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointFeature(pub Vec<f64>);

impl PointFeature {
    pub fn rank(&self) -> usize {
        (self.0.len() - 4) / 2
    }

    pub fn mean(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    pub fn variances(&self) -> [f64; 2] {
        [self.0[2], self.0[3]]
    }

    pub fn lx(&self) -> &[f64] {
        &self.0[4..4 + self.rank()]
    }

    pub fn ly(&self) -> &[f64] {
        let r = self.rank();
        &self.0[4 + r..4 + 2 * r]
    }
}

pub fn encode_element(p: &LrpdParams) -> Vec<PointFeature> {
    let folded = p.fold_kappa();
    let d = p.diag();
    let r = p.rank();
    (0..p.n_points())
        .map(|n| {
            let (ix, iy) = (2 * n, 2 * n + 1);
            let mut f = Vec::with_capacity(feature_dim(r));
            f.extend_from_slice(&[p.mu[ix], p.mu[iy], d[ix], d[iy]]);
            f.extend(folded.l.row(ix).iter());
            f.extend(folded.l.row(iy).iter());
            PointFeature(f)
        })
        .collect()
}

/// Rebuild `(μ, D, √κ·L)` from point features as params with κ = 1.
pub fn decode_element(features: &[PointFeature]) -> Result<LrpdParams> {
    let Some(first) = features.first() else {
        return Err(Error::InvalidParams("no point features".into()));
    };
    if first.0.len() < 4 || first.0.len() % 2 != 0 {
        return Err(Error::InvalidParams(format!("feature length {} is not 4 + 2R", first.0.len())));
    }
    let r = first.rank();
    let n = 2 * features.len();
    let mut mu = DVector::zeros(n);
    let mut log_d = DVector::zeros(n);
    let mut l = DMatrix::zeros(n, r);
    for (i, f) in features.iter().enumerate() {
        if f.0.len() != feature_dim(r) {
            return Err(Error::DimensionMismatch { expected: feature_dim(r), got: f.0.len() });
        }
        let [vx, vy] = f.variances();
        if !(vx > 0.0 && vy > 0.0) {
            return Err(Error::InvalidParams(format!("non-positive variance at point {i}")));
        }
        mu[2 * i] = f.0[0];
        mu[2 * i + 1] = f.0[1];
        log_d[2 * i] = vx.ln();
        log_d[2 * i + 1] = vy.ln();
        for j in 0..r {
            l[(2 * i, j)] = f.lx()[j];
            l[(2 * i + 1, j)] = f.ly()[j];
        }
    }
    LrpdParams::new(mu, log_d, l, 1.0)
}

/// Linear embedding plus the two confidence projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilmWeights {
    /// `D_e × (4 + 2R)`, row-major.
    pub embed_w: Vec<Vec<f64>>,
    pub embed_b: Vec<f64>,
    pub gamma_w: Vec<f64>,
    pub gamma_b: Vec<f64>,
    pub beta_w: Vec<f64>,
    pub beta_b: Vec<f64>,
}

impl FilmWeights {
    /// Uniform(±1/√fan_in) initialisation from `seed`.
    pub fn random(in_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut g = rng::stream(seed, 0);
        let mut uni = |fan_in: usize, n: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| g.gen_range(-b..b)).collect()
        };
        let flat = uni(in_dim, embed_dim * in_dim);
        let embed_w = flat.chunks(in_dim).map(|c| c.to_vec()).collect();
        Self {
            embed_w,
            embed_b: uni(in_dim, embed_dim),
            gamma_w: uni(1, embed_dim),
            gamma_b: uni(1, embed_dim),
            beta_w: uni(1, embed_dim),
            beta_b: uni(1, embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.embed_w.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let de = self.embed_dim();
        if de == 0 {
            return Err(Error::Schema("embedding dimension is 0".into()));
        }
        if self.embed_w.len() != de {
            return Err(Error::Schema(format!("embed_w has {} rows, embed_b has {de}", self.embed_w.len())));
        }
        let din = self.in_dim();
        if self.embed_w.iter().any(|r| r.len() != din) {
            return Err(Error::Schema("embed_w rows differ in length".into()));
        }
        for (name, v) in [
            ("gamma_w", &self.gamma_w),
            ("gamma_b", &self.gamma_b),
            ("beta_w", &self.beta_w),
            ("beta_b", &self.beta_b),
        ] {
            if v.len() != de {
                return Err(Error::Schema(format!("{name} has {} entries, expected {de}", v.len())));
            }
        }
        let all_finite = self
            .embed_w
            .iter()
            .flatten()
            .chain(&self.embed_b)
            .chain(&self.gamma_w)
            .chain(&self.gamma_b)
            .chain(&self.beta_w)
            .chain(&self.beta_b)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Schema("non-finite weight".into()));
        }
        Ok(())
    }

    /// `embed_w · e + embed_b`.
    pub fn embed(&self, e: &PointFeature) -> Result<Vec<f64>> {
        if e.0.len() != self.in_dim() {
            return Err(Error::DimensionMismatch { expected: self.in_dim(), got: e.0.len() });
        }
        Ok(self
            .embed_w
            .iter()
            .zip(&self.embed_b)
            .map(|(row, b)| row.iter().zip(&e.0).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    pub fn gamma(&self, c: f64) -> Vec<f64> {
        self.gamma_w.iter().zip(&self.gamma_b).map(|(w, b)| w * c + b).collect()
    }

    pub fn beta(&self, c: f64) -> Vec<f64> {
        self.beta_w.iter().zip(&self.beta_b).map(|(w, b)| w * c + b).collect()
    }
}

/// `ReLU(γ(c)) ⊙ embed(e) + β(c)`.
pub fn film_modulate(e: &PointFeature, confidence: f64, w: &FilmWeights) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::InvalidParams(format!("confidence {confidence} outside [0, 1]")));
    }
    Ok(modulate_embedding(&w.embed(e)?, confidence, w))
}

/// Modulation applied to an already embedded feature.
pub fn modulate_embedding(embedded: &[f64], confidence: f64, w: &FilmWeights) -> Vec<f64> {
    let g = w.gamma(confidence);
    let b = w.beta(confidence);
    embedded
        .iter()
        .zip(g.iter().zip(&b))
        .map(|(e, (g, b))| g.max(0.0) * e + b)
        .collect()
}

/// Scalar confidence of an element: the probability of `preferred` when the
/// class vector has that class, otherwise of its most probable class.
pub fn element_confidence(probs: &ClassProbs, preferred: Option<usize>) -> f64 {
    let preferred = preferred.unwrap_or(MapClass::Centerline.index());
    probs
        .get(preferred)
        .unwrap_or_else(|| probs.probs()[probs.argmax()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_params() -> LrpdParams {
        LrpdParams::new(
            DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            DVector::from_vec(vec![0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]),
            DMatrix::from_row_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]),
            4.0,
        )
        .unwrap()
    }

    #[test]
    fn hand_assembled_features() {
        let f = encode_element(&hand_params());
        assert_eq!(f.len(), 2);
        let expect0 = [1.0, 2.0, 1.0, 2.0, 0.2, 0.4];
        let expect1 = [3.0, 4.0, 3.0, 4.0, 0.6, 0.8];
        for (got, want) in f[0].0.iter().zip(expect0).chain(f[1].0.iter().zip(expect1)) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(f[0].0.len(), feature_dim(1));
    }

    #[test]
    fn kappa_zero_folds_to_zero_rows() {
        let mut p = hand_params();
        p.kappa = 0.0;
        let f = encode_element(&p);
        assert!(f.iter().all(|x| x.lx() == [0.0] && x.ly() == [0.0]));
        assert_eq!(f[0].mean(), [1.0, 2.0]);
    }

    #[test]
    fn decode_reassembles_folded_params() {
        let p = LrpdParams::random(20, 5, 3);
        let back = decode_element(&encode_element(&p)).unwrap();
        let folded = p.fold_kappa();
        assert_eq!(back.mu, folded.mu);
        assert_eq!(back.l, folded.l);
        assert!((back.diag() - folded.diag()).amax() < 1e-12);
        assert!((back.dense_cov() - p.dense_cov()).amax() < 1e-12);
    }

    #[test]
    fn identity_modulation() {
        let w0 = FilmWeights::random(6, 8, 1);
        let w = FilmWeights {
            gamma_w: vec![0.0; 8],
            gamma_b: vec![1.0; 8],
            beta_w: vec![0.0; 8],
            beta_b: vec![0.0; 8],
            ..w0
        };
        let e = PointFeature(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        assert_eq!(film_modulate(&e, 0.7, &w).unwrap(), w.embed(&e).unwrap());
    }

    #[test]
    fn negative_gamma_saturates() {
        let w0 = FilmWeights::random(6, 8, 2);
        let w = FilmWeights { gamma_w: vec![-1.0; 8], gamma_b: vec![-0.5; 8], ..w0 };
        let e1 = PointFeature(vec![1.0; 6]);
        let e2 = PointFeature(vec![-3.0; 6]);
        let out1 = film_modulate(&e1, 0.4, &w).unwrap();
        assert_eq!(out1, film_modulate(&e2, 0.4, &w).unwrap());
        assert_eq!(out1, w.beta(0.4));
    }

    #[test]
    fn random_weights_match_direct_arithmetic() {
        let w = FilmWeights::random(6, DEFAULT_EMBED_DIM, 3);
        w.validate().unwrap();
        let e = PointFeature(vec![0.3, 0.1, 0.2, 0.5, -0.4, 0.9]);
        for c in [0.2, 0.9] {
            let out = film_modulate(&e, c, &w).unwrap();
            assert_eq!(out.len(), DEFAULT_EMBED_DIM);
            for k in 0..DEFAULT_EMBED_DIM {
                let emb: f64 = (0..6).map(|j| w.embed_w[k][j] * e.0[j]).sum::<f64>() + w.embed_b[k];
                let g = (w.gamma_w[k] * c + w.gamma_b[k]).max(0.0);
                let b = w.beta_w[k] * c + w.beta_b[k];
                assert!((out[k] - (g * emb + b)).abs() < 1e-12);
            }
        }
        assert_ne!(film_modulate(&e, 0.2, &w).unwrap(), film_modulate(&e, 0.9, &w).unwrap());
    }

    #[test]
    fn affine_in_embedding() {
        let w = FilmWeights::random(6, 16, 4);
        let e1 = w.embed(&PointFeature(vec![1.0, 0.0, 2.0, 1.0, 0.5, 0.5])).unwrap();
        let e2 = w.embed(&PointFeature(vec![-1.0, 3.0, 0.1, 0.2, 0.0, 1.5])).unwrap();
        let a = 0.3;
        let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let lhs = modulate_embedding(&mix, 0.6, &w);
        let m1 = modulate_embedding(&e1, 0.6, &w);
        let m2 = modulate_embedding(&e2, 0.6, &w);
        for k in 0..16 {
            assert!((lhs[k] - (a * m1[k] + (1.0 - a) * m2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = FilmWeights::random(6, 4, 5);
        let e = PointFeature(vec![0.0; 6]);
        assert!(film_modulate(&e, 1.5, &w).is_err());
        assert!(film_modulate(&PointFeature(vec![0.0; 8]), 0.5, &w).is_err());
        let bad = FilmWeights { gamma_b: vec![0.0; 3], ..w };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn confidence_selection() {
        let p = ClassProbs::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(element_confidence(&p, None), 0.4);
        assert_eq!(element_confidence(&p, Some(1)), 0.2);
        let short = ClassProbs::new(vec![0.7, 0.3]).unwrap();
        assert_eq!(element_confidence(&short, None), 0.7);
    }

    #[test]
    fn film_json_schema() {
        let w = FilmWeights::random(4, 2, 6);
        let s = serde_json::to_string(&w).unwrap();
        for key in ["embed_w", "embed_b", "gamma_w", "gamma_b", "beta_w", "beta_b"] {
            assert!(s.contains(key));
        }
        assert_eq!(serde_json::from_str::<FilmWeights>(&s).unwrap(), w);
    }
}
