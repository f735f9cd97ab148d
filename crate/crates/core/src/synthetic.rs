//! Synthetic maps and correlated polyline noise with known covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geometry::{Agent, MapClass, MapElement, Polyline, Scenario};
use crate::rng;

/// Noise process over the points of one polyline.
///
/// JSON uses an internal `"kind"` tag, e.g.
/// `{"kind": "curvature", "marginal_std": 0.3, "correlation_length": 5}` or
/// `{"kind": "composite", "components": [{"weight": 1.0, "model": {...}}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// i.i.d. per coordinate.
    Independent { marginal_std: f64 },
    /// One shared (dx, dy) offset per draw.
    Translation { marginal_std: f64 },
    /// Smooth bending along arc length from low-frequency cosine modes; the
    /// number of modes per axis is `ceil(N / correlation_length)`.
    Curvature { marginal_std: f64, correlation_length: f64 },
    /// Independent noise whose std grows linearly with arc length from the
    /// first point.
    RangeGrowth { marginal_std: f64, range_growth_rate: f64 },
    Composite { components: Vec<WeightedModel> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedModel {
    pub weight: f64,
    pub model: NoiseModel,
}

/// `Σ* = F Fᵀ + diag(v)` of a noise model on a specific polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCovariance {
    pub factor: DMatrix<f64>,
    pub diag: DVector<f64>,
}

impl NoiseCovariance {
    pub fn dense(&self) -> DMatrix<f64> {
        let mut s = &self.factor * self.factor.transpose();
        for (i, v) in self.diag.iter().enumerate() {
            s[(i, i)] += v;
        }
        s
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }
}

fn check_std(v: f64, what: &str) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidParams(format!("{what} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Independent { marginal_std } | NoiseModel::Translation { marginal_std } => {
                check_std(*marginal_std, "marginal_std")
            }
            NoiseModel::Curvature { marginal_std, correlation_length } => {
                check_std(*marginal_std, "marginal_std")?;
                if !(*correlation_length >= 1.0) || !correlation_length.is_finite() {
                    return Err(Error::InvalidParams(format!(
                        "correlation_length must be >= 1, got {correlation_length}"
                    )));
                }
                Ok(())
            }
            NoiseModel::RangeGrowth { marginal_std, range_growth_rate } => {
                check_std(*marginal_std, "marginal_std")?;
                check_std(*range_growth_rate, "range_growth_rate")
            }
            NoiseModel::Composite { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidParams("composite model has no components".into()));
                }
                for c in components {
                    if !(c.weight > 0.0) || !c.weight.is_finite() {
                        return Err(Error::InvalidParams(format!(
                            "composite weight must be > 0, got {}",
                            c.weight
                        )));
                    }
                    c.model.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Analytic covariance of this model's noise on `gt`.
    pub fn covariance(&self, gt: &Polyline) -> Result<NoiseCovariance> {
        self.validate()?;
        let n_pts = gt.len();
        let n = 2 * n_pts;
        let cum = gt.cumulative_length();
        let total = *cum.last().unwrap();
        Ok(match self {
            NoiseModel::Independent { marginal_std } => NoiseCovariance {
                factor: DMatrix::zeros(n, 0),
                diag: DVector::from_element(n, marginal_std * marginal_std),
            },
            NoiseModel::Translation { marginal_std } => {
                let mut f = DMatrix::zeros(n, 2);
                for p in 0..n_pts {
                    f[(2 * p, 0)] = *marginal_std;
                    f[(2 * p + 1, 1)] = *marginal_std;
                }
                NoiseCovariance { factor: f, diag: DVector::zeros(n) }
            }
            NoiseModel::Curvature { marginal_std, correlation_length } => {
                let modes = curvature_modes(n_pts, *correlation_length);
                let scale = marginal_std * (2.0 / modes as f64).sqrt();
                let mut f = DMatrix::zeros(n, 2 * modes);
                for k in 0..modes {
                    for p in 0..n_pts {
                        let t = if total > 0.0 { cum[p] / total } else { p as f64 / (n_pts - 1) as f64 };
                        let c = scale * (std::f64::consts::PI * (k + 1) as f64 * t).cos();
                        f[(2 * p, 2 * k)] = c;
                        f[(2 * p + 1, 2 * k + 1)] = c;
                    }
                }
                NoiseCovariance { factor: f, diag: DVector::zeros(n) }
            }
            NoiseModel::RangeGrowth { marginal_std, range_growth_rate } => {
                let diag = DVector::from_fn(n, |i, _| {
                    let s = marginal_std + range_growth_rate * cum[i / 2];
                    s * s
                });
                NoiseCovariance { factor: DMatrix::zeros(n, 0), diag }
            }
            NoiseModel::Composite { components } => {
                let mut cols = Vec::new();
                let mut diag = DVector::zeros(n);
                for c in components {
                    let sub = c.model.covariance(gt)?;
                    let w = c.weight.sqrt();
                    for col in sub.factor.column_iter() {
                        cols.push(col * w);
                    }
                    diag += sub.diag * c.weight;
                }
                let factor = if cols.is_empty() {
                    DMatrix::zeros(n, 0)
                } else {
                    DMatrix::from_columns(&cols)
                };
                NoiseCovariance { factor, diag }
            }
        })
    }
}

/// Cosine modes per axis for the curvature model.
pub fn curvature_modes(n_points: usize, correlation_length: f64) -> usize {
    ((n_points as f64 / correlation_length).ceil() as usize).clamp(1, n_points)
}

/// Residual draws from a noise model together with their exact covariance.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub residuals: Vec<DVector<f64>>,
    pub covariance: NoiseCovariance,
}

/// `count` residual vectors with covariance `Σ*` of `model` on `gt`. Each
/// draw is `F z + diag(v)^{1/2} ε`, `z` taken before `ε` from stream 0 of `seed`.
pub fn corrupt(gt: &Polyline, model: &NoiseModel, seed: u64, count: usize) -> Result<NoiseDraw> {
    let cov = model.covariance(gt)?;
    let n = cov.diag.len();
    let sd = cov.diag.map(f64::sqrt);
    let mut g = rng::stream(seed, 0);
    let mut z = DVector::zeros(cov.rank());
    let mut eps = DVector::zeros(n);
    let residuals = (0..count)
        .map(|_| {
            rng::fill_normal(&mut g, z.as_mut_slice());
            rng::fill_normal(&mut g, eps.as_mut_slice());
            let mut x = sd.component_mul(&eps);
            if cov.rank() > 0 {
                x.gemv(1.0, &cov.factor, &z, 1.0);
            }
            x
        })
        .collect();
    Ok(NoiseDraw { residuals, covariance: cov })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Straight,
    Arc,
    SCurve,
}

/// Settings for [`gen_map`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub seed: u64,
    pub n_elements: usize,
    pub n_points: usize,
    /// Half-width of the square BEV window, meters.
    pub extent: f64,
    pub n_agents: usize,
    pub history_len: usize,
    pub horizon: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_elements: 8,
            n_points: crate::geometry::DEFAULT_POINTS,
            extent: 30.0,
            n_agents: 0,
            history_len: 20,
            horizon: 30,
        }
    }
}

/// Shape of element `i` in a scene generated from `seed`.
pub fn shape_of(seed: u64, i: usize) -> ShapeKind {
    let mut g = rng::stream(rng::split(seed, i as u64), 0);
    match g.gen_range(0..3) {
        0 => ShapeKind::Straight,
        1 => ShapeKind::Arc,
        _ => ShapeKind::SCurve,
    }
}

fn local_shape(kind: ShapeKind, length: f64, radius: f64, n_points: usize) -> Result<Polyline> {
    let pts: Vec<[f64; 2]> = match kind {
        ShapeKind::Straight => (0..n_points)
            .map(|i| [length * i as f64 / (n_points - 1) as f64, 0.0])
            .collect(),
        ShapeKind::Arc => {
            // equal angular steps: exact equal arc-length spacing
            let sweep = length / radius;
            (0..n_points)
                .map(|i| {
                    let a = sweep * i as f64 / (n_points - 1) as f64;
                    [radius * a.sin(), radius * (1.0 - a.cos())]
                })
                .collect()
        }
        ShapeKind::SCurve => {
            let half = length / 2.0 / radius;
            let dense = 2000;
            let mut v = Vec::with_capacity(2 * dense);
            for i in 0..dense {
                let a = half * i as f64 / dense as f64;
                v.push([radius * a.sin(), radius * (1.0 - a.cos())]);
            }
            // mirror arc bending the other way, continuing tangentially
            let (cx, cy) = (radius * half.sin(), radius * (1.0 - half.cos()));
            for i in 0..=dense {
                let a = half * i as f64 / dense as f64;
                let (lx, ly) = (radius * a.sin(), -radius * (1.0 - a.cos()));
                let (c, s) = (half.cos(), half.sin());
                v.push([cx + c * lx - s * ly, cy + s * lx + c * ly]);
            }
            return Polyline::new(v)?.resample(n_points);
        }
    };
    Polyline::new(pts)
}

/// Deterministic synthetic scene: straight lanes, arcs and S-curves inside
/// `[-extent, extent]²`, with classes drawn from the four map categories.
pub fn gen_map(cfg: &MapConfig) -> Result<Scenario> {
    if cfg.n_elements == 0 || cfg.n_points < 2 {
        return Err(Error::InvalidParams("need n_elements >= 1 and n_points >= 2".into()));
    }
    if !(cfg.extent > 0.0) {
        return Err(Error::InvalidParams("extent must be > 0".into()));
    }
    let mut elements = Vec::with_capacity(cfg.n_elements);
    let mut shapes = Vec::with_capacity(cfg.n_elements);
    for i in 0..cfg.n_elements {
        let kind = shape_of(cfg.seed, i);
        let mut g = rng::stream(rng::split(cfg.seed, i as u64), 1);
        let class = g.gen_range(0..MapClass::COUNT);
        let length = g.gen_range(0.4..0.9) * cfg.extent;
        let radius = g.gen_range(0.6..1.5) * length;
        let heading = g.gen_range(0.0..std::f64::consts::TAU);
        let local = local_shape(kind, length, radius, cfg.n_points)?;
        let (c, s) = (heading.cos(), heading.sin());
        let rotated: Vec<[f64; 2]> =
            local.points().iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &rotated {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut shift = [0.0; 2];
        for a in 0..2 {
            let (min_t, max_t) = (-cfg.extent - lo[a], cfg.extent - hi[a]);
            shift[a] = if max_t > min_t { g.gen_range(min_t..max_t) } else { min_t };
        }
        let pts = rotated.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
        elements.push(MapElement { class, points: Polyline::new(pts)? });
        shapes.push(kind);
    }

    let mut agents = Vec::with_capacity(cfg.n_agents);
    for a in 0..cfg.n_agents {
        let mut g = rng::stream(rng::split(cfg.seed, a as u64), 2);
        let lane = &elements[g.gen_range(0..elements.len())].points;
        let total = lane.arc_length();
        let steps = cfg.history_len + cfg.horizon;
        let step = total / steps as f64 * g.gen_range(0.5..1.0);
        let start = g.gen_range(0.0..(total - step * steps as f64).max(1e-9));
        let traj: Vec<[f64; 2]> =
            (0..steps).map(|k| lane.point_at(start + step * k as f64)).collect();
        agents.push(Agent {
            history: Polyline::new(traj[..cfg.history_len].to_vec())?,
            future_gt: Polyline::new(traj[cfg.history_len..].to_vec())?,
        });
    }

    let mut metadata = Map::new();
    metadata.insert("generator".into(), serde_json::to_value(cfg)?);
    metadata.insert(
        "shapes".into(),
        Value::Array(shapes.iter().map(|s| serde_json::to_value(s).unwrap()).collect()),
    );
    let sc = Scenario { gt_elements: elements, agents, metadata };
    sc.validate(MapClass::COUNT)?;
    Ok(sc)
}

/// Metadata key holding per-element residual samples.
pub const RESIDUALS_KEY: &str = "residual_samples";
/// Metadata key holding per-element `Σ*` rows.
pub const SIGMA_KEY: &str = "sigma_star";
pub const NOISE_KEY: &str = "noise_model";

/// Draw `count` residuals per element and store them, with each element's
/// `Σ*`, in the scenario metadata.
pub fn attach_noise(sc: &mut Scenario, model: &NoiseModel, seed: u64, count: usize) -> Result<()> {
    let mut all_res = Vec::with_capacity(sc.gt_elements.len());
    let mut all_sigma = Vec::with_capacity(sc.gt_elements.len());
    for (i, e) in sc.gt_elements.iter().enumerate() {
        let draw = corrupt(&e.points, model, rng::split(seed ^ 0x006e_6f69_7365, i as u64), count)?;
        all_res.push(Value::Array(
            draw.residuals.iter().map(|r| json!(r.as_slice())).collect(),
        ));
        let dense = draw.covariance.dense();
        all_sigma.push(Value::Array(
            dense.row_iter().map(|r| json!(r.iter().copied().collect::<Vec<_>>())).collect(),
        ));
    }
    sc.metadata.insert(NOISE_KEY.into(), serde_json::to_value(model)?);
    sc.metadata.insert(RESIDUALS_KEY.into(), Value::Array(all_res));
    sc.metadata.insert(SIGMA_KEY.into(), Value::Array(all_sigma));
    Ok(())
}

/// Residual samples of element `i` stored by [`attach_noise`].
pub fn residuals_of(sc: &Scenario, i: usize) -> Result<Vec<DVector<f64>>> {
    let all = sc
        .metadata
        .get(RESIDUALS_KEY)
        .ok_or_else(|| Error::Schema(format!("scenario metadata has no \"{RESIDUALS_KEY}\"")))?;
    let rows: Vec<Vec<Vec<f64>>> =
        serde_json::from_value(all.clone()).map_err(|e| Error::Schema(e.to_string()))?;
    let rows = rows
        .into_iter()
        .nth(i)
        .ok_or_else(|| Error::Schema(format!("no residual samples for element {i}")))?;
    let n = 2 * sc.gt_elements[i].points.len();
    rows.into_iter()
        .map(|r| {
            if r.len() != n {
                Err(Error::Schema(format!("residual of length {} for {n} coordinates", r.len())))
            } else {
                Ok(DVector::from_vec(r))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn lane(n: usize) -> Polyline {
        Polyline::new((0..n).map(|i| [i as f64, 0.1 * (i as f64).powi(2) / n as f64]).collect())
            .unwrap()
    }

    #[test]
    fn gen_map_is_deterministic_and_bounded() {
        let cfg = MapConfig { seed: 4, n_elements: 12, n_points: 20, extent: 60.0, n_agents: 3, ..Default::default() };
        let a = gen_map(&cfg).unwrap().to_json().unwrap();
        let b = gen_map(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let sc = gen_map(&cfg).unwrap();
        for e in &sc.gt_elements {
            assert_eq!(e.points.len(), 20);
            for p in e.points.points() {
                assert!(p[0].abs() <= 60.0 && p[1].abs() <= 60.0);
            }
        }
        assert_eq!(sc.agents.len(), 3);
        assert!(sc.agents.iter().all(|a| a.future_gt.len() == 30 && a.history.len() == 20));
    }

    #[test]
    fn arcs_have_uniform_spacing() {
        let mut seen = 0;
        for seed in 0..10 {
            let cfg = MapConfig { seed, n_elements: 6, ..Default::default() };
            let sc = gen_map(&cfg).unwrap();
            for (i, e) in sc.gt_elements.iter().enumerate() {
                if shape_of(seed, i) != ShapeKind::Arc {
                    continue;
                }
                seen += 1;
                let chords = e.points.segment_lengths();
                let resampled = e.points.resample(e.points.len()).unwrap();
                for (c, r) in chords.iter().zip(resampled.segment_lengths()) {
                    assert!((c - chords[0]).abs() < 1e-6);
                    assert!((r - chords[0]).abs() < 1e-6);
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn independent_std_matches() {
        let m = NoiseModel::Independent { marginal_std: 0.5 };
        let d = corrupt(&lane(10), &m, 1, 100_000).unwrap();
        let cov = oracle::empirical_cov(&d.residuals);
        for i in 0..20 {
            assert!((cov[(i, i)].sqrt() - 0.5).abs() < 0.03 * 0.5);
        }
    }

    #[test]
    fn translation_shares_offset() {
        let m = NoiseModel::Translation { marginal_std: 0.4 };
        let d = corrupt(&lane(8), &m, 2, 50).unwrap();
        for r in &d.residuals {
            for p in 1..8 {
                assert_eq!(r[2 * p], r[0]);
                assert_eq!(r[2 * p + 1], r[1]);
            }
        }
    }

    #[test]
    fn composite_empirical_cov_matches() {
        let m = NoiseModel::Composite {
            components: vec![
                WeightedModel { weight: 1.0, model: NoiseModel::Translation { marginal_std: 0.3 } },
                WeightedModel { weight: 1.0, model: NoiseModel::Independent { marginal_std: 0.2 } },
            ],
        };
        let d = corrupt(&lane(10), &m, 3, 100_000).unwrap();
        let err = oracle::relative_frobenius(&oracle::empirical_cov(&d.residuals), &d.covariance.dense());
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn analytic_covariances() {
        let pl = lane(6);
        let t = NoiseModel::Translation { marginal_std: 2.0 }.covariance(&pl).unwrap().dense();
        for i in 0..12 {
            for j in 0..12 {
                let expect = if i % 2 == j % 2 { 4.0 } else { 0.0 };
                assert_eq!(t[(i, j)], expect);
            }
        }
        let rg = NoiseModel::RangeGrowth { marginal_std: 0.1, range_growth_rate: 0.05 }
            .covariance(&pl)
            .unwrap()
            .dense();
        let cum = pl.cumulative_length();
        for p in 0..6 {
            let s = 0.1 + 0.05 * cum[p];
            assert!((rg[(2 * p, 2 * p)] - s * s).abs() < 1e-15);
            assert!((rg[(2 * p + 1, 2 * p + 1)] - s * s).abs() < 1e-15);
        }
        // curvature: Σ*_ij = σ²(2/K) Σ_k cos(πk tᵢ) cos(πk tⱼ) on matching axes
        let c = NoiseModel::Curvature { marginal_std: 0.5, correlation_length: 2.0 }
            .covariance(&pl)
            .unwrap();
        let k = curvature_modes(6, 2.0);
        assert_eq!(c.rank(), 2 * k);
        let dense = c.dense();
        let tot = pl.arc_length();
        for p in 0..6 {
            for q in 0..6 {
                let (tp, tq) = (cum[p] / tot, cum[q] / tot);
                let expect: f64 = (1..=k)
                    .map(|m| {
                        let w = std::f64::consts::PI * m as f64;
                        0.25 * 2.0 / k as f64 * (w * tp).cos() * (w * tq).cos()
                    })
                    .sum();
                assert!((dense[(2 * p, 2 * q)] - expect).abs() < 1e-14);
                assert_eq!(dense[(2 * p, 2 * q + 1)], 0.0);
            }
        }
    }

    #[test]
    fn every_model_is_psd() {
        let pl = lane(25);
        let models = [
            NoiseModel::Independent { marginal_std: 0.3 },
            NoiseModel::Translation { marginal_std: 0.3 },
            NoiseModel::Curvature { marginal_std: 0.3, correlation_length: 5.0 },
            NoiseModel::RangeGrowth { marginal_std: 0.05, range_growth_rate: 0.02 },
        ];
        for m in &models {
            let e = m.covariance(&pl).unwrap().dense().symmetric_eigenvalues();
            assert!(e.min() > -1e-12, "{m:?}");
        }
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(NoiseModel::Independent { marginal_std: -1.0 }.validate().is_err());
        assert!(NoiseModel::Curvature { marginal_std: 1.0, correlation_length: 0.5 }.validate().is_err());
        assert!(NoiseModel::Composite { components: vec![] }.validate().is_err());
        let neg = NoiseModel::Composite {
            components: vec![WeightedModel { weight: 0.0, model: NoiseModel::Independent { marginal_std: 1.0 } }],
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn noise_model_json_schema() {
        let m: NoiseModel = serde_json::from_str(
            r#"{"kind":"composite","components":[{"weight":0.5,"model":{"kind":"translation","marginal_std":0.2}},
                {"weight":1,"model":{"kind":"range_growth","marginal_std":0.1,"range_growth_rate":0.01}}]}"#,
        )
        .unwrap();
        assert!(m.validate().is_ok());
    }

    #[test]
    fn attach_and_read_back_residuals() {
        let mut sc = gen_map(&MapConfig { seed: 1, n_elements: 2, n_points: 5, ..Default::default() }).unwrap();
        attach_noise(&mut sc, &NoiseModel::Independent { marginal_std: 0.1 }, 9, 7).unwrap();
        let r = residuals_of(&sc, 1).unwrap();
        assert_eq!(r.len(), 7);
        assert_eq!(r[0].len(), 10);
        let round = Scenario::from_json(&sc.to_json().unwrap()).unwrap();
        assert_eq!(residuals_of(&round, 1).unwrap(), r);
    }
}
