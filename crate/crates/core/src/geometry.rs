//! Polylines, class probabilities and scenarios.
//!
//! A polyline with `N` points is flattened as `(x_1, y_1, ..., x_N, y_N)`.
//! Every covariance index in the crate assumes this interleaved layout:
//! coordinate `2n` is the x of point `n`, `2n + 1` its y.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Default number of points per map element.
pub const DEFAULT_POINTS: usize = 20;

/// Map element categories used by the synthetic generator and the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Divider,
    Boundary,
    Crossing,
    Centerline,
}

impl MapClass {
    pub const ALL: [MapClass; 4] = [
        MapClass::Divider,
        MapClass::Boundary,
        MapClass::Crossing,
        MapClass::Centerline,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
            MapClass::Crossing => "crossing",
            MapClass::Centerline => "centerline",
        }
    }
}

/// Ordered BEV points in meters. At least two, all finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polyline {
    points: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for Polyline {
    type Error = Error;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<[f64; 2]> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGeometry(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Inverse of [`Polyline::flatten`].
    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::InvalidGeometry(format!(
                "flattened polyline has odd length {}",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .collect()
    }

    /// Cumulative arc length at each vertex, starting at 0.
    pub fn cumulative_length(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.points.len());
        out.push(0.0);
        for s in self.segment_lengths() {
            acc += s;
            out.push(acc);
        }
        out
    }

    pub fn arc_length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }

    /// Point at arc length `s` (clamped to `[0, total]`).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let cum = self.cumulative_length();
        point_at_with(&self.points, &cum, s)
    }

    /// `n_target` points at equal arc-length spacing along the
    /// piecewise-linear curve. Endpoints are copied exactly.
    pub fn resample(&self, n_target: usize) -> Result<Polyline> {
        if n_target < 2 {
            return Err(Error::InvalidGeometry(format!(
                "resample target must be >= 2, got {n_target}"
            )));
        }
        let cum = self.cumulative_length();
        let total = *cum.last().unwrap();
        if !(total > 0.0) {
            return Err(Error::InvalidGeometry("zero-length polyline".into()));
        }
        let last = n_target - 1;
        let mut out = Vec::with_capacity(n_target);
        let mut seg = 0;
        for j in 0..n_target {
            if j == 0 {
                out.push(self.points[0]);
                continue;
            }
            if j == last {
                out.push(*self.points.last().unwrap());
                continue;
            }
            let s = total * j as f64 / last as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            out.push(interpolate(&self.points, &cum, seg, s));
        }
        Polyline::new(out)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polyline {
        Polyline {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Polyline {
        Polyline {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
        }
    }
}

fn interpolate(points: &[[f64; 2]], cum: &[f64], seg: usize, s: f64) -> [f64; 2] {
    let (a, b) = (points[seg], points[seg + 1]);
    let len = cum[seg + 1] - cum[seg];
    let t = if len > 0.0 {
        ((s - cum[seg]) / len).clamp(0.0, 1.0)
    } else {
        0.0
    };
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn point_at_with(points: &[[f64; 2]], cum: &[f64], s: f64) -> [f64; 2] {
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let seg = match cum.iter().position(|&c| c >= s) {
        Some(0) | None => 0,
        Some(i) => i - 1,
    };
    interpolate(points, cum, seg.min(points.len() - 2), s)
}

/// A class probability vector on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassProbs {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ClassProbs {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ClassProbs::new(v)
    }
}

impl From<ClassProbs> for Vec<f64> {
    fn from(c: ClassProbs) -> Self {
        c.probs
    }
}

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParams("empty class probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParams("class probability outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// All mass on class `class` out of `num_classes`.
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidParams(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.probs.get(class).copied()
    }

    /// Index of the most probable class (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: usize,
    pub points: Polyline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub history: Polyline,
    pub future_gt: Polyline,
}

/// Ground-truth map elements and agent trajectories for one scene.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Scenario {
    pub gt_elements: Vec<MapElement>,
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

impl Scenario {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, e) in self.gt_elements.iter().enumerate() {
            if e.class >= num_classes {
                return Err(Error::Schema(format!(
                    "element {i} has class {} but only {num_classes} classes exist",
                    e.class
                )));
            }
        }
        if let Some(first) = self.agents.first() {
            let h = first.future_gt.len();
            if let Some(i) = self.agents.iter().position(|a| a.future_gt.len() != h) {
                return Err(Error::Schema(format!(
                    "agent {i} future horizon {} differs from {h}",
                    self.agents[i].future_gt.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        sc.validate(MapClass::COUNT)?;
        Ok(sc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
