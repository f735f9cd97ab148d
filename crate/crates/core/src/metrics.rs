//! Map-element mAP over Chamfer thresholds and best-of-K trajectory metrics.
//!
//! Conventions (the usual detection-AP protocol):
//! * Chamfer distance is the mean nearest-point distance in each direction,
//!   averaged over both directions.
//! * Predictions are matched greedily in descending score order (ties by
//!   lower element index), each ground truth at most once, to the nearest
//!   unmatched ground truth of the same class within the threshold.
//! * AP integrates the all-point interpolated precision-recall curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MapClass, MapElement, Polyline};

pub const MAP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
pub const MISS_THRESHOLD: f64 = 2.0;
pub const NUM_MODES: usize = 6;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn mean_nearest(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Bidirectional Chamfer distance in meters.
pub fn chamfer(a: &Polyline, b: &Polyline) -> f64 {
    0.5 * (mean_nearest(a.points(), b.points()) + mean_nearest(b.points(), a.points()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedElement {
    pub score: f64,
    pub class: usize,
    pub points: Polyline,
}

/// Scored map-element predictions for one scene.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MapPredictionSet {
    #[serde(default)]
    pub scene: String,
    pub elements: Vec<PredictedElement>,
}

impl MapPredictionSet {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, e) in self.elements.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::Schema(format!("prediction {i} score {} outside [0, 1]", e.score)));
            }
            if e.class >= num_classes {
                return Err(Error::Schema(format!("prediction {i} class {} out of range", e.class)));
            }
        }
        Ok(())
    }
}

/// One scene to evaluate: predictions against ground truth.
#[derive(Clone, Copy, Debug)]
pub struct SceneEval<'a> {
    pub preds: &'a MapPredictionSet,
    pub gts: &'a [MapElement],
}

/// All-point interpolated AP from a ranked list of TP flags.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..tp.len() {
        ap += (recall[k] - prev_r) * precision[k];
        prev_r = recall[k];
    }
    ap
}

/// Ranked TP/FP flags of class `class` predictions at `threshold`, plus the
/// number of ground-truth elements of that class.
pub fn match_class(scenes: &[SceneEval<'_>], class: usize, threshold: f64) -> (Vec<bool>, usize) {
    // (score, element index, scene index)
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (s, sc) in scenes.iter().enumerate() {
        n_gt += sc.gts.iter().filter(|g| g.class == class).count();
        for (i, p) in sc.preds.elements.iter().enumerate() {
            if p.class == class {
                ranked.push((p.score, i, s));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let tp = ranked
        .iter()
        .map(|&(_, i, s)| {
            let pred = &scenes[s].preds.elements[i].points;
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in scenes[s].gts.iter().enumerate() {
                if g.class != class || used[s][j] {
                    continue;
                }
                let d = chamfer(pred, &g.points);
                if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, n_gt)
}

/// AP of one class at one Chamfer threshold. Errors with
/// [`Error::Undefined`] when no scene has ground truth of that class.
pub fn average_precision(scenes: &[SceneEval<'_>], class: usize, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParams(format!("threshold must be > 0, got {threshold}")));
    }
    let (tp, n_gt) = match_class(scenes, class, threshold);
    if n_gt == 0 {
        return Err(Error::Undefined(format!("no ground truth of class {class}")));
    }
    Ok(ap_from_ranked(&tp, n_gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub thresholds: Vec<f64>,
    /// Class name → threshold (as text) → AP, `null` where undefined.
    pub per_class: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

fn class_name(c: usize) -> String {
    MapClass::from_index(c).map(|m| m.name().to_string()).unwrap_or_else(|| format!("class_{c}"))
}

/// Mean AP over every `(class, threshold)` pair with a defined AP.
pub fn map_score(scenes: &[SceneEval<'_>], num_classes: usize, thresholds: &[f64]) -> Result<MapMetrics> {
    if num_classes == 0 {
        return Err(Error::InvalidParams("need at least one class".into()));
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..num_classes {
        let mut row = BTreeMap::new();
        for &t in thresholds {
            let ap = match average_precision(scenes, c, t) {
                Ok(v) => {
                    sum += v;
                    count += 1;
                    Some(v)
                }
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            row.insert(format!("{t}"), ap);
        }
        per_class.insert(class_name(c), row);
    }
    if count == 0 {
        return Err(Error::Undefined("no class has ground truth; mAP undefined".into()));
    }
    Ok(MapMetrics { thresholds: thresholds.to_vec(), per_class, map: sum / count as f64 })
}

/// Best-of-K predictions for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub modes: Vec<Polyline>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryPredictionSet {
    pub agents: Vec<AgentPrediction>,
}

impl TrajectoryPredictionSet {
    pub fn validate(&self, k: usize) -> Result<()> {
        for (i, a) in self.agents.iter().enumerate() {
            if a.modes.len() != k || a.probs.len() != k {
                return Err(Error::Schema(format!(
                    "agent {i} has {} modes / {} probabilities, expected {k}",
                    a.modes.len(),
                    a.probs.len()
                )));
            }
            let s: f64 = a.probs.iter().sum();
            if (s - 1.0).abs() > 1e-6 || a.probs.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Schema(format!("agent {i} mode probabilities sum to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    #[serde(rename = "MR")]
    pub miss_rate: f64,
    pub k: usize,
    pub agents: usize,
}

fn check_horizons(pred: &TrajectoryPredictionSet, gt: &[Polyline]) -> Result<()> {
    if pred.agents.len() != gt.len() {
        return Err(Error::DimensionMismatch { expected: gt.len(), got: pred.agents.len() });
    }
    for (a, g) in pred.agents.iter().zip(gt) {
        for m in &a.modes {
            if m.len() != g.len() {
                return Err(Error::DimensionMismatch { expected: g.len(), got: m.len() });
            }
        }
        if a.modes.is_empty() {
            return Err(Error::Schema("agent without modes".into()));
        }
    }
    if gt.is_empty() {
        return Err(Error::Undefined("no agents".into()));
    }
    Ok(())
}

fn ade(m: &Polyline, g: &Polyline) -> f64 {
    m.points().iter().zip(g.points()).map(|(a, b)| dist(*a, *b)).sum::<f64>() / g.len() as f64
}

fn fde(m: &Polyline, g: &Polyline) -> f64 {
    dist(*m.points().last().unwrap(), *g.points().last().unwrap())
}

fn per_agent_min(pred: &TrajectoryPredictionSet, gt: &[Polyline], f: fn(&Polyline, &Polyline) -> f64) -> Vec<f64> {
    pred.agents
        .iter()
        .zip(gt)
        .map(|(a, g)| a.modes.iter().map(|m| f(m, g)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Mean over agents of the smallest per-mode average displacement.
pub fn min_ade(pred: &TrajectoryPredictionSet, gt: &[Polyline]) -> Result<f64> {
    check_horizons(pred, gt)?;
    let v = per_agent_min(pred, gt, ade);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over agents of the smallest per-mode endpoint displacement.
pub fn min_fde(pred: &TrajectoryPredictionSet, gt: &[Polyline]) -> Result<f64> {
    check_horizons(pred, gt)?;
    let v = per_agent_min(pred, gt, fde);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of agents whose minFDE exceeds 2 m.
pub fn miss_rate(pred: &TrajectoryPredictionSet, gt: &[Polyline]) -> Result<f64> {
    check_horizons(pred, gt)?;
    let v = per_agent_min(pred, gt, fde);
    Ok(v.iter().filter(|&&d| d > MISS_THRESHOLD).count() as f64 / v.len() as f64)
}

pub fn trajectory_metrics(pred: &TrajectoryPredictionSet, gt: &[Polyline]) -> Result<TrajectoryMetrics> {
    Ok(TrajectoryMetrics {
        min_ade: min_ade(pred, gt)?,
        min_fde: min_fde(pred, gt)?,
        miss_rate: miss_rate(pred, gt)?,
        k: pred.agents.first().map_or(0, |a| a.modes.len()),
        agents: gt.len(),
    })
}
