//! Error-versus-predicted-spread tables for calibration plots.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lrpd::LrpdParams;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibRow {
    pub element: usize,
    pub sample: usize,
    pub coord: usize,
    pub abs_error: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibTable {
    pub rows: Vec<CalibRow>,
    /// `None` when either column has zero variance.
    pub pearson: Option<f64>,
}

impl CalibTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row).map_err(|e| Error::Io(e.into()))?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One row per coordinate of every residual, against the marginal standard
/// deviation of the element's distribution. `residuals[k]` are errors
/// relative to the mean of `params[k]`.
pub fn calib_export(params: &[LrpdParams], residuals: &[Vec<DVector<f64>>]) -> Result<CalibTable> {
    if params.len() != residuals.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: residuals.len() });
    }
    let mut rows = Vec::new();
    for (k, (p, rs)) in params.iter().zip(residuals).enumerate() {
        let std = p.marginal_var().map(f64::sqrt);
        for (s, r) in rs.iter().enumerate() {
            if r.len() != p.n_coords() {
                return Err(Error::DimensionMismatch { expected: p.n_coords(), got: r.len() });
            }
            rows.extend(r.iter().zip(std.iter()).enumerate().map(|(coord, (e, sd))| CalibRow {
                element: k,
                sample: s,
                coord,
                abs_error: e.abs(),
                std: *sd,
            }));
        }
    }
    let err: Vec<f64> = rows.iter().map(|r| r.abs_error).collect();
    let std: Vec<f64> = rows.iter().map(|r| r.std).collect();
    Ok(CalibTable { pearson: pearson(&err, &std), rows })
}
