use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::manifest::sha256_hex;
use super::*;
use crate::calib::calib_export;
use crate::encoding::{self, FilmWeights};
use crate::fitting::{fit_lrpd, FitConfig, FitReport};
use crate::geometry::{MapClass, Polyline, Scenario};
use crate::lrpd::LrpdParams;
use crate::metrics::{self, MapPredictionSet, PredictedElement, SceneEval, TrajectoryPredictionSet};
use crate::oracle;
use crate::rng;
use crate::synthetic::{self, MapConfig, NoiseModel};

/// Collects inputs and outputs of one run.
#[derive(Default)]
struct Ctx {
    outcome: Outcome,
}

impl Ctx {
    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        self.outcome.inputs.push(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes) });
        String::from_utf8(bytes).map_err(|_| CliError::schema(format!("{} is not UTF-8", path.display())))
    }

    fn scenario(&mut self, path: &Path) -> Result<Scenario, CliError> {
        let text = self.read(path)?;
        Scenario::from_json(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T, CliError> {
        let text = self.read(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
    }

    /// Params files hold either one distribution or an array of them.
    fn params(&mut self, path: &Path) -> Result<Vec<LrpdParams>, CliError> {
        let v: Value = self.json(path)?;
        let list = match v {
            Value::Array(items) => items,
            single => vec![single],
        };
        list.into_iter()
            .map(|item| {
                serde_json::from_value(item).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.outcome.seeds.insert(name.to_string(), value);
    }

    fn emit(&mut self, path: Option<&PathBuf>, bytes: Vec<u8>, deterministic: bool) {
        self.outcome.outputs.push(Artifact { path: path.cloned(), bytes, deterministic });
    }

    fn emit_json<T: Serialize>(&mut self, path: Option<&PathBuf>, value: &T) {
        let mut s = serde_json::to_string_pretty(value).expect("serialisable output");
        s.push('\n');
        self.emit(path, s.into_bytes(), true);
    }
}

pub(super) fn execute(cmd: &Command) -> Result<Outcome, CliError> {
    let mut ctx = Ctx::default();
    match cmd {
        Command::Gen(a) => gen(&mut ctx, a)?,
        Command::Fit(a) => fit(&mut ctx, a)?,
        Command::Sample(a) => sample(&mut ctx, a)?,
        Command::Encode(a) => encode(&mut ctx, a)?,
        Command::EvalMap(a) => eval_map(&mut ctx, a)?,
        Command::EvalTraj(a) => eval_traj(&mut ctx, a)?,
        Command::OracleCheck(a) => oracle_check(&mut ctx, a)?,
        Command::Bench(a) => bench(&mut ctx, a)?,
        Command::Calib(a) => calib(&mut ctx, a)?,
        Command::Replay(_) => return Err(CliError::usage("replay cannot be nested")),
    }
    Ok(ctx.outcome)
}

fn gen(ctx: &mut Ctx, a: &GenArgs) -> Result<(), CliError> {
    ctx.seed("seed", a.seed);
    let cfg = MapConfig {
        seed: a.seed,
        n_elements: a.elements,
        n_points: a.points,
        extent: a.extent,
        n_agents: a.agents,
        history_len: a.history,
        horizon: a.horizon,
    };
    let mut sc = synthetic::gen_map(&cfg)?;
    match &a.noise {
        Some(spec) => {
            let text = if spec.trim_start().starts_with('{') {
                spec.clone()
            } else {
                ctx.read(Path::new(spec))?
            };
            let model: NoiseModel =
                serde_json::from_str(&text).map_err(|e| CliError::schema(format!("noise model: {e}")))?;
            model.validate()?;
            if a.samples > 0 {
                synthetic::attach_noise(&mut sc, &model, a.seed, a.samples)?;
            }
        }
        None if a.samples > 0 => return Err(CliError::usage("--samples requires --noise")),
        None => {}
    }
    let mut s = sc.to_json()?;
    s.push('\n');
    ctx.emit(Some(&a.out), s.into_bytes(), true);
    Ok(())
}

fn fit_config(a: &FitArgs) -> FitConfig {
    FitConfig {
        rank: a.rank,
        lr: a.lr,
        warmup_epochs: a.warmup.unwrap_or(a.epochs / 5),
        ramp_epochs: a.ramp.unwrap_or(a.epochs / 5),
        seed: a.seed,
        batch_size: a.batch_size,
        learn_kappa: a.learn_kappa,
        holdout_fraction: a.holdout,
        ..FitConfig::with_epochs(a.epochs)
    }
}

#[derive(Serialize)]
struct ElementFit<'a> {
    element: usize,
    class: usize,
    #[serde(flatten)]
    report: &'a FitReport,
}

fn fit(ctx: &mut Ctx, a: &FitArgs) -> Result<(), CliError> {
    ctx.seed("seed", a.seed);
    let sc = ctx.scenario(&a.scenario)?;
    let cfg = fit_config(a);
    cfg.validate()?;
    let elements: Vec<usize> = match a.element {
        Some(i) if i >= sc.gt_elements.len() => {
            return Err(CliError::usage(format!("element {i} out of range ({})", sc.gt_elements.len())))
        }
        Some(i) => vec![i],
        None => (0..sc.gt_elements.len()).collect(),
    };
    let reports = elements
        .par_iter()
        .map(|&i| {
            let targets = synthetic::residuals_of(&sc, i)?;
            let cfg = FitConfig { seed: rng::split(a.seed, i as u64), ..cfg.clone() };
            let r = fit_lrpd(&targets, &cfg)?;
            tracing::info!(element = i, heldout_nll = r.heldout_nll, diverged = r.diverged, "fitted");
            Ok(r)
        })
        .collect::<crate::Result<Vec<FitReport>>>()?;

    let params: Vec<&LrpdParams> = reports.iter().map(|r| &r.final_params).collect();
    ctx.emit_json(Some(&a.out), &params);
    if let Some(path) = &a.report {
        let per: Vec<ElementFit> = elements
            .iter()
            .zip(&reports)
            .map(|(&i, r)| ElementFit { element: i, class: sc.gt_elements[i].class, report: r })
            .collect();
        ctx.emit_json(Some(path), &json!({ "config": cfg, "elements": per }));
    }
    if let Some(path) = &a.preds {
        let mut set = MapPredictionSet::default();
        for (&i, r) in elements.iter().zip(&reports) {
            let gt = &sc.gt_elements[i];
            let flat = DVector::from_vec(gt.points.flatten()) + &r.final_params.mu;
            set.elements.push(PredictedElement {
                score: 1.0,
                class: gt.class,
                points: Polyline::unflatten(flat.as_slice())?,
            });
        }
        ctx.emit_json(Some(path), &set);
    }
    let diverged: Vec<usize> =
        elements.iter().zip(&reports).filter(|(_, r)| r.diverged).map(|(&i, _)| i).collect();
    if !diverged.is_empty() {
        ctx.outcome.failure = Some(CliError::numeric(format!("fit diverged for elements {diverged:?}")));
    }
    Ok(())
}

fn sample(ctx: &mut Ctx, a: &SampleArgs) -> Result<(), CliError> {
    ctx.seed("seed", a.seed);
    let params = ctx.params(&a.params)?;
    let offsets: Vec<Option<DVector<f64>>> = match &a.scenario {
        Some(p) => {
            let sc = ctx.scenario(p)?;
            if sc.gt_elements.len() != params.len() {
                return Err(CliError::schema(format!(
                    "{} params for {} scenario elements",
                    params.len(),
                    sc.gt_elements.len()
                )));
            }
            sc.gt_elements.iter().map(|e| Some(DVector::from_vec(e.points.flatten()))).collect()
        }
        None => vec![None; params.len()],
    };
    let mut elements = Vec::with_capacity(params.len());
    for (k, (p, off)) in params.iter().zip(&offsets).enumerate() {
        let draws = p.sample(rng::split(a.seed, k as u64), a.count);
        let mut lines = Vec::with_capacity(draws.len());
        for mut d in draws {
            if let Some(o) = off {
                if o.len() != d.len() {
                    return Err(CliError::schema(format!("element {k}: params and ground truth differ in size")));
                }
                d += o;
            }
            lines.push(Polyline::unflatten(d.as_slice())?);
        }
        elements.push(json!({ "element": k, "samples": lines }));
    }
    ctx.emit_json(Some(&a.out), &json!({ "elements": elements }));
    Ok(())
}

fn encode(ctx: &mut Ctx, a: &EncodeArgs) -> Result<(), CliError> {
    let params = ctx.params(&a.params)?;
    let Some(first) = params.first() else {
        return Err(CliError::schema("params file is empty"));
    };
    let in_dim = encoding::feature_dim(first.rank());
    let weights = match &a.weights {
        Some(p) => ctx.json::<FilmWeights>(p)?,
        None => {
            ctx.seed("film_seed", a.film_seed);
            FilmWeights::random(in_dim, a.embed_dim, a.film_seed)
        }
    };
    weights.validate()?;
    let mut elements = Vec::with_capacity(params.len());
    for p in &params {
        let features = encoding::encode_element(p);
        let modulated = features
            .iter()
            .map(|f| encoding::film_modulate(f, a.confidence, &weights))
            .collect::<crate::Result<Vec<_>>>()?;
        elements.push(json!({ "features": features, "modulated": modulated }));
    }
    ctx.emit_json(
        Some(&a.out),
        &json!({ "confidence": a.confidence, "embed_dim": weights.embed_dim(), "elements": elements }),
    );
    Ok(())
}

fn eval_map(ctx: &mut Ctx, a: &EvalMapArgs) -> Result<(), CliError> {
    let preds: MapPredictionSet = ctx.json(&a.pred)?;
    preds.validate(MapClass::COUNT)?;
    let sc = ctx.scenario(&a.gt)?;
    let scene = SceneEval { preds: &preds, gts: &sc.gt_elements };
    let m = metrics::map_score(&[scene], MapClass::COUNT, &a.thresholds)?;
    ctx.emit_json(a.out.as_ref(), &m);
    Ok(())
}

fn eval_traj(ctx: &mut Ctx, a: &EvalTrajArgs) -> Result<(), CliError> {
    let preds: TrajectoryPredictionSet = ctx.json(&a.pred)?;
    preds.validate(a.modes)?;
    let sc = ctx.scenario(&a.gt)?;
    let gt: Vec<Polyline> = sc.agents.iter().map(|ag| ag.future_gt.clone()).collect();
    let m = metrics::trajectory_metrics(&preds, &gt)?;
    ctx.emit_json(a.out.as_ref(), &m);
    Ok(())
}

const ORACLE_POINTS: [usize; 4] = [2, 10, 25, 50];
const ORACLE_RANKS: [usize; 4] = [1, 4, 8, 24];
const KERNEL_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-5;
const GAUGE_TOL: f64 = 1e-10;

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn oracle_check(ctx: &mut Ctx, a: &OracleArgs) -> Result<(), CliError> {
    ctx.seed("seed", a.seed);
    let trials = (0..a.trials)
        .into_par_iter()
        .map(|t| {
            let n = ORACLE_POINTS[t % ORACLE_POINTS.len()];
            let r = ORACLE_RANKS[(t / ORACLE_POINTS.len()) % ORACLE_RANKS.len()];
            oracle::check_kernels(n, r, rng::split(a.seed, t as u64))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let grads = (0..a.grad_trials)
        .into_par_iter()
        .map(|t| oracle::check_gradient(10, 4, rng::split(a.seed ^ 0x67, t as u64)))
        .collect::<crate::Result<Vec<_>>>()?;
    let gauges = (0..a.gauge_trials)
        .into_par_iter()
        .map(|t| {
            let n = ORACLE_POINTS[t % ORACLE_POINTS.len()];
            let r = ORACLE_RANKS[(t / ORACLE_POINTS.len()) % ORACLE_RANKS.len()];
            oracle::check_gauge(n, r, rng::split(a.seed ^ 0x71, t as u64))
        })
        .collect::<crate::Result<Vec<_>>>()?;

    let col = |f: fn(&oracle::OracleTrial) -> f64| max_of(&trials.iter().map(f).collect::<Vec<_>>());
    let logdet = col(|t| t.logdet_rel_err);
    let maha = col(|t| t.mahalanobis_rel_err);
    let nll = col(|t| t.nll_rel_err);
    let kernel_ok = logdet <= KERNEL_TOL && maha <= KERNEL_TOL && nll <= KERNEL_TOL;
    let grad_ok = max_of(&grads) <= GRAD_TOL;
    let gauge_ok = max_of(&gauges) <= GAUGE_TOL;
    let pass = kernel_ok && grad_ok && gauge_ok;
    let report = json!({
        "kernels": {
            "trials": trials.len(),
            "points": ORACLE_POINTS,
            "ranks": ORACLE_RANKS,
            "max_logdet_rel_err": logdet,
            "max_mahalanobis_rel_err": maha,
            "max_nll_rel_err": nll,
            "tolerance": KERNEL_TOL,
            "pass": kernel_ok,
        },
        "gradient": {
            "trials": grads.len(),
            "max_scaled_err": max_of(&grads),
            "tolerance": GRAD_TOL,
            "pass": grad_ok,
        },
        "gauge": {
            "trials": gauges.len(),
            "max_rel_change": max_of(&gauges),
            "tolerance": GAUGE_TOL,
            "pass": gauge_ok,
        },
        "pass": pass,
    });
    ctx.emit_json(a.out.as_ref(), &report);
    if !pass {
        ctx.outcome.failure = Some(CliError::numeric("structured kernels disagree with the dense oracle"));
    }
    Ok(())
}

fn median_ns(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Least-squares slope of `ln y` against `ln x`.
fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn bench(ctx: &mut Ctx, a: &BenchArgs) -> Result<(), CliError> {
    ctx.seed("seed", a.seed);
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(CliError::usage("--n needs positive point counts"));
    }
    let mut rows = Vec::new();
    let (mut ns, mut lrpd_t, mut dense_t) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &a.n {
        let p = LrpdParams::random(2 * n, a.rank, rng::split(a.seed, n as u64));
        let target = p.sample(a.seed, 1).remove(0);
        let mut nll = 0.0;
        let t_lrpd = median_ns(a.repeats, || nll = p.nll(&target, false).expect("finite params"));
        let t_dense = (!a.no_dense)
            .then(|| median_ns(a.repeats, || {
                std::hint::black_box(oracle::dense_nll(&p, &target).expect("finite params"));
            }));
        tracing::info!(n_points = n, lrpd_ns = t_lrpd, dense_ns = ?t_dense, "timed");
        ns.push(n as f64);
        lrpd_t.push(t_lrpd);
        dense_t.extend(t_dense);
        rows.push(json!({
            "n_points": n,
            "n_coords": 2 * n,
            "rank": a.rank,
            "nll": nll,
            "lrpd_ns": t_lrpd,
            "dense_ns": t_dense,
        }));
    }
    let dense_slope = if a.no_dense { None } else { loglog_slope(&ns, &dense_t) };
    let report = json!({
        "rows": rows,
        "lrpd_loglog_slope": loglog_slope(&ns, &lrpd_t),
        "dense_loglog_slope": dense_slope,
    });
    let mut s = serde_json::to_string_pretty(&report).expect("serialisable output");
    s.push('\n');
    ctx.emit(a.out.as_ref(), s.into_bytes(), false);
    Ok(())
}

fn calib(ctx: &mut Ctx, a: &CalibArgs) -> Result<(), CliError> {
    let params = ctx.params(&a.params)?;
    let sc = ctx.scenario(&a.scenario)?;
    if params.len() != sc.gt_elements.len() {
        return Err(CliError::schema(format!(
            "{} params for {} scenario elements",
            params.len(),
            sc.gt_elements.len()
        )));
    }
    let mut residuals = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let rs = synthetic::residuals_of(&sc, i)?;
        residuals.push(rs.into_iter().map(|r| r - &p.mu).collect::<Vec<_>>());
    }
    let table = calib_export(&params, &residuals)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    ctx.emit(Some(&a.out), csv, true);
    tracing::info!(rows = table.rows.len(), pearson = ?table.pearson, "calibration table");
    if let Some(p) = &a.summary {
        ctx.emit_json(Some(p), &json!({ "rows": table.rows.len(), "pearson": table.pearson }));
    }
    Ok(())
}
