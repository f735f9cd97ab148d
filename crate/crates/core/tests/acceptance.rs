//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use probmap::cli::{self, RunManifest};
use probmap::fitting::{fit_dense_unstructured, fit_lrpd, mean_nll, split_indices, FitConfig};
use probmap::geometry::{MapElement, Polyline, Scenario};
use probmap::metrics::{self, AgentPrediction, MapPredictionSet, PredictedElement, SceneEval, TrajectoryPredictionSet};
use probmap::oracle;
use probmap::rng;
use probmap::synthetic::{corrupt, NoiseModel, WeightedModel};
use probmap::{LrpdParams, ParamCount};
use rand::Rng as _;
use serde_json::Value;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lane() -> Polyline {
    Polyline::new((0..20).map(|i| [2.0 * i as f64, 0.05 * (i as f64).powi(2)]).collect()).unwrap()
}

fn weighted(models: Vec<NoiseModel>) -> NoiseModel {
    NoiseModel::Composite {
        components: models.into_iter().map(|model| WeightedModel { weight: 1.0, model }).collect(),
    }
}

const POINTS: [usize; 4] = [2, 10, 25, 50];
const RANKS: [usize; 4] = [1, 4, 8, 24];

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut trials = 0;
    for (k, &n) in POINTS.iter().enumerate() {
        for (j, &r) in RANKS.iter().enumerate() {
            for s in 0..13u64 {
                let t = oracle::check_kernels(n, r, 1000 * (4 * k + j) as u64 + s).unwrap();
                worst = worst.max(t.max_err());
                trials += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        trials >= 200 && worst <= 1e-8 && secs < 60.0,
        format!("{trials} instances, max rel err {worst:.2e} (tol 1e-8), {secs:.1} s (limit 60 s)"),
    )
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let worst = (0..50u64).map(|s| oracle::check_gradient(10, 4, 7000 + s).unwrap()).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 30.0,
        format!("50 instances N=10 R=4, max scaled err {worst:.2e} (tol 1e-5), {secs:.1} s (limit 30 s)"),
    )
}

fn parameter_count() -> Outcome {
    let c = ParamCount::new(100, 24);
    let from_params = LrpdParams::standard(100, 24).param_count();
    check(
        c.lrpd == 2500 && c.full == 10_000 && c.reduction() == 4.0 && from_params == c,
        format!("lrpd {} vs full {}, ratio {}", c.lrpd, c.full, c.reduction()),
    )
}

fn sampling_recovery() -> Outcome {
    let p = LrpdParams::random(40, 8, 4242);
    let draws = p.sample(99, 100_000);
    let cov = oracle::empirical_cov(&draws);
    let mean = oracle::empirical_mean(&draws);
    let dense = p.dense_cov();
    let frob = oracle::relative_frobenius(&cov, &dense);
    // 4 standard errors per coordinate keeps the family-wise false alarm
    // rate over 40 coordinates below 0.3%.
    let worst_z = (0..40)
        .map(|i| (mean[i] - p.mu[i]).abs() / (dense[(i, i)] / draws.len() as f64).sqrt())
        .fold(0.0, f64::max);
    check(
        frob < 0.05 && worst_z < 4.0,
        format!("cov rel Frobenius {frob:.4} (tol 0.05), worst mean z {worst_z:.2} (bound 4)"),
    )
}

fn fit_recovery() -> Outcome {
    let t0 = Instant::now();
    let model = weighted(vec![
        NoiseModel::Translation { marginal_std: 0.3 },
        NoiseModel::Curvature { marginal_std: 0.3, correlation_length: 7.0 },
        NoiseModel::Independent { marginal_std: 0.05 },
    ]);
    let draw = corrupt(&lane(), &model, 11, 5000).unwrap();
    let cov = &draw.covariance;
    let truth = LrpdParams::new(DVector::zeros(40), cov.diag.map(f64::ln), cov.factor.clone(), 1.0).unwrap();
    let cfg = FitConfig { rank: 8, lr: 1e-2, seed: 1, ..FitConfig::with_epochs(100) };
    let fit = fit_lrpd(&draw.residuals, &cfg).unwrap();
    let diag = fit_lrpd(&draw.residuals, &FitConfig { rank: 0, ..cfg.clone() }).unwrap();
    let (_, hold) = split_indices(draw.residuals.len(), cfg.holdout_fraction, cfg.seed);
    let held: Vec<_> = hold.iter().map(|&i| draw.residuals[i].clone()).collect();
    let gen = mean_nll(&truth, &held).unwrap();
    let gap = (fit.heldout_nll - gen).abs() / gen.abs();
    let diag_gap = (diag.heldout_nll - fit.heldout_nll) / fit.heldout_nll.abs();
    let secs = t0.elapsed().as_secs_f64();
    check(
        gap <= 0.02 && diag_gap >= 0.05 && secs < 300.0,
        format!(
            "held-out NLL fit {:.3} vs generator {gen:.3} (gap {:.2}%, tol 2%), diagonal worse by {:.1}% (need 5%), {secs:.1} s",
            fit.heldout_nll,
            100.0 * gap,
            100.0 * diag_gap
        ),
    )
}

fn instability() -> Outcome {
    let model = weighted(vec![
        NoiseModel::Translation { marginal_std: 0.3 },
        NoiseModel::Curvature { marginal_std: 0.3, correlation_length: 5.0 },
        NoiseModel::Independent { marginal_std: 0.02 },
    ]);
    let mut dense_hits = 0;
    let mut lrpd_violations = 0;
    for seed in 0..10u64 {
        let draw = corrupt(&lane(), &model, 100 + seed, 2000).unwrap();
        let cfg = FitConfig { seed, ..FitConfig::with_epochs(200) };
        if fit_dense_unstructured(&draw.residuals, &cfg).unwrap().psd_violations > 0 {
            dense_hits += 1;
        }
        lrpd_violations += fit_lrpd(&draw.residuals, &cfg).unwrap().psd_violations;
    }
    check(
        dense_hits >= 8 && lrpd_violations == 0,
        format!("dense fit hit PSD violations in {dense_hits}/10 seeds (need 8), LRPD violations {lrpd_violations}"),
    )
}

fn curriculum_benefit() -> Outcome {
    let model = weighted(vec![
        NoiseModel::Curvature { marginal_std: 0.3, correlation_length: 5.0 },
        NoiseModel::Independent { marginal_std: 0.05 },
    ]);
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let draw = corrupt(&lane(), &model, 200 + seed, 2000).unwrap();
        let cfg = FitConfig { rank: 8, lr: 1e-2, seed, ..FitConfig::with_epochs(100) };
        let curriculum = fit_lrpd(&draw.residuals, &cfg).unwrap();
        let flat = fit_lrpd(&draw.residuals, &FitConfig { warmup_epochs: 0, ramp_epochs: 0, ..cfg }).unwrap();
        if curriculum.heldout_nll <= flat.heldout_nll {
            wins += 1;
        }
        gaps.push(curriculum.heldout_nll - flat.heldout_nll);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    check(
        wins >= 8,
        format!("curriculum <= kappa=1 schedule in {wins}/10 trials (need 8), mean NLL gap {mean_gap:+.3}"),
    )
}

fn brute_chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let one_way = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        let mut total = 0.0;
        for p in x {
            let mut best = f64::MAX;
            for q in y {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / x.len() as f64
    };
    (one_way(a, b) + one_way(b, a)) / 2.0
}

fn random_line(g: &mut rng::Rng, n: usize) -> Polyline {
    Polyline::new((0..n).map(|_| [g.gen_range(-20.0..20.0), g.gen_range(-20.0..20.0)]).collect()).unwrap()
}

fn straight(class: usize, y: f64) -> MapElement {
    MapElement { class, points: Polyline::new((0..20).map(|i| [i as f64, y]).collect()).unwrap() }
}

fn metric_suite() -> Outcome {
    let gts: Vec<MapElement> = (0..4).map(|c| straight(c, 10.0 * c as f64)).collect();
    let perfect = MapPredictionSet {
        scene: String::new(),
        elements: gts.iter().map(|e| PredictedElement { score: 0.9, class: e.class, points: e.points.clone() }).collect(),
    };
    let shifted = MapPredictionSet {
        scene: String::new(),
        elements: gts
            .iter()
            .map(|e| PredictedElement { score: 0.9, class: e.class, points: e.points.translated(0.0, 0.75) })
            .collect(),
    };
    let score = |p: &MapPredictionSet| {
        metrics::map_score(&[SceneEval { preds: p, gts: &gts }], 4, &metrics::MAP_THRESHOLDS).unwrap().map
    };
    let (m_perfect, m_shift) = (score(&perfect), score(&shifted));

    let mut g = rng::stream(8, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (na, nb) = (g.gen_range(2..30), g.gen_range(2..30));
        let (a, b) = (random_line(&mut g, na), random_line(&mut g, nb));
        worst = worst.max((metrics::chamfer(&a, &b) - brute_chamfer(a.points(), b.points())).abs());

        let n_agents = g.gen_range(1..6);
        let horizon = g.gen_range(2..20);
        let gt: Vec<Polyline> = (0..n_agents).map(|_| random_line(&mut g, horizon)).collect();
        let pred = TrajectoryPredictionSet {
            agents: (0..n_agents)
                .map(|_| AgentPrediction {
                    modes: (0..6).map(|_| random_line(&mut g, horizon)).collect(),
                    probs: vec![1.0 / 6.0; 6],
                })
                .collect(),
        };
        let (mut ade, mut fde, mut miss) = (0.0, 0.0, 0.0);
        for (a, truth) in pred.agents.iter().zip(&gt) {
            let mut best_ade = f64::MAX;
            let mut best_fde = f64::MAX;
            for m in &a.modes {
                let d: Vec<f64> = m
                    .points()
                    .iter()
                    .zip(truth.points())
                    .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .collect();
                best_ade = best_ade.min(d.iter().sum::<f64>() / d.len() as f64);
                best_fde = best_fde.min(*d.last().unwrap());
            }
            ade += best_ade;
            fde += best_fde;
            if best_fde > 2.0 {
                miss += 1.0;
            }
        }
        let k = n_agents as f64;
        let m = metrics::trajectory_metrics(&pred, &gt).unwrap();
        worst = worst
            .max((m.min_ade - ade / k).abs())
            .max((m.min_fde - fde / k).abs())
            .max((m.miss_rate - miss / k).abs());
    }
    check(
        m_perfect == 1.0 && (m_shift - 2.0 / 3.0).abs() < 1e-12 && worst <= 1e-12,
        format!("perfect mAP {m_perfect}, 0.75 m offset mAP {m_shift:.12}, max oracle diff {worst:.1e} over 100 cases"),
    )
}

fn gauge_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..50u64 {
        let n = POINTS[(s % 4) as usize];
        let r = RANKS[((s / 4) % 4) as usize];
        let p = LrpdParams::random(2 * n, r, 300 + s);
        let q = oracle::random_orthogonal(r, 600 + s);
        let t = p.sample(s, 1).remove(0);
        let rotated = p.rotate_factor(&q).unwrap();
        worst = worst.max((p.nll(&t, false).unwrap() - rotated.nll(&t, false).unwrap()).abs());
    }
    check(worst <= 1e-10, format!("50 rotations, max |Δ nll| {worst:.1e} (tol 1e-10)"))
}

fn run_cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("probmap").chain(args.iter().copied()).map(String::from).collect();
    cli::run(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn calibration() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let noise = r#"{"kind":"composite","components":[
        {"weight":1.0,"model":{"kind":"range_growth","marginal_std":0.05,"range_growth_rate":0.02}},
        {"weight":1.0,"model":{"kind":"curvature","marginal_std":0.1,"correlation_length":5.0}}]}"#;
    let sc = p(d, "sc.json");
    let params = p(d, "params.json");
    let codes = [
        run_cli(&["gen", "--seed", "5", "--elements", "5", "--noise", noise, "--samples", "500", "--out", &sc]),
        run_cli(&["fit", "--scenario", &sc, "--rank", "8", "--epochs", "60", "--lr", "1e-2", "--seed", "5", "--out", &params]),
        run_cli(&[
            "calib", "--params", &params, "--scenario", &sc, "--out", &p(d, "calib.csv"), "--summary", &p(d, "calib.json"),
        ]),
    ];
    if codes != [0, 0, 0] {
        return Err(format!("CLI exit codes {codes:?}"));
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(d.join("calib.json")).unwrap()).unwrap();
    let rows = summary["rows"].as_u64().unwrap();
    let r = summary["pearson"].as_f64().unwrap_or(f64::NAN);
    check(rows >= 10_000 && r > 0.3, format!("Pearson(|error|, std) {r:.3} over {rows} coordinates (need > 0.3)"))
}

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

fn manifest_of(out: &str) -> PathBuf {
    PathBuf::from(format!("{out}.manifest.json"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let noise = r#"{"kind":"composite","components":[
        {"weight":1.0,"model":{"kind":"translation","marginal_std":0.3}},
        {"weight":1.0,"model":{"kind":"independent","marginal_std":0.05}}]}"#;
    let sc = p(d, "sc.json");
    let params = p(d, "params.json");
    let preds = p(d, "preds.json");

    let gt: Scenario = {
        assert_eq!(
            run_cli(&["gen", "--seed", "2", "--elements", "4", "--agents", "3", "--noise", noise, "--samples", "200", "--out", &sc]),
            0
        );
        Scenario::from_json(&std::fs::read_to_string(&sc).unwrap()).unwrap()
    };
    let traj = TrajectoryPredictionSet {
        agents: gt
            .agents
            .iter()
            .map(|a| AgentPrediction {
                modes: (0..6).map(|k| a.future_gt.translated(0.5 * k as f64, 0.0)).collect(),
                probs: vec![1.0 / 6.0; 6],
            })
            .collect(),
    };
    let traj_path = p(d, "traj.json");
    std::fs::write(&traj_path, serde_json::to_string(&traj).unwrap()).unwrap();

    let runs: Vec<(&str, Vec<String>, String)> = vec![
        ("gen", vec![], sc.clone()),
        (
            "fit",
            ["fit", "--scenario", &sc, "--rank", "4", "--epochs", "20", "--lr", "1e-2", "--seed", "3", "--out", &params, "--report", &p(d, "report.json"), "--preds", &preds]
                .map(String::from)
                .to_vec(),
            params.clone(),
        ),
        (
            "sample",
            ["sample", "--params", &params, "--count", "3", "--seed", "4", "--scenario", &sc, "--out", &p(d, "samples.json")]
                .map(String::from)
                .to_vec(),
            p(d, "samples.json"),
        ),
        (
            "encode",
            ["encode", "--params", &params, "--confidence", "0.9", "--film-seed", "6", "--out", &p(d, "features.json")]
                .map(String::from)
                .to_vec(),
            p(d, "features.json"),
        ),
        (
            "eval-map",
            ["eval-map", "--pred", &preds, "--gt", &sc, "--out", &p(d, "metrics.json")].map(String::from).to_vec(),
            p(d, "metrics.json"),
        ),
        (
            "eval-traj",
            ["eval-traj", "--pred", &traj_path, "--gt", &sc, "--out", &p(d, "traj_metrics.json")].map(String::from).to_vec(),
            p(d, "traj_metrics.json"),
        ),
        (
            "oracle-check",
            ["oracle-check", "--seed", "7", "--trials", "200", "--out", &p(d, "oracle.json")].map(String::from).to_vec(),
            p(d, "oracle.json"),
        ),
        (
            "bench",
            ["bench", "--n", "20,40", "--rank", "4", "--repeats", "1", "--out", &p(d, "bench.json")].map(String::from).to_vec(),
            p(d, "bench.json"),
        ),
        (
            "calib",
            ["calib", "--params", &params, "--scenario", &sc, "--out", &p(d, "calib.csv")].map(String::from).to_vec(),
            p(d, "calib.csv"),
        ),
    ];

    let mut failures = Vec::new();
    let mut replayed = 0;
    for (name, args, out) in &runs {
        if !args.is_empty() {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            if run_cli(&refs) != 0 {
                failures.push(format!("{name}: run failed"));
                continue;
            }
        }
        let mpath = manifest_of(out);
        let m = RunManifest::from_json(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        for o in &m.outputs {
            if o.deterministic && sha(Path::new(&o.path)) != o.sha256 {
                failures.push(format!("{name}: {} on disk differs from manifest", o.path));
            }
        }
        let report = p(d, &format!("replay-{name}.json"));
        if run_cli(&["replay", &mpath.display().to_string(), "--out", &report]) != 0 {
            failures.push(format!("{name}: replay mismatch"));
        } else {
            replayed += 1;
        }
    }

    // Timings cannot repeat; everything else in the bench table must.
    let bench_rows = |path: &str| -> Vec<Value> {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        v["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| serde_json::json!([r["n_points"], r["rank"], r["nll"]]))
            .collect()
    };
    let again = p(d, "bench2.json");
    run_cli(&["bench", "--n", "20,40", "--rank", "4", "--repeats", "1", "--out", &again]);
    if bench_rows(&p(d, "bench.json")) != bench_rows(&again) {
        failures.push("bench: non-timing columns differ between runs".into());
    }

    check(
        failures.is_empty() && replayed == runs.len(),
        if failures.is_empty() {
            format!("{replayed}/{} subcommands replayed byte-identically (bench timings exempt)", runs.len())
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("parameter count", parameter_count),
        ("sampling recovery", sampling_recovery),
        ("fit recovery", fit_recovery),
        ("instability reproduction", instability),
        ("curriculum benefit", curriculum_benefit),
        ("metric suite exactness", metric_suite),
        ("gauge invariance", gauge_invariance),
        ("calibration", calibration),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
