//! End-to-end acceptance suite. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line, then exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use mfg_moments::charfun::{gaussian_density, invert_density, log_charfun_cubic, CharFunEvaluator, DensityParams};
use mfg_moments::hjb::{closed_form_a_const, solve_backward, DEFAULT_GRID};
use mfg_moments::mc::{compare_report, simulate_paths, SimConfig};
use mfg_moments::model::{parse_scenario, ScenarioSpec};
use mfg_moments::moments::{
    closed_form_moments_const, propagate_moments, residual_check, solve_meanfield_fixedpoint, Branch, MomentInit,
};
use mfg_moments::recover::{fit_parameters, ObservedSeries};

type Outcome = Result<String, String>;

fn scenario(json: &str) -> ScenarioSpec {
    parse_scenario(json).unwrap_or_else(|e| panic!("bad test scenario: {e}\n{json}"))
}

fn constant_cost(a: f64, b: f64, a_t: f64, delta: f64, lambda: f64, jump: &str, initial: &str, horizon: f64) -> ScenarioSpec {
    let jump = if jump.is_empty() { String::new() } else { format!(r#""jump": {jump},"#) };
    scenario(&format!(
        r#"{{"T": {horizon}, "delta": {delta}, "lambda": {lambda}, {jump}
            "cost": {{"a": {a}, "b": {b}, "c": 0.1}},
            "terminal": {{"A_T": {a_t}, "B_T": 0.2, "C_T": 0}},
            "initial": {initial}}}"#
    ))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn riccati_closed_form() -> Outcome {
    let mut worst: f64 = 0.0;
    for a in [-2.0, 0.0, 2.0] {
        for a_t in [-0.25, 0.0, 1.0] {
            // Longest of these horizons on which the linearizer keeps its sign.
            let horizon = if a > 0.0 && a_t > 0.0 {
                0.35
            } else if a > 0.0 {
                0.7
            } else if a_t > 0.0 {
                0.45
            } else {
                1.0
            };
            let s = constant_cost(a, 0.0, a_t, 0.0, 0.0, "", r#"{"kind": "dirac", "x0": 0}"#, horizon);
            let sol = solve_backward(&s, DEFAULT_GRID).map_err(|e| format!("a={a}, A_T={a_t}: {e}"))?;
            if !sol.singularities.is_empty() {
                return Err(format!("a={a}, A_T={a_t}: unexpected singularity"));
            }
            for k in 0..=sol.grid.steps {
                let t = sol.grid.t(k);
                let exact = closed_form_a_const(a, a_t, horizon, t);
                let err = (sol.quadratic[k] - exact).abs();
                let rel = if exact == 0.0 { err } else { err / exact.abs() };
                worst = worst.max(rel);
            }
        }
    }
    check(worst < 1e-8, format!("max relative error {worst:.2e} over 9 cases"))
}

fn constant_suite() -> Vec<ScenarioSpec> {
    let initial = r#"{"kind": "gaussian", "x0": 0.5, "v0": 0.5}"#;
    let noises: [(f64, f64, &str); 3] = [
        (1.0, 0.0, ""),
        (0.0, 2.0, r#"{"type": "point", "params": {"z0": 1}}"#),
        (0.5, 1.0, r#"{"type": "gaussian", "params": {"mu": 0.2, "sigma": 0.5}}"#),
    ];
    let mut out = Vec::new();
    for a in [-1.0, 0.0, 1.0] {
        for &(delta, lambda, jump) in &noises {
            out.push(constant_cost(a, 0.3, -0.25, delta, lambda, jump, initial, 1.0));
        }
    }
    out
}

fn moment_residuals() -> Outcome {
    let mut worst_e: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    for (i, s) in constant_suite().iter().enumerate() {
        let sol = solve_backward(s, DEFAULT_GRID).map_err(|e| format!("scenario {i}: {e}"))?;
        let path = propagate_moments(&sol, s).map_err(|e| format!("scenario {i}: {e}"))?;
        if path.focal {
            return Err(format!("scenario {i} is focal"));
        }
        let r = residual_check(&path, s);
        let rv = r.r_v.ok_or_else(|| format!("scenario {i}: variance residual skipped"))?;
        worst_e = worst_e.max(r.r_e);
        worst_v = worst_v.max(rv);
    }
    check(
        worst_e < 1e-6 && worst_v < 1e-6,
        format!("max residual E {worst_e:.2e}, V {worst_v:.2e} over 9 scenarios"),
    )
}

fn representation_equivalence() -> Outcome {
    let initial = r#"{"kind": "dirac", "x0": 0.3}"#;
    let cases = [
        ("brownian", constant_cost(-1.0, 0.3, -0.25, 1.0, 0.0, "", initial, 1.0)),
        (
            "point jump",
            constant_cost(-1.0, 0.3, -0.25, 0.0, 2.0, r#"{"type": "point", "params": {"z0": 1}}"#, initial, 1.0),
        ),
        (
            "mixed",
            constant_cost(
                -1.0,
                0.3,
                -0.25,
                0.5,
                1.0,
                r#"{"type": "gaussian", "params": {"mu": 0.2, "sigma": 0.5}}"#,
                initial,
                1.0,
            ),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, s) in &cases {
        let sol = solve_backward(s, DEFAULT_GRID).map_err(|e| format!("{name}: {e}"))?;
        let ev = CharFunEvaluator::new(s, &sol).map_err(|e| format!("{name}: {e}"))?;
        for t in [0.25, 0.5, 1.0] {
            for j in 0..=400 {
                let w = -20.0 + 0.1 * j as f64;
                let direct = ev.fundamental(t, &[w]).map_err(|e| format!("{name}, t={t}, w={w}: {e}"))?;
                let moment = ev.via_moments(t, &[w]).map_err(|e| format!("{name}, t={t}, w={w}: {e}"))?;
                worst = worst.max((direct - moment).norm());
            }
        }
    }
    check(worst < 1e-6, format!("max |difference| {worst:.2e} over 3 scenarios x 3 times x 401 frequencies"))
}

fn gaussian_density_oracle() -> Outcome {
    let s = constant_cost(-1.0, 0.3, -0.25, 0.8, 0.0, "", r#"{"kind": "gaussian", "x0": 0.5, "v0": 0.2}"#, 1.0);
    let sol = solve_backward(&s, DEFAULT_GRID).map_err(|e| e.to_string())?;
    let ev = CharFunEvaluator::new(&s, &sol).map_err(|e| e.to_string())?;
    let mut worst_density: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for t in [0.25, 0.5, 1.0] {
        let grid = invert_density(&ev, t, DensityParams::default()).map_err(|e| e.to_string())?;
        let mean = ev.solution_moments().mean_at(t);
        let var = ev.solution_moments().variance_at(t);
        for (x, m) in grid.x.iter().zip(&grid.density) {
            let exact = gaussian_density(&mean, var, &[*x]).map_err(|e| e.to_string())?;
            worst_density = worst_density.max((m - exact).abs());
        }
        worst_mass = worst_mass.max((grid.mass - 1.0).abs());
    }
    check(
        worst_density < 1e-6 && worst_mass < 1e-6,
        format!("max density error {worst_density:.2e}, mass error {worst_mass:.2e}"),
    )
}

fn monte_carlo() -> Outcome {
    let flat = |delta: f64, lambda: f64, jump: &str, initial: &str, a: f64, a_t: f64| {
        let jump = if jump.is_empty() { String::new() } else { format!(r#""jump": {jump},"#) };
        scenario(&format!(
            r#"{{"T": 1, "delta": {delta}, "lambda": {lambda}, {jump}
                "cost": {{"a": {a}, "b": 0, "c": 0}},
                "terminal": {{"A_T": {a_t}, "B_T": 0, "C_T": 0}}, "initial": {initial}}}"#
        ))
    };
    let dirac = r#"{"kind": "dirac", "x0": 0}"#;
    let cases = [
        ("brownian", flat(1.0, 0.0, "", dirac, 0.0, 0.0)),
        ("pure jump", flat(0.0, 2.0, r#"{"type": "point", "params": {"z0": 1}}"#, dirac, 0.0, 0.0)),
        ("constant A=1", flat(0.0, 0.0, "", r#"{"kind": "gaussian", "x0": 1, "v0": 1}"#, -2.0, 1.0)),
    ];
    let omegas = [0.5, 1.0, 2.0, std::f64::consts::PI];
    let mut worst: f64 = 0.0;
    let mut discriminating = String::new();
    let mut ok = true;
    for (name, s) in &cases {
        let sol = solve_backward(s, DEFAULT_GRID).map_err(|e| format!("{name}: {e}"))?;
        let cfg = SimConfig {
            n_paths: 100_000,
            dt: 1e-3,
            seed: 7,
            record_times: vec![0.5, 1.0],
            keep_endpoints: true,
        };
        let sim = simulate_paths(s, &sol, &cfg).map_err(|e| format!("{name}: {e}"))?;
        let ev = CharFunEvaluator::new(s, &sol).map_err(|e| format!("{name}: {e}"))?;
        let report = compare_report(&ev, &sol, &sim, &omegas, None).map_err(|e| format!("{name}: {e}"))?;
        for c in &report.comparisons {
            worst = worst.max(c.z.abs());
            if c.z.abs() > 4.0 {
                ok = false;
                discriminating.push_str(&format!("{name}: {} at t={} has z={:.2}; ", c.quantity, c.t, c.z));
            }
        }
        if *name == "constant A=1" {
            let pick = |rows: &[mfg_moments::mc::Comparison]| {
                rows.iter()
                    .find(|c| c.quantity == "E_1" && (c.t - 0.5).abs() < 1e-12)
                    .map(|c| c.z)
                    .unwrap_or(f64::NAN)
            };
            let z_literal = pick(&report.additive_initial_law);
            let z_propagated = pick(&report.comparisons);
            ok &= z_literal.abs() > 10.0 && z_propagated.abs() <= 4.0;
            discriminating.push_str(&format!("literal z={z_literal:.1}, propagated z={z_propagated:.2}"));
        }
    }
    check(ok, format!("max |z| {worst:.2} over 3 scenarios; {discriminating}"))
}

/// Solves E'' + b2 E' + (2a + b1) E + b0 = 0 with E(0) = x0 and
/// E'(T) = 2 A_T E(T) + B_T by shooting on two fine RK4 solves.
fn linear_bvp(a: f64, b: [f64; 3], a_t: f64, b_t: f64, x0: f64, horizon: f64, samples: &[f64]) -> Vec<f64> {
    let steps = 32_768;
    let h = horizon / steps as f64;
    let rhs = |y: [f64; 2], forcing: f64| [y[1], -b[2] * y[1] - (2.0 * a + b[1]) * y[0] - forcing];
    let run = |y0: [f64; 2], forcing: f64| {
        let mut y = y0;
        let mut out = vec![y];
        for _ in 0..steps {
            let k1 = rhs(y, forcing);
            let k2 = rhs([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]], forcing);
            let k3 = rhs([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]], forcing);
            let k4 = rhs([y[0] + h * k3[0], y[1] + h * k3[1]], forcing);
            for i in 0..2 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out.push(y);
        }
        out
    };
    let particular = run([x0, 0.0], b[0]);
    let homogeneous = run([0.0, 1.0], 0.0);
    let (p, q) = (particular[steps], homogeneous[steps]);
    let slope = (b_t + 2.0 * a_t * p[0] - p[1]) / (q[1] - 2.0 * a_t * q[0]);
    samples
        .iter()
        .map(|&t| {
            let k = (t / h).round() as usize;
            particular[k][0] + slope * homogeneous[k][0]
        })
        .collect()
}

fn meanfield_fixed_point() -> Outcome {
    let horizon = 0.5;
    let settings: [(f64, [f64; 3], f64, f64, f64); 3] = [
        (0.0, [0.0, 1.0, 0.0], 0.0, -(0.5f64).sin(), 1.0),
        (0.0, [1.0, 0.0, 0.0], 0.0, -0.5, 0.0),
        (-0.5, [0.5, 0.5, 0.5], -0.25, 0.2, 1.0),
    ];
    let mut worst_res: f64 = 0.0;
    let mut worst_dev: f64 = 0.0;
    let mut max_iter = 0;
    for (a, [b0, b1, b2], a_t, b_t, x0) in settings {
        let s = scenario(&format!(
            r#"{{"T": {horizon}, "delta": 0, "lambda": 0,
                "cost": {{"a": {a}, "b": {{"meanfield": {{"b0": {b0}, "b1": {b1}, "b2": {b2}}}}}, "c": 0}},
                "terminal": {{"A_T": {a_t}, "B_T": {b_t}, "C_T": 0}},
                "initial": {{"kind": "dirac", "x0": {x0}}}}}"#
        ));
        let mf = solve_meanfield_fixedpoint(&s, DEFAULT_GRID, 1e-10, 50).map_err(|e| e.to_string())?;
        max_iter = max_iter.max(mf.iterations);
        let p = &mf.moments;
        let h = p.grid.h();
        let n = p.grid.steps;
        for k in 2..=n - 2 {
            let d = |j: usize| p.mean_dot[j][0];
            let e2 = (-d(k + 2) + 8.0 * d(k + 1) - 8.0 * d(k - 1) + d(k - 2)) / (12.0 * h);
            let r = e2 + b2 * p.mean_dot[k][0] + (2.0 * a + b1) * p.mean[k][0] + b0;
            worst_res = worst_res.max(r.abs());
        }
        let times: Vec<f64> = (0..=n).map(|k| p.grid.t(k)).collect();
        let direct = linear_bvp(a, [b0, b1, b2], a_t, b_t, x0, horizon, &times);
        for k in 0..=n {
            worst_dev = worst_dev.max((p.mean[k][0] - direct[k]).abs());
        }
    }
    check(
        worst_res < 1e-6 && worst_dev < 1e-8 && max_iter <= 50,
        format!("residual {worst_res:.2e}, deviation from direct solve {worst_dev:.2e}, max iterations {max_iter}"),
    )
}

fn times(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
}

fn percentile_95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = ((0.95 * v.len() as f64).ceil() as usize).saturating_sub(1);
    v[idx]
}

fn recovery_round_trip() -> Outcome {
    let init = |e0: f64, de0: f64| MomentInit {
        e0,
        de0,
        v0: 0.4,
        dv0: 1.0,
    };
    // The exponential case keeps both modes and the offset visible; a series
    // dominated by the growing mode leaves b poorly determined under 1% noise.
    let suite = [
        (1.0, 0.5, times(0.0, 5.0, 100), init(1.0, 0.5)),
        (-0.5, 1.0, times(0.0, 4.0, 100), init(0.5, 0.0)),
        (0.0, -0.4, times(0.0, 5.0, 100), init(1.0, 0.5)),
    ];
    let mut noiseless = 0.0f64;
    let mut detail = Vec::new();
    let mut ok = true;
    for (a, b, t, init) in &suite {
        let (a, b) = (*a, *b);
        let start = Instant::now();
        let f = closed_form_moments_const(a, b, 0.8, *init).map_err(|e| e.to_string())?;
        let clean: Vec<f64> = t.iter().map(|&x| f.mean(x)).collect();
        let series = ObservedSeries::scalar(t.clone(), clean.clone(), None).map_err(|e| e.to_string())?;
        let p = fit_parameters(&series, None).map_err(|e| e.to_string())?;
        ok &= p.branch == Branch::of(a);
        noiseless = noiseless.max((p.a - a).abs()).max((p.b[0] - b).abs());

        let fits = (0..100u64)
            .into_par_iter()
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy: Vec<f64> = clean
                    .iter()
                    .map(|&x| x * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                let series = ObservedSeries::scalar(t.clone(), noisy, None).map_err(|e| e.to_string())?;
                fit_parameters(&series, None).map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, String>>()?;
        let correct = fits.iter().filter(|p| p.branch == Branch::of(a)).count();
        // Relative error, with a unit scale for a when the true a is zero.
        let err_a = fits.iter().map(|p| (p.a - a).abs() / a.abs().max(1.0)).collect();
        let err_b = fits.iter().map(|p| (p.b[0] - b).abs() / b.abs()).collect();
        let (pa, pb) = (percentile_95(err_a), percentile_95(err_b));
        ok &= pa <= 0.05 && pb <= 0.05 && correct >= 99;
        detail.push(format!(
            "{}: p95 a {pa:.3}, b {pb:.3}, classified {correct}/100 in {:.1} s",
            Branch::of(a).short_name(),
            start.elapsed().as_secs_f64()
        ));
    }
    ok &= noiseless < 1e-6;
    check(ok, format!("noiseless max error {noiseless:.2e}; {}", detail.join("; ")))
}

fn gaussian_preservation() -> Outcome {
    let s = constant_cost(-1.0, 0.3, 0.5, 0.7, 0.0, "", r#"{"kind": "gaussian", "x0": 0.5, "v0": 0.3}"#, 1.0);
    let sol = solve_backward(&s, DEFAULT_GRID).map_err(|e| e.to_string())?;
    let ev = CharFunEvaluator::new(&s, &sol).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for t in [0.25, 0.5, 1.0] {
        worst = worst.max(log_charfun_cubic(&ev, t).map_err(|e| e.to_string())?.abs());
    }
    check(worst < 1e-6, format!("max third difference of log charfun {worst:.2e}"))
}

fn digests(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario_path = tmp.path().join("pure_jump.json");
    std::fs::write(
        &scenario_path,
        r#"{"T": 1, "delta": 0, "lambda": 2, "jump": {"type": "point", "params": {"z0": 1}},
            "cost": {"a": 0, "b": 0, "c": 0},
            "terminal": {"A_T": 0, "B_T": 0, "C_T": 0}, "initial": {"kind": "dirac", "x0": 0}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (label, threads) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let out = tmp.path().join(label);
        let status = Command::new(env!("CARGO_BIN_EXE_mfg-moments"))
            .args(["compare", "--scenario"])
            .arg(&scenario_path)
            .args(["--paths", "100000", "--dt", "0.001", "--seed", "7", "--out"])
            .arg(&out)
            .env("MFG_MOMENTS_THREADS", threads)
            .status()
            .map_err(|e| e.to_string())?;
        if status.code() != Some(0) {
            return Err(format!("compare with {threads} threads exited with {status}"));
        }
        runs.push(digests(&out));
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    check(identical && names.len() >= 5, format!("3 compare runs (1, 4, 1 threads) byte-identical: {identical}; files {names:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 Riccati closed-form agreement", riccati_closed_form, Duration::from_secs(1)),
        ("2 moment ODE residuals", moment_residuals, Duration::from_secs(1)),
        ("3 charfun representation equivalence", representation_equivalence, Duration::from_secs(5)),
        ("4 Gaussian density by FFT inversion", gaussian_density_oracle, Duration::from_secs(2)),
        ("5 Monte Carlo adjudication", monte_carlo, Duration::from_secs(60)),
        ("6 mean-field fixed point", meanfield_fixed_point, Duration::from_secs(2)),
        ("7 parameter recovery round trip", recovery_round_trip, Duration::from_secs(30)),
        ("8 Gaussian preservation", gaussian_preservation, Duration::from_secs(1)),
        ("9 determinism across worker counts", determinism, Duration::from_secs(300)),
    ];
    let mut failures = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget {budget:?}")),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} criterion {name}: {detail} ({:.2} s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
