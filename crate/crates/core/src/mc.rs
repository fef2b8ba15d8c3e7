//! Euler–Maruyama simulation of the controlled jump-diffusion, used as an
//! independent check on the analytic moments and characteristic functions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::charfun::CharFunEvaluator;
use crate::error::{Error, Result};
use crate::hjb::HjbSolution;
use crate::io::{meta_line, ser_num, CsvTable};
use crate::model::ScenarioSpec;
use crate::moments::{propagate_moments_with, InitialTransport};

pub const MIN_PATHS: usize = 1000;
pub const Z_FAIL: f64 = 4.0;
const MAX_JUMP_RATE_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub record_times: Vec<f64>,
    /// Retain X at every record time for every path.
    pub keep_endpoints: bool,
}

impl SimConfig {
    /// Checks the configuration and returns the step index of each record time.
    pub fn step_indices(&self, horizon: f64) -> Result<Vec<usize>> {
        if self.n_paths < MIN_PATHS {
            return Err(Error::Argument(format!("need at least {MIN_PATHS} paths")));
        }
        if !(self.dt > 0.0 && self.dt <= horizon / 100.0 + 1e-15) {
            return Err(Error::Argument(format!("dt must lie in (0, T/100], got {}", self.dt)));
        }
        let mut steps = Vec::with_capacity(self.record_times.len());
        for (j, &t) in self.record_times.iter().enumerate() {
            if !(0.0..=horizon + 1e-12).contains(&t) {
                return Err(Error::Argument(format!("record time {t} outside [0, T]")));
            }
            if j > 0 && t <= self.record_times[j - 1] {
                return Err(Error::Argument("record times must increase strictly".into()));
            }
            let k = (t / self.dt).round();
            if (k * self.dt - t).abs() > 1e-12 * t.max(1.0) * k.max(1.0) {
                return Err(Error::Argument(format!("dt = {} does not divide t = {t}", self.dt)));
            }
            steps.push(k as usize);
        }
        Ok(steps)
    }
}

/// Estimators at one record time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRecord {
    pub t: f64,
    pub e_hat: Vec<f64>,
    pub se_e: Vec<f64>,
    /// Per-coordinate sample variance, averaged over coordinates.
    pub v_hat: f64,
    pub se_v: f64,
    pub n_jumps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub config: SimConfig,
    pub dimension: usize,
    pub records: Vec<SimRecord>,
    /// `endpoints[r][path]` is X at record time r, when retained.
    pub endpoints: Option<Vec<Vec<Vec<f64>>>>,
}

struct PathOutcome {
    states: Vec<Vec<f64>>,
    jumps: Vec<u64>,
}

/// Simulates `X' = 2A(t)X + B(t)` plus Brownian and compound Poisson noise.
///
/// Path `j` draws from a ChaCha8 stream keyed by `(seed, j)`, so results do not
/// depend on the number of worker threads.
pub fn simulate_paths(spec: &ScenarioSpec, sol: &HjbSolution, cfg: &SimConfig) -> Result<SimResult> {
    let record_steps = cfg.step_indices(spec.horizon)?;
    let n = spec.dimension;
    let total_steps = record_steps.last().copied().unwrap_or(0);
    let t_max = total_steps as f64 * cfg.dt;
    if !sol.regular_on(t_max.min(spec.horizon)) {
        let t = sol.singularities.first().copied().unwrap_or(0.0);
        return Err(Error::Singular { t });
    }
    let rate = spec.lambda * cfg.dt;
    let jumps_on = spec.lambda > 0.0 && !spec.jump.is_none();
    if jumps_on && rate > MAX_JUMP_RATE_STEP {
        return Err(Error::Simulation(format!("λ·dt = {rate} exceeds {MAX_JUMP_RATE_STEP}; reduce dt")));
    }
    if jumps_on {
        spec.jump.law()?;
    }
    let no_jump = (-rate).exp();
    let drift: Vec<(f64, Vec<f64>)> = (0..total_steps)
        .map(|k| {
            let t = (k as f64 * cfg.dt).min(spec.horizon);
            let mut b = vec![0.0; n];
            sol.linear_linear(t, &mut b);
            (sol.quadratic_linear(t), b)
        })
        .collect();
    let diffusion = spec.delta * cfg.dt.sqrt();
    let gaussian_start = spec.initial.v0 > 0.0;
    let init_sd = spec.initial.v0.sqrt();

    let run = |path: usize| -> PathOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(path as u64);
        let mut x: Vec<f64> = spec.initial.x0.clone();
        if gaussian_start {
            for xi in x.iter_mut() {
                *xi += init_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut jump = vec![0.0; n];
        let mut states = Vec::with_capacity(record_steps.len());
        let mut jumps = Vec::with_capacity(record_steps.len());
        let mut count: u64 = 0;
        let mut next = 0;
        for k in 0..=total_steps {
            while next < record_steps.len() && record_steps[next] == k {
                states.push(x.clone());
                jumps.push(count);
                next += 1;
            }
            if k == total_steps {
                break;
            }
            let (a, b) = &drift[k];
            for i in 0..n {
                let mut dx = (2.0 * a * x[i] + b[i]) * cfg.dt;
                if diffusion > 0.0 {
                    dx += diffusion * rng.sample::<f64, _>(StandardNormal);
                }
                x[i] += dx;
            }
            if jumps_on {
                let arrivals = poisson_by_inversion(rng.random::<f64>(), rate, no_jump);
                for _ in 0..arrivals {
                    // Checked above: the law exists.
                    if let Ok(law) = spec.jump.law() {
                        law.sample(&mut rng, &mut jump);
                    }
                    for i in 0..n {
                        x[i] += jump[i];
                    }
                }
                count += arrivals;
            }
        }
        PathOutcome { states, jumps }
    };
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths).into_par_iter().map(run).collect();

    let records = record_steps
        .iter()
        .enumerate()
        .map(|(r, _)| estimate(cfg.record_times[r], n, outcomes.iter().map(|o| (&o.states[r], o.jumps[r]))))
        .collect();
    let endpoints = cfg.keep_endpoints.then(|| {
        (0..record_steps.len())
            .map(|r| outcomes.iter().map(|o| o.states[r].clone()).collect())
            .collect()
    });
    Ok(SimResult {
        config: cfg.clone(),
        dimension: n,
        records,
        endpoints,
    })
}

fn poisson_by_inversion(u: f64, rate: f64, p0: f64) -> u64 {
    let mut k = 0u64;
    let mut p = p0;
    let mut cdf = p0;
    while u > cdf && k < 64 {
        k += 1;
        p *= rate / k as f64;
        cdf += p;
    }
    k
}

fn estimate<'a>(t: f64, n: usize, samples: impl Iterator<Item = (&'a Vec<f64>, u64)> + Clone) -> SimRecord {
    let count = samples.clone().count() as f64;
    let mut mean = vec![0.0; n];
    let mut n_jumps = 0;
    for (x, j) in samples.clone() {
        for i in 0..n {
            mean[i] += x[i];
        }
        n_jumps += j;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    let (mut y_sum, mut y2_sum) = (0.0, 0.0);
    for (x, _) in samples {
        let mut y = 0.0;
        for i in 0..n {
            let d = x[i] - mean[i];
            var[i] += d * d;
            y += d * d;
        }
        y /= n as f64;
        y_sum += y;
        y2_sum += y * y;
    }
    let se_e = var.iter().map(|v| (v / (count - 1.0) / count).sqrt()).collect();
    let y_mean = y_sum / count;
    let y_var = (y2_sum / count - y_mean * y_mean).max(0.0);
    SimRecord {
        t,
        e_hat: mean,
        se_e,
        v_hat: y_sum / (count - 1.0),
        se_v: (y_var / count).sqrt(),
        n_jumps,
    }
}

impl SimResult {
    /// Columns `t, E_hat_i, se_E_i, V_hat, se_V, n_jumps`.
    pub fn to_table(&self) -> CsvTable {
        let n = self.dimension;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("E_hat_{i}")));
        header.extend((1..=n).map(|i| format!("se_E_{i}")));
        header.extend(["V_hat", "se_V", "n_jumps"].map(String::from));
        let rows = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![r.t];
                row.extend(&r.e_hat);
                row.extend(&r.se_e);
                row.extend([r.v_hat, r.se_v, r.n_jumps as f64]);
                row
            })
            .collect();
        CsvTable {
            comments: vec![meta_line(&[
                ("paths", self.config.n_paths.to_string()),
                ("dt", crate::io::fmt_num(self.config.dt)),
                ("seed", self.config.seed.to_string()),
            ])],
            header,
            rows,
        }
    }

    /// Columns `path, t, x_1..x_n`, one row per path and record time.
    pub fn endpoints_table(&self) -> Result<CsvTable> {
        let ends = self
            .endpoints
            .as_ref()
            .ok_or_else(|| Error::Argument("path endpoints were not retained".into()))?;
        let mut header = vec!["path".to_string(), "t".into()];
        header.extend((1..=self.dimension).map(|i| format!("x_{i}")));
        let mut rows = Vec::new();
        for (r, rec) in self.records.iter().enumerate() {
            for (j, x) in ends[r].iter().enumerate() {
                let mut row = vec![j as f64, rec.t];
                row.extend(x);
                rows.push(row);
            }
        }
        Ok(CsvTable {
            comments: Vec::new(),
            header,
            rows,
        })
    }

    pub fn record_index(&self, t: f64) -> Option<usize> {
        self.records.iter().position(|r| (r.t - t).abs() <= 1e-12 * t.abs().max(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalCharFun {
    pub omega: f64,
    pub mean: Complex64,
    pub se_re: f64,
    pub se_im: f64,
}

/// `(1/N) Σ exp(-iω X_1)` at record time `t`, with per-component standard errors.
///
/// The frequency acts on the first coordinate.
pub fn empirical_charfun(sim: &SimResult, t: f64, omegas: &[f64]) -> Result<Vec<EmpiricalCharFun>> {
    let ends = sim
        .endpoints
        .as_ref()
        .ok_or_else(|| Error::Argument("path endpoints were not retained".into()))?;
    let r = sim
        .record_index(t)
        .ok_or_else(|| Error::Argument(format!("t = {t} is not a record time")))?;
    let xs = &ends[r];
    let count = xs.len() as f64;
    Ok(omegas
        .iter()
        .map(|&w| {
            let (mut sc, mut ss) = (0.0, 0.0);
            for x in xs {
                let (s, c) = (w * x[0]).sin_cos();
                sc += c;
                ss -= s;
            }
            let (mc, ms) = (sc / count, ss / count);
            let (mut vc, mut vs) = (0.0, 0.0);
            for x in xs {
                let (s, c) = (w * x[0]).sin_cos();
                vc += (c - mc) * (c - mc);
                vs += (-s - ms) * (-s - ms);
            }
            let se = |v: f64| (v / (count - 1.0) / count).sqrt();
            EmpiricalCharFun {
                omega: w,
                mean: Complex64::new(mc, ms),
                se_re: se(vc),
                se_im: se(vs),
            }
        })
        .collect())
}

/// `(sim - analytic)/se`. A standard error at round-off level means an exact comparison.
pub fn z_score(simulated: f64, analytic: f64, se: f64) -> f64 {
    let diff = simulated - analytic;
    let roundoff = 1e-12 * analytic.abs().max(1.0);
    if se > roundoff {
        diff / se
    } else if diff.abs() <= roundoff {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub quantity: String,
    #[serde(serialize_with = "ser_num")]
    pub t: f64,
    #[serde(serialize_with = "ser_num")]
    pub analytic: f64,
    #[serde(serialize_with = "ser_num")]
    pub simulated: f64,
    #[serde(serialize_with = "ser_num")]
    pub se: f64,
    #[serde(serialize_with = "ser_num")]
    pub z: f64,
    pub pass: bool,
}

impl Comparison {
    fn new(quantity: String, t: f64, analytic: f64, simulated: f64, se: f64) -> Self {
        let z = z_score(simulated, analytic, se);
        Self {
            quantity,
            t,
            analytic,
            simulated,
            se,
            z,
            pass: z.abs() <= Z_FAIL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Refinement {
    pub quantity: String,
    #[serde(serialize_with = "ser_num")]
    pub t: f64,
    #[serde(serialize_with = "ser_num")]
    pub coarse: f64,
    #[serde(serialize_with = "ser_num")]
    pub fine: f64,
    #[serde(serialize_with = "ser_num")]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub pass: bool,
    pub paths: usize,
    #[serde(serialize_with = "ser_num")]
    pub dt: f64,
    pub seed: u64,
    pub comparisons: Vec<Comparison>,
    /// Initial law added without transport; informative only, never affects `pass`.
    pub additive_initial_law: Vec<Comparison>,
    pub refinement: Vec<Refinement>,
}

/// Scores the simulation against analytic moments and characteristic function values.
///
/// `refined` is an optional second run with a smaller `dt` and the same record times.
pub fn compare_report(
    ev: &CharFunEvaluator,
    sol: &HjbSolution,
    sim: &SimResult,
    omegas: &[f64],
    refined: Option<&SimResult>,
) -> Result<CompareReport> {
    let spec = ev.spec();
    if sim.dimension != spec.dimension {
        return Err(Error::Argument("simulation and scenario differ in dimension".into()));
    }
    if let Some(fine) = refined {
        let same = fine.records.len() == sim.records.len()
            && fine.records.iter().zip(&sim.records).all(|(a, b)| (a.t - b.t).abs() <= 1e-12);
        if !same {
            return Err(Error::Argument("record times of the two runs differ".into()));
        }
    }
    let path = ev.solution_moments();
    let additive = propagate_moments_with(sol, spec, InitialTransport::Additive)?;
    let mut comparisons = Vec::new();
    let mut additive_rows = Vec::new();
    for rec in &sim.records {
        let t = rec.t;
        if t > spec.horizon + 1e-12 {
            return Err(Error::Argument(format!("record time {t} beyond the horizon")));
        }
        let e = path.mean_at(t);
        let e_add = additive.mean_at(t);
        for i in 0..sim.dimension {
            comparisons.push(Comparison::new(format!("E_{}", i + 1), t, e[i], rec.e_hat[i], rec.se_e[i]));
            additive_rows.push(Comparison::new(format!("E_{}", i + 1), t, e_add[i], rec.e_hat[i], rec.se_e[i]));
        }
        comparisons.push(Comparison::new("V".into(), t, path.variance_at(t), rec.v_hat, rec.se_v));
        additive_rows.push(Comparison::new("V".into(), t, additive.variance_at(t), rec.v_hat, rec.se_v));
        if sim.endpoints.is_some() && !omegas.is_empty() {
            let slice = ev.slice(t)?;
            for emp in empirical_charfun(sim, t, omegas)? {
                let mut w = vec![0.0; sim.dimension];
                w[0] = emp.omega;
                let exact = slice.solution(&w, &spec.initial)?;
                let tag = crate::io::fmt_num(emp.omega);
                comparisons.push(Comparison::new(format!("re_charfun(omega={tag})"), t, exact.re, emp.mean.re, emp.se_re));
                comparisons.push(Comparison::new(format!("im_charfun(omega={tag})"), t, exact.im, emp.mean.im, emp.se_im));
            }
        }
    }
    let mut refinement = Vec::new();
    if let Some(fine) = refined {
        for (c, f) in sim.records.iter().zip(&fine.records) {
            for i in 0..sim.dimension {
                refinement.push(Refinement {
                    quantity: format!("E_{}", i + 1),
                    t: c.t,
                    coarse: c.e_hat[i],
                    fine: f.e_hat[i],
                    delta: c.e_hat[i] - f.e_hat[i],
                });
            }
            refinement.push(Refinement {
                quantity: "V".into(),
                t: c.t,
                coarse: c.v_hat,
                fine: f.v_hat,
                delta: c.v_hat - f.v_hat,
            });
        }
    }
    Ok(CompareReport {
        pass: comparisons.iter().all(|c| c.pass),
        paths: sim.config.n_paths,
        dt: sim.config.dt,
        seed: sim.config.seed,
        comparisons,
        additive_initial_law: additive_rows,
        refinement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::solve_backward;
    use crate::model::parse_scenario;

    fn flat(delta: f64, lambda: f64, jump: &str) -> ScenarioSpec {
        parse_scenario(&format!(
            r#"{{"T": 1, "delta": {delta}, "lambda": {lambda}, {jump}
                "cost": {{"a": 0, "b": 0, "c": 0}},
                "terminal": {{"A_T": 0, "B_T": 0, "C_T": 0}}, "initial": {{"kind": "dirac", "x0": 0.5}}}}"#
        ))
        .unwrap()
    }

    fn config(paths: usize, dt: f64, times: &[f64]) -> SimConfig {
        SimConfig {
            n_paths: paths,
            dt,
            seed: 11,
            record_times: times.to_vec(),
            keep_endpoints: true,
        }
    }

    #[test]
    fn deterministic_paths_stay_put() {
        let s = flat(0.0, 0.0, "");
        let sol = solve_backward(&s, 200).unwrap();
        let r = simulate_paths(&s, &sol, &config(1000, 0.01, &[0.5, 1.0])).unwrap();
        for rec in &r.records {
            assert_eq!(rec.e_hat, vec![0.5]);
            assert_eq!(rec.v_hat, 0.0);
            assert_eq!(rec.se_v, 0.0);
        }
        let ev = CharFunEvaluator::new(&s, &sol).unwrap();
        let report = compare_report(&ev, &sol, &r, &[1.0], None).unwrap();
        assert!(report.comparisons.iter().all(|c| c.z == 0.0), "{report:?}");
    }

    #[test]
    fn config_validation() {
        let s = flat(1.0, 0.0, "");
        let sol = solve_backward(&s, 200).unwrap();
        assert!(simulate_paths(&s, &sol, &config(10, 0.01, &[1.0])).is_err());
        assert!(simulate_paths(&s, &sol, &config(1000, 0.1, &[1.0])).is_err());
        assert!(simulate_paths(&s, &sol, &config(1000, 0.01, &[0.555])).is_err());
        assert!(simulate_paths(&s, &sol, &config(1000, 0.01, &[1.0, 0.5])).is_err());
        let heavy = flat(0.0, 60.0, r#""jump": {"type": "point", "params": {"z0": 1}},"#);
        let sol = solve_backward(&heavy, 200).unwrap();
        assert!(matches!(
            simulate_paths(&heavy, &sol, &config(1000, 0.01, &[1.0])),
            Err(Error::Simulation(_))
        ));
    }

    #[test]
    fn independent_of_thread_count() {
        let s = flat(0.7, 1.5, r#""jump": {"type": "gaussian", "params": {"mu": 0.1, "sigma": 0.3}},"#);
        let sol = solve_backward(&s, 200).unwrap();
        let cfg = config(2000, 0.01, &[0.5, 1.0]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_paths(&s, &sol, &cfg).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn brownian_and_poisson_moments() {
        let s = flat(1.0, 0.0, "");
        let sol = solve_backward(&s, 200).unwrap();
        let r = simulate_paths(&s, &sol, &config(20_000, 0.01, &[1.0])).unwrap();
        let rec = &r.records[0];
        assert!(z_score(rec.e_hat[0], 0.5, rec.se_e[0]).abs() < 4.0);
        assert!(z_score(rec.v_hat, 1.0, rec.se_v).abs() < 5.0);

        let s = flat(0.0, 2.0, r#""jump": {"type": "point", "params": {"z0": 1}},"#);
        let sol = solve_backward(&s, 200).unwrap();
        let r = simulate_paths(&s, &sol, &config(20_000, 0.01, &[1.0])).unwrap();
        let rec = &r.records[0];
        assert!(z_score(rec.e_hat[0], 2.5, rec.se_e[0]).abs() < 4.0);
        assert!(z_score(rec.v_hat, 2.0, rec.se_v).abs() < 4.0);
        let jumps_per_path = rec.n_jumps as f64 / 20_000.0;
        assert!((jumps_per_path - 2.0).abs() < 0.05);
        let cf = empirical_charfun(&r, 1.0, &[0.0, std::f64::consts::PI]).unwrap();
        assert_eq!(cf[0].mean, Complex64::new(1.0, 0.0));
        assert_eq!((cf[0].se_re, cf[0].se_im), (0.0, 0.0));
        // X = 0.5 + N: e^{-iπ/2} e^{-4}.
        let expected = Complex64::new(0.0, -(-4.0f64).exp());
        assert!(z_score(cf[1].mean.re, expected.re, cf[1].se_re).abs() < 4.0);
        assert!(z_score(cf[1].mean.im, expected.im, cf[1].se_im).abs() < 4.0);
    }

    #[test]
    fn z_score_conventions() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert_eq!(z_score(1.5, 1.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(1.5, 1.0, 0.25), 2.0);
    }

    #[test]
    fn poisson_inversion_thresholds() {
        let rate: f64 = 0.1;
        let p0 = (-rate).exp();
        assert_eq!(poisson_by_inversion(p0 * 0.999, rate, p0), 0);
        assert_eq!(poisson_by_inversion(p0 + 1e-6, rate, p0), 1);
        assert_eq!(poisson_by_inversion(p0 + p0 * rate + 1e-6, rate, p0), 2);
    }

    #[test]
    fn endpoints_required_for_charfun() {
        let s = flat(1.0, 0.0, "");
        let sol = solve_backward(&s, 200).unwrap();
        let mut cfg = config(1000, 0.01, &[1.0]);
        cfg.keep_endpoints = false;
        let r = simulate_paths(&s, &sol, &cfg).unwrap();
        assert!(empirical_charfun(&r, 1.0, &[1.0]).is_err());
        assert!(r.endpoints_table().is_err());
        assert!(r.records[0].se_e[0] > 0.0);
    }
}
