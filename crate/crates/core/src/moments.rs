//! Forward propagation of the expectation `E(t)` and per-coordinate variance `V(t)`.
//!
//! `E` solves `E'' + 2a(t)E = -b(t)` from `E(0) = x₀`, `E'(0) = 2A(0)x₀ + B(0) + λ𝓜₁`.
//! `V` uses the regular pair `V = (v₀/u(0)²)u² + K u ψ` where `ψ'' + 2aψ = 0`,
//! `ψ(0) = 0`, `ψ'(0) = 1/u(0)`, so it continues through zeros of `u`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{solve_backward_with, Forcing, HjbSolution, SINGULAR_TOL};
use crate::io::{meta_line, CsvTable};
use crate::model::{DriftCoefficient, ScenarioSpec};
use crate::numerics::{hermite, Tabulated, UniformGrid};

/// Below this minimum variance the (Var) residual is not evaluated.
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_PICARD_TOL: f64 = 1e-8;
pub const DEFAULT_PICARD_MAX_ITER: usize = 200;
const PICARD_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPath {
    pub grid: UniformGrid,
    pub dimension: usize,
    /// E(t) per node.
    pub mean: Vec<Vec<f64>>,
    pub mean_dot: Vec<Vec<f64>>,
    /// Per-coordinate V(t) per node.
    pub variance: Vec<f64>,
    pub variance_dot: Vec<f64>,
    /// K = δ² + λ𝓜₂/n.
    pub k: f64,
    pub residual_e: f64,
    /// `None` when the variance comes too close to zero for the (Var) residual.
    pub residual_v: Option<f64>,
    /// The pair formula went negative somewhere and was reflected.
    pub focal: bool,
}

/// How the initial law enters the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialTransport {
    /// Carried by the flow: factors u(t)/u(0) and its square.
    Propagated,
    /// Initial mean and variance added without transport factors (diagnostic only).
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub r_e: f64,
    pub r_v: Option<f64>,
}

impl MomentPath {
    pub fn mean_at(&self, t: f64) -> Vec<f64> {
        let (k, s) = self.grid.locate(t);
        let h = self.grid.h();
        (0..self.dimension)
            .map(|i| {
                hermite(
                    self.mean[k][i],
                    self.mean[k + 1][i],
                    self.mean_dot[k][i],
                    self.mean_dot[k + 1][i],
                    h,
                    s,
                )
            })
            .collect()
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        let (k, s) = self.grid.locate(t);
        hermite(
            self.variance[k],
            self.variance[k + 1],
            self.variance_dot[k],
            self.variance_dot[k + 1],
            self.grid.h(),
            s,
        )
    }

    /// Columns `t, E_1..E_n, V` with a metadata comment row.
    pub fn to_table(&self) -> CsvTable {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dimension).map(|i| format!("E_{i}")));
        header.push("V".into());
        let rows = (0..self.grid.nodes())
            .map(|k| {
                let mut row = vec![self.grid.t(k)];
                row.extend(&self.mean[k]);
                row.push(self.variance[k]);
                row
            })
            .collect();
        CsvTable {
            comments: vec![meta_line(&[
                ("K", crate::io::fmt_num(self.k)),
                ("residual_E", crate::io::fmt_num(self.residual_e)),
                (
                    "residual_V",
                    self.residual_v.map_or("skipped".into(), crate::io::fmt_num),
                ),
                ("focal", self.focal.to_string()),
            ])],
            header,
            rows,
        }
    }
}

/// Moments read back from a moments CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<f64>,
    pub k: Option<f64>,
    pub focal: Option<bool>,
}

impl MomentTable {
    pub fn from_table(table: &CsvTable) -> Result<Self> {
        let times = table.column("t")?;
        let cols = table.indexed_columns("E");
        if cols.is_empty() {
            return Err(Error::Schema("moments table has no E_1 column".into()));
        }
        let mean = table
            .rows
            .iter()
            .map(|r| cols.iter().map(|&j| r[j]).collect())
            .collect();
        Ok(Self {
            times,
            mean,
            variance: table.column("V")?,
            k: table.meta("K").and_then(|s| crate::io::parse_num(s).ok()),
            focal: table.meta("focal").and_then(|s| s.parse().ok()),
        })
    }
}

/// Propagates E and V forward along a backward solution.
pub fn propagate_moments(sol: &HjbSolution, spec: &ScenarioSpec) -> Result<MomentPath> {
    propagate_moments_with(sol, spec, InitialTransport::Propagated)
}

pub fn propagate_moments_with(
    sol: &HjbSolution,
    spec: &ScenarioSpec,
    transport: InitialTransport,
) -> Result<MomentPath> {
    let u0 = sol.u[0];
    if u0.abs() < SINGULAR_TOL {
        return Err(Error::ConditionViolated("u(0) = 0".into()));
    }
    let n = spec.dimension;
    let grid = sol.grid;
    let h = grid.h();
    let nodes = grid.nodes();
    let jump_drift = spec.jump_drift();
    let k_rate = spec.variance_rate();
    let (x0, v0) = match transport {
        InitialTransport::Propagated => (spec.initial.x0.clone(), spec.initial.v0),
        InitialTransport::Additive => (vec![0.0; n], 0.0),
    };

    let a_at = |t: f64| sol.cost_a().value(t);
    let forcing = sol.forcing();
    let mut b = vec![0.0; n];

    // E'' = -2aE - b and ψ'' = -2aψ, advanced together by classical RK4 on (y, y').
    let mut mean = vec![vec![0.0; n]; nodes];
    let mut mean_dot = vec![vec![0.0; n]; nodes];
    let mut psi = vec![0.0; nodes];
    let mut psi_dot = vec![0.0; nodes];
    mean[0] = x0.clone();
    for i in 0..n {
        mean_dot[0][i] = 2.0 * sol.quadratic[0] * x0[i] + sol.linear[0][i] + jump_drift[i];
    }
    psi_dot[0] = 1.0 / u0;

    let mut accel = |t: f64, e: &[f64], out: &mut [f64]| -> f64 {
        forcing.eval(t, &mut b);
        let a = a_at(t);
        for i in 0..n {
            out[i] = -2.0 * a * e[i] - b[i];
        }
        -2.0 * a
    };
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut e_tmp = vec![0.0; n];
    for k in 0..grid.steps {
        let t0 = grid.t(k);
        let tm = t0 + 0.5 * h;
        let t1 = grid.t(k + 1);
        let (e, de) = (mean[k].clone(), mean_dot[k].clone());
        let (p, dp) = (psi[k], psi_dot[k]);

        let c1 = accel(t0, &e, &mut k1);
        for i in 0..n {
            e_tmp[i] = e[i] + 0.5 * h * de[i];
        }
        let c2 = accel(tm, &e_tmp, &mut k2);
        for i in 0..n {
            e_tmp[i] = e[i] + 0.5 * h * de[i] + 0.25 * h * h * k1[i];
        }
        let _ = accel(tm, &e_tmp, &mut k3);
        for i in 0..n {
            e_tmp[i] = e[i] + h * de[i] + 0.5 * h * h * k2[i];
        }
        let c4 = accel(t1, &e_tmp, &mut k4);
        for i in 0..n {
            mean[k + 1][i] = e[i] + h * de[i] + h * h / 6.0 * (k1[i] + k2[i] + k3[i]);
            mean_dot[k + 1][i] = de[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        let q1 = c1 * p;
        let q2 = c2 * (p + 0.5 * h * dp);
        let q3 = c2 * (p + 0.5 * h * dp + 0.25 * h * h * q1);
        let q4 = c4 * (p + h * dp + 0.5 * h * h * q2);
        psi[k + 1] = p + h * dp + h * h / 6.0 * (q1 + q2 + q3);
        psi_dot[k + 1] = dp + h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4);
    }

    let scale = v0 / (u0 * u0);
    let mut variance = vec![0.0; nodes];
    let mut variance_dot = vec![0.0; nodes];
    let mut focal = false;
    for k in 0..nodes {
        let (u, ud) = (sol.u[k], sol.udot[k]);
        let mut val = scale * u * u + k_rate * u * psi[k];
        let mut der = 2.0 * scale * u * ud + k_rate * (ud * psi[k] + u * psi_dot[k]);
        if val < 0.0 {
            if val < -1e-10 {
                focal = true;
            }
            val = -val;
            der = -der;
        }
        variance[k] = val;
        variance_dot[k] = der;
    }

    if transport == InitialTransport::Additive {
        for k in 0..nodes {
            for i in 0..n {
                mean[k][i] += spec.initial.x0[i];
            }
            variance[k] += spec.initial.v0;
        }
    }

    let mut path = MomentPath {
        grid,
        dimension: n,
        mean,
        mean_dot,
        variance,
        variance_dot,
        k: k_rate,
        residual_e: 0.0,
        residual_v: None,
        focal,
    };
    let r = residual_check_with(&path, spec, Some(forcing));
    path.residual_e = r.r_e;
    path.residual_v = r.r_v;
    Ok(path)
}

/// Max-norm residuals of `E'' + 2aE + b` and `V'' + 4aV - ((V')² - K²)/(2V)`.
///
/// Second derivatives are fourth-order central differences of the stored first derivatives.
pub fn residual_check(path: &MomentPath, spec: &ScenarioSpec) -> Residuals {
    residual_check_with(path, spec, None)
}

fn stencil(f: impl Fn(usize) -> f64, k: usize, h: f64) -> f64 {
    (f(k - 2) - 8.0 * f(k - 1) + 8.0 * f(k + 1) - f(k + 2)) / (12.0 * h)
}

fn residual_check_with(path: &MomentPath, spec: &ScenarioSpec, frozen: Option<&Forcing>) -> Residuals {
    let n = path.dimension;
    let h = path.grid.h();
    let steps = path.grid.steps;
    let interior = 2..steps.saturating_sub(1);
    let mut r_e: f64 = 0.0;
    let mut b = vec![0.0; n];
    for k in interior.clone() {
        let t = path.grid.t(k);
        let a = spec.cost.a.value(t);
        if let (DriftCoefficient::Explicit(_), Some(f)) = (&spec.cost.b, frozen) {
            f.eval(t, &mut b);
        }
        for i in 0..n {
            let (e, de) = (path.mean[k][i], path.mean_dot[k][i]);
            let bi = match &spec.cost.b {
                DriftCoefficient::MeanField(mf) => mf.b0[i] + mf.b1 * e + mf.b2 * de,
                DriftCoefficient::Explicit(c) => match frozen {
                    Some(_) => b[i],
                    None => c[i].value(t),
                },
            };
            let dde = stencil(|j| path.mean_dot[j][i], k, h);
            r_e = r_e.max((dde + 2.0 * a * e + bi).abs());
        }
    }
    let min_v = path.variance.iter().cloned().fold(f64::INFINITY, f64::min);
    let r_v = if min_v < VARIANCE_FLOOR {
        None
    } else {
        let kk = path.k * path.k;
        let mut worst: f64 = 0.0;
        for k in interior {
            let a = spec.cost.a.value(path.grid.t(k));
            let (v, dv) = (path.variance[k], path.variance_dot[k]);
            let ddv = stencil(|j| path.variance_dot[j], k, h);
            let r = ddv + 4.0 * a * v - (dv * dv - kk) / (2.0 * v);
            worst = worst.max(r.abs());
        }
        Some(worst)
    };
    Residuals { r_e, r_v }
}

/// Qualitative regime of constant-coefficient moment dynamics, set by the sign of `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Oscillatory,
    Exponential,
    Polynomial,
}

impl Branch {
    pub fn of(a: f64) -> Self {
        if a > 0.0 {
            Branch::Oscillatory
        } else if a < 0.0 {
            Branch::Exponential
        } else {
            Branch::Polynomial
        }
    }

    /// Short name used on the command line.
    pub fn short_name(&self) -> &'static str {
        match self {
            Branch::Oscillatory => "osc",
            Branch::Exponential => "exp",
            Branch::Polynomial => "poly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentInit {
    pub e0: f64,
    pub de0: f64,
    pub v0: f64,
    pub dv0: f64,
}

/// Variance closed form `offset + c1 f1(t) + c2 f2(t)`, where (f1, f2) is
/// (sin 2ωt, cos 2ωt), (e^{2μt}, e^{-2μt}) or (t, t²) by branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceForm {
    pub offset: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Constant-coefficient closed forms for E and V.
///
/// Mean: `c1 sin ωt + c2 cos ωt - b/(2a)` (ω = √(2a)), `c1 sinh μt + c2 cosh μt - b/(2a)`
/// (μ = √(-2a)), or `c2 + c1 t - ½bt²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormMoments {
    pub branch: Branch,
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub c1_e: f64,
    pub c2_e: f64,
    pub variance: Option<VarianceForm>,
}

impl ClosedFormMoments {
    fn rate(&self) -> f64 {
        (2.0 * self.a.abs()).sqrt()
    }

    /// E and its first two derivatives.
    pub fn mean_derivatives(&self, t: f64) -> [f64; 3] {
        let (c1, c2) = (self.c1_e, self.c2_e);
        match self.branch {
            Branch::Oscillatory => {
                let w = self.rate();
                let (s, c) = (w * t).sin_cos();
                let off = -self.b / (2.0 * self.a);
                [c1 * s + c2 * c + off, w * (c1 * c - c2 * s), -w * w * (c1 * s + c2 * c)]
            }
            Branch::Exponential => {
                let m = self.rate();
                let (s, c) = ((m * t).sinh(), (m * t).cosh());
                let off = -self.b / (2.0 * self.a);
                [c1 * s + c2 * c + off, m * (c1 * c + c2 * s), m * m * (c1 * s + c2 * c)]
            }
            Branch::Polynomial => [c2 + c1 * t - 0.5 * self.b * t * t, c1 - self.b * t, -self.b],
        }
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.mean_derivatives(t)[0]
    }

    /// V and its first two derivatives, if the variance form was fitted.
    pub fn variance_derivatives(&self, t: f64) -> Option<[f64; 3]> {
        let v = self.variance?;
        Some(variance_form_derivatives(self.branch, self.a, &v, t))
    }

    pub fn variance(&self, t: f64) -> Option<f64> {
        self.variance_derivatives(t).map(|d| d[0])
    }

    /// Largest residual of both moment equations over `[0, horizon]`, using exact derivatives.
    pub fn max_residuals(&self, horizon: f64, samples: usize) -> (f64, Option<f64>) {
        let mut r_e: f64 = 0.0;
        let mut r_v: Option<f64> = self.variance.map(|_| 0.0);
        for j in 0..=samples {
            let t = horizon * j as f64 / samples as f64;
            let [e, _, e2] = self.mean_derivatives(t);
            let scale_e = 1.0 + e2.abs() + (2.0 * self.a * e).abs() + self.b.abs();
            r_e = r_e.max((e2 + 2.0 * self.a * e + self.b).abs() / scale_e);
            if let (Some(worst), Some([v, v1, v2])) = (r_v.as_mut(), self.variance_derivatives(t)) {
                let scale_v = 1.0 + v2.abs() + (4.0 * self.a * v).abs();
                if v.abs() > 1e-6 * scale_v {
                    let r = v2 + 4.0 * self.a * v - (v1 * v1 - self.k * self.k) / (2.0 * v);
                    *worst = worst.max(r.abs() / scale_v);
                }
            }
        }
        (r_e, r_v)
    }
}

pub(crate) fn variance_form_derivatives(branch: Branch, a: f64, v: &VarianceForm, t: f64) -> [f64; 3] {
    match branch {
        Branch::Oscillatory => {
            let w2 = 2.0 * (2.0 * a).sqrt();
            let (s, c) = (w2 * t).sin_cos();
            [
                v.offset + v.c1 * s + v.c2 * c,
                w2 * (v.c1 * c - v.c2 * s),
                -w2 * w2 * (v.c1 * s + v.c2 * c),
            ]
        }
        Branch::Exponential => {
            let m2 = 2.0 * (-2.0 * a).sqrt();
            let (ep, em) = ((m2 * t).exp(), (-m2 * t).exp());
            [
                v.offset + v.c1 * ep + v.c2 * em,
                m2 * (v.c1 * ep - v.c2 * em),
                m2 * m2 * (v.c1 * ep + v.c2 * em),
            ]
        }
        Branch::Polynomial => [v.offset + v.c1 * t + v.c2 * t * t, v.c1 + 2.0 * v.c2 * t, 2.0 * v.c2],
    }
}

/// Relative residual accepted when validating a closed form.
pub const CLOSED_FORM_TOL: f64 = 1e-9;

/// Fits the closed-form constants from initial data and validates them against both moment equations.
pub fn closed_form_moments_const(a: f64, b: f64, k: f64, init: MomentInit) -> Result<ClosedFormMoments> {
    if !(a.is_finite() && b.is_finite() && k.is_finite()) {
        return Err(Error::Argument("closed form needs finite a, b, K".into()));
    }
    let branch = Branch::of(a);
    let MomentInit { e0, de0, v0, dv0 } = init;
    let (c1_e, c2_e) = match branch {
        Branch::Oscillatory | Branch::Exponential => (de0 / (2.0 * a.abs()).sqrt(), e0 + b / (2.0 * a)),
        Branch::Polynomial => (de0, e0),
    };
    let variance = match branch {
        _ if v0 < 0.0 => return Err(Error::Argument("V0 must be >= 0".into())),
        Branch::Oscillatory if v0 > 0.0 => {
            let w = (2.0 * a).sqrt();
            let c1 = dv0 / (2.0 * w);
            let offset = (c1 * c1 + v0 * v0 - k * k / (8.0 * a)) / (2.0 * v0);
            Some(VarianceForm { offset, c1, c2: v0 - offset })
        }
        Branch::Exponential if v0 > 0.0 => {
            let m = (-2.0 * a).sqrt();
            let s = dv0 / (2.0 * m);
            let offset = (v0 * v0 - s * s - k * k / (8.0 * a)) / (2.0 * v0);
            Some(VarianceForm {
                offset,
                c1: 0.5 * (v0 - offset + s),
                c2: 0.5 * (v0 - offset - s),
            })
        }
        Branch::Polynomial if v0 > 0.0 => Some(VarianceForm {
            offset: v0,
            c1: dv0,
            c2: (dv0 * dv0 - k * k) / (4.0 * v0),
        }),
        Branch::Polynomial => {
            if (dv0 - k).abs() > 1e-12 * (1.0 + k.abs()) {
                return Err(Error::Argument("V0 = 0 requires V'(0) = K".into()));
            }
            Some(VarianceForm { offset: 0.0, c1: dv0, c2: 0.0 })
        }
        _ => None,
    };
    let form = ClosedFormMoments {
        branch,
        a,
        b,
        k,
        c1_e,
        c2_e,
        variance,
    };
    let (r_e, r_v) = form.max_residuals(1.0, 256);
    if r_e > CLOSED_FORM_TOL {
        return Err(Error::Residual {
            what: "mean closed form".into(),
            residual: r_e,
            tolerance: CLOSED_FORM_TOL,
        });
    }
    if let Some(r_v) = r_v.filter(|&r| r > CLOSED_FORM_TOL) {
        return Err(Error::Residual {
            what: "variance closed form".into(),
            residual: r_v,
            tolerance: CLOSED_FORM_TOL,
        });
    }
    Ok(form)
}

#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    pub hjb: HjbSolution,
    pub moments: MomentPath,
    pub iterations: usize,
}

/// Damped Picard iteration for `b(t) = b0 + b1 E(t) + b2 E'(t)`.
pub fn solve_meanfield_fixedpoint(
    spec: &ScenarioSpec,
    steps: usize,
    tol: f64,
    max_iter: usize,
) -> Result<MeanFieldSolution> {
    let mf = match &spec.cost.b {
        DriftCoefficient::MeanField(mf) => mf.clone(),
        DriftCoefficient::Explicit(_) => {
            return Err(Error::Argument("scenario has no mean-field coupling".into()))
        }
    };
    let n = spec.dimension;
    let grid = UniformGrid::new(spec.horizon, steps);
    let nodes = grid.nodes();

    if mf.b1 == 0.0 && mf.b2 == 0.0 {
        let forcing = Forcing::Coefficients(
            mf.b0.iter().map(|&c| crate::model::Coefficient::Constant(c)).collect(),
        );
        let hjb = solve_backward_with(spec, forcing, steps)?;
        let moments = propagate_moments(&hjb, spec)?;
        return Ok(MeanFieldSolution {
            hjb,
            moments,
            iterations: 1,
        });
    }

    let mut e = vec![spec.initial.x0.clone(); nodes];
    let mut de = vec![vec![0.0; n]; nodes];
    let mut dde = vec![vec![0.0; n]; nodes];
    let mut increment = f64::INFINITY;
    for iteration in 1..=max_iter {
        let values: Vec<Vec<f64>> = (0..nodes)
            .map(|k| (0..n).map(|i| mf.b0[i] + mf.b1 * e[k][i] + mf.b2 * de[k][i]).collect())
            .collect();
        let derivatives: Vec<Vec<f64>> = (0..nodes)
            .map(|k| (0..n).map(|i| mf.b1 * de[k][i] + mf.b2 * dde[k][i]).collect())
            .collect();
        let frozen = Tabulated {
            grid,
            values: values.clone(),
            derivatives,
        };
        let hjb = solve_backward_with(spec, Forcing::Tabulated(Arc::new(frozen)), steps)?;
        let moments = propagate_moments(&hjb, spec)?;

        increment = 0.0;
        for k in 0..nodes {
            for i in 0..n {
                increment = increment.max((moments.mean[k][i] - e[k][i]).abs());
            }
        }
        if increment < tol {
            return Ok(MeanFieldSolution {
                hjb,
                moments,
                iterations: iteration,
            });
        }
        for k in 0..nodes {
            let a = spec.cost.a.value(grid.t(k));
            for i in 0..n {
                let new_e = moments.mean[k][i];
                let new_de = moments.mean_dot[k][i];
                let new_dde = -2.0 * a * new_e - values[k][i];
                e[k][i] += PICARD_DAMPING * (new_e - e[k][i]);
                de[k][i] += PICARD_DAMPING * (new_de - de[k][i]);
                dde[k][i] += PICARD_DAMPING * (new_dde - dde[k][i]);
            }
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        increment,
    })
}
