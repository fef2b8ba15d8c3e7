//! Backward coefficient system for the quadratic pay-off `Φ = A|x|² + B·x + C`.
//!
//! The Riccati equation `Ȧ = -2A² - a` is linearized through `A = u̇ / (2u)`,
//! giving `ü + 2a u = 0` with `u(T) = 1`, `u̇(T) = 2A_T`. The linear coefficient
//! is carried as `v = uB`, which obeys `v̇ = -λ𝓜₁u̇ - b u` and stays regular
//! where `A` and `B` blow up. `C` is a quadrature along the solution and is
//! reported as NaN at and before the latest zero of `u`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::model::{Coefficient, DriftCoefficient, ScenarioSpec};
use crate::numerics::{hermite, simpson_sum, Tabulated, UniformGrid};

pub const DEFAULT_GRID: usize = 4096;
pub const MIN_GRID: usize = 100;
/// `|u|` below this is treated as a zero of the linearizer.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Source of the linear cost coefficient `b(t)` seen by the backward solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Forcing {
    Coefficients(Vec<Coefficient>),
    /// Frozen `b(t)` from a mean-field iterate.
    Tabulated(Arc<Tabulated>),
}

impl Forcing {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        match self {
            Forcing::Coefficients(c) => {
                for (o, ci) in out.iter_mut().zip(c) {
                    *o = ci.value(t);
                }
            }
            Forcing::Tabulated(tab) => tab.eval(t, out),
        }
    }

    pub fn value(&self, t: f64, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.eval(t, &mut out);
        out
    }
}

/// Gridded solution of the backward system together with its linearizer.
#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub grid: UniformGrid,
    pub dimension: usize,
    pub u: Vec<f64>,
    pub udot: Vec<f64>,
    /// `ü = -2a(t)u` at the nodes.
    pub uddot: Vec<f64>,
    /// A(t).
    pub quadratic: Vec<f64>,
    /// v = uB, regular everywhere.
    pub v: Vec<Vec<f64>>,
    pub vdot: Vec<Vec<f64>>,
    /// B(t).
    pub linear: Vec<Vec<f64>>,
    /// C(t).
    pub constant: Vec<f64>,
    pub constant_dot: Vec<f64>,
    /// Zeros of `u` in `[0, T)`, ascending.
    pub singularities: Vec<f64>,
    pub(crate) cost_a: Coefficient,
    pub(crate) forcing: Forcing,
}

/// Quadratic pay-off and optimal drift at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PayOff {
    pub phi: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegralCheck<T> {
    pub finite: bool,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// e^{2∫₀ᵀA} = u(T)/u(0).
    pub a_int_first: IntegralCheck<f64>,
    /// ∫₀ᵀ e^{2∫_η^T A} B(η) dη = ∫₀ᵀ v/u² dη, per coordinate.
    pub a_int_second: IntegralCheck<Vec<f64>>,
    pub singular_times: Vec<f64>,
}

/// Solves the backward system for a scenario whose `b` is explicit.
pub fn solve_backward(spec: &ScenarioSpec, steps: usize) -> Result<HjbSolution> {
    match &spec.cost.b {
        DriftCoefficient::Explicit(b) => {
            solve_backward_with(spec, Forcing::Coefficients(b.clone()), steps)
        }
        DriftCoefficient::MeanField(_) => Err(Error::Argument(
            "b is coupled to the mean; use the mean-field fixed point solver".into(),
        )),
    }
}

pub fn solve_backward_with(spec: &ScenarioSpec, forcing: Forcing, steps: usize) -> Result<HjbSolution> {
    if steps < MIN_GRID {
        return Err(Error::Argument(format!("grid resolution {steps} below {MIN_GRID}")));
    }
    let n = spec.dimension;
    let grid = UniformGrid::new(spec.horizon, steps);
    let h = grid.h();
    let a = &spec.cost.a;
    let c_cost = &spec.cost.c;
    let lm1: Vec<f64> = spec.m1().iter().map(|m| spec.lambda * m).collect();
    let lm2 = spec.lambda * spec.m2();
    let diffusion = n as f64 * spec.delta * spec.delta;

    let nodes = grid.nodes();
    let mut u = vec![0.0; nodes];
    let mut udot = vec![0.0; nodes];
    let mut v = vec![vec![0.0; n]; nodes];
    let mut c = vec![0.0; nodes];
    u[steps] = 1.0;
    udot[steps] = 2.0 * spec.terminal.a_t;
    v[steps] = spec.terminal.b_t.clone();
    c[steps] = spec.terminal.c_t;

    let mut b_buf = vec![0.0; n];
    // Derivatives of (u, u̇, v) and the C source at a given state.
    let mut deriv = |t: f64, uu: f64, ud: f64, vv: &[f64], dv: &mut [f64]| -> (f64, f64, f64) {
        forcing.eval(t, &mut b_buf);
        for i in 0..n {
            dv[i] = -lm1[i] * ud - b_buf[i] * uu;
        }
        let c_src = if uu.abs() < SINGULAR_TOL {
            f64::NAN
        } else {
            let big_a = ud / (2.0 * uu);
            let mut b2 = 0.0;
            let mut m1b = 0.0;
            for i in 0..n {
                let bi = vv[i] / uu;
                b2 += bi * bi;
                m1b += lm1[i] * bi;
            }
            -0.5 * b2 - diffusion * big_a - (lm2 * big_a + m1b) - c_cost.value(t)
        };
        (ud, -2.0 * a.value(t) * uu, c_src)
    };

    let mut c_valid = true;
    let mut dv1 = vec![0.0; n];
    let mut dv2 = vec![0.0; n];
    let mut dv3 = vec![0.0; n];
    let mut dv4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for k in (0..steps).rev() {
        let t1 = grid.t(k + 1);
        let tm = t1 - 0.5 * h;
        let t0 = grid.t(k);
        let (u0, ud0) = (u[k + 1], udot[k + 1]);
        let v0 = v[k + 1].clone();

        let (du1, dud1, c1) = deriv(t1, u0, ud0, &v0, &mut dv1);
        let u2 = u0 - 0.5 * h * du1;
        let ud2 = ud0 - 0.5 * h * dud1;
        for i in 0..n {
            tmp[i] = v0[i] - 0.5 * h * dv1[i];
        }
        let (du2, dud2, c2) = deriv(tm, u2, ud2, &tmp, &mut dv2);
        let u3 = u0 - 0.5 * h * du2;
        let ud3 = ud0 - 0.5 * h * dud2;
        for i in 0..n {
            tmp[i] = v0[i] - 0.5 * h * dv2[i];
        }
        let (du3, dud3, c3) = deriv(tm, u3, ud3, &tmp, &mut dv3);
        let u4 = u0 - h * du3;
        let ud4 = ud0 - h * dud3;
        for i in 0..n {
            tmp[i] = v0[i] - h * dv3[i];
        }
        let (du4, dud4, c4) = deriv(t0, u4, ud4, &tmp, &mut dv4);

        u[k] = u0 - h / 6.0 * (du1 + 2.0 * du2 + 2.0 * du3 + du4);
        udot[k] = ud0 - h / 6.0 * (dud1 + 2.0 * dud2 + 2.0 * dud3 + dud4);
        for i in 0..n {
            v[k][i] = v0[i] - h / 6.0 * (dv1[i] + 2.0 * dv2[i] + 2.0 * dv3[i] + dv4[i]);
        }
        let crosses = u[k] * u0 <= 0.0 || [u2, u3, u4].iter().any(|s| s * u0 <= 0.0);
        if crosses || u[k].abs() < SINGULAR_TOL {
            c_valid = false;
        }
        c[k] = if c_valid {
            c[k + 1] - h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        } else {
            f64::NAN
        };
    }

    let mut uddot = vec![0.0; nodes];
    let mut vdot = vec![vec![0.0; n]; nodes];
    let mut quadratic = vec![0.0; nodes];
    let mut linear = vec![vec![0.0; n]; nodes];
    let mut constant_dot = vec![0.0; nodes];
    let mut dv = vec![0.0; n];
    for k in 0..nodes {
        let t = grid.t(k);
        let (_, udd, csrc) = deriv(t, u[k], udot[k], &v[k], &mut dv);
        uddot[k] = udd;
        vdot[k].copy_from_slice(&dv);
        quadratic[k] = ratio(udot[k], 2.0 * u[k]);
        for i in 0..n {
            linear[k][i] = ratio(v[k][i], u[k]);
        }
        constant_dot[k] = if c[k].is_finite() { csrc } else { f64::NAN };
    }

    let mut sol = HjbSolution {
        grid,
        dimension: n,
        u,
        udot,
        uddot,
        quadratic,
        v,
        vdot,
        linear,
        constant: c,
        constant_dot,
        singularities: Vec::new(),
        cost_a: a.clone(),
        forcing,
    };
    sol.singularities = sol.locate_zeros()?;
    Ok(sol)
}

/// `num / den` with a signed infinity (or NaN for 0/0) when `den` vanishes.
fn ratio(num: f64, den: f64) -> f64 {
    if den.abs() < 2.0 * SINGULAR_TOL {
        if num == 0.0 {
            f64::NAN
        } else {
            f64::INFINITY.copysign(num * if den == 0.0 { 1.0 } else { den })
        }
    } else {
        num / den
    }
}

impl HjbSolution {
    pub fn horizon(&self) -> f64 {
        self.grid.horizon
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    pub fn cost_a(&self) -> &Coefficient {
        &self.cost_a
    }

    pub fn u_at(&self, t: f64) -> f64 {
        let (k, s) = self.grid.locate(t);
        hermite(self.u[k], self.u[k + 1], self.udot[k], self.udot[k + 1], self.grid.h(), s)
    }

    pub fn udot_at(&self, t: f64) -> f64 {
        let (k, s) = self.grid.locate(t);
        hermite(self.udot[k], self.udot[k + 1], self.uddot[k], self.uddot[k + 1], self.grid.h(), s)
    }

    pub fn v_at(&self, t: f64, out: &mut [f64]) {
        let (k, s) = self.grid.locate(t);
        let h = self.grid.h();
        for (i, o) in out.iter_mut().enumerate() {
            *o = hermite(self.v[k][i], self.v[k + 1][i], self.vdot[k][i], self.vdot[k + 1][i], h, s);
        }
    }

    /// A(t) from the interpolated linearizer.
    pub fn quadratic_at(&self, t: f64) -> f64 {
        ratio(self.udot_at(t), 2.0 * self.u_at(t))
    }

    /// B(t) from the interpolated `v` and `u`.
    pub fn linear_at(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        self.v_at(t, &mut v);
        let u = self.u_at(t);
        v.into_iter().map(|x| ratio(x, u)).collect()
    }

    pub fn constant_at(&self, t: f64) -> f64 {
        let (k, s) = self.grid.locate(t);
        hermite(
            self.constant[k],
            self.constant[k + 1],
            self.constant_dot[k],
            self.constant_dot[k + 1],
            self.grid.h(),
            s,
        )
    }

    /// A(t) by linear interpolation between nodes.
    pub fn quadratic_linear(&self, t: f64) -> f64 {
        let (k, s) = self.grid.locate(t);
        (1.0 - s) * self.quadratic[k] + s * self.quadratic[k + 1]
    }

    /// B(t) by linear interpolation between nodes.
    pub fn linear_linear(&self, t: f64, out: &mut [f64]) {
        let (k, s) = self.grid.locate(t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (1.0 - s) * self.linear[k][i] + s * self.linear[k + 1][i];
        }
    }

    /// True when no zero of `u` lies in `[0, t]`.
    pub fn regular_on(&self, t: f64) -> bool {
        self.u[0].abs() >= SINGULAR_TOL && self.singularities.iter().all(|&s| s > t)
    }

    /// Finite-difference residual of `Ȧ + 2A² + a` over interior nodes away from zeros of `u`.
    pub fn riccati_residual(&self) -> f64 {
        let h = self.grid.h();
        let mut worst: f64 = 0.0;
        for k in 1..self.grid.steps {
            let (a0, a1, a2) = (self.quadratic[k - 1], self.quadratic[k], self.quadratic[k + 1]);
            if self.u[k - 1] * self.u[k + 1] <= 0.0 || !(a0.is_finite() && a2.is_finite()) {
                continue;
            }
            let r = (a2 - a0) / (2.0 * h) + 2.0 * a1 * a1 + self.cost_a.value(self.grid.t(k));
            worst = worst.max(r.abs());
        }
        worst
    }

    fn locate_zeros(&self) -> Result<Vec<f64>> {
        let h = self.grid.h();
        let mut zeros = Vec::new();
        let mut last_change: Option<usize> = None;
        for k in 0..self.grid.steps {
            let (u0, u1) = (self.u[k], self.u[k + 1]);
            if u0.abs() < SINGULAR_TOL && k > 0 {
                zeros.push(self.grid.t(k));
                continue;
            }
            if u0 * u1 < 0.0 {
                if let Some(prev) = last_change {
                    if k - prev < 3 {
                        return Err(Error::RefinementRequired { t: self.grid.t(k) });
                    }
                }
                last_change = Some(k);
                let f = |s: f64| hermite(u0, u1, self.udot[k], self.udot[k + 1], h, s);
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(lo) * f(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                zeros.push(self.grid.t(k) + 0.5 * (lo + hi) * h);
            }
        }
        if self.u[0].abs() < SINGULAR_TOL {
            zeros.insert(0, 0.0);
        }
        Ok(zeros)
    }

    /// Grid columns `t, u, udot, A, v_1..v_n, B_1..B_n, C`.
    pub fn to_table(&self) -> CsvTable {
        let n = self.dimension;
        let mut header = vec!["t".to_string(), "u".into(), "udot".into(), "A".into()];
        header.extend((1..=n).map(|i| format!("v_{i}")));
        header.extend((1..=n).map(|i| format!("B_{i}")));
        header.push("C".into());
        let rows = (0..self.grid.nodes())
            .map(|k| {
                let mut row = vec![self.grid.t(k), self.u[k], self.udot[k], self.quadratic[k]];
                row.extend(&self.v[k]);
                row.extend(&self.linear[k]);
                row.push(self.constant[k]);
                row
            })
            .collect();
        CsvTable {
            comments: Vec::new(),
            header,
            rows,
        }
    }
}

/// e^{2∫_η^t A dτ} = u(t)/u(η); infinite when `u(η)` vanishes.
pub fn weight(sol: &HjbSolution, t: f64, eta: f64) -> f64 {
    if t == eta {
        return 1.0;
    }
    let ue = sol.u_at(eta);
    if ue.abs() < SINGULAR_TOL {
        return f64::INFINITY;
    }
    sol.u_at(t) / ue
}

/// Φ(t, x) and α = ∇Φ(t, x) = 2A(t)x + B(t).
pub fn eval_control_phi(sol: &HjbSolution, t: f64, x: &[f64]) -> Result<PayOff> {
    if x.len() != sol.dimension {
        return Err(Error::Argument("x has the wrong dimension".into()));
    }
    let u = sol.u_at(t);
    if u.abs() < SINGULAR_TOL || sol.singularities.iter().any(|&s| (s - t).abs() < 1e-12) {
        return Err(Error::FocalTime { t });
    }
    let big_a = sol.udot_at(t) / (2.0 * u);
    let big_b = sol.linear_at(t);
    let c = sol.constant_at(t);
    let x2: f64 = x.iter().map(|xi| xi * xi).sum();
    let bx: f64 = x.iter().zip(&big_b).map(|(xi, bi)| xi * bi).sum();
    let alpha = x.iter().zip(&big_b).map(|(xi, bi)| 2.0 * big_a * xi + bi).collect();
    Ok(PayOff {
        phi: big_a * x2 + bx + c,
        alpha,
    })
}

/// Closed-form A(t) for constant `a`, with a signed infinity at zeros of the linearizer.
pub fn closed_form_a_const(a: f64, a_t: f64, horizon: f64, t: f64) -> f64 {
    let s = horizon - t;
    if a > 0.0 {
        let theta = ((2.0 / a).sqrt() * a_t).atan() + (2.0 * a).sqrt() * s;
        let (sin, cos) = theta.sin_cos();
        if cos.abs() < 1e-15 {
            return f64::INFINITY.copysign(sin * cos);
        }
        (a / 2.0).sqrt() * sin / cos
    } else if a == 0.0 {
        let den = 1.0 - 2.0 * a_t * s;
        if den.abs() < 1e-15 {
            return f64::INFINITY.copysign(a_t);
        }
        a_t / den
    } else {
        // u = cosh(μs) - (2A_T/μ) sinh(μs), scaled by 1/cosh(μs).
        let mu = (-2.0 * a).sqrt();
        let th = (mu * s).tanh();
        let u = 1.0 - 2.0 * a_t / mu * th;
        let ud = 2.0 * a_t - mu * th;
        if u.abs() < 1e-15 {
            return f64::INFINITY.copysign(ud);
        }
        ud / (2.0 * u)
    }
}

fn second_integral(sol: &HjbSolution) -> (bool, Vec<f64>) {
    let n = sol.dimension;
    let mut out = vec![0.0; n];
    if sol.u.iter().any(|u| u.abs() < SINGULAR_TOL) {
        return (false, vec![f64::INFINITY; n]);
    }
    let h = sol.grid.h();
    for (i, o) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = sol.v.iter().zip(&sol.u).map(|(v, u)| v[i] / (u * u)).collect();
        *o = simpson_sum(&vals, h);
    }
    (true, out)
}

fn agrees(coarse: f64, fine: f64) -> bool {
    coarse.is_finite() && fine.is_finite() && (coarse - fine).abs() <= 0.1 * fine.abs().max(1e-12)
}

/// Evaluates both integrability conditions on the solution grid and on a twice finer one.
pub fn check_conditions(sol: &HjbSolution, spec: &ScenarioSpec) -> Result<ConditionReport> {
    let fine = solve_backward_with(spec, sol.forcing.clone(), 2 * sol.grid.steps)?;
    let first = |s: &HjbSolution| {
        if s.u[0].abs() < SINGULAR_TOL {
            f64::INFINITY
        } else {
            (s.u[s.grid.steps] / s.u[0]).abs()
        }
    };
    let (f0, f1) = (first(sol), first(&fine));
    let (ok0, s0) = second_integral(sol);
    let (ok1, s1) = second_integral(&fine);
    let second_finite = ok0 && ok1 && s0.iter().zip(&s1).all(|(c, f)| agrees(*c, *f));
    Ok(ConditionReport {
        a_int_first: IntegralCheck {
            finite: agrees(f0, f1),
            value: f1,
        },
        a_int_second: IntegralCheck {
            finite: second_finite,
            value: s1,
        },
        singular_times: sol.singularities.clone(),
    })
}
