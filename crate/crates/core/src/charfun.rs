//! Characteristic functions of the controlled state and density inversion.
//!
//! Fourier convention: `f̂(ω) = ∫ e^{-iω·x} f(x) dx`.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::hjb::{HjbSolution, SINGULAR_TOL};
use crate::io::{fmt_num, meta_line, CsvTable};
use crate::model::{InitialLaw, ScenarioSpec};
use crate::moments::{propagate_moments, MomentPath};
use crate::numerics::simpson_weights;

pub const DEFAULT_QUADRATURE_NODES: usize = 512;
pub const QUADRATURE_TOL: f64 = 1e-6;
pub const DEFAULT_DENSITY_POINTS: usize = 4096;
/// Half-width of the default density window, in standard deviations.
pub const DEFAULT_WINDOW_SIGMAS: f64 = 10.0;
/// Minimum half-width a density window must cover, in standard deviations.
pub const REQUIRED_WINDOW_SIGMAS: f64 = 8.0;
pub const MASS_TOL: f64 = 1e-3;
const DIFF_STEP: f64 = 1e-3;

/// Jump compensator used in the moment form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compensator {
    /// `p̂(𝓡) - 1 + i𝓜₁·𝓡 + ½(𝓜₂/n)|𝓡|²`; equals the direct quadrature.
    Full,
    /// `p̂(𝓡) - 1 + i𝓜₁·𝓡` only (diagnostic).
    FirstOrder,
}

/// Evaluates characteristic functions for one solved scenario.
#[derive(Debug, Clone)]
pub struct CharFunEvaluator<'a> {
    spec: &'a ScenarioSpec,
    sol: &'a HjbSolution,
    fundamental: MomentPath,
    solution: MomentPath,
    nodes: usize,
}

/// Precomputed `w(t, η)` and `B(η)` on the η-quadrature nodes for one time.
#[derive(Debug, Clone)]
pub struct TimeSlice<'e, 'a> {
    ev: &'e CharFunEvaluator<'a>,
    t: f64,
    weights_fine: Vec<f64>,
    weights_coarse: Vec<f64>,
    w: Vec<f64>,
    b: Vec<Vec<f64>>,
    w0: f64,
}

impl<'a> CharFunEvaluator<'a> {
    pub fn new(spec: &'a ScenarioSpec, sol: &'a HjbSolution) -> Result<Self> {
        Self::with_nodes(spec, sol, DEFAULT_QUADRATURE_NODES)
    }

    /// `nodes` is the coarse Simpson resolution M; every value is checked against 2M.
    pub fn with_nodes(spec: &'a ScenarioSpec, sol: &'a HjbSolution, nodes: usize) -> Result<Self> {
        if nodes < 2 || nodes % 2 != 0 {
            return Err(Error::Argument("quadrature nodes must be even and >= 2".into()));
        }
        let mut origin = spec.clone();
        origin.initial = InitialLaw::dirac(vec![0.0; spec.dimension]);
        Ok(Self {
            spec,
            sol,
            fundamental: propagate_moments(sol, &origin)?,
            solution: propagate_moments(sol, spec)?,
            nodes,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        self.spec
    }

    /// Moments of the state started from the origin.
    pub fn fundamental_moments(&self) -> &MomentPath {
        &self.fundamental
    }

    /// Moments of the state started from the scenario's initial law.
    pub fn solution_moments(&self) -> &MomentPath {
        &self.solution
    }

    pub fn slice(&self, t: f64) -> Result<TimeSlice<'_, 'a>> {
        if !(t >= 0.0 && t <= self.spec.horizon + 1e-12) {
            return Err(Error::Argument(format!("t = {t} outside [0, T]")));
        }
        if !self.sol.regular_on(t) {
            return Err(Error::Singular { t });
        }
        let fine = 2 * self.nodes;
        let h = t / fine as f64;
        let ut = self.sol.u_at(t);
        let n = self.spec.dimension;
        let mut w = Vec::with_capacity(fine + 1);
        let mut b = Vec::with_capacity(fine + 1);
        let mut v = vec![0.0; n];
        for j in 0..=fine {
            let eta = j as f64 * h;
            let u = self.sol.u_at(eta);
            if u.abs() < SINGULAR_TOL {
                return Err(Error::Singular { t: eta });
            }
            self.sol.v_at(eta, &mut v);
            w.push(ut / u);
            b.push(v.iter().map(|vi| vi / u).collect());
        }
        Ok(TimeSlice {
            ev: self,
            t,
            weights_fine: simpson_weights(fine, h),
            weights_coarse: simpson_weights(self.nodes, 2.0 * h),
            w0: w[0],
            w,
            b,
        })
    }

    pub fn fundamental(&self, t: f64, omega: &[f64]) -> Result<Complex64> {
        self.slice(t)?.fundamental(omega)
    }

    pub fn via_moments(&self, t: f64, omega: &[f64]) -> Result<Complex64> {
        self.slice(t)?.via_moments(omega, Compensator::Full)
    }

    pub fn solution(&self, t: f64, omega: &[f64], initial: &InitialLaw) -> Result<Complex64> {
        self.slice(t)?.solution(omega, initial)
    }
}

impl TimeSlice<'_, '_> {
    pub fn t(&self) -> f64 {
        self.t
    }

    /// e^{2∫₀ᵗ A}.
    pub fn transport(&self) -> f64 {
        self.w0
    }

    fn jump_term(&self, r: &[f64]) -> Result<Complex64> {
        if self.ev.spec.lambda == 0.0 || self.ev.spec.jump.is_none() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        Ok(self.ev.spec.jump.charfn(r)? - 1.0)
    }

    /// Simpson sums of the integrand on the fine and the coarse grid.
    fn integrate(&self, integrand: impl FnMut(usize) -> Result<Complex64>) -> Result<(Complex64, Complex64)> {
        let values = (0..self.w.len()).map(integrand).collect::<Result<Vec<_>>>()?;
        let fine: Complex64 = values.iter().zip(&self.weights_fine).map(|(v, w)| v * w).sum();
        let coarse: Complex64 = values
            .iter()
            .step_by(2)
            .zip(&self.weights_coarse)
            .map(|(v, w)| v * w)
            .sum();
        Ok((fine, coarse))
    }

    /// Accepts the fine-grid value when the coarse grid agrees with it.
    fn converged(&self, fine: Complex64, coarse: Complex64) -> Result<Complex64> {
        let delta = (fine - coarse).norm();
        if !(delta <= QUADRATURE_TOL) {
            return Err(Error::Quadrature {
                delta,
                nodes: self.ev.nodes,
            });
        }
        Ok(fine)
    }

    /// Ĝ(t, ω) by direct quadrature over η.
    pub fn fundamental(&self, omega: &[f64]) -> Result<Complex64> {
        let spec = self.ev.spec;
        let n = spec.dimension;
        check_dim(omega, n)?;
        let d2 = spec.delta * spec.delta;
        let mut r = vec![0.0; n];
        let (fine, coarse) = self.integrate(|j| {
            for i in 0..n {
                r[i] = omega[i] * self.w[j];
            }
            let r2: f64 = r.iter().map(|x| x * x).sum();
            let br: f64 = r.iter().zip(&self.b[j]).map(|(x, b)| x * b).sum();
            Ok(Complex64::new(-0.5 * d2 * r2, -br) + spec.lambda * self.jump_term(&r)?)
        })?;
        self.converged(fine.exp(), coarse.exp())
    }

    /// Ĝ(t, ω) in terms of the fundamental moments and a jump compensator.
    pub fn via_moments(&self, omega: &[f64], compensator: Compensator) -> Result<Complex64> {
        let spec = self.ev.spec;
        let n = spec.dimension;
        check_dim(omega, n)?;
        let path = &self.ev.fundamental;
        let e = path.mean_at(self.t);
        let v = path.variance_at(self.t);
        let omega2: f64 = omega.iter().map(|x| x * x).sum();
        let oe: f64 = omega.iter().zip(&e).map(|(o, e)| o * e).sum();
        let base = Complex64::new(-0.5 * omega2 * v, -oe);
        let mut q = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        if spec.lambda != 0.0 && !spec.jump.is_none() {
            let m1 = spec.m1();
            let m2n = spec.m2() / n as f64;
            let mut r = vec![0.0; n];
            q = self.integrate(|j| {
                for i in 0..n {
                    r[i] = omega[i] * self.w[j];
                }
                let m1r: f64 = r.iter().zip(&m1).map(|(x, m)| x * m).sum();
                let mut term = self.jump_term(&r)? + Complex64::new(0.0, m1r);
                if compensator == Compensator::Full {
                    term += 0.5 * m2n * r.iter().map(|x| x * x).sum::<f64>();
                }
                Ok(term)
            })?;
        }
        self.converged((base + spec.lambda * q.0).exp(), (base + spec.lambda * q.1).exp())
    }

    /// Ĝ(t, ω)·m̂₀(ω e^{2∫₀ᵗ A}).
    pub fn solution(&self, omega: &[f64], initial: &InitialLaw) -> Result<Complex64> {
        let g = self.fundamental(omega)?;
        let zeta: Vec<f64> = omega.iter().map(|o| o * self.w0).collect();
        Ok(g * initial.charfn(&zeta))
    }
}

fn check_dim(omega: &[f64], n: usize) -> Result<()> {
    if omega.len() != n {
        return Err(Error::Argument(format!(
            "frequency has dimension {}, scenario has {n}",
            omega.len()
        )));
    }
    Ok(())
}

pub fn eval_fundamental_charfun(ev: &CharFunEvaluator, t: f64, omega: &[f64]) -> Result<Complex64> {
    ev.fundamental(t, omega)
}

pub fn eval_charfun_via_moments(ev: &CharFunEvaluator, t: f64, omega: &[f64]) -> Result<Complex64> {
    ev.via_moments(t, omega)
}

pub fn eval_solution_charfun(
    ev: &CharFunEvaluator,
    t: f64,
    omega: &[f64],
    initial: &InitialLaw,
) -> Result<Complex64> {
    ev.solution(t, omega, initial)
}

/// `(2πV)^{-n/2} exp(-|x - E|²/(2V))`.
pub fn gaussian_density(mean: &[f64], variance: f64, x: &[f64]) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Argument("gaussian density needs V > 0".into()));
    }
    if mean.len() != x.len() {
        return Err(Error::Argument("x and E differ in dimension".into()));
    }
    let d2: f64 = x.iter().zip(mean).map(|(x, e)| (x - e) * (x - e)).sum();
    let n = x.len() as f64;
    Ok((2.0 * std::f64::consts::PI * variance).powf(-0.5 * n) * (-d2 / (2.0 * variance)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityParams {
    pub points: usize,
    /// Explicit `[lo, hi]`; defaults to E ± 10√V.
    pub bounds: Option<(f64, f64)>,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            points: DEFAULT_DENSITY_POINTS,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub t: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub mass: f64,
    pub mean: f64,
    pub variance: f64,
}

impl DensityGrid {
    pub fn dx(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    pub fn to_table(&self) -> CsvTable {
        CsvTable {
            comments: vec![meta_line(&[
                ("t", fmt_num(self.t)),
                ("mass", fmt_num(self.mass)),
                ("mean", fmt_num(self.mean)),
                ("variance", fmt_num(self.variance)),
            ])],
            header: vec!["x".into(), "m".into()],
            rows: self.x.iter().zip(&self.density).map(|(x, m)| vec![*x, *m]).collect(),
        }
    }
}

/// Recovers m(t, x) for n = 1 by an inverse FFT of the solution characteristic function.
pub fn invert_density(ev: &CharFunEvaluator, t: f64, params: DensityParams) -> Result<DensityGrid> {
    if ev.spec.dimension != 1 {
        return Err(Error::Argument("density inversion supports n = 1 only".into()));
    }
    if params.points < 16 {
        return Err(Error::Argument("density grid needs at least 16 points".into()));
    }
    let mean = ev.solution.mean_at(t)[0];
    let sigma = ev.solution.variance_at(t).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!("degenerate law at t = {t}: V = 0")));
    }
    let (lo, hi) = params.bounds.unwrap_or((
        mean - DEFAULT_WINDOW_SIGMAS * sigma,
        mean + DEFAULT_WINDOW_SIGMAS * sigma,
    ));
    let need = REQUIRED_WINDOW_SIGMAS * sigma;
    if !(lo <= mean - need && hi >= mean + need) {
        return Err(Error::Argument(format!(
            "bounds [{lo}, {hi}] do not cover E ± 8√V = [{}, {}]",
            mean - need,
            mean + need
        )));
    }
    let n = params.points;
    let dx = (hi - lo) / (n - 1) as f64;
    let slice = ev.slice(t)?;
    let initial = &ev.spec.initial;
    let dw = 2.0 * std::f64::consts::PI / (n as f64 * dx);
    let mut spectrum = (0..n)
        .into_par_iter()
        .map(|k| {
            let signed = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
            let w = signed * dw;
            let value = slice.solution(&[w], initial)?;
            Ok(value * Complex64::new(0.0, w * lo).exp())
        })
        .collect::<Result<Vec<_>>>()?;
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);

    let x: Vec<f64> = (0..n).map(|j| lo + j as f64 * dx).collect();
    let density: Vec<f64> = spectrum.iter().map(|c| c.re / (n as f64 * dx)).collect();
    let mass = crate::numerics::trapezoid(&density, dx);
    if !((mass - 1.0).abs() <= MASS_TOL) {
        return Err(Error::GridUnderResolved(format!(
            "density mass {mass} at t = {t} deviates from 1 by more than {MASS_TOL}"
        )));
    }
    let weighted = |f: &dyn Fn(f64) -> f64| {
        let vals: Vec<f64> = x.iter().zip(&density).map(|(x, m)| f(*x) * m).collect();
        crate::numerics::trapezoid(&vals, dx) / mass
    };
    let first = weighted(&|x| x);
    let variance = weighted(&|x| (x - first) * (x - first));
    Ok(DensityGrid {
        t,
        x,
        density,
        mass,
        mean: first,
        variance,
    })
}

/// `k`-th raw moment for n = 1 as `iᵏ dᵏm̂/dωᵏ` at ω = 0, by five-point differences.
pub fn moment_via_charfun(ev: &CharFunEvaluator, t: f64, order: u32) -> Result<f64> {
    if ev.spec.dimension != 1 {
        return Err(Error::Argument("moments by differentiation support n = 1 only".into()));
    }
    let slice = ev.slice(t)?;
    let h = DIFF_STEP;
    let f = |j: i32| slice.solution(&[j as f64 * h], &ev.spec.initial);
    let (m2, m1, p1, p2) = (f(-2)?, f(-1)?, f(1)?, f(2)?);
    let derivative = match order {
        1 => (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h),
        2 => (-p2 + 16.0 * p1 - 30.0 * f(0)? + 16.0 * m1 - m2) / (12.0 * h * h),
        3 => (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * h.powi(3)),
        4 => (p2 - 4.0 * p1 + 6.0 * f(0)? - 4.0 * m1 + m2) / h.powi(4),
        _ => return Err(Error::Argument(format!("moment order {order} not in 1..=4"))),
    };
    Ok((Complex64::i().powu(order) * derivative).re)
}

/// Third derivative of log m̂ at ω = 0 (n = 1); zero for Gaussian laws.
pub fn log_charfun_cubic(ev: &CharFunEvaluator, t: f64) -> Result<f64> {
    let slice = ev.slice(t)?;
    let h = DIFF_STEP;
    let l = |j: i32| slice.solution(&[j as f64 * h], &ev.spec.initial).map(|z| z.ln());
    let d3 = (l(2)? - 2.0 * l(1)? + 2.0 * l(-1)? - l(-2)?) / (2.0 * h.powi(3));
    Ok(d3.norm())
}

/// Sweep of the solution characteristic function, columns `omega, re, im` (n = 1).
pub fn charfun_sweep(ev: &CharFunEvaluator, t: f64, omegas: &[f64]) -> Result<CsvTable> {
    if ev.spec.dimension != 1 {
        return Err(Error::Argument("charfun sweeps support n = 1 only".into()));
    }
    let slice = ev.slice(t)?;
    let rows = omegas
        .iter()
        .map(|&w| slice.solution(&[w], &ev.spec.initial).map(|z| vec![w, z.re, z.im]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CsvTable {
        comments: vec![meta_line(&[("t", fmt_num(t))])],
        header: vec!["omega".into(), "re".into(), "im".into()],
        rows,
    })
}
