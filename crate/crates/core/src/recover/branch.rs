//! Branch models, registered by name and selected at runtime.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::entire::entire;
use super::lm::minimize;
use super::{solve_linear, ObservedSeries};
use crate::error::{Error, Result};
use crate::moments::{Branch, VarianceForm};
use crate::registry::Registry;

const START_COUNT: usize = 16;
const START_LO: f64 = 1e-2;
const START_HI: f64 = 1e2;
const RATE_FLOOR: f64 = 1e-8;

/// Least-squares fit of the mean series under one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFit {
    pub branch: Branch,
    pub a: f64,
    pub b: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// E(0) and E'(0) per coordinate.
    pub e0: Vec<f64>,
    pub de0: Vec<f64>,
    pub rss: f64,
    pub parameters: usize,
    /// The final linear basis lost rank.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFit {
    pub form: VarianceForm,
    pub k_squared: f64,
    pub rss: f64,
}

pub trait BranchModel: Send + Sync {
    fn branch(&self) -> Branch;

    fn fit_mean(&self, series: &ObservedSeries) -> Result<MeanFit>;

    /// Fits `V = offset + c1 f1 + c2 f2` with `a` held fixed, then `K²` from the
    /// first integral `V'² - 2V(V'' + 4aV)`.
    fn fit_variance(&self, a: f64, series: &ObservedSeries) -> Result<VarianceFit> {
        fit_variance_fixed(self.branch(), a, series)
    }
}

/// Models with `a = ±r²/2` for a rate `r > 0` found by multi-start Levenberg–Marquardt.
#[derive(Debug, Clone, Copy)]
pub struct RateModel {
    sign: f64,
}

impl RateModel {
    pub const OSCILLATORY: Self = Self { sign: 1.0 };
    pub const EXPONENTIAL: Self = Self { sign: -1.0 };

    fn a(&self, rate: f64) -> f64 {
        0.5 * self.sign * rate * rate
    }

    /// Sampled columns for the mean at this rate, plus whether they are the scaled exponentials.
    fn basis(&self, rate: f64, series: &ObservedSeries) -> (DMatrix<f64>, bool) {
        let (t_lo, t_hi) = series.span();
        let reach = series.reach();
        let m = series.len();
        if self.sign < 0.0 && rate * reach > 1.0 {
            let phi = DMatrix::from_fn(m, 3, |i, j| {
                let t = series.times[i];
                match j {
                    0 => (rate * (t - t_hi)).exp(),
                    1 => (-rate * (t - t_lo)).exp(),
                    _ => 1.0,
                }
            });
            return (phi, true);
        }
        let a = self.a(rate);
        let phi = DMatrix::from_fn(m, 3, |i, j| {
            let t = series.times[i];
            let v = entire(2.0 * a * t * t).value;
            match j {
                0 => v[0],
                1 => t * v[1],
                _ => -t * t * v[2],
            }
        });
        (phi, false)
    }
}

impl BranchModel for RateModel {
    fn branch(&self) -> Branch {
        if self.sign > 0.0 {
            Branch::Oscillatory
        } else {
            Branch::Exponential
        }
    }

    fn fit_mean(&self, series: &ObservedSeries) -> Result<MeanFit> {
        let y = series.mean_matrix();
        let floor = series.rss_floor();
        let nyquist = PI / series.min_spacing();
        let hi = START_HI.min(nyquist).max(START_LO);
        let upper = if self.sign > 0.0 { nyquist } else { START_HI.max(1e3 / series.reach()) };
        let bounds = (RATE_FLOOR.ln(), upper.max(hi).ln());
        let starts: Vec<f64> = (0..START_COUNT)
            .map(|i| START_LO.ln() + (hi / START_LO).ln() * i as f64 / (START_COUNT - 1) as f64)
            .collect();
        let outcomes: Vec<_> = starts
            .par_iter()
            .map(|&theta0| {
                minimize(
                    |theta, r| {
                        let (phi, _) = self.basis(theta.exp(), series);
                        match solve_linear(&phi, &y) {
                            Some(fit) => {
                                r.clear();
                                r.extend(fit.residual.iter());
                                fit.rss
                            }
                            None => {
                                r.clear();
                                r.resize(y.len(), f64::INFINITY);
                                f64::INFINITY
                            }
                        }
                    },
                    theta0,
                    bounds,
                    floor,
                )
            })
            .collect();
        let mut best: Option<usize> = None;
        for (i, o) in outcomes.iter().enumerate() {
            if o.converged && o.rss.is_finite() && best.is_none_or(|b| o.rss < outcomes[b].rss) {
                best = Some(i);
            }
        }
        let Some(best) = best else {
            let lowest = outcomes.iter().map(|o| o.rss).fold(f64::INFINITY, f64::min);
            return Err(Error::Fit(format!(
                "{:?} branch: no start converged; best residual sum of squares {lowest:e}",
                self.branch()
            )));
        };
        let rate = outcomes[best].theta.exp();
        let a = self.a(rate);
        let (phi, scaled) = self.basis(rate, series);
        let fit = solve_linear(&phi, &y).ok_or_else(|| Error::Fit("final linear solve failed".into()))?;
        let n = series.dimension();
        let (t_lo, t_hi) = series.span();
        let mut out = MeanFit {
            branch: self.branch(),
            a,
            b: vec![0.0; n],
            c1: vec![0.0; n],
            c2: vec![0.0; n],
            e0: vec![0.0; n],
            de0: vec![0.0; n],
            rss: fit.rss,
            parameters: 1 + 3 * n,
            degenerate: fit.rank < 3,
        };
        for i in 0..n {
            let col = fit.coef.column(i);
            if scaled {
                let p = col[0] * (-rate * t_hi).exp();
                let q = col[1] * (rate * t_lo).exp();
                let offset = col[2];
                out.b[i] = -2.0 * a * offset;
                out.c1[i] = p - q;
                out.c2[i] = p + q;
                out.e0[i] = p + q + offset;
                out.de0[i] = rate * (p - q);
            } else {
                let (e0, de0, b) = (col[0], col[1], col[2]);
                out.b[i] = b;
                out.c1[i] = de0 / rate;
                out.c2[i] = e0 + b / (2.0 * a);
                out.e0[i] = e0;
                out.de0[i] = de0;
            }
        }
        Ok(out)
    }
}

/// `a = 0`: quadratic mean by linear least squares.
#[derive(Debug, Clone, Copy)]
pub struct PolynomialModel;

impl BranchModel for PolynomialModel {
    fn branch(&self) -> Branch {
        Branch::Polynomial
    }

    fn fit_mean(&self, series: &ObservedSeries) -> Result<MeanFit> {
        let phi = DMatrix::from_fn(series.len(), 3, |i, j| series.times[i].powi(j as i32));
        let fit = solve_linear(&phi, &series.mean_matrix())
            .ok_or_else(|| Error::Fit("polynomial least squares failed".into()))?;
        let n = series.dimension();
        let col = |k: usize| -> Vec<f64> { (0..n).map(|i| fit.coef[(k, i)]).collect() };
        let (q0, q1, q2) = (col(0), col(1), col(2));
        Ok(MeanFit {
            branch: Branch::Polynomial,
            a: 0.0,
            b: q2.iter().map(|q| -2.0 * q).collect(),
            c1: q1.clone(),
            c2: q0.clone(),
            e0: q0,
            de0: q1,
            rss: fit.rss,
            parameters: 3 * n,
            degenerate: fit.rank < 3,
        })
    }
}

fn fit_variance_fixed(branch: Branch, a: f64, series: &ObservedSeries) -> Result<VarianceFit> {
    let v = series
        .variance
        .as_ref()
        .ok_or_else(|| Error::Argument("series has no variance column".into()))?;
    let m = series.len();
    let y = DMatrix::from_column_slice(m, 1, v);
    let (t_lo, t_hi) = series.span();
    let rho = 2.0 * (2.0 * a.abs()).sqrt();
    let scaled = branch == Branch::Exponential && rho * series.reach() > 1.0;
    let phi = DMatrix::from_fn(m, 3, |i, j| {
        let t = series.times[i];
        if scaled {
            match j {
                0 => 1.0,
                1 => (rho * (t - t_hi)).exp(),
                _ => (-rho * (t - t_lo)).exp(),
            }
        } else {
            let e = entire(8.0 * a * t * t).value;
            match j {
                0 => 1.0,
                1 => t * e[1],
                _ => t * t * e[2],
            }
        }
    });
    let fit = solve_linear(&phi, &y).ok_or_else(|| Error::Fit("variance least squares failed".into()))?;
    let (c0, c1, c2) = (fit.coef[(0, 0)], fit.coef[(1, 0)], fit.coef[(2, 0)]);
    // Unscaled coefficients are V(0), V'(0), V''(0).
    let form = if scaled {
        VarianceForm {
            offset: c0,
            c1: c1 * (-rho * t_hi).exp(),
            c2: c2 * (rho * t_lo).exp(),
        }
    } else {
        match branch {
            Branch::Polynomial => VarianceForm { offset: c0, c1, c2: 0.5 * c2 },
            Branch::Oscillatory => VarianceForm {
                offset: c0 + c2 / (8.0 * a),
                c1: c1 / rho,
                c2: -c2 / (8.0 * a),
            },
            Branch::Exponential => {
                let (s, g) = (c1 / rho, -c2 / (8.0 * a));
                VarianceForm {
                    offset: c0 + c2 / (8.0 * a),
                    c1: 0.5 * (s + g),
                    c2: 0.5 * (g - s),
                }
            }
        }
    };
    let [v0, dv0, ddv0] = crate::moments::variance_form_derivatives(branch, a, &form, 0.0);
    Ok(VarianceFit {
        form,
        k_squared: dv0 * dv0 - 2.0 * v0 * (ddv0 + 4.0 * a * v0),
        rss: fit.rss,
    })
}

/// Registry of the three constant-coefficient branches under `osc`, `exp`, `poly`.
pub fn default_branch_registry() -> &'static Registry<dyn BranchModel> {
    static REGISTRY: OnceLock<Registry<dyn BranchModel>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn BranchModel> = Registry::new();
        r.register("osc", std::sync::Arc::new(RateModel::OSCILLATORY));
        r.register("exp", std::sync::Arc::new(RateModel::EXPONENTIAL));
        r.register("poly", std::sync::Arc::new(PolynomialModel));
        r
    })
}
