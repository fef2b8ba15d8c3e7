//! Recovery of constant cost parameters `a`, `b` and the variance rate `K`
//! from observed mean and variance series.
//!
//! Each branch (oscillatory, exponential, polynomial) is a [`BranchModel`]
//! registered by name. The branch is chosen by an information criterion
//!
//! ```text
//! IC = m ln(max(RSS, floor)/m) + 7.88 k + 2k(k + 1)/(m - k - 1)
//! ```
//!
//! over `m` mean observations and `k` fitted parameters. The per-parameter
//! penalty 7.88 is the 0.995 quantile of χ²₁, so a polynomial series is
//! misread as a curved branch with probability about 0.5%. `floor` is
//! `m (10⁻¹² max|E|)²`, the round-off level of an exact fit.

mod branch;
mod entire;
mod lm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use branch::{default_branch_registry, BranchModel, MeanFit, PolynomialModel, RateModel, VarianceFit};
pub use entire::{entire, Entire};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::moments::{Branch, ClosedFormMoments, VarianceForm};

pub const MIN_SAMPLES: usize = 8;
pub const PARAMETER_PENALTY: f64 = 7.88;
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSeries {
    pub times: Vec<f64>,
    /// `mean[i]` is E at `times[i]`, one entry per coordinate.
    pub mean: Vec<Vec<f64>>,
    pub variance: Option<Vec<f64>>,
}

impl ObservedSeries {
    pub fn new(times: Vec<f64>, mean: Vec<Vec<f64>>, variance: Option<Vec<f64>>) -> Result<Self> {
        if times.len() < MIN_SAMPLES {
            return Err(Error::Argument(format!("need at least {MIN_SAMPLES} samples")));
        }
        if mean.len() != times.len() || variance.as_ref().is_some_and(|v| v.len() != times.len()) {
            return Err(Error::Argument("series columns differ in length".into()));
        }
        let n = mean[0].len();
        if n == 0 || mean.iter().any(|row| row.len() != n) {
            return Err(Error::Argument("mean rows must share a nonzero dimension".into()));
        }
        let finite = times.iter().chain(mean.iter().flatten()).chain(variance.iter().flatten());
        if finite.clone().any(|x| !x.is_finite()) {
            return Err(Error::Argument("series contains non-finite values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("times must increase strictly".into()));
        }
        if variance.as_ref().is_some_and(|v| v.iter().any(|&x| x < 0.0)) {
            return Err(Error::Argument("variance series contains negative values".into()));
        }
        Ok(Self { times, mean, variance })
    }

    /// Scalar mean series.
    pub fn scalar(times: Vec<f64>, mean: Vec<f64>, variance: Option<Vec<f64>>) -> Result<Self> {
        Self::new(times, mean.into_iter().map(|e| vec![e]).collect(), variance)
    }

    /// Reads columns `t`, `E` or `E_1..E_n`, and optionally `V`.
    pub fn from_table(table: &CsvTable) -> Result<Self> {
        let times = table.column("t")?;
        let cols = match table.column_index("E") {
            Some(j) => vec![j],
            None => table.indexed_columns("E"),
        };
        if cols.is_empty() {
            return Err(Error::Schema("series needs an E or E_1 column".into()));
        }
        let mean = table.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect();
        let variance = table.column_index("V").map(|j| table.rows.iter().map(|r| r[j]).collect());
        Self::new(times, mean, variance)
    }

    pub fn to_table(&self) -> CsvTable {
        let n = self.dimension();
        let mut header = vec!["t".to_string()];
        if n == 1 {
            header.push("E".into());
        } else {
            header.extend((1..=n).map(|i| format!("E_{i}")));
        }
        if self.variance.is_some() {
            header.push("V".into());
        }
        let rows = (0..self.len())
            .map(|k| {
                let mut row = vec![self.times[k]];
                row.extend(&self.mean[k]);
                if let Some(v) = &self.variance {
                    row.push(v[k]);
                }
                row
            })
            .collect();
        CsvTable { comments: Vec::new(), header, rows }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.mean[0].len()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.len() - 1])
    }

    /// Largest |t|, at least a tiny positive number.
    pub(crate) fn reach(&self) -> f64 {
        self.times.iter().fold(1e-300, |m, t| m.max(t.abs()))
    }

    pub(crate) fn min_spacing(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dimension(), |i, j| self.mean[i][j])
    }

    pub(crate) fn rss_floor(&self) -> f64 {
        let scale = self.mean.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        let m = (self.len() * self.dimension()) as f64;
        m * (1e-12 * scale).powi(2)
    }
}

pub(crate) struct LinearFit {
    /// One column of coefficients per right-hand side.
    pub coef: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub rss: f64,
    pub rank: usize,
}

/// Column-scaled SVD least squares for several right-hand sides.
pub(crate) fn solve_linear(phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<LinearFit> {
    if phi.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let scales: Vec<f64> = phi
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 { n } else { 1.0 }
        })
        .collect();
    let mut scaled = phi.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-13 * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let mut coef = svd.solve(y, eps).ok()?;
    for (j, s) in scales.iter().enumerate() {
        coef.row_mut(j).scale_mut(1.0 / s);
    }
    let residual = y - phi * &coef;
    let rss = residual.norm_squared();
    Some(LinearFit { coef, residual, rss, rank })
}

pub fn information_criterion(rss: f64, floor: f64, m: usize, k: usize) -> f64 {
    let (mf, kf) = (m as f64, k as f64);
    mf * (rss.max(floor) / mf).ln() + PARAMETER_PENALTY * kf + 2.0 * kf * (kf + 1.0) / (mf - kf - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchScore {
    pub name: &'static str,
    pub fit: Option<MeanFit>,
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub branch: Branch,
    pub name: &'static str,
    /// Criterion gap to the runner-up (infinite when no other branch fitted).
    pub confidence: f64,
    pub scores: Vec<BranchScore>,
}

/// Fits every registered branch to the mean series and keeps the lowest criterion.
pub fn classify_branch(series: &ObservedSeries) -> Result<Classification> {
    let floor = series.rss_floor();
    let m = series.len() * series.dimension();
    let scores: Vec<BranchScore> = default_branch_registry()
        .iter()
        .map(|(name, model)| {
            let fit = model.fit_mean(series).ok().filter(|f| !f.degenerate);
            let criterion = fit
                .as_ref()
                .map_or(f64::INFINITY, |f| information_criterion(f.rss, floor, m, f.parameters));
            BranchScore { name, fit, criterion }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.criterion.is_finite() && best.is_none_or(|b| s.criterion < scores[b].criterion) {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| Error::Indeterminate("every branch fit is degenerate".into()))?;
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, s)| s.criterion)
        .fold(f64::INFINITY, f64::min);
    Ok(Classification {
        branch: scores[best].fit.as_ref().map(|f| f.branch).unwrap_or(Branch::Polynomial),
        name: scores[best].name,
        confidence: runner_up - scores[best].criterion,
        scores,
    })
}

fn non_finite_as_null<S: serde::Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) if v.is_finite() => s.serialize_f64(*v),
        _ => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredParams {
    pub branch: Branch,
    pub a: f64,
    pub b: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Option<f64>,
    /// First integral of the variance equation; negative values mean no real K fits.
    #[serde(rename = "K_squared")]
    pub k_squared: Option<f64>,
    pub k_admissible: Option<bool>,
    #[serde(rename = "C1")]
    pub c1: Vec<f64>,
    #[serde(rename = "C2")]
    pub c2: Vec<f64>,
    #[serde(rename = "D_V")]
    pub offset_v: Option<f64>,
    #[serde(rename = "C1_V")]
    pub c1_v: Option<f64>,
    #[serde(rename = "C2_V")]
    pub c2_v: Option<f64>,
    #[serde(rename = "rms_residual_E")]
    pub rms_residual_e: f64,
    #[serde(rename = "rms_residual_V")]
    pub rms_residual_v: Option<f64>,
    /// Gauss–Newton covariance of `(a, b_1, .., b_n)`.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub identifiable: bool,
    #[serde(serialize_with = "non_finite_as_null")]
    pub confidence: Option<f64>,
}

impl RecoveredParams {
    /// Closed forms per coordinate; the variance form rides on the first.
    pub fn closed_forms(&self) -> Vec<ClosedFormMoments> {
        let variance = match (self.offset_v, self.c1_v, self.c2_v) {
            (Some(offset), Some(c1), Some(c2)) => Some(VarianceForm { offset, c1, c2 }),
            _ => None,
        };
        (0..self.b.len())
            .map(|i| ClosedFormMoments {
                branch: self.branch,
                a: self.a,
                b: self.b[i],
                k: self.k.unwrap_or(0.0),
                c1_e: self.c1[i],
                c2_e: self.c2[i],
                variance,
            })
            .collect()
    }

    /// Series generated from the closed forms at `times`.
    pub fn generate(&self, times: &[f64]) -> Result<ObservedSeries> {
        let forms = self.closed_forms();
        let mean = times.iter().map(|&t| forms.iter().map(|f| f.mean(t)).collect()).collect();
        let variance = forms[0].variance.map(|_| times.iter().map(|&t| forms[0].variance(t).unwrap_or(0.0)).collect());
        ObservedSeries::new(times.to_vec(), mean, variance)
    }
}

/// Gauss–Newton covariance of `(a, b)` in the model `E = E₀C + E₀'tS - bt²G`, `z = 2at²`.
fn covariance(fit: &MeanFit, series: &ObservedSeries) -> (Option<Vec<Vec<f64>>>, bool) {
    let n = series.dimension();
    let m = series.len();
    let k = 1 + 3 * n;
    let rows = m * n;
    let mut jac = DMatrix::zeros(rows, k);
    for (p, &t) in series.times.iter().enumerate() {
        let e = entire(2.0 * fit.a * t * t);
        let [c, s, g] = e.value;
        let [dc, ds, dg] = e.derivative;
        for i in 0..n {
            let row = i * m + p;
            jac[(row, 0)] = (fit.e0[i] * dc + fit.de0[i] * t * ds - fit.b[i] * t * t * dg) * 2.0 * t * t;
            jac[(row, 1 + 3 * i)] = c;
            jac[(row, 2 + 3 * i)] = t * s;
            jac[(row, 3 + 3 * i)] = -t * t * g;
        }
    }
    if jac.iter().any(|x| !x.is_finite()) {
        return (None, true);
    }
    let scales: Vec<f64> = jac.column_iter().map(|c| c.norm().max(1e-300)).collect();
    for (j, sc) in scales.iter().enumerate() {
        jac.column_mut(j).scale_mut(1.0 / sc);
    }
    let svd = jac.svd(false, true);
    let (smin, smax) = (svd.singular_values.min(), svd.singular_values.max());
    if !(smax > 0.0) || smin / smax < COLLINEAR_TOL {
        return (None, false);
    }
    let Some(v_t) = svd.v_t else { return (None, false) };
    let sigma2 = if rows > k { fit.rss / (rows - k) as f64 } else { 0.0 };
    let inv_s2 = DVector::from_iterator(k, svd.singular_values.iter().map(|s| 1.0 / (s * s)));
    // (JᵀJ)⁻¹ = V diag(1/s²) Vᵀ, then undo the column scaling.
    let v = v_t.transpose();
    let full = &v * DMatrix::from_diagonal(&inv_s2) * v.transpose();
    let index: Vec<usize> = std::iter::once(0).chain((0..n).map(|i| 3 + 3 * i)).collect();
    let cov = index
        .iter()
        .map(|&r| index.iter().map(|&c| sigma2 * full[(r, c)] / (scales[r] * scales[c])).collect())
        .collect();
    (Some(cov), true)
}

/// Fits the mean under `branch` (a registry name, or classified when `None` or `"auto"`),
/// then the variance constants and K with `a` held fixed.
pub fn fit_parameters(series: &ObservedSeries, branch: Option<&str>) -> Result<RecoveredParams> {
    let (fit, confidence) = match branch {
        None | Some("auto") => {
            let c = classify_branch(series)?;
            let best = c.scores.into_iter().find(|s| s.name == c.name).and_then(|s| s.fit);
            (best.ok_or_else(|| Error::Indeterminate("no branch fitted".into()))?, Some(c.confidence))
        }
        Some(name) => {
            let registry = default_branch_registry();
            let model = registry.get(name).ok_or_else(|| {
                Error::Argument(format!("unknown branch {name:?}; expected auto or one of {:?}", registry.names()))
            })?;
            (model.fit_mean(series)?, None)
        }
    };
    let m = (series.len() * series.dimension()) as f64;
    let (covariance, identifiable) = covariance(&fit, series);
    let model = default_branch_registry()
        .get(fit.branch.short_name())
        .ok_or_else(|| Error::Fit("branch model missing from registry".into()))?;
    let variance = match series.variance {
        Some(_) => Some(model.fit_variance(fit.a, series)?),
        None => None,
    };
    Ok(RecoveredParams {
        branch: fit.branch,
        a: fit.a,
        b: fit.b.clone(),
        k: variance.map(|v| v.k_squared.max(0.0).sqrt()),
        k_squared: variance.map(|v| v.k_squared),
        k_admissible: variance.map(|v| v.k_squared >= -1e-9 * (1.0 + v.form.offset.abs()).powi(2)),
        c1: fit.c1.clone(),
        c2: fit.c2.clone(),
        offset_v: variance.map(|v| v.form.offset),
        c1_v: variance.map(|v| v.form.c1),
        c2_v: variance.map(|v| v.form.c2),
        rms_residual_e: (fit.rss / m).sqrt(),
        rms_residual_v: variance.map(|v| (v.rss / series.len() as f64).sqrt()),
        covariance,
        identifiable,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub times: Vec<f64>,
    /// Observed minus regenerated, per time and coordinate.
    pub residual_e: Vec<Vec<f64>>,
    pub residual_v: Option<Vec<f64>>,
    pub rms_e: f64,
    pub rms_v: Option<f64>,
    pub max_deviation_e: f64,
    pub max_deviation_v: Option<f64>,
}

impl FitDiagnostics {
    /// Columns `t, r_E_1..r_E_n[, r_V]`.
    pub fn to_table(&self) -> CsvTable {
        let n = self.residual_e.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("r_E_{i}")));
        if self.residual_v.is_some() {
            header.push("r_V".into());
        }
        let rows = self
            .times
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut row = vec![*t];
                row.extend(&self.residual_e[k]);
                if let Some(rv) = &self.residual_v {
                    row.push(rv[k]);
                }
                row
            })
            .collect();
        CsvTable { comments: Vec::new(), header, rows }
    }
}

/// Regenerates E and V from `params` and compares them with the series.
pub fn evaluate_fit(params: &RecoveredParams, series: &ObservedSeries) -> Result<FitDiagnostics> {
    if params.b.len() != series.dimension() {
        return Err(Error::Argument("parameters and series differ in dimension".into()));
    }
    let forms = params.closed_forms();
    let residual_e: Vec<Vec<f64>> = series
        .times
        .iter()
        .zip(&series.mean)
        .map(|(&t, obs)| obs.iter().zip(&forms).map(|(e, f)| e - f.mean(t)).collect())
        .collect();
    let flat: Vec<f64> = residual_e.iter().flatten().copied().collect();
    let rms = |r: &[f64]| (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
    let max_abs = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let residual_v = match (&series.variance, forms[0].variance) {
        (Some(v), Some(_)) => Some(
            series
                .times
                .iter()
                .zip(v)
                .map(|(&t, obs)| obs - forms[0].variance(t).unwrap_or(f64::NAN))
                .collect::<Vec<f64>>(),
        ),
        _ => None,
    };
    Ok(FitDiagnostics {
        times: series.times.clone(),
        rms_e: rms(&flat),
        max_deviation_e: max_abs(&flat),
        rms_v: residual_v.as_deref().map(rms),
        max_deviation_v: residual_v.as_deref().map(max_abs),
        residual_e,
        residual_v,
    })
}
