//! Levenberg–Marquardt for the single nonlinear parameter of a separable
//! least-squares problem.

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOL: f64 = 1e-10;
/// Relative decrease of the residual below which the search stops.
pub const RSS_TOL: f64 = 1e-12;
const DIFF_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOutcome {
    pub theta: f64,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `|r(θ)|²` over `θ ∈ [lo, hi]` from `theta0`.
///
/// `residual` writes `r(θ)` into its buffer and returns `|r|²`. Convergence means
/// a step below `STEP_TOL` (θ is a log-rate, so this is a relative step in the rate),
/// a relative decrease below `RSS_TOL`, a residual at `floor`, or no further
/// decrease under any damping.
pub fn minimize(
    mut residual: impl FnMut(f64, &mut Vec<f64>) -> f64,
    theta0: f64,
    (lo, hi): (f64, f64),
    floor: f64,
) -> LmOutcome {
    let mut theta = theta0.clamp(lo, hi);
    let mut r = Vec::new();
    let mut rp = Vec::new();
    let mut rm = Vec::new();
    let mut trial = Vec::new();
    let mut rss = residual(theta, &mut r);
    let mut damping = 1e-3;
    for iteration in 1..=MAX_ITERATIONS {
        if !(rss > floor) {
            return LmOutcome { theta, rss, iterations: iteration, converged: true };
        }
        let (tp, tm) = ((theta + DIFF_STEP).min(hi), (theta - DIFF_STEP).max(lo));
        residual(tp, &mut rp);
        residual(tm, &mut rm);
        let (mut g, mut h) = (0.0, 0.0);
        for ((p, m), ri) in rp.iter().zip(&rm).zip(&r) {
            let j = (p - m) / (tp - tm);
            g += j * ri;
            h += j * j;
        }
        if h == 0.0 || !h.is_finite() {
            return LmOutcome { theta, rss, iterations: iteration, converged: h == 0.0 };
        }
        loop {
            let next = (theta - g / (h * (1.0 + damping))).clamp(lo, hi);
            let next_rss = residual(next, &mut trial);
            if next_rss < rss {
                let step = (next - theta).abs();
                let gain = (rss - next_rss) / rss;
                theta = next;
                rss = next_rss;
                std::mem::swap(&mut r, &mut trial);
                damping = (damping / 10.0).max(1e-12);
                if step < STEP_TOL || gain < RSS_TOL {
                    return LmOutcome { theta, rss, iterations: iteration, converged: true };
                }
                break;
            }
            damping *= 10.0;
            if damping > 1e12 || (next - theta).abs() < STEP_TOL {
                return LmOutcome { theta, rss, iterations: iteration, converged: true };
            }
        }
    }
    LmOutcome { theta, rss, iterations: MAX_ITERATIONS, converged: false }
}
