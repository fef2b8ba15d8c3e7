//! Small numerical building blocks shared by the solvers: uniform grids,
//! cubic Hermite interpolation, and composite Simpson quadrature.

/// Uniform grid of `steps + 1` nodes on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl UniformGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        assert!(steps > 0 && horizon > 0.0);
        Self { horizon, steps }
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.h()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.t(k)).collect()
    }

    /// Interval index `k` and local coordinate `s ∈ [0, 1]` with `t = t_k + s h`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.h()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        (k, x - k as f64)
    }

    /// Node index if `t` sits on a node (to within `1e-9` of a step).
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.h();
        let k = x.round();
        ((x - k).abs() < 1e-9 && k >= 0.0 && k <= self.steps as f64).then_some(k as usize)
    }
}

/// Cubic Hermite interpolant on one interval of width `h` at local coordinate `s`.
#[inline]
pub fn hermite(y0: f64, y1: f64, d0: f64, d1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Time derivative of [`hermite`].
#[inline]
pub fn hermite_derivative(y0: f64, y1: f64, d0: f64, d1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let g00 = 6.0 * s2 - 6.0 * s;
    let g10 = 3.0 * s2 - 4.0 * s + 1.0;
    let g01 = -6.0 * s2 + 6.0 * s;
    let g11 = 3.0 * s2 - 2.0 * s;
    (g00 * y0 + g01 * y1) / h + g10 * d0 + g11 * d1
}

/// Composite Simpson weights for `m` (even) subintervals of width `h`.
pub fn simpson_weights(m: usize, h: f64) -> Vec<f64> {
    assert!(m >= 2 && m % 2 == 0, "Simpson rule needs an even number of intervals");
    (0..=m)
        .map(|j| {
            let w = if j == 0 || j == m {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

/// Composite Simpson rule over nodes already sampled on a uniform grid.
pub fn simpson_sum(values: &[f64], h: f64) -> f64 {
    let m = values.len() - 1;
    simpson_weights(m, h)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

/// Trapezoid rule over uniformly spaced samples.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Tabulated vector function with derivatives, interpolated by cubic Hermite
/// splines on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    pub grid: UniformGrid,
    /// `values[k][i]` is coordinate `i` at node `k`.
    pub values: Vec<Vec<f64>>,
    pub derivatives: Vec<Vec<f64>>,
}

impl Tabulated {
    pub fn dimension(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let (k, s) = self.grid.locate(t);
        let h = self.grid.h();
        for (i, o) in out.iter_mut().enumerate() {
            *o = hermite(
                self.values[k][i],
                self.values[k + 1][i],
                self.derivatives[k][i],
                self.derivatives[k + 1][i],
                h,
                s,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_reproduces_cubics() {
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let df = |t: f64| -2.0 + 1.5 * t * t;
        let (t0, h) = (0.3, 0.7);
        for s in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let t = t0 + s * h;
            let y = hermite(f(t0), f(t0 + h), df(t0), df(t0 + h), h, s);
            let d = hermite_derivative(f(t0), f(t0 + h), df(t0), df(t0 + h), h, s);
            assert!((y - f(t)).abs() < 1e-14);
            assert!((d - df(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn simpson_exact_for_cubics() {
        let h = 0.1;
        let v: Vec<f64> = (0..=10).map(|j| (j as f64 * h).powi(3)).collect();
        assert!((simpson_sum(&v, h) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn grid_locate_and_nodes() {
        let g = UniformGrid::new(1.0, 4);
        assert_eq!(g.locate(1.0), (3, 1.0));
        assert_eq!(g.locate(0.5).0, 2);
        assert_eq!(g.node_index(0.75), Some(3));
        assert_eq!(g.node_index(0.7), None);
        assert_eq!(g.t(4), 1.0);
    }
}
