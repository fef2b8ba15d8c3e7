//! The functions `C(z) = cos√z`, `S(z) = sin√z/√z`, `G(z) = (1 - cos√z)/z`,
//! continued to `z < 0` through cosh/sinh, with their z-derivatives.
//!
//! With `z = 2at²`, `E(t) = E₀C + E₀'tS - bt²G` solves `E'' + 2aE = -b` for
//! every sign of `a`.

const SERIES_RADIUS: f64 = 1.0;
const SERIES_TERMS: usize = 24;

/// Values `[C, S, G]` and derivatives `[C', S', G']` at `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entire {
    pub value: [f64; 3],
    pub derivative: [f64; 3],
}

pub fn entire(z: f64) -> Entire {
    if z.abs() <= SERIES_RADIUS {
        return series(z);
    }
    let (c, s) = if z > 0.0 {
        let r = z.sqrt();
        (r.cos(), r.sin() / r)
    } else {
        let r = (-z).sqrt();
        (r.cosh(), r.sinh() / r)
    };
    let g = (1.0 - c) / z;
    Entire {
        value: [c, s, g],
        derivative: [-0.5 * s, (c - s) / (2.0 * z), (0.5 * s - g) / z],
    }
}

fn series(z: f64) -> Entire {
    // Coefficients (-1)^k / (2k + j)! for j = 0, 1, 2.
    let mut value = [0.0; 3];
    let mut derivative = [0.0; 3];
    for (j, (v, d)) in value.iter_mut().zip(derivative.iter_mut()).enumerate() {
        let mut coeff = 1.0 / factorial(j);
        let mut power = 1.0;
        for k in 0..SERIES_TERMS {
            *v += coeff * power;
            let next = -coeff / (((2 * k + j + 1) * (2 * k + j + 2)) as f64);
            *d += next * (k + 1) as f64 * power;
            coeff = next;
            power *= z;
        }
    }
    Entire { value, derivative }
}

fn factorial(j: usize) -> f64 {
    (1..=j).map(|i| i as f64).product()
}
