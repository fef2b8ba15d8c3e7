use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest polynomial degree accepted for a time-dependent coefficient.
pub const MAX_POLY_DEGREE: usize = 4;

/// Scalar function of time: a constant or a low-degree polynomial in `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    /// Coefficients in increasing degree: `c0 + c1 t + c2 t² + ...`.
    Polynomial(Vec<f64>),
}

impl Coefficient {
    pub fn zero() -> Self {
        Coefficient::Constant(0.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Polynomial(p) => p.iter().rev().fold(0.0, |acc, &c| acc * t + c),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Polynomial(p) => p
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, &c)| acc * t + k as f64 * c),
        }
    }

    /// The value if the coefficient does not depend on time.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            Coefficient::Polynomial(p) => {
                if p.iter().skip(1).all(|&c| c == 0.0) {
                    Some(p.first().copied().unwrap_or(0.0))
                } else {
                    None
                }
            }
        }
    }

    pub(crate) fn validate(&self, key: &str) -> Result<()> {
        match self {
            Coefficient::Constant(c) if !c.is_finite() => {
                Err(Error::Invalid(format!("{key} must be finite")))
            }
            Coefficient::Polynomial(p) => {
                if p.is_empty() {
                    return Err(Error::Invalid(format!("{key}: empty polynomial")));
                }
                if p.len() > MAX_POLY_DEGREE + 1 {
                    return Err(Error::Invalid(format!(
                        "{key}: polynomial degree {} exceeds {MAX_POLY_DEGREE}",
                        p.len() - 1
                    )));
                }
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Invalid(format!("{key}: non-finite coefficient")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// File form of a scalar coefficient: `number | {"poly": [c0, c1, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub(crate) enum CoefficientDoc {
    Number(f64),
    Poly(PolyDoc),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PolyDoc {
    pub poly: Vec<f64>,
}

impl From<CoefficientDoc> for Coefficient {
    fn from(doc: CoefficientDoc) -> Self {
        match doc {
            CoefficientDoc::Number(c) => Coefficient::Constant(c),
            CoefficientDoc::Poly(p) => Coefficient::Polynomial(p.poly),
        }
    }
}

impl From<&Coefficient> for CoefficientDoc {
    fn from(c: &Coefficient) -> Self {
        match c {
            Coefficient::Constant(c) => CoefficientDoc::Number(*c),
            Coefficient::Polynomial(p) => CoefficientDoc::Poly(PolyDoc { poly: p.clone() }),
        }
    }
}

/// A number broadcast to every coordinate, or an explicit vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub(crate) enum NumOrVec {
    Num(f64),
    Vec(Vec<f64>),
}

impl NumOrVec {
    pub fn resolve(&self, n: usize, key: &str) -> Result<Vec<f64>> {
        let v = match self {
            NumOrVec::Num(x) => vec![*x; n],
            NumOrVec::Vec(v) if v.len() == n => v.clone(),
            NumOrVec::Vec(v) => {
                return Err(Error::Invalid(format!(
                    "{key} has length {} but dimension is {n}",
                    v.len()
                )))
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("{key} must be finite")));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_value_and_derivative() {
        let p = Coefficient::Polynomial(vec![1.0, -2.0, 3.0]);
        assert_eq!(p.value(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(p.derivative(2.0), -2.0 + 12.0);
        assert_eq!(p.as_constant(), None);
        assert_eq!(Coefficient::Polynomial(vec![5.0, 0.0]).as_constant(), Some(5.0));
    }

    #[test]
    fn degree_limit() {
        let p = Coefficient::Polynomial(vec![0.0; 6]);
        assert!(p.validate("a").is_err());
        assert!(Coefficient::Polynomial(vec![0.0; 5]).validate("a").is_ok());
    }
}
