use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::coeff::{Coefficient, CoefficientDoc, NumOrVec};
use super::jump::{build_jump, JumpDistribution};
use crate::error::{Error, Result};

/// Relative tolerance for the equal per-coordinate second moment requirement.
const ISOTROPY_TOL: f64 = 1e-12;

/// Full problem description: dynamics, cost, terminal pay-off, and initial law.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub dimension: usize,
    pub horizon: f64,
    pub delta: f64,
    pub lambda: f64,
    pub jump: JumpDistribution,
    pub cost: CostCoefficients,
    pub terminal: TerminalCost,
    pub initial: InitialLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCoefficients {
    pub a: Coefficient,
    pub b: DriftCoefficient,
    pub c: Coefficient,
}

/// The linear cost coefficient `b(t)`: explicit per coordinate, or coupled to the mean.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftCoefficient {
    Explicit(Vec<Coefficient>),
    MeanField(MeanFieldCoupling),
}

/// `b(t) = b0 + b1·E(t) + b2·E'(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldCoupling {
    pub b0: Vec<f64>,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub a_t: f64,
    pub b_t: Vec<f64>,
    pub c_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    Dirac,
    Gaussian,
}

/// Initial law: a point mass at `x0`, or independent normals with per-coordinate variance `v0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub kind: InitialKind,
    pub x0: Vec<f64>,
    pub v0: f64,
}

impl InitialLaw {
    pub fn dirac(x0: Vec<f64>) -> Self {
        Self {
            kind: InitialKind::Dirac,
            x0,
            v0: 0.0,
        }
    }

    pub fn gaussian(x0: Vec<f64>, v0: f64) -> Self {
        Self {
            kind: InitialKind::Gaussian,
            x0,
            v0,
        }
    }

    /// m̂₀(ζ) = exp(-iζ·x₀ - ½|ζ|²v₀).
    pub fn charfn(&self, zeta: &[f64]) -> num_complex::Complex64 {
        let phase: f64 = zeta.iter().zip(&self.x0).map(|(z, x)| z * x).sum();
        let z2: f64 = zeta.iter().map(|z| z * z).sum();
        num_complex::Complex64::new(-0.5 * z2 * self.v0, -phase).exp()
    }
}

impl ScenarioSpec {
    /// λ𝓜₁, the mean drift contributed by jumps (zero without jumps).
    pub fn jump_drift(&self) -> Vec<f64> {
        match &self.jump {
            JumpDistribution::Law(l) if self.lambda > 0.0 => {
                l.first_moment().into_iter().map(|m| self.lambda * m).collect()
            }
            _ => vec![0.0; self.dimension],
        }
    }

    /// 𝓜₁ of the jump law, zero when there is none.
    pub fn m1(&self) -> Vec<f64> {
        match &self.jump {
            JumpDistribution::Law(l) => l.first_moment(),
            JumpDistribution::None => vec![0.0; self.dimension],
        }
    }

    /// 𝓜₂ = ∫|z|²p(z)dz, zero when there is none.
    pub fn m2(&self) -> f64 {
        match &self.jump {
            JumpDistribution::Law(l) => l.second_moment(),
            JumpDistribution::None => 0.0,
        }
    }

    /// Per-coordinate variance production rate K = δ² + λ𝓜₂/n.
    pub fn variance_rate(&self) -> f64 {
        self.delta * self.delta + self.lambda * self.m2() / self.dimension as f64
    }

    pub fn is_meanfield(&self) -> bool {
        matches!(self.cost.b, DriftCoefficient::MeanField(_))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dimension;
        if n == 0 {
            return Err(Error::Invalid("dimension must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid("T must be > 0".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Invalid("delta must be >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid("lambda must be >= 0".into()));
        }
        if self.lambda > 0.0 && self.jump.is_none() {
            return Err(Error::Invalid("jump required when lambda>0".into()));
        }
        if let JumpDistribution::Law(law) = &self.jump {
            if law.dimension() != n {
                return Err(Error::Invalid("jump law dimension differs from dimension".into()));
            }
            let m = law.coordinate_second_moments();
            let scale = m.iter().cloned().fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
            if m.iter().any(|&mk| (mk - m[0]).abs() > ISOTROPY_TOL * scale) {
                return Err(Error::Invalid(
                    "jump law must have equal per-coordinate second moments".into(),
                ));
            }
        }
        self.cost.a.validate("cost.a")?;
        self.cost.c.validate("cost.c")?;
        match &self.cost.b {
            DriftCoefficient::Explicit(b) => {
                if b.len() != n {
                    return Err(Error::Invalid("cost.b length differs from dimension".into()));
                }
                for c in b {
                    c.validate("cost.b")?;
                }
            }
            DriftCoefficient::MeanField(mf) => {
                if mf.b0.len() != n {
                    return Err(Error::Invalid("cost.b.meanfield.b0 length differs from dimension".into()));
                }
                if !(mf.b1.is_finite() && mf.b2.is_finite() && mf.b0.iter().all(|x| x.is_finite())) {
                    return Err(Error::Invalid("mean-field coupling must be finite".into()));
                }
            }
        }
        let t = &self.terminal;
        if !(t.a_t.is_finite() && t.c_t.is_finite() && t.b_t.iter().all(|x| x.is_finite())) {
            return Err(Error::Invalid("terminal cost must be finite".into()));
        }
        if t.b_t.len() != n {
            return Err(Error::Invalid("terminal.B_T length differs from dimension".into()));
        }
        let init = &self.initial;
        if init.x0.len() != n || init.x0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("initial.x0 must be a finite vector of length dimension".into()));
        }
        if !(init.v0 >= 0.0 && init.v0.is_finite()) {
            return Err(Error::Invalid("initial.v0 must be >= 0".into()));
        }
        match init.kind {
            InitialKind::Dirac if init.v0 != 0.0 => {
                return Err(Error::Invalid("dirac initial law requires v0 = 0".into()))
            }
            InitialKind::Gaussian if init.v0 == 0.0 => {
                return Err(Error::Invalid("gaussian initial law requires v0 > 0".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Scenario document in the file schema.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(ScenarioDoc::from(self)).expect("scenario document serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("scenario document serializes")
    }
}

// File schema. Unknown keys anywhere are rejected.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dimension: Option<usize>,
    #[serde(rename = "T")]
    horizon: f64,
    delta: f64,
    lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jump: Option<JumpDoc>,
    cost: CostDoc,
    terminal: TerminalDoc,
    initial: InitialDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JumpDoc {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    params: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostDoc {
    a: CoefficientDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<DriftDoc>,
    c: CoefficientDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meanfield: Option<MeanFieldDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum DriftDoc {
    Coupled(MeanFieldWrapper),
    Single(CoefficientDoc),
    PerCoordinate(Vec<CoefficientDoc>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeanFieldWrapper {
    meanfield: MeanFieldDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeanFieldDoc {
    b0: NumOrVec,
    b1: f64,
    b2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminalDoc {
    #[serde(rename = "A_T")]
    a_t: f64,
    #[serde(rename = "B_T")]
    b_t: NumOrVec,
    #[serde(rename = "C_T")]
    c_t: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialDoc {
    kind: InitialKind,
    #[serde(default = "zero_vec")]
    x0: NumOrVec,
    #[serde(default)]
    v0: f64,
}

fn zero_vec() -> NumOrVec {
    NumOrVec::Num(0.0)
}

impl From<&ScenarioSpec> for ScenarioDoc {
    fn from(s: &ScenarioSpec) -> Self {
        let jump = match &s.jump {
            JumpDistribution::None => None,
            JumpDistribution::Law(l) => Some(JumpDoc {
                kind: l.name().to_string(),
                params: l.params(),
            }),
        };
        let b = match &s.cost.b {
            DriftCoefficient::Explicit(b) => {
                DriftDoc::PerCoordinate(b.iter().map(CoefficientDoc::from).collect())
            }
            DriftCoefficient::MeanField(mf) => DriftDoc::Coupled(MeanFieldWrapper {
                meanfield: MeanFieldDoc {
                    b0: NumOrVec::Vec(mf.b0.clone()),
                    b1: mf.b1,
                    b2: mf.b2,
                },
            }),
        };
        ScenarioDoc {
            dimension: Some(s.dimension),
            horizon: s.horizon,
            delta: s.delta,
            lambda: s.lambda,
            jump,
            cost: CostDoc {
                a: CoefficientDoc::from(&s.cost.a),
                b: Some(b),
                c: CoefficientDoc::from(&s.cost.c),
                meanfield: None,
            },
            terminal: TerminalDoc {
                a_t: s.terminal.a_t,
                b_t: NumOrVec::Vec(s.terminal.b_t.clone()),
                c_t: s.terminal.c_t,
            },
            initial: InitialDoc {
                kind: s.initial.kind,
                x0: NumOrVec::Vec(s.initial.x0.clone()),
                v0: s.initial.v0,
            },
        }
    }
}

fn mean_field(doc: MeanFieldDoc, n: usize) -> Result<DriftCoefficient> {
    Ok(DriftCoefficient::MeanField(MeanFieldCoupling {
        b0: doc.b0.resolve(n, "cost.meanfield.b0")?,
        b1: doc.b1,
        b2: doc.b2,
    }))
}

impl ScenarioDoc {
    fn into_spec(self) -> Result<ScenarioSpec> {
        let n = self.dimension.unwrap_or(1);
        if n == 0 {
            return Err(Error::Invalid("dimension must be >= 1".into()));
        }
        let jump = match self.jump {
            None => JumpDistribution::None,
            Some(j) => build_jump(&j.kind, &j.params, n)?,
        };
        let b = match (self.cost.b, self.cost.meanfield) {
            (Some(DriftDoc::Coupled(_)), Some(_)) | (Some(_), Some(_)) => {
                return Err(Error::Invalid(
                    "cost.meanfield and an explicit cost.b are mutually exclusive".into(),
                ))
            }
            (None, Some(mf)) | (Some(DriftDoc::Coupled(MeanFieldWrapper { meanfield: mf })), None) => {
                mean_field(mf, n)?
            }
            (Some(DriftDoc::Single(c)), None) => DriftCoefficient::Explicit(vec![c.into(); n]),
            (Some(DriftDoc::PerCoordinate(v)), None) => {
                if v.len() != n {
                    return Err(Error::Invalid(format!(
                        "cost.b has length {} but dimension is {n}",
                        v.len()
                    )));
                }
                DriftCoefficient::Explicit(v.into_iter().map(Coefficient::from).collect())
            }
            (None, None) => return Err(Error::Schema("missing field `b` in cost".into())),
        };
        let spec = ScenarioSpec {
            dimension: n,
            horizon: self.horizon,
            delta: self.delta,
            lambda: self.lambda,
            jump,
            cost: CostCoefficients {
                a: self.cost.a.into(),
                b,
                c: self.cost.c.into(),
            },
            terminal: TerminalCost {
                a_t: self.terminal.a_t,
                b_t: self.terminal.b_t.resolve(n, "terminal.B_T")?,
                c_t: self.terminal.c_t,
            },
            initial: InitialLaw {
                kind: self.initial.kind,
                x0: self.initial.x0.resolve(n, "initial.x0")?,
                v0: self.initial.v0,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario_from_value(value)
}

pub fn scenario_from_value(value: Value) -> Result<ScenarioSpec> {
    let doc: ScenarioDoc =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    doc.into_spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "T": 1, "delta": 1, "lambda": 0,
        "cost": {"a": 0, "b": 0, "c": 0},
        "terminal": {"A_T": 0, "B_T": 0, "C_T": 0},
        "initial": {"kind": "dirac", "x0": 0}
    }"#;

    #[test]
    fn minimal_document_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.dimension, 1);
        assert!(s.jump.is_none());
        assert_eq!(s.cost.b, DriftCoefficient::Explicit(vec![Coefficient::Constant(0.0)]));
        assert_eq!(s.initial, InitialLaw::dirac(vec![0.0]));
    }

    #[test]
    fn lambda_requires_jump() {
        let doc = MINIMAL.replace("\"lambda\": 0", "\"lambda\": 2");
        let err = parse_scenario(&doc).unwrap_err();
        assert!(err.to_string().contains("jump required when lambda>0"), "{err}");
    }

    #[test]
    fn meanfield_and_explicit_b_exclusive() {
        let doc = MINIMAL.replace(
            "\"c\": 0}",
            "\"c\": 0, \"meanfield\": {\"b0\": 0, \"b1\": 1, \"b2\": 0}}",
        );
        let err = parse_scenario(&doc).unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");
    }

    #[test]
    fn meanfield_key_accepted_alone() {
        let doc = MINIMAL.replace("\"b\": 0,", "\"meanfield\": {\"b0\": 0, \"b1\": 1, \"b2\": 0},");
        let s = parse_scenario(&doc).unwrap();
        assert!(s.is_meanfield());
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_scenario("{\n  \"T\": 1,\n  oops\n}").unwrap_err();
        match err {
            Error::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let doc = MINIMAL.replace("\"delta\": 1,", "\"delta\": 1, \"sigma\": 2,");
        let err = parse_scenario(&doc).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn anisotropic_jump_rejected() {
        let doc = r#"{"dimension": 2, "T": 1, "delta": 0, "lambda": 1,
            "jump": {"type": "point", "params": {"z0": [1, 2]}},
            "cost": {"a": 0, "b": 0, "c": 0},
            "terminal": {"A_T": 0, "B_T": 0, "C_T": 0},
            "initial": {"kind": "dirac", "x0": 0}}"#;
        assert!(parse_scenario(doc).is_err());
        let ok = doc.replace("[1, 2]", "[1, -1]");
        assert!(parse_scenario(&ok).is_ok());
    }

    #[test]
    fn initial_law_consistency() {
        let doc = MINIMAL.replace("\"x0\": 0}", "\"x0\": 0, \"v0\": 1}");
        assert!(parse_scenario(&doc).is_err());
        let doc = MINIMAL.replace("\"dirac\", \"x0\": 0}", "\"gaussian\", \"x0\": 0}");
        assert!(parse_scenario(&doc).is_err());
    }
}
