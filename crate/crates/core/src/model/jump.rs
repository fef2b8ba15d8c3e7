//! Jump-size laws of the compound Poisson component.
//!
//! Every law exposes the same algebra: first moment, second moments,
//! characteristic function `p̂(ω) = ∫ e^{-iω·z} p(z) dz`, and sampling.
//! Scenario files select a law by its registered `type` name.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::{Rng, RngCore};
use rand_distr::{Exp1, StandardNormal};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::coeff::NumOrVec;
use crate::registry::Registry;

pub trait JumpLaw: Send + Sync + fmt::Debug {
    /// Registered `type` name.
    fn name(&self) -> &'static str;
    fn dimension(&self) -> usize;
    /// 𝓜₁ = ∫ z p(z) dz.
    fn first_moment(&self) -> Vec<f64>;
    /// Per-coordinate second moments ∫ z_k² p(z) dz.
    fn coordinate_second_moments(&self) -> Vec<f64>;
    fn charfn(&self, omega: &[f64]) -> Complex64;
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    /// The `params` object as written in scenario files.
    fn params(&self) -> Value;

    /// 𝓜₂ = ∫ |z|² p(z) dz.
    fn second_moment(&self) -> f64 {
        self.coordinate_second_moments().iter().sum()
    }
}

/// Jump component of a scenario: absent, or one registered law.
#[derive(Clone, Debug, Default)]
pub enum JumpDistribution {
    #[default]
    None,
    Law(Arc<dyn JumpLaw>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpMoments {
    pub m1: Vec<f64>,
    pub m2: f64,
}

impl JumpDistribution {
    pub fn law(&self) -> Result<&Arc<dyn JumpLaw>> {
        match self {
            JumpDistribution::None => Err(Error::NoJumpLaw),
            JumpDistribution::Law(l) => Ok(l),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, JumpDistribution::None)
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            JumpDistribution::None => "none",
            JumpDistribution::Law(l) => l.name(),
        }
    }

    pub fn moments(&self) -> Result<JumpMoments> {
        let law = self.law()?;
        Ok(JumpMoments {
            m1: law.first_moment(),
            m2: law.second_moment(),
        })
    }

    pub fn charfn(&self, omega: &[f64]) -> Result<Complex64> {
        Ok(self.law()?.charfn(omega))
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let law = self.law()?;
        let mut out = vec![0.0; law.dimension()];
        law.sample(rng, &mut out);
        Ok(out)
    }
}

impl PartialEq for JumpDistribution {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (JumpDistribution::None, JumpDistribution::None) => true,
            (JumpDistribution::Law(a), JumpDistribution::Law(b)) => {
                a.name() == b.name() && a.params() == b.params()
            }
            _ => false,
        }
    }
}

pub fn jump_moments(jump: &JumpDistribution) -> Result<JumpMoments> {
    jump.moments()
}

pub fn jump_charfn(jump: &JumpDistribution, omega: &[f64]) -> Result<Complex64> {
    jump.charfn(omega)
}

pub fn jump_sample(jump: &JumpDistribution, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    jump.sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub z0: Vec<f64>,
}

impl JumpLaw for PointMass {
    fn name(&self) -> &'static str {
        "point"
    }
    fn dimension(&self) -> usize {
        self.z0.len()
    }
    fn first_moment(&self) -> Vec<f64> {
        self.z0.clone()
    }
    fn coordinate_second_moments(&self) -> Vec<f64> {
        self.z0.iter().map(|z| z * z).collect()
    }
    fn charfn(&self, omega: &[f64]) -> Complex64 {
        Complex64::new(0.0, -dot(omega, &self.z0)).exp()
    }
    fn sample(&self, _rng: &mut dyn RngCore, out: &mut [f64]) {
        out.copy_from_slice(&self.z0);
    }
    fn params(&self) -> Value {
        json!({ "z0": self.z0 })
    }
}

/// Independent normal coordinates with means `mu` and common standard deviation `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

impl JumpLaw for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn dimension(&self) -> usize {
        self.mu.len()
    }
    fn first_moment(&self) -> Vec<f64> {
        self.mu.clone()
    }
    fn coordinate_second_moments(&self) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        self.mu.iter().map(|m| m * m + s2).collect()
    }
    fn charfn(&self, omega: &[f64]) -> Complex64 {
        let w2 = dot(omega, omega);
        Complex64::new(-0.5 * self.sigma * self.sigma * w2, -dot(omega, &self.mu)).exp()
    }
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.mu) {
            let xi: f64 = rng.sample(StandardNormal);
            *o = m + self.sigma * xi;
        }
    }
    fn params(&self) -> Value {
        json!({ "mu": self.mu, "sigma": self.sigma })
    }
}

/// Independent uniform coordinates on `[lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Uniform {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl JumpLaw for Uniform {
    fn name(&self) -> &'static str {
        "uniform"
    }
    fn dimension(&self) -> usize {
        self.lo.len()
    }
    fn first_moment(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
    fn coordinate_second_moments(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (l * l + l * h + h * h) / 3.0)
            .collect()
    }
    fn charfn(&self, omega: &[f64]) -> Complex64 {
        let mut acc = Complex64::new(1.0, 0.0);
        for ((w, l), h) in omega.iter().zip(&self.lo).zip(&self.hi) {
            let centre = 0.5 * (l + h);
            let half = 0.5 * (h - l) * w;
            let sinc = if half == 0.0 { 1.0 } else { half.sin() / half };
            acc *= Complex64::new(0.0, -w * centre).exp() * sinc;
        }
        acc
    }
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for ((o, l), h) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            let u: f64 = rng.random();
            *o = l + (h - l) * u;
        }
    }
    fn params(&self) -> Value {
        json!({ "lo": self.lo, "hi": self.hi })
    }
}

/// Independent one-sided exponential coordinates with a common rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Exponential {
    pub rate: f64,
    pub dimension: usize,
}

impl JumpLaw for Exponential {
    fn name(&self) -> &'static str {
        "exponential"
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn first_moment(&self) -> Vec<f64> {
        vec![1.0 / self.rate; self.dimension]
    }
    fn coordinate_second_moments(&self) -> Vec<f64> {
        vec![2.0 / (self.rate * self.rate); self.dimension]
    }
    fn charfn(&self, omega: &[f64]) -> Complex64 {
        omega.iter().fold(Complex64::new(1.0, 0.0), |acc, &w| {
            acc * (self.rate / Complex64::new(self.rate, w))
        })
    }
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for o in out.iter_mut() {
            let e: f64 = rng.sample(Exp1);
            *o = e / self.rate;
        }
    }
    fn params(&self) -> Value {
        json!({ "rate": self.rate })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds a jump law from its `params` object for a given state dimension.
pub trait JumpFactory: Send + Sync {
    fn build(&self, params: &Value, dimension: usize) -> Result<JumpDistribution>;
}

impl<F> JumpFactory for F
where
    F: Fn(&Value, usize) -> Result<JumpDistribution> + Send + Sync,
{
    fn build(&self, params: &Value, dimension: usize) -> Result<JumpDistribution> {
        self(params, dimension)
    }
}

fn parse_params<T: for<'de> Deserialize<'de>>(kind: &str, params: &Value) -> Result<T> {
    T::deserialize(params).map_err(|e| Error::Schema(format!("jump.params ({kind}): {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointParams {
    z0: NumOrVec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianParams {
    mu: NumOrVec,
    sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UniformParams {
    lo: NumOrVec,
    hi: NumOrVec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExponentialParams {
    rate: f64,
}

fn build_none(params: &Value, _n: usize) -> Result<JumpDistribution> {
    match params {
        Value::Null => Ok(JumpDistribution::None),
        Value::Object(m) if m.is_empty() => Ok(JumpDistribution::None),
        _ => Err(Error::Schema("jump.params must be empty for type \"none\"".into())),
    }
}

fn build_point(params: &Value, n: usize) -> Result<JumpDistribution> {
    let p: PointParams = parse_params("point", params)?;
    let z0 = p.z0.resolve(n, "jump.params.z0")?;
    Ok(JumpDistribution::Law(Arc::new(PointMass { z0 })))
}

fn build_gaussian(params: &Value, n: usize) -> Result<JumpDistribution> {
    let p: GaussianParams = parse_params("gaussian", params)?;
    let mu = p.mu.resolve(n, "jump.params.mu")?;
    if !(p.sigma > 0.0 && p.sigma.is_finite()) {
        return Err(Error::Invalid("jump.params.sigma must be > 0".into()));
    }
    Ok(JumpDistribution::Law(Arc::new(Gaussian { mu, sigma: p.sigma })))
}

fn build_uniform(params: &Value, n: usize) -> Result<JumpDistribution> {
    let p: UniformParams = parse_params("uniform", params)?;
    let lo = p.lo.resolve(n, "jump.params.lo")?;
    let hi = p.hi.resolve(n, "jump.params.hi")?;
    if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
        return Err(Error::Invalid("uniform jump law requires lo < hi componentwise".into()));
    }
    Ok(JumpDistribution::Law(Arc::new(Uniform { lo, hi })))
}

fn build_exponential(params: &Value, n: usize) -> Result<JumpDistribution> {
    let p: ExponentialParams = parse_params("exponential", params)?;
    if !(p.rate > 0.0 && p.rate.is_finite()) {
        return Err(Error::Invalid("jump.params.rate must be > 0".into()));
    }
    Ok(JumpDistribution::Law(Arc::new(Exponential {
        rate: p.rate,
        dimension: n,
    })))
}

/// Registry holding the built-in laws: none, point, gaussian, uniform, exponential.
pub fn default_jump_registry() -> &'static Registry<dyn JumpFactory> {
    static REGISTRY: OnceLock<Registry<dyn JumpFactory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn JumpFactory> = Registry::new();
        r.register("none", Arc::new(build_none));
        r.register("point", Arc::new(build_point));
        r.register("gaussian", Arc::new(build_gaussian));
        r.register("uniform", Arc::new(build_uniform));
        r.register("exponential", Arc::new(build_exponential));
        r
    })
}

pub fn build_jump(kind: &str, params: &Value, dimension: usize) -> Result<JumpDistribution> {
    let registry = default_jump_registry();
    let factory = registry.get(kind).ok_or_else(|| {
        Error::Schema(format!(
            "jump.type: unknown law \"{kind}\", expected one of {:?}",
            registry.names()
        ))
    })?;
    factory.build(params, dimension)
}
