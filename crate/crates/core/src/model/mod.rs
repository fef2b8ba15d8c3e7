//! Problem data: scenario, cost coefficients, and jump laws.

pub mod coeff;
pub mod jump;
pub mod scenario;

pub use coeff::Coefficient;
pub use jump::{
    build_jump, default_jump_registry, jump_charfn, jump_moments, jump_sample, JumpDistribution,
    JumpFactory, JumpLaw, JumpMoments,
};
pub use scenario::{
    parse_scenario, scenario_from_value, CostCoefficients, DriftCoefficient, InitialKind,
    InitialLaw, MeanFieldCoupling, ScenarioSpec, TerminalCost,
};
