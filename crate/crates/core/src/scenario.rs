//! JSON scenario files.
//!
//! Only `model` and `geometry` are required; every other section has
//! defaults. Unknown keys are rejected and errors name the JSON path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{EpsSchedule, PenaltyProblem};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fixed_point::{ContractionConfig, FixedPointConfig};
use crate::forward::{solve_forward, ControlPair, Coupling};
use crate::grid::CharGrid;
use crate::model::{
    validate_hypotheses, ControlGeometry, ControlMode, DemographicModel, Fertility, RateFn,
    ValidationReport,
};
use crate::observability::{ObservabilityConfig, ThresholdSweep};
use crate::system::DiscreteSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSpec {
    Constant { value: f64 },
    Table { at: Vec<f64>, values: Vec<f64> },
    Expr { expr: String },
}

impl RateSpec {
    pub fn build(&self, field: &str) -> Result<RateFn> {
        let wrap = |e: Error| Error::config(field, e.to_string());
        match self {
            RateSpec::Constant { value } => Ok(RateFn::constant(*value)),
            RateSpec::Table { at, values } => RateFn::table(at.clone(), values.clone()).map_err(wrap),
            RateSpec::Expr { expr } => RateFn::expr(expr).map_err(wrap),
        }
    }

    fn constant(value: f64) -> Self {
        RateSpec::Constant { value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FertilitySpec {
    /// beta(a, p) = age(a) * response(p)
    Separable {
        age: RateSpec,
        response: RateSpec,
        #[serde(default)]
        lipschitz: Option<f64>,
    },
    /// Expression in `a` and `p`.
    General { expr: String },
}

fn default_last_cell() -> Option<f64> {
    Some(0.0)
}

fn default_quad() -> usize {
    8
}

fn default_probe_max() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub max_age: f64,
    pub mu_m: RateSpec,
    pub mu_f: RateSpec,
    pub fertility: FertilitySpec,
    pub lambda: RateSpec,
    pub gamma: f64,
    pub fertility_onset: f64,
    #[serde(default = "default_last_cell")]
    pub last_cell_survival: Option<f64>,
    #[serde(default = "default_quad")]
    pub quad_refinement: usize,
    #[serde(default = "default_probe_max")]
    pub p_probe_max: f64,
}

fn default_mode() -> ControlMode {
    ControlMode::Both
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub horizon: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_mode")]
    pub mode: ControlMode,
}

fn default_target_h() -> f64 {
    1.0 / 64.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_target_h")]
    pub target_h: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            target_h: default_target_h(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMode {
    /// kappa is the target itself.
    Absolute,
    /// target = kappa * (||m0|| + ||f0||).
    Relative,
}

fn default_epsilon() -> f64 {
    1e-2
}

fn default_kappa() -> f64 {
    1e-3
}

fn default_kappa_mode() -> KappaMode {
    KappaMode::Relative
}

fn default_cg_iters() -> usize {
    1000
}

fn default_cg_tol() -> f64 {
    1e-10
}

fn default_ratio() -> f64 {
    10.0
}

fn default_stages() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    /// First stage of the schedule.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Female weight of the first stage; defaults to `epsilon`.
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_kappa_mode")]
    pub kappa_mode: KappaMode,
    #[serde(default = "default_cg_iters")]
    pub max_cg_iters: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Constant fertility argument for frozen solves; the uncontrolled
    /// M-trace when absent.
    #[serde(default)]
    pub frozen_p: Option<f64>,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            theta: None,
            kappa: default_kappa(),
            kappa_mode: default_kappa_mode(),
            max_cg_iters: default_cg_iters(),
            cg_tol: default_cg_tol(),
            ratio: default_ratio(),
            stages: default_stages(),
            frozen_p: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

fn default_directory() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default)]
    pub verbosity: Verbosity,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            verbosity: Verbosity::Normal,
        }
    }
}

fn one() -> RateSpec {
    RateSpec::constant(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default = "one")]
    pub m0: RateSpec,
    #[serde(default = "one")]
    pub f0: RateSpec,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self { m0: one(), f0: one() }
    }
}

fn zero() -> RateSpec {
    RateSpec::constant(0.0)
}

/// Terminal data for the `adjoint` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointSpec {
    #[serde(default = "one")]
    pub n_terminal: RateSpec,
    #[serde(default = "zero")]
    pub l_terminal: RateSpec,
    /// Constant frozen trace; falls back to `penalty.frozen_p`, then to the
    /// uncontrolled M-trace.
    #[serde(default)]
    pub p: Option<f64>,
}

impl Default for AdjointSpec {
    fn default() -> Self {
        Self {
            n_terminal: one(),
            l_terminal: zero(),
            p: None,
        }
    }
}

fn default_p_values() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservabilitySpec {
    #[serde(default)]
    pub estimator: ObservabilityConfig,
    /// Constant frozen traces used for the p-spread.
    #[serde(default = "default_p_values")]
    pub p_values: Vec<f64>,
    /// Threshold study over (T, a1, a2); when absent only the scenario
    /// geometry is estimated.
    #[serde(default)]
    pub sweep: Option<ThresholdSweep>,
}

impl Default for ObservabilitySpec {
    fn default() -> Self {
        Self {
            estimator: ObservabilityConfig::default(),
            p_values: default_p_values(),
            sweep: None,
        }
    }
}

fn default_epsilons() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}

/// Penalty values for the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSweep {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
}

impl Default for EpsilonSweep {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub adjoint: AdjointSpec,
    #[serde(default)]
    pub observability: ObservabilitySpec,
    #[serde(default)]
    pub contraction: ContractionConfig,
    #[serde(default)]
    pub sweep: EpsilonSweep,
}

/// Everything a command needs, resolved on one grid.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: DemographicModel,
    pub geometry: ControlGeometry,
    pub system: DiscreteSystem,
    pub m0: Vec<f64>,
    pub f0: Vec<f64>,
    /// Penalty problem with the first-stage weights and the resolved target.
    pub penalty: PenaltyProblem,
    pub schedule: EpsSchedule,
    pub theta0: f64,
    pub validation: ValidationReport,
}

impl Setup {
    /// `p` as a constant trace, or the M-trace of the uncontrolled
    /// nonlinear solve.
    pub fn frozen_trace(&self, p: Option<f64>) -> Result<Vec<f64>> {
        match p {
            Some(v) => Ok(vec![v; self.system.grid.time_nodes()]),
            None => Ok(solve_forward(
                &self.system,
                &ControlPair::zeros(&self.system.grid),
                &self.m0,
                &self.f0,
                Coupling::Nonlinear,
            )?
            .m_trace),
        }
    }
}

/// Hypotheses whose failure makes a scenario unusable. The remaining checks
/// (onset, boundedness, integrability, Lipschitz estimate, window nesting)
/// are reported but do not stop a run.
const HARD_CHECKS: &[(&str, &str)] = &[
    ("H1.mu_m_nonnegative", "model.mu_m"),
    ("H1.mu_f_nonnegative", "model.mu_f"),
    ("H2.beta_nonnegative", "model.fertility"),
    ("H4.lambda_nonnegative", "model.lambda"),
    ("gamma_in_unit_interval", "model.gamma"),
    ("geometry.male_window", "geometry"),
    ("geometry.female_window", "geometry"),
    ("geometry.horizon", "geometry.horizon"),
    ("geometry.rho_nonnegative", "geometry.rho"),
];

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    pub fn build_model(&self) -> Result<DemographicModel> {
        let m = &self.model;
        let fertility = match &m.fertility {
            FertilitySpec::Separable {
                age,
                response,
                lipschitz,
            } => Fertility::Separable {
                age_profile: age.build("model.fertility.age")?,
                response: response.build("model.fertility.response")?,
                lipschitz: *lipschitz,
            },
            FertilitySpec::General { expr } => Fertility::General(
                Expr::parse(expr).map_err(|e| Error::config("model.fertility.expr", e.to_string()))?,
            ),
        };
        let mut model = DemographicModel::new(
            m.max_age,
            m.mu_m.build("model.mu_m")?,
            m.mu_f.build("model.mu_f")?,
            fertility,
            m.lambda.build("model.lambda")?,
            m.gamma,
            m.fertility_onset,
        );
        model.last_cell_survival = m.last_cell_survival;
        model.quad_refinement = m.quad_refinement;
        model.p_probe_max = m.p_probe_max;
        Ok(model)
    }

    pub fn build_geometry(&self) -> ControlGeometry {
        let g = &self.geometry;
        ControlGeometry {
            a1: g.a1,
            a2: g.a2,
            b1: g.b1,
            b2: g.b2,
            horizon: g.horizon,
            rho: g.rho,
            mode: g.mode,
        }
    }

    /// Hypothesis report; hard failures become configuration errors.
    pub fn validate(&self) -> Result<ValidationReport> {
        let model = self.build_model()?;
        let report = validate_hypotheses(&model, &self.build_geometry())?;
        for (name, field) in HARD_CHECKS {
            if let Some(c) = report.check(name) {
                if !c.passed {
                    let tag = name.split('.').next().unwrap_or(name);
                    let at = c
                        .witness
                        .as_ref()
                        .map(|w| format!(" (witness a = {}, value = {})", w.a, w.value))
                        .unwrap_or_default();
                    return Err(Error::config(
                        *field,
                        format!("({tag}) {} violated{at}", c.note),
                    ));
                }
            }
        }
        Ok(report)
    }

    /// Resolves the scenario on its grid; `target_h` overrides `grid.target_h`.
    pub fn setup(&self, target_h: Option<f64>) -> Result<Setup> {
        let validation = self.validate()?;
        let model = self.build_model()?;
        let geometry = self.build_geometry();
        let grid = CharGrid::build(model.max_age, geometry.horizon, target_h.unwrap_or(self.grid.target_h))?;
        let system = DiscreteSystem::new(&model, &geometry, grid)?;
        let m0f = self.initial.m0.build("initial.m0")?;
        let f0f = self.initial.f0.build("initial.f0")?;
        let m0 = grid.sample(|a| m0f.eval(a));
        let f0 = grid.sample(|a| f0f.eval(a));
        if m0.iter().chain(&f0).any(|v| !v.is_finite()) {
            return Err(Error::config("initial", "initial data must be finite on the grid"));
        }
        let p = &self.penalty;
        let theta0 = p.theta.unwrap_or(p.epsilon);
        let kappa = match p.kappa_mode {
            KappaMode::Absolute => p.kappa,
            KappaMode::Relative => p.kappa * (system.state_norm(&m0) + system.state_norm(&f0)),
        };
        let mut penalty = PenaltyProblem::new(p.epsilon, theta0, kappa, geometry.mode);
        penalty.max_cg_iters = p.max_cg_iters;
        penalty.cg_tol = p.cg_tol;
        if kappa > 0.0 {
            penalty.validate()?;
        }
        let schedule = EpsSchedule {
            epsilon0: p.epsilon,
            ratio: p.ratio,
            stages: p.stages,
        };
        schedule.validate()?;
        self.fixed_point.validate()?;
        Ok(Setup {
            model,
            geometry,
            system,
            m0,
            f0,
            penalty,
            schedule,
            theta0,
            validation,
        })
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let scenario = Scenario::from_json_str(&text)?;
    scenario.validate()?;
    Ok(scenario)
}
