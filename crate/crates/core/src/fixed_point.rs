//! Outer loops on the fertility argument.
//!
//! `iterate_to_fixed_point` runs damped Picard iteration on the map that
//! sends a trace p to the M-trace of the controlled frozen solve.
//! `contraction_test` samples the well-posedness map p -> m(p) in the
//! exponentially weighted metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    minimize_penalty, synthesize_null_control, ControlResult, EpsSchedule, FrozenProblem,
    PenaltyProblem, StageRecord,
};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ControlPair, Coupling, StateSolution};
use crate::grid::Field2D;
use crate::model::{probe_lipschitz, DemographicModel, Fertility};
use crate::report::{push_flag, Flag};
use crate::system::DiscreteSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer_iters: usize,
}

fn default_omega() -> f64 {
    0.5
}

fn default_fp_tol() -> f64 {
    1e-6
}

fn default_max_outer() -> usize {
    100
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            omega: default_omega(),
            fp_tol: default_fp_tol(),
            max_outer_iters: default_max_outer(),
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::config("fixed_point.omega", format!("must lie in (0, 1], got {}", self.omega)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::config("fixed_point.fp_tol", "must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::config("fixed_point.max_outer_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// L2(0, T) norm of a time trace (trapezoid rule).
pub fn trace_l2(sys: &DiscreteSystem, x: &[f64]) -> f64 {
    sys.grid
        .time_weights()
        .iter()
        .zip(x)
        .map(|(w, v)| w * v * v)
        .sum::<f64>()
        .sqrt()
}

/// Discrete L2 norm of the forward difference quotient of a trace.
pub fn trace_derivative_l2(sys: &DiscreteSystem, x: &[f64]) -> f64 {
    let h = sys.h();
    (x.windows(2).map(|w| ((w[1] - w[0]) / h).powi(2)).sum::<f64>() * h).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointIter {
    pub iteration: usize,
    pub delta_l2: f64,
    pub delta_sup: f64,
    /// delta_l2 of this iteration over that of the previous one.
    pub delta_ratio: Option<f64>,
    pub y_sup: f64,
    pub y_dot_l2: f64,
    pub terminal_m_norm: f64,
    pub terminal_f_norm: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct FixedPointState {
    pub p: Vec<f64>,
    pub y: Vec<f64>,
    pub history: Vec<FixedPointIter>,
    pub omega: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FixedPointOutcome {
    pub state: FixedPointState,
    /// Controlled frozen solve of the last iteration.
    pub control: ControlResult,
    /// Schedule run on the initial trace that fixed epsilon and theta.
    pub stages: Vec<StageRecord>,
    /// Nonlinear solve driven by the final controls.
    pub nonlinear: StateSolution,
    pub final_m_norm: f64,
    pub final_f_norm: f64,
    pub flags: Vec<Flag>,
}

/// Y = M-trace of the controlled frozen solve on `p`.
pub fn lambda_map(
    problem: &PenaltyProblem,
    sys: &DiscreteSystem,
    p: &[f64],
    m0: &[f64],
    f0: &[f64],
) -> Result<(Vec<f64>, ControlResult)> {
    let res = minimize_penalty(problem, &FrozenProblem::new(sys, p, m0, f0))?;
    Ok((res.state.m_trace.clone(), res))
}

fn terminal_norms(sys: &DiscreteSystem, st: &StateSolution, male_only: bool) -> (f64, f64) {
    let m = if male_only {
        sys.male_terminal_norm(st.terminal_m())
    } else {
        sys.state_norm(st.terminal_m())
    };
    (m, sys.state_norm(st.terminal_f()))
}

/// Damped Picard iteration from the uncontrolled M-trace. The penalties are
/// those of the first schedule stage that meets kappa on the initial trace
/// (the last stage if none does) and stay fixed during the iteration.
pub fn iterate_to_fixed_point(
    problem: &PenaltyProblem,
    schedule: &EpsSchedule,
    theta0: f64,
    cfg: &FixedPointConfig,
    sys: &DiscreteSystem,
    m0: &[f64],
    f0: &[f64],
) -> Result<FixedPointOutcome> {
    cfg.validate()?;
    let male_only = sys.mode == crate::model::ControlMode::MaleOnly;
    let free = solve_forward(sys, &ControlPair::zeros(&sys.grid), m0, f0, Coupling::Nonlinear)?;
    let mut p = free.m_trace.clone();

    let synth = synthesize_null_control(problem, schedule, theta0, &FrozenProblem::new(sys, &p, m0, f0))?;
    let fixed = problem.with_penalties(synth.result.epsilon, synth.result.theta);
    let mut flags = Vec::new();

    let mut history: Vec<FixedPointIter> = Vec::new();
    let mut converged = false;
    let mut last = None;
    let mut y = Vec::new();
    for k in 1..=cfg.max_outer_iters {
        let (yk, res) = lambda_map(&fixed, sys, &p, m0, f0)?;
        let next: Vec<f64> = p
            .iter()
            .zip(&yk)
            .map(|(a, b)| (1.0 - cfg.omega) * a + cfg.omega * b)
            .collect();
        let diff: Vec<f64> = next.iter().zip(&p).map(|(a, b)| a - b).collect();
        let delta_l2 = trace_l2(sys, &diff);
        let delta_sup = diff.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let delta_ratio = history.last().map(|h| {
            if h.delta_l2 > 0.0 {
                delta_l2 / h.delta_l2
            } else {
                0.0
            }
        });
        history.push(FixedPointIter {
            iteration: k,
            delta_l2,
            delta_sup,
            delta_ratio,
            y_sup: yk.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            y_dot_l2: trace_derivative_l2(sys, &yk),
            terminal_m_norm: res.terminal_m_norm,
            terminal_f_norm: res.terminal_f_norm,
            cg_iterations: res.iterations,
        });
        for &f in &res.flags {
            push_flag(&mut flags, f);
        }
        let p_norm = trace_l2(sys, &p);
        p = next;
        y = yk;
        last = Some(res);
        if delta_l2 <= cfg.fp_tol * p_norm {
            converged = true;
            break;
        }
    }
    if !converged {
        push_flag(&mut flags, Flag::FixedPointNotReached);
    }
    let control = last.expect("at least one outer iteration");
    let nonlinear = solve_forward(sys, &control.controls, m0, f0, Coupling::Nonlinear)?;
    let (final_m_norm, final_f_norm) = terminal_norms(sys, &nonlinear, male_only);
    let kappa_ok = match sys.mode {
        crate::model::ControlMode::Both => final_m_norm <= problem.kappa && final_f_norm <= problem.kappa,
        crate::model::ControlMode::MaleOnly => final_m_norm <= problem.kappa,
        crate::model::ControlMode::FemaleOnly => final_f_norm <= problem.kappa,
    };
    if !kappa_ok {
        push_flag(&mut flags, Flag::TargetNotReached);
    }
    Ok(FixedPointOutcome {
        state: FixedPointState {
            p,
            y,
            history,
            omega: cfg.omega,
            converged,
        },
        control,
        stages: synth.stages,
        nonlinear,
        final_m_norm,
        final_f_norm,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Upper bound of the uniform nodal values of the random fields.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_trials() -> usize {
    50
}

fn default_amplitude() -> f64 {
    2.0
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            amplitude: default_amplitude(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub sigma_hat: f64,
    pub lipschitz: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Pairs skipped because the two inputs coincided.
    pub skipped: usize,
    pub bound: f64,
    pub contracts: bool,
}

/// sup of |g| over `samples + 1` equispaced points of [lo, hi].
fn sampled_sup(g: impl Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> f64 {
    (0..=samples)
        .map(|k| g(lo + (hi - lo) * k as f64 / samples as f64).abs())
        .fold(0.0, f64::max)
}

/// Weighted distance sum_n w_n e^{-2 sigma t_n} ||x(t_n) - y(t_n)||^2.
fn weighted_distance(sys: &DiscreteSystem, sigma: f64, x: &Field2D, y: &Field2D) -> f64 {
    let tw = sys.grid.time_weights();
    (0..=sys.nt())
        .map(|n| {
            let d: Vec<f64> = x.level(n).iter().zip(y.level(n)).map(|(a, b)| a - b).collect();
            tw[n] * (-2.0 * sigma * sys.grid.time(n)).exp() * sys.state_dot(&d, &d)
        })
        .sum::<f64>()
        .sqrt()
}

/// Samples d(Phi p, Phi q) / d(p, q) for random nonnegative male fields
/// p, q, where Phi p is the male density of the uncontrolled solve whose
/// fertility argument is int lambda p da.
pub fn contraction_test(
    model: &DemographicModel,
    sys: &DiscreteSystem,
    m0: &[f64],
    f0: &[f64],
    cfg: &ContractionConfig,
    seed: u64,
) -> Result<ContractionReport> {
    let (profile, response, lipschitz) = match &model.fertility {
        Fertility::Separable {
            age_profile,
            response,
            lipschitz,
        } => (age_profile, response, *lipschitz),
        Fertility::General(_) => {
            return Err(Error::config(
                "model.fertility",
                "contraction test needs separable fertility beta(a, p) = beta1(a) beta2(p) (H5)",
            ))
        }
    };
    if cfg.trials == 0 || !(cfg.amplitude > 0.0) {
        return Err(Error::config("contraction", "trials and amplitude must be positive"));
    }
    let a = model.max_age;
    let l = lipschitz.unwrap_or_else(|| probe_lipschitz(response, model.p_probe_max, 4096));
    let lam = sampled_sup(|x| model.lambda.eval(x), 0.0, a, 4096);
    let b1 = sampled_sup(|x| profile.eval(x), 0.0, a, 4096);
    let b2 = sampled_sup(|x| response.eval(x), 0.0, model.p_probe_max, 4096);
    let sigma_hat = (2.0 * l * l * a * lam * lam).max(2.0 * b1 * b1 * b2 * b2 * a);

    let zero = ControlPair::zeros(&sys.grid);
    let phi = |p: &Field2D| -> Result<Field2D> {
        let trace: Vec<f64> = (0..=sys.nt())
            .map(|n| crate::forward::compute_m(sys, p.level(n)))
            .collect::<Result<_>>()?;
        Ok(solve_forward(sys, &zero, m0, f0, Coupling::Frozen(&trace))?.m)
    };

    let outcomes: Vec<Option<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Option<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let len = sys.grid.age_nodes() * sys.grid.time_nodes();
            let field = |rng: &mut ChaCha8Rng| {
                let scale = rng.random_range(0.0..cfg.amplitude);
                let values = (0..len).map(|_| rng.random_range(0.0..1.0) * scale).collect();
                Field2D::from_values(&sys.grid, values)
            };
            let p = field(&mut rng)?;
            let q = field(&mut rng)?;
            let d_in = weighted_distance(sys, sigma_hat, &p, &q);
            if d_in == 0.0 {
                return Ok(None);
            }
            let d_out = weighted_distance(sys, sigma_hat, &phi(&p)?, &phi(&q)?);
            Ok(Some(d_out / d_in))
        })
        .collect::<Result<_>>()?;

    let skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let ratios: Vec<f64> = outcomes.into_iter().flatten().collect();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let bound = std::f64::consts::FRAC_1_SQRT_2 + 0.1;
    Ok(ContractionReport {
        sigma_hat,
        lipschitz: l,
        contracts: max_ratio <= bound,
        ratios,
        max_ratio,
        skipped,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CharGrid;
    use crate::model::{ControlGeometry, ControlMode, RateFn};

    fn model(beta_scale: f64) -> DemographicModel {
        DemographicModel::new(
            1.0,
            RateFn::expr("0.2 + 0.3 * a").unwrap(),
            RateFn::expr("0.2 + 0.3 * a").unwrap(),
            Fertility::Separable {
                age_profile: RateFn::expr(&format!("{beta_scale} * max(0, a - 0.15)^3 * (1 - a)")).unwrap(),
                response: RateFn::expr("p / (1 + p)").unwrap(),
                lipschitz: Some(1.0),
            },
            RateFn::expr("4 * a * (1 - a)").unwrap(),
            0.5,
            0.15,
        )
    }

    fn system(model: &DemographicModel, h: f64) -> DiscreteSystem {
        let geom = ControlGeometry {
            a1: 0.2,
            a2: 0.9,
            b1: 0.1,
            b2: 0.95,
            horizon: 0.35,
            rho: 0.0,
            mode: ControlMode::Both,
        };
        DiscreteSystem::new(model, &geom, CharGrid::build(1.0, 0.35, h).unwrap()).unwrap()
    }

    fn problem() -> PenaltyProblem {
        PenaltyProblem::new(1e-2, 1e-2, 1e-3, ControlMode::Both)
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let md = model(20.0);
        let sys = system(&md, 0.05);
        let z = vec![0.0; sys.na() + 1];
        let out = iterate_to_fixed_point(
            &problem(),
            &EpsSchedule::default(),
            1e-2,
            &FixedPointConfig::default(),
            &sys,
            &z,
            &z,
        )
        .unwrap();
        assert!(out.state.converged);
        assert_eq!(out.state.history.len(), 1);
        assert!(out.state.p.iter().all(|v| *v == 0.0));
        let (y, _) = lambda_map(&problem(), &sys, &vec![3.0; sys.nt() + 1], &z, &z).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_lambda_maps_to_zero() {
        let mut md = model(20.0);
        md.lambda = RateFn::constant(0.0);
        let sys = system(&md, 0.05);
        let m0 = sys.grid.sample(|a| 1.0 - a);
        let (y, _) = lambda_map(&problem(), &sys, &vec![1.5; sys.nt() + 1], &m0, &m0).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn damped_iteration_converges_and_is_consistent() {
        let md = model(20.0);
        let sys = system(&md, 0.025);
        let m0 = sys.grid.sample(|a| 1.0 - a);
        let cfg = FixedPointConfig::default();
        let out = iterate_to_fixed_point(&problem(), &EpsSchedule::default(), 1e-2, &cfg, &sys, &m0, &m0).unwrap();
        assert!(out.state.converged, "{:?}", out.state.history);
        for it in &out.state.history {
            if let Some(r) = it.delta_ratio {
                assert!(r < 1.0, "{:?}", out.state.history);
            }
        }
        let p_norm = trace_l2(&sys, &out.state.p);
        let diff: Vec<f64> = out.state.p.iter().zip(&out.nonlinear.m_trace).map(|(a, b)| a - b).collect();
        assert!(trace_l2(&sys, &diff) <= 2.0 * cfg.fp_tol * p_norm + 1e-12);
    }

    #[test]
    fn trace_norms() {
        let md = model(20.0);
        let sys = system(&md, 0.05);
        let ones = vec![1.0; sys.nt() + 1];
        assert!((trace_l2(&sys, &ones) - 0.35_f64.sqrt()).abs() < 1e-12);
        assert_eq!(trace_derivative_l2(&sys, &ones), 0.0);
        let lin: Vec<f64> = (0..=sys.nt()).map(|n| 2.0 * sys.grid.time(n)).collect();
        assert!((trace_derivative_l2(&sys, &lin) - 2.0 * 0.35_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contraction_requires_separable_fertility() {
        let mut md = model(20.0);
        md.fertility = Fertility::General(crate::expr::Expr::parse("a * p").unwrap());
        let sys = system(&md, 0.05);
        let z = vec![0.0; sys.na() + 1];
        let err = contraction_test(&md, &sys, &z, &z, &ContractionConfig::default(), 0);
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn infertile_map_is_constant() {
        let mut md = model(20.0);
        md.fertility = Fertility::zero();
        let sys = system(&md, 0.05);
        let m0 = sys.grid.sample(|a| 1.0 - a);
        let rep = contraction_test(&md, &sys, &m0, &m0, &ContractionConfig { trials: 8, amplitude: 2.0 }, 3).unwrap();
        assert!(rep.ratios.iter().all(|r| *r == 0.0));
        assert!(rep.contracts);
    }

    #[test]
    fn contraction_is_seeded() {
        let md = model(20.0);
        let sys = system(&md, 0.05);
        let m0 = sys.grid.sample(|a| 1.0 - a);
        let cfg = ContractionConfig { trials: 6, amplitude: 2.0 };
        let a = contraction_test(&md, &sys, &m0, &m0, &cfg, 9).unwrap();
        let b = contraction_test(&md, &sys, &m0, &m0, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.contracts, "{a:?}");
    }
}
