//! Penalized control problems for a frozen fertility trace.
//!
//! The unknown is the control pair itself. With B the control-to-terminal
//! map and x0 the uncontrolled terminal state,
//!
//! ```text
//! J(v) = 1/2 <v, v>_c + 1/2 <Bv + x0, P (Bv + x0)>
//! ```
//!
//! where P weighs m(T) by 1/epsilon (on (rho, A) in male-only mode) and
//! f(T) by 1/theta. The gradient in the control inner product is v minus
//! the adjoint restricted to the control windows, and the Hessian is the
//! identity plus a positive semidefinite term, so plain CG is used.

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointMode};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ControlPair, Coupling, StateSolution};
use crate::grid::Field2D;
use crate::model::ControlMode;
use crate::report::{push_flag, Flag};
use crate::system::DiscreteSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyProblem {
    pub epsilon: f64,
    /// Female terminal weight; ignored outside BOTH mode.
    pub theta: f64,
    /// Target for the terminal norms.
    pub kappa: f64,
    pub mode: ControlMode,
    #[serde(default = "default_max_cg_iters")]
    pub max_cg_iters: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
}

fn default_max_cg_iters() -> usize {
    1000
}

fn default_cg_tol() -> f64 {
    1e-10
}

impl PenaltyProblem {
    pub fn new(epsilon: f64, theta: f64, kappa: f64, mode: ControlMode) -> Self {
        Self {
            epsilon,
            theta,
            kappa,
            mode,
            max_cg_iters: default_max_cg_iters(),
            cg_tol: default_cg_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("penalty.{name}"), format!("must be positive, got {v}")))
            }
        };
        pos("epsilon", self.epsilon)?;
        if self.mode == ControlMode::Both {
            pos("theta", self.theta)?;
        }
        pos("kappa", self.kappa)?;
        pos("cg_tol", self.cg_tol)?;
        if self.max_cg_iters == 0 {
            return Err(Error::config("penalty.max_cg_iters", "must be at least 1"));
        }
        Ok(())
    }

    /// Terminal weights (male, female) multiplying the squared norms.
    pub fn weights(&self) -> (f64, f64) {
        match self.mode {
            ControlMode::Both => (1.0 / self.epsilon, 1.0 / self.theta),
            ControlMode::MaleOnly => (1.0 / self.epsilon, 0.0),
            ControlMode::FemaleOnly => (0.0, 1.0 / self.epsilon),
        }
    }

    pub fn with_penalties(&self, epsilon: f64, theta: f64) -> Self {
        Self {
            epsilon,
            theta,
            ..*self
        }
    }
}

/// Data shared by every evaluation of one frozen problem.
#[derive(Debug, Clone, Copy)]
pub struct FrozenProblem<'a> {
    pub sys: &'a DiscreteSystem,
    pub p: &'a [f64],
    pub m0: &'a [f64],
    pub f0: &'a [f64],
}

impl<'a> FrozenProblem<'a> {
    pub fn new(sys: &'a DiscreteSystem, p: &'a [f64], m0: &'a [f64], f0: &'a [f64]) -> Self {
        Self { sys, p, m0, f0 }
    }

    pub fn forward(&self, controls: &ControlPair) -> Result<StateSolution> {
        solve_forward(self.sys, controls, self.m0, self.f0, Coupling::Frozen(self.p))
    }

    fn zero_data(&self) -> (Vec<f64>, Vec<f64>) {
        let z = vec![0.0; self.sys.na() + 1];
        (z.clone(), z)
    }
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    pub controls: ControlPair,
    pub state: StateSolution,
    /// ||m(T)||, over (rho, A) in male-only mode.
    pub terminal_m_norm: f64,
    pub terminal_f_norm: f64,
    pub j_value: f64,
    /// Relative residual ||r_k|| / ||r_0|| after each CG iteration.
    pub cg_trace: Vec<f64>,
    pub iterations: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub flags: Vec<Flag>,
}

impl ControlResult {
    pub fn v_m(&self) -> &Field2D {
        &self.controls.male
    }

    pub fn v_f(&self) -> &Field2D {
        &self.controls.female
    }
}

fn check_mode(problem: &PenaltyProblem, sys: &DiscreteSystem) -> Result<()> {
    if problem.mode != sys.mode {
        return Err(Error::Consistency(format!(
            "penalty mode {:?} differs from geometry mode {:?}",
            problem.mode, sys.mode
        )));
    }
    Ok(())
}

/// <u, v>_c over levels 1..=Nt with the window masks as weights.
pub fn control_dot(sys: &DiscreteSystem, u: &ControlPair, v: &ControlPair) -> f64 {
    let h2 = sys.h() * sys.h();
    let mut acc = 0.0;
    for k in 1..=sys.nt() {
        for (mask, a, b) in [
            (&sys.male_mask, u.male.level(k), v.male.level(k)),
            (&sys.female_mask, u.female.level(k), v.female.level(k)),
        ] {
            acc += mask.iter().zip(a).zip(b).map(|((c, x), y)| c * x * y).sum::<f64>();
        }
    }
    acc * h2
}

pub fn control_norm(sys: &DiscreteSystem, v: &ControlPair) -> f64 {
    control_dot(sys, v, v).sqrt()
}

/// Zeroes every entry the control inner product does not see.
pub fn restrict_to_support(sys: &DiscreteSystem, v: &mut ControlPair) {
    v.male.level_mut(0).iter_mut().for_each(|x| *x = 0.0);
    v.female.level_mut(0).iter_mut().for_each(|x| *x = 0.0);
    for k in 1..=sys.nt() {
        for (mask, lvl) in [
            (&sys.male_mask, v.male.level_mut(k)),
            (&sys.female_mask, v.female.level_mut(k)),
        ] {
            for (x, c) in lvl.iter_mut().zip(mask.iter()) {
                if *c == 0.0 {
                    *x = 0.0;
                }
            }
        }
    }
}

fn axpy(alpha: f64, x: &ControlPair, y: &mut ControlPair) {
    for (yv, xv) in y.male.values_mut().iter_mut().zip(x.male.values()) {
        *yv += alpha * xv;
    }
    for (yv, xv) in y.female.values_mut().iter_mut().zip(x.female.values()) {
        *yv += alpha * xv;
    }
}

fn scale_add(beta: f64, d: &mut ControlPair, r: &ControlPair) {
    for (dv, rv) in d.male.values_mut().iter_mut().zip(r.male.values()) {
        *dv = rv + beta * *dv;
    }
    for (dv, rv) in d.female.values_mut().iter_mut().zip(r.female.values()) {
        *dv = rv + beta * *dv;
    }
}

fn terminal_norms(sys: &DiscreteSystem, mode: ControlMode, st: &StateSolution) -> (f64, f64) {
    let m = match mode {
        ControlMode::MaleOnly => sys.male_terminal_norm(st.terminal_m()),
        _ => sys.state_norm(st.terminal_m()),
    };
    (m, sys.state_norm(st.terminal_f()))
}

fn j_from_state(
    problem: &PenaltyProblem,
    sys: &DiscreteSystem,
    controls: &ControlPair,
    st: &StateSolution,
) -> f64 {
    let (pm, pf) = problem.weights();
    let mt = sys.male_terminal_norm(st.terminal_m());
    let ft = sys.state_norm(st.terminal_f());
    let control = control_dot(sys, controls, controls);
    0.5 * control + 0.5 * pm * mt * mt + 0.5 * pf * ft * ft
}

pub fn evaluate_j(problem: &PenaltyProblem, fp: &FrozenProblem<'_>, controls: &ControlPair) -> Result<f64> {
    problem.validate()?;
    check_mode(problem, fp.sys)?;
    let st = fp.forward(controls)?;
    Ok(j_from_state(problem, fp.sys, controls, &st))
}

fn gradient_from_state(
    problem: &PenaltyProblem,
    fp: &FrozenProblem<'_>,
    controls: &ControlPair,
    st: &StateSolution,
) -> Result<ControlPair> {
    let sys = fp.sys;
    let (pm, pf) = problem.weights();
    let n_t: Vec<f64> = st
        .terminal_m()
        .iter()
        .zip(&sys.male_tail)
        .map(|(m, w)| -pm * w * m)
        .collect();
    let l_t: Vec<f64> = st.terminal_f().iter().map(|f| -pf * f).collect();
    let mode = match problem.mode {
        ControlMode::Both => AdjointMode::Coupled,
        ControlMode::MaleOnly => AdjointMode::MaleOnly,
        ControlMode::FemaleOnly => AdjointMode::FemaleOnly,
    };
    let adj = solve_adjoint(sys, &n_t, &l_t, fp.p, mode)?;
    let mut g = controls.clone();
    for (gv, q) in g.male.values_mut().iter_mut().zip(adj.n.values()) {
        *gv -= q;
    }
    for (gv, q) in g.female.values_mut().iter_mut().zip(adj.l.values()) {
        *gv -= q;
    }
    restrict_to_support(sys, &mut g);
    Ok(g)
}

/// Gradient of J in the control inner product: (v_m - n, v_f - l) on the
/// windows, zero elsewhere.
pub fn gradient_j(
    problem: &PenaltyProblem,
    fp: &FrozenProblem<'_>,
    controls: &ControlPair,
) -> Result<ControlPair> {
    problem.validate()?;
    check_mode(problem, fp.sys)?;
    let st = fp.forward(controls)?;
    gradient_from_state(problem, fp, controls, &st)
}

/// Conjugate gradients on J starting from zero controls.
pub fn minimize_penalty(problem: &PenaltyProblem, fp: &FrozenProblem<'_>) -> Result<ControlResult> {
    problem.validate()?;
    check_mode(problem, fp.sys)?;
    let sys = fp.sys;
    let mut flags = Vec::new();
    if !sys.geometry.is_admissible(sys.grid.max_age()) {
        push_flag(&mut flags, Flag::NonAdmissible);
    }

    let (z_m, z_f) = fp.zero_data();
    let homogeneous = FrozenProblem::new(sys, fp.p, &z_m, &z_f);
    let hessian = |d: &ControlPair| -> Result<ControlPair> {
        let st = homogeneous.forward(d)?;
        gradient_from_state(problem, &homogeneous, d, &st)
    };

    let mut v = ControlPair::zeros(&sys.grid);
    let st0 = fp.forward(&v)?;
    let mut r = gradient_from_state(problem, fp, &v, &st0)?;
    r.male.values_mut().iter_mut().for_each(|x| *x = -*x);
    r.female.values_mut().iter_mut().for_each(|x| *x = -*x);
    let mut rr = control_dot(sys, &r, &r);
    let r0 = rr.sqrt();
    let mut cg_trace = Vec::new();
    let mut iterations = 0;

    if r0 > 0.0 {
        let mut d = r.clone();
        let mut converged = false;
        while iterations < problem.max_cg_iters {
            let hd = hessian(&d)?;
            let dhd = control_dot(sys, &d, &hd);
            if !(dhd > 0.0) {
                break;
            }
            let alpha = rr / dhd;
            axpy(alpha, &d, &mut v);
            axpy(-alpha, &hd, &mut r);
            let rr_new = control_dot(sys, &r, &r);
            iterations += 1;
            cg_trace.push(rr_new.sqrt() / r0);
            if rr_new.sqrt() <= problem.cg_tol * r0 {
                converged = true;
                break;
            }
            scale_add(rr_new / rr, &mut d, &r);
            rr = rr_new;
        }
        if !converged {
            push_flag(&mut flags, Flag::ConvergenceNotReached);
        }
    }

    let state = fp.forward(&v)?;
    let j_value = j_from_state(problem, sys, &v, &state);
    let (terminal_m_norm, terminal_f_norm) = terminal_norms(sys, problem.mode, &state);
    Ok(ControlResult {
        controls: v,
        state,
        terminal_m_norm,
        terminal_f_norm,
        j_value,
        cg_trace,
        iterations,
        epsilon: problem.epsilon,
        theta: problem.theta,
        flags,
    })
}

/// Geometric penalty schedule: stage k uses epsilon0 / ratio^k and the same
/// factor on theta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsSchedule {
    #[serde(default = "default_eps0")]
    pub epsilon0: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
}

fn default_eps0() -> f64 {
    1e-2
}

fn default_ratio() -> f64 {
    10.0
}

fn default_stages() -> usize {
    4
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self {
            epsilon0: default_eps0(),
            ratio: default_ratio(),
            stages: default_stages(),
        }
    }
}

impl EpsSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0) {
            return Err(Error::config("penalty.schedule.epsilon0", "must be positive"));
        }
        if !(self.ratio > 1.0) {
            return Err(Error::config("penalty.schedule.ratio", "must exceed 1"));
        }
        if self.stages == 0 {
            return Err(Error::config("penalty.schedule.stages", "must be at least 1"));
        }
        Ok(())
    }

    /// (epsilon, theta) of each stage; theta starts at `theta0`.
    pub fn penalties(&self, theta0: f64) -> Vec<(f64, f64)> {
        (0..self.stages)
            .map(|k| {
                let f = self.ratio.powi(k as i32);
                (self.epsilon0 / f, theta0 / f)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub epsilon: f64,
    pub theta: f64,
    pub terminal_m_norm: f64,
    pub terminal_f_norm: f64,
    pub j_value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub result: ControlResult,
    pub stages: Vec<StageRecord>,
    /// Index of the first stage meeting kappa; `None` when the uncontrolled
    /// state already does, or when the schedule was exhausted.
    pub success_stage: Option<usize>,
    pub reached: bool,
}

fn meets(mode: ControlMode, kappa: f64, m: f64, f: f64) -> bool {
    match mode {
        ControlMode::Both => m <= kappa && f <= kappa,
        ControlMode::MaleOnly => m <= kappa,
        ControlMode::FemaleOnly => f <= kappa,
    }
}

/// Runs the penalty schedule until the mode's terminal norms are at most
/// `problem.kappa`. The epsilon/theta of `problem` are replaced by the
/// schedule; `theta0` is the theta of the first stage.
pub fn synthesize_null_control(
    problem: &PenaltyProblem,
    schedule: &EpsSchedule,
    theta0: f64,
    fp: &FrozenProblem<'_>,
) -> Result<Synthesis> {
    problem.validate()?;
    schedule.validate()?;
    check_mode(problem, fp.sys)?;
    let sys = fp.sys;

    let zero = ControlPair::zeros(&sys.grid);
    let free = fp.forward(&zero)?;
    let (m_free, f_free) = terminal_norms(sys, problem.mode, &free);
    if meets(problem.mode, problem.kappa, m_free, f_free) {
        let (eps, theta) = schedule.penalties(theta0)[0];
        let staged = problem.with_penalties(eps, theta);
        let mut flags = Vec::new();
        if !sys.geometry.is_admissible(sys.grid.max_age()) {
            push_flag(&mut flags, Flag::NonAdmissible);
        }
        let result = ControlResult {
            j_value: j_from_state(&staged, sys, &zero, &free),
            controls: zero,
            state: free,
            terminal_m_norm: m_free,
            terminal_f_norm: f_free,
            cg_trace: Vec::new(),
            iterations: 0,
            epsilon: eps,
            theta,
            flags,
        };
        return Ok(Synthesis {
            result,
            stages: Vec::new(),
            success_stage: None,
            reached: true,
        });
    }

    let mut stages = Vec::new();
    let mut last = None;
    for (k, (eps, theta)) in schedule.penalties(theta0).into_iter().enumerate() {
        let res = minimize_penalty(&problem.with_penalties(eps, theta), fp)?;
        stages.push(StageRecord {
            epsilon: eps,
            theta,
            terminal_m_norm: res.terminal_m_norm,
            terminal_f_norm: res.terminal_f_norm,
            j_value: res.j_value,
            iterations: res.iterations,
        });
        if meets(problem.mode, problem.kappa, res.terminal_m_norm, res.terminal_f_norm) {
            return Ok(Synthesis {
                result: res,
                stages,
                success_stage: Some(k),
                reached: true,
            });
        }
        last = Some(res);
    }
    let mut result = last.expect("schedule has at least one stage");
    push_flag(&mut result.flags, Flag::TargetNotReached);
    Ok(Synthesis {
        result,
        stages,
        success_stage: None,
        reached: false,
    })
}
