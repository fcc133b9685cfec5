//! Forward sweep of the state system along characteristics.
//!
//! Each step transports interior nodes with the exact survival ratio of the
//! cell, adds the masked control source, evaluates M at the new level and
//! closes the nonlocal birth condition:
//!
//! ```text
//! m[i][n+1] = s_m[i] m[i-1][n] + h chi_m[i] v_m[i][n+1]      i = 1..=Na
//! M[n+1]    = sum_i w_i lambda_i m[i][n+1]
//! N[n+1]    = sum_i w_i beta(a_i, P[n+1]) f[i][n+1]
//! m[0][n+1] = (1 - gamma) N[n+1],  f[0][n+1] = gamma N[n+1]
//! ```
//!
//! where P is M itself (nonlinear) or a supplied trace (frozen).

use crate::error::{Error, Result};
use crate::grid::{CharGrid, Field2D};
use crate::system::DiscreteSystem;

/// How the fertility argument is obtained.
#[derive(Debug, Clone, Copy)]
pub enum Coupling<'a> {
    /// beta is evaluated at the same-level M(t) of the solution.
    Nonlinear,
    /// beta is evaluated at a given trace p(t_n), one value per time node.
    Frozen(&'a [f64]),
}

/// Male and female control fields. Values at masked-out nodes and at time
/// level 0 are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    pub male: Field2D,
    pub female: Field2D,
}

impl ControlPair {
    pub fn zeros(grid: &CharGrid) -> Self {
        Self {
            male: Field2D::zeros(grid),
            female: Field2D::zeros(grid),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateSolution {
    pub m: Field2D,
    pub f: Field2D,
    /// M(t_n) = int lambda m da.
    pub m_trace: Vec<f64>,
    /// N(t_n) = int beta f da.
    pub n_trace: Vec<f64>,
    /// Fertility argument actually used at each level.
    pub p_trace: Vec<f64>,
    pub frozen: bool,
}

impl StateSolution {
    pub fn terminal_m(&self) -> &[f64] {
        self.m.level(self.m.nt())
    }

    pub fn terminal_f(&self) -> &[f64] {
        self.f.level(self.f.nt())
    }
}

/// Trapezoid integral of lambda m over one level.
pub fn compute_m(sys: &DiscreteSystem, slice: &[f64]) -> Result<f64> {
    if slice.len() != sys.grid.age_nodes() {
        return Err(Error::dim("age slice", sys.grid.age_nodes(), slice.len()));
    }
    Ok(weighted_sum(&sys.weights, &sys.lambda, slice))
}

fn weighted_sum(w: &[f64], c: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(c).zip(x).map(|((w, c), x)| w * c * x).sum()
}

fn check_dims(sys: &DiscreteSystem, controls: &ControlPair, m0: &[f64], f0: &[f64]) -> Result<()> {
    let g = &sys.grid;
    if m0.len() != g.age_nodes() {
        return Err(Error::dim("m0", g.age_nodes(), m0.len()));
    }
    if f0.len() != g.age_nodes() {
        return Err(Error::dim("f0", g.age_nodes(), f0.len()));
    }
    for field in [&controls.male, &controls.female] {
        if !field.matches(g) {
            return Err(Error::dim(
                "control field",
                g.age_nodes() * g.time_nodes(),
                (field.na() + 1) * (field.nt() + 1),
            ));
        }
    }
    Ok(())
}

pub fn solve_forward(
    sys: &DiscreteSystem,
    controls: &ControlPair,
    m0: &[f64],
    f0: &[f64],
    coupling: Coupling<'_>,
) -> Result<StateSolution> {
    check_dims(sys, controls, m0, f0)?;
    let g = sys.grid;
    let (na, nt, h) = (g.na, g.nt, g.h);
    if let Coupling::Frozen(p) = coupling {
        if p.len() != g.time_nodes() {
            return Err(Error::dim("frozen p trace", g.time_nodes(), p.len()));
        }
    }
    let gamma = sys.gamma;
    let mut m = Field2D::zeros(&g);
    let mut f = Field2D::zeros(&g);
    m.level_mut(0).copy_from_slice(m0);
    f.level_mut(0).copy_from_slice(f0);
    let mut m_trace = vec![0.0; nt + 1];
    let mut n_trace = vec![0.0; nt + 1];
    let mut p_trace = vec![0.0; nt + 1];
    let mut beta = vec![0.0; na + 1];

    m_trace[0] = compute_m(sys, m0)?;
    p_trace[0] = match coupling {
        Coupling::Nonlinear => m_trace[0],
        Coupling::Frozen(p) => p[0],
    };
    sys.beta_level(p_trace[0], &mut beta);
    n_trace[0] = weighted_sum(&sys.weights, &beta, f0);

    let mut m_new = vec![0.0; na + 1];
    let mut f_new = vec![0.0; na + 1];
    for n in 0..nt {
        {
            let (m_old, f_old) = (m.level(n), f.level(n));
            let (vm, vf) = (controls.male.level(n + 1), controls.female.level(n + 1));
            for i in 1..=na {
                m_new[i] = sys.surv_m[i] * m_old[i - 1] + h * sys.male_mask[i] * vm[i];
                f_new[i] = sys.surv_f[i] * f_old[i - 1] + h * sys.female_mask[i] * vf[i];
            }
        }
        m_new[0] = 0.0;
        f_new[0] = 0.0;

        let mut births = |p: f64, f_new: &[f64]| -> Result<f64> {
            sys.beta_level(p, &mut beta);
            let interior: f64 = (1..=na).map(|i| sys.weights[i] * beta[i] * f_new[i]).sum();
            Ok(sys.birth_closure(beta[0], n + 1)? * interior)
        };

        let (p, births_now) = match coupling {
            Coupling::Frozen(trace) => {
                let p = trace[n + 1];
                (p, births(p, &f_new)?)
            }
            Coupling::Nonlinear => {
                // lambda(0) = 0 makes M independent of the boundary value;
                // otherwise one extra sweep through the boundary is made.
                let p0 = weighted_sum(&sys.weights, &sys.lambda, &m_new);
                let b0 = births(p0, &f_new)?;
                if sys.lambda[0] != 0.0 {
                    let p1 = p0 + sys.weights[0] * sys.lambda[0] * (1.0 - gamma) * b0;
                    (p1, births(p1, &f_new)?)
                } else {
                    (p0, b0)
                }
            }
        };
        m_new[0] = (1.0 - gamma) * births_now;
        f_new[0] = gamma * births_now;

        if !births_now.is_finite()
            || m_new.iter().chain(f_new.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::Numerical {
                step: n + 1,
                message: "non-finite state value".into(),
            });
        }
        m.level_mut(n + 1).copy_from_slice(&m_new);
        f.level_mut(n + 1).copy_from_slice(&f_new);
        m_trace[n + 1] = weighted_sum(&sys.weights, &sys.lambda, &m_new);
        n_trace[n + 1] = births_now;
        p_trace[n + 1] = p;
    }

    Ok(StateSolution {
        m,
        f,
        m_trace,
        n_trace,
        p_trace,
        frozen: matches!(coupling, Coupling::Frozen(_)),
    })
}
