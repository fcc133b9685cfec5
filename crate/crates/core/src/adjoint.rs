//! Backward sweep of the adjoint system for a frozen fertility trace.
//!
//! The sweep is the exact transpose of the frozen forward step under the
//! nodal state inner product. One reverse step from level k to k-1:
//!
//! ```text
//! src      = c_k ((1 - gamma) n[0][k] + gamma l[0][k])
//! q_l[i]   = l[i][k] + src w_i beta(a_i, P[k])          i = 1..=Na
//! n[i-1][k-1] = s_m[i] n[i][k],  l[i-1][k-1] = s_f[i] q_l[i]
//! n[Na][k-1] = l[Na][k-1] = 0
//! ```
//!
//! `c_k` is the birth closure factor (1 whenever beta(0) = 0).

use crate::error::{Error, Result};
use crate::forward::{ControlPair, StateSolution};
use crate::grid::Field2D;
use crate::system::DiscreteSystem;

/// Which terminal data enter the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointMode {
    Coupled,
    /// Female terminal data are ignored.
    MaleOnly,
    /// Male terminal data are ignored; n then vanishes identically.
    FemaleOnly,
}

/// Adjoint fields on the grid.
///
/// For levels k >= 1 the female field already contains the birth source of
/// level k, so it is the costate a control injected at level k sees, and
/// `-(l restricted to the window)` is the gradient contribution. Level 0
/// holds the costate paired with the initial state.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub n: Field2D,
    pub l: Field2D,
    /// n(0, t_k) before absorption, the male trace driving births.
    pub n0_trace: Vec<f64>,
    pub l0_trace: Vec<f64>,
    pub p_trace: Vec<f64>,
}

impl AdjointSolution {
    pub fn initial_n(&self) -> &[f64] {
        self.n.level(0)
    }

    pub fn initial_l(&self) -> &[f64] {
        self.l.level(0)
    }
}

pub fn solve_adjoint(
    sys: &DiscreteSystem,
    n_terminal: &[f64],
    l_terminal: &[f64],
    p_trace: &[f64],
    mode: AdjointMode,
) -> Result<AdjointSolution> {
    let g = sys.grid;
    let (na, nt) = (g.na, g.nt);
    if n_terminal.len() != na + 1 {
        return Err(Error::dim("n_T", na + 1, n_terminal.len()));
    }
    if l_terminal.len() != na + 1 {
        return Err(Error::dim("l_T", na + 1, l_terminal.len()));
    }
    if p_trace.len() != nt + 1 {
        return Err(Error::dim("p trace", nt + 1, p_trace.len()));
    }
    if n_terminal.iter().chain(l_terminal).any(|v| !v.is_finite()) {
        return Err(Error::Domain("terminal data must be finite".into()));
    }

    let mut cur_n: Vec<f64> = match mode {
        AdjointMode::FemaleOnly => vec![0.0; na + 1],
        _ => n_terminal.to_vec(),
    };
    let mut cur_l: Vec<f64> = match mode {
        AdjointMode::MaleOnly => vec![0.0; na + 1],
        _ => l_terminal.to_vec(),
    };

    let mut n = Field2D::zeros(&g);
    let mut l = Field2D::zeros(&g);
    let mut n0_trace = vec![0.0; nt + 1];
    let mut l0_trace = vec![0.0; nt + 1];
    let mut beta = vec![0.0; na + 1];
    let gamma = sys.gamma;

    for k in (1..=nt).rev() {
        n0_trace[k] = cur_n[0];
        l0_trace[k] = cur_l[0];
        sys.beta_level(p_trace[k], &mut beta);
        let c = sys.birth_closure(beta[0], k)?;
        let src = c * ((1.0 - gamma) * cur_n[0] + gamma * cur_l[0]);
        for i in 1..=na {
            cur_l[i] += src * sys.weights[i] * beta[i];
        }
        n.level_mut(k).copy_from_slice(&cur_n);
        l.level_mut(k).copy_from_slice(&cur_l);

        for i in 0..na {
            cur_n[i] = sys.surv_m[i + 1] * cur_n[i + 1];
            cur_l[i] = sys.surv_f[i + 1] * cur_l[i + 1];
        }
        cur_n[na] = 0.0;
        cur_l[na] = 0.0;
        if cur_n.iter().chain(&cur_l).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: k - 1,
                message: "non-finite adjoint value".into(),
            });
        }
    }
    n0_trace[0] = cur_n[0];
    l0_trace[0] = cur_l[0];
    n.level_mut(0).copy_from_slice(&cur_n);
    l.level_mut(0).copy_from_slice(&cur_l);

    Ok(AdjointSolution {
        n,
        l,
        n0_trace,
        l0_trace,
        p_trace: p_trace.to_vec(),
    })
}

/// Control pairing sum_{k>=1} sum_i h^2 chi_i v[i][k] q[i][k].
pub fn control_pairing(sys: &DiscreteSystem, mask: &[f64], v: &Field2D, q: &Field2D) -> f64 {
    let h2 = sys.h() * sys.h();
    (1..=sys.nt())
        .map(|k| {
            let (vk, qk) = (v.level(k), q.level(k));
            mask.iter()
                .zip(vk)
                .zip(qk)
                .map(|((c, a), b)| c * a * b)
                .sum::<f64>()
        })
        .sum::<f64>()
        * h2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityCheck {
    /// Terminal pairing minus initial pairing minus control pairing.
    pub residual: f64,
    /// Sum of the absolute values of the individual terms.
    pub scale: f64,
}

impl DualityCheck {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.residual.abs()
        } else {
            self.residual.abs() / self.scale
        }
    }
}

/// Discrete duality identity between a frozen forward solve and the adjoint
/// solve with terminal data `(n_T, l_T)` on the same trace.
pub fn duality_pairing(
    sys: &DiscreteSystem,
    state: &StateSolution,
    adjoint: &AdjointSolution,
    n_terminal: &[f64],
    l_terminal: &[f64],
    controls: &ControlPair,
) -> DualityCheck {
    let terms = [
        sys.state_dot(state.terminal_m(), n_terminal),
        sys.state_dot(state.terminal_f(), l_terminal),
        -sys.state_dot(state.m.level(0), adjoint.initial_n()),
        -sys.state_dot(state.f.level(0), adjoint.initial_l()),
        -control_pairing(sys, &sys.male_mask, &controls.male, &adjoint.n),
        -control_pairing(sys, &sys.female_mask, &controls.female, &adjoint.l),
    ];
    DualityCheck {
        residual: terms.iter().sum(),
        scale: terms.iter().map(|t| t.abs()).sum(),
    }
}
