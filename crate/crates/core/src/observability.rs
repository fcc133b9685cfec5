//! Numerical probes of the observability inequality
//!
//! ```text
//! ||n(., 0)||^2 + ||l(., 0)||^2 <= C_T ( int_Xi n^2 + int_Xi' l^2 )
//! ```
//!
//! for the frozen adjoint system, and the time thresholds of the control
//! geometry.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{control_pairing, solve_adjoint, AdjointMode, AdjointSolution};
use crate::error::{Error, Result};
use crate::grid::CharGrid;
use crate::model::{ControlGeometry, ControlMode, DemographicModel};
use crate::system::DiscreteSystem;

/// Value of an observability quotient. `Unbounded` marks terminal data that
/// the control windows do not see at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quotient {
    Finite(f64),
    Unbounded,
}

impl Quotient {
    pub fn value(self) -> f64 {
        match self {
            Quotient::Finite(v) => v,
            Quotient::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, Quotient::Unbounded)
    }

    fn from_parts(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Quotient::Finite(num / den)
        } else if num > 0.0 {
            Quotient::Unbounded
        } else {
            Quotient::Finite(0.0)
        }
    }
}

fn adjoint_mode(mode: ControlMode) -> AdjointMode {
    match mode {
        ControlMode::Both => AdjointMode::Coupled,
        ControlMode::MaleOnly => AdjointMode::MaleOnly,
        ControlMode::FemaleOnly => AdjointMode::FemaleOnly,
    }
}

fn energies(sys: &DiscreteSystem, adj: &AdjointSolution) -> (f64, f64) {
    let num = sys.state_dot(adj.initial_n(), adj.initial_n())
        + sys.state_dot(adj.initial_l(), adj.initial_l());
    let male = control_pairing(sys, &sys.male_mask, &adj.n, &adj.n);
    let female = control_pairing(sys, &sys.female_mask, &adj.l, &adj.l);
    let den = match sys.mode {
        ControlMode::Both => male + female,
        ControlMode::MaleOnly => male,
        ControlMode::FemaleOnly => female,
    };
    (num, den)
}

/// Initial adjoint energy over the observed energy on the control windows of
/// `sys`. Terminal data the mode ignores (l_T in male-only, n_T in
/// female-only) do not count.
pub fn observability_ratio(
    sys: &DiscreteSystem,
    n_terminal: &[f64],
    l_terminal: &[f64],
    p: &[f64],
) -> Result<Quotient> {
    let used_n = sys.mode != ControlMode::FemaleOnly;
    let used_l = sys.mode != ControlMode::MaleOnly;
    let nonzero = |x: &[f64]| x.iter().any(|v| *v != 0.0);
    if !((used_n && nonzero(n_terminal)) || (used_l && nonzero(l_terminal))) {
        return Err(Error::Domain("terminal data vanish identically".into()));
    }
    let adj = solve_adjoint(sys, n_terminal, l_terminal, p, adjoint_mode(sys.mode))?;
    let (num, den) = energies(sys, &adj);
    Ok(Quotient::from_parts(num, den))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservabilityConfig {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
}

fn default_probes() -> usize {
    64
}

fn default_power_iters() -> usize {
    200
}

impl Default for ObservabilityConfig {
    fn default() -> Self {
        Self {
            probes: default_probes(),
            power_iters: default_power_iters(),
        }
    }
}

/// Quadratic forms of the numerator and denominator on the active terminal
/// coordinates.
#[derive(Debug, Clone)]
pub struct QuotientForms {
    pub numerator: DMatrix<f64>,
    pub denominator: DMatrix<f64>,
    /// Terminal coordinate of each row: (false, i) for n_T[i], (true, i) for l_T[i].
    pub coords: Vec<(bool, usize)>,
}

/// Assembles both forms column by column from adjoint solves of unit data.
pub fn assemble_forms(sys: &DiscreteSystem, p: &[f64]) -> Result<QuotientForms> {
    let na = sys.na();
    let mut coords = Vec::new();
    if sys.mode != ControlMode::FemaleOnly {
        coords.extend((0..=na).map(|i| (false, i)));
    }
    if sys.mode != ControlMode::MaleOnly {
        coords.extend((0..=na).map(|i| (true, i)));
    }
    let mode = adjoint_mode(sys.mode);
    let h = sys.h();
    let sqrt_h = h.sqrt();
    let male_obs = sys.mode != ControlMode::FemaleOnly;
    let female_obs = sys.mode != ControlMode::MaleOnly;

    let columns: Vec<(Vec<f64>, Vec<f64>)> = coords
        .par_iter()
        .map(|&(female, i)| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut n_t = vec![0.0; na + 1];
            let mut l_t = vec![0.0; na + 1];
            if female {
                l_t[i] = 1.0;
            } else {
                n_t[i] = 1.0;
            }
            let adj = solve_adjoint(sys, &n_t, &l_t, p, mode)?;
            let initial: Vec<f64> = adj
                .initial_n()
                .iter()
                .chain(adj.initial_l())
                .map(|v| sqrt_h * v)
                .collect();
            let mut observed = Vec::new();
            for k in 1..=sys.nt() {
                if male_obs {
                    for (c, v) in sys.male_mask.iter().zip(adj.n.level(k)) {
                        if *c > 0.0 {
                            observed.push(h * c.sqrt() * v);
                        }
                    }
                }
                if female_obs {
                    for (c, v) in sys.female_mask.iter().zip(adj.l.level(k)) {
                        if *c > 0.0 {
                            observed.push(h * c.sqrt() * v);
                        }
                    }
                }
            }
            Ok((initial, observed))
        })
        .collect::<Result<_>>()?;

    let d = coords.len();
    let g = DMatrix::from_fn(columns[0].0.len(), d, |r, c| columns[c].0[r]);
    let o = DMatrix::from_fn(columns[0].1.len(), d, |r, c| columns[c].1[r]);
    Ok(QuotientForms {
        numerator: g.transpose() * &g,
        denominator: o.transpose() * &o,
        coords,
    })
}

impl QuotientForms {
    pub fn quotient(&self, x: &DVector<f64>) -> Quotient {
        let num = x.dot(&(&self.numerator * x));
        let den = x.dot(&(&self.denominator * x));
        Quotient::from_parts(num, den)
    }
}

/// Largest generalized eigenvalue of (N, D) on the range of D by power
/// iteration, and whether N has weight on the null space of D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub value: f64,
    pub diverged: bool,
    pub iterations: usize,
}

const RANGE_TOL: f64 = 1e-11;
const NULL_TOL: f64 = 1e-9;

pub fn power_estimate(forms: &QuotientForms, iters: usize, rng: &mut ChaCha8Rng) -> PowerEstimate {
    let d = forms.denominator.nrows();
    let eig = SymmetricEigen::new(forms.denominator.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let (range, null): (Vec<usize>, Vec<usize>) =
        (0..d).partition(|&j| top > 0.0 && eig.eigenvalues[j] > RANGE_TOL * top);
    let n_scale = forms.numerator.iter().map(|v| v.abs()).fold(0.0, f64::max);

    let diverged = if null.is_empty() || n_scale == 0.0 {
        false
    } else {
        let vn = DMatrix::from_fn(d, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);
        let block = vn.transpose() * &forms.numerator * &vn;
        block.iter().map(|v| v.abs()).fold(0.0, f64::max) > NULL_TOL * n_scale
    };
    if range.is_empty() {
        return PowerEstimate {
            value: 0.0,
            diverged,
            iterations: 0,
        };
    }

    // B = L^{-1/2} V^T N V L^{-1/2} on the range of D
    let r = range.len();
    let scaled = DMatrix::from_fn(d, r, |row, c| {
        eig.eigenvectors[(row, range[c])] / eig.eigenvalues[range[c]].sqrt()
    });
    let b = scaled.transpose() * &forms.numerator * &scaled;
    let mut x = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut value = 0.0;
    let mut iterations = 0;
    for _ in 0..iters {
        let norm = x.norm();
        if norm == 0.0 {
            break;
        }
        x /= norm;
        let y = &b * &x;
        let next = x.dot(&y);
        iterations += 1;
        x = y;
        let done = (next - value).abs() <= 1e-13 * next.abs();
        value = next;
        if done {
            break;
        }
    }
    PowerEstimate {
        value,
        diverged,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub p_mean: f64,
    pub probe_max: f64,
    pub power: PowerEstimate,
    pub unbounded_probes: usize,
    pub estimate: Quotient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub estimated_constant: Quotient,
    /// Finite probe quotients of every trace.
    pub quotient_samples: Vec<f64>,
    pub per_trace: Vec<TraceEstimate>,
    /// (max - min) / max of the finite per-trace estimates.
    pub p_spread: f64,
    pub diverged: bool,
    pub geometry: ControlGeometry,
    pub grid: CharGrid,
    pub threshold_margin: f64,
}

/// Lower estimate of the observability constant: the largest quotient over
/// Gaussian terminal data and over power iteration, per frozen trace.
pub fn estimate_constant(
    sys: &DiscreteSystem,
    p_traces: &[Vec<f64>],
    cfg: &ObservabilityConfig,
    seed: u64,
) -> Result<ObservabilityReport> {
    if cfg.probes == 0 {
        return Err(Error::config("observability.probes", "must be at least 1"));
    }
    if p_traces.is_empty() {
        return Err(Error::config("observability.p_values", "need at least one trace"));
    }
    let per_trace: Vec<(TraceEstimate, Vec<f64>)> = p_traces
        .par_iter()
        .enumerate()
        .map(|(j, p)| -> Result<(TraceEstimate, Vec<f64>)> {
            let forms = assemble_forms(sys, p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let dim = forms.coords.len();
            let mut samples = Vec::with_capacity(cfg.probes);
            let mut unbounded = 0;
            for _ in 0..cfg.probes {
                let x = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                match forms.quotient(&x) {
                    Quotient::Finite(v) => samples.push(v),
                    Quotient::Unbounded => unbounded += 1,
                }
            }
            let power = power_estimate(&forms, cfg.power_iters, &mut rng);
            let probe_max = samples.iter().cloned().fold(0.0, f64::max);
            let estimate = if power.diverged || unbounded > 0 {
                Quotient::Unbounded
            } else {
                Quotient::Finite(probe_max.max(power.value))
            };
            let p_mean = p.iter().sum::<f64>() / p.len() as f64;
            Ok((
                TraceEstimate {
                    p_mean,
                    probe_max,
                    power,
                    unbounded_probes: unbounded,
                    estimate,
                },
                samples,
            ))
        })
        .collect::<Result<_>>()?;

    let mut quotient_samples = Vec::new();
    let mut traces = Vec::new();
    for (t, s) in per_trace {
        quotient_samples.extend(s);
        traces.push(t);
    }
    let diverged = traces.iter().any(|t| t.estimate.is_unbounded());
    let finite: Vec<f64> = traces
        .iter()
        .filter_map(|t| match t.estimate {
            Quotient::Finite(v) => Some(v),
            Quotient::Unbounded => None,
        })
        .collect();
    let hi = finite.iter().cloned().fold(0.0, f64::max);
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_spread = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
    Ok(ObservabilityReport {
        estimated_constant: if diverged {
            Quotient::Unbounded
        } else {
            Quotient::Finite(hi)
        },
        quotient_samples,
        per_trace: traces,
        p_spread,
        diverged,
        geometry: sys.geometry,
        grid: sys.grid,
        threshold_margin: sys.geometry.threshold_margin(sys.grid.max_age()),
    })
}

/// Witness a0 in (a1, a2) and slack kappa for a time condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdWitness {
    pub a0: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// T - (a1 + A - a2): both sexes controlled.
    pub margin_both: f64,
    /// T - (A - a2): male-only control.
    pub margin_male_only: f64,
    /// T - (a1 + A - a2): female-only control.
    pub margin_female_only: f64,
    /// a0 = a2 - kappa with T - (a1 + kappa) > A - a0.
    pub coupled_witness: Option<ThresholdWitness>,
    /// a0 = a2 - kappa with T > A - a0; needs T > a1 as well.
    pub male_witness: Option<ThresholdWitness>,
}

pub fn geometry_threshold_check(geom: &ControlGeometry, model: &DemographicModel) -> GeometryReport {
    let a = model.max_age;
    let (a1, a2, t) = (geom.a1, geom.a2, geom.horizon);
    let margin_both = t - (a1 + a - a2);
    let margin_male_only = t - (a - a2);
    let width = a2 - a1;
    let coupled_witness = (margin_both > 0.0 && width > 0.0).then(|| {
        let kappa = margin_both.min(width) / 4.0;
        ThresholdWitness {
            a0: a2 - kappa,
            kappa,
        }
    });
    let male_witness = (margin_male_only > 0.0 && t > a1 && width > 0.0).then(|| {
        let kappa = margin_male_only.min(width) / 2.0;
        ThresholdWitness {
            a0: a2 - kappa,
            kappa,
        }
    });
    GeometryReport {
        margin_both,
        margin_male_only,
        margin_female_only: margin_both,
        coupled_witness,
        male_witness,
    }
}

/// Grid of geometries for a threshold study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSweep {
    pub horizons: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    /// Constant frozen traces; the estimate of a row is the largest over them.
    #[serde(default = "default_p_values")]
    pub p_values: Vec<f64>,
    #[serde(default)]
    pub estimator: ObservabilityConfig,
}

fn default_p_values() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub horizon: f64,
    pub a1: f64,
    pub a2: f64,
    pub margin: f64,
    pub estimate: Quotient,
    pub diverged: bool,
}

/// Runs `estimate_constant` for every (T, a1, a2) combination with
/// a1 < a2; other combinations are skipped.
pub fn threshold_sweep(
    model: &DemographicModel,
    base: &ControlGeometry,
    sweep: &ThresholdSweep,
    target_h: f64,
    seed: u64,
) -> Result<Vec<ThresholdRow>> {
    let mut cases = Vec::new();
    for &t in &sweep.horizons {
        for &a1 in &sweep.a1 {
            for &a2 in &sweep.a2 {
                if a1 < a2 {
                    cases.push((t, a1, a2));
                }
            }
        }
    }
    cases
        .par_iter()
        .map(|&(t, a1, a2)| {
            let geom = ControlGeometry {
                a1,
                a2,
                horizon: t,
                ..*base
            };
            let grid = CharGrid::build(model.max_age, t, target_h)?;
            let sys = DiscreteSystem::new(model, &geom, grid)?;
            let traces: Vec<Vec<f64>> = sweep
                .p_values
                .iter()
                .map(|&p| vec![p; grid.time_nodes()])
                .collect();
            let rep = estimate_constant(&sys, &traces, &sweep.estimator, seed)?;
            Ok(ThresholdRow {
                horizon: t,
                a1,
                a2,
                margin: rep.threshold_margin,
                estimate: rep.estimated_constant,
                diverged: rep.diverged,
            })
        })
        .collect()
}
