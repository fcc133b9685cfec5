//! Grid samples of the model needed by the forward and adjoint sweeps.

use crate::error::{Error, Result};
use crate::grid::{region_mask, CharGrid};
use crate::model::{survival_ratio, ControlGeometry, ControlMode, DemographicModel, Fertility};

/// Model data sampled on a [`CharGrid`] together with the control masks of
/// one geometry.
///
/// State inner products (terminal norms, duality pairings) use the nodal
/// weight `h` on every age node. The birth and M integrals use trapezoid
/// weights.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub grid: CharGrid,
    pub gamma: f64,
    /// `surv_m[i]`: male survival from age node i-1 to i (index 0 unused).
    pub surv_m: Vec<f64>,
    pub surv_f: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Trapezoid weights in age.
    pub weights: Vec<f64>,
    /// Injection masks; node 0 is always 0 since the birth condition overrides it.
    pub male_mask: Vec<f64>,
    pub female_mask: Vec<f64>,
    /// Terminal-norm weights in {0, 1/2, 1}; only differ from 1 on (0, rho) in male-only mode.
    pub male_tail: Vec<f64>,
    pub mode: ControlMode,
    pub geometry: ControlGeometry,
    fertility: Fertility,
    beta_age: Option<Vec<f64>>,
}

impl DiscreteSystem {
    pub fn new(model: &DemographicModel, geom: &ControlGeometry, grid: CharGrid) -> Result<Self> {
        if (grid.max_age() - model.max_age).abs() > 1e-9 * model.max_age {
            return Err(Error::Consistency(format!(
                "grid spans [0, {}] but the model has A = {}",
                grid.max_age(),
                model.max_age
            )));
        }
        let h = grid.h;
        let step = h / model.quad_refinement.max(4) as f64;
        let mut surv_m = vec![1.0; grid.na + 1];
        let mut surv_f = vec![1.0; grid.na + 1];
        for i in 1..=grid.na {
            let (lo, hi) = (grid.age(i - 1), grid.age(i));
            surv_m[i] = survival_ratio(&model.mu_m, lo, hi, step)?;
            surv_f[i] = survival_ratio(&model.mu_f, lo, hi, step)?;
        }
        if let Some(s) = model.last_cell_survival {
            surv_m[grid.na] = s;
            surv_f[grid.na] = s;
        }
        let lambda = grid.sample(|a| model.lambda.eval(a));
        let mask = |w: Option<(f64, f64)>| -> Result<Vec<f64>> {
            let mut m = match w {
                Some((lo, hi)) => region_mask(&grid, lo, hi)?,
                None => vec![0.0; grid.na + 1],
            };
            m[0] = 0.0;
            Ok(m)
        };
        let male_tail = if geom.mode == ControlMode::MaleOnly && geom.rho > 0.0 {
            let tol = 1e-9 * h;
            grid.ages()
                .iter()
                .map(|&a| {
                    if (a - geom.rho).abs() <= tol {
                        0.5
                    } else if a > geom.rho {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            vec![1.0; grid.na + 1]
        };
        let beta_age = match &model.fertility {
            Fertility::Separable { age_profile, .. } => Some(grid.sample(|a| age_profile.eval(a))),
            Fertility::General(_) => None,
        };
        Ok(Self {
            grid,
            gamma: model.gamma,
            surv_m,
            surv_f,
            lambda,
            weights: grid.age_weights(),
            male_mask: mask(geom.male_window())?,
            female_mask: mask(geom.female_window())?,
            male_tail,
            mode: geom.mode,
            geometry: *geom,
            fertility: model.fertility.clone(),
            beta_age,
        })
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn na(&self) -> usize {
        self.grid.na
    }

    pub fn nt(&self) -> usize {
        self.grid.nt
    }

    /// beta(a_i, p) for every age node.
    pub fn beta_level(&self, p: f64, out: &mut [f64]) {
        match (&self.fertility, &self.beta_age) {
            (Fertility::Separable { response, .. }, Some(profile)) => {
                let r = response.eval(p);
                for (o, b) in out.iter_mut().zip(profile) {
                    *o = b * r;
                }
            }
            _ => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.fertility.eval(self.grid.age(i), p);
                }
            }
        }
    }

    /// 1 / (1 - gamma w_0 beta_0): closes the birth condition when newborns
    /// are themselves fertile. Equals 1 whenever beta vanishes at age 0.
    pub(crate) fn birth_closure(&self, beta0: f64, step: usize) -> Result<f64> {
        let d = 1.0 - self.gamma * self.weights[0] * beta0;
        if d <= 0.0 {
            return Err(Error::Numerical {
                step,
                message: format!("birth condition not solvable (1 - gamma h/2 beta(0) = {d})"),
            });
        }
        Ok(1.0 / d)
    }

    /// Nodal inner product used for terminal and initial states.
    pub fn state_dot(&self, x: &[f64], y: &[f64]) -> f64 {
        self.grid.h * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn state_norm(&self, x: &[f64]) -> f64 {
        self.state_dot(x, x).sqrt()
    }

    /// Male terminal norm restricted to (rho, A) in male-only mode.
    pub fn male_terminal_norm(&self, x: &[f64]) -> f64 {
        (self.grid.h
            * x.iter()
                .zip(&self.male_tail)
                .map(|(v, w)| w * v * v)
                .sum::<f64>())
        .sqrt()
    }
}
