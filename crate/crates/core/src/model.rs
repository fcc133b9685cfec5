//! Demographic data of the two-sex model: mortality, fertility, male
//! fertility weight, sex ratio, and the control geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// A scalar function of one variable, closed-form or tabulated.
///
/// Expressions may name their variable `a` or `p`; both are bound to the
/// argument.
#[derive(Debug, Clone, PartialEq)]
pub enum RateFn {
    Constant(f64),
    Table { at: Vec<f64>, values: Vec<f64> },
    Expr(Expr),
}

impl RateFn {
    pub fn constant(v: f64) -> Self {
        RateFn::Constant(v)
    }

    pub fn expr(src: &str) -> Result<Self> {
        Ok(RateFn::Expr(Expr::parse(src)?))
    }

    /// Tabulated samples with linear interpolation; clamped outside the table.
    pub fn table(at: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if at.is_empty() || at.len() != values.len() {
            return Err(Error::Domain(format!(
                "table needs matching non-empty abscissae/values (got {} and {})",
                at.len(),
                values.len()
            )));
        }
        if at.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(
                "table abscissae must be strictly increasing".into(),
            ));
        }
        Ok(RateFn::Table { at, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            RateFn::Constant(v) => *v,
            RateFn::Expr(e) => e.eval(x, x),
            RateFn::Table { at, values } => {
                let n = at.len();
                if x <= at[0] {
                    return values[0];
                }
                if x >= at[n - 1] {
                    return values[n - 1];
                }
                let k = at.partition_point(|&s| s <= x);
                let (x0, x1) = (at[k - 1], at[k]);
                let (y0, y1) = (values[k - 1], values[k]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

/// Fertility rate beta(a, p).
#[derive(Debug, Clone, PartialEq)]
pub enum Fertility {
    /// beta(a, p) = age_profile(a) * response(p)
    Separable {
        age_profile: RateFn,
        response: RateFn,
        /// Lipschitz constant of `response`, when known.
        lipschitz: Option<f64>,
    },
    General(Expr),
}

impl Fertility {
    pub fn eval(&self, a: f64, p: f64) -> f64 {
        match self {
            Fertility::Separable {
                age_profile,
                response,
                ..
            } => age_profile.eval(a) * response.eval(p),
            Fertility::General(e) => e.eval(a, p),
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, Fertility::Separable { .. })
    }

    pub fn zero() -> Self {
        Fertility::Separable {
            age_profile: RateFn::Constant(0.0),
            response: RateFn::Constant(0.0),
            lipschitz: Some(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicModel {
    /// Maximal age A.
    pub max_age: f64,
    pub mu_m: RateFn,
    pub mu_f: RateFn,
    pub fertility: Fertility,
    /// Male fertility weight in M(t) = int lambda(a) m(a,t) da.
    pub lambda: RateFn,
    /// Female fraction of newborns.
    pub gamma: f64,
    /// Fertility onset age b.
    pub fertility_onset: f64,
    /// Survival ratio used for the last age cell. `None` uses the quadrature
    /// of mu like every other cell; the default `Some(0.0)` is a hard cutoff
    /// at age A.
    pub last_cell_survival: Option<f64>,
    /// Trapezoid panels per solver cell for survival ratios (at least 4).
    pub quad_refinement: usize,
    /// Upper end of the p range sampled when probing fertility bounds.
    pub p_probe_max: f64,
}

impl DemographicModel {
    pub fn new(
        max_age: f64,
        mu_m: RateFn,
        mu_f: RateFn,
        fertility: Fertility,
        lambda: RateFn,
        gamma: f64,
        fertility_onset: f64,
    ) -> Self {
        Self {
            max_age,
            mu_m,
            mu_f,
            fertility,
            lambda,
            gamma,
            fertility_onset,
            last_cell_survival: Some(0.0),
            quad_refinement: 8,
            p_probe_max: 10.0,
        }
    }

    fn check_age(&self, a: f64) -> Result<()> {
        if !(0.0..=self.max_age).contains(&a) {
            return Err(Error::Domain(format!(
                "age {a} outside [0, {}]",
                self.max_age
            )));
        }
        Ok(())
    }

    pub fn beta_eval(&self, a: f64, p: f64) -> Result<f64> {
        self.check_age(a)?;
        Ok(self.fertility.eval(a, p))
    }

    pub fn lambda_eval(&self, a: f64) -> Result<f64> {
        self.check_age(a)?;
        Ok(self.lambda.eval(a))
    }

    fn default_quad_step(&self) -> f64 {
        self.max_age / 2048.0
    }

    /// pi_1(hi) / pi_1(lo) for the male mortality.
    pub fn male_survival(&self, lo: f64, hi: f64) -> Result<f64> {
        survival_ratio(&self.mu_m, lo, hi, self.default_quad_step())
    }

    pub fn female_survival(&self, lo: f64, hi: f64) -> Result<f64> {
        survival_ratio(&self.mu_f, lo, hi, self.default_quad_step())
    }
}

/// exp(-int_lo^hi mu) by the composite trapezoid rule with panels no wider
/// than `max_step`.
pub fn survival_ratio(mu: &RateFn, lo: f64, hi: f64, max_step: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::Domain(format!(
            "survival interval inverted: {lo} > {hi}"
        )));
    }
    if lo == hi {
        return Ok(1.0);
    }
    let panels = ((hi - lo) / max_step).ceil().max(1.0) as usize;
    Ok((-trapezoid(|a| mu.eval(a), lo, hi, panels)).exp())
}

pub(crate) fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let step = (hi - lo) / panels as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for k in 1..panels {
        acc += f(lo + k as f64 * step);
    }
    acc * step
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlMode {
    Both,
    MaleOnly,
    FemaleOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGeometry {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    /// Control horizon T.
    pub horizon: f64,
    /// Tail cutoff for male-only control; terminal male norm is taken over (rho, A).
    pub rho: f64,
    pub mode: ControlMode,
}

impl ControlGeometry {
    /// T minus the mode's critical time; the horizon is admissible iff this is positive.
    pub fn threshold_margin(&self, max_age: f64) -> f64 {
        match self.mode {
            ControlMode::Both | ControlMode::FemaleOnly => {
                self.horizon - (self.a1 + max_age - self.a2)
            }
            ControlMode::MaleOnly => self.horizon - (max_age - self.a2),
        }
    }

    pub fn is_admissible(&self, max_age: f64) -> bool {
        self.threshold_margin(max_age) > 0.0
    }

    /// Age window on which the male control acts, if any.
    pub fn male_window(&self) -> Option<(f64, f64)> {
        match self.mode {
            ControlMode::Both => Some((self.a1, self.a2)),
            ControlMode::MaleOnly => Some((0.0, self.a2)),
            ControlMode::FemaleOnly => None,
        }
    }

    pub fn female_window(&self) -> Option<(f64, f64)> {
        match self.mode {
            ControlMode::Both | ControlMode::FemaleOnly => Some((self.b1, self.b2)),
            ControlMode::MaleOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
    pub mode: ControlMode,
    pub threshold_margin: f64,
    pub admissible: bool,
    /// lambda(0) = lambda(A) = 0, needed by the fixed-point driver.
    pub fixed_point_ready: bool,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &HypothesisCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const AGE_SAMPLES: usize = 2048;
const P_SAMPLES: usize = 64;

fn sample_checked(f: &RateFn, field: &str, max_age: f64) -> Result<Vec<(f64, f64)>> {
    (0..=AGE_SAMPLES)
        .map(|k| {
            let a = max_age * k as f64 / AGE_SAMPLES as f64;
            let v = f.eval(a);
            if v.is_finite() {
                Ok((a, v))
            } else {
                Err(Error::config(field, format!("not evaluable at a = {a} (got {v})")))
            }
        })
        .collect()
}

fn first_negative(samples: &[(f64, f64)]) -> Option<Witness> {
    samples.iter().find(|(_, v)| *v < 0.0).map(|&(a, v)| Witness {
        a,
        p: None,
        value: v,
    })
}

fn check(name: &str, witness: Option<Witness>, note: impl Into<String>) -> HypothesisCheck {
    HypothesisCheck {
        name: name.into(),
        passed: witness.is_none(),
        witness,
        note: note.into(),
    }
}

/// Estimated sup |r(p) - r(q)| / |p - q| over the probe grid.
pub fn probe_lipschitz(response: &RateFn, p_max: f64, samples: usize) -> f64 {
    let ps: Vec<f64> = (0..=samples)
        .map(|k| p_max * k as f64 / samples as f64)
        .collect();
    ps.windows(2)
        .map(|w| ((response.eval(w[1]) - response.eval(w[0])) / (w[1] - w[0])).abs())
        .fold(0.0, f64::max)
}

/// Checks the demographic hypotheses on sampled points and computes the
/// admissible-time flag for the geometry.
pub fn validate_hypotheses(
    model: &DemographicModel,
    geom: &ControlGeometry,
) -> Result<ValidationReport> {
    let big_a = model.max_age;
    if !(big_a > 0.0 && big_a.is_finite()) {
        return Err(Error::config("model.max_age", "must be positive and finite"));
    }
    let mu_m = sample_checked(&model.mu_m, "model.mu_m", big_a)?;
    let mu_f = sample_checked(&model.mu_f, "model.mu_f", big_a)?;
    let lambda = sample_checked(&model.lambda, "model.lambda", big_a)?;

    let mut checks = Vec::new();
    checks.push(check(
        "H1.mu_m_nonnegative",
        first_negative(&mu_m),
        "(H1) mu_m(a) >= 0",
    ));
    checks.push(check(
        "H1.mu_f_nonnegative",
        first_negative(&mu_f),
        "(H1) mu_f(a) >= 0",
    ));

    // fertility over the (a, p) probe grid
    let b = model.fertility_onset;
    let mut negative = None;
    let mut below_onset = None;
    let mut at_zero = None;
    let mut sup: f64 = 0.0;
    for k in 0..=AGE_SAMPLES {
        let a = big_a * k as f64 / AGE_SAMPLES as f64;
        for j in 0..=P_SAMPLES {
            let p = model.p_probe_max * j as f64 / P_SAMPLES as f64;
            let v = model.fertility.eval(a, p);
            if !v.is_finite() {
                return Err(Error::config(
                    "model.beta",
                    format!("not evaluable at (a, p) = ({a}, {p})"),
                ));
            }
            sup = sup.max(v);
            let w = || {
                Some(Witness {
                    a,
                    p: Some(p),
                    value: v,
                })
            };
            if v < 0.0 && negative.is_none() {
                negative = w();
            }
            if a < b && v != 0.0 && below_onset.is_none() {
                below_onset = w();
            }
            if j == 0 && v != 0.0 && at_zero.is_none() {
                at_zero = w();
            }
        }
    }
    checks.push(check("H2.beta_nonnegative", negative, "(H2) beta(a,p) >= 0"));
    checks.push(check(
        "H3.beta_onset",
        below_onset,
        format!("(H3) beta(a,p) = 0 for a < b = {b}"),
    ));
    checks.push(check(
        "H3.beta_bounded",
        None,
        format!("(H3) sampled sup beta = {sup}"),
    ));
    checks.push(check(
        "H3.beta_zero_at_p0",
        at_zero,
        "(H3) beta(a,0) = 0",
    ));
    checks.push(check(
        "H3.onset_in_range",
        (!(b > 0.0 && b < big_a)).then_some(Witness {
            a: b,
            p: None,
            value: b,
        }),
        "(H3) b in (0, A)",
    ));

    checks.push(check(
        "H4.lambda_nonnegative",
        first_negative(&lambda),
        "(H4) lambda(a) >= 0",
    ));
    let lam_mu: Vec<f64> = lambda
        .iter()
        .zip(&mu_m)
        .map(|(l, m)| l.1 * m.1)
        .collect();
    let lam_mu_int: f64 = {
        let h = big_a / AGE_SAMPLES as f64;
        let n = lam_mu.len();
        h * (lam_mu.iter().sum::<f64>() - 0.5 * (lam_mu[0] + lam_mu[n - 1]))
    };
    checks.push(check(
        "H4.lambda_mu_integrable",
        (!lam_mu_int.is_finite()).then_some(Witness {
            a: big_a,
            p: None,
            value: lam_mu_int,
        }),
        format!("(H4) quadrature of lambda*mu_m = {lam_mu_int}"),
    ));

    checks.push(check(
        "gamma_in_unit_interval",
        (!(model.gamma > 0.0 && model.gamma < 1.0)).then_some(Witness {
            a: 0.0,
            p: None,
            value: model.gamma,
        }),
        "0 < gamma < 1",
    ));

    if let Fertility::Separable {
        response,
        lipschitz,
        ..
    } = &model.fertility
    {
        let est = probe_lipschitz(response, model.p_probe_max, 4096);
        let (passed, note) = match lipschitz {
            Some(l) => {
                let ok = (est - l).abs() <= 0.1 * l.max(f64::EPSILON);
                (ok, format!("(H5) probed Lipschitz {est}, configured {l}"))
            }
            None => (true, format!("(H5) probed Lipschitz {est}, none configured")),
        };
        checks.push(HypothesisCheck {
            name: "H5.lipschitz".into(),
            passed,
            witness: (!passed).then_some(Witness {
                a: 0.0,
                p: None,
                value: est,
            }),
            note,
        });
    }

    // geometry
    let g = geom;
    let window_ok = |lo: f64, hi: f64| 0.0 <= lo && lo < hi && hi <= big_a;
    checks.push(check(
        "geometry.male_window",
        (!window_ok(g.a1, g.a2)).then_some(Witness {
            a: g.a1,
            p: None,
            value: g.a2,
        }),
        "0 <= a1 < a2 <= A",
    ));
    checks.push(check(
        "geometry.female_window",
        (!window_ok(g.b1, g.b2)).then_some(Witness {
            a: g.b1,
            p: None,
            value: g.b2,
        }),
        "0 <= b1 < b2 <= A",
    ));
    checks.push(check(
        "geometry.horizon",
        (!(g.horizon > 0.0 && g.horizon.is_finite())).then_some(Witness {
            a: 0.0,
            p: None,
            value: g.horizon,
        }),
        "T > 0",
    ));
    if g.mode == ControlMode::Both {
        checks.push(check(
            "geometry.nested_windows",
            (!(g.b1 <= g.a1 && g.a2 <= g.b2)).then_some(Witness {
                a: g.a1,
                p: None,
                value: g.a2,
            }),
            "(a1, a2) contained in (b1, b2)",
        ));
        checks.push(check(
            "geometry.a1_below_onset",
            (g.a1 >= b).then_some(Witness {
                a: g.a1,
                p: None,
                value: b,
            }),
            "a1 < b",
        ));
    }
    if g.mode == ControlMode::MaleOnly {
        checks.push(check(
            "geometry.rho_nonnegative",
            (g.rho < 0.0).then_some(Witness {
                a: g.rho,
                p: None,
                value: g.rho,
            }),
            "rho >= 0",
        ));
    }

    let fixed_point_ready = model.lambda.eval(0.0) == 0.0 && model.lambda.eval(big_a) == 0.0;
    let margin = g.threshold_margin(big_a);
    Ok(ValidationReport {
        checks,
        mode: g.mode,
        threshold_margin: margin,
        admissible: margin > 0.0,
        fixed_point_ready,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn reference_model() -> DemographicModel {
        DemographicModel::new(
            1.0,
            RateFn::constant(0.2),
            RateFn::constant(0.2),
            Fertility::Separable {
                age_profile: RateFn::expr("step(a - 0.15)").unwrap(),
                response: RateFn::expr("p / (1 + p)").unwrap(),
                lipschitz: Some(1.0),
            },
            RateFn::expr("4 * a * (1 - a)").unwrap(),
            0.5,
            0.15,
        )
    }

    fn geom(horizon: f64) -> ControlGeometry {
        ControlGeometry {
            a1: 0.1,
            a2: 0.9,
            b1: 0.05,
            b2: 0.95,
            horizon,
            rho: 0.0,
            mode: ControlMode::Both,
        }
    }

    #[test]
    fn reference_model_passes_everything() {
        let report = validate_hypotheses(&reference_model(), &geom(0.5)).unwrap();
        let failed: Vec<_> = report.failures().map(|c| c.name.clone()).collect();
        assert!(report.all_passed(), "failed: {failed:?}");
        assert!(report.admissible);
        assert!(report.fixed_point_ready);
    }

    #[test]
    fn fertility_without_males_is_reported() {
        let mut model = reference_model();
        model.fertility = Fertility::General(Expr::parse("step(a - 0.15) * (p + 0.3)").unwrap());
        let report = validate_hypotheses(&model, &geom(0.5)).unwrap();
        let c = report.check("H3.beta_zero_at_p0").unwrap();
        assert!(!c.passed);
        let w = c.witness.as_ref().unwrap();
        assert_eq!(w.p, Some(0.0));
        assert_relative_eq!(w.value, 0.3);
    }

    #[test]
    fn admissible_time_is_strict() {
        let model = reference_model();
        // a1 + A - a2 = 0.2
        let g = geom(0.1 + 1.0 - 0.9);
        let report = validate_hypotheses(&model, &g).unwrap();
        assert!(!report.admissible);
        let mut male = g;
        male.mode = ControlMode::MaleOnly;
        assert!(male.is_admissible(1.0));
    }

    #[test]
    fn negative_table_mortality_fails_h1() {
        let mut model = reference_model();
        model.mu_m = RateFn::table(vec![0.0, 0.5, 1.0], vec![0.1, -0.2, 0.3]).unwrap();
        let report = validate_hypotheses(&model, &geom(0.5)).unwrap();
        let c = report.check("H1.mu_m_nonnegative").unwrap();
        assert!(!c.passed);
        assert!(c.witness.as_ref().unwrap().value < 0.0);
    }

    #[test]
    fn non_evaluable_rate_names_field() {
        let mut model = reference_model();
        model.lambda = RateFn::expr("1 / (a - 0.5)").unwrap();
        match validate_hypotheses(&model, &geom(0.5)) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.lambda"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn survival_ratio_examples() {
        let zero = RateFn::constant(0.0);
        assert_eq!(survival_ratio(&zero, 0.1, 0.9, 1e-3).unwrap(), 1.0);
        let half = RateFn::constant(0.5);
        assert_eq!(survival_ratio(&half, 0.4, 0.4, 1e-3).unwrap(), 1.0);
        assert_relative_eq!(
            survival_ratio(&half, 0.0, 2.0, 1e-3).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert!(survival_ratio(&half, 0.5, 0.4, 1e-3).is_err());
    }

    #[test]
    fn survival_ratio_matches_refined_quadrature() {
        // independent oracle: midpoint rule at very high resolution
        let mu = RateFn::expr("0.3 + sin(3 * a)^2").unwrap();
        let n = 200_000;
        let (lo, hi) = (0.1, 0.85);
        let step = (hi - lo) / n as f64;
        let integral: f64 = (0..n)
            .map(|k| mu.eval(lo + (k as f64 + 0.5) * step))
            .sum::<f64>()
            * step;
        let fine = survival_ratio(&mu, lo, hi, 1e-3).unwrap();
        assert_relative_eq!(fine, (-integral).exp(), max_relative = 1e-6);
    }

    #[test]
    fn beta_and_lambda_eval() {
        let model = reference_model();
        assert_eq!(model.beta_eval(0.1, 1.0).unwrap(), 0.0);
        assert_eq!(model.beta_eval(0.5, 0.0).unwrap(), 0.0);
        assert_eq!(model.beta_eval(0.5, 1.0).unwrap(), 0.5);
        assert!(model.beta_eval(1.5, 1.0).is_err());
        assert!(model.lambda_eval(-0.1).is_err());
        assert_relative_eq!(model.lambda_eval(0.5).unwrap(), 1.0);
    }

    #[test]
    fn lipschitz_probe_matches_configuration() {
        let model = reference_model();
        let report = validate_hypotheses(&model, &geom(0.5)).unwrap();
        assert!(report.check("H5.lipschitz").unwrap().passed);
        let est = probe_lipschitz(&RateFn::expr("3 * p / (2 + p)").unwrap(), 10.0, 4096);
        assert!((est - 1.5).abs() <= 0.15);
    }

    #[test]
    fn table_interpolates_linearly() {
        let t = RateFn::table(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 0.0]).unwrap();
        assert_eq!(t.eval(0.5), 1.0);
        assert_eq!(t.eval(1.5), 1.0);
        assert_eq!(t.eval(-1.0), 0.0);
        assert_eq!(t.eval(3.0), 0.0);
        assert!(RateFn::table(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn survival_is_multiplicative(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let mut v = [x, y, z];
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mu = RateFn::expr("0.2 + a^2").unwrap();
            let step = 1e-3;
            let whole = survival_ratio(&mu, v[0], v[2], step).unwrap();
            let split = survival_ratio(&mu, v[0], v[1], step).unwrap()
                * survival_ratio(&mu, v[1], v[2], step).unwrap();
            // trapezoid error bound for this mu is ~ step^2 * len / 6
            prop_assert!((whole - split).abs() <= 2.0 * 1e-6);
        }

        #[test]
        fn survival_non_increasing(lo in 0.0f64..0.5, d1 in 0.0f64..0.25, d2 in 0.0f64..0.25) {
            let mu = RateFn::expr("0.1 + a").unwrap();
            let s1 = survival_ratio(&mu, lo, lo + d1, 1e-3).unwrap();
            let s2 = survival_ratio(&mu, lo, lo + d1 + d2, 1e-3).unwrap();
            prop_assert!(s2 <= s1 + 1e-15);
        }
    }
}
