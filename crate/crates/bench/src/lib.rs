//! Fixtures shared by the solver benchmarks.

use popctrl_core::{
    CharGrid, ControlGeometry, ControlMode, DemographicModel, DiscreteSystem, Fertility, RateFn,
};

pub fn reference_model() -> DemographicModel {
    let mu = || RateFn::expr("0.2 + 0.3 * a").unwrap();
    DemographicModel::new(
        1.0,
        mu(),
        mu(),
        Fertility::Separable {
            age_profile: RateFn::expr("20 * max(0, a - 0.15)^3 * (1 - a)").unwrap(),
            response: RateFn::expr("p / (1 + p)").unwrap(),
            lipschitz: Some(1.0),
        },
        RateFn::expr("4 * a * (1 - a)").unwrap(),
        0.5,
        0.15,
    )
}

pub fn reference_geometry() -> ControlGeometry {
    ControlGeometry {
        a1: 0.2,
        a2: 0.9,
        b1: 0.1,
        b2: 0.95,
        horizon: 0.35,
        rho: 0.0,
        mode: ControlMode::Both,
    }
}

/// Reference system on the grid closest to `target_h`.
pub fn reference_system(target_h: f64) -> DiscreteSystem {
    let grid = CharGrid::build(1.0, 0.35, target_h).unwrap();
    DiscreteSystem::new(&reference_model(), &reference_geometry(), grid).unwrap()
}

/// Initial data 1 - a on the system grid.
pub fn reference_data(sys: &DiscreteSystem) -> Vec<f64> {
    sys.grid.sample(|a| 1.0 - a)
}
