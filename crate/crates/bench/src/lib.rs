//! Shared fixtures for the benchmarks.

use sgflow::{
    AnalyticInitialData, ConvexPolygon, DiracCloud, DomainSpec, InitMode, QuadratureSpec, Result,
    Scheme, SimState, Simulator, SolverSettings,
};

pub fn unit_square() -> Result<DomainSpec> {
    let poly = ConvexPolygon::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])?;
    DomainSpec::new(poly, 0.5, 30.0, 3.0)
}

/// Simulator on the unit square with `columns` quadrature columns per axis.
pub fn simulator(columns: usize, scheme: Scheme) -> Result<Simulator> {
    let domain = unit_square()?;
    let settings = SolverSettings::new(1e-9, 200, domain.delta(), domain.cap_height());
    Simulator::new(
        domain,
        &QuadratureSpec::new(columns)?,
        settings,
        scheme,
        0.01,
    )
}

/// Cloud sampled from a tilted analytic profile.
pub fn analytic_cloud(sim: &Simulator, samples: usize) -> Result<DiracCloud> {
    let data = AnalyticInitialData {
        alpha: 1.2,
        beta: 0.8,
        gamma: [0.1, -0.05],
        b3: -1.0,
        samples,
        seed: 3,
    };
    sgflow::dynamics::sample_initial_cloud(&data, &sim.domain)
}

pub fn equilibrated_state(sim: &Simulator, samples: usize) -> Result<SimState> {
    let cloud = analytic_cloud(sim, samples)?;
    let init = InitMode::Quadratic.weights(&cloud);
    sim.initial_state(cloud, &init)
}
