//! Structure-preserving simulation and energy-Casimir control of a
//! cantilevered Euler-Bernoulli beam with distributed piezoelectric
//! actuation, written as a 1-D port-Hamiltonian system.
//!
//! The crate is layered bottom-up:
//!
//! * [`grid`]: uniform grids, nodal fields, difference operators, quadrature;
//! * [`variational`]: second-order quadratic densities, their variational
//!   derivatives, boundary operators and the power balance;
//! * [`beam`]: the plant, its profiles, dynamics and static solves;
//! * [`controller`]: the finite-dimensional controller and the structural
//!   invariant (Casimir) checks;
//! * [`closed_loop`]: coupling, affine assembly, implicit-midpoint stepping
//!   and run diagnostics.
//!
//! ```
//! use phbeam::{make_grid, Beam, BeamParams, synthesize_example3, ClosedLoop, Scenario, simulate};
//!
//! // A coarse grid needs a smoother actuator edge, placed away from the clamp.
//! let params = BeamParams { sigma: 30.0, z_p: 0.4, ..BeamParams::unit() };
//! let beam = Beam::new(params, make_grid(1.0, 61)?)?;
//! let ctrl = synthesize_example3(&beam, 0.3587, 0.1436)?;
//! let trace = simulate(&Scenario::new(ClosedLoop::new(beam, ctrl)?, 1e-3, 0.1))?;
//! assert_eq!(trace.records.len(), 101);
//! # Ok::<(), phbeam::Error>(())
//! ```

pub mod beam;
pub mod closed_loop;
pub mod controller;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod variational;

pub use beam::{
    actuator_characteristic, boundary_condition_residuals, equilibrium_profile, hamiltonian_density,
    input_profile, output_density, plant_rhs, solve_static, stationary_input, Beam, BeamParams, BeamProfiles,
    BoundaryResiduals, PlantState, StationaryInput,
};
pub use closed_loop::{
    assemble, casimir_drift, energy_report, energy_report_records, interconnect, simulate, step_midpoint, AffineSystem, ClosedLoop,
    ClosedLoopRates, ClosedLoopState, EnergyReport, InitialCondition, MidpointStepper, Ports, Record, Scenario,
    Snapshot, Trace,
};
pub use controller::{
    casimir_residuals, casimir_tolerance, controller_output, controller_rhs, example3_set_point, hc_gradient,
    hc_value, synthesize_example3, CasimirCandidate, CasimirResiduals, ControllerGains, ControllerParams, SetPoint,
};
pub use error::{Error, Result};
pub use grid::{boundary_eval, d1, d11, integrate, integrate_product, make_grid, DiffOperator, Field, Grid, LeftEnd};
pub use variational::{
    boundary_delta, discrete_gradient, power_balance_residual, variational_derivative, BoundaryDelta, Density2,
    DissipationProfile,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/grid.md")]
    mod grid {}
    #[doc = include_str!("../../../book/src/variational.md")]
    mod variational {}
    #[doc = include_str!("../../../book/src/beam.md")]
    mod beam {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/closed_loop.md")]
    mod closed_loop {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
