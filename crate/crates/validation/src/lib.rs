//! Acceptance tolerances and scenario constants, pinned in one place.
//!
//! The checks themselves live in `tests/acceptance.rs` and run as a plain
//! binary that prints one PASS/FAIL line per criterion.

/// Target curvature of the worked example.
pub const A: f64 = 0.3587;
/// Target far-field slope of the worked example.
pub const B: f64 = 0.1436;
/// Grid used by every criterion unless stated otherwise.
pub const NODES: usize = 401;
pub const DT: f64 = 1e-3;
/// Closed-loop horizon.
pub const T_END: f64 = 30.0;

/// Casimir residuals relative to `max|g|`.
pub const CASIMIR_REL_TOL: f64 = 1e-10;
/// Curvature and slope of `w_s` against `a` and `b`.
pub const EQUILIBRIUM_REL_TOL: f64 = 0.01;
/// `max|w(T) − w_s| / max|w_s|`.
pub const TRACKING_W_TOL: f64 = 0.02;
/// Relative error of `x_c¹(T)` against its target.
pub const TRACKING_X1_TOL: f64 = 0.01;
/// Damping states at `T` relative to their peak.
pub const DAMPING_DECAY_TOL: f64 = 1e-3;
/// Largest per-step `H_cl` increase relative to `max H_cl`.
pub const MONOTONE_TOL: f64 = 1e-10;
pub const DISSIPATION_MATCH_TOL: f64 = 1e-6;
/// Open-loop energy drift relative to `H(0)`.
pub const CONSERVATION_TOL: f64 = 1e-10;
/// Forced power balance per unit time, relative to `max H`.
pub const POWER_BALANCE_TOL: f64 = 1e-9;
/// Casimir drift, relative to `1 + |C(0)|`.
pub const DRIFT_TOL: f64 = 1e-8;
pub const ORDER_TARGET: f64 = 2.0;
/// Allowed deviation of observed convergence orders.
pub const ORDER_TOL: f64 = 0.2;
/// Largest state motion at the shaped fixed point over 1000 steps.
pub const FIXED_POINT_TOL: f64 = 1e-8;
