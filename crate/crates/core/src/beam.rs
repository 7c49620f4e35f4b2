//! Cantilevered Euler-Bernoulli beam with a symmetric pair of bonded
//! piezoelectric patches acting as a distributed bending-moment actuator.
//!
//! The patch is smeared over the domain by the smooth characteristic
//!
//! ```text
//! Γ(z) = ½ tanh(σ(z − z_p)) − ½ tanh(σ(z − z_p − L_p))
//! ```
//!
//! which enters the mass density `κ = ρ_bA_b + 2ρ_pA_pΓ`, the stiffness
//! `Θ = EI + 2Θ_pΓ` and the input profile `g = −2Δ_pΓ''`. The state is the
//! deflection `w` and the momentum density `p = κẇ`, with energy density
//! `p²/(2κ) + ½Θ w_11²`. The end `z = 0` is clamped and `z = L` is free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{d1, d11, integrate_product, Field, Grid, LeftEnd};
use crate::linalg::{BandedLu, CsrMatrix};
use crate::variational::{boundary_delta, discrete_gradient, Density2, DissipationProfile};

/// Material and geometric parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    /// Bending stiffness `EI` of the bare beam.
    pub ei: f64,
    /// Mass per length `ρ_bA_b` of the bare beam.
    pub rho_a_beam: f64,
    /// Mass per length `ρ_pA_p` of one patch.
    pub rho_a_patch: f64,
    /// Stiffness contribution `Θ_p` of one patch.
    pub theta_p: f64,
    /// Electromechanical coupling `Δ_p`.
    pub delta_p: f64,
    /// Patch start.
    pub z_p: f64,
    /// Patch length.
    pub l_p: f64,
    /// Sharpness of the smoothed patch edges.
    pub sigma: f64,
    /// Beam length.
    pub length: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self::unit()
    }
}

impl BeamParams {
    /// All material constants 1, `L = 1`, patch on `[0.2, 0.4]`, `σ = 100`.
    pub fn unit() -> Self {
        Self {
            ei: 1.0,
            rho_a_beam: 1.0,
            rho_a_patch: 1.0,
            theta_p: 1.0,
            delta_p: 1.0,
            z_p: 0.2,
            l_p: 0.2,
            sigma: 100.0,
            length: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("ei", self.ei),
            ("rho_a_beam", self.rho_a_beam),
            ("rho_a_patch", self.rho_a_patch),
            ("theta_p", self.theta_p),
            ("delta_p", self.delta_p),
            ("z_p", self.z_p),
            ("l_p", self.l_p),
            ("sigma", self.sigma),
            ("length", self.length),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        for (name, v) in [("ei", self.ei), ("rho_a_beam", self.rho_a_beam), ("sigma", self.sigma), ("length", self.length), ("l_p", self.l_p)] {
            if v <= 0.0 {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("rho_a_patch", self.rho_a_patch), ("theta_p", self.theta_p)] {
            if v < 0.0 {
                return Err(Error::param(name, format!("must be non-negative, got {v}")));
            }
        }
        if self.z_p <= 0.0 {
            return Err(Error::param("z_p", "patch must start inside the beam (0 < z_p)"));
        }
        if self.z_p + self.l_p >= self.length {
            return Err(Error::param(
                "l_p",
                format!(
                    "patch must end inside the beam (z_p + l_p < length), got {} >= {}",
                    self.z_p + self.l_p,
                    self.length
                ),
            ));
        }
        Ok(())
    }
}

/// Deflection, momentum density and applied voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub w: Field,
    pub p: Field,
    pub u: f64,
}

impl PlantState {
    pub fn new(w: Field, p: Field, u: f64) -> Result<Self> {
        w.ensure_same_grid(&p)?;
        if !u.is_finite() {
            return Err(Error::param("u", "must be finite"));
        }
        Ok(Self { w, p, u })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            w: Field::zeros(grid),
            p: Field::zeros(grid),
            u: 0.0,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.w.grid()
    }

    /// Checks `w(0) = p(0) = 0` and a vanishing one-sided slope at the
    /// clamped end within `h²(1 + max|w_111|)`.
    pub fn check_clamped(&self) -> Result<()> {
        let grid = *self.grid();
        let h = grid.spacing();
        let scale = 1.0 + self.w.max_abs();
        if self.w[0].abs() > 1e-12 * scale {
            return Err(Error::Constraint(format!("w(0) = {:e} must vanish", self.w[0])));
        }
        if self.p[0].abs() > 1e-12 * (1.0 + self.p.max_abs()) {
            return Err(Error::Constraint(format!("p(0) = {:e} must vanish", self.p[0])));
        }
        let slope = d1(&self.w)[0];
        let third = d1(&d11(&self.w)).max_abs();
        let tol = h * h * (1.0 + third);
        if slope.abs() > tol {
            return Err(Error::Constraint(format!(
                "slope at the clamped end is {slope:e}, tolerance {tol:e}"
            )));
        }
        Ok(())
    }
}

/// Actuator characteristic and derived material profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamProfiles {
    pub gamma: Field,
    pub gamma_d1: Field,
    pub gamma_d2: Field,
    pub kappa: Field,
    pub theta: Field,
    pub g: Field,
}

impl BeamProfiles {
    pub fn grid(&self) -> &Grid {
        self.gamma.grid()
    }
}

/// Evaluates `Γ`, `Γ'`, `Γ''` in closed form together with `κ`, `Θ` and `g`.
///
/// Rejects grids that do not resolve the edge transition (`σh > 0.5`) and
/// patches whose edges are not decayed at the beam ends.
pub fn actuator_characteristic(params: &BeamParams, grid: &Grid) -> Result<BeamProfiles> {
    params.validate()?;
    if (grid.length() - params.length).abs() > 1e-12 * params.length {
        return Err(Error::param(
            "length",
            format!("grid length {} differs from beam length {}", grid.length(), params.length),
        ));
    }
    let sigma_h = params.sigma * grid.spacing();
    if sigma_h > 0.5 {
        return Err(Error::Resolution { sigma_h });
    }
    let (s, zp, lp) = (params.sigma, params.z_p, params.l_p);
    let sech2 = |x: f64| {
        let c = x.cosh();
        1.0 / (c * c)
    };
    let gamma = Field::from_fn(*grid, |z| 0.5 * (s * (z - zp)).tanh() - 0.5 * (s * (z - zp - lp)).tanh());
    let gamma_d1 = Field::from_fn(*grid, |z| 0.5 * s * (sech2(s * (z - zp)) - sech2(s * (z - zp - lp))));
    let gamma_d2 = Field::from_fn(*grid, |z| {
        let (a, b) = (s * (z - zp), s * (z - zp - lp));
        -s * s * (a.tanh() * sech2(a) - b.tanh() * sech2(b))
    });
    let last = grid.nodes() - 1;
    let tails = [gamma[0], gamma[last], gamma_d1[0], gamma_d1[last]];
    if tails.iter().any(|t| t.abs() > 1e-8) {
        return Err(Error::param(
            "sigma",
            format!(
                "actuator profile has not decayed at the beam ends (max tail {:e}); \
                 raise sigma or move the patch away from the ends",
                tails.iter().fold(0.0f64, |m, t| m.max(t.abs()))
            ),
        ));
    }
    let kappa = gamma.map(|g| params.rho_a_beam + 2.0 * params.rho_a_patch * g);
    let theta = gamma.map(|g| params.ei + 2.0 * params.theta_p * g);
    if kappa.values().iter().chain(theta.values()).any(|&v| v <= 0.0) {
        return Err(Error::param("profiles", "mass density and stiffness must stay positive"));
    }
    let g = input_profile(&gamma_d2, params.delta_p);
    Ok(BeamProfiles {
        gamma,
        gamma_d1,
        gamma_d2,
        kappa,
        theta,
        g,
    })
}

/// `g = −2Δ_p Γ''`.
pub fn input_profile(gamma_d2: &Field, delta_p: f64) -> Field {
    gamma_d2.map(|v| -2.0 * delta_p * v)
}

/// Energy density `p²/(2κ) + ½Θ w_11²`, discretized with a clamped left end.
pub fn hamiltonian_density(profiles: &BeamProfiles) -> Result<Density2> {
    Ok(Density2::new(*profiles.grid())
        .with_kinetic(profiles.kappa.map(|k| 0.5 / k))?
        .with_bending(profiles.theta.scale(0.5))?
        .with_left_end(LeftEnd::Clamped))
}

/// Plant rates `ẇ = δ_pH − (Rδ)_w`, `ṗ = −δ_wH − (Rδ)_p + g u`.
///
/// The gradient is the discrete one, so the clamped end and the natural
/// free-end conditions come out of the discretized energy. Rates at the
/// clamped node are zero.
pub fn plant_rhs(
    h: &Density2,
    r: &DissipationProfile,
    profiles: &BeamProfiles,
    state: &PlantState,
) -> Result<(Field, Field)> {
    profiles.g.ensure_same_grid(&state.w)?;
    if h.grid() != state.grid() || r.ww().grid() != state.grid() {
        return Err(Error::GridMismatch);
    }
    state.check_clamped()?;
    plant_rhs_unchecked(h, r, profiles, state)
}

/// [`plant_rhs`] without the clamped-end admissibility check.
pub(crate) fn plant_rhs_unchecked(
    h: &Density2,
    r: &DissipationProfile,
    profiles: &BeamProfiles,
    state: &PlantState,
) -> Result<(Field, Field)> {
    let (dw, dp) = discrete_gradient(h, state)?;
    let n = state.grid().nodes();
    let mut wd = vec![0.0; n];
    let mut pd = vec![0.0; n];
    for i in 1..n {
        let (rw, rp) = r.apply_at(i, dw[i], dp[i]);
        wd[i] = dp[i] - rw;
        pd[i] = -dw[i] - rp + profiles.g[i] * state.u;
    }
    let grid = *state.grid();
    Ok((Field::new(grid, wd)?, Field::new(grid, pd)?))
}

/// Collocated output density `y = g ẇ = g p/κ`.
pub fn output_density(profiles: &BeamProfiles, state: &PlantState) -> Result<Field> {
    let v = profiles.kappa.zip_map(&state.p, |k, p| p / k)?;
    v.zip_map(&profiles.g, |a, b| a * b)
}

/// Piecewise target profile: zero before the patch, parabolic on it and
/// linear beyond, with continuous value and slope at the patch edges only
/// when `b = 2aL_p`.
pub fn equilibrium_profile(a: f64, b: f64, params: &BeamParams, grid: &Grid) -> Field {
    let (zp, lp) = (params.z_p, params.l_p);
    Field::from_fn(*grid, |z| {
        if z < zp {
            0.0
        } else if z <= zp + lp {
            a * (z - zp).powi(2)
        } else {
            b * (z - zp - lp) + a * lp * lp
        }
    })
}

const REFINE_SWEEPS: usize = 3;

/// Free-node block of the clamped stiffness matrix, factored.
struct FreeStiffness {
    full: CsrMatrix,
    low: CsrMatrix,
    lu: BandedLu,
}

impl FreeStiffness {
    fn new(profiles: &BeamProfiles) -> Result<Self> {
        let (full, low) = hamiltonian_density(profiles)?.stiffness_parts();
        let n = full.nrows();
        let entries: Vec<_> = full
            .triplets()
            .filter(|&(r, c, _)| r > 0 && c > 0)
            .map(|(r, c, v)| (r - 1, c - 1, v))
            .collect();
        let lu = BandedLu::factor(n - 1, 3, 3, entries)?;
        Ok(Self { full, low, lu })
    }

    /// Nodal response `w` (with `w(0) = 0`) to the distributed load `f`.
    ///
    /// The stiffness is badly conditioned (`~h⁻⁴`), so the plain LU solution
    /// carries a smooth forward error that shows up as slow motion when the
    /// result is used as an equilibrium. A few refinement sweeps with an
    /// exactly accumulated residual remove it.
    fn solve(&self, grid: &Grid, f: &Field) -> Vec<f64> {
        let n = grid.nodes();
        let mut load = vec![0.0; n];
        for i in 1..n {
            load[i] = grid.weight(i) * f[i];
        }
        let mut corr = load[1..].to_vec();
        self.lu.solve_in_place(&mut corr);
        let mut w = Vec::with_capacity(n);
        w.push(0.0);
        w.extend(corr);
        for _ in 0..REFINE_SWEEPS {
            let lw = self.low.mul_vec(&w);
            let r = self.full.affine_apply(&w, &[(&lw, 1.0), (&load, -1.0)]);
            let mut corr: Vec<f64> = r[1..].iter().map(|v| -v).collect();
            self.lu.solve_in_place(&mut corr);
            for (wi, ci) in w[1..].iter_mut().zip(&corr) {
                *wi += ci;
            }
        }
        w
    }

    fn energy_norm(&self, v: &[f64]) -> f64 {
        let kv = self.full.mul_vec(v);
        v.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }
}

/// Static deflection under the constant voltage `u_s`.
///
/// Solves the discrete stationarity `δ_wH(w) = g u_s` with the same discrete
/// gradient as the dynamics, so `(w_s, 0)` is an exact equilibrium of
/// [`plant_rhs`] up to rounding.
pub fn solve_static(u_s: f64, profiles: &BeamProfiles) -> Result<Field> {
    let grid = *profiles.grid();
    if u_s == 0.0 {
        return Ok(Field::zeros(grid));
    }
    let k = FreeStiffness::new(profiles)?;
    let w = k.solve(&grid, &profiles.g.scale(u_s));
    Field::new(grid, w)
}

/// Stationary voltage and the relative misfit of the target profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryInput {
    pub u_s: f64,
    pub residual: f64,
}

/// Voltage `u_s` whose static response best matches `w_d`.
///
/// The misfit `δ_wH(w_d) − g u_s` is measured in the compliance norm, i.e.
/// the displacement error `w_d − u_s φ` in the energy norm, `φ` being the
/// static response to unit voltage. This yields `u_s = ∫g w_d / ∫g φ` and
/// makes `∫g w_s = ∫g w_d` hold exactly. The returned residual is
/// `‖w_d − u_s φ‖ / ‖w_d‖` in the same norm.
pub fn stationary_input(w_d: &Field, profiles: &BeamProfiles) -> Result<StationaryInput> {
    let grid = *profiles.grid();
    profiles.g.ensure_same_grid(w_d)?;
    if profiles.g.max_abs() == 0.0 {
        return Err(Error::DegenerateInput);
    }
    if w_d[0].abs() > 1e-12 * (1.0 + w_d.max_abs()) {
        return Err(Error::Constraint(format!("target profile has w(0) = {:e}", w_d[0])));
    }
    if w_d.max_abs() == 0.0 {
        return Ok(StationaryInput { u_s: 0.0, residual: 0.0 });
    }
    let k = FreeStiffness::new(profiles)?;
    let phi = Field::new(grid, k.solve(&grid, &profiles.g))?;
    let num = integrate_product(&profiles.g, w_d)?;
    let den = integrate_product(&profiles.g, &phi)?;
    if den <= 0.0 {
        return Err(Error::DegenerateInput);
    }
    let u_s = num / den;
    let mut target = w_d.values().to_vec();
    target[0] = 0.0;
    let misfit: Vec<f64> = target.iter().zip(phi.values()).map(|(a, b)| a - u_s * b).collect();
    let scale = k.energy_norm(&target);
    let residual = if scale > 0.0 { k.energy_norm(&misfit) / scale } else { 0.0 };
    Ok(StationaryInput { u_s, residual })
}

/// Boundary power products `ẇ·Θw_111` and `ẇ_1·Θw_11` at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryResiduals {
    pub shear_0: f64,
    pub shear_l: f64,
    pub moment_0: f64,
    pub moment_l: f64,
}

impl BoundaryResiduals {
    pub fn max_abs(&self) -> f64 {
        [self.shear_0, self.shear_l, self.moment_0, self.moment_l]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Evaluates the boundary products from the boundary operators of `h` and
/// one-sided differences of the velocity `ẇ = δ_pH`.
pub fn boundary_condition_residuals(h: &Density2, state: &PlantState) -> Result<BoundaryResiduals> {
    let b = boundary_delta(h, state)?;
    let (_, vel) = crate::variational::variational_derivative(h, state)?;
    let vel_1 = d1(&vel);
    let last = vel.len() - 1;
    // Θw_111 = −δ^{∂,1} where Θ' vanishes, and Θw_11 = δ^{∂,2}.
    Ok(BoundaryResiduals {
        shear_0: -vel[0] * b.w.first.at_0,
        shear_l: -vel[last] * b.w.first.at_l,
        moment_0: vel_1[0] * b.w.second.at_0,
        moment_l: vel_1[last] * b.w.second.at_l,
    })
}

/// Parameters, grid, profiles and the discretized energy in one place.
#[derive(Debug, Clone)]
pub struct Beam {
    pub params: BeamParams,
    pub profiles: BeamProfiles,
    pub density: Density2,
    pub dissipation: DissipationProfile,
}

impl Beam {
    pub fn new(params: BeamParams, grid: Grid) -> Result<Self> {
        let profiles = actuator_characteristic(&params, &grid)?;
        let density = hamiltonian_density(&profiles)?;
        Ok(Self {
            params,
            dissipation: DissipationProfile::zero(grid),
            profiles,
            density,
        })
    }

    /// Adds viscous damping `R^{22} = r` on the momentum equation.
    pub fn with_damping(mut self, r: Field) -> Result<Self> {
        self.dissipation = DissipationProfile::momentum_damping(r)?;
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        self.profiles.grid()
    }

    pub fn g(&self) -> &Field {
        &self.profiles.g
    }

    pub fn energy(&self, state: &PlantState) -> Result<f64> {
        self.density.energy(state)
    }

    pub fn rhs(&self, state: &PlantState) -> Result<(Field, Field)> {
        plant_rhs(&self.density, &self.dissipation, &self.profiles, state)
    }

    pub fn output(&self, state: &PlantState) -> Result<Field> {
        output_density(&self.profiles, state)
    }

    pub fn static_profile(&self, u_s: f64) -> Result<Field> {
        solve_static(u_s, &self.profiles)
    }
}
