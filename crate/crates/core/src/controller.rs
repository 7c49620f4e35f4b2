//! Finite-dimensional port-Hamiltonian controller with an energy-shaping
//! Hamiltonian, a structural-invariant (Casimir) checker, and the preset
//! used for the cantilever with one patch pair.
//!
//! The controller Hamiltonian is
//!
//! ```text
//! H_c = c₁/2 (x₁ − x₁ᵈ − u_s/c₁)² + ½ x_dᵀ M x_d,   x_d = (x₂, …, x_n)
//! ```
//!
//! and the dynamics are `ẋ = (J − R) ∂H_c + G u_c`, `y_c = Gᵀ ∂H_c`.

use nalgebra::{DMatrix, DVector};

use crate::beam::{equilibrium_profile, stationary_input, Beam};
use crate::error::{Error, Result};
use crate::grid::{integrate_product, Field};

/// Structure matrices and gains, independent of the set point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    /// Skew-symmetric interconnection, `n × n`.
    pub j: DMatrix<f64>,
    /// Symmetric positive semidefinite dissipation, `n × n`.
    pub r: DMatrix<f64>,
    /// Input map, `n × m`.
    pub g: DMatrix<f64>,
    /// Interconnection gain, `m × m`.
    pub k: DMatrix<f64>,
    /// Positive definite weight on the damping states, `(n−1) × (n−1)`.
    pub m: DMatrix<f64>,
    /// Shaping gain on the first state.
    pub c1: f64,
}

impl ControllerGains {
    /// Three-state gains of the worked example: `J₂₃ = 1`, `R₂₂ = 3`,
    /// `R₂₃ = −1`, `R₃₃ = 1.5`, `M = diag(85, 60)`, `G = (1, 1.7, 1.7)`,
    /// `K = 1`, `c₁ = 0.1`.
    pub fn example3() -> Self {
        Self {
            j: DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0]),
            r: DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 3.0, -1.0, 0.0, -1.0, 1.5]),
            g: DMatrix::from_column_slice(3, 1, &[1.0, 1.7, 1.7]),
            k: DMatrix::from_element(1, 1, 1.0),
            m: DMatrix::from_row_slice(2, 2, &[85.0, 0.0, 0.0, 60.0]),
            c1: 0.1,
        }
    }

    pub fn states(&self) -> usize {
        self.j.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.g.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.states();
        let m = self.inputs();
        if n == 0 {
            return Err(Error::param("j", "controller needs at least one state"));
        }
        let dims = [
            ("j", self.j.shape(), (n, n)),
            ("r", self.r.shape(), (n, n)),
            ("g", self.g.shape(), (n, m)),
            ("k", self.k.shape(), (m, m)),
            ("m", self.m.shape(), (n - 1, n - 1)),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::param(name, format!("expected shape {want:?}, got {got:?}")));
            }
        }
        let all = [&self.j, &self.r, &self.g, &self.k, &self.m];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite())) || !self.c1.is_finite() {
            return Err(Error::param("gains", "all entries must be finite"));
        }
        let scale = |a: &DMatrix<f64>| a.amax().max(1.0);
        if (&self.j + self.j.transpose()).amax() > 1e-14 * scale(&self.j) {
            return Err(Error::param("j", "must be skew-symmetric"));
        }
        if (&self.r - self.r.transpose()).amax() > 1e-14 * scale(&self.r) {
            return Err(Error::param("r", "must be symmetric"));
        }
        let min_eig = self.r.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * scale(&self.r) {
            return Err(Error::param("r", format!("must be positive semidefinite (eigenvalue {min_eig})")));
        }
        if n > 1 {
            if (&self.m - self.m.transpose()).amax() > 1e-14 * scale(&self.m) {
                return Err(Error::param("m", "must be symmetric"));
            }
            if self.m.clone().cholesky().is_none() {
                return Err(Error::param("m", "must be positive definite"));
            }
        }
        if self.c1 <= 0.0 {
            return Err(Error::param("c1", "must be positive"));
        }
        Ok(())
    }
}

/// Gains together with the stationary voltage and shaped target.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    gains: ControllerGains,
    u_s: f64,
    x1_target: f64,
}

impl ControllerParams {
    /// Validated controller whose first state carries the plant Casimir:
    /// the first row of `J − R` must vanish.
    pub fn new(gains: ControllerGains, u_s: f64, x1_target: f64) -> Result<Self> {
        let p = Self::without_casimir_structure(gains, u_s, x1_target)?;
        let row = p.row_defect(0);
        if row > 0.0 {
            return Err(Error::CasimirStructure(format!(
                "row 1 of J - R must vanish for the shaped state (max entry {row:e})"
            )));
        }
        Ok(p)
    }

    /// Validated controller without the row constraint, for diagnostics.
    pub fn without_casimir_structure(gains: ControllerGains, u_s: f64, x1_target: f64) -> Result<Self> {
        gains.validate()?;
        if !u_s.is_finite() || !x1_target.is_finite() {
            return Err(Error::param("set point", "u_s and x1_target must be finite"));
        }
        Ok(Self {
            gains,
            u_s,
            x1_target,
        })
    }

    pub fn gains(&self) -> &ControllerGains {
        &self.gains
    }

    pub fn states(&self) -> usize {
        self.gains.states()
    }

    pub fn inputs(&self) -> usize {
        self.gains.inputs()
    }

    pub fn u_s(&self) -> f64 {
        self.u_s
    }

    pub fn x1_target(&self) -> f64 {
        self.x1_target
    }

    /// `J − R`.
    pub fn structure(&self) -> DMatrix<f64> {
        &self.gains.j - &self.gains.r
    }

    fn row_defect(&self, row: usize) -> f64 {
        self.structure().row(row).amax()
    }

    /// Hessian of `H_c`: `blockdiag(c₁, M)`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.states();
        let mut d = DMatrix::zeros(n, n);
        d[(0, 0)] = self.gains.c1;
        if n > 1 {
            d.view_mut((1, 1), (n - 1, n - 1)).copy_from(&self.gains.m);
        }
        d
    }

    /// `∂H_c(0)`: the affine offset of the gradient.
    pub fn gradient_offset(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.states());
        e[0] = -self.gains.c1 * self.x1_target - self.u_s;
        e
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.states() {
            return Err(Error::Dimension(format!(
                "controller state has length {}, expected {}",
                x.len(),
                self.states()
            )));
        }
        Ok(())
    }
}

/// `∂H_c`.
pub fn hc_gradient(params: &ControllerParams, x: &[f64]) -> Result<DVector<f64>> {
    params.check_state(x)?;
    let x = DVector::from_column_slice(x);
    Ok(params.hessian() * x + params.gradient_offset())
}

/// `H_c`.
pub fn hc_value(params: &ControllerParams, x: &[f64]) -> Result<f64> {
    params.check_state(x)?;
    let c1 = params.gains.c1;
    let shaped = x[0] - params.x1_target - params.u_s / c1;
    let xd = DVector::from_column_slice(&x[1..]);
    let damping = if xd.is_empty() { 0.0 } else { 0.5 * xd.dot(&(&params.gains.m * &xd)) };
    Ok(0.5 * c1 * shaped * shaped + damping)
}

/// `ẋ = (J − R) ∂H_c + G u_c`.
pub fn controller_rhs(params: &ControllerParams, x: &[f64], u_c: &[f64]) -> Result<DVector<f64>> {
    if u_c.len() != params.inputs() {
        return Err(Error::Dimension(format!(
            "controller input has length {}, expected {}",
            u_c.len(),
            params.inputs()
        )));
    }
    let grad = hc_gradient(params, x)?;
    Ok(params.structure() * grad + &params.gains.g * DVector::from_column_slice(u_c))
}

/// `y_c = Gᵀ ∂H_c`.
pub fn controller_output(params: &ControllerParams, x: &[f64]) -> Result<DVector<f64>> {
    Ok(params.gains.g.transpose() * hc_gradient(params, x)?)
}

/// Candidate Casimir `𝒞 = x_λ + ∫ (φ_w w + φ_p p) dz`.
#[derive(Debug, Clone, PartialEq)]
pub struct CasimirCandidate {
    pub lambda: usize,
    pub coeff_w: Field,
    pub coeff_p: Field,
}

impl CasimirCandidate {
    /// `𝒞 = x₁ − ∫ g w dz`.
    pub fn example3(g: &Field) -> Self {
        Self {
            lambda: 0,
            coeff_w: g.scale(-1.0),
            coeff_p: Field::zeros(*g.grid()),
        }
    }
}

/// Residuals of the four structural-invariant conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CasimirResiduals {
    /// Row `λ` of `J_c − R_c`.
    pub a: f64,
    /// Nodewise cancellation between the plant structure and the coupling.
    pub b: f64,
    /// Coupling of the candidate into the remaining controller states.
    pub c: f64,
    /// Boundary terms.
    pub d: f64,
}

impl CasimirResiduals {
    pub fn max(&self) -> f64 {
        self.a.max(self.b).max(self.c).max(self.d)
    }

    /// Per-condition verdicts at `tol`, in the order a, b, c, d.
    pub fn verdicts(&self, tol: f64) -> [bool; 4] {
        [self.a <= tol, self.b <= tol, self.c <= tol, self.d <= tol]
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.verdicts(tol).iter().all(|&v| v)
    }
}

/// Default residual tolerance, `1e−10 · max|g|`.
pub fn casimir_tolerance(beam: &Beam) -> f64 {
    1e-10 * beam.g().max_abs()
}

/// Evaluates the conditions for `candidate` against the canonical plant
/// structure with the beam's dissipation and the input profile `g`.
///
/// Candidates carry no jet variables, so their boundary operators vanish
/// identically and `d` is zero.
pub fn casimir_residuals(
    candidate: &CasimirCandidate,
    beam: &Beam,
    params: &ControllerParams,
) -> Result<CasimirResiduals> {
    let g = beam.g();
    g.ensure_same_grid(&candidate.coeff_w)?;
    g.ensure_same_grid(&candidate.coeff_p)?;
    let lam = candidate.lambda;
    if lam >= params.states() {
        return Err(Error::Dimension(format!(
            "candidate row {lam} out of range for {} controller states",
            params.states()
        )));
    }
    if params.inputs() != 1 {
        return Err(Error::Dimension("the beam has a single voltage input".into()));
    }
    let gains = params.gains();
    let a = params.row_defect(lam);

    // G_c^λ K: coupling weight of the plant input column into row λ.
    let gk = (gains.g.row(lam) * &gains.k)[(0, 0)];
    let r = &beam.dissipation;
    let mut b = 0.0f64;
    for i in 0..g.len() {
        let (cw, cp) = (candidate.coeff_w[i], candidate.coeff_p[i]);
        // (J − R) with J = [[0, 1], [−1, 0]].
        let col_w = cw * (0.0 - r.ww()[i]) + cp * (-1.0 - r.wp()[i]);
        let col_p = cw * (1.0 - r.wp()[i]) + cp * (0.0 - r.pp()[i]) + gk * g[i];
        b = b.max(col_w.abs()).max(col_p.abs());
    }

    let flux = integrate_product(&candidate.coeff_p, g)?;
    let c = (0..params.states())
        .map(|mu| (flux * (gains.g.row(mu) * &gains.k)[(0, 0)]).abs())
        .fold(0.0, f64::max);

    Ok(CasimirResiduals { a, b, c, d: 0.0 })
}

/// Stationary voltage, shaped target and misfit for a target profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetPoint {
    pub u_s: f64,
    pub x1_target: f64,
    /// Relative misfit of the target profile as a static deflection.
    pub residual: f64,
}

/// Set point for the piecewise target profile with parameters `a`, `b`.
pub fn example3_set_point(beam: &Beam, a: f64, b: f64) -> Result<SetPoint> {
    let w_d = equilibrium_profile(a, b, &beam.params, beam.grid());
    let st = stationary_input(&w_d, &beam.profiles)?;
    let x1_target = integrate_product(beam.g(), &w_d)?;
    Ok(SetPoint {
        u_s: st.u_s,
        x1_target,
        residual: st.residual,
    })
}

/// Example controller: preset gains, `u_s` from the least-squares fit of the
/// target profile and `x₁ᵈ = ∫ g wᵈ dz`.
pub fn synthesize_example3(beam: &Beam, a: f64, b: f64) -> Result<ControllerParams> {
    let sp = example3_set_point(beam, a, b)?;
    ControllerParams::new(ControllerGains::example3(), sp.u_s, sp.x1_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::BeamParams;
    use crate::grid::make_grid;

    fn preset_params(x1d: f64, u_s: f64) -> ControllerParams {
        ControllerParams::new(ControllerGains::example3(), u_s, x1d).unwrap()
    }

    #[test]
    fn gradient_examples() {
        let p = preset_params(0.3, -1.2);
        let g = hc_gradient(&p, &[0.3, 0.0, 0.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.2, 0.0, 0.0]);
        let g = hc_gradient(&p, &[0.3 - 1.2 / 0.1, 0.0, 0.0]).unwrap();
        assert!(g[0].abs() < 1e-14);
        let p = preset_params(0.0, 0.0);
        assert_eq!(hc_gradient(&p, &[0.0, 1.0, 1.0]).unwrap().as_slice(), &[0.0, 85.0, 60.0]);
    }

    #[test]
    fn value_is_consistent_with_gradient() {
        let p = preset_params(0.2, -1.0);
        let x = [0.5, 0.1, -0.2];
        let g = hc_gradient(&p, &x).unwrap();
        let e = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += e;
            xm[k] -= e;
            let fd = (hc_value(&p, &xp).unwrap() - hc_value(&p, &xm).unwrap()) / (2.0 * e);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn rhs_examples() {
        let p = preset_params(0.0, 0.0);
        let f = controller_rhs(&p, &[0.0, 1.0, 0.0], &[0.0]).unwrap();
        assert_eq!(f.as_slice(), &[0.0, -255.0, 0.0]);
        let f = controller_rhs(&p, &[0.0; 3], &[1.0]).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 1.7, 1.7]);
        let p = preset_params(0.7, 2.0);
        assert_eq!(controller_rhs(&p, &[5.0, 0.0, 0.0], &[0.0]).unwrap().amax(), 0.0);
        assert!(matches!(controller_rhs(&p, &[0.0; 2], &[0.0]), Err(Error::Dimension(_))));
        assert!(matches!(controller_rhs(&p, &[0.0; 3], &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn output_examples() {
        let p = preset_params(0.4, -1.1);
        let y = controller_output(&p, &[0.4, 0.0, 0.0]).unwrap();
        assert!((y[0] - 1.1).abs() < 1e-15);
        let u = -(p.gains().k[(0, 0)] * y[0]);
        assert!((u - p.u_s()).abs() < 1e-15);
        let p = preset_params(0.0, 0.0);
        assert_eq!(controller_output(&p, &[0.0; 3]).unwrap()[0], 0.0);
        assert!((controller_output(&p, &[0.0, 1.0, 1.0]).unwrap()[0] - 246.5).abs() < 1e-12);
    }

    #[test]
    fn gain_validation() {
        let mut g = ControllerGains::example3();
        g.r[(0, 0)] = 1.0;
        g.r[(0, 1)] = 0.5;
        g.r[(1, 0)] = 0.5;
        assert!(matches!(ControllerParams::new(g.clone(), 0.0, 0.0), Err(Error::CasimirStructure(_))));
        assert!(ControllerParams::without_casimir_structure(g, 0.0, 0.0).is_ok());

        let mut g = ControllerGains::example3();
        g.r[(1, 2)] = -5.0;
        g.r[(2, 1)] = -5.0;
        assert!(ControllerParams::new(g, 0.0, 0.0).is_err());

        let mut g = ControllerGains::example3();
        g.j[(1, 2)] = 2.0;
        assert!(ControllerParams::new(g, 0.0, 0.0).is_err());

        let mut g = ControllerGains::example3();
        g.m[(1, 1)] = 0.0;
        assert!(ControllerParams::new(g, 0.0, 0.0).is_err());

        let mut g = ControllerGains::example3();
        g.c1 = 0.0;
        assert!(ControllerParams::new(g, 0.0, 0.0).is_err());
    }

    #[test]
    fn damping_block_is_definite() {
        let g = ControllerGains::example3();
        let block = g.r.view((1, 1), (2, 2)).into_owned();
        assert!((block.determinant() - 3.5).abs() < 1e-12);
        assert!(block.cholesky().is_some());
    }

    fn beam(n: usize) -> Beam {
        Beam::new(BeamParams::unit(), make_grid(1.0, n).unwrap()).unwrap()
    }

    #[test]
    fn casimir_example_and_counterexamples() {
        let b = beam(401);
        let tol = casimir_tolerance(&b);
        let p = preset_params(0.0, 0.0);
        let cand = CasimirCandidate::example3(b.g());
        let res = casimir_residuals(&cand, &b, &p).unwrap();
        assert!(res.passes(tol), "{res:?}");

        let wrong = CasimirCandidate {
            lambda: 0,
            coeff_w: Field::zeros(*b.grid()),
            coeff_p: b.g().scale(-1.0),
        };
        let res = casimir_residuals(&wrong, &b, &p).unwrap();
        assert!(!res.verdicts(tol)[1]);
        assert!((res.b - b.g().max_abs()).abs() < 1e-9 * b.g().max_abs());

        let mut gains = ControllerGains::example3();
        gains.k[(0, 0)] = 2.0;
        let p2 = ControllerParams::new(gains, 0.0, 0.0).unwrap();
        let res = casimir_residuals(&cand, &b, &p2).unwrap();
        assert!(!res.verdicts(tol)[1]);
        assert!((res.b - b.g().max_abs()).abs() < 1e-9 * b.g().max_abs());
    }

    #[test]
    fn synthesis() {
        let b = beam(401);
        let c = synthesize_example3(&b, 0.3587, 0.1436).unwrap();
        assert_eq!(c.gains(), &ControllerGains::example3());
        assert!((c.u_s() + 1.0761).abs() < 0.02 * 1.0761);
        // ∫g·wᵈ = −4aΔ_p∫Γ² with ∫Γ² = L_p − ln2/σ for the smoothed edges.
        let exact = -4.0 * 0.3587 * (0.2 - 2f64.ln() / 100.0);
        assert!((c.x1_target() - exact).abs() < 2e-3 * exact.abs(), "{}", c.x1_target());
    }
}
