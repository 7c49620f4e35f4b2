//! Variational derivative, boundary operators and power-balance bookkeeping
//! for second-order Hamiltonian densities in two fields `(w, p)`.
//!
//! Densities are quadratic in the jet variables with spatially varying
//! coefficients:
//!
//! ```text
//! H = k(z) p² + a(z) w² + b(z) w_1² + c(z) w_11²
//! ```
//!
//! Two gradient routes are available:
//!
//! * [`variational_derivative`] evaluates the Euler operator
//!   `δ_α = ∂_α − d₁ ∂_α¹ + d₁₁ ∂_α¹¹` nodewise with the difference operators
//!   of [`crate::grid`];
//! * [`discrete_gradient`] differentiates the quadrature-discretized functional
//!   with respect to the nodal values and divides by the quadrature weights.
//!
//! Both agree to rounding at nodes whose stencils do not touch an endpoint.
//! Near the ends the discrete gradient additionally carries the boundary
//! remainder of summation by parts, which is what makes the discrete power
//! balance an exact identity.

use crate::beam::PlantState;
use crate::error::{Error, Result};
use crate::grid::{d1, d11, DiffOperator, Field, Grid, LeftEnd};
use crate::linalg::{CompensatedSum, CsrMatrix};
use std::collections::BTreeMap;

/// Quadratic second-order density in `(w, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Density2 {
    grid: Grid,
    kinetic: Field,
    spring: Field,
    tension: Field,
    bending: Field,
    left: LeftEnd,
}

/// Nodal partial derivatives `∂_w H`, `∂_w¹ H`, `∂_w¹¹ H`, `∂_p H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partials {
    pub w: Field,
    pub w1: Field,
    pub w11: Field,
    pub p: Field,
}

impl Density2 {
    /// The zero density on `grid`.
    pub fn new(grid: Grid) -> Self {
        let z = Field::zeros(grid);
        Self {
            grid,
            kinetic: z.clone(),
            spring: z.clone(),
            tension: z.clone(),
            bending: z,
            left: LeftEnd::OneSided,
        }
    }

    fn checked(&self, f: Field) -> Result<Field> {
        if *f.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(f)
    }

    /// Coefficient of `p²`.
    pub fn with_kinetic(mut self, coeff: Field) -> Result<Self> {
        self.kinetic = self.checked(coeff)?;
        Ok(self)
    }

    /// Coefficient of `w²`.
    pub fn with_spring(mut self, coeff: Field) -> Result<Self> {
        self.spring = self.checked(coeff)?;
        Ok(self)
    }

    /// Coefficient of `w_1²`.
    pub fn with_tension(mut self, coeff: Field) -> Result<Self> {
        self.tension = self.checked(coeff)?;
        Ok(self)
    }

    /// Coefficient of `w_11²`.
    pub fn with_bending(mut self, coeff: Field) -> Result<Self> {
        self.bending = self.checked(coeff)?;
        Ok(self)
    }

    /// Closure of the left end used by the discretized functional.
    pub fn with_left_end(mut self, left: LeftEnd) -> Self {
        self.left = left;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn left_end(&self) -> LeftEnd {
        self.left
    }

    pub fn kinetic(&self) -> &Field {
        &self.kinetic
    }

    pub fn bending(&self) -> &Field {
        &self.bending
    }

    fn check_state(&self, state: &PlantState) -> Result<()> {
        if *state.w.grid() != self.grid || *state.p.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// Partial derivatives with jet variables from [`d1`]/[`d11`], except that
    /// `w_11` at the two endpoints uses a stencil whose truncation error
    /// continues that of the interior rows (see `flux_curvature`).
    pub fn partials(&self, state: &PlantState) -> Result<Partials> {
        self.check_state(state)?;
        let w = &state.w;
        let twice = |c: &Field, v: &Field| c.zip_map(v, |a, b| 2.0 * a * b);
        Ok(Partials {
            w: twice(&self.spring, w)?,
            w1: twice(&self.tension, &d1(w))?,
            w11: twice(&self.bending, &flux_curvature(w))?,
            p: twice(&self.kinetic, &state.p)?,
        })
    }

    /// Nodal density values.
    pub fn density(&self, state: &PlantState) -> Result<Field> {
        self.check_state(state)?;
        let (w1, w11) = (d1(&state.w), d11(&state.w));
        let v = (0..self.grid.nodes())
            .map(|i| {
                self.kinetic[i] * state.p[i].powi(2)
                    + self.spring[i] * state.w[i].powi(2)
                    + self.tension[i] * w1[i].powi(2)
                    + self.bending[i] * w11[i].powi(2)
            })
            .collect();
        Ok(Field::from_values(self.grid, v))
    }

    fn operators(&self) -> (DiffOperator, DiffOperator) {
        (
            DiffOperator::first(self.grid, self.left),
            DiffOperator::second(self.grid, self.left),
        )
    }

    /// Quadrature-discretized functional `∫ H dz`.
    pub fn energy_slices(&self, w: &[f64], p: &[f64]) -> f64 {
        let (op1, op2) = self.operators();
        let (w1, w11) = (op1.apply_slice(w), op2.apply_slice(w));
        let mut sum = CompensatedSum::default();
        for i in 0..self.grid.nodes() {
            let q = self.grid.weight(i);
            sum.add_product(q * self.kinetic[i] * p[i], p[i]);
            sum.add_product(q * self.spring[i] * w[i], w[i]);
            sum.add_product(q * self.tension[i] * w1[i], w1[i]);
            sum.add_product(q * self.bending[i] * w11[i], w11[i]);
        }
        sum.value()
    }

    pub fn energy(&self, state: &PlantState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.energy_slices(state.w.values(), state.p.values()))
    }

    /// Hessian of the discretized functional with respect to the nodal `w`
    /// values, so that `∫ H = ½ wᵀ K w + (kinetic part)`.
    ///
    /// Entries are accumulated in double-word arithmetic and rounded once;
    /// the stiffness cancels strongly, and per-term rounding would show up as
    /// a visible mismatch between `½ wᵀ K w` and the evaluated energy.
    pub fn stiffness(&self) -> CsrMatrix {
        self.stiffness_parts().0
    }

    /// Stiffness as a rounded matrix plus the matrix of its rounding errors.
    pub fn stiffness_parts(&self) -> (CsrMatrix, CsrMatrix) {
        let n = self.grid.nodes();
        let (op1, op2) = self.operators();
        let mut acc: BTreeMap<(usize, usize), CompensatedSum> = BTreeMap::new();
        for i in 0..n {
            let q = self.grid.weight(i);
            acc.entry((i, i)).or_default().add_product(2.0 * q, self.spring[i]);
            for (op, coeff) in [(&op1, &self.tension), (&op2, &self.bending)] {
                if coeff[i] == 0.0 {
                    continue;
                }
                let c_hi = 2.0 * q * coeff[i];
                let c_lo = 2.0 * q.mul_add(coeff[i], -q * coeff[i]);
                let row = op.row(i);
                for (a, wa) in row.entries() {
                    let (hi, lo) = (c_hi * wa, c_hi.mul_add(wa, -c_hi * wa) + c_lo * wa);
                    for (b, wb) in row.entries() {
                        let e = acc.entry((a, b)).or_default();
                        e.add_product(hi, wb);
                        e.add(lo * wb);
                    }
                }
            }
        }
        let (mut hi, mut lo) = (Vec::with_capacity(acc.len()), Vec::with_capacity(acc.len()));
        for ((a, b), v) in acc {
            let (vh, vl) = v.split();
            hi.push((a, b, vh));
            lo.push((a, b, vl));
        }
        (CsrMatrix::from_triplets(n, n, &hi), CsrMatrix::from_triplets(n, n, &lo))
    }

    /// Weighted gradient of the discretized functional, as slices.
    pub(crate) fn gradient_slices(&self, w: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.nodes();
        let (op1, op2) = self.operators();
        let weights = self.grid.weights();
        let flux = |op: &DiffOperator, coeff: &Field| {
            let dw = op.apply_slice(w);
            let v: Vec<f64> = (0..n).map(|i| 2.0 * weights[i] * coeff[i] * dw[i]).collect();
            op.apply_transpose(&v)
        };
        let t1 = flux(&op1, &self.tension);
        let t2 = flux(&op2, &self.bending);
        let gw = (0..n)
            .map(|i| 2.0 * self.spring[i] * w[i] + (t1[i] + t2[i]) / weights[i])
            .collect();
        let gp = (0..n).map(|i| 2.0 * self.kinetic[i] * p[i]).collect();
        (gw, gp)
    }
}

/// `w_11` for use inside further differences.
///
/// The plain one-sided endpoint row is second order but its error term
/// (`-11h²w''''/12`) differs from the central rows' (`h²w''''/12`); a further
/// `d₁` or `d₁₁` turns that jump into O(1/h) or O(1) errors. The endpoint rows
/// here, `(3, -9, 10, -5, 1)/h²`, reproduce `w'' + h²w''''/12 + O(h³)` instead.
fn flux_curvature(w: &Field) -> Field {
    let mut out = d11(w).into_values();
    let n = out.len();
    if n >= 5 {
        let h2 = w.grid().spacing().powi(2);
        let c = [3.0, -9.0, 10.0, -5.0, 1.0];
        out[0] = (0..5).map(|k| c[k] * w[k]).sum::<f64>() / h2;
        out[n - 1] = (0..5).map(|k| c[k] * w[n - 1 - k]).sum::<f64>() / h2;
    }
    Field::new(*w.grid(), out).expect("same grid")
}

/// Nodewise Euler operator `δ_α H = ∂_α H − d₁(∂_α¹ H) + d₁₁(∂_α¹¹ H)`.
pub fn variational_derivative(h: &Density2, state: &PlantState) -> Result<(Field, Field)> {
    let part = h.partials(state)?;
    let d1w1 = d1(&part.w1);
    let d11w11 = d11(&part.w11);
    let dw = (0..h.grid.nodes())
        .map(|i| part.w[i] - d1w1[i] + d11w11[i])
        .collect();
    Ok((Field::from_values(h.grid, dw), part.p))
}

/// Gradient of the quadrature-discretized functional divided nodewise by the
/// quadrature weights.
pub fn discrete_gradient(h: &Density2, state: &PlantState) -> Result<(Field, Field)> {
    h.check_state(state)?;
    let (gw, gp) = h.gradient_slices(state.w.values(), state.p.values());
    Ok((Field::from_values(h.grid, gw), Field::from_values(h.grid, gp)))
}

/// Values of one boundary operator at `z = 0` and `z = L`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EndValues {
    pub at_0: f64,
    pub at_l: f64,
}

/// `δ^{∂,1}` and `δ^{∂,2}` of one field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryOps {
    pub first: EndValues,
    pub second: EndValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryDelta {
    pub w: BoundaryOps,
    pub p: BoundaryOps,
}

/// Boundary operators `δ^{∂,1} = ∂¹ − d₁(∂¹¹)` and `δ^{∂,2} = ∂¹¹`.
///
/// The densities carry no jets of `p`, so its boundary operators vanish.
pub fn boundary_delta(h: &Density2, state: &PlantState) -> Result<BoundaryDelta> {
    let part = h.partials(state)?;
    let d = d1(&part.w11);
    let n = h.grid.nodes() - 1;
    Ok(BoundaryDelta {
        w: BoundaryOps {
            first: EndValues {
                at_0: part.w1[0] - d[0],
                at_l: part.w1[n] - d[n],
            },
            second: EndValues {
                at_0: part.w11[0],
                at_l: part.w11[n],
            },
        },
        p: BoundaryOps::default(),
    })
}

/// Pointwise symmetric positive semidefinite 2×2 dissipation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipationProfile {
    ww: Field,
    wp: Field,
    pp: Field,
}

impl DissipationProfile {
    /// Validates symmetry and nodewise positive semidefiniteness.
    pub fn new(ww: Field, wp: Field, pw: Field, pp: Field) -> Result<Self> {
        for f in [&wp, &pw, &pp] {
            ww.ensure_same_grid(f)?;
        }
        for i in 0..ww.len() {
            let scale = ww[i].abs().max(pp[i].abs()).max(wp[i].abs()).max(1e-300);
            let tol = 1e-14 * scale;
            if (wp[i] - pw[i]).abs() > tol {
                return Err(Error::param(
                    "dissipation",
                    format!("not symmetric at node {i}: R12={} R21={}", wp[i], pw[i]),
                ));
            }
            let det = ww[i] * pp[i] - wp[i] * wp[i];
            if ww[i] < -tol || pp[i] < -tol || det < -tol * scale {
                return Err(Error::param(
                    "dissipation",
                    format!("not positive semidefinite at node {i}"),
                ));
            }
        }
        Ok(Self { ww, wp, pp })
    }

    pub fn zero(grid: Grid) -> Self {
        let z = Field::zeros(grid);
        Self {
            ww: z.clone(),
            wp: z.clone(),
            pp: z,
        }
    }

    /// `R = diag(0, r)`: viscous damping acting on the momentum equation.
    pub fn momentum_damping(r: Field) -> Result<Self> {
        let z = Field::zeros(*r.grid());
        Self::new(z.clone(), z.clone(), z, r)
    }

    pub fn ww(&self) -> &Field {
        &self.ww
    }

    pub fn wp(&self) -> &Field {
        &self.wp
    }

    pub fn pp(&self) -> &Field {
        &self.pp
    }

    pub fn is_zero(&self) -> bool {
        self.ww.max_abs() == 0.0 && self.wp.max_abs() == 0.0 && self.pp.max_abs() == 0.0
    }

    /// `R δ` at node `i`.
    pub fn apply_at(&self, i: usize, dw: f64, dp: f64) -> (f64, f64) {
        (
            self.ww[i] * dw + self.wp[i] * dp,
            self.wp[i] * dw + self.pp[i] * dp,
        )
    }
}

/// `dH/dt − (−∫ δ R δ + u ∫ y)` for the supplied rates.
///
/// `dH/dt` is formed from the rates and the discrete gradient, and the same
/// discrete gradient enters the dissipation integral, so the residual is a
/// rounding-level quantity whenever the rates come from a structure-preserving
/// evaluation.
pub fn power_balance_residual(
    h: &Density2,
    r: &DissipationProfile,
    state: &PlantState,
    rates: (&Field, &Field),
    u: f64,
    y: &Field,
) -> Result<f64> {
    let (dw, dp) = discrete_gradient(h, state)?;
    for f in [rates.0, rates.1, y, r.ww()] {
        dw.ensure_same_grid(f)?;
    }
    let grid = h.grid;
    let mut rate = 0.0;
    let mut rhs = 0.0;
    for i in 0..grid.nodes() {
        let q = grid.weight(i);
        rate += q * (dw[i] * rates.0[i] + dp[i] * rates.1[i]);
        let (rw, rp) = r.apply_at(i, dw[i], dp[i]);
        rhs += q * (-(dw[i] * rw + dp[i] * rp) + u * y[i]);
    }
    Ok(rate - rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use std::f64::consts::PI;

    fn state(w: Field, p: Field) -> PlantState {
        PlantState::new(w, p, 0.0).unwrap()
    }

    #[test]
    fn kinetic_only_density() {
        let g = make_grid(1.0, 51).unwrap();
        let kappa = Field::from_fn(g, |z| 1.0 + z);
        let h = Density2::new(g)
            .with_kinetic(kappa.map(|k| 0.5 / k))
            .unwrap();
        let s = state(Field::from_fn(g, |z| z.sin()), Field::from_fn(g, |z| z.cos()));
        let (dw, dp) = variational_derivative(&h, &s).unwrap();
        assert_eq!(dw.max_abs(), 0.0);
        for i in 0..g.nodes() {
            assert!((dp[i] - s.p[i] / kappa[i]).abs() < 1e-15);
        }
        let (gw, gp) = discrete_gradient(&h, &s).unwrap();
        assert_eq!(gw.max_abs(), 0.0);
        for i in 0..g.nodes() {
            assert!((gp[i] - s.p[i] / kappa[i]).abs() <= 1e-15 * gp[i].abs());
        }
    }

    #[test]
    fn bending_of_quadratic_is_flat() {
        let g = make_grid(1.0, 41).unwrap();
        let h = Density2::new(g).with_bending(Field::constant(g, 1.5)).unwrap();
        let s = state(Field::from_fn(g, |z| z * z), Field::zeros(g));
        let (dw, _) = variational_derivative(&h, &s).unwrap();
        assert!(dw.max_abs() < 1e-6, "{}", dw.max_abs());
    }

    // Analytic oracle: δ_w (w_11²/2) = w_1111 = (2π)⁴ sin(2πz).
    #[test]
    fn fourth_derivative_converges() {
        let err = |n: usize| {
            let g = make_grid(1.0, n).unwrap();
            let h = Density2::new(g).with_bending(Field::constant(g, 0.5)).unwrap();
            let s = state(Field::from_fn(g, |z| (2.0 * PI * z).sin()), Field::zeros(g));
            let (dw, _) = variational_derivative(&h, &s).unwrap();
            (0..n)
                .filter(|&i| (0.1..=0.9).contains(&g.z(i)))
                .map(|i| (dw[i] - (2.0 * PI).powi(4) * (2.0 * PI * g.z(i)).sin()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(101) / err(201);
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_state_zero_gradient() {
        let g = make_grid(1.0, 21).unwrap();
        let h = Density2::new(g)
            .with_bending(Field::constant(g, 2.0))
            .unwrap()
            .with_kinetic(Field::constant(g, 0.5))
            .unwrap();
        let s = PlantState::zeros(g);
        let (gw, gp) = discrete_gradient(&h, &s).unwrap();
        assert_eq!(gw.max_abs() + gp.max_abs(), 0.0);
    }

    #[test]
    fn interior_routes_agree() {
        let g = make_grid(1.0, 101).unwrap();
        let h = Density2::new(g)
            .with_bending(Field::from_fn(g, |z| 1.0 + z * z))
            .unwrap()
            .with_tension(Field::from_fn(g, |z| 0.3 + z))
            .unwrap()
            .with_spring(Field::constant(g, 0.7))
            .unwrap();
        let s = state(Field::from_fn(g, |z| (3.0 * z).sin() + z), Field::zeros(g));
        let (a, _) = variational_derivative(&h, &s).unwrap();
        let (b, _) = discrete_gradient(&h, &s).unwrap();
        for i in 4..g.nodes() - 5 {
            assert!((a[i] - b[i]).abs() < 1e-6 * (1.0 + a[i].abs()), "node {i}");
        }
    }

    #[test]
    fn stiffness_matches_gradient() {
        let g = make_grid(1.0, 15).unwrap();
        let h = Density2::new(g)
            .with_bending(Field::from_fn(g, |z| 1.0 + z))
            .unwrap()
            .with_tension(Field::constant(g, 0.2))
            .unwrap()
            .with_left_end(LeftEnd::Clamped);
        let w: Vec<f64> = (0..15).map(|i| (0.4 * i as f64).sin()).collect();
        let kw = h.stiffness().mul_vec(&w);
        let (gw, _) = h.gradient_slices(&w, &[0.0; 15]);
        for i in 0..15 {
            assert!((kw[i] - gw[i] * g.weight(i)).abs() < 1e-8 * (1.0 + kw[i].abs()));
        }
        // ∫H = ½ wᵀKw.
        let e = h.energy_slices(&w, &[0.0; 15]);
        let quad: f64 = w.iter().zip(&kw).map(|(a, b)| a * b).sum::<f64>() * 0.5;
        assert!((e - quad).abs() < 1e-10 * e.abs());
    }

    #[test]
    fn boundary_operators() {
        let g = make_grid(1.0, 101).unwrap();
        let theta = 1.7;
        let h = Density2::new(g).with_bending(Field::constant(g, theta / 2.0)).unwrap();

        let s = state(Field::from_fn(g, |z| z * z), Field::zeros(g));
        let b = boundary_delta(&h, &s).unwrap();
        assert!((b.w.second.at_l - 2.0 * theta).abs() < 1e-8);
        assert!(b.w.first.at_l.abs() < 1e-6);

        let h1 = Density2::new(g).with_bending(Field::constant(g, 0.5)).unwrap();
        let s = state(Field::from_fn(g, |z| z.powi(3)), Field::zeros(g));
        let b = boundary_delta(&h1, &s).unwrap();
        assert!((b.w.first.at_l + 6.0).abs() < 1e-6, "{}", b.w.first.at_l);

        let s = state(Field::from_fn(g, |z| 3.0 * z - 1.0), Field::zeros(g));
        let b = boundary_delta(&h, &s).unwrap();
        assert!(b.w.second.at_l.abs() < 1e-8);
    }

    #[test]
    fn dissipation_validation() {
        let g = make_grid(1.0, 11).unwrap();
        let c = |v: f64| Field::constant(g, v);
        assert!(DissipationProfile::new(c(1.0), c(0.5), c(0.5), c(1.0)).is_ok());
        assert!(DissipationProfile::new(c(1.0), c(0.5), c(0.4), c(1.0)).is_err());
        assert!(DissipationProfile::new(c(1.0), c(2.0), c(2.0), c(1.0)).is_err());
        assert!(DissipationProfile::new(c(-1.0), c(0.0), c(0.0), c(1.0)).is_err());
    }

    fn hamiltonian_rates(h: &Density2, s: &PlantState, r: &DissipationProfile) -> (Field, Field) {
        let (dw, dp) = discrete_gradient(h, s).unwrap();
        let g = *h.grid();
        let mut wd = vec![0.0; g.nodes()];
        let mut pd = vec![0.0; g.nodes()];
        for i in 0..g.nodes() {
            let (rw, rp) = r.apply_at(i, dw[i], dp[i]);
            wd[i] = dp[i] - rw;
            pd[i] = -dw[i] - rp;
        }
        (Field::new(g, wd).unwrap(), Field::new(g, pd).unwrap())
    }

    #[test]
    fn power_balance_of_hamiltonian_flow() {
        let g = make_grid(1.0, 81).unwrap();
        let h = Density2::new(g)
            .with_bending(Field::from_fn(g, |z| 0.5 + z))
            .unwrap()
            .with_kinetic(Field::from_fn(g, |z| 0.5 / (1.0 + z)))
            .unwrap();
        let s = state(Field::from_fn(g, |z| z * z * (1.0 - z)), Field::from_fn(g, |z| z.sin()));
        let energy = h.energy(&s).unwrap();

        let r0 = DissipationProfile::zero(g);
        let (wd, pd) = hamiltonian_rates(&h, &s, &r0);
        let res = power_balance_residual(&h, &r0, &s, (&wd, &pd), 0.0, &Field::zeros(g)).unwrap();
        assert!(res.abs() <= 1e-12 * energy, "{res}");

        // Direct quadrature of the dissipation integrand is the oracle.
        let rfield = Field::from_fn(g, |z| 0.2 + z);
        let r = DissipationProfile::momentum_damping(rfield.clone()).unwrap();
        let (wd, pd) = hamiltonian_rates(&h, &s, &r);
        let (_, dp) = discrete_gradient(&h, &s).unwrap();
        let diss: f64 = (0..g.nodes()).map(|i| g.weight(i) * rfield[i] * dp[i] * dp[i]).sum();
        let rate: f64 = {
            let (dw, dp) = discrete_gradient(&h, &s).unwrap();
            (0..g.nodes()).map(|i| g.weight(i) * (dw[i] * wd[i] + dp[i] * pd[i])).sum()
        };
        assert!(rate < 0.0);
        assert!((rate + diss).abs() <= 1e-12 * energy);
        let res = power_balance_residual(&h, &r, &s, (&wd, &pd), 0.0, &Field::zeros(g)).unwrap();
        assert!(res.abs() <= 1e-12 * energy, "{res}");
    }
}
