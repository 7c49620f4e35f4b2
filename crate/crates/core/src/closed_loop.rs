//! Power-conserving coupling of the beam and the controller, the affine
//! closed-loop system, implicit-midpoint time stepping and run diagnostics.
//!
//! The coupling is `u_c = K ∫ y dz`, `u = −K y_c`. Both Hamiltonians are
//! quadratic, so the closed loop is `ẋ = A x + c` over the packed unknowns
//!
//! ```text
//! x = [w_1 … w_{N−1}, p_1 … p_{N−1}, x_c]
//! ```
//!
//! (node 0 is clamped and carries no unknowns). The implicit midpoint rule
//! reproduces the change of every quadratic energy exactly from its rate at
//! the step midpoint, and preserves linear invariants such as the Casimir
//! `x₁ − ∫ g w dz`.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beam::{plant_rhs_unchecked, solve_static, Beam, PlantState};
use crate::controller::{
    casimir_residuals, controller_output, controller_rhs, hc_value, CasimirCandidate, CasimirResiduals,
    ControllerParams,
};
use crate::error::{Error, Result};
use crate::grid::{integrate, integrate_product, Field, Grid};
use crate::linalg::{norm_inf, BorderedSolver, CsrMatrix};
use crate::variational::discrete_gradient;

/// `(u, u_c) = (−K y_c, K ∫y)`.
///
/// The pairing is power-conserving only for symmetric `K`; other gains are
/// rejected.
pub fn interconnect(int_y: &[f64], y_c: &[f64], k: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = k.nrows();
    if k.ncols() != m || int_y.len() != m || y_c.len() != m {
        return Err(Error::Dimension(format!(
            "interconnection gain is {}x{}, ports have lengths {} and {}",
            k.nrows(),
            k.ncols(),
            int_y.len(),
            y_c.len()
        )));
    }
    if (k - k.transpose()).amax() > 0.0 {
        return Err(Error::param("k", "interconnection gain must be symmetric"));
    }
    let u = -(k * DVector::from_column_slice(y_c));
    let u_c = k * DVector::from_column_slice(int_y);
    Ok((u.as_slice().to_vec(), u_c.as_slice().to_vec()))
}

/// Plant fields and controller states at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub w: Field,
    pub p: Field,
    pub x_c: Vec<f64>,
    pub t: f64,
}

/// Time derivatives of a [`ClosedLoopState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRates {
    pub w: Field,
    pub p: Field,
    pub x_c: Vec<f64>,
}

/// Port values at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ports {
    pub u: f64,
    pub u_c: f64,
    pub y_c: f64,
    pub int_y: f64,
}

/// Beam with an optional single-input controller attached.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    beam: Beam,
    controller: Option<ControllerParams>,
    stiffness: CsrMatrix,
    /// Rounding errors of `stiffness`.
    stiffness_lo: CsrMatrix,
}

impl ClosedLoop {
    pub fn new(beam: Beam, controller: ControllerParams) -> Result<Self> {
        if controller.inputs() != 1 {
            return Err(Error::Dimension("the beam has a single voltage input".into()));
        }
        let (stiffness, stiffness_lo) = beam.density.stiffness_parts();
        Ok(Self {
            beam,
            controller: Some(controller),
            stiffness,
            stiffness_lo,
        })
    }

    /// The beam alone, driven only by an external voltage.
    pub fn open(beam: Beam) -> Self {
        let (stiffness, stiffness_lo) = beam.density.stiffness_parts();
        Self {
            beam,
            controller: None,
            stiffness,
            stiffness_lo,
        }
    }

    pub fn beam(&self) -> &Beam {
        &self.beam
    }

    pub fn controller(&self) -> Option<&ControllerParams> {
        self.controller.as_ref()
    }

    pub fn grid(&self) -> &Grid {
        self.beam.grid()
    }

    fn free(&self) -> usize {
        self.grid().nodes() - 1
    }

    fn controller_states(&self) -> usize {
        self.controller.as_ref().map_or(0, |c| c.states())
    }

    /// Number of packed unknowns.
    pub fn dim(&self) -> usize {
        2 * self.free() + self.controller_states()
    }

    /// Packs into `[w_1.., p_1.., x_c]`; the clamped node must be at rest.
    pub fn pack(&self, s: &ClosedLoopState) -> Result<Vec<f64>> {
        let grid = *self.grid();
        if *s.w.grid() != grid || *s.p.grid() != grid {
            return Err(Error::GridMismatch);
        }
        if s.x_c.len() != self.controller_states() {
            return Err(Error::Dimension(format!(
                "controller state has length {}, expected {}",
                s.x_c.len(),
                self.controller_states()
            )));
        }
        if s.w[0] != 0.0 || s.p[0] != 0.0 {
            return Err(Error::Constraint("w and p must vanish at the clamped node".into()));
        }
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&s.w.values()[1..]);
        x.extend_from_slice(&s.p.values()[1..]);
        x.extend_from_slice(&s.x_c);
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64], t: f64) -> Result<ClosedLoopState> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("packed state has length {}, expected {}", x.len(), self.dim())));
        }
        let nf = self.free();
        let grid = *self.grid();
        let field = |part: &[f64]| {
            let mut v = Vec::with_capacity(nf + 1);
            v.push(0.0);
            v.extend_from_slice(part);
            Field::new(grid, v)
        };
        Ok(ClosedLoopState {
            w: field(&x[..nf])?,
            p: field(&x[nf..2 * nf])?,
            x_c: x[2 * nf..].to_vec(),
            t,
        })
    }

    /// Beam at rest, controller at the origin.
    pub fn zero_state(&self) -> ClosedLoopState {
        let grid = *self.grid();
        ClosedLoopState {
            w: Field::zeros(grid),
            p: Field::zeros(grid),
            x_c: vec![0.0; self.controller_states()],
            t: 0.0,
        }
    }

    /// `(w_s, 0, (∫ g w_s, 0, …))` with `w_s` the static response to `u_s`.
    pub fn fixed_point(&self) -> Result<ClosedLoopState> {
        let ctrl = self.controller.as_ref().ok_or_else(|| Error::param("controller", "no controller attached"))?;
        let w = solve_static(ctrl.u_s(), &self.beam.profiles)?;
        let mut x_c = vec![0.0; ctrl.states()];
        x_c[0] = integrate_product(self.beam.g(), &w)?;
        Ok(ClosedLoopState {
            p: Field::zeros(*self.grid()),
            w,
            x_c,
            t: 0.0,
        })
    }

    /// Port values; `u_ext` is added to the plant input.
    pub fn ports(&self, s: &ClosedLoopState, u_ext: f64) -> Result<Ports> {
        let plant = PlantState::new(s.w.clone(), s.p.clone(), 0.0)?;
        let int_y = integrate(&self.beam.output(&plant)?);
        match &self.controller {
            None => Ok(Ports {
                u: u_ext,
                int_y,
                ..Ports::default()
            }),
            Some(c) => {
                let y_c = controller_output(c, &s.x_c)?[0];
                let (u, u_c) = interconnect(&[int_y], &[y_c], &c.gains().k)?;
                Ok(Ports {
                    u: u[0] + u_ext,
                    u_c: u_c[0],
                    y_c,
                    int_y,
                })
            }
        }
    }

    /// Closed-loop rates from the plant, controller and interconnection
    /// maps evaluated separately.
    pub fn rhs(&self, s: &ClosedLoopState, u_ext: f64) -> Result<ClosedLoopRates> {
        let ports = self.ports(s, u_ext)?;
        let plant = PlantState::new(s.w.clone(), s.p.clone(), ports.u)?;
        let (w, p) = plant_rhs_unchecked(&self.beam.density, &self.beam.dissipation, &self.beam.profiles, &plant)?;
        let x_c = match &self.controller {
            None => Vec::new(),
            Some(c) => controller_rhs(c, &s.x_c, &[ports.u_c])?.as_slice().to_vec(),
        };
        Ok(ClosedLoopRates { w, p, x_c })
    }

    pub fn plant_energy(&self, s: &ClosedLoopState) -> Result<f64> {
        self.beam.energy(&PlantState::new(s.w.clone(), s.p.clone(), 0.0)?)
    }

    pub fn controller_energy(&self, s: &ClosedLoopState) -> Result<f64> {
        match &self.controller {
            None => Ok(0.0),
            Some(c) => hc_value(c, &s.x_c),
        }
    }

    pub fn total_energy(&self, s: &ClosedLoopState) -> Result<f64> {
        Ok(self.plant_energy(s)? + self.controller_energy(s)?)
    }

    /// `x₁ − ∫ g w dz`, or `None` without a controller.
    pub fn casimir(&self, s: &ClosedLoopState) -> Result<Option<f64>> {
        match &self.controller {
            None => Ok(None),
            Some(_) => Ok(Some(s.x_c[0] - integrate_product(self.beam.g(), &s.w)?)),
        }
    }

    /// Residuals of the invariant conditions for `x₁ − ∫ g w dz`.
    pub fn casimir_residuals(&self) -> Option<Result<CasimirResiduals>> {
        self.controller
            .as_ref()
            .map(|c| casimir_residuals(&CasimirCandidate::example3(self.beam.g()), &self.beam, c))
    }

    /// Gradient of `H + H_c` with respect to the packed unknowns.
    pub fn energy_gradient(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.free();
        let grid = self.grid();
        let mut w = Vec::with_capacity(nf + 1);
        w.push(0.0);
        w.extend_from_slice(&x[..nf]);
        let kw = self.stiffness.mul_vec(&w);
        let kin = self.beam.density.kinetic();
        let mut out = Vec::with_capacity(x.len());
        out.extend_from_slice(&kw[1..]);
        out.extend((1..=nf).map(|i| 2.0 * grid.weight(i) * kin[i] * x[nf + i - 1]));
        if let Some(c) = &self.controller {
            let xc = DVector::from_column_slice(&x[2 * nf..]);
            let g = c.hessian() * xc + c.gradient_offset();
            out.extend_from_slice(g.as_slice());
        }
        out
    }

    /// Rate of energy loss `∫ δRδ dz + ∂H_cᵀ R_c ∂H_c` (non-negative).
    pub fn dissipation_rate(&self, x: &[f64]) -> Result<f64> {
        let s = self.unpack(x, 0.0)?;
        let mut rate = 0.0;
        let r = &self.beam.dissipation;
        if !r.is_zero() {
            let plant = PlantState::new(s.w, s.p, 0.0)?;
            let (dw, dp) = discrete_gradient(&self.beam.density, &plant)?;
            let grid = self.grid();
            for i in 1..grid.nodes() {
                let (rw, rp) = r.apply_at(i, dw[i], dp[i]);
                rate += grid.weight(i) * (dw[i] * rw + dp[i] * rp);
            }
        }
        if let Some(c) = &self.controller {
            let nf = self.free();
            let grad = c.hessian() * DVector::from_column_slice(&x[2 * nf..]) + c.gradient_offset();
            rate += grad.dot(&(&c.gains().r * &grad));
        }
        Ok(rate)
    }
}

/// `ẋ = A x + c + b u_ext` with a solver-friendly ordering attached.
#[derive(Debug, Clone)]
pub struct AffineSystem {
    pub a: CsrMatrix,
    pub c: Vec<f64>,
    /// Column multiplying an external plant voltage.
    pub input: Vec<f64>,
    /// `perm[new] = old`, placing a banded block first.
    perm: Vec<usize>,
    /// Dense trailing unknowns after permutation.
    border: usize,
    /// Diagonal change of variables `x̃ = S x` used by the stepper.
    scale: Vec<f64>,
    /// `S A S⁻¹`, assembled from the unrounded sources.
    scaled: CsrMatrix,
    /// Rounding errors of the stiffness entries of `scaled`.
    scaled_lo: CsrMatrix,
    /// Momentum rows, further divided by `dt/2` inside the stepper.
    momentum: Vec<bool>,
}

impl AffineSystem {
    /// Generic system in its natural ordering.
    pub fn new(a: CsrMatrix, c: Vec<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || c.len() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{}, c has length {}",
                a.nrows(),
                a.ncols(),
                c.len()
            )));
        }
        Ok(Self {
            scaled: a.clone(),
            scaled_lo: CsrMatrix::from_triplets(n, n, &[]),
            a,
            input: vec![0.0; n],
            c,
            perm: (0..n).collect(),
            border: 0,
            scale: vec![1.0; n],
            momentum: vec![false; n],
        })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `A x + c + b u`, accumulated in double-word arithmetic.
    ///
    /// The stiffness rows cancel to about `eps·|w|/h⁴` in plain arithmetic,
    /// which would inject fresh noise into every step; compensated
    /// accumulation keeps the evaluation consistent from step to step.
    pub fn rhs(&self, x: &[f64], u_ext: f64) -> Vec<f64> {
        self.a.affine_apply(x, &[(&self.c, 1.0), (&self.input, u_ext)])
    }
}

/// Sparse affine form of the closed loop, verified against [`ClosedLoop::rhs`]
/// on random states.
pub fn assemble(sys: &ClosedLoop) -> Result<AffineSystem> {
    let grid = *sys.grid();
    let nf = sys.free();
    let nc = sys.controller_states();
    let n = sys.dim();
    let iw = |node: usize| node - 1;
    let ip = |node: usize| nf + node - 1;
    let ic = |mu: usize| 2 * nf + mu;

    let beam = &sys.beam;
    let kin = beam.density.kinetic();
    let g = beam.g();
    let r = &beam.dissipation;
    let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(16 * n);
    let mut c = vec![0.0; n];
    let mut input = vec![0.0; n];

    // Plant input u = ℓ·x_c + u0.
    let (ell, u0) = match &sys.controller {
        None => (DVector::zeros(0), 0.0),
        Some(ctrl) => {
            let k = ctrl.gains().k[(0, 0)];
            let gt = ctrl.gains().g.transpose();
            let ell = -(&gt * ctrl.hessian()).transpose() * k;
            let u0 = -k * (&gt * ctrl.gradient_offset())[0];
            (ell.column(0).into_owned(), u0)
        }
    };

    // Momentum rows are also assembled for P = q p, where the plant block is
    // J Q with Q symmetric to the last bit.
    let mut ts: Vec<(usize, usize, f64)> = Vec::with_capacity(16 * n);
    let mut ts_lo: Vec<(usize, usize, f64)> = Vec::with_capacity(8 * n);
    let mut scale = vec![1.0; n];
    let mut momentum = vec![false; n];
    for i in 1..grid.nodes() {
        let q = grid.weight(i);
        scale[ip(i)] = q;
        momentum[ip(i)] = true;
        let kp = 2.0 * kin[i];
        // δ_w at node i is (K w)_i / q.
        for (j, _) in sys.stiffness.row(i) {
            if j == 0 {
                continue;
            }
            let kij = sys.stiffness.get(i.min(j), i.max(j));
            let d = kij / q;
            if r.ww()[i] != 0.0 {
                t.push((iw(i), iw(j), -r.ww()[i] * d));
                ts.push((iw(i), iw(j), -r.ww()[i] * d));
            }
            t.push((ip(i), iw(j), -(1.0 + r.wp()[i]) * d));
            ts.push((ip(i), iw(j), -(1.0 + r.wp()[i]) * kij));
            let lo = sys.stiffness_lo.get(i.min(j), i.max(j));
            if lo != 0.0 {
                ts_lo.push((ip(i), iw(j), -(1.0 + r.wp()[i]) * lo));
            }
        }
        t.push((iw(i), ip(i), kp * (1.0 - r.wp()[i])));
        ts.push((iw(i), ip(i), kp * (1.0 - r.wp()[i]) / q));
        if r.pp()[i] != 0.0 {
            t.push((ip(i), ip(i), -r.pp()[i] * kp));
            ts.push((ip(i), ip(i), -r.pp()[i] * kp));
        }
        for (mu, &l) in ell.iter().enumerate() {
            t.push((ip(i), ic(mu), g[i] * l));
            ts.push((ip(i), ic(mu), q * g[i] * l));
        }
        c[ip(i)] = g[i] * u0;
        input[ip(i)] = g[i];
    }

    if let Some(ctrl) = &sys.controller {
        let s = ctrl.structure();
        let acc = &s * ctrl.hessian();
        let cc = &s * ctrl.gradient_offset();
        let k = ctrl.gains().k[(0, 0)];
        for a in 0..nc {
            for b in 0..nc {
                if acc[(a, b)] != 0.0 {
                    t.push((ic(a), ic(b), acc[(a, b)]));
                    ts.push((ic(a), ic(b), acc[(a, b)]));
                }
            }
            c[ic(a)] = cc[a];
            let gck = ctrl.gains().g[(a, 0)] * k;
            if gck != 0.0 {
                for i in 1..grid.nodes() {
                    t.push((ic(a), ip(i), gck * grid.weight(i) * g[i] * 2.0 * kin[i]));
                    ts.push((ic(a), ip(i), gck * g[i] * 2.0 * kin[i]));
                }
            }
        }
    }

    let a = CsrMatrix::from_triplets(n, n, &t);
    let mut perm = Vec::with_capacity(n);
    for j in 0..nf {
        perm.push(j);
        perm.push(nf + j);
    }
    perm.extend(2 * nf..n);
    let system = AffineSystem {
        a,
        c,
        input,
        perm,
        border: nc,
        momentum,
        scale,
        scaled: CsrMatrix::from_triplets(n, n, &ts),
        scaled_lo: CsrMatrix::from_triplets(n, n, &ts_lo),
    };
    cross_check(sys, &system)?;
    Ok(system)
}

fn cross_check(sys: &ClosedLoop, system: &AffineSystem) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for trial in 0..3 {
        let x: Vec<f64> = (0..sys.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u_ext = if trial == 2 { 0.7 } else { 0.0 };
        let s = sys.unpack(&x, 0.0)?;
        let modular = sys.rhs(&s, u_ext)?;
        let direct = sys.pack(&ClosedLoopState {
            w: modular.w,
            p: modular.p,
            x_c: modular.x_c,
            t: 0.0,
        })?;
        let assembled = system.rhs(&x, u_ext);
        let diff: Vec<f64> = assembled.iter().zip(&direct).map(|(a, b)| a - b).collect();
        let scale = norm_inf(&direct).max(f64::MIN_POSITIVE);
        worst = worst.max(norm_inf(&diff) / scale);
    }
    if worst > 1e-12 {
        return Err(Error::Assembly { rel_err: worst });
    }
    Ok(())
}

/// Implicit midpoint rule for a fixed affine system and step size, with the
/// linear system factored once.
#[derive(Debug, Clone)]
pub struct MidpointStepper {
    system: AffineSystem,
    dt: f64,
    matrix: CsrMatrix,
    /// Rounding errors of `matrix`, used in refinement residuals.
    matrix_lo: CsrMatrix,
    solver: BorderedSolver,
    matrix_norm: f64,
    condition: f64,
}

impl MidpointStepper {
    pub fn new(system: &AffineSystem, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive and finite, got {dt}")));
        }
        let matrix = midpoint_matrix(system, &system.scaled, 0.5 * dt, true);
        let matrix_lo = midpoint_matrix(system, &system.scaled_lo, 0.5 * dt, false);
        let solver = BorderedSolver::factor(&matrix, &system.perm, system.border)?;
        let matrix_norm = matrix.norm_inf();
        let mut stepper = Self {
            system: system.clone(),
            dt,
            matrix,
            matrix_lo,
            solver,
            matrix_norm,
            condition: 0.0,
        };
        stepper.condition = stepper.estimate_condition();
        debug!("midpoint matrix condition estimate {:.3e}", stepper.condition);
        if stepper.condition > 1e12 {
            warn!("midpoint matrix is ill-conditioned (estimate {:.3e})", stepper.condition);
        }
        Ok(stepper)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn system(&self) -> &AffineSystem {
        &self.system
    }

    /// Lower bound on the condition number of the row-equilibrated
    /// midpoint matrix `DM` (`D` scaling every row to unit ∞-norm), from a
    /// few probe vectors.
    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    fn estimate_condition(&self) -> f64 {
        let n = self.system.dim();
        let row_norms: Vec<f64> = (0..n)
            .map(|i| self.matrix.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .collect();
        let probes = [
            vec![1.0; n],
            (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect::<Vec<_>>(),
            (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect::<Vec<_>>(),
        ];
        probes
            .iter()
            .map(|v| {
                // (DM)⁻¹ v = M⁻¹ D⁻¹ v
                let scaled: Vec<f64> = v.iter().zip(&row_norms).map(|(a, r)| a * r).collect();
                norm_inf(&self.solver.solve(&scaled)) / norm_inf(v).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }

    /// Solves `M d = rhs`, `M` including the stiffness rounding errors, by
    /// refinement against an exactly accumulated residual, then checks the
    /// backward error.
    fn solve_checked(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let residual = |d: &[f64]| -> Vec<f64> {
            let low = self.matrix_lo.mul_vec(d);
            self.matrix
                .affine_apply(d, &[(&low, 1.0), (rhs, -1.0)])
                .iter()
                .map(|v| -v)
                .collect()
        };
        let mut d = self.solver.solve(rhs);
        for _ in 0..2 {
            let corr = self.solver.solve(&residual(&d));
            for (di, ci) in d.iter_mut().zip(&corr) {
                *di += ci;
            }
        }
        let r = residual(&d);
        let scale = self.matrix_norm * norm_inf(&d) + norm_inf(rhs);
        let err = if scale > 0.0 { norm_inf(&r) / scale } else { 0.0 };
        if err <= 1e-12 {
            Ok(d)
        } else {
            Err(Error::Singular(format!("midpoint solve residual {err:.3e} after refinement")))
        }
    }

    /// One step with the external input held at `u_mid` over the step.
    ///
    /// Works in the scaled variables: the midpoint `y` solves
    /// `(I − dt/2 Ã) y = x̃ + dt/2 (c̃ + b̃ u)` and the new state is `2y − x̃`.
    /// Momentum rows are divided by `dt/2`, so the stiffness enters `M`
    /// unscaled, and its rounding errors are carried separately. The
    /// quadratic form conserved by the computed map is then the discrete
    /// energy itself, not a rounded neighbour of it.
    pub fn step_forced(&self, x: &[f64], u_mid: f64) -> Result<Vec<f64>> {
        let sys = &self.system;
        if x.len() != sys.dim() {
            return Err(Error::Dimension(format!(
                "state has length {}, system has dimension {}",
                x.len(),
                sys.dim()
            )));
        }
        let half = 0.5 * self.dt;
        let unit: Vec<f64> = (0..x.len())
            .map(|i| if sys.momentum[i] { sys.scale[i] / half } else { sys.scale[i] })
            .collect();
        let xs: Vec<f64> = x.iter().zip(&unit).map(|(v, s)| v * s).collect();
        let rhs: Vec<f64> = (0..x.len())
            .map(|i| {
                let f = sys.c[i] + sys.input[i] * u_mid;
                if sys.momentum[i] {
                    xs[i] + sys.scale[i] * f
                } else {
                    xs[i] + half * sys.scale[i] * f
                }
            })
            .collect();
        let y = self.solve_checked(&rhs)?;
        Ok((0..x.len()).map(|i| x[i] + 2.0 * (y[i] - xs[i]) / unit[i]).collect())
    }

    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.step_forced(x, 0.0)
    }
}

/// `I − h D Ã D⁻¹` with `D` dividing momentum rows by `h`, so the stiffness
/// entries enter unmultiplied.
fn midpoint_matrix(system: &AffineSystem, a: &CsrMatrix, h: f64, identity: bool) -> CsrMatrix {
    let n = system.dim();
    let level = |i: usize| i32::from(system.momentum[i]);
    let mut t: Vec<(usize, usize, f64)> = a
        .triplets()
        .map(|(r, c, v)| {
            let v = match 1 - level(r) + level(c) {
                0 => -v,
                1 => -h * v,
                _ => -h * (h * v),
            };
            (r, c, v)
        })
        .collect();
    if identity {
        t.extend((0..n).map(|i| (i, i, 1.0)));
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// One implicit-midpoint step, factoring the system afresh.
pub fn step_midpoint(system: &AffineSystem, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    MidpointStepper::new(system, dt)?.step(x)
}

/// Initial condition of a run; the first controller state is always reset
/// to `∫ g w(0) dz`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Beam at rest, controller at the origin.
    Zero,
    /// `factor · w_s` at rest, `w_s` the static response to the controller's `u_s`.
    ScaledStatic(f64),
    Given(ClosedLoopState),
}

pub type Forcing = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Everything needed for one run.
#[derive(Clone)]
pub struct Scenario {
    pub system: ClosedLoop,
    pub dt: f64,
    pub t_end: f64,
    /// Snapshot every `stride` steps.
    pub stride: usize,
    pub initial: InitialCondition,
    /// External plant voltage, evaluated at step midpoints.
    pub forcing: Option<Forcing>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("dt", &self.dt)
            .field("t_end", &self.t_end)
            .field("stride", &self.stride)
            .field("initial", &self.initial)
            .field("forced", &self.forcing.is_some())
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn new(system: ClosedLoop, dt: f64, t_end: f64) -> Self {
        Self {
            system,
            dt,
            t_end,
            stride: 100,
            initial: InitialCondition::Zero,
            forcing: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_initial(mut self, initial: InitialCondition) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_forcing(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.forcing = Some(Arc::new(f));
        self
    }

    /// Number of steps, `round(t_end / dt)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn initial_state(&self) -> Result<ClosedLoopState> {
        let sys = &self.system;
        let mut s = match &self.initial {
            InitialCondition::Zero => sys.zero_state(),
            InitialCondition::ScaledStatic(f) => {
                let ctrl = sys
                    .controller()
                    .ok_or_else(|| Error::param("initial", "a scaled static start needs a controller"))?;
                let mut s = sys.zero_state();
                s.w = solve_static(ctrl.u_s(), &sys.beam().profiles)?.scale(*f);
                s
            }
            InitialCondition::Given(s) => s.clone(),
        };
        s.t = 0.0;
        if sys.controller().is_some() {
            if s.x_c.is_empty() {
                return Err(Error::Dimension("controller state missing".into()));
            }
            s.x_c[0] = integrate_product(sys.beam().g(), &s.w)?;
        }
        Ok(s)
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub t: f64,
    pub h: f64,
    pub hc: f64,
    pub hcl: f64,
    /// Casimir value; NaN without a controller.
    pub c1: f64,
    pub u: f64,
    pub u_c: f64,
    pub y_c: f64,
    pub int_y: f64,
    /// `max |x_c^μ|` over the controller states after the first.
    pub damping_states: f64,
    /// Energy loss rate at the midpoint of the step ending here (at the
    /// state itself for the first record).
    pub diss: f64,
    /// External power supplied over the same step.
    pub supply: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub w: Vec<f64>,
}

/// Output of [`simulate`]: one record per step (plus the initial one) and
/// strided deflection snapshots.
#[derive(Debug, Clone)]
pub struct Trace {
    pub dt: f64,
    pub z: Vec<f64>,
    pub records: Vec<Record>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: ClosedLoopState,
    pub controlled: bool,
}

/// Integrates a scenario with the implicit midpoint rule.
pub fn simulate(scenario: &Scenario) -> Result<Trace> {
    if scenario.stride == 0 {
        return Err(Error::param("stride", "must be at least 1"));
    }
    if !(scenario.t_end > 0.0 && scenario.t_end.is_finite()) {
        return Err(Error::param("t_end", "must be positive and finite"));
    }
    let steps = scenario.steps();
    if steps == 0 {
        return Err(Error::param("t_end", "shorter than one step"));
    }
    let sys = &scenario.system;
    let system = assemble(sys)?;
    let stepper = MidpointStepper::new(&system, scenario.dt)?;
    let dt = scenario.dt;
    let forcing = |t: f64| scenario.forcing.as_ref().map_or(0.0, |f| f(t));

    let s0 = scenario.initial_state()?;
    let mut x = sys.pack(&s0)?;
    let mut records = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::with_capacity(steps / scenario.stride + 2);
    let diss0 = sys.dissipation_rate(&x)?;
    records.push(record(sys, &x, 0.0, forcing(0.0), diss0, 0.0)?);
    snapshots.push(snapshot(sys, &x, 0.0));

    for k in 0..steps {
        let t_mid = (k as f64 + 0.5) * dt;
        let u_mid = forcing(t_mid);
        let next = stepper.step_forced(&x, u_mid)?;
        let mid: Vec<f64> = x.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
        let diss = sys.dissipation_rate(&mid)?;
        let supply = if u_mid != 0.0 {
            let grad = sys.energy_gradient(&mid);
            u_mid * grad.iter().zip(&system.input).map(|(a, b)| a * b).sum::<f64>()
        } else {
            0.0
        };
        x = next;
        let t = (k + 1) as f64 * dt;
        records.push(record(sys, &x, t, forcing(t), diss, supply)?);
        if (k + 1) % scenario.stride == 0 || k + 1 == steps {
            snapshots.push(snapshot(sys, &x, t));
        }
    }
    Ok(Trace {
        dt,
        z: sys.grid().coordinates(),
        records,
        snapshots,
        final_state: sys.unpack(&x, steps as f64 * dt)?,
        controlled: sys.controller().is_some(),
    })
}

fn snapshot(sys: &ClosedLoop, x: &[f64], t: f64) -> Snapshot {
    let nf = sys.free();
    let mut w = Vec::with_capacity(nf + 1);
    w.push(0.0);
    w.extend_from_slice(&x[..nf]);
    Snapshot { t, w }
}

fn record(sys: &ClosedLoop, x: &[f64], t: f64, u_ext: f64, diss: f64, supply: f64) -> Result<Record> {
    let s = sys.unpack(x, t)?;
    let h = sys.plant_energy(&s)?;
    let hc = sys.controller_energy(&s)?;
    let ports = sys.ports(&s, u_ext)?;
    Ok(Record {
        t,
        h,
        hc,
        hcl: h + hc,
        c1: sys.casimir(&s)?.unwrap_or(f64::NAN),
        u: ports.u,
        u_c: ports.u_c,
        y_c: ports.y_c,
        int_y: ports.int_y,
        damping_states: s.x_c.iter().skip(1).fold(0.0, |m, v| m.max(v.abs())),
        diss,
        supply,
    })
}

/// Energy bookkeeping over a trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    /// Largest per-step increase of `H_cl` (zero if it never increases).
    pub max_increment: f64,
    pub max_hcl: f64,
    /// Largest `|ΔH_cl − dt·(supply − diss)|` over the steps, signed.
    pub max_mismatch: f64,
    /// `max |ΔH_cl/dt − (supply − diss)|` divided by the largest power.
    pub rel_mismatch: f64,
    /// `max |H_cl(t) − H_cl(0)|`.
    pub max_deviation: f64,
}

pub fn energy_report(trace: &Trace) -> EnergyReport {
    energy_report_records(&trace.records)
}

/// Same bookkeeping on bare records, e.g. read back from a log file.
pub fn energy_report_records(recs: &[Record]) -> EnergyReport {
    let mut max_increment = 0.0f64;
    let mut max_mismatch = 0.0f64;
    let mut worst = 0.0f64;
    let mut peak_power = 0.0f64;
    let h0 = recs.first().map_or(0.0, |r| r.hcl);
    let mut max_deviation = 0.0f64;
    let max_hcl = recs.iter().map(|r| r.hcl).fold(0.0, f64::max);
    for pair in recs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.t - a.t;
        let dh = b.hcl - a.hcl;
        max_increment = max_increment.max(dh);
        let mismatch = dh - dt * (b.supply - b.diss);
        if mismatch.abs() > max_mismatch.abs() {
            max_mismatch = mismatch;
        }
        worst = worst.max((mismatch / dt).abs());
        peak_power = peak_power.max(b.diss.abs()).max(b.supply.abs());
        max_deviation = max_deviation.max((b.hcl - h0).abs());
    }
    EnergyReport {
        max_increment,
        max_hcl,
        max_mismatch,
        rel_mismatch: if peak_power > 0.0 { worst / peak_power } else { worst },
        max_deviation,
    }
}

/// `max |𝒞(t) − 𝒞(0)|`, or `None` when no Casimir was recorded.
pub fn casimir_drift(trace: &Trace) -> Option<f64> {
    if !trace.controlled {
        return None;
    }
    let c0 = trace.records.first()?.c1;
    Some(trace.records.iter().map(|r| (r.c1 - c0).abs()).fold(0.0, f64::max))
}
