//! Uniform 1-D grid, second-order difference operators and trapezoidal
//! quadrature on `[0, L]`.
//!
//! Interior derivatives use the usual central stencils; both endpoints use
//! second-order one-sided stencils so that every operator here has the same
//! convergence order. A [`DiffOperator`] can alternatively close the left end
//! with a reflected ghost node, which is how the clamped end of the beam is
//! discretized (`w_{-1} = w_1`, hence `w_1(0) = 0` to second order).

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// Uniform mesh `z_i = i h`, `i = 0..N-1`, with `h = L / (N - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    length: f64,
    nodes: usize,
    spacing: f64,
}

impl Grid {
    /// Smallest admissible node count: the one-sided endpoint stencils of
    /// [`d11`] reach four nodes inward from both ends.
    pub const MIN_NODES: usize = 9;

    pub fn new(length: f64, nodes: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "domain length must be positive and finite, got {length}"
            )));
        }
        if nodes < Self::MIN_NODES {
            return Err(Error::InvalidGrid(format!(
                "need at least {} nodes, got {nodes}",
                Self::MIN_NODES
            )));
        }
        Ok(Self {
            length,
            nodes,
            spacing: length / (nodes - 1) as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Coordinate of node `i`. The last node is pinned to `L` exactly.
    pub fn z(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.length
        } else {
            i as f64 * self.spacing
        }
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.z(i)).collect()
    }

    /// Trapezoidal weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.nodes {
            0.5 * self.spacing
        } else {
            self.spacing
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.weight(i)).collect()
    }
}

/// Builds a uniform grid; see [`Grid::new`].
pub fn make_grid(length: f64, nodes: usize) -> Result<Grid> {
    Grid::new(length, nodes)
}

/// Nodal values of a real function on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::InvalidField(format!(
                "expected {} values, got {}",
                grid.nodes(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at the grid nodes.
    ///
    /// Panics if `f` produces a non-finite value.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = (0..grid.nodes()).map(|i| f(grid.z(i))).collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "Field::from_fn produced a non-finite sample"
        );
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.nodes()],
        }
    }

    /// Internal constructor for values produced by finite arithmetic on
    /// already-validated fields.
    pub(crate) fn from_values(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.nodes());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_values(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.ensure_same_grid(other)?;
        Ok(Field::from_values(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|v| s * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

impl std::ops::Index<usize> for Field {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Contiguous row stencil: `sum_k weights[k] * f[start + k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub start: usize,
    weights: [f64; 4],
    len: usize,
}

impl Stencil {
    fn new(start: usize, w: &[f64], scale: f64) -> Self {
        let mut weights = [0.0; 4];
        for (dst, &src) in weights.iter_mut().zip(w) {
            *dst = src * scale;
        }
        Self {
            start,
            weights,
            len: w.len(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.len]
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights()
            .iter()
            .enumerate()
            .map(move |(k, &w)| (self.start + k, w))
    }

    pub fn apply(&self, f: &[f64]) -> f64 {
        self.entries().map(|(j, w)| w * f[j]).sum()
    }
}

/// Closure of the left endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeftEnd {
    /// Second-order one-sided stencil.
    #[default]
    OneSided,
    /// Reflected ghost node `f_{-1} = f_1` (zero slope at `z = 0`).
    Clamped,
}

/// First- or second-derivative operator as a sparse row-stencil matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffOperator {
    grid: Grid,
    order: u8,
    left: LeftEnd,
}

impl DiffOperator {
    pub fn first(grid: Grid, left: LeftEnd) -> Self {
        Self {
            grid,
            order: 1,
            left,
        }
    }

    pub fn second(grid: Grid, left: LeftEnd) -> Self {
        Self {
            grid,
            order: 2,
            left,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn row(&self, i: usize) -> Stencil {
        let n = self.grid.nodes();
        let h = self.grid.spacing();
        let last = n - 1;
        match self.order {
            1 => {
                let s = 1.0 / (2.0 * h);
                if i == 0 {
                    match self.left {
                        LeftEnd::OneSided => Stencil::new(0, &[-3.0, 4.0, -1.0], s),
                        LeftEnd::Clamped => Stencil::new(0, &[], s),
                    }
                } else if i == last {
                    Stencil::new(last - 2, &[1.0, -4.0, 3.0], s)
                } else {
                    Stencil::new(i - 1, &[-1.0, 0.0, 1.0], s)
                }
            }
            _ => {
                let s = 1.0 / (h * h);
                if i == 0 {
                    match self.left {
                        LeftEnd::OneSided => Stencil::new(0, &[2.0, -5.0, 4.0, -1.0], s),
                        LeftEnd::Clamped => Stencil::new(0, &[-2.0, 2.0], s),
                    }
                } else if i == last {
                    Stencil::new(last - 3, &[-1.0, 4.0, -5.0, 2.0], s)
                } else {
                    Stencil::new(i - 1, &[1.0, -2.0, 1.0], s)
                }
            }
        }
    }

    pub fn apply_slice(&self, f: &[f64]) -> Vec<f64> {
        (0..self.grid.nodes()).map(|i| self.row(i).apply(f)).collect()
    }

    pub fn apply(&self, f: &Field) -> Result<Field> {
        if *f.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Field::from_values(self.grid, self.apply_slice(f.values())))
    }

    /// `Dᵀ v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.nodes()];
        for (i, &vi) in v.iter().enumerate() {
            for (j, w) in self.row(i).entries() {
                out[j] += w * vi;
            }
        }
        out
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.grid.nodes();
        let mut triplets = Vec::with_capacity(4 * n);
        for i in 0..n {
            triplets.extend(self.row(i).entries().map(|(j, w)| (i, j, w)));
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }
}

/// First derivative, central inside and one-sided at both ends.
pub fn d1(f: &Field) -> Field {
    let op = DiffOperator::first(*f.grid(), LeftEnd::OneSided);
    Field::from_values(*f.grid(), op.apply_slice(f.values()))
}

/// Second derivative, three-point inside and four-point one-sided at both ends.
pub fn d11(f: &Field) -> Field {
    let op = DiffOperator::second(*f.grid(), LeftEnd::OneSided);
    Field::from_values(*f.grid(), op.apply_slice(f.values()))
}

/// Trapezoidal rule with weights `(h/2, h, ..., h, h/2)`.
pub fn integrate(f: &Field) -> f64 {
    let g = f.grid();
    let v = f.values();
    let n = v.len();
    let inner: f64 = v[1..n - 1].iter().sum();
    g.spacing() * (inner + 0.5 * (v[0] + v[n - 1]))
}

/// Trapezoidal integral of the pointwise product `f * g`.
pub fn integrate_product(f: &Field, g: &Field) -> Result<f64> {
    f.ensure_same_grid(g)?;
    let grid = f.grid();
    Ok(f.values()
        .iter()
        .zip(g.values())
        .enumerate()
        .map(|(i, (a, b))| grid.weight(i) * a * b)
        .sum())
}

/// Endpoint samples `(f(0), f(L))`.
pub fn boundary_eval(f: &Field) -> (f64, f64) {
    let v = f.values();
    (v[0], v[v.len() - 1])
}
