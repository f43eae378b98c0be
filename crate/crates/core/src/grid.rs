//! Age and space discretizations.
//!
//! The age variable lives on a uniform grid over `[0, a_max]` with trapezoid
//! quadrature weights. Space is a 1-D interval discretized with cell-centered
//! finite volumes, so no node sits on the boundary and Dirichlet, Robin and
//! Neumann conditions are all imposed by ghost-cell elimination. The
//! divergence form makes the Neumann operator exactly conservative under the
//! uniform cell mass weights, and the tridiagonal assembly is an M-matrix
//! whenever the reaction coefficient is nonnegative and the drift is small.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform age grid with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    nodes: Vec<f64>,
    step: f64,
    weights: Vec<f64>,
}

impl AgeGrid {
    /// Builds the grid with `n_a` intervals on `[0, a_max]`.
    pub fn new(a_max: f64, n_a: usize) -> Result<Self> {
        if !(a_max > 0.0) {
            return Err(Error::NonPositive {
                what: "a_max",
                value: a_max,
            });
        }
        if n_a < 8 {
            return Err(Error::AgeGridTooCoarse(n_a));
        }
        let step = a_max / n_a as f64;
        let nodes: Vec<f64> = (0..=n_a).map(|k| k as f64 * step).collect();
        let mut weights = vec![step; n_a + 1];
        weights[0] = 0.5 * step;
        weights[n_a] = 0.5 * step;
        Ok(Self {
            nodes,
            step,
            weights,
        })
    }

    pub fn a_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of intervals.
    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of nodes (`intervals + 1`).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Trapezoid quadrature of nodal samples over `[0, a_max]`.
    pub fn quadrature(&self, samples: &[f64]) -> f64 {
        assert_eq!(samples.len(), self.weights.len());
        self.weights.iter().zip(samples).map(|(w, v)| w * v).sum()
    }
}

/// Boundary condition at one endpoint of the interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Homogeneous Dirichlet (the `Gamma_0` piece).
    Dirichlet,
    /// `dw/dnu + nu0 w = 0` with `nu0 >= 0` (the `Gamma_1` piece).
    Robin(f64),
    /// No-flux; identical to `Robin(0)`.
    Neumann,
}

impl Boundary {
    pub fn validate(&self) -> Result<()> {
        if let Boundary::Robin(nu0) = self {
            if *nu0 < 0.0 {
                return Err(Error::NegativeRobinWeight(*nu0));
            }
        }
        Ok(())
    }
}

/// Coefficient fields of the elliptic operator, sampled at the cell centers.
#[derive(Debug, Clone)]
pub struct CoefficientFields {
    /// Diffusion coefficient (must be positive everywhere).
    pub diffusion: DVector<f64>,
    /// Drift coefficient of the first-order term.
    pub drift: DVector<f64>,
    /// Zeroth-order reaction coefficient.
    pub reaction: DVector<f64>,
}

impl CoefficientFields {
    pub fn diffusion_only(diffusion: DVector<f64>) -> Self {
        let n = diffusion.len();
        Self {
            diffusion,
            drift: DVector::zeros(n),
            reaction: DVector::zeros(n),
        }
    }
}

/// Cell-centered discretization of a 1-D interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    n: usize,
    h: f64,
    length: f64,
    bc: (Boundary, Boundary),
    centers: Vec<f64>,
}

impl SpaceGrid {
    pub fn new(length: f64, n_x: usize, bc: (Boundary, Boundary)) -> Result<Self> {
        if !(length > 0.0) {
            return Err(Error::NonPositive {
                what: "domain length",
                value: length,
            });
        }
        if n_x == 0 {
            return Err(Error::NonPositive {
                what: "space node count",
                value: 0.0,
            });
        }
        bc.0.validate()?;
        bc.1.validate()?;
        let h = length / n_x as f64;
        let centers = (0..n_x).map(|i| (i as f64 + 0.5) * h).collect();
        Ok(Self {
            n: n_x,
            h,
            length,
            bc,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn bc(&self) -> (Boundary, Boundary) {
        self.bc
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Discrete mass functional: the uniform cell weight is `h`.
    pub fn mass(&self, v: &DVector<f64>) -> f64 {
        self.h * v.sum()
    }

    /// Effective boundary conductance from ghost-cell elimination.
    ///
    /// The boundary flux leaving the domain equals `conductance * u_cell`,
    /// second-order accurate in `h`. Dirichlet is the `nu0 -> inf` limit of
    /// the Robin formula.
    fn conductance(&self, which: Boundary, a_face: f64) -> f64 {
        match which {
            Boundary::Dirichlet => 2.0 * a_face / self.h,
            Boundary::Robin(nu0) => 2.0 * nu0 * a_face / (2.0 + self.h * nu0),
            Boundary::Neumann => 0.0,
        }
    }

    /// Ghost-cell value at a boundary is `ghost_weight * u_cell`.
    fn ghost_weight(&self, which: Boundary) -> f64 {
        match which {
            Boundary::Dirichlet => -1.0,
            Boundary::Robin(nu0) => (2.0 - self.h * nu0) / (2.0 + self.h * nu0),
            Boundary::Neumann => 1.0,
        }
    }

    /// Assembles the matrix of `-d/dx(a d/dx .) + a1 d/dx . + a0 .` with the
    /// grid's boundary conditions, in conservative (flux) form.
    pub fn assemble(&self, coeffs: &CoefficientFields) -> Result<DMatrix<f64>> {
        let n = self.n;
        assert_eq!(coeffs.diffusion.len(), n);
        assert_eq!(coeffs.drift.len(), n);
        assert_eq!(coeffs.reaction.len(), n);
        for (i, &a) in coeffs.diffusion.iter().enumerate() {
            if !(a > 0.0) {
                return Err(Error::NonPositiveDiffusion { node: i, value: a });
            }
        }
        self.bc.0.validate()?;
        self.bc.1.validate()?;

        let h = self.h;
        let inv_h2 = 1.0 / (h * h);
        let mut m = DMatrix::zeros(n, n);

        // Diffusion, flux form: interior faces use the arithmetic mean of the
        // adjacent cell coefficients, boundary faces the one-sided cell value.
        for i in 0..n {
            if i + 1 < n {
                let a_face = 0.5 * (coeffs.diffusion[i] + coeffs.diffusion[i + 1]);
                m[(i, i)] += a_face * inv_h2;
                m[(i, i + 1)] -= a_face * inv_h2;
                m[(i + 1, i + 1)] += a_face * inv_h2;
                m[(i + 1, i)] -= a_face * inv_h2;
            }
        }
        // Boundary-face coefficients by linear extrapolation from the two
        // nearest cells (falling back to the cell value when that would lose
        // positivity, or with a single cell).
        let face = |near: f64, next: Option<f64>| -> f64 {
            match next {
                Some(next) => {
                    let extrapolated = 1.5 * near - 0.5 * next;
                    if extrapolated > 0.0 {
                        extrapolated
                    } else {
                        near
                    }
                }
                None => near,
            }
        };
        let a_left = face(coeffs.diffusion[0], (n > 1).then(|| coeffs.diffusion[1]));
        let a_right = face(
            coeffs.diffusion[n - 1],
            (n > 1).then(|| coeffs.diffusion[n - 2]),
        );
        m[(0, 0)] += self.conductance(self.bc.0, a_left) / h;
        m[(n - 1, n - 1)] += self.conductance(self.bc.1, a_right) / h;

        // Drift: central differences, with the ghost value substituted at the
        // boundary cells. Presets keep the drift small, so no upwinding.
        for i in 0..n {
            let a1 = coeffs.drift[i];
            if a1 == 0.0 || n == 1 {
                continue;
            }
            let inv_2h = a1 / (2.0 * h);
            if i == 0 {
                m[(i, i)] -= inv_2h * self.ghost_weight(self.bc.0);
                m[(i, i + 1)] += inv_2h;
            } else if i == n - 1 {
                m[(i, i - 1)] -= inv_2h;
                m[(i, i)] += inv_2h * self.ghost_weight(self.bc.1);
            } else {
                m[(i, i - 1)] -= inv_2h;
                m[(i, i + 1)] += inv_2h;
            }
        }

        // Reaction.
        for i in 0..n {
            m[(i, i)] += coeffs.reaction[i];
        }

        Ok(m)
    }
}

/// Bundles the two discretizations; cheap to clone and share.
#[derive(Debug, Clone)]
pub struct Grids {
    pub age: Arc<AgeGrid>,
    pub space: Arc<SpaceGrid>,
}

impl Grids {
    pub fn new(age: AgeGrid, space: SpaceGrid) -> Self {
        Self {
            age: Arc::new(age),
            space: Arc::new(space),
        }
    }
}
