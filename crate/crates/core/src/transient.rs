//! Time integration of the evolution problem, used to validate computed
//! equilibria and probe their empirical stability.
//!
//! Time and age steps are locked (`dt = da`) so that the transport part is
//! upwinded exactly along characteristics, with no numerical age diffusion.
//! One step shifts each cohort to the next age node through the implicit
//! decay/diffusion operator of its origin node, drops the oldest cohort at
//! the maximal age, and closes the system with the renewal condition solved
//! implicitly for the newborn slice (the newborn quadrature weight appears on
//! both sides). Coefficients are frozen at the pre-step field throughout, so
//! a converged equilibrium of the stationary solver is a fixed point of the
//! step to rounding.
//!
//! Convergence observations made with this module are empirical evidence
//! only; nothing here constitutes a stability proof.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::evolution::{CoeffContext, DensityField, Propagator};
use crate::grid::Grids;
use crate::model::ModelSpec;

/// One recorded step of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TransientSample {
    pub t: f64,
    /// Steady-state residual `|u(t+dt) - u(t)|_sup / dt`.
    pub residual: f64,
    pub mass: f64,
    pub min_u: f64,
}

/// State of a transient run.
#[derive(Debug, Clone)]
pub struct TransientState {
    pub u: DensityField,
    pub t: f64,
    pub history: Vec<TransientSample>,
}

impl TransientState {
    pub fn new(u: DensityField) -> Self {
        Self {
            u,
            t: 0.0,
            history: Vec::new(),
        }
    }

    pub fn last_residual(&self) -> Option<f64> {
        self.history.last().map(|s| s.residual)
    }
}

/// Advances one locked step `dt = da` at parameter `n`.
pub fn step_transient(
    model: &ModelSpec,
    grids: &Grids,
    n: f64,
    state: &TransientState,
    dt: f64,
) -> Result<TransientState> {
    let da = grids.age.step();
    if (dt - da).abs() > 1e-12 * da.max(1.0) {
        return Err(Error::TimeStepMismatch { dt, da });
    }

    let ctx = CoeffContext::new(model, grids, &state.u);
    let propagator = Propagator::new(model, grids, &state.u)?;
    let n_a = grids.age.intervals();
    let weights = grids.age.weights();

    let mut next = DensityField::zeros(grids);
    // Cohort shift through the implicit decay/diffusion step of the origin
    // node; the oldest cohort exits.
    for k in 0..n_a {
        let advanced = propagator.step(k, &state.u.row(k))?;
        next.values.row_mut(k + 1).copy_from(&advanced.transpose());
    }

    // Renewal, solved implicitly for the newborn slice: the age-zero
    // quadrature weight couples row 0 to itself.
    let n_x = grids.space.len();
    let mut rhs = DVector::zeros(n_x);
    for (k, w) in weights.iter().enumerate().skip(1) {
        let mut b = ctx.birth(k);
        b.component_mul_assign(&next.row(k));
        rhs.axpy(n * w, &b, 1.0);
    }
    let b0 = ctx.birth(0);
    let mut newborn = DVector::zeros(n_x);
    for i in 0..n_x {
        let denom = 1.0 - n * weights[0] * b0[i];
        if denom <= 1e-8 {
            return Err(Error::RenewalIllPosed(denom));
        }
        newborn[i] = rhs[i] / denom;
    }
    next.values.row_mut(0).copy_from(&newborn.transpose());

    let residual = next.sup_distance(&state.u) / dt;
    let t = state.t + dt;
    let mut history = state.history.clone();
    history.push(TransientSample {
        t,
        residual,
        mass: next.total_mass(),
        min_u: next.min_value(),
    });
    Ok(TransientState {
        u: next,
        t,
        history,
    })
}

/// Steps until the steady residual drops below `tol` or `t_max` is reached.
/// Non-convergence is a recorded outcome, not an error.
pub fn run_to_steady(
    model: &ModelSpec,
    grids: &Grids,
    n: f64,
    u0: DensityField,
    t_max: f64,
    tol: f64,
) -> Result<TransientState> {
    if !(t_max > 0.0) {
        return Err(Error::NonPositive {
            what: "t_max",
            value: t_max,
        });
    }
    let dt = grids.age.step();
    let mut state = TransientState::new(u0);
    while state.t < t_max {
        state = step_transient(model, grids, n, &state, dt)?;
        if state.last_residual().unwrap() <= tol {
            break;
        }
    }
    Ok(state)
}
