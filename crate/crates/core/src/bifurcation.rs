//! Local branch expansion, the nonlinear equilibrium solver, and
//! amplitude-parametrized continuation.
//!
//! The trivial equilibrium loses uniqueness at the critical parameter value
//! `n = 1` (after normalization), where a branch of nontrivial equilibria
//! crosses. This module computes the second-order data of that branch at the
//! crossing, solves the full nonlinear equilibrium system at prescribed
//! amplitude, and marches the branch in the amplitude parameter with a
//! predictor from the expansion.
//!
//! The kernel coordinate of a field is realized as `<psi, u(0)>`: the trace
//! paired with the left principal eigenvector. The variation-of-constants
//! part of any correction has zero trace, so the expansion's normalization
//! constraint collapses to `<psi, xi> = 0`, which is handled by one bordered
//! linear solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::evolution::{
    birth_functional, operators_for_field, BirthVariant, CoeffContext, DensityField, Propagator,
};
use crate::grid::Grids;
use crate::model::ModelSpec;
use crate::spectral::{assemble_q, kernel_simplicity_check, principal_pair, SpectralData};

/// Solver knobs shared by the expansion, corrector and continuation.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Sup-norm residual target of the Newton corrector.
    pub tol_newton: f64,
    pub max_newton: usize,
    /// Forward-difference step of the corrector Jacobian.
    pub jacobian_step: f64,
    /// Sup-norm tolerance of the coefficient self-consistency sweep.
    pub inner_tol: f64,
    pub max_inner: usize,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_newton: 1e-9,
            max_newton: 50,
            jacobian_step: 1e-7,
            inner_tol: 1e-11,
            max_inner: 100,
            eigen_tol: 1e-12,
            eigen_max_iter: 100_000,
        }
    }
}

/// Second-order branch data at the bifurcation point.
#[derive(Debug, Clone)]
pub struct Expansion {
    /// Kernel direction of the linearization: the propagated right
    /// eigenvector.
    pub kernel_field: DensityField,
    /// Source term from the directional derivative of the frozen operator
    /// along the kernel direction.
    pub source: DensityField,
    /// Half the second directional derivative of the birth remainder.
    pub quadratic: DVector<f64>,
    /// Branch slope: `n(eps) = 1 + slope * eps + o(eps)`.
    pub slope: f64,
    /// Trace of the second-order correction, orthogonal to `psi`.
    pub xi: DVector<f64>,
    /// Second-order density correction.
    pub correction: DensityField,
    /// Consistency residual of the bordered solve; must be tiny, otherwise
    /// the projection that defined the slope was wrong.
    pub tau: f64,
    /// Principal pair of the normalized low-density reproduction operator.
    pub spectral: SpectralData,
    /// Advisory observations (finite-difference step checks and the like).
    pub notes: Vec<String>,
}

const TAU_TOLERANCE: f64 = 1e-8;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;
const FD_AGREEMENT_WARN: f64 = 1e-3;

/// Directional derivative of the frozen operator at zero density along `v`,
/// applied agewise to `v` itself. Central difference in the step `delta`.
fn directional_source(
    model: &ModelSpec,
    grids: &Grids,
    v: &DensityField,
    delta: f64,
) -> Result<DensityField> {
    let plus = operators_for_field(model, grids, &v.scale(delta))?;
    let minus = operators_for_field(model, grids, &v.scale(-delta))?;
    let mut h = DensityField::zeros(grids);
    for k in 0..grids.age.len() {
        let derivative = (&plus[k] - &minus[k]) / (2.0 * delta);
        let row = derivative * v.row(k);
        h.values.row_mut(k).copy_from(&row.transpose());
    }
    Ok(h)
}

/// Second directional difference of the birth remainder functional along `v`
/// (valid because the remainder and its derivative vanish at zero density),
/// together with a probe of the first derivative that should be zero.
fn quadratic_term(
    model: &ModelSpec,
    grids: &Grids,
    v: &DensityField,
    step: f64,
) -> (DVector<f64>, f64) {
    let plus = birth_functional(model, grids, &v.scale(step), BirthVariant::Remainder);
    let minus = birth_functional(model, grids, &v.scale(-step), BirthVariant::Remainder);
    let g = (&plus + &minus) / (2.0 * step * step);
    let first_derivative = (&plus - &minus).amax() / (2.0 * step);
    (g, first_derivative)
}

/// Computes the local expansion of the branch at the bifurcation point.
///
/// Requires a normalized model whose low-density reproduction operator has a
/// one-dimensional kernel of `I - Q0`; refuses otherwise.
pub fn local_expansion(model: &ModelSpec, grids: &Grids, fd_step: f64) -> Result<Expansion> {
    if !(fd_step > 0.0) {
        return Err(Error::NonPositive {
            what: "fd_step",
            value: fd_step,
        });
    }
    let opts = SolveOptions::default();
    let zero = DensityField::zeros(grids);
    let q0 = assemble_q(model, grids, &zero)?;
    let spectral = principal_pair(&q0, opts.eigen_tol, opts.eigen_max_iter)?;
    if (spectral.radius - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::NotNormalized(spectral.radius));
    }
    let report = kernel_simplicity_check(&q0);
    if report.dim_kernel != 1 {
        return Err(Error::SimplicityGate {
            dim: report.dim_kernel,
        });
    }

    let mut notes = Vec::new();
    let propagator = Propagator::new(model, grids, &zero)?;
    let v = propagator.propagate(&spectral.right)?;

    let h = directional_source(model, grids, &v, fd_step)?;
    let h_half = directional_source(model, grids, &v, fd_step / 2.0)?;
    let h_scale = h.sup_norm().max(1.0);
    let h_disagreement = h.sup_distance(&h_half) / h_scale;
    if h_disagreement > FD_AGREEMENT_WARN {
        notes.push(format!(
            "operator derivative changes by {h_disagreement:.2e} under step halving; \
             consider a smaller fd_step"
        ));
    }

    let (g, first_derivative) = quadratic_term(model, grids, &v, fd_step);
    let (g_half, _) = quadratic_term(model, grids, &v, fd_step / 2.0);
    let g_scale = g.amax().max(1.0);
    let g_disagreement = (&g - &g_half).amax() / g_scale;
    if g_disagreement > FD_AGREEMENT_WARN {
        notes.push(format!(
            "birth remainder curvature changes by {g_disagreement:.2e} under step halving"
        ));
    }
    if first_derivative > 1e-6 * g_scale {
        notes.push(format!(
            "birth remainder has nonzero derivative {first_derivative:.2e} at zero density; \
             the expansion assumes it vanishes"
        ));
    }

    let k0h = propagator.duhamel(&h)?;
    let ell0_k0h = birth_functional(model, grids, &k0h, BirthVariant::Linear);
    let slope = spectral.left.dot(&(&ell0_k0h - &g));

    // Bordered system: (I - Q0) xi + tau B = slope B + g - ell0(K0 h),
    // <psi, xi> = 0. The right side lies in the range of I - Q0 by
    // construction, so tau must come out at rounding level.
    let n = grids.space.len();
    let rhs_top = slope * &spectral.right + &g - &ell0_k0h;
    let mut bordered = DMatrix::zeros(n + 1, n + 1);
    bordered
        .view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) - &q0));
    for i in 0..n {
        bordered[(i, n)] = spectral.right[i];
        bordered[(n, i)] = spectral.left[i];
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from(&rhs_top);
    let solution = bordered.lu().solve(&rhs).ok_or(Error::SingularBordered)?;
    let xi = solution.rows(0, n).into_owned();
    let tau = solution[n];
    if tau.abs() > TAU_TOLERANCE {
        return Err(Error::TauResidual(tau.abs()));
    }

    let correction = propagator.propagate(&xi)?.add_scaled(-1.0, &k0h);

    Ok(Expansion {
        kernel_field: v,
        source: h,
        quadratic: g,
        slope,
        xi,
        correction,
        tau,
        spectral,
        notes,
    })
}

impl Expansion {
    /// Predicted density field at amplitude `eps`.
    pub fn predict_field(&self, eps: f64) -> DensityField {
        self.kernel_field
            .scale(eps)
            .add_scaled(eps * eps, &self.correction)
    }

    /// Predicted parameter value at amplitude `eps`.
    pub fn predict_parameter(&self, eps: f64) -> f64 {
        1.0 + self.slope * eps
    }
}

/// One computed point of the branch.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    /// Amplitude: the kernel coordinate of the trace.
    pub eps: f64,
    /// Parameter value.
    pub n: f64,
    pub u: DensityField,
    /// Spectral radius of the reproduction operator frozen at `u`.
    pub r_qu: f64,
    /// Final sup-norm residual of the equilibrium system.
    pub residual: f64,
    pub positive: bool,
    pub sign_flipped: bool,
    pub converged: bool,
    /// Scalar reproduction bound at this point (at most one certifies the
    /// supercritical regime); `None` until classified.
    pub repro_bound: Option<f64>,
}

impl BranchPoint {
    /// A bare seed for the corrector.
    pub fn seed(eps: f64, n: f64, u: DensityField) -> Self {
        Self {
            eps,
            n,
            u,
            r_qu: f64::NAN,
            residual: f64::NAN,
            positive: false,
            sign_flipped: false,
            converged: false,
            repro_bound: None,
        }
    }

    /// The trivial equilibrium at parameter `n`.
    pub fn trivial(grids: &Grids, n: f64, r_q0: f64) -> Self {
        Self {
            eps: 0.0,
            n,
            u: DensityField::zeros(grids),
            r_qu: r_q0,
            residual: 0.0,
            positive: true,
            sign_flipped: false,
            converged: true,
            repro_bound: None,
        }
    }
}

/// Which quantity the corrector holds fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    /// Prescribe the amplitude `<psi, u(0)>` and solve for the parameter.
    Amplitude(f64),
    /// Hold the parameter fixed and solve for the trace alone.
    Parameter(f64),
}

/// The density field reproduced from a trace by coefficient freezing:
/// evaluate coefficients at the iterate, re-propagate, repeat to a fixed
/// point.
fn self_consistent_field(
    model: &ModelSpec,
    grids: &Grids,
    w: &DVector<f64>,
    start: &DensityField,
    opts: &SolveOptions,
) -> Result<DensityField> {
    let mut field = start.clone();
    let mut diff = f64::INFINITY;
    for _ in 0..opts.max_inner {
        let next = Propagator::new(model, grids, &field)?.propagate(w)?;
        diff = next.sup_distance(&field);
        field = next;
        if diff <= opts.inner_tol {
            return Ok(field);
        }
    }
    Err(Error::InnerLoopStalled {
        sweeps: opts.max_inner,
        diff,
    })
}

struct ResidualEval {
    residual: DVector<f64>,
    field: DensityField,
    ell: DVector<f64>,
}

fn equilibrium_residual(
    model: &ModelSpec,
    grids: &Grids,
    psi: &DVector<f64>,
    w: &DVector<f64>,
    n: f64,
    constraint: Constraint,
    warm: &DensityField,
    opts: &SolveOptions,
) -> Result<ResidualEval> {
    let field = self_consistent_field(model, grids, w, warm, opts)?;
    let ell = birth_functional(model, grids, &field, BirthVariant::Full);
    let n_x = w.len();
    let dim = match constraint {
        Constraint::Amplitude(_) => n_x + 1,
        Constraint::Parameter(_) => n_x,
    };
    let mut residual = DVector::zeros(dim);
    for i in 0..n_x {
        residual[i] = w[i] - n * ell[i];
    }
    if let Constraint::Amplitude(eps) = constraint {
        residual[n_x] = psi.dot(w) - eps;
    }
    Ok(ResidualEval {
        residual,
        field,
        ell,
    })
}

/// Solves the equilibrium system by Newton iteration with a forward-difference
/// Jacobian in the trace and an analytic parameter column.
///
/// Returns the best point found with `converged` reporting whether the
/// residual target was met; stagnation is flagged, not an error.
pub fn solve_equilibrium(
    model: &ModelSpec,
    grids: &Grids,
    psi: &DVector<f64>,
    constraint: Constraint,
    guess: &BranchPoint,
    opts: &SolveOptions,
) -> Result<BranchPoint> {
    // The trivial equilibrium solves the system for every parameter value.
    if let Constraint::Amplitude(eps) = constraint {
        if eps == 0.0 {
            let zero = DensityField::zeros(grids);
            let q = assemble_q(model, grids, &zero)?;
            let r = principal_pair(&q, opts.eigen_tol, opts.eigen_max_iter)?.radius;
            return Ok(BranchPoint::trivial(grids, guess.n, r));
        }
    }

    let n_x = grids.space.len();
    let mut w = guess.u.trace();
    let mut n = match constraint {
        Constraint::Parameter(n) => n,
        Constraint::Amplitude(_) => guess.n,
    };
    let mut warm = guess.u.clone();

    let mut eval = equilibrium_residual(model, grids, psi, &w, n, constraint, &warm, opts)?;
    warm = eval.field.clone();
    let mut best = (w.clone(), n, eval.field.clone(), eval.residual.amax());
    let solves_for_n = matches!(constraint, Constraint::Amplitude(_));
    let dim = if solves_for_n { n_x + 1 } else { n_x };
    let mut converged = eval.residual.amax() <= opts.tol_newton;

    let mut iterations = 0;
    while !converged && iterations < opts.max_newton {
        iterations += 1;
        let mut jacobian = DMatrix::zeros(dim, dim);
        let step = opts.jacobian_step;
        for j in 0..n_x {
            let mut w_pert = w.clone();
            w_pert[j] += step;
            let pert =
                equilibrium_residual(model, grids, psi, &w_pert, n, constraint, &warm, opts)?;
            let column = (&pert.residual - &eval.residual) / step;
            jacobian.column_mut(j).copy_from(&column);
        }
        if solves_for_n {
            // d/dn of w - n ell(u[w]) is -ell; the field does not feel n.
            for i in 0..n_x {
                jacobian[(i, n_x)] = -eval.ell[i];
            }
            jacobian[(n_x, n_x)] = 0.0;
        }

        let delta = match jacobian.lu().solve(&(-&eval.residual)) {
            Some(d) => d,
            None => break, // singular Jacobian: stagnate with the best point
        };

        // Plain Newton step with a halving guard.
        let mut accepted = false;
        let mut damping = 1.0;
        for _ in 0..5 {
            let mut w_new = w.clone();
            for i in 0..n_x {
                w_new[i] += damping * delta[i];
            }
            let n_new = if solves_for_n {
                n + damping * delta[n_x]
            } else {
                n
            };
            match equilibrium_residual(model, grids, psi, &w_new, n_new, constraint, &warm, opts) {
                Ok(trial) => {
                    let improved = trial.residual.amax() < eval.residual.amax();
                    let small_enough = trial.residual.amax() <= opts.tol_newton;
                    if improved || small_enough || damping < 0.2 {
                        w = w_new;
                        n = n_new;
                        eval = trial;
                        warm = eval.field.clone();
                        accepted = true;
                        break;
                    }
                }
                Err(Error::InnerLoopStalled { .. }) => {}
                Err(other) => return Err(other),
            }
            damping *= 0.5;
        }
        if !accepted {
            break;
        }
        if eval.residual.amax() < best.3 {
            best = (w.clone(), n, eval.field.clone(), eval.residual.amax());
        }
        converged = eval.residual.amax() <= opts.tol_newton;
    }

    let (w, n, field, residual) = if eval.residual.amax() <= best.3 {
        (w, n, eval.field, eval.residual.amax())
    } else {
        best
    };

    let q_u = assemble_q(model, grids, &field)?;
    let r_qu = principal_pair(&q_u, opts.eigen_tol, opts.eigen_max_iter)
        .map(|d| d.radius)
        .unwrap_or(f64::NAN);
    let eps = psi.dot(&w);

    Ok(BranchPoint {
        eps,
        n,
        u: field,
        r_qu,
        residual,
        positive: false,
        sign_flipped: false,
        converged: residual <= opts.tol_newton,
        repro_bound: None,
    })
}

/// Bifurcation direction over the positive-amplitude side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Supercritical,
    Subcritical,
    Undetermined,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Direction::Supercritical => "Supercritical",
            Direction::Subcritical => "Subcritical",
            Direction::Undetermined => "Undetermined",
        };
        f.write_str(s)
    }
}

/// A computed branch: points ordered by amplitude with the attained parameter
/// window and direction classification.
#[derive(Debug, Clone)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Closure of the attained parameter values; brackets 1 by construction.
    pub n_window: (f64, f64),
    pub direction: Direction,
    /// Amplitudes where the corrector failed, with the reason; the branch is
    /// truncated there. This is also the empirical validity radius.
    pub truncations: Vec<(f64, String)>,
}

const DIRECTION_TOLERANCE: f64 = 1e-8;

/// Marches the branch over `eps in +-[eps_max/steps, ..., eps_max]`.
///
/// Every point is seeded from the expansion predictor, never from its
/// neighbor, so points could in principle be solved concurrently with
/// identical results.
pub fn continue_branch(
    model: &ModelSpec,
    grids: &Grids,
    expansion: &Expansion,
    eps_max: f64,
    steps: usize,
    opts: &SolveOptions,
) -> Result<Branch> {
    if !(eps_max > 0.0) {
        return Err(Error::NonPositive {
            what: "eps_max",
            value: eps_max,
        });
    }
    if steps == 0 {
        return Err(Error::NonPositive {
            what: "steps",
            value: 0.0,
        });
    }
    let psi = &expansion.spectral.left;
    let mut trivial = BranchPoint::trivial(grids, 1.0, expansion.spectral.radius);
    trivial.repro_bound = Some(reproduction_bound(model, grids, &trivial.u)?);
    let mut points = vec![trivial];
    let mut truncations = Vec::new();

    for side in [1.0, -1.0] {
        for i in 1..=steps {
            let eps = side * eps_max * i as f64 / steps as f64;
            let seed = BranchPoint::seed(
                eps,
                expansion.predict_parameter(eps),
                expansion.predict_field(eps),
            );
            match solve_equilibrium(model, grids, psi, Constraint::Amplitude(eps), &seed, opts) {
                Ok(point) if point.converged => {
                    let mut point = point;
                    classify_point(model, grids, psi, &mut point, opts)?;
                    points.push(point);
                }
                Ok(point) => {
                    truncations.push((
                        eps,
                        format!("corrector stagnated at residual {:.3e}", point.residual),
                    ));
                    break;
                }
                Err(err) => {
                    truncations.push((eps, err.to_string()));
                    break;
                }
            }
        }
    }

    points.sort_by(|a, b| a.eps.partial_cmp(&b.eps).unwrap());
    let n_min = points.iter().map(|p| p.n).fold(f64::INFINITY, f64::min);
    let n_max = points.iter().map(|p| p.n).fold(f64::NEG_INFINITY, f64::max);

    let positive_side: Vec<&BranchPoint> = points.iter().filter(|p| p.eps > 0.0).collect();
    let direction = if positive_side.is_empty() {
        Direction::Undetermined
    } else {
        let min_n = positive_side
            .iter()
            .map(|p| p.n)
            .fold(f64::INFINITY, f64::min);
        let max_n = positive_side
            .iter()
            .map(|p| p.n)
            .fold(f64::NEG_INFINITY, f64::max);
        if min_n >= 1.0 - DIRECTION_TOLERANCE {
            Direction::Supercritical
        } else if max_n <= 1.0 + DIRECTION_TOLERANCE {
            Direction::Subcritical
        } else {
            Direction::Undetermined
        }
    };

    Ok(Branch {
        points,
        n_window: (n_min, n_max),
        direction,
        truncations,
    })
}

const POSITIVITY_TOLERANCE: f64 = -1e-12;
const SYMMETRY_PROBE_TOLERANCE: f64 = 1e-12;

/// Fills the positivity and sign-flip flags and the scalar reproduction
/// bound of a converged point.
///
/// A negative point on a sign-symmetric model is re-solved at the flipped
/// trace; if the flipped equilibrium is positive, the point is marked
/// `sign_flipped` (the positive representative is `-u`).
pub fn classify_point(
    model: &ModelSpec,
    grids: &Grids,
    psi: &DVector<f64>,
    point: &mut BranchPoint,
    opts: &SolveOptions,
) -> Result<()> {
    point.positive = point.u.min_value() >= POSITIVITY_TOLERANCE;
    point.sign_flipped = false;

    if !point.positive && coefficients_sign_symmetric(model, grids, &point.u) {
        let flipped_seed = BranchPoint::seed(-point.eps, point.n, point.u.scale(-1.0));
        let flipped = solve_equilibrium(
            model,
            grids,
            psi,
            Constraint::Amplitude(-point.eps),
            &flipped_seed,
            opts,
        )?;
        if flipped.converged && flipped.u.min_value() >= POSITIVITY_TOLERANCE {
            point.sign_flipped = true;
        }
    }

    point.repro_bound = Some(reproduction_bound(model, grids, &point.u)?);
    Ok(())
}

/// True when every coefficient agrees at `u` and `-u` to rounding.
fn coefficients_sign_symmetric(model: &ModelSpec, grids: &Grids, u: &DensityField) -> bool {
    let minus = u.scale(-1.0);
    let ctx_p = CoeffContext::new(model, grids, u);
    let ctx_m = CoeffContext::new(model, grids, &minus);
    for k in 0..grids.age.len() {
        let pairs = [(ctx_p.mu(k), ctx_m.mu(k)), (ctx_p.birth(k), ctx_m.birth(k))];
        for (a, b) in pairs {
            if (a - b).amax() > SYMMETRY_PROBE_TOLERANCE {
                return false;
            }
        }
        let fp = ctx_p.elliptic_fields(k);
        let fm = ctx_m.elliptic_fields(k);
        if (fp.diffusion - fm.diffusion).amax() > SYMMETRY_PROBE_TOLERANCE
            || (fp.drift - fm.drift).amax() > SYMMETRY_PROBE_TOLERANCE
            || (fp.reaction - fm.reaction).amax() > SYMMETRY_PROBE_TOLERANCE
        {
            return false;
        }
    }
    true
}

/// Scalar reproduction bound at the frozen field: the survival-weighted birth
/// quadrature with the spatial operator reduced to its principal eigenvalue.
///
/// The discrete survival factors mirror the implicit age steps, so for
/// spatially homogeneous coefficients the bound equals the spectral radius of
/// the frozen reproduction matrix exactly; at the trivial equilibrium of a
/// normalized model it is 1. A value of at most one over the branch is
/// consistent with supercritical bifurcation. Meaningful as stated for
/// aggregated models, whose spatial operator does not vary with age; for
/// local-in-age models the age-zero operator is used.
pub fn reproduction_bound(model: &ModelSpec, grids: &Grids, u: &DensityField) -> Result<f64> {
    let a_u = crate::evolution::spatial_operator_at(model, grids, u, 0)?;
    let lambda_min = a_u
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);

    let ctx = CoeffContext::new(model, grids, u);
    let da = grids.age.step();
    let weights = grids.age.weights();
    let n_x = grids.space.len();

    let mut survival = DVector::from_element(n_x, 1.0);
    let mut best = f64::NEG_INFINITY;
    let mut value = DVector::zeros(n_x);
    for (k, w) in weights.iter().enumerate() {
        if k > 0 {
            let mu = ctx.mu(k - 1);
            for i in 0..n_x {
                survival[i] /= 1.0 + da * (mu[i] + lambda_min);
            }
        }
        let b = ctx.birth(k);
        for i in 0..n_x {
            value[i] += w * b[i] * survival[i];
        }
    }
    for i in 0..n_x {
        best = best.max(value[i]);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AgeGrid, Boundary, SpaceGrid};
    use crate::model::{build_preset, params_from, Preset};
    use crate::spectral::normalize_birth;
    use approx::assert_relative_eq;

    fn neumann_setup(n_a: usize, n_x: usize) -> (ModelSpec, Grids) {
        let grids = Grids::new(
            AgeGrid::new(1.0, n_a).unwrap(),
            SpaceGrid::new(1.0, n_x, (Boundary::Neumann, Boundary::Neumann)).unwrap(),
        );
        let model = build_preset(
            Preset::Neumann33,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)]),
        )
        .unwrap();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        (model, grids)
    }

    fn linear_setup(n_a: usize, n_x: usize) -> (ModelSpec, Grids) {
        let grids = Grids::new(
            AgeGrid::new(1.0, n_a).unwrap(),
            SpaceGrid::new(1.0, n_x, (Boundary::Dirichlet, Boundary::Robin(1.0))).unwrap(),
        );
        let params = params_from([
            ("a_max", 1.0),
            ("mu0", 1.0),
            ("d", 0.1),
            ("c_mu", 0.0),
            ("c_a", 0.0),
        ]);
        let model = build_preset(Preset::Robin31, &params).unwrap();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        (model, grids)
    }

    #[test]
    fn linear_model_has_vanishing_expansion() {
        let (model, grids) = linear_setup(60, 10);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        assert_eq!(exp.source.sup_norm(), 0.0);
        assert_eq!(exp.quadratic.amax(), 0.0);
        assert_eq!(exp.slope, 0.0);
        assert!(exp.xi.amax() < 1e-9, "xi = {}", exp.xi.amax());
    }

    #[test]
    fn expansion_satisfies_its_defining_equations() {
        let (model, grids) = neumann_setup(200, 8);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        assert!(exp.tau.abs() <= 1e-8);
        assert!(exp.spectral.left.dot(&exp.xi).abs() <= 1e-10);

        let zero = DensityField::zeros(&grids);
        let q0 = assemble_q(&model, &grids, &zero).unwrap();
        let k0h = crate::evolution::duhamel(&model, &grids, &exp.source).unwrap();
        let ell0 = birth_functional(&model, &grids, &k0h, BirthVariant::Linear);
        let lhs = &exp.xi - &q0 * &exp.xi;
        let rhs = exp.slope * &exp.spectral.right + &exp.quadratic - ell0;
        assert!((lhs - rhs).amax() <= 1e-8);
    }

    /// Flat scalar oracle for the Neumann preset: the slope is 1 - 2/e.
    #[test]
    fn neumann_slope_matches_scalar_oracle() {
        let (model, grids) = neumann_setup(400, 4);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let exact = 1.0 - 2.0 * (-1.0f64).exp();
        assert!(
            (exp.slope - exact).abs() < 2e-3,
            "slope {} vs {exact}",
            exp.slope
        );
    }

    /// Density-boosted fertility flips the slope sign.
    #[test]
    fn inverted_mortality_flips_slope_sign() {
        let grids = Grids::new(
            AgeGrid::new(1.0, 400).unwrap(),
            SpaceGrid::new(1.0, 4, (Boundary::Neumann, Boundary::Neumann)).unwrap(),
        );
        let model = build_preset(
            Preset::Neumann33,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1), ("c_mu", -1.0)]),
        )
        .unwrap();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let exact = -(1.0 - 2.0 * (-1.0f64).exp());
        assert!((exp.slope - exact).abs() < 2e-3, "slope {}", exp.slope);
    }

    #[test]
    fn expansion_refuses_unnormalized_model() {
        let grids = Grids::new(
            AgeGrid::new(1.0, 50).unwrap(),
            SpaceGrid::new(1.0, 4, (Boundary::Neumann, Boundary::Neumann)).unwrap(),
        );
        let model = build_preset(
            Preset::Neumann33,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)]),
        )
        .unwrap();
        assert!(matches!(
            local_expansion(&model, &grids, 1e-4),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn trivial_point_at_zero_amplitude() {
        let (model, grids) = neumann_setup(60, 6);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let seed = BranchPoint::seed(0.0, 1.37, DensityField::zeros(&grids));
        let point = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(0.0),
            &seed,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(point.residual, 0.0);
        assert_eq!(point.u.sup_norm(), 0.0);
        assert_eq!(point.n, 1.37);
    }

    /// The converged trace is an eigenvector of the frozen reproduction
    /// operator with eigenvalue 1/n.
    #[test]
    fn converged_point_satisfies_eigen_relation() {
        let (model, grids) = neumann_setup(200, 6);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let point = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(0.1),
            &BranchPoint::seed(0.1, exp.predict_parameter(0.1), exp.predict_field(0.1)),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(point.converged);
        let q_u = assemble_q(&model, &grids, &point.u).unwrap();
        let w = point.u.trace();
        let residual = (&q_u * &w - &w / point.n).amax();
        assert!(residual <= 1e-8, "eigen residual {residual}");
        assert!((point.n * point.r_qu - 1.0).abs() <= 1e-6);
    }

    /// Flat-state oracle: the equilibrium aggregate solves the scalar renewal
    /// constraint with the scheme-consistent quadrature.
    #[test]
    fn neumann_equilibrium_matches_bisection_oracle() {
        let (model, grids) = neumann_setup(300, 4);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let eps = 0.1;
        let point = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(eps),
            &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(point.converged);

        let (n_oracle, _) = flat_oracle(&grids, model.birth_scale, 1.0, 1.0, eps);
        assert!(
            (point.n - n_oracle).abs() < 1e-6,
            "n = {} oracle {n_oracle}",
            point.n
        );
        // The trace is flat at value eps.
        let w = point.u.trace();
        assert_relative_eq!(w.max(), eps, max_relative = 1e-8);
        assert!((w.max() - w.min()).abs() < 1e-9);
    }

    /// Scheme-consistent scalar oracle for mu = mu0 + c_mu U:
    /// U = eps * T(rho(U)) by bisection, n = 1 / (b0 T).
    pub(crate) fn flat_oracle(grids: &Grids, b0: f64, mu0: f64, c_mu: f64, eps: f64) -> (f64, f64) {
        let survival_quadrature = |u: f64| -> f64 {
            let da = grids.age.step();
            let rho = 1.0 / (1.0 + da * (mu0 + c_mu * u));
            grids
                .age
                .weights()
                .iter()
                .enumerate()
                .map(|(k, w)| w * rho.powi(k as i32))
                .sum()
        };
        // Fixed point of U = eps * T(U) by bisection on the difference.
        let f = |u: f64| u - eps * survival_quadrature(u);
        let (mut lo, mut hi) = if eps >= 0.0 {
            (0.0, eps.max(1e-12))
        } else {
            (eps.min(-1e-12), 0.0)
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let u = 0.5 * (lo + hi);
        let n = 1.0 / (b0 * survival_quadrature(u));
        (n, u)
    }

    /// The oracle equivalence is a property of every spatially homogeneous
    /// no-flux model, not just the default parameters.
    #[test]
    fn oracle_equivalence_across_parameters() {
        for (mu0, c_mu, d, eps) in [
            (0.7, 2.0, 0.05, 0.08),
            (1.5, 0.5, 0.4, -0.1),
            (1.0, 1.0, 1.0, 0.15),
        ] {
            let grids = Grids::new(
                AgeGrid::new(1.0, 250).unwrap(),
                SpaceGrid::new(1.0, 4, (Boundary::Neumann, Boundary::Neumann)).unwrap(),
            );
            let model = build_preset(
                Preset::Neumann33,
                &params_from([("a_max", 1.0), ("mu0", mu0), ("d", d), ("c_mu", c_mu)]),
            )
            .unwrap();
            let (model, _) = normalize_birth(&model, &grids).unwrap();
            let exp = local_expansion(&model, &grids, 1e-4).unwrap();
            let point = solve_equilibrium(
                &model,
                &grids,
                &exp.spectral.left,
                Constraint::Amplitude(eps),
                &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
                &SolveOptions::default(),
            )
            .unwrap();
            assert!(point.converged, "mu0={mu0} c_mu={c_mu}");
            let (n_oracle, _) = flat_oracle(&grids, model.birth_scale, mu0, c_mu, eps);
            assert!(
                (point.n - n_oracle).abs() < 1e-6,
                "mu0={mu0} c_mu={c_mu}: n={} oracle={n_oracle}",
                point.n
            );
        }
    }

    /// Robin31 with a state-dependent birth modulus: the quadratic remainder
    /// term is active on the local-in-age path.
    #[test]
    fn local_in_age_birth_remainder() {
        let grids = Grids::new(
            AgeGrid::new(1.0, 100).unwrap(),
            SpaceGrid::new(1.0, 8, (Boundary::Dirichlet, Boundary::Robin(1.0))).unwrap(),
        );
        let model = build_preset(
            Preset::Robin31,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1), ("c_b", 0.5)]),
        )
        .unwrap();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        assert!(exp.quadratic.amax() > 0.0, "remainder curvature inactive");
        let eps = 0.05;
        let point = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(eps),
            &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(point.converged);
        assert!((point.n * point.r_qu - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn vertical_branch_for_linear_model() {
        let (model, grids) = linear_setup(80, 8);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let branch =
            continue_branch(&model, &grids, &exp, 0.1, 5, &SolveOptions::default()).unwrap();
        assert!(branch.truncations.is_empty());
        for point in &branch.points {
            assert!((point.n - 1.0).abs() <= 1e-8, "n = {}", point.n);
        }
    }

    #[test]
    fn branch_slope_agrees_with_expansion() {
        let (model, grids) = neumann_setup(200, 4);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let opts = SolveOptions::default();
        let psi = &exp.spectral.left;
        let solve_at = |eps: f64| {
            solve_equilibrium(
                &model,
                &grids,
                psi,
                Constraint::Amplitude(eps),
                &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
                &opts,
            )
            .unwrap()
        };
        let plus = solve_at(0.01);
        let minus = solve_at(-0.01);
        let slope = (plus.n - minus.n) / 0.02;
        assert!(
            (slope - exp.slope).abs() <= 1e-3 * exp.slope.abs(),
            "slope {slope} vs {}",
            exp.slope
        );
    }

    #[test]
    fn branch_classification_and_window() {
        let (model, grids) = neumann_setup(150, 6);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let branch =
            continue_branch(&model, &grids, &exp, 0.15, 6, &SolveOptions::default()).unwrap();
        assert!(branch.truncations.is_empty());
        assert_eq!(branch.direction, Direction::Supercritical);
        assert!(branch.n_window.0 <= 1.0 && 1.0 <= branch.n_window.1);
        for point in branch.points.iter().filter(|p| p.eps > 0.0) {
            assert!(point.positive, "eps {} not positive", point.eps);
            let bound = point.repro_bound.unwrap();
            assert!(bound <= 1.0 + 1e-9, "bound {bound} at eps {}", point.eps);
        }
        // The trivial point carries the unit bound.
        let trivial = branch.points.iter().find(|p| p.eps == 0.0).unwrap();
        assert!((trivial.repro_bound.unwrap() - 1.0).abs() <= 1e-9);
        // Points are strictly ordered by amplitude.
        for pair in branch.points.windows(2) {
            assert!(pair[0].eps < pair[1].eps);
        }
    }

    /// Drift and reaction switched on: the nonlinear operator paths carry a
    /// full branch with the same structural identities.
    #[test]
    fn drifted_functional_branch() {
        let mut params = params_from([
            ("a_max", 1.0),
            ("mu0", 1.0),
            ("d", 0.1),
            ("c_drift", 0.2),
            ("c_react", 0.5),
        ]);
        params.insert("nu0".to_string(), crate::model::ParamValue::Number(0.5));
        let model = build_preset(Preset::Functional32, &params).unwrap();
        let grids = Grids::new(
            AgeGrid::new(1.0, 120).unwrap(),
            SpaceGrid::new(1.0, 10, model.bc).unwrap(),
        );
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let branch =
            continue_branch(&model, &grids, &exp, 0.12, 4, &SolveOptions::default()).unwrap();
        assert!(branch.truncations.is_empty());
        assert_eq!(branch.direction, Direction::Supercritical);
        for point in &branch.points {
            if point.eps != 0.0 {
                assert!((point.n * point.r_qu - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn symmetrized_negative_points_flip() {
        let grids = Grids::new(
            AgeGrid::new(1.0, 100).unwrap(),
            SpaceGrid::new(1.0, 6, (Boundary::Neumann, Boundary::Neumann)).unwrap(),
        );
        let model = build_preset(
            Preset::Neumann33,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)]),
        )
        .unwrap()
        .symmetrize();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let branch =
            continue_branch(&model, &grids, &exp, 0.1, 4, &SolveOptions::default()).unwrap();
        let negatives: Vec<_> = branch.points.iter().filter(|p| p.eps < 0.0).collect();
        assert!(!negatives.is_empty());
        for point in negatives {
            assert!(!point.positive);
            assert!(point.sign_flipped, "eps {} did not flip", point.eps);
        }
    }

    /// Default Robin31: genuinely local-in-age nonlinear coefficients, mixed
    /// boundary. The solver and the branch identity hold there too.
    #[test]
    fn local_in_age_point_converges() {
        let grids = Grids::new(
            AgeGrid::new(1.0, 80).unwrap(),
            SpaceGrid::new(1.0, 8, (Boundary::Dirichlet, Boundary::Robin(1.0))).unwrap(),
        );
        let model = build_preset(
            Preset::Robin31,
            &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)]),
        )
        .unwrap();
        let (model, _) = normalize_birth(&model, &grids).unwrap();
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let eps = 0.05;
        let point = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(eps),
            &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(point.converged);
        assert!((point.n * point.r_qu - 1.0).abs() <= 1e-6);
        assert!(point.u.min_value() >= -1e-12);
    }

    /// Holding the parameter fixed recovers the same equilibrium the
    /// amplitude-constrained solve found.
    #[test]
    fn parameter_constrained_solve_round_trips() {
        let (model, grids) = neumann_setup(150, 6);
        let exp = local_expansion(&model, &grids, 1e-4).unwrap();
        let opts = SolveOptions::default();
        let eps = 0.12;
        let by_amplitude = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Amplitude(eps),
            &BranchPoint::seed(eps, exp.predict_parameter(eps), exp.predict_field(eps)),
            &opts,
        )
        .unwrap();
        assert!(by_amplitude.converged);

        // Seed slightly off the point and hold its parameter fixed.
        let seed = BranchPoint::seed(eps, by_amplitude.n, by_amplitude.u.scale(1.05));
        let by_parameter = solve_equilibrium(
            &model,
            &grids,
            &exp.spectral.left,
            Constraint::Parameter(by_amplitude.n),
            &seed,
            &opts,
        )
        .unwrap();
        assert!(by_parameter.converged);
        assert!(by_parameter.u.sup_distance(&by_amplitude.u) <= 1e-6);
        assert!((by_parameter.eps - eps).abs() <= 1e-7);
    }

    #[test]
    fn trivial_point_reproduction_bound_is_one() {
        let (model, grids) = neumann_setup(150, 5);
        let zero = DensityField::zeros(&grids);
        let bound = reproduction_bound(&model, &grids, &zero).unwrap();
        assert_relative_eq!(bound, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn simplicity_gate_refuses_degenerate_kernel() {
        // A diagonal reproduction matrix with a double eigenvalue 1 must be
        // refused by the expansion gate.
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.5, 0.25]));
        let report = kernel_simplicity_check(&q);
        assert_eq!(report.dim_kernel, 2);
    }
}
