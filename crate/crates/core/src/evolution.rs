//! Age propagation, the variation-of-constants operator, and the birth
//! functionals.
//!
//! Nonlinearity is always handled by coefficient freezing: coefficients are
//! evaluated at a frozen density field, and the resulting linear problem is
//! marched in age with implicit Euler steps
//! `(I + da (A_k + diag mu_k)) u_{k+1} = u_k`, coefficients taken at the left
//! node `a_k`. The implicit step is unconditionally stable and inverse
//! positive, which is exactly what the positivity arguments downstream
//! consume. Step matrices are factored once per age node and reused across
//! right-hand sides; consecutive nodes with identical coefficient fields
//! share one factorization, which makes aggregated models effectively free.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{CoefficientFields, Grids};
use crate::model::{CoeffInput, ModelSpec};

/// Population density on the (age x space) grid. Rows are age slices; row 0
/// is the trace `u(0, .)` fixed by the renewal condition.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub values: DMatrix<f64>,
    grids: Grids,
}

impl DensityField {
    pub fn new(grids: Grids, values: DMatrix<f64>) -> Self {
        assert_eq!(values.nrows(), grids.age.len());
        assert_eq!(values.ncols(), grids.space.len());
        Self { values, grids }
    }

    pub fn zeros(grids: &Grids) -> Self {
        Self {
            values: DMatrix::zeros(grids.age.len(), grids.space.len()),
            grids: grids.clone(),
        }
    }

    pub fn grids(&self) -> &Grids {
        &self.grids
    }

    /// The trace `gamma u = u(0, .)`.
    pub fn trace(&self) -> DVector<f64> {
        self.values.row(0).transpose()
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }

    /// Age-quadrature `U(x)` of each column.
    pub fn aggregate(&self) -> DVector<f64> {
        aggregate_of(&self.grids, &self.values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.amax()
    }

    pub fn min_value(&self) -> f64 {
        self.values.min()
    }

    /// Total population: age quadrature combined with the cell mass weights.
    pub fn total_mass(&self) -> f64 {
        self.grids.space.h() * self.aggregate().sum()
    }

    pub fn scale(&self, factor: f64) -> DensityField {
        DensityField {
            values: &self.values * factor,
            grids: self.grids.clone(),
        }
    }

    pub fn add_scaled(&self, factor: f64, other: &DensityField) -> DensityField {
        DensityField {
            values: &self.values + factor * &other.values,
            grids: self.grids.clone(),
        }
    }

    pub fn sup_distance(&self, other: &DensityField) -> f64 {
        (&self.values - &other.values).amax()
    }
}

fn aggregate_of(grids: &Grids, values: &DMatrix<f64>) -> DVector<f64> {
    let weights = grids.age.weights();
    let mut agg = DVector::zeros(values.ncols());
    for (k, w) in weights.iter().enumerate() {
        agg.axpy(*w, &values.row(k).transpose(), 1.0);
    }
    agg
}

/// Coefficient evaluation context for one frozen density field.
///
/// Applies the symmetrization rule (elementwise absolute value of the state,
/// aggregate recomputed from `|u|`) before any callback sees the data.
pub(crate) struct CoeffContext<'m> {
    model: &'m ModelSpec,
    values: DMatrix<f64>,
    aggregate: DVector<f64>,
    positions: Vec<f64>,
    ages: Vec<f64>,
}

impl<'m> CoeffContext<'m> {
    pub fn new(model: &'m ModelSpec, grids: &Grids, frozen: &DensityField) -> Self {
        let values = if model.symmetrized {
            frozen.values.map(f64::abs)
        } else {
            frozen.values.clone()
        };
        let aggregate = aggregate_of(grids, &values);
        Self {
            model,
            values,
            aggregate,
            positions: grids.space.centers().to_vec(),
            ages: grids.age.nodes().to_vec(),
        }
    }

    fn slice(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }

    pub fn with_input<T>(&self, k: usize, f: impl FnOnce(&CoeffInput<'_>) -> T) -> T {
        let slice = self.slice(k);
        let input = CoeffInput {
            slice: &slice,
            aggregate: &self.aggregate,
            age: self.ages[k],
            positions: &self.positions,
        };
        f(&input)
    }

    pub fn mu(&self, k: usize) -> DVector<f64> {
        self.with_input(k, |input| self.model.mu(input))
    }

    /// Scaled birth modulus at age node `k`.
    pub fn birth(&self, k: usize) -> DVector<f64> {
        self.with_input(k, |input| self.model.birth(input))
    }

    pub fn elliptic_fields(&self, k: usize) -> CoefficientFields {
        self.with_input(k, |input| CoefficientFields {
            diffusion: self.model.diffusion(input),
            drift: self.model.drift(input),
            reaction: self.model.reaction(input),
        })
    }
}

/// The full operator `A_k + diag(mu_k)` at age node `k`, assembled from
/// coefficients frozen at the given field.
pub fn operator_at(
    model: &ModelSpec,
    grids: &Grids,
    frozen: &DensityField,
    k: usize,
) -> Result<DMatrix<f64>> {
    let ctx = CoeffContext::new(model, grids, frozen);
    operator_from_context(&ctx, grids, k)
}

/// The spatial part `A_k` alone (no death modulus).
pub fn spatial_operator_at(
    model: &ModelSpec,
    grids: &Grids,
    frozen: &DensityField,
    k: usize,
) -> Result<DMatrix<f64>> {
    let ctx = CoeffContext::new(model, grids, frozen);
    grids.space.assemble(&ctx.elliptic_fields(k))
}

fn operator_from_context(ctx: &CoeffContext<'_>, grids: &Grids, k: usize) -> Result<DMatrix<f64>> {
    let mut m = grids.space.assemble(&ctx.elliptic_fields(k))?;
    let mu = ctx.mu(k);
    for i in 0..m.nrows() {
        m[(i, i)] += mu[i];
    }
    Ok(m)
}

/// Assembles `A_k + diag(mu_k)` for every age node in one pass.
pub(crate) fn operators_for_field(
    model: &ModelSpec,
    grids: &Grids,
    frozen: &DensityField,
) -> Result<Vec<DMatrix<f64>>> {
    let ctx = CoeffContext::new(model, grids, frozen);
    (0..grids.age.len())
        .map(|k| operator_from_context(&ctx, grids, k))
        .collect()
}

type Factorization = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// One-step solution operators of the frozen linear problem, factored per age
/// node.
pub struct Propagator {
    grids: Grids,
    steps: Vec<Arc<Factorization>>,
}

impl Propagator {
    /// Factors `(I + da (A_k + diag mu_k))` for every age interval, with
    /// coefficients frozen at `frozen`. Consecutive nodes whose coefficient
    /// fields agree bitwise share a factorization.
    pub fn new(model: &ModelSpec, grids: &Grids, frozen: &DensityField) -> Result<Self> {
        let ctx = CoeffContext::new(model, grids, frozen);
        let n_steps = grids.age.intervals();
        let da = grids.age.step();
        let n = grids.space.len();
        let mut steps = Vec::with_capacity(n_steps);
        let mut prev: Option<(DMatrix<f64>, Arc<Factorization>)> = None;
        for k in 0..n_steps {
            let m = operator_from_context(&ctx, grids, k)?;
            if let Some((prev_m, prev_lu)) = &prev {
                if *prev_m == m {
                    steps.push(prev_lu.clone());
                    continue;
                }
            }
            let step = DMatrix::identity(n, n) + da * &m;
            let lu = step.lu();
            if !lu.is_invertible() {
                return Err(Error::SingularStep(k));
            }
            let lu = Arc::new(lu);
            steps.push(lu.clone());
            prev = Some((m, lu));
        }
        Ok(Self {
            grids: grids.clone(),
            steps,
        })
    }

    pub fn grids(&self) -> &Grids {
        &self.grids
    }

    /// Marches `w0` through all age intervals; row 0 equals `w0` exactly.
    pub fn propagate(&self, w0: &DVector<f64>) -> Result<DensityField> {
        let mut field = DensityField::zeros(&self.grids);
        field.values.row_mut(0).copy_from(&w0.transpose());
        let mut current = w0.clone();
        for (k, step) in self.steps.iter().enumerate() {
            current = step.solve(&current).ok_or(Error::SingularStep(k))?;
            field.values.row_mut(k + 1).copy_from(&current.transpose());
        }
        Ok(field)
    }

    /// Variation-of-constants solution with zero initial trace:
    /// `v_{k+1} = (I + da (A_k + mu_k))^-1 (v_k + da f_{k+1})`, `v_0 = 0`.
    pub fn duhamel(&self, f: &DensityField) -> Result<DensityField> {
        let da = self.grids.age.step();
        let mut field = DensityField::zeros(&self.grids);
        let mut current = DVector::zeros(self.grids.space.len());
        for (k, step) in self.steps.iter().enumerate() {
            let rhs = &current + da * f.row(k + 1);
            current = step.solve(&rhs).ok_or(Error::SingularStep(k))?;
            field.values.row_mut(k + 1).copy_from(&current.transpose());
        }
        Ok(field)
    }

    /// Applies the one-step operator for interval `k` (node `k` to `k+1`).
    pub fn step(&self, k: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.steps[k].solve(v).ok_or(Error::SingularStep(k))
    }

    /// Applies the one-step operator for interval `k` to each column of `m`.
    pub fn step_columns(&self, k: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.steps[k].solve(m).ok_or(Error::SingularStep(k))
    }
}

/// Propagates `w0` with coefficients frozen at `frozen`.
pub fn propagate(
    model: &ModelSpec,
    grids: &Grids,
    frozen: &DensityField,
    w0: &DVector<f64>,
) -> Result<DensityField> {
    Propagator::new(model, grids, frozen)?.propagate(w0)
}

/// Variation-of-constants operator with coefficients frozen at zero density.
pub fn duhamel(model: &ModelSpec, grids: &Grids, f: &DensityField) -> Result<DensityField> {
    Propagator::new(model, grids, &DensityField::zeros(grids))?.duhamel(f)
}

/// Which birth modulus the functional integrates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BirthVariant {
    /// `b` evaluated at the field itself.
    Full,
    /// `b_0 = b(0, .)`, evaluated at zero density.
    Linear,
    /// `b - b_0`; vanishes identically when `b` does not depend on the state.
    Remainder,
}

/// Age-quadrature of `b(state, a) u(a, .)`, one value per space node.
pub fn birth_functional(
    model: &ModelSpec,
    grids: &Grids,
    u: &DensityField,
    variant: BirthVariant,
) -> DVector<f64> {
    let weights = grids.age.weights();
    let n = grids.space.len();
    let mut out = DVector::zeros(n);
    let zero;
    let (ctx_full, ctx_zero) = match variant {
        BirthVariant::Full => (Some(CoeffContext::new(model, grids, u)), None),
        BirthVariant::Linear => {
            zero = DensityField::zeros(grids);
            (None, Some(CoeffContext::new(model, grids, &zero)))
        }
        BirthVariant::Remainder => {
            zero = DensityField::zeros(grids);
            (
                Some(CoeffContext::new(model, grids, u)),
                Some(CoeffContext::new(model, grids, &zero)),
            )
        }
    };
    for (k, w) in weights.iter().enumerate() {
        let mut b = match (&ctx_full, &ctx_zero) {
            (Some(full), None) => full.birth(k),
            (None, Some(zero)) => zero.birth(k),
            (Some(full), Some(zero)) => full.birth(k) - zero.birth(k),
            (None, None) => unreachable!(),
        };
        b.component_mul_assign(&u.row(k));
        out.axpy(*w, &b, 1.0);
    }
    out
}
