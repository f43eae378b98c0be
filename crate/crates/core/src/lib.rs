//! Positive equilibria and local bifurcation structure for age-structured
//! population models with nonlinear diffusion.
//!
//! The population density `u(a, x)` is structured by age on `[0, a_max]` and
//! diffuses over a 1-D interval; death, birth and movement coefficients may
//! depend on the density itself, either through the local age slice or
//! through the age-aggregate. Equilibria satisfy an age-propagation equation
//! closed by a nonlocal renewal condition whose fertility intensity `n` is
//! the bifurcation parameter: after normalizing the low-density reproduction
//! operator to unit spectral radius, a branch of nontrivial equilibria
//! crosses the trivial one at `n = 1`.
//!
//! The crate computes that picture at desk scale: discrete evolution
//! operators ([`evolution`]), the reproduction operator and its principal
//! pair ([`spectral`]), the second-order branch expansion, nonlinear
//! corrector and amplitude continuation ([`bifurcation`]), and a transient
//! integrator for validating equilibria ([`transient`]). The [`cli`] module
//! wires the pieces into reproducible file-emitting commands.
//!
//! ```
//! use agestruct::bifurcation::{continue_branch, local_expansion, SolveOptions};
//! use agestruct::model::params_from;
//! use agestruct::spectral::normalize_birth;
//! use agestruct::{build_preset, AgeGrid, Grids, Preset, SpaceGrid};
//!
//! # fn main() -> agestruct::Result<()> {
//! let model = build_preset(
//!     Preset::Neumann33,
//!     &params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)]),
//! )?;
//! let grids = Grids::new(
//!     AgeGrid::new(model.a_max, 64)?,
//!     SpaceGrid::new(model.domain_length, 8, model.bc)?,
//! );
//! let (model, _scale) = normalize_birth(&model, &grids)?;
//! let expansion = local_expansion(&model, &grids, 1e-4)?;
//! let branch = continue_branch(&model, &grids, &expansion, 0.1, 4, &SolveOptions::default())?;
//! assert!(branch.points.iter().filter(|p| p.eps > 0.0).all(|p| p.n >= 1.0));
//! # Ok(())
//! # }
//! ```

pub mod bifurcation;
pub mod cli;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod model;
pub mod spectral;
pub mod transient;

pub use error::{Error, Result};
pub use evolution::{birth_functional, duhamel, propagate, BirthVariant, DensityField, Propagator};
pub use grid::{AgeGrid, Boundary, CoefficientFields, Grids, SpaceGrid};
pub use model::{build_preset, CoeffInput, Dependence, ModelSpec, ParamValue, Params, Preset};
pub use spectral::{
    assemble_q, kernel_simplicity_check, normalize_birth, principal_pair, KernelReport,
    SpectralData,
};

pub use bifurcation::{
    classify_point, continue_branch, local_expansion, solve_equilibrium, Branch, BranchPoint,
    Constraint, Direction, Expansion, SolveOptions,
};
pub use transient::{run_to_steady, step_transient, TransientSample, TransientState};
