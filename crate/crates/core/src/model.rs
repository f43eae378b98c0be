//! Model data: death and birth moduli, diffusion coefficients, boundary
//! conditions, and the three preset families shipped with the toolkit.
//!
//! A [`ModelSpec`] is immutable after construction and its callbacks must be
//! pure, so it is safe to share across concurrent solves. Coefficients are
//! evaluated through [`CoeffInput`], which exposes both the age slice
//! `u(a, .)` and the age-aggregate `U(x)`; a model reads whichever its
//! dependence mode prescribes. The `birth_scale` normalization factor is kept
//! on the model rather than baked into the callback so that it stays
//! reportable.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::Boundary;

/// How coefficient callbacks see the population density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dependence {
    /// Coefficients at age `a` see the slice `u(a, .)`.
    LocalInAge,
    /// Coefficients see the aggregate `U(x) = int_0^a_max u(a, x) da`.
    Aggregated,
}

/// Density data handed to a coefficient callback for one age node.
pub struct CoeffInput<'a> {
    /// Age slice `u(a, .)` at this node.
    pub slice: &'a DVector<f64>,
    /// Age-quadrature `U(x)` of the full field.
    pub aggregate: &'a DVector<f64>,
    /// Age of this node.
    pub age: f64,
    /// Cell-center coordinates, for spatially varying moduli.
    pub positions: &'a [f64],
}

impl<'a> CoeffInput<'a> {
    /// The density the callback should respond to under `dependence`.
    pub fn state(&self, dependence: Dependence) -> &'a DVector<f64> {
        match dependence {
            Dependence::LocalInAge => self.slice,
            Dependence::Aggregated => self.aggregate,
        }
    }
}

pub type CoeffFn = dyn Fn(&CoeffInput<'_>) -> DVector<f64> + Send + Sync;

/// Age-structured model with nonlinear diffusion on a 1-D interval.
#[derive(Clone)]
pub struct ModelSpec {
    /// Truncated maximal age.
    pub a_max: f64,
    pub dependence: Dependence,
    pub bc: (Boundary, Boundary),
    pub domain_length: f64,
    /// Normalization factor applied to the birth modulus; the bifurcation
    /// structure fixes it by requiring unit spectral radius at zero density.
    pub birth_scale: f64,
    /// When set, coefficients are evaluated at the elementwise absolute value
    /// of the density state (see [`ModelSpec::symmetrize`]).
    pub symmetrized: bool,
    /// True when the preset guarantees the spatial operator has nonnegative
    /// spectrum for every admissible state (no drift, nonnegative reaction,
    /// nonnegative boundary weights). Such models admit the scalar
    /// reproduction bound used to certify supercritical branches.
    pub nonneg_spectrum: bool,
    mu: Arc<CoeffFn>,
    birth: Arc<CoeffFn>,
    diffusion: Arc<CoeffFn>,
    drift: Arc<CoeffFn>,
    reaction: Arc<CoeffFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("a_max", &self.a_max)
            .field("dependence", &self.dependence)
            .field("bc", &self.bc)
            .field("domain_length", &self.domain_length)
            .field("birth_scale", &self.birth_scale)
            .field("symmetrized", &self.symmetrized)
            .finish_non_exhaustive()
    }
}

pub struct ModelBuilder {
    a_max: f64,
    dependence: Dependence,
    bc: (Boundary, Boundary),
    domain_length: f64,
    nonneg_spectrum: bool,
    mu: Arc<CoeffFn>,
    birth: Arc<CoeffFn>,
    diffusion: Arc<CoeffFn>,
    drift: Option<Arc<CoeffFn>>,
    reaction: Option<Arc<CoeffFn>>,
}

fn zero_field() -> Arc<CoeffFn> {
    Arc::new(|input: &CoeffInput<'_>| DVector::zeros(input.slice.len()))
}

impl ModelBuilder {
    pub fn new(
        a_max: f64,
        dependence: Dependence,
        bc: (Boundary, Boundary),
        domain_length: f64,
        mu: Arc<CoeffFn>,
        birth: Arc<CoeffFn>,
        diffusion: Arc<CoeffFn>,
    ) -> Self {
        Self {
            a_max,
            dependence,
            bc,
            domain_length,
            nonneg_spectrum: false,
            mu,
            birth,
            diffusion,
            drift: None,
            reaction: None,
        }
    }

    pub fn drift(mut self, f: Arc<CoeffFn>) -> Self {
        self.drift = Some(f);
        self
    }

    pub fn reaction(mut self, f: Arc<CoeffFn>) -> Self {
        self.reaction = Some(f);
        self
    }

    pub fn nonneg_spectrum(mut self, flag: bool) -> Self {
        self.nonneg_spectrum = flag;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        if !(self.a_max > 0.0) {
            return Err(Error::NonPositive {
                what: "a_max",
                value: self.a_max,
            });
        }
        if !(self.domain_length > 0.0) {
            return Err(Error::NonPositive {
                what: "domain length",
                value: self.domain_length,
            });
        }
        self.bc.0.validate()?;
        self.bc.1.validate()?;
        Ok(ModelSpec {
            a_max: self.a_max,
            dependence: self.dependence,
            bc: self.bc,
            domain_length: self.domain_length,
            birth_scale: 1.0,
            symmetrized: false,
            nonneg_spectrum: self.nonneg_spectrum,
            mu: self.mu,
            birth: self.birth,
            diffusion: self.diffusion,
            drift: self.drift.unwrap_or_else(zero_field),
            reaction: self.reaction.unwrap_or_else(zero_field),
        })
    }
}

impl ModelSpec {
    /// Death modulus at the given input, one value per space node.
    pub fn mu(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.mu)(input)
    }

    /// Birth modulus including the `birth_scale` factor.
    pub fn birth(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.birth)(input) * self.birth_scale
    }

    /// Birth modulus without the normalization factor.
    pub fn birth_raw(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.birth)(input)
    }

    pub fn diffusion(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.diffusion)(input)
    }

    pub fn drift(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.drift)(input)
    }

    pub fn reaction(&self, input: &CoeffInput<'_>) -> DVector<f64> {
        (self.reaction)(input)
    }

    /// Returns a model whose coefficients are evaluated at the elementwise
    /// absolute value of the density state, which enforces the sign-flip
    /// symmetry `A(-u) = A(u)`, `mu(-u,.) = mu(u,.)`, `b(-u,.) = b(u,.)`
    /// exactly. The aggregate seen by callbacks becomes the quadrature of
    /// `|u|`, not `|U|`.
    pub fn symmetrize(mut self) -> ModelSpec {
        self.symmetrized = true;
        self
    }

    /// Replaces the normalization factor, returning the updated model.
    pub fn with_birth_scale(mut self, scale: f64) -> ModelSpec {
        self.birth_scale = scale;
        self
    }
}

/// Parameter value in a preset's key-value map.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

pub type Params = BTreeMap<String, ParamValue>;

/// The three example families shipped as presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Local-in-age coefficients with Dirichlet/Robin boundary.
    Robin31,
    /// Coefficients depending on the aggregate `U`, full elliptic operator.
    Functional32,
    /// Pure divergence-form diffusion with no-flux boundary.
    Neumann33,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Robin31" => Ok(Preset::Robin31),
            "Functional32" => Ok(Preset::Functional32),
            "Neumann33" => Ok(Preset::Neumann33),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::Robin31 => "Robin31",
            Preset::Functional32 => "Functional32",
            Preset::Neumann33 => "Neumann33",
        };
        f.write_str(s)
    }
}

struct ParamReader<'a> {
    params: &'a Params,
    known: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(params: &'a Params) -> Self {
        Self {
            params,
            known: Vec::new(),
        }
    }

    fn required(&mut self, key: &'static str) -> Result<f64> {
        self.known.push(key);
        match self.params.get(key) {
            Some(ParamValue::Number(v)) => Ok(*v),
            Some(ParamValue::Text(_)) => Err(Error::InvalidParam {
                name: key.to_string(),
                reason: "expected a number".to_string(),
            }),
            None => Err(Error::MissingParam(key.to_string())),
        }
    }

    fn optional(&mut self, key: &'static str, default: f64) -> Result<f64> {
        self.known.push(key);
        match self.params.get(key) {
            Some(ParamValue::Number(v)) => Ok(*v),
            Some(ParamValue::Text(_)) => Err(Error::InvalidParam {
                name: key.to_string(),
                reason: "expected a number".to_string(),
            }),
            None => Ok(default),
        }
    }

    fn boundary(&mut self, key: &'static str, default: Boundary, nu0: f64) -> Result<Boundary> {
        self.known.push(key);
        let bc = match self.params.get(key) {
            None => default,
            Some(ParamValue::Text(s)) => match s.as_str() {
                "dirichlet" => Boundary::Dirichlet,
                "robin" => Boundary::Robin(nu0),
                "neumann" => Boundary::Neumann,
                other => {
                    return Err(Error::InvalidParam {
                        name: key.to_string(),
                        reason: format!(
                            "unknown boundary `{other}` (expected dirichlet, robin or neumann)"
                        ),
                    })
                }
            },
            Some(ParamValue::Number(_)) => {
                return Err(Error::InvalidParam {
                    name: key.to_string(),
                    reason: "expected a boundary name string".to_string(),
                })
            }
        };
        // A defaulted Robin side still carries the nu0 parameter.
        let bc = match bc {
            Boundary::Robin(_) => Boundary::Robin(nu0),
            other => other,
        };
        bc.validate()?;
        Ok(bc)
    }

    fn finish(self) -> Result<()> {
        for key in self.params.keys() {
            if !self.known.contains(&key.as_str()) {
                return Err(Error::InvalidParam {
                    name: key.clone(),
                    reason: "unknown parameter for this preset".to_string(),
                });
            }
        }
        Ok(())
    }
}

fn positive(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonPositive { what, value })
    }
}

/// Builds one of the preset model families from a key-value map.
///
/// Required keys: `a_max`, `mu0`, `d`. Common optional keys (with defaults):
/// `length` (1), `b_raw` (1), `c_mu` (1), `c_a` (1). Presets with a Robin
/// side accept `nu0` (1) and `bc_left`/`bc_right` boundary names; the full
/// operator presets accept `c_drift` (0) and `c_react` (0), and
/// `Functional32` accepts the fertility decay rate `c_b` (1).
pub fn build_preset(preset: Preset, params: &Params) -> Result<ModelSpec> {
    let mut reader = ParamReader::new(params);
    let a_max = positive("a_max", reader.required("a_max")?)?;
    let mu0 = positive("mu0", reader.required("mu0")?)?;
    let d = positive("d", reader.required("d")?)?;
    let length = positive("length", reader.optional("length", 1.0)?)?;
    let b_raw = positive("b_raw", reader.optional("b_raw", 1.0)?)?;
    let c_mu = reader.optional("c_mu", 1.0)?;
    let c_a = reader.optional("c_a", 1.0)?;

    let dependence = match preset {
        Preset::Robin31 => Dependence::LocalInAge,
        Preset::Functional32 | Preset::Neumann33 => Dependence::Aggregated,
    };

    let mu: Arc<CoeffFn> =
        Arc::new(move |input: &CoeffInput<'_>| input.state(dependence).map(|s| mu0 + c_mu * s));
    let diffusion: Arc<CoeffFn> = Arc::new(move |input: &CoeffInput<'_>| {
        input.state(dependence).map(|s| d * (1.0 + c_a * s * s))
    });

    match preset {
        Preset::Neumann33 => {
            reader.finish()?;
            let birth: Arc<CoeffFn> = Arc::new(move |input: &CoeffInput<'_>| {
                DVector::from_element(input.slice.len(), b_raw)
            });
            ModelBuilder::new(
                a_max,
                dependence,
                (Boundary::Neumann, Boundary::Neumann),
                length,
                mu,
                birth,
                diffusion,
            )
            .nonneg_spectrum(true)
            .build()
        }
        Preset::Robin31 | Preset::Functional32 => {
            let nu0 = reader.optional("nu0", 1.0)?;
            if nu0 < 0.0 {
                return Err(Error::NegativeRobinWeight(nu0));
            }
            let (default_left, default_right) = match preset {
                Preset::Robin31 => (Boundary::Dirichlet, Boundary::Robin(nu0)),
                _ => (Boundary::Robin(nu0), Boundary::Robin(nu0)),
            };
            let bc_left = reader.boundary("bc_left", default_left, nu0)?;
            let bc_right = reader.boundary("bc_right", default_right, nu0)?;
            let c_drift = reader.optional("c_drift", 0.0)?;
            let c_react = reader.optional("c_react", 0.0)?;
            let c_b = match preset {
                Preset::Functional32 => reader.optional("c_b", 1.0)?,
                _ => reader.optional("c_b", 0.0)?,
            };
            reader.finish()?;

            let birth: Arc<CoeffFn> = Arc::new(move |input: &CoeffInput<'_>| {
                input.state(dependence).map(|s| b_raw * (-c_b * s).exp())
            });
            let drift: Arc<CoeffFn> = Arc::new(move |input: &CoeffInput<'_>| {
                input.state(dependence).map(|s| c_drift * s)
            });
            let reaction: Arc<CoeffFn> = Arc::new(move |input: &CoeffInput<'_>| {
                input.state(dependence).map(|s| c_react * s * s)
            });

            ModelBuilder::new(
                a_max,
                dependence,
                (bc_left, bc_right),
                length,
                mu,
                birth,
                diffusion,
            )
            .drift(drift)
            .reaction(reaction)
            .nonneg_spectrum(c_drift == 0.0 && c_react >= 0.0)
            .build()
        }
    }
}

/// Convenience for building a `Params` map from numeric entries.
pub fn params_from<I: IntoIterator<Item = (&'static str, f64)>>(entries: I) -> Params {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), ParamValue::Number(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> Params {
        params_from([("a_max", 1.0), ("mu0", 1.0), ("d", 0.1)])
    }

    #[test]
    fn neumann_preset_builds_with_minimal_params() {
        let model = build_preset(Preset::Neumann33, &base_params()).unwrap();
        assert_eq!(model.bc, (Boundary::Neumann, Boundary::Neumann));
        assert_eq!(model.dependence, Dependence::Aggregated);
        assert!(model.nonneg_spectrum);

        // mu(u, a, x) = 1 + U(x), diffusion = d (1 + U^2) at the given state.
        let slice = DVector::from_element(3, 0.2);
        let aggregate = DVector::from_vec(vec![0.0, 0.5, 2.0]);
        let input = CoeffInput {
            slice: &slice,
            aggregate: &aggregate,
            age: 0.3,
            positions: &[0.25, 0.5, 0.75],
        };
        let mu = model.mu(&input);
        assert_eq!(mu, DVector::from_vec(vec![1.0, 1.5, 3.0]));
        let diff = model.diffusion(&input);
        assert!((diff[1] - 0.1 * 1.25).abs() < 1e-15);
        let b = model.birth(&input);
        assert_eq!(b, DVector::from_element(3, 1.0));
    }

    #[test]
    fn negative_robin_weight_is_rejected() {
        let mut params = base_params();
        params.insert("nu0".to_string(), ParamValue::Number(-1.0));
        let err = build_preset(Preset::Robin31, &params);
        assert!(matches!(err, Err(Error::NegativeRobinWeight(-1.0))));
    }

    #[test]
    fn functional_preset_flags_nonneg_spectrum() {
        let model = build_preset(Preset::Functional32, &base_params()).unwrap();
        assert!(model.nonneg_spectrum);
        let mut params = base_params();
        params.insert("c_drift".to_string(), ParamValue::Number(0.3));
        let drifty = build_preset(Preset::Functional32, &params).unwrap();
        assert!(!drifty.nonneg_spectrum);
    }

    #[test]
    fn missing_and_unknown_keys_are_rejected() {
        let mut params = base_params();
        params.remove("d");
        assert!(matches!(
            build_preset(Preset::Neumann33, &params),
            Err(Error::MissingParam(k)) if k == "d"
        ));

        let mut params = base_params();
        params.insert("c_metabolism".to_string(), ParamValue::Number(1.0));
        assert!(matches!(
            build_preset(Preset::Neumann33, &params),
            Err(Error::InvalidParam { name, .. }) if name == "c_metabolism"
        ));
    }

    #[test]
    fn nonpositive_scalars_are_rejected() {
        for key in ["a_max", "mu0", "d"] {
            let mut params = base_params();
            params.insert(key.to_string(), ParamValue::Number(-0.5));
            assert!(matches!(
                build_preset(Preset::Neumann33, &params),
                Err(Error::NonPositive { .. })
            ));
        }
    }

    #[test]
    fn unknown_preset_name() {
        assert!(matches!(
            "Cushing77".parse::<Preset>(),
            Err(Error::UnknownPreset(_))
        ));
        assert_eq!("Neumann33".parse::<Preset>().unwrap(), Preset::Neumann33);
    }

    /// At admissible (nonnegative, moderate) density states every preset
    /// produces mu >= 0, b >= 0 and a strictly positive diffusion field.
    #[test]
    fn preset_coefficients_keep_their_signs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let positions = [0.125, 0.375, 0.625, 0.875];
        for preset in [Preset::Robin31, Preset::Functional32, Preset::Neumann33] {
            let model = build_preset(preset, &base_params()).unwrap();
            for _ in 0..50 {
                let slice = DVector::from_fn(4, |_, _| rng.gen_range(0.0..0.5));
                let aggregate = DVector::from_fn(4, |_, _| rng.gen_range(0.0..0.5));
                let input = CoeffInput {
                    slice: &slice,
                    aggregate: &aggregate,
                    age: rng.gen_range(0.0..1.0),
                    positions: &positions,
                };
                assert!(model.mu(&input).min() >= 0.0, "{preset:?}");
                assert!(model.birth(&input).min() >= 0.0, "{preset:?}");
                assert!(model.diffusion(&input).min() > 0.0, "{preset:?}");
            }
        }
    }
}
