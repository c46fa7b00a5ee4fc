//! Problem definitions: coefficient bundles, jump-time densities, intensity,
//! and the registry of built-in test models.
//!
//! A problem couples a forward diffusion with drift `b`, volatility `sigma`
//! and a jump of size `beta` occurring at a random time `tau`, to a backward
//! equation with terminal payoff `g` and generator `f(t, x, y, z, u)` whose
//! last slot is the jump gap. The jump time is independent of the Brownian
//! motion and has a deterministic density on the half line, so the jump
//! intensity before `tau` is the hazard rate `gamma(t) / S(t)` of that
//! density and vanishes afterwards.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Coefficient of (t, x).
pub type Coeff2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Function of a single real argument.
pub type Coeff1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Backward generator f(t, x, y, z, u).
pub type GeneratorFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Lipschitz constants of the generator in its (y, z, u) slots, declared by
/// each model and consumed by the implicit-step admissibility check.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzBounds {
    pub y: f64,
    pub z: f64,
    pub u: f64,
}

impl LipschitzBounds {
    /// The single constant used by the coarse up-front gate.
    pub fn max_slot(&self) -> f64 {
        self.y.max(self.z).max(self.u)
    }
}

/// Coefficient magnitude bounds on the state box reached from `x0`; these
/// size the quadrature mesh and its tail-mass check.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientBounds {
    pub sigma_max: f64,
    pub beta_max: f64,
    pub drift_max: f64,
}

/// Jump-time law: density on the half line, survival function, and the
/// precomputed hazard quotient.
#[derive(Clone)]
pub struct DensityModel {
    pub density: Coeff1,
    pub survival: Coeff1,
    /// Precomputed quotient `gamma(t) / S(t)`, valid where S(t) > 0.
    pub rate: Coeff1,
}

impl DensityModel {
    /// Exponential law with rate `lambda0`: density `lambda0 * exp(-lambda0 * t)`.
    pub fn exponential(lambda0: f64) -> Result<Self> {
        if lambda0 <= 0.0 || !lambda0.is_finite() {
            return Err(Error::config(
                "model.density",
                format!("exponential rate must be positive, got {lambda0}"),
            ));
        }
        Ok(DensityModel {
            density: Arc::new(move |theta| lambda0 * (-lambda0 * theta).exp()),
            survival: Arc::new(move |t| (-lambda0 * t).exp()),
            rate: Arc::new(move |_| lambda0),
        })
    }

    /// Check the density/survival pair for internal consistency on [0, T]:
    /// S(0) = 1, S nonincreasing, and Simpson quadrature of the density
    /// matching S(0) - S(T) to 1e-8.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let s0 = (self.survival)(0.0);
        if (s0 - 1.0).abs() > 1e-10 {
            return Err(Error::config(
                "model.density",
                format!("survival at 0 must be 1, got {s0}"),
            ));
        }
        let segments = 4000usize;
        let h = horizon / segments as f64;
        let mut integral = 0.0;
        let mut prev_s = s0;
        for k in 0..segments {
            let a = k as f64 * h;
            let m = a + 0.5 * h;
            let b = a + h;
            let (ga, gm, gb) = ((self.density)(a), (self.density)(m), (self.density)(b));
            if !(ga.is_finite() && gm.is_finite() && gb.is_finite()) || ga < 0.0 || gm < 0.0 || gb < 0.0
            {
                return Err(Error::config(
                    "model.density",
                    format!("density must be finite and nonnegative near t={a}"),
                ));
            }
            integral += h / 6.0 * (ga + 4.0 * gm + gb);
            let s = (self.survival)(b);
            if s > prev_s + 1e-12 {
                return Err(Error::config(
                    "model.density",
                    format!("survival increases near t={b}"),
                ));
            }
            prev_s = s;
        }
        let st = (self.survival)(horizon);
        if (integral - (s0 - st)).abs() > 1e-8 {
            return Err(Error::config(
                "model.density",
                format!(
                    "density integral {integral:.12} inconsistent with survival drop {:.12}",
                    s0 - st
                ),
            ));
        }
        Ok(())
    }
}

/// A sampled jump time: finite in (0, T], or after the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpTime {
    Finite(f64),
    AfterHorizon,
}

impl JumpTime {
    /// Indicator `tau <= t` of the jump process at time t.
    pub fn occurred_by(&self, t: f64) -> bool {
        match self {
            JumpTime::Finite(tau) => *tau <= t,
            JumpTime::AfterHorizon => false,
        }
    }

    /// Indicator `t < tau` (path still alive strictly before the jump).
    pub fn alive_strict(&self, t: f64) -> bool {
        !self.occurred_by(t)
    }

    /// Indicator `t <= tau`.
    pub fn alive_weak(&self, t: f64) -> bool {
        match self {
            JumpTime::Finite(tau) => t <= *tau,
            JumpTime::AfterHorizon => true,
        }
    }
}

/// Full problem definition. Immutable after construction; every operation on
/// it is a pure function, so it can be shared freely across threads.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub drift: Coeff2,
    pub diffusion: Coeff2,
    pub jump_coeff: Coeff2,
    pub terminal: Coeff1,
    pub generator: GeneratorFn,
    pub horizon: f64,
    pub initial_state: f64,
    pub density: DensityModel,
    pub lipschitz: LipschitzBounds,
    pub bounds: CoefficientBounds,
    /// Resolved named parameters (what the registry was called with plus
    /// defaults), kept for reference providers and the run manifest.
    pub params: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("initial_state", &self.initial_state)
            .field("params", &self.params)
            .finish()
    }
}

/// Jump intensity at time t: the hazard quotient `gamma(t) / S(t)` while the
/// path is alive, zero once the jump has happened.
pub fn intensity(dm: &DensityModel, t: f64, alive: bool) -> Result<f64> {
    if !alive {
        return Ok(0.0);
    }
    let s = (dm.survival)(t);
    if s <= 0.0 {
        return Err(Error::domain(
            "model.intensity",
            format!("survival vanished before horizon at t={t}"),
        ));
    }
    Ok((dm.density)(t) / s)
}

/// Invert the jump-time CDF at a uniform variate.
///
/// Returns the unique `tau` in (0, T] with `1 - S(tau) = u` when `u` falls in
/// the mass assigned to [0, T], found by bisection to 1e-12; otherwise the
/// jump happens after the horizon.
pub fn sample_jump_time(dm: &DensityModel, u: f64, horizon: f64) -> Result<JumpTime> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(
            "model.sample_jump_time",
            format!("uniform variate must lie in (0,1), got {u}"),
        ));
    }
    let s_t = (dm.survival)(horizon);
    if u >= 1.0 - s_t {
        return Ok(JumpTime::AfterHorizon);
    }
    let target = 1.0 - u; // solve S(tau) = 1 - u, S decreasing
    let (mut lo, mut hi) = (0.0f64, horizon);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if (dm.survival)(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(JumpTime::Finite(0.5 * (lo + hi)))
}

/// Parameter schema entry of a built-in model.
#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub key: &'static str,
    pub default: f64,
    pub doc: &'static str,
}

/// Built-in model names with their parameter schemas, in registry order.
pub fn builtin_schemas() -> Vec<(&'static str, &'static str, Vec<ParamSpec>)> {
    vec![
        (
            "LIN",
            "additive diffusion, identity payoff, generator linear in the jump gap; closed-form solution",
            vec![
                ParamSpec { key: "x0", default: 1.0, doc: "initial state" },
                ParamSpec { key: "sigma0", default: 0.5, doc: "constant volatility" },
                ParamSpec { key: "beta0", default: 0.3, doc: "constant jump size" },
                ParamSpec { key: "lambda0", default: 1.0, doc: "exponential jump rate" },
                ParamSpec { key: "T", default: 1.0, doc: "horizon" },
            ],
        ),
        (
            "TRIG",
            "smooth state-dependent coefficients, tanh payoff, nonlinear generator",
            vec![
                ParamSpec { key: "x0", default: 1.0, doc: "initial state" },
                ParamSpec { key: "beta0", default: 0.3, doc: "jump amplitude" },
                ParamSpec { key: "lambda0", default: 1.0, doc: "exponential jump rate" },
                ParamSpec { key: "T", default: 1.0, doc: "horizon" },
            ],
        ),
        (
            "CONST",
            "constant coefficients, no jump effect, zero generator; exact solution is the constant payoff",
            vec![
                ParamSpec { key: "g0", default: 2.0, doc: "constant terminal value" },
                ParamSpec { key: "b0", default: 0.1, doc: "constant drift" },
                ParamSpec { key: "sigma0", default: 0.2, doc: "constant volatility" },
                ParamSpec { key: "x0", default: 1.0, doc: "initial state" },
                ParamSpec { key: "lambda0", default: 1.0, doc: "exponential jump rate" },
                ParamSpec { key: "T", default: 1.0, doc: "horizon" },
            ],
        ),
    ]
}

fn resolve_params(
    name: &str,
    schema: &[ParamSpec],
    given: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    for key in given.keys() {
        if !schema.iter().any(|p| p.key == key) {
            let expected: Vec<&str> = schema.iter().map(|p| p.key).collect();
            return Err(Error::config(
                "model.builtin_model",
                format!("unknown parameter `{key}` for model {name}; expected one of {expected:?}"),
            ));
        }
    }
    let mut out = BTreeMap::new();
    for p in schema {
        let v = given.get(p.key).copied().unwrap_or(p.default);
        if !v.is_finite() {
            return Err(Error::config(
                "model.builtin_model",
                format!("parameter `{}` of model {name} must be finite", p.key),
            ));
        }
        out.insert(p.key.to_string(), v);
    }
    Ok(out)
}

/// Construct a built-in model by name. Missing parameters fall back to the
/// schema defaults; unknown parameter keys are rejected.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let schemas = builtin_schemas();
    let (_, _, schema) = schemas
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| {
            let names: Vec<&str> = schemas.iter().map(|(n, _, _)| *n).collect();
            Error::config(
                "model.builtin_model",
                format!("unknown model `{name}`; built-ins are {names:?}"),
            )
        })?;
    let p = resolve_params(name, schema, params)?;
    let horizon = p["T"];
    if horizon <= 0.0 {
        return Err(Error::config("model.builtin_model", "horizon T must be positive"));
    }
    let lambda0 = p["lambda0"];
    let density = DensityModel::exponential(lambda0)?;
    density.validate(horizon)?;

    let spec = match name {
        "LIN" => {
            let (sigma0, beta0, x0) = (p["sigma0"], p["beta0"], p["x0"]);
            if sigma0 < 0.0 {
                return Err(Error::config("model.builtin_model", "sigma0 must be nonnegative"));
            }
            ModelSpec {
                name: name.to_string(),
                drift: Arc::new(|_, _| 0.0),
                diffusion: Arc::new(move |_, _| sigma0),
                jump_coeff: Arc::new(move |_, _| beta0),
                terminal: Arc::new(|x| x),
                generator: Arc::new(move |_, _, _, _, u| lambda0 * u),
                horizon,
                initial_state: x0,
                density,
                lipschitz: LipschitzBounds { y: 0.0, z: 0.0, u: lambda0 },
                bounds: CoefficientBounds {
                    sigma_max: sigma0,
                    beta_max: beta0.abs(),
                    drift_max: 0.0,
                },
                params: p,
            }
        }
        "TRIG" => {
            let (beta0, x0) = (p["beta0"], p["x0"]);
            ModelSpec {
                name: name.to_string(),
                drift: Arc::new(|_, x| 0.1 * x.cos()),
                diffusion: Arc::new(|_, x| 0.2 + 0.1 * x.sin()),
                jump_coeff: Arc::new(move |_, x| beta0 * x.cos()),
                terminal: Arc::new(|x| x.tanh()),
                generator: Arc::new(move |_, _, y, z, u| 0.5 * y.tanh() + 0.3 * z + lambda0 * u),
                horizon,
                initial_state: x0,
                density,
                lipschitz: LipschitzBounds { y: 0.5, z: 0.3, u: lambda0 },
                bounds: CoefficientBounds {
                    sigma_max: 0.3,
                    beta_max: beta0.abs(),
                    drift_max: 0.1,
                },
                params: p,
            }
        }
        "CONST" => {
            let (g0, b0, sigma0, x0) = (p["g0"], p["b0"], p["sigma0"], p["x0"]);
            ModelSpec {
                name: name.to_string(),
                drift: Arc::new(move |_, _| b0),
                diffusion: Arc::new(move |_, _| sigma0),
                jump_coeff: Arc::new(|_, _| 0.0),
                terminal: Arc::new(move |_| g0),
                generator: Arc::new(|_, _, _, _, _| 0.0),
                horizon,
                initial_state: x0,
                density,
                lipschitz: LipschitzBounds { y: 0.0, z: 0.0, u: 0.0 },
                bounds: CoefficientBounds {
                    sigma_max: sigma0.abs(),
                    beta_max: 0.0,
                    drift_max: b0.abs(),
                },
                params: p,
            }
        }
        _ => unreachable!(),
    };
    Ok(spec)
}

/// Human-readable listing of the built-in registry for the CLI.
pub fn describe_builtins() -> String {
    let mut out = String::new();
    for (name, doc, schema) in builtin_schemas() {
        let _ = writeln!(out, "{name}: {doc}");
        for p in schema {
            let _ = writeln!(out, "  model.{} = {} ({})", p.key, p.default, p.doc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{counter_uniform, CHANNEL_JUMP};

    fn exp_density(lambda: f64) -> DensityModel {
        DensityModel::exponential(lambda).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let dm = exp_density(1.0);
        assert!((intensity(&dm, 0.4, true).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(intensity(&dm, 0.4, false).unwrap(), 0.0);
        let dm2 = exp_density(2.0);
        assert!((intensity(&dm2, 0.7, true).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn intensity_quotient_identity() {
        let dm = exp_density(1.3);
        for k in 0..50 {
            let t = k as f64 * 0.02;
            let lhs = intensity(&dm, t, true).unwrap() * (dm.survival)(t);
            assert!((lhs - (dm.density)(t)).abs() <= 1e-15 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn intensity_error_when_survival_vanishes() {
        let dm = DensityModel {
            density: Arc::new(|_| 1.0),
            survival: Arc::new(|t| if t < 0.5 { 1.0 } else { 0.0 }),
            rate: Arc::new(|_| 1.0),
        };
        assert!(matches!(intensity(&dm, 0.6, true), Err(Error::Domain(_))));
    }

    #[test]
    fn jump_time_inversion_examples() {
        let dm = exp_density(1.0);
        let u = 1.0 - (-0.5f64).exp();
        match sample_jump_time(&dm, u, 1.0).unwrap() {
            JumpTime::Finite(tau) => assert!((tau - 0.5).abs() < 1e-10),
            _ => panic!("expected finite jump"),
        }
        assert_eq!(sample_jump_time(&dm, 0.99, 1.0).unwrap(), JumpTime::AfterHorizon);
        match sample_jump_time(&dm, 1e-12, 1.0).unwrap() {
            JumpTime::Finite(tau) => assert!(tau >= 0.0 && tau < 1e-9),
            _ => panic!("tiny uniform must map near the origin"),
        }
    }

    #[test]
    fn jump_time_mass_matches_monte_carlo_frequency() {
        let dm = exp_density(1.0);
        let horizon = 1.0;
        let m = 100_000u64;
        let mut finite = 0usize;
        for k in 0..m {
            let u = counter_uniform(11, k, 0, CHANNEL_JUMP);
            if matches!(sample_jump_time(&dm, u, horizon).unwrap(), JumpTime::Finite(_)) {
                finite += 1;
            }
        }
        let p = 1.0 - (dm.survival)(horizon);
        let se = (p * (1.0 - p) / m as f64).sqrt();
        assert!((finite as f64 / m as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn jump_time_empirical_cdf_within_ks_band() {
        let dm = exp_density(1.0);
        let horizon = 1.0;
        let m = 100_000usize;
        let mut taus: Vec<f64> = (0..m)
            .map(|k| {
                let u = counter_uniform(5, k as u64, 0, CHANNEL_JUMP);
                match sample_jump_time(&dm, u, horizon).unwrap() {
                    JumpTime::Finite(t) => t,
                    JumpTime::AfterHorizon => f64::INFINITY,
                }
            })
            .collect();
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // KS statistic against F(t) = 1 - exp(-t) over the whole law,
        // infinite values contribute through the plateau at F(T).
        let n = m as f64;
        let mut ks: f64 = 0.0;
        for (idx, t) in taus.iter().enumerate() {
            let f = if t.is_finite() { 1.0 - (-t).exp() } else { 1.0 - (-horizon).exp() };
            let lo = idx as f64 / n;
            let hi = (idx + 1) as f64 / n;
            if t.is_finite() {
                ks = ks.max((f - lo).abs()).max((hi - f).abs());
            } else {
                ks = ks.max((f - lo).abs());
                break;
            }
        }
        assert!(ks < 1.628 / n.sqrt(), "KS statistic {ks} outside 99% band");
    }

    #[test]
    fn builtin_registry_examples() {
        let m = builtin_model("CONST", &BTreeMap::from([(String::from("g0"), 2.0)])).unwrap();
        assert_eq!((m.terminal)(123.0), 2.0);
        assert_eq!((m.generator)(0.1, 1.0, 2.0, 3.0, 4.0), 0.0);
        assert_eq!((m.jump_coeff)(0.5, 7.0), 0.0);

        let lin = builtin_model(
            "LIN",
            &BTreeMap::from([
                (String::from("x0"), 1.0),
                (String::from("sigma0"), 0.5),
                (String::from("beta0"), 0.3),
                (String::from("lambda0"), 1.0),
                (String::from("T"), 1.0),
            ]),
        )
        .unwrap();
        assert_eq!((lin.diffusion)(0.3, 5.0), 0.5);
        assert_eq!((lin.generator)(0.0, 0.0, 0.0, 0.0, 2.0), 2.0);

        let lin0 = builtin_model("LIN", &BTreeMap::from([(String::from("beta0"), 0.0)])).unwrap();
        assert_eq!((lin0.jump_coeff)(0.2, 3.0), 0.0);

        assert!(builtin_model("NOPE", &BTreeMap::new()).is_err());
        assert!(builtin_model("LIN", &BTreeMap::from([(String::from("zeta"), 1.0)])).is_err());
    }

    #[test]
    fn trig_coefficients() {
        let m = builtin_model("TRIG", &BTreeMap::new()).unwrap();
        let x = 0.7f64;
        assert!(((m.drift)(0.0, x) - 0.1 * x.cos()).abs() < 1e-15);
        assert!(((m.diffusion)(0.0, x) - (0.2 + 0.1 * x.sin())).abs() < 1e-15);
        assert!(((m.jump_coeff)(0.0, x) - 0.3 * x.cos()).abs() < 1e-15);
        assert!(((m.terminal)(x) - x.tanh()).abs() < 1e-15);
        let (y, z, u) = (0.4, -0.2, 0.1);
        assert!(((m.generator)(0.0, x, y, z, u) - (0.5 * y.tanh() + 0.3 * z + u)).abs() < 1e-15);
    }

    #[test]
    fn density_validation_catches_bad_survival() {
        let bad = DensityModel {
            density: Arc::new(|t| (-t as f64).exp()),
            survival: Arc::new(|_| 1.0), // inconsistent with the density
            rate: Arc::new(|_| 1.0),
        };
        assert!(bad.validate(1.0).is_err());
    }

    #[test]
    fn survival_monotone_on_grid() {
        let dm = exp_density(0.7);
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let s = (dm.survival)(k as f64 * 0.01);
            assert!(s <= prev);
            prev = s;
        }
        assert!((dm.survival)(0.0) == 1.0);
    }
}
