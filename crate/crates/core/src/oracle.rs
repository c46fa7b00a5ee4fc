//! Independent references: the closed-form solution of the LIN model and a
//! deterministic Gauss-Hermite dynamic-programming solver for the backward
//! recursions on a state mesh.
//!
//! The mesh solver realizes the backward schemes with *exact* conditional
//! expectations: one-step expectations over the Euler transition
//! `x' = x + b(t,x) dt + sigma(t,x) sqrt(dt) xi` are computed by
//! Gauss-Hermite quadrature in `xi`, and value functions live on a uniform
//! state mesh with piecewise-linear interpolation and linear tail
//! extrapolation. Because the post-jump value functions satisfy the same
//! recursion for every jump index once the jump has happened, a single sweep
//! from the terminal layer serves the whole family.
//!
//! Nothing here shares code with the regression solver beyond the implicit
//! step's contract, which is deliberately re-implemented: these functions are
//! the yardstick the Monte Carlo pipeline is measured against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::normal_cdf;
use crate::timegrid::TimeGrid;

/// Gauss-Hermite rule expressed for expectations against a standard normal:
/// `E[f(xi)] ~ sum_k w_k f(x_k)` with weights normalized to sum to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("oracle.gauss_hermite", "need at least 2 nodes"));
        }
        // Roots of the physicists' Hermite polynomial by Newton iteration on
        // the orthonormal recurrence, mirrored exactly onto the negative axis.
        let mut x = vec![0.0f64; n];
        let mut w = vec![0.0f64; n];
        let m = n.div_ceil(2);
        let pim4 = 0.751_125_544_464_942_5_f64; // pi^(-1/4)
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[n - 1],
                3 => 1.91 * z - 0.91 * x[n - 2],
                _ => 2.0 * z - x[n - i + 1],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            // descending positive roots into the upper half, mirror below
            x[n - 1 - i] = z;
            x[i] = -z;
            let wi = 2.0 / (pp * pp);
            w[n - 1 - i] = wi;
            w[i] = wi;
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        // transform to the standard normal measure and normalize exactly
        let sqrt2 = std::f64::consts::SQRT_2;
        let nodes: Vec<f64> = x.iter().map(|v| v * sqrt2).collect();
        let total: f64 = w.iter().sum();
        let weights: Vec<f64> = w.iter().map(|v| v / total).collect();
        Ok(GaussHermite { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Expectation of `f` under the standard normal. Symmetric node pairs
    /// are summed together first so odd integrands cancel exactly in
    /// floating point.
    pub fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let n = self.nodes.len();
        let mut acc = 0.0;
        for i in 0..n / 2 {
            let k = n - 1 - i;
            let pair = self.weights[i] * f(self.nodes[i]) + self.weights[k] * f(self.nodes[k]);
            acc += pair;
        }
        if n % 2 == 1 {
            acc += self.weights[n / 2] * f(self.nodes[n / 2]);
        }
        acc
    }
}

/// A function tabulated on a uniform state mesh, evaluated by piecewise
/// linear interpolation with linear extrapolation beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFunction {
    pub lo: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl MeshFunction {
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |k| self.lo + k as f64 * self.step)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let last = self.values.len() - 2;
        let pos = (x - self.lo) / self.step;
        let idx = (pos.floor() as isize).clamp(0, last as isize) as usize;
        let frac = pos - idx as f64;
        self.values[idx] + frac * (self.values[idx + 1] - self.values[idx])
    }
}

/// State mesh shared by all value functions of a model/grid pair: centered at
/// the initial state, half-width `6 sigma_max sqrt(T) + beta_max`, with a
/// Gaussian-tail check that the mass escaping the mesh stays below 1e-6.
pub fn state_mesh(model: &ModelSpec, mesh_nodes: usize) -> Result<(f64, f64)> {
    if mesh_nodes < 3 {
        return Err(Error::config("oracle.quadrature_dp", "need at least 3 mesh nodes"));
    }
    let b = &model.bounds;
    let half = 6.0 * b.sigma_max * model.horizon.sqrt() + b.beta_max;
    if !(half > 0.0) {
        // degenerate diffusion and no jump: a token interval around x0
        return Ok((model.initial_state - 1.0, 2.0 / (mesh_nodes - 1) as f64));
    }
    let slack = half - b.beta_max - b.drift_max * model.horizon;
    let sigma_t = (b.sigma_max * model.horizon.sqrt()).max(f64::MIN_POSITIVE);
    let escape = 2.0 * normal_cdf(-slack / sigma_t);
    if escape > 1e-6 {
        return Err(Error::config(
            "oracle.quadrature_dp",
            format!("mesh too narrow: escaping probability mass {escape:.3e} exceeds 1e-6"),
        ));
    }
    let lo = model.initial_state - half;
    let step = 2.0 * half / (mesh_nodes - 1) as f64;
    Ok((lo, step))
}

/// Value and gradient-weight functions per time index produced by a sweep.
#[derive(Debug, Clone)]
pub struct QuadratureSolution {
    /// y[i] is the value function at t_i, i = 0..=n.
    pub y: Vec<MeshFunction>,
    /// z[i] is the gradient weight at t_i, i = 0..n (left endpoints).
    pub z: Vec<MeshFunction>,
}

/// Fixed-point solve of `y = e + f(y) dt`; independent re-implementation of
/// the implicit step used by the regression solver.
fn picard<F: Fn(f64) -> f64>(e: f64, f: F, dt: f64, tol: f64, max_iter: usize) -> Result<f64> {
    let mut y = e;
    for _ in 0..max_iter {
        let next = e + f(y) * dt;
        if (next - y).abs() <= tol {
            return Ok(next);
        }
        y = next;
    }
    Err(Error::numerical(
        "oracle.quadrature_dp",
        format!("fixed point did not converge within {max_iter} iterations"),
    ))
}

/// Knobs of the mesh solver.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    pub gh_nodes: usize,
    pub mesh_nodes: usize,
    pub picard_tol: f64,
    pub picard_max: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { gh_nodes: 16, mesh_nodes: 401, picard_tol: 1e-12, picard_max: 50 }
    }
}

fn backward_sweep<G>(
    model: &ModelSpec,
    grid: &TimeGrid,
    cfg: &QuadratureConfig,
    gh: &GaussHermite,
    lo: f64,
    step: f64,
    nodes: usize,
    generator: G,
) -> Result<QuadratureSolution>
where
    G: Fn(usize, f64, f64, f64) -> f64 + Sync, // (time index, x, y, z) -> f(...)
{
    let n = grid.steps();
    let mut y: Vec<MeshFunction> = Vec::with_capacity(n + 1);
    let mut z: Vec<MeshFunction> = Vec::with_capacity(n);
    let terminal: Vec<f64> = (0..nodes)
        .map(|k| (model.terminal)(lo + k as f64 * step))
        .collect();
    y.push(MeshFunction { lo, step, values: terminal });

    let lip = model.lipschitz.y + model.lipschitz.u;
    for i in (1..=n).rev() {
        let upper = &y[0]; // function at t_i (front of the reversed build)
        let t = grid.time(i - 1);
        let dt = grid.dt(i);
        if lip * dt >= 1.0 {
            return Err(Error::admissibility(
                "oracle.quadrature_dp",
                format!("contraction constant {:.3} at step {i}", lip * dt),
            ));
        }
        let sqdt = dt.sqrt();
        let computed: Result<Vec<(f64, f64)>> = (0..nodes)
            .into_par_iter()
            .map(|k| {
                let x = lo + k as f64 * step;
                let drift = (model.drift)(t, x);
                let vol = (model.diffusion)(t, x);
                let e = gh.expectation(|xi| upper.eval(x + drift * dt + vol * sqdt * xi));
                let zval = gh.expectation(|xi| upper.eval(x + drift * dt + vol * sqdt * xi) * (sqdt * xi)) / dt;
                let yval = picard(e, |yy| generator(i - 1, x, yy, zval), dt, cfg.picard_tol, cfg.picard_max)?;
                Ok((yval, zval))
            })
            .collect();
        let computed = computed?;
        let (yv, zv): (Vec<f64>, Vec<f64>) = computed.into_iter().unzip();
        y.insert(0, MeshFunction { lo, step, values: yv });
        z.insert(0, MeshFunction { lo, step, values: zv });
    }
    Ok(QuadratureSolution { y, z })
}

/// Backward dynamic programming on the state mesh.
///
/// `jump_index = Some(j)` solves the post-jump equation; the returned value
/// functions are valid for any jump index at or below the queried time index
/// (the recursion past the jump does not depend on where the jump was), so
/// the full sweep is returned. `jump_index = None` solves the pre-jump
/// equation, reading the diagonal post-jump values from a freshly computed
/// post-jump sweep evaluated at the shifted state `x + beta(t_i, x)`.
pub fn quadrature_dp(
    model: &ModelSpec,
    grid: &TimeGrid,
    jump_index: Option<usize>,
    cfg: &QuadratureConfig,
) -> Result<QuadratureSolution> {
    if cfg.gh_nodes < 8 {
        return Err(Error::config("oracle.quadrature_dp", "need at least 8 quadrature nodes"));
    }
    if let Some(j) = jump_index {
        if j > grid.steps() {
            return Err(Error::config(
                "oracle.quadrature_dp",
                format!("jump index {j} outside grid of {} steps", grid.steps()),
            ));
        }
    }
    let gh = GaussHermite::new(cfg.gh_nodes)?;
    let (lo, step) = state_mesh(model, cfg.mesh_nodes)?;
    let nodes = cfg.mesh_nodes;
    match jump_index {
        Some(_) => backward_sweep(model, grid, cfg, &gh, lo, step, nodes, |idx, x, yv, zv| {
            (model.generator)(grid.time(idx), x, yv, zv, 0.0)
        }),
        None => {
            let post = backward_sweep(model, grid, cfg, &gh, lo, step, nodes, |idx, x, yv, zv| {
                (model.generator)(grid.time(idx), x, yv, zv, 0.0)
            })?;
            let sol = backward_sweep(model, grid, cfg, &gh, lo, step, nodes, |idx, x, yv, zv| {
                let t = grid.time(idx);
                let diag = post.y[idx].eval(x + (model.jump_coeff)(t, x));
                (model.generator)(t, x, yv, zv, diag - yv)
            })?;
            Ok(sol)
        }
    }
}

/// Closed-form solution of the LIN model, used to pin point targets and to
/// drive error functionals without any simulation in the loop.
#[derive(Debug, Clone, Copy)]
pub struct LinParams {
    pub x0: f64,
    pub sigma0: f64,
    pub beta0: f64,
    pub lambda0: f64,
    pub horizon: f64,
}

impl LinParams {
    pub fn from_model(model: &ModelSpec) -> Result<LinParams> {
        if model.name != "LIN" {
            return Err(Error::config(
                "oracle.linear_analytic",
                format!("model {} has no closed form", model.name),
            ));
        }
        Ok(LinParams {
            x0: model.param("x0").unwrap(),
            sigma0: model.param("sigma0").unwrap(),
            beta0: model.param("beta0").unwrap(),
            lambda0: model.param("lambda0").unwrap(),
            horizon: model.param("T").unwrap(),
        })
    }
}

/// Exact (Y, Z, U) of the LIN model at time t and state x.
///
/// On the pre-jump branch `Y = x + c(t)` with
/// `c(t) = beta0 (1 - exp(-lambda0 (T - t)))`; after the jump (state already
/// includes the jump amount) `Y = x`. The gradient weight is the constant
/// volatility on both branches, and the jump gap is `beta0 - c(t)`.
pub fn linear_analytic(p: &LinParams, t: f64, x: f64, jumped: bool) -> (f64, f64, f64) {
    let c = p.beta0 * (1.0 - (-p.lambda0 * (p.horizon - t)).exp());
    if jumped {
        (x, p.sigma0, 0.0)
    } else {
        (x + c, p.sigma0, p.beta0 - c)
    }
}
