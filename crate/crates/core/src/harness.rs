//! Error functionals against reference solutions, grid sweeps, and log-log
//! slope fits with confidence intervals.
//!
//! The forward error couples a scheme with its own refinement: the refined
//! bundle is simulated first, the coarse one takes block-summed increments
//! and the same jump times, and the per-path supremum of the squared gap is
//! taken over the refined grid with the coarse scheme held piecewise
//! constant. The backward errors compare the recombined (Y, Z, U) against a
//! reference provider: the closed form for the LIN model, the constant
//! solution for CONST, and a fine-grid quadrature solve for TRIG. Gradient
//! and jump-gap errors are left-endpoint Riemann sums over the grid, the
//! jump-gap one weighted by the pathwise intensity, which vanishes after the
//! jump.

use std::time::Instant;

use crate::backward::{recombine_all, solve, BackwardConfig, BackwardSolution, RecombinedSolution};
use crate::error::{Error, Result};
use crate::forward::{coarsen, euler_x0, euler_x1_path, simulate_increments, PathBundle, X1Family};
use crate::model::{intensity, JumpTime, ModelSpec};
use crate::oracle::{linear_analytic, quadrature_dp, LinParams, QuadratureConfig, QuadratureSolution};
use crate::parallel::mean_and_se;
use crate::rng::derive_seed;
use crate::timegrid::TimeGrid;

/// Reference (Y, Z, U) values along simulated paths.
pub enum Reference {
    /// Closed form of the LIN model, evaluated at the scheme states (exact
    /// for this model, whose Euler states coincide with the true ones at
    /// grid times).
    LinAnalytic(LinParams),
    /// Constant solution (g0, 0, 0).
    ConstExact { g0: f64 },
    /// Quadrature solve on a `factor`-times finer grid, evaluated at the
    /// coarse scheme states.
    FineQuadrature { factor: usize, solution: QuadratureSolution, post: QuadratureSolution },
}

impl Reference {
    /// Pick the reference provider for a built-in model.
    pub fn for_model(model: &ModelSpec, grid: &TimeGrid, cfg: &BackwardConfig) -> Result<Reference> {
        match model.name.as_str() {
            "LIN" => Ok(Reference::LinAnalytic(LinParams::from_model(model)?)),
            "CONST" => Ok(Reference::ConstExact { g0: model.param("g0").unwrap() }),
            "TRIG" => {
                let factor = 8usize;
                let fine = TimeGrid::uniform(grid.steps() * factor, model.horizon)?;
                let qcfg = QuadratureConfig {
                    gh_nodes: cfg.gh_nodes,
                    mesh_nodes: cfg.mesh_nodes,
                    picard_tol: cfg.picard.tol,
                    picard_max: cfg.picard.max_iter,
                };
                let solution = quadrature_dp(model, &fine, None, &qcfg)?;
                let post = quadrature_dp(model, &fine, Some(0), &qcfg)?;
                Ok(Reference::FineQuadrature { factor, solution, post })
            }
            other => Err(Error::config(
                "harness.backward_error",
                format!("no reference provider for model {other}"),
            )),
        }
    }

    /// Reference (Y, Z) at grid index i of a path with pre-jump state `x0`,
    /// post-jump state `x1` (meaningful once jumped), and jump time `tau`.
    fn at(&self, grid: &TimeGrid, i: usize, x0: f64, x1: f64, tau: JumpTime) -> (f64, f64) {
        let t = grid.time(i);
        match self {
            Reference::LinAnalytic(p) => {
                if tau.occurred_by(t) {
                    let (y, z, _) = linear_analytic(p, t, x1, true);
                    (y, z)
                } else {
                    let (y, z, _) = linear_analytic(p, t, x0, false);
                    (y, z)
                }
            }
            Reference::ConstExact { g0 } => (*g0, 0.0),
            Reference::FineQuadrature { factor, solution, post } => {
                let fi = i * factor;
                let zi = fi.min(solution.z.len() - 1);
                if tau.occurred_by(t) {
                    (post.y[fi].eval(x1), post.z[zi].eval(x1))
                } else {
                    (solution.y[fi].eval(x0), solution.z[zi].eval(x0))
                }
            }
        }
    }

    /// Reference jump gap before the jump; the shifted-state evaluation
    /// needs the jump coefficient, hence the model argument.
    fn u_alive(&self, model: &ModelSpec, grid: &TimeGrid, i: usize, x0: f64) -> f64 {
        let t = grid.time(i);
        match self {
            Reference::LinAnalytic(p) => linear_analytic(p, t, x0, false).2,
            Reference::ConstExact { .. } => 0.0,
            Reference::FineQuadrature { factor, solution, post } => {
                let fi = i * factor;
                let shifted = x0 + (model.jump_coeff)(t, x0);
                post.y[fi].eval(shifted) - solution.y[fi].eval(x0)
            }
        }
    }
}

/// Mean over paths of the squared sup-distance between a refined scheme and
/// the coarse one held piecewise constant, over the refined grid times.
pub fn forward_error(
    model: &ModelSpec,
    fine: &PathBundle,
    coarse: &PathBundle,
) -> Result<(f64, f64)> {
    forward_error_on(model, fine, coarse, false)
}

/// Same functional with the supremum restricted to the coarse grid points
/// (used for exactness checks where the intra-interval Brownian deviation of
/// the reference would dominate).
pub fn forward_error_grid_restricted(
    model: &ModelSpec,
    fine: &PathBundle,
    coarse: &PathBundle,
) -> Result<(f64, f64)> {
    forward_error_on(model, fine, coarse, true)
}

fn forward_error_on(
    model: &ModelSpec,
    fine: &PathBundle,
    coarse: &PathBundle,
    coarse_times_only: bool,
) -> Result<(f64, f64)> {
    if fine.paths != coarse.paths {
        return Err(Error::config("harness.forward_error", "path counts differ"));
    }
    if fine.rng.seed != coarse.rng.seed {
        return Err(Error::config("harness.forward_error", "bundles from different seeds"));
    }
    let n_f = fine.grid.steps();
    let n_c = coarse.grid.steps();
    if n_f % n_c != 0 {
        return Err(Error::config("harness.forward_error", "grids not nested"));
    }
    let factor = n_f / n_c;
    let paths = fine.paths;

    let sup_sq = |m: usize| -> Result<f64> {
        let tau = fine.taus[m];
        let (j_f, j_c) = match tau {
            JumpTime::Finite(t) => (Some(fine.grid.locate(t)?), Some(coarse.grid.locate(t)?)),
            JumpTime::AfterHorizon => (None, None),
        };
        let x1_f = match j_f {
            Some(j) => Some(euler_x1_path(model, &fine.grid, fine.x0_row(m), fine.dw_row(m), j)?),
            None => None,
        };
        let x1_c = match j_c {
            Some(j) => Some(euler_x1_path(model, &coarse.grid, coarse.x0_row(m), coarse.dw_row(m), j)?),
            None => None,
        };
        let mut sup = 0.0f64;
        for k in 0..=n_f {
            if coarse_times_only && k % factor != 0 {
                continue;
            }
            let t = fine.grid.time(k);
            let jumped = tau.occurred_by(t);
            let v_f = if jumped {
                let j = j_f.unwrap();
                x1_f.as_ref().unwrap()[k - j]
            } else {
                fine.x0_at(m, k)
            };
            let i_c = k / factor; // largest coarse index with time <= t
            let v_c = if jumped {
                let j = j_c.unwrap();
                if i_c >= j {
                    x1_c.as_ref().unwrap()[i_c - j]
                } else {
                    coarse.x0_at(m, i_c) // pre-jump agreement below the jump index
                }
            } else {
                coarse.x0_at(m, i_c)
            };
            let d = v_f - v_c;
            sup = sup.max(d * d);
        }
        Ok(sup)
    };

    use rayon::prelude::*;
    let vals: Vec<f64> = (0..paths).into_par_iter().map(sup_sq).collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_se(paths, |m| vals[m]);
    Ok((mean, se))
}

/// Per-path supremum error of a single post-jump family member between a
/// refined and a coarse scheme, over refined times at or after theta.
pub fn forward_error_family(
    model: &ModelSpec,
    fine: &PathBundle,
    coarse: &PathBundle,
    theta: f64,
) -> Result<(f64, f64)> {
    let n_f = fine.grid.steps();
    let n_c = coarse.grid.steps();
    let factor = n_f / n_c;
    let j_f = fine.grid.locate(theta)?;
    let j_c = coarse.grid.locate(theta)?;
    let paths = fine.paths;
    use rayon::prelude::*;
    let vals: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|m| -> Result<f64> {
            let xf = euler_x1_path(model, &fine.grid, fine.x0_row(m), fine.dw_row(m), j_f)?;
            let xc = euler_x1_path(model, &coarse.grid, coarse.x0_row(m), coarse.dw_row(m), j_c)?;
            let mut sup = 0.0f64;
            for k in j_f..=n_f {
                let i_c = k / factor;
                let v_c = if i_c >= j_c { xc[i_c - j_c] } else { coarse.x0_at(m, i_c) };
                let d = xf[k - j_f] - v_c;
                sup = sup.max(d * d);
            }
            Ok(sup)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_se(paths, |m| vals[m]);
    Ok((mean, se))
}

/// Backward error functionals of a recombined solution against a reference:
/// the max over grid times of the mean squared Y gap, and left-endpoint
/// Riemann sums of the mean squared Z and intensity-weighted U gaps.
pub fn backward_error(
    reference: &Reference,
    model: &ModelSpec,
    bundle: &PathBundle,
    family: &X1Family,
    rec: &RecombinedSolution,
) -> Result<([f64; 3], [f64; 3])> {
    let n = bundle.grid.steps();
    let paths = bundle.paths;
    let w = n + 1;

    // per-time Y moments plus per-path Z/U integrals, all fixed-association
    let stats = {
        // layout: [y_sq sums per time | y_quad sums per time | z_int, z_int_sq, u_int, u_int_sq]
        let k = 2 * w + 4;
        let grid = &bundle.grid;
        chunked_try_accumulate(paths, k, |m, acc| -> Result<()> {
            let tau = bundle.taus[m];
            let j = match tau {
                JumpTime::Finite(t) => Some(grid.locate(t)?),
                JumpTime::AfterHorizon => None,
            };
            let x1_row = match j {
                Some(j) => Some(family.path_values(model, bundle, m, j)?),
                None => None,
            };
            let mut z_int = 0.0;
            let mut u_int = 0.0;
            for i in 0..=n {
                let t = grid.time(i);
                let x0 = bundle.x0_at(m, i);
                let x1 = match (&x1_row, j) {
                    (Some(row), Some(jj)) if i >= jj => row[i - jj],
                    _ => x0,
                };
                let (y_ref, z_ref) = reference.at(grid, i, x0, x1, tau);
                let u_ref = if tau.alive_weak(t) {
                    reference.u_alive(model, grid, i, x0)
                } else {
                    0.0
                };
                let (y_s, z_s, u_s) = rec.at(m, i);
                let dy = y_s - y_ref;
                acc[i] += dy * dy;
                acc[w + i] += dy * dy * dy * dy;
                if i < n {
                    let dt = grid.dt(i + 1);
                    let dz = z_s - z_ref;
                    z_int += dt * dz * dz;
                    let lam = intensity(&model.density, t, tau.alive_weak(t))?;
                    let du = u_s - u_ref;
                    u_int += dt * lam * du * du;
                }
            }
            acc[2 * w] += z_int;
            acc[2 * w + 1] += z_int * z_int;
            acc[2 * w + 2] += u_int;
            acc[2 * w + 3] += u_int * u_int;
            Ok(())
        })?
    };

    let pf = paths as f64;
    let mut err_y = 0.0f64;
    let mut se_y = 0.0f64;
    for i in 0..w {
        let mean = stats[i] / pf;
        if mean > err_y {
            err_y = mean;
            let var = (stats[w + i] / pf - mean * mean).max(0.0);
            se_y = (var / pf).sqrt();
        }
    }
    let z_mean = stats[2 * w] / pf;
    let z_var = (stats[2 * w + 1] / pf - z_mean * z_mean).max(0.0);
    let u_mean = stats[2 * w + 2] / pf;
    let u_var = (stats[2 * w + 3] / pf - u_mean * u_mean).max(0.0);
    Ok((
        [err_y, z_mean, u_mean],
        [se_y, (z_var / pf).sqrt(), (u_var / pf).sqrt()],
    ))
}

/// Fallible variant of the fixed-chunk accumulator.
fn chunked_try_accumulate<F>(m: usize, k: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    let chunk = crate::parallel::CHUNK;
    let partials: Vec<Result<Vec<f64>>> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(m);
            let mut acc = vec![0.0; k];
            for i in lo..hi {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; k];
    for part in partials {
        let part = part?;
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total)
}

/// One grid size of a study.
#[derive(Debug, Clone)]
pub struct ErrorPoint {
    pub n: usize,
    pub mesh: f64,
    pub err_x: f64,
    pub se_x: f64,
    pub err_y: f64,
    pub se_y: f64,
    pub err_z: f64,
    pub se_z: f64,
    pub err_u: f64,
    pub se_u: f64,
    pub wall_ms: u64,
}

/// Least-squares slope of log(err) against log(mesh) with a 95% interval.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Study output: one row per grid size plus fitted slopes per error column.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub model: String,
    pub mode: String,
    pub points: Vec<ErrorPoint>,
    /// Slopes keyed in column order err_x, err_y, err_z, err_u.
    pub slopes: Vec<(&'static str, SlopeFit)>,
}

/// Two-sided 97.5% Student quantiles for small residual degrees of freedom.
fn t_quantile_975(df: usize) -> f64 {
    const TABLE: [f64; 10] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    ];
    if df == 0 {
        f64::INFINITY
    } else if df <= TABLE.len() {
        TABLE[df - 1]
    } else {
        1.96
    }
}

/// Ordinary least squares of log(err) on log(mesh). Zero or negative error
/// entries are floored at 1e-300 so degenerate columns stay finite.
pub fn fit_slope(meshes: &[f64], errs: &[f64]) -> Result<SlopeFit> {
    let k = meshes.len();
    if k < 3 || errs.len() != k {
        return Err(Error::config(
            "harness.convergence_study",
            "insufficient points for slope (need at least 3 grid sizes)",
        ));
    }
    let xs: Vec<f64> = meshes.iter().map(|m| m.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.max(1e-300).ln()).collect();
    let kf = k as f64;
    let mx = xs.iter().sum::<f64>() / kf;
    let my = ys.iter().sum::<f64>() / kf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let df = k - 2;
    let se = (sse / df as f64 / sxx).sqrt();
    let t = t_quantile_975(df);
    Ok(SlopeFit { slope, ci_lo: slope - t * se, ci_hi: slope + t * se })
}

/// Study configuration: resolution of the forward coupling and the backward
/// solver settings.
#[derive(Debug, Clone, Copy)]
pub struct StudyConfig {
    pub refine_factor: usize,
    pub backward: BackwardConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig { refine_factor: 16, backward: BackwardConfig::default() }
    }
}

/// Run forward and backward error estimation over a list of grid sizes with
/// independent per-size seeds derived from the master seed, then fit slopes.
pub fn convergence_study(
    model: &ModelSpec,
    n_list: &[usize],
    paths: usize,
    seed: u64,
    cfg: &StudyConfig,
) -> Result<ErrorReport> {
    if n_list.len() < 3 {
        return Err(Error::config(
            "harness.convergence_study",
            "insufficient points for slope (need at least 3 grid sizes)",
        ));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("harness.convergence_study", "n_list must be ascending"));
    }
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let started = Instant::now();
        let point = study_point(model, n, paths, derive_seed(seed, n as u64), cfg)
            .map_err(|e| Error::Numerical(format!("{e} (at n={n})")))?;
        points.push(ErrorPoint { wall_ms: started.elapsed().as_millis() as u64, ..point });
    }
    let meshes: Vec<f64> = points.iter().map(|p| p.mesh).collect();
    let mut slopes = Vec::new();
    for (name, pick) in [
        ("err_x", 0usize),
        ("err_y", 1),
        ("err_z", 2),
        ("err_u", 3),
    ] {
        let errs: Vec<f64> = points
            .iter()
            .map(|p| match pick {
                0 => p.err_x,
                1 => p.err_y,
                2 => p.err_z,
                _ => p.err_u,
            })
            .collect();
        slopes.push((name, fit_slope(&meshes, &errs)?));
    }
    Ok(ErrorReport {
        model: model.name.clone(),
        mode: cfg.backward.mode.label().to_string(),
        points,
        slopes,
    })
}

fn study_point(
    model: &ModelSpec,
    n: usize,
    paths: usize,
    seed: u64,
    cfg: &StudyConfig,
) -> Result<ErrorPoint> {
    let fine_grid = TimeGrid::uniform(n * cfg.refine_factor, model.horizon)?;
    let mut fine = simulate_increments(&model.density, &fine_grid, paths, seed)?;
    euler_x0(model, &mut fine)?;
    let mut coarse = coarsen(&fine, cfg.refine_factor)?;
    euler_x0(model, &mut coarse)?;
    let (err_x, se_x) = forward_error(model, &fine, &coarse)?;

    let family = X1Family::on_demand();
    let sol: BackwardSolution = solve(model, &coarse, &family, &cfg.backward)?;
    let rec = recombine_all(model, &coarse, &family, &sol)?;
    let reference = Reference::for_model(model, &coarse.grid, &cfg.backward)?;
    let ([err_y, err_z, err_u], [se_y, se_z, se_u]) =
        backward_error(&reference, model, &coarse, &family, &rec)?;

    Ok(ErrorPoint {
        n,
        mesh: coarse.grid.mesh(),
        err_x,
        se_x,
        err_y,
        se_y,
        err_z,
        se_z,
        err_u,
        se_u,
        wall_ms: 0,
    })
}

/// Render the per-size error table with the pinned header.
pub fn errors_csv(report: &ErrorReport) -> String {
    let mut out =
        String::from("model,mode,n,mesh,err_x,se_x,err_y,se_y,err_z,se_z,err_u,se_u,wall_ms\n");
    for p in &report.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            report.model,
            report.mode,
            p.n,
            p.mesh,
            p.err_x,
            p.se_x,
            p.err_y,
            p.se_y,
            p.err_z,
            p.se_z,
            p.err_u,
            p.se_u,
            p.wall_ms
        ));
    }
    out
}

/// Render the fitted slopes with the pinned header.
pub fn slopes_csv(report: &ErrorReport) -> String {
    let mut out = String::from("model,mode,column,slope,ci_lo,ci_hi\n");
    for (name, s) in &report.slopes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.model, report.mode, name, s.slope, s.ci_lo, s.ci_hi
        ));
    }
    out
}
