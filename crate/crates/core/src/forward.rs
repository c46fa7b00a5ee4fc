//! Forward simulation: Brownian increments, the pre-jump Euler scheme, the
//! family of post-jump Euler schemes indexed by the jump's grid position, and
//! their recombination along the sampled jump time.
//!
//! The post-jump scheme for jump index j agrees with the pre-jump scheme
//! before t_j (same recursion, same increments), receives the jump amount in
//! the same update that crosses t_j, and continues as plain Euler afterwards.
//! Recombination picks the pre-jump path strictly before the jump time and
//! the post-jump path at the grid position of the jump from then on.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{sample_jump_time, DensityModel, JumpTime, ModelSpec};
use crate::rng::{counter_normal, counter_uniform, CHANNEL_BROWNIAN, CHANNEL_JUMP};
use crate::timegrid::TimeGrid;

/// Seed and stream layout that generated a bundle; stored so a bundle is
/// self-describing and reruns can be checked against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngDescriptor {
    pub seed: u64,
    pub channel_brownian: u64,
    pub channel_jump: u64,
}

/// Simulated increments and pre-jump states for a batch of paths.
///
/// Row-major layout: `dw[m * n + (i-1)]` holds the increment over
/// (t_{i-1}, t_i], `x0[m * (n+1) + i]` the pre-jump state at t_i.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dw: Vec<f64>,
    pub x0: Vec<f64>,
    pub taus: Vec<JumpTime>,
    pub rng: RngDescriptor,
}

impl PathBundle {
    pub fn dw_row(&self, m: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.dw[m * n..(m + 1) * n]
    }

    pub fn x0_row(&self, m: usize) -> &[f64] {
        let w = self.grid.steps() + 1;
        &self.x0[m * w..(m + 1) * w]
    }

    pub fn x0_at(&self, m: usize, i: usize) -> f64 {
        self.x0[m * (self.grid.steps() + 1) + i]
    }

    pub fn has_states(&self) -> bool {
        !self.x0.is_empty()
    }
}

/// Draw Brownian increments and jump times for `paths` paths.
///
/// Increment (m, i) is `sqrt(dt_i) * Phi^{-1}(u)` with `u` the counter
/// uniform for (seed, m, i-1) on the Brownian channel; the jump time inverts
/// the density's CDF at the counter uniform for (seed, m, 0) on the jump
/// channel. The output is a pure function of (grid, paths, seed).
pub fn simulate_increments(
    dm: &DensityModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if paths == 0 {
        return Err(Error::config("forward.simulate_increments", "need at least one path"));
    }
    let n = grid.steps();
    let horizon = grid.horizon();
    let mut dw = vec![0.0; paths * n];
    dw.par_chunks_mut(n).enumerate().for_each(|(m, row)| {
        for (col, slot) in row.iter_mut().enumerate() {
            let dt = grid.dt(col + 1);
            *slot = dt.sqrt() * counter_normal(seed, m as u64, col as u64, CHANNEL_BROWNIAN);
        }
    });
    let taus = (0..paths)
        .into_par_iter()
        .map(|m| {
            let u = counter_uniform(seed, m as u64, 0, CHANNEL_JUMP);
            sample_jump_time(dm, u, horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBundle {
        grid: grid.clone(),
        paths,
        dw,
        x0: Vec::new(),
        taus,
        rng: RngDescriptor {
            seed,
            channel_brownian: CHANNEL_BROWNIAN,
            channel_jump: CHANNEL_JUMP,
        },
    })
}

/// Collapse a refined bundle onto a coarse grid whose steps group `factor`
/// refined steps: coarse increments are block sums, jump times carry over.
/// This is the coupling used when a scheme is compared with its own
/// refinement on the same probability space.
pub fn coarsen(bundle: &PathBundle, factor: usize) -> Result<PathBundle> {
    if factor == 0 || bundle.grid.steps() % factor != 0 {
        return Err(Error::config(
            "forward.coarsen",
            format!("refine factor {factor} does not divide {}", bundle.grid.steps()),
        ));
    }
    let n_ref = bundle.grid.steps();
    let n = n_ref / factor;
    let times: Vec<f64> = (0..=n).map(|i| bundle.grid.time(i * factor)).collect();
    let grid = TimeGrid::new(times)?;
    let mut dw = vec![0.0; bundle.paths * n];
    dw.par_chunks_mut(n).enumerate().for_each(|(m, row)| {
        let src = bundle.dw_row(m);
        for (i, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..factor {
                acc += src[i * factor + k];
            }
            *slot = acc;
        }
    });
    Ok(PathBundle {
        grid,
        paths: bundle.paths,
        dw,
        x0: Vec::new(),
        taus: bundle.taus.clone(),
        rng: bundle.rng,
    })
}

fn euler_x0_row(model: &ModelSpec, grid: &TimeGrid, dw_row: &[f64], out: &mut [f64]) -> Result<()> {
    let n = grid.steps();
    out[0] = model.initial_state;
    for i in 1..=n {
        let t = grid.time(i - 1);
        let prev = out[i - 1];
        let next = prev
            + (model.drift)(t, prev) * grid.dt(i)
            + (model.diffusion)(t, prev) * dw_row[i - 1];
        if !next.is_finite() {
            return Err(Error::numerical(
                "forward.euler_x0",
                format!("non-finite state at step {i}"),
            ));
        }
        out[i] = next;
    }
    Ok(())
}

/// Fill the pre-jump Euler states of a bundle in place.
pub fn euler_x0(model: &ModelSpec, bundle: &mut PathBundle) -> Result<()> {
    if bundle.dw.is_empty() {
        return Err(Error::config("forward.euler_x0", "increments not simulated"));
    }
    let n = bundle.grid.steps();
    let mut x0 = vec![0.0; bundle.paths * (n + 1)];
    let grid = &bundle.grid;
    let dw = &bundle.dw;
    let results: Vec<Option<usize>> = x0
        .par_chunks_mut(n + 1)
        .enumerate()
        .map(|(m, row)| {
            let dw_row = &dw[m * n..(m + 1) * n];
            euler_x0_row(model, grid, dw_row, row).err().map(|_| m)
        })
        .collect();
    if let Some(m) = results.into_iter().flatten().next() {
        return Err(Error::numerical(
            "forward.euler_x0",
            format!("coefficient returned non-finite value on path {m}"),
        ));
    }
    bundle.x0 = x0;
    Ok(())
}

/// Post-jump Euler path for jump index j, written as the states at
/// t_j, ..., t_n into `out` (length n+1-j). Before t_j the post-jump path
/// coincides with the pre-jump one, so those values are not duplicated.
pub fn euler_x1_into(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0_row: &[f64],
    dw_row: &[f64],
    j: usize,
    out: &mut [f64],
) -> Result<()> {
    let n = grid.steps();
    let start = if j == 0 {
        let x = model.initial_state;
        x + (model.jump_coeff)(grid.time(0), x)
    } else {
        let t = grid.time(j - 1);
        let prev = x0_row[j - 1];
        prev + (model.drift)(t, prev) * grid.dt(j)
            + (model.diffusion)(t, prev) * dw_row[j - 1]
            + (model.jump_coeff)(t, prev)
    };
    if !start.is_finite() {
        return Err(Error::numerical(
            "forward.euler_x1_family",
            format!("non-finite post-jump state at index {j}"),
        ));
    }
    out[0] = start;
    let mut prev = start;
    for i in j + 1..=n {
        let t = grid.time(i - 1);
        let next = prev
            + (model.drift)(t, prev) * grid.dt(i)
            + (model.diffusion)(t, prev) * dw_row[i - 1];
        if !next.is_finite() {
            return Err(Error::numerical(
                "forward.euler_x1_family",
                format!("non-finite post-jump state at step {i}"),
            ));
        }
        out[i - j] = next;
        prev = next;
    }
    Ok(())
}

/// Allocating wrapper around [`euler_x1_into`].
pub fn euler_x1_path(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0_row: &[f64],
    dw_row: &[f64],
    j: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.steps() + 1 - j];
    euler_x1_into(model, grid, x0_row, dw_row, j, &mut out)?;
    Ok(out)
}

/// State the post-jump path jumps *to* at index i, as a function of the
/// pre-jump path: the crossing update applied at t_i. Used for the diagonal
/// evaluation points of the backward solver.
pub fn diagonal_state(model: &ModelSpec, bundle: &PathBundle, m: usize, i: usize) -> f64 {
    let x0 = bundle.x0_row(m);
    if i == 0 {
        let x = model.initial_state;
        x + (model.jump_coeff)(bundle.grid.time(0), x)
    } else {
        let t = bundle.grid.time(i - 1);
        x0[i] + (model.jump_coeff)(t, x0[i - 1])
    }
}

/// The family of post-jump paths over all jump indices.
///
/// `Materialized` stores the triangular block (index j keeps states for
/// i >= j only; earlier states are shared with the pre-jump path through the
/// accessor). `OnDemand` recomputes slices from the bundle when asked, which
/// keeps memory linear in the path count for backward solves over large
/// grids.
///
/// Slices are column-major: entry `(i, j)` of path m sits at
/// `(i - j) * paths + m`, so the per-time columns consumed by regression are
/// contiguous.
pub enum X1Family {
    OnDemand,
    Materialized { rows: Vec<Vec<f64>> },
}

impl X1Family {
    pub fn on_demand() -> X1Family {
        X1Family::OnDemand
    }

    /// Materialize all slices; refuses when the triangular storage would
    /// exceed `budget_reals` floats.
    pub fn materialize(model: &ModelSpec, bundle: &PathBundle, budget_reals: usize) -> Result<X1Family> {
        let n = bundle.grid.steps();
        let need = bundle.paths * (n + 1) * (n + 2) / 2;
        if need > budget_reals {
            return Err(Error::numerical(
                "forward.euler_x1_family",
                format!(
                    "family storage of {need} reals exceeds budget {budget_reals}; raise mc.family_budget or use streaming solves"
                ),
            ));
        }
        let rows = (0..=n)
            .into_par_iter()
            .map(|j| slice_for(model, bundle, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(X1Family::Materialized { rows })
    }

    /// Post-jump state X^1_{t_i}(t_j) of path m; falls back to the pre-jump
    /// state for i < j.
    pub fn value(&self, model: &ModelSpec, bundle: &PathBundle, m: usize, i: usize, j: usize) -> Result<f64> {
        if i < j {
            return Ok(bundle.x0_at(m, i));
        }
        match self {
            X1Family::Materialized { rows } => Ok(rows[j][(i - j) * bundle.paths + m]),
            X1Family::OnDemand => {
                let vals = euler_x1_path(model, &bundle.grid, bundle.x0_row(m), bundle.dw_row(m), j)?;
                Ok(vals[i - j])
            }
        }
    }

    /// All paths' states for jump index j, column-major (see the type docs).
    pub fn slice(&self, model: &ModelSpec, bundle: &PathBundle, j: usize) -> Result<std::borrow::Cow<'_, [f64]>> {
        match self {
            X1Family::Materialized { rows } => Ok(std::borrow::Cow::Borrowed(&rows[j])),
            X1Family::OnDemand => Ok(std::borrow::Cow::Owned(slice_for(model, bundle, j)?)),
        }
    }

    /// One path's post-jump states for jump index j (length n+1-j).
    pub fn path_values(&self, model: &ModelSpec, bundle: &PathBundle, m: usize, j: usize) -> Result<Vec<f64>> {
        match self {
            X1Family::Materialized { rows } => {
                let width = bundle.grid.steps() + 1 - j;
                Ok((0..width).map(|k| rows[j][k * bundle.paths + m]).collect())
            }
            X1Family::OnDemand => euler_x1_path(model, &bundle.grid, bundle.x0_row(m), bundle.dw_row(m), j),
        }
    }
}

fn slice_for(model: &ModelSpec, bundle: &PathBundle, j: usize) -> Result<Vec<f64>> {
    let n = bundle.grid.steps();
    let width = n + 1 - j;
    let paths = bundle.paths;
    let mut out = vec![0.0; paths * width];

    // Paths are advanced block-wise into a cache-sized row-major scratch and
    // scattered into the column-major output. Blocks own disjoint path
    // ranges, so the raw writes never alias.
    struct SendPtr(*mut f64);
    unsafe impl Send for SendPtr {}
    unsafe impl Sync for SendPtr {}
    let ptr = SendPtr(out.as_mut_ptr());
    const BLOCK: usize = 256;

    let errs: Vec<Option<usize>> = (0..paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(paths);
            let mut scratch = vec![0.0f64; (hi - lo) * width];
            for (bi, m) in (lo..hi).enumerate() {
                let row = &mut scratch[bi * width..(bi + 1) * width];
                if euler_x1_into(model, &bundle.grid, bundle.x0_row(m), bundle.dw_row(m), j, row)
                    .is_err()
                {
                    return Some(m);
                }
            }
            let p = &ptr;
            for k in 0..width {
                for bi in 0..hi - lo {
                    unsafe {
                        *p.0.add(k * paths + lo + bi) = scratch[bi * width + k];
                    }
                }
            }
            None
        })
        .collect();
    if let Some(m) = errs.into_iter().flatten().next() {
        return Err(Error::numerical(
            "forward.euler_x1_family",
            format!("coefficient returned non-finite value on path {m} (jump index {j})"),
        ));
    }
    Ok(out)
}

/// Materialize the full post-jump family (convenience wrapper used when the
/// triangular block comfortably fits in memory).
pub fn euler_x1_family(model: &ModelSpec, bundle: &PathBundle, budget_reals: usize) -> Result<X1Family> {
    if !bundle.has_states() {
        return Err(Error::config("forward.euler_x1_family", "pre-jump states not filled"));
    }
    X1Family::materialize(model, bundle, budget_reals)
}

/// Recombined forward value per path at an arbitrary time t in [0, T]:
/// pre-jump state at the grid position of t strictly before the jump,
/// post-jump state (family indexed by the jump's grid position) afterwards.
pub fn recombine_x(
    model: &ModelSpec,
    bundle: &PathBundle,
    family: &X1Family,
    t: f64,
) -> Result<Vec<f64>> {
    let i = bundle.grid.locate(t)?;
    (0..bundle.paths)
        .map(|m| match bundle.taus[m] {
            JumpTime::Finite(tau) if t >= tau => {
                let j = bundle.grid.locate(tau)?;
                family.value(model, bundle, m, i, j)
            }
            _ => Ok(bundle.x0_at(m, i)),
        })
        .collect()
}
