//! The discretization grid and its combinatorics.

use crate::error::{Error, Result};

/// A partition 0 = t_0 < t_1 < ... < t_n = T of the time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    mesh: f64,
}

impl TimeGrid {
    /// Build a grid from explicit times. Requires t_0 = 0, strictly
    /// increasing times, and mesh at most 1.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::config("timegrid.new", "need at least two grid points"));
        }
        if times[0] != 0.0 {
            return Err(Error::config("timegrid.new", "grid must start at 0"));
        }
        let mut mesh: f64 = 0.0;
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                return Err(Error::config("timegrid.new", "times must be strictly increasing"));
            }
            mesh = mesh.max(dt);
        }
        if mesh > 1.0 {
            return Err(Error::config(
                "timegrid.new",
                format!("mesh {mesh} exceeds 1, grid inadmissible"),
            ));
        }
        Ok(TimeGrid { times, mesh })
    }

    /// Uniform grid with n steps on [0, T]: t_i = i*T/n.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("timegrid.uniform_grid", "n must be positive"));
        }
        if horizon <= 0.0 {
            return Err(Error::config("timegrid.uniform_grid", "horizon must be positive"));
        }
        let times = (0..=n).map(|i| i as f64 * horizon / n as f64).collect();
        Self::new(times)
    }

    /// Number of steps n (one less than the number of grid points).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Largest step size max_i (t_{i+1} - t_i).
    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    /// Step length t_i - t_{i-1} for 1 <= i <= n.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i] - self.times[i - 1]
    }

    /// Index of the largest grid point t_i with t_i <= t.
    ///
    /// Ties go to equality, so locate(t_i) = i for every grid point.
    pub fn locate(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::domain(
                "timegrid.locate",
                format!("t={t} outside [0, {}]", self.horizon()),
            ));
        }
        Ok(self.times.partition_point(|&ti| ti <= t) - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_grid_examples() {
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.mesh(), 0.25);

        let g1 = TimeGrid::uniform(1, 1.0).unwrap();
        assert_eq!(g1.times(), &[0.0, 1.0]);

        assert!(TimeGrid::uniform(2, 3.0).is_err());
        assert!(TimeGrid::uniform(0, 1.0).is_err());
    }

    #[test]
    fn locate_examples() {
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        assert_eq!(g.locate(0.6).unwrap(), 2);
        assert_eq!(g.locate(0.5).unwrap(), 2);
        assert_eq!(g.locate(1.0).unwrap(), 4);
        assert_eq!(g.locate(0.0).unwrap(), 0);
        assert!(g.locate(-0.1).is_err());
        assert!(g.locate(1.1).is_err());
    }

    proptest! {
        #[test]
        fn locate_is_monotone_and_tight(steps in 1usize..40, raw in proptest::collection::vec(0.0f64..1.0, 0..8)) {
            let g = TimeGrid::uniform(steps, 1.0).unwrap();
            for i in 0..=g.steps() {
                prop_assert_eq!(g.locate(g.time(i)).unwrap(), i);
            }
            let mut ts: Vec<f64> = raw;
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut prev = 0usize;
            for t in ts {
                let i = g.locate(t).unwrap();
                prop_assert!(i >= prev);
                prev = i;
                prop_assert!(g.time(i) <= t);
                if i < g.steps() {
                    prop_assert!(t - g.time(i) < g.mesh());
                }
            }
        }
    }
}
