//! Uniform time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) || horizon <= t0 {
            return Err(Error::domain(format!("time interval [{t0}, {horizon}] is empty")));
        }
        if steps == 0 {
            return Err(Error::domain("time grid needs at least one step"));
        }
        Ok(TimeGrid { t0, horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn knots(&self) -> usize {
        self.steps + 1
    }

    /// Grid with `factor` times as many steps over the same interval.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { steps: self.steps * factor.max(1), ..*self }
    }

    /// Index of the step containing calendar time `t0` on a grid anchored at 0 with this step size.
    pub fn global_offset(&self) -> i64 {
        (self.t0 / self.dt()).round() as i64
    }
}
