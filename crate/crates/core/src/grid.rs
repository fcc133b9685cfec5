//! Characteristics-aligned age x time lattice with equal steps in age and
//! time, node fields on it, age quadrature and region masks.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice on [0, A] x [0, T] with step `h` in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharGrid {
    pub h: f64,
    /// Number of age cells; age nodes are 0..=na.
    pub na: usize,
    /// Number of time steps; time nodes are 0..=nt.
    pub nt: usize,
}

const MAX_DIVISIONS: usize = 1_000_000;

impl CharGrid {
    /// Largest step not above `target_h` that divides both `max_age` and `horizon`.
    pub fn build(max_age: f64, horizon: f64, target_h: f64) -> Result<Self> {
        if !(max_age > 0.0 && horizon > 0.0 && target_h > 0.0) {
            return Err(Error::config(
                "grid",
                format!("need A, T, h > 0 (got A={max_age}, T={horizon}, h={target_h})"),
            ));
        }
        if target_h >= max_age.min(horizon) {
            return Err(Error::config(
                "grid.target_h",
                format!("target_h = {target_h} must be below min(A, T) = {}", max_age.min(horizon)),
            ));
        }
        let first = (max_age / target_h - 1e-9).ceil().max(1.0) as usize;
        for na in first..MAX_DIVISIONS {
            let h = max_age / na as f64;
            let steps = horizon / h;
            let nt = steps.round();
            if (steps - nt).abs() <= 1e-9 * steps.max(1.0) && nt >= 1.0 {
                return Ok(Self {
                    h,
                    na,
                    nt: nt as usize,
                });
            }
        }
        Err(Error::config(
            "grid.target_h",
            format!("no common step divides A={max_age} and T={horizon}"),
        ))
    }

    pub fn max_age(&self) -> f64 {
        self.na as f64 * self.h
    }

    pub fn horizon(&self) -> f64 {
        self.nt as f64 * self.h
    }

    pub fn age(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h
    }

    pub fn age_nodes(&self) -> usize {
        self.na + 1
    }

    pub fn time_nodes(&self) -> usize {
        self.nt + 1
    }

    pub fn ages(&self) -> Vec<f64> {
        (0..=self.na).map(|i| self.age(i)).collect()
    }

    /// Composite trapezoid weights over the age nodes.
    pub fn age_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.na + 1, self.h)
    }

    pub fn time_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nt + 1, self.h)
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=self.na).map(|i| f(self.age(i))).collect()
    }
}

pub fn trapezoid_weights(nodes: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; nodes];
    if nodes == 1 {
        w[0] = 0.0;
    } else {
        w[0] = 0.5 * h;
        w[nodes - 1] = 0.5 * h;
    }
    w
}

/// Composite trapezoid integral of a single time level.
pub fn integrate_age(grid: &CharGrid, slice: &[f64]) -> Result<f64> {
    if slice.len() != grid.age_nodes() {
        return Err(Error::dim("age slice", grid.age_nodes(), slice.len()));
    }
    let n = slice.len();
    let inner: f64 = slice[1..n - 1].iter().sum();
    Ok(grid.h * (inner + 0.5 * (slice[0] + slice[n - 1])))
}

/// Quadrature-consistent indicator of the age window (lo, hi): 1 strictly
/// inside, 1/2 on nodes that coincide with an endpoint, 0 outside.
pub fn region_mask(grid: &CharGrid, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) || lo < 0.0 || hi > grid.max_age() * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "invalid age window ({lo}, {hi}) on [0, {}]",
            grid.max_age()
        )));
    }
    let tol = 1e-9 * grid.h;
    Ok((0..=grid.na)
        .map(|i| {
            let a = grid.age(i);
            if (a - lo).abs() <= tol || (a - hi).abs() <= tol {
                0.5
            } else if a > lo && a < hi {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Scalar field on the nodes of a [`CharGrid`], stored time level by time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    na: usize,
    nt: usize,
    values: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: &CharGrid) -> Self {
        Self {
            na: grid.na,
            nt: grid.nt,
            values: vec![0.0; grid.age_nodes() * grid.time_nodes()],
        }
    }

    pub fn from_fn(grid: &CharGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for n in 0..=grid.nt {
            for i in 0..=grid.na {
                out.set(i, n, f(grid.age(i), grid.time(n)));
            }
        }
        out
    }

    /// Builds a field from time-major values; rejects non-finite entries.
    pub fn from_values(grid: &CharGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.age_nodes() * grid.time_nodes();
        if values.len() != expected {
            return Err(Error::dim("field values", expected, values.len()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite field value at index {k}")));
        }
        Ok(Self {
            na: grid.na,
            nt: grid.nt,
            values,
        })
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn matches(&self, grid: &CharGrid) -> bool {
        self.na == grid.na && self.nt == grid.nt
    }

    #[inline]
    pub fn get(&self, i: usize, n: usize) -> f64 {
        self.values[n * (self.na + 1) + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, n: usize, v: f64) {
        self.values[n * (self.na + 1) + i] = v;
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let w = self.na + 1;
        &self.values[n * w..(n + 1) * w]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.na + 1;
        &mut self.values[n * w..(n + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Discrete L2(Q) norm with trapezoid weights in age and time.
    pub fn l2_norm(&self, grid: &CharGrid) -> f64 {
        let wa = grid.age_weights();
        let wt = grid.time_weights();
        let mut acc = 0.0;
        for (n, wn) in wt.iter().enumerate() {
            for (i, wi) in wa.iter().enumerate() {
                acc += wn * wi * self.get(i, n).powi(2);
            }
        }
        acc.sqrt()
    }

    /// Writes `age,time,value` rows, time-major.
    pub fn write_csv<W: Write>(&self, grid: &CharGrid, mut out: W) -> Result<()> {
        let mut buf = String::with_capacity(self.values.len() * 24);
        buf.push_str("age,time,value\n");
        for n in 0..=self.nt {
            for i in 0..=self.na {
                let _ = writeln!(buf, "{},{},{}", grid.age(i), grid.time(n), self.get(i, n));
            }
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(grid: &CharGrid, input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "age,time,value" {
            return Err(Error::Domain(format!("bad field CSV header `{header}`")));
        }
        let mut values = Vec::with_capacity(grid.age_nodes() * grid.time_nodes());
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value = line
                .rsplit(',')
                .next()
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Domain(format!("bad field CSV row {}: `{line}`", k + 2)))?;
            values.push(value);
        }
        Self::from_values(grid, values)
    }
}
