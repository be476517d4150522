//! Fixed-step explicit integrators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (expected euler or rk4)"
            ))),
        }
    }
}

/// A state that supports `y + a·k`.
pub trait OdeState: Sized {
    fn add_scaled(&self, k: &Self, a: f64) -> Self;
}

impl<const N: usize> OdeState for [f64; N] {
    fn add_scaled(&self, k: &Self, a: f64) -> Self {
        std::array::from_fn(|i| self[i] + a * k[i])
    }
}

/// Advance `y` from `t` to `t + h` under `y' = f(t, y)`.
pub fn step<S, F>(method: Method, f: &mut F, t: f64, y: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    match method {
        Method::Euler => Ok(y.add_scaled(&f(t, y)?, h)),
        Method::Rk4 => {
            let k1 = f(t, y)?;
            let k2 = f(t + 0.5 * h, &y.add_scaled(&k1, 0.5 * h))?;
            let k3 = f(t + 0.5 * h, &y.add_scaled(&k2, 0.5 * h))?;
            let k4 = f(t + h, &y.add_scaled(&k3, h))?;
            Ok(y.add_scaled(&k1, h / 6.0)
                .add_scaled(&k2, h / 3.0)
                .add_scaled(&k3, h / 3.0)
                .add_scaled(&k4, h / 6.0))
        }
    }
}

/// Grid `start, start + dt, …, end`, with `breakpoints` inserted so that no
/// step straddles one. Grid points are computed as `start + k·dt` so they do
/// not accumulate rounding. Points closer than `dt·1e-9` to a breakpoint or to
/// `end` are merged into it.
pub fn time_grid(start: f64, end: f64, dt: f64, breakpoints: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("step must be positive, got {dt}")));
    }
    if !(end > start) || !start.is_finite() || !end.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "time interval [{start}, {end}] is empty or not finite"
        )));
    }
    let eps = dt * 1e-9;
    let steps = ((end - start) / dt - 1e-9).ceil() as usize;
    let mut grid: Vec<f64> = (0..steps).map(|k| start + k as f64 * dt).collect();
    grid.extend(
        breakpoints
            .iter()
            .copied()
            .filter(|b| *b > start + eps && *b < end - eps),
    );
    grid.push(end);
    grid.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(grid.len());
    for t in grid {
        match out.last_mut() {
            Some(last) if t - *last <= eps => {
                // keep breakpoints and the endpoint exact
                if breakpoints.contains(&t) || t == end {
                    *last = t;
                }
            }
            _ => out.push(t),
        }
    }
    out[0] = start;
    Ok(out)
}
