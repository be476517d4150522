//! Scalar reduction of the dynamics from a symmetric orthogonal start.
//!
//! With `Q = K = V = I`, pairwise orthogonal initial directions and equal
//! magnitudes, every pair keeps the same cosine `γ(t)` and every token the
//! same magnitude `r(t)`. The right-hand sides below are written in
//! `ε = 1 - γ` with every exponential divided by `e^β`, which keeps them
//! finite for large `β` and precise as `γ → 1`.

use serde::Serialize;

use crate::analysis::FitModel;
use crate::attention::AttentionParams;
use crate::dynamics::{IntegratorConfig, Simulation};
use crate::error::{Error, Result};
use crate::geometry::{direction_stats, orthonormal_init};
use crate::ode::{step, time_grid};
use crate::schemes::{alpha_value, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetricState {
    pub gamma: f64,
    /// `1 - γ`, carried separately for precision near collapse.
    pub epsilon: f64,
    pub r: f64,
    pub t: f64,
}

impl SymmetricState {
    pub fn orthogonal(r0: f64) -> Self {
        Self {
            gamma: 0.0,
            epsilon: 1.0,
            r: r0,
            t: 0.0,
        }
    }
}

fn check(beta: f64, n: usize) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidDimension(format!("need n >= 2, got {n}")));
    }
    Ok(())
}

/// `(dε/dt, dr/dt)` at cosine `1 - eps`, magnitude `r`, time `t`.
fn rhs_epsilon(scheme: &Scheme, beta: f64, n: usize, eps: f64, r: f64, t: f64) -> Result<(f64, f64)> {
    let m = (n - 1) as f64;
    let g = 1.0 - eps;
    let w = (-beta * eps).exp();
    // 2 e^{βγ} (1-γ)((n-1)γ + 1), divided by e^β
    let drive = 2.0 * w * eps * (m * g + 1.0);
    // Z / e^β and ‖A‖ Z / e^β
    let z = m * w + 1.0;
    let sqrt_s = || (1.0 + 2.0 * m * w * g + m * w * w * (1.0 + (m - 1.0) * g)).sqrt();
    let radial = m * w * g + 1.0;
    let (gamma_dot, r_dot) = match scheme {
        Scheme::PostLn => (drive / z, 0.0),
        Scheme::PreLn => (drive / (r * z), radial / z),
        Scheme::MixLn { switch } => {
            if t <= *switch {
                (drive / z, 0.0)
            } else {
                (drive / (r * z), radial / z)
            }
        }
        Scheme::PeriLn => {
            let s = sqrt_s();
            (drive / (r * s), radial / s)
        }
        Scheme::Ngpt { alpha } => (alpha_value(alpha, t)? * drive / sqrt_s(), 0.0),
        Scheme::LnScaling => (drive / ((t + 1.0).sqrt() * z), 0.0),
    };
    Ok((-gamma_dot, r_dot))
}

/// `(dγ/dt, dr/dt)` of the scalar reduction.
pub fn symmetric_rhs(scheme: &Scheme, state: &SymmetricState, beta: f64, n: usize) -> Result<(f64, f64)> {
    check(beta, n)?;
    let (de, dr) = rhs_epsilon(scheme, beta, n, state.epsilon, state.r, state.t)?;
    Ok((-de, dr))
}

/// Sampled solution of the scalar reduction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetricTrajectory {
    pub states: Vec<SymmetricState>,
}

impl SymmetricTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.gamma).collect()
    }

    pub fn epsilon(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.epsilon).collect()
    }

    pub fn r(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.r).collect()
    }
}

/// Integrates the scalar reduction from `γ = 0`, `r = r0` with the
/// configured method and grid. With `cfg.log_time` the integration runs in
/// `(ε, q = r/t, τ = ln t)` from `cfg.start_time`, starting from the
/// orthogonal state at that time.
pub fn integrate_symmetric(
    scheme: &Scheme,
    beta: f64,
    n: usize,
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<SymmetricTrajectory> {
    check(beta, n)?;
    cfg.validate()?;
    scheme.validate()?;
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::InvalidParameter(format!("r0 must be positive, got {r0}")));
    }
    let log = cfg.log_time;
    let to_frame = |t: f64| if log { t.ln() } else { t };
    let to_time = |s: f64| if log { s.exp() } else { s };
    let breakpoints: Vec<f64> = match scheme {
        Scheme::MixLn { switch } if *switch > 0.0 || !log => vec![to_frame(*switch)],
        _ => Vec::new(),
    };
    let grid = time_grid(to_frame(cfg.start_time), to_frame(cfg.horizon), cfg.dt, &breakpoints)?;
    let mut y = [1.0, if log { r0 / cfg.start_time } else { r0 }];
    let sample = |y: &[f64; 2], t: f64| SymmetricState {
        gamma: 1.0 - y[0],
        epsilon: y[0],
        r: if log { y[1] * t } else { y[1] },
        t,
    };
    let mut states = vec![sample(&y, cfg.start_time)];
    let last = grid.len() - 1;
    for (i, w) in grid.windows(2).enumerate() {
        let branch = scheme.step_branch(to_time(w[1]));
        let mut f = |s: f64, y: &[f64; 2]| -> Result<[f64; 2]> {
            if log {
                let t = s.exp();
                let (de, dr) = rhs_epsilon(&branch, beta, n, y[0], y[1] * t, t)?;
                Ok([t * de, dr - y[1]])
            } else {
                let (de, dr) = rhs_epsilon(&branch, beta, n, y[0], y[1], s)?;
                Ok([de, dr])
            }
        };
        y = step(cfg.method, &mut f, w[0], &y, w[1] - w[0])?;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                last_finite_time: states.last().map_or(0.0, |s| s.t),
            });
        }
        let step_no = i + 1;
        if step_no % cfg.record_every == 0 || step_no == last {
            let t = if step_no == last { cfg.horizon } else { to_time(w[1]) };
            states.push(sample(&y, t));
        }
    }
    Ok(SymmetricTrajectory { states })
}

/// `γ̇` as `t → 0` from the orthogonal start. `alpha0` is `α_0` and is only
/// read for nGPT.
pub fn initial_velocity(scheme: &Scheme, beta: f64, n: usize, r0: f64, alpha0: f64) -> Result<f64> {
    check(beta, n)?;
    if !(r0 > 0.0) || !(alpha0 > 0.0) {
        return Err(Error::InvalidParameter("r0 and alpha0 must be positive".into()));
    }
    let m = (n - 1) as f64;
    let z = beta.exp() + m;
    let root = ((2.0 * beta).exp() + m).sqrt();
    Ok(match scheme {
        Scheme::PostLn | Scheme::MixLn { .. } | Scheme::LnScaling => 2.0 / z,
        Scheme::PreLn => 2.0 / (r0 * z),
        Scheme::PeriLn => 2.0 / (r0 * root),
        Scheme::Ngpt { .. } => 2.0 * alpha0 / root,
    })
}

/// Fit model and value for the decay of `ε = 1 - γ` at late times, where
/// the rate is known: `e^{-2t}`, `t^{-2}`, `e^{-4√t}`, and `e^{-2ct}` for
/// nGPT with constant `α ≡ c`.
pub fn terminal_epsilon_rate(scheme: &Scheme) -> Option<(FitModel, f64)> {
    use crate::schemes::AlphaSchedule;
    match scheme {
        Scheme::PostLn => Some((FitModel::ExpRate, -2.0)),
        Scheme::PreLn | Scheme::PeriLn | Scheme::MixLn { .. } => Some((FitModel::PowerExponent, -2.0)),
        Scheme::LnScaling => Some((FitModel::SqrtExpRate, -4.0)),
        Scheme::Ngpt {
            alpha: AlphaSchedule::Constant { c },
        } => Some((FitModel::ExpRate, -2.0 * c)),
        Scheme::Ngpt { .. } => None,
    }
}

/// Agreement between the full particle system and the scalar reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionReport {
    /// `max_t |γ_full(t) - γ_scalar(t)|` over all steps.
    pub max_deviation: f64,
    /// `max_t (max_{j≠k} ⟨θ_j, θ_k⟩ - min_{j≠k} ⟨θ_j, θ_k⟩)` in the full system.
    pub max_spread: f64,
    pub steps: usize,
}

/// Runs the full system from `orthonormal_init(n, d)` with `Q = K = V = I`
/// next to the scalar reduction on the same grid and compares them at every
/// step.
pub fn reduction_consistency(
    scheme: &Scheme,
    beta: f64,
    n: usize,
    d: usize,
    cfg: &IntegratorConfig,
) -> Result<ReductionReport> {
    let init = orthonormal_init(n, d)?;
    let params = AttentionParams::identity(d, beta)?;
    let mut cfg_full = *cfg;
    cfg_full.record_every = 1;
    let scalar = integrate_symmetric(scheme, beta, n, 1.0, &cfg_full)?;
    let mut sim = Simulation::new(&init, *scheme, &params, cfg_full)?;
    let mut report = ReductionReport {
        max_deviation: 0.0,
        max_spread: 0.0,
        steps: 0,
    };
    for expected in &scalar.states {
        if report.steps > 0 && !sim.step()? {
            break;
        }
        let theta = sim.directions()?;
        let stats = direction_stats(&theta)?;
        report.max_deviation = report.max_deviation.max((stats.gamma_mean - expected.gamma).abs());
        let g = theta.transpose() * &theta;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    lo = lo.min(g[(j, k)]);
                    hi = hi.max(g[(j, k)]);
                }
            }
        }
        report.max_spread = report.max_spread.max(hi - lo);
        report.steps += 1;
    }
    report.steps -= 1;
    Ok(report)
}
