//! Continuous-time token dynamics `θ̇_j = P_{θ_j} A_j(Θ) / s_j`, with the
//! magnitude rates of each scheme, telemetry, and the interaction energy.
//!
//! Trajectories are integrated either directly in `(Θ, r, t)` or in the
//! compactified frame `(Θ, q = r/t, τ = ln t)`, where growing magnitudes
//! become a bounded variable and uniform steps in `τ` cover `t`
//! geometrically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionParams};
use crate::error::{Error, Result};
use crate::geometry::{direction_stats, normalize_columns, project_tangent, Direction, SummaryStats, TokenState};
use crate::ode::{step, time_grid, Method, OdeState};
use crate::schemes::Scheme;

/// Variance below which tokens count as synchronized.
pub const SYNC_TOLERANCE: f64 = 1e-8;

/// Smallest admissible `q = r/t` in the compactified frame.
pub const RADIAL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Step in `t`, or in `τ = ln t` when `log_time` is set.
    pub dt: f64,
    /// Final time `t` (never `τ`).
    pub horizon: f64,
    pub renorm_every: usize,
    pub log_time: bool,
    /// Initial time. Must be positive in the compactified frame.
    pub start_time: f64,
    /// Telemetry is kept every `record_every` steps, plus the last step.
    pub record_every: usize,
    pub sync_tolerance: f64,
    /// Stop as soon as the variance drops below `sync_tolerance`.
    pub stop_at_sync: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            dt: 1e-2,
            horizon: 10.0,
            renorm_every: 1,
            log_time: false,
            start_time: 0.0,
            record_every: 1,
            sync_tolerance: SYNC_TOLERANCE,
            stop_at_sync: false,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            horizon,
            ..Self::default()
        }
    }

    pub fn euler(dt: f64, horizon: f64) -> Self {
        Self {
            method: Method::Euler,
            dt,
            horizon,
            ..Self::default()
        }
    }

    /// RK4 in the compactified frame from `t = 1`, with step `dtau` in `ln t`.
    pub fn compactified(dtau: f64, horizon: f64) -> Self {
        Self {
            dt: dtau,
            horizon,
            log_time: true,
            start_time: 1.0,
            ..Self::default()
        }
    }

    pub fn recording_every(mut self, steps: usize) -> Self {
        self.record_every = steps;
        self
    }

    pub fn stopping_at_sync(mut self) -> Self {
        self.stop_at_sync = true;
        self
    }

    pub fn starting_at(mut self, t: f64) -> Self {
        self.start_time = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.start_time >= 0.0 && self.start_time < self.horizon) {
            return bad(format!(
                "start time {} must lie in [0, horizon = {})",
                self.start_time, self.horizon
            ));
        }
        if self.log_time && self.start_time <= 0.0 {
            return bad("the compactified frame needs a positive start time".into());
        }
        if self.renorm_every == 0 || self.record_every == 0 {
            return bad("renorm_every and record_every must be at least 1".into());
        }
        if !(self.sync_tolerance > 0.0) {
            return bad(format!("sync tolerance must be positive, got {}", self.sync_tolerance));
        }
        Ok(())
    }
}

/// Telemetry of one integration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub stats: Vec<SummaryStats>,
    /// `magnitudes[i][j]` is `r_j` at `times[i]`.
    pub magnitudes: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// First step end at which the variance fell below the sync tolerance.
    pub sync_time: Option<f64>,
    pub final_state: TokenState,
    pub steps: usize,
}

impl Trajectory {
    pub fn gamma(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.gamma_mean).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.variance).collect()
    }

    /// `1 - γ̄`, accurate near collapse.
    pub fn dissimilarity(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.dissimilarity()).collect()
    }

    pub fn mean_magnitude(&self) -> Vec<f64> {
        self.magnitudes
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    pub fn min_magnitude(&self) -> Vec<f64> {
        self.magnitudes
            .iter()
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }
}

/// `E(Θ) = -(1/2β) Σ_{j,k} exp(β⟨θ_j, θ_k⟩)` over the columns of `theta`.
///
/// The largest exponent is factored out before summing. If the result still
/// exceeds the `f64` range it saturates at `-f64::MAX`.
pub fn energy(theta: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let (m, s) = energy_parts(theta, beta)?;
    let e = -(s / (2.0 * beta)) * (beta * m).exp();
    Ok(if e.is_finite() { e } else { -f64::MAX })
}

/// `ln(-E(Θ))`, finite for any finite input.
pub fn log_neg_energy(theta: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let (m, s) = energy_parts(theta, beta)?;
    Ok(beta * m + s.ln() - (2.0 * beta).ln())
}

fn energy_parts(theta: &DMatrix<f64>, beta: f64) -> Result<(f64, f64)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("energy needs beta > 0, got {beta}")));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "directions" });
    }
    let g = theta.transpose() * theta;
    let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = g.iter().map(|v| (beta * (v - m)).exp()).sum();
    Ok((m, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Direct,
    Compactified,
}

/// Directions (possibly slightly off the sphere between renormalizations)
/// and the radial variable: `r` in the direct frame, `q = r/t` otherwise.
#[derive(Debug, Clone)]
struct FlowState {
    theta: DMatrix<f64>,
    rad: DVector<f64>,
}

impl OdeState for FlowState {
    fn add_scaled(&self, k: &Self, a: f64) -> Self {
        Self {
            theta: &self.theta + &k.theta * a,
            rad: &self.rad + &k.rad * a,
        }
    }
}

/// Right-hand side. `time` is `t` or `τ` depending on the frame. Stage
/// directions are projected to the sphere first, so the field is tangent and
/// the flow preserves column norms.
fn field(scheme: &Scheme, params: &AttentionParams, frame: Frame, time: f64, y: &FlowState) -> Result<FlowState> {
    let theta = normalize_columns(&y.theta)?;
    let a = attend(&theta, params)?.vectors;
    let t = match frame {
        Frame::Direct => time,
        Frame::Compactified => time.exp(),
    };
    let n = theta.ncols();
    let mut dtheta = DMatrix::zeros(theta.nrows(), n);
    let mut drad = DVector::zeros(n);
    for j in 0..n {
        let th = theta.column(j);
        let aj = a.column(j);
        let dot = th.dot(&aj);
        let (r, scale) = match frame {
            Frame::Direct => (y.rad[j], 1.0),
            Frame::Compactified => (y.rad[j] * t, t),
        };
        let (s, rdot) = scheme.factors(j, t, r, dot, aj.norm())?;
        let mut col = dtheta.column_mut(j);
        col.copy_from(&aj);
        col.axpy(-dot, &th, 1.0);
        col *= scale / s;
        drad[j] = match frame {
            Frame::Direct => rdot,
            Frame::Compactified => rdot - y.rad[j],
        };
    }
    Ok(FlowState {
        theta: dtheta,
        rad: drad,
    })
}

/// `P_{θ_j} A_j / s_j` for every token, at time `t`.
pub fn velocity_field(scheme: &Scheme, state: &TokenState, t: f64, params: &AttentionParams) -> Result<DMatrix<f64>> {
    scheme.validate()?;
    let y = FlowState {
        theta: state.directions().clone(),
        rad: DVector::from_column_slice(state.magnitudes()),
    };
    Ok(field(scheme, params, Frame::Direct, t, &y)?.theta)
}

/// Step-by-step integrator for one trajectory.
pub struct Simulation<'a> {
    scheme: Scheme,
    params: &'a AttentionParams,
    cfg: IntegratorConfig,
    frame: Frame,
    grid: Vec<f64>,
    index: usize,
    y: FlowState,
    since_renorm: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(init: &TokenState, scheme: Scheme, params: &'a AttentionParams, cfg: IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        scheme.validate()?;
        if params.d() != init.d() {
            return Err(Error::DimensionMismatch {
                expected: format!("tokens of dimension {}", params.d()),
                found: format!("{}", init.d()),
            });
        }
        if !(params.beta() > 0.0) {
            return Err(Error::InvalidParameter("integration needs beta > 0".into()));
        }
        if scheme.has_radial_dynamics() || matches!(scheme, Scheme::PeriLn) {
            if let Some(token) = init.magnitudes().iter().position(|r| *r <= 0.0) {
                return Err(Error::ZeroMagnitude { token });
            }
        }
        let frame = if cfg.log_time {
            Frame::Compactified
        } else {
            Frame::Direct
        };
        let to_frame = |t: f64| match frame {
            Frame::Direct => t,
            Frame::Compactified => t.ln(),
        };
        let breakpoints: Vec<f64> = match scheme {
            Scheme::MixLn { switch } if switch > 0.0 || frame == Frame::Direct => vec![to_frame(switch)],
            _ => Vec::new(),
        };
        let grid = time_grid(to_frame(cfg.start_time), to_frame(cfg.horizon), cfg.dt, &breakpoints)?;
        let rad = match frame {
            Frame::Direct => DVector::from_column_slice(init.magnitudes()),
            Frame::Compactified => {
                DVector::from_iterator(init.n(), init.magnitudes().iter().map(|r| r / cfg.start_time))
            }
        };
        Ok(Self {
            scheme,
            params,
            cfg,
            frame,
            grid,
            index: 0,
            y: FlowState {
                theta: init.directions().clone(),
                rad,
            },
            since_renorm: 0,
        })
    }

    fn physical(&self, time: f64) -> f64 {
        match self.frame {
            Frame::Direct => time,
            Frame::Compactified => time.exp(),
        }
    }

    /// Current physical time `t`.
    pub fn time(&self) -> f64 {
        if self.index + 1 == self.grid.len() {
            // exact endpoint, not exp(ln(horizon))
            self.cfg.horizon
        } else if self.index == 0 {
            self.cfg.start_time
        } else {
            self.physical(self.grid[self.index])
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.index
    }

    pub fn total_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn is_finished(&self) -> bool {
        self.index + 1 >= self.grid.len()
    }

    /// Magnitudes `r_j` at the current time.
    pub fn magnitudes(&self) -> Vec<f64> {
        let t = self.time();
        match self.frame {
            Frame::Direct => self.y.rad.iter().copied().collect(),
            Frame::Compactified => self.y.rad.iter().map(|q| q * t).collect(),
        }
    }

    /// Current directions, projected to the sphere.
    pub fn directions(&self) -> Result<DMatrix<f64>> {
        if self.since_renorm == 0 {
            Ok(self.y.theta.clone())
        } else {
            normalize_columns(&self.y.theta)
        }
    }

    pub fn state(&self) -> Result<TokenState> {
        Ok(TokenState::from_parts(self.directions()?, self.magnitudes()))
    }

    /// Advances by one grid step. Returns `false` once the horizon is reached.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let (t0, t1) = (self.grid[self.index], self.grid[self.index + 1]);
        let scheme = self.scheme.step_branch(self.physical(t1));
        let (params, frame) = (self.params, self.frame);
        let mut f = |time: f64, y: &FlowState| field(&scheme, params, frame, time, y);
        let last_finite_time = self.time();
        let next = step(self.cfg.method, &mut f, t0, &self.y, t1 - t0).map_err(|e| match e {
            Error::ZeroVector | Error::NonFiniteInput { .. } => Error::NonFiniteState { last_finite_time },
            other => other,
        })?;
        if next.theta.iter().chain(next.rad.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { last_finite_time });
        }
        self.y = next;
        self.index += 1;
        self.since_renorm += 1;
        if self.since_renorm >= self.cfg.renorm_every {
            self.y.theta = normalize_columns(&self.y.theta)?;
            self.since_renorm = 0;
        }
        if self.frame == Frame::Compactified {
            if let Some(token) = self.y.rad.iter().position(|q| *q < RADIAL_FLOOR) {
                return Err(Error::RadialFloor {
                    token,
                    time: self.time(),
                    floor: RADIAL_FLOOR,
                });
            }
        }
        Ok(true)
    }
}

/// Integrates from `init` and records telemetry. Uses the compactified frame
/// when `cfg.log_time` is set.
pub fn integrate(
    init: &TokenState,
    scheme: &Scheme,
    params: &AttentionParams,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let mut sim = Simulation::new(init, *scheme, params, *cfg)?;
    let beta = params.beta();
    let mut traj = Trajectory {
        times: Vec::new(),
        stats: Vec::new(),
        magnitudes: Vec::new(),
        energy: Vec::new(),
        sync_time: None,
        final_state: init.clone(),
        steps: 0,
    };
    let record = |sim: &Simulation, theta: &DMatrix<f64>, stats: SummaryStats, traj: &mut Trajectory| -> Result<()> {
        traj.times.push(sim.time());
        traj.stats.push(stats);
        traj.magnitudes.push(sim.magnitudes());
        traj.energy.push(energy(theta, beta)?);
        Ok(())
    };
    let theta = sim.directions()?;
    let stats = direction_stats(&theta)?;
    record(&sim, &theta, stats, &mut traj)?;
    if stats.variance < cfg.sync_tolerance {
        traj.sync_time = Some(sim.time());
    }
    while !(cfg.stop_at_sync && traj.sync_time.is_some()) && sim.step()? {
        let theta = sim.directions()?;
        let stats = direction_stats(&theta)?;
        let synced_now = traj.sync_time.is_none() && stats.variance < cfg.sync_tolerance;
        if synced_now {
            traj.sync_time = Some(sim.time());
        }
        let stopping = synced_now && cfg.stop_at_sync;
        if sim.steps_taken() % cfg.record_every == 0 || sim.is_finished() || stopping {
            record(&sim, &theta, stats, &mut traj)?;
        }
    }
    traj.steps = sim.steps_taken();
    traj.final_state = sim.state()?;
    Ok(traj)
}

/// [`integrate`] in the compactified frame `(Θ, q = r/t, τ = ln t)`.
/// `cfg.dt` is the step in `τ`; a zero start time is replaced by `t = 1`.
pub fn integrate_compactified(
    init: &TokenState,
    scheme: &Scheme,
    params: &AttentionParams,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let mut cfg = *cfg;
    cfg.log_time = true;
    if cfg.start_time <= 0.0 {
        cfg.start_time = 1.0;
    }
    integrate(init, scheme, params, &cfg)
}

/// Pre-LN in the compactified frame, where `θ' = P A / q` and `q' = ⟨θ, A⟩ - q`.
pub fn integrate_compactified_preln(
    init: &TokenState,
    params: &AttentionParams,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    integrate_compactified(init, &Scheme::PreLn, params, cfg)
}

/// Orthonormal basis of the tangent space at `theta`.
fn tangent_basis(theta: &Direction) -> Vec<DVector<f64>> {
    let d = theta.dim();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d - 1);
    for i in 0..d {
        if basis.len() == d - 1 {
            break;
        }
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            v = project_tangent(theta, &v);
            for b in &basis {
                let c = v.dot(b);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    basis
}

/// Part of the energy that depends on token `j` placed at `x`.
fn token_energy(theta: &DMatrix<f64>, j: usize, x: &DVector<f64>, beta: f64) -> f64 {
    let cross: f64 = theta
        .column_iter()
        .enumerate()
        .filter(|(k, _)| *k != j)
        .map(|(_, c)| (beta * c.dot(x)).exp())
        .sum();
    -(2.0 * cross + (beta * x.norm_squared()).exp()) / (2.0 * beta)
}

/// `max_j ‖θ̇_j + ∇_{θ_j} E / (s_j Z_j)‖`, where the spherical gradient of the
/// energy is taken by central differences with step `1e-5` along an
/// orthonormal tangent basis. Vanishes when the dynamics are the modulated
/// gradient flow of `E`, which holds for `Q = K = V = I`.
pub fn gradient_flow_residual(state: &TokenState, scheme: &Scheme, t: f64, params: &AttentionParams) -> Result<f64> {
    if !params.is_identity() {
        return Err(Error::InvalidParameter(
            "the gradient-flow identity needs Q = K = V = I".into(),
        ));
    }
    const H: f64 = 1e-5;
    let beta = params.beta();
    let theta = state.directions();
    let velocity = velocity_field(scheme, state, t, params)?;
    let out = attend(theta, params)?;
    let partitions = out.partitions();
    let mut worst: f64 = 0.0;
    for j in 0..state.n() {
        let th = state.direction(j);
        let aj = out.vectors.column(j);
        let (s, _) = scheme.factors(j, t, state.magnitudes()[j], th.as_vector().dot(&aj), aj.norm())?;
        let mut grad = DVector::zeros(state.d());
        for e in tangent_basis(&th) {
            let plus = crate::geometry::normalize(&(th.as_vector() + &e * H))?;
            let minus = crate::geometry::normalize(&(th.as_vector() - &e * H))?;
            let de = (token_energy(theta, j, plus.as_vector(), beta) - token_energy(theta, j, minus.as_vector(), beta))
                / (2.0 * H);
            grad.axpy(de, &e, 1.0);
        }
        let residual = (velocity.column(j) + grad / (s * partitions[j])).norm();
        worst = worst.max(residual);
    }
    Ok(worst)
}
