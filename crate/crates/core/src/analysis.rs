//! Verification studies: the size of attention vectors at random
//! initialization, clustering inside a narrow cone, and decay-rate fits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, attention_vectors, AttentionParams, Linear};
use crate::dynamics::{IntegratorConfig, Simulation};
use crate::error::{Error, Result};
use crate::geometry::{direction_stats, sample_uniform_sphere, sample_uniform_tokens, TokenState};
use crate::schemes::Scheme;
use crate::seeds::derive_rng;

/// Regression variable of a decay fit: `ln v` is fitted against `t`,
/// `ln t` or `√t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    ExpRate,
    PowerExponent,
    SqrtExpRate,
}

impl FitModel {
    fn abscissa(self, t: f64) -> f64 {
        match self {
            FitModel::ExpRate => t,
            FitModel::PowerExponent => t.ln(),
            FitModel::SqrtExpRate => t.sqrt(),
        }
    }
}

/// Fits with `r_squared` below this are flagged.
pub const MIN_R_SQUARED: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub model: FitModel,
    /// Slope of `ln v` against the model's abscissa.
    pub estimate: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points: usize,
    pub flagged: bool,
}

/// Least-squares slope of `ln value` against the model abscissa over the
/// samples with `t` in the closed `window`.
pub fn fit_decay_rate(times: &[f64], values: &[f64], model: FitModel, window: (f64, f64)) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values", times.len()),
            found: format!("{}", values.len()),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in times.iter().zip(values) {
        if t < window.0 || t > window.1 {
            continue;
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "decay fit needs positive values, got {v} at t = {t}"
            )));
        }
        xs.push(model.abscissa(t));
        ys.push(v.ln());
    }
    if xs.len() < 20 {
        return Err(Error::InsufficientData(format!(
            "{} points in window [{}, {}], need at least 20",
            xs.len(),
            window.0,
            window.1
        )));
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).min(1.0)
    } else {
        1.0
    };
    Ok(RateFit {
        model,
        estimate: slope,
        r_squared,
        window,
        points: xs.len(),
        flagged: r_squared < MIN_R_SQUARED,
    })
}

/// Operator norm by power iteration on `MᵀM`. The Rayleigh quotient never
/// exceeds the largest eigenvalue, so the estimate is from below.
pub fn operator_norm<R: Rng + ?Sized>(m: &DMatrix<f64>, iterations: usize, rng: &mut R) -> f64 {
    let mut v = DVector::from_fn(m.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut estimate: f64 = 0.0;
    for _ in 0..iterations {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let mv = m * &v;
        estimate = mv.norm();
        v = m.tr_mul(&mv);
    }
    estimate
}

/// Power iterations used for the rescaling in [`attention_norm_study`].
pub const POWER_ITERATIONS: usize = 64;

/// `√(ln n / n) + ln n / d`.
pub fn attention_norm_bound(n: usize, d: usize) -> f64 {
    let ln = (n as f64).ln();
    (ln / n as f64).sqrt() + ln / d as f64
}

/// Whether `e^{√d} ≥ n ln n ≥ d ≥ ln² n`.
pub fn attention_norm_regime(n: usize, d: usize) -> bool {
    let (nf, df) = (n as f64, d as f64);
    let nln = nf * nf.ln();
    df.sqrt().exp() >= nln && nln >= df && df >= nf.ln().powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionNormStudy {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub bound: f64,
    pub in_regime: bool,
    /// `max_j ‖A_j(0)‖` per run.
    pub max_norms: Vec<f64>,
    /// `max_norms[i] / bound`.
    pub ratios: Vec<f64>,
}

/// Linear-interpolated empirical quantile, `p ∈ [0, 1]`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub(crate) fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl AttentionNormStudy {
    pub fn ratio_quantile(&self, p: f64) -> f64 {
        quantile(&self.ratios, p)
    }

    pub fn median_max_norm(&self) -> f64 {
        quantile(&self.max_norms, 0.5)
    }
}

/// Random weights with `‖QᵀK‖_op = ‖V‖_op = 1` (up to the power-iteration
/// estimate), as a single head with `Q = I` and `K = QᵀK`.
pub fn unit_norm_weights<R: Rng + ?Sized>(d: usize, beta: f64, rng: &mut R) -> Result<AttentionParams> {
    let mut gaussian = || DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (q, k, v) = (gaussian(), gaussian(), gaussian());
    let m = q.transpose() * k;
    let m_norm = operator_norm(&m, POWER_ITERATIONS, rng);
    let v_norm = operator_norm(&v, POWER_ITERATIONS, rng);
    AttentionParams::single_head(
        d,
        Linear::Identity,
        Linear::Dense(m / m_norm),
        Linear::Dense(v / v_norm),
        beta,
    )
}

/// `max_j ‖A_j(0)‖` for i.i.d. uniform tokens and random unit-norm weights,
/// over `runs` independent runs, compared with `√(ln n / n) + ln n / d`.
/// Runs use generators derived from `seed` and execute in parallel.
pub fn attention_norm_study(n: usize, d: usize, beta: f64, runs: usize, seed: u64) -> Result<AttentionNormStudy> {
    if runs == 0 {
        return Err(Error::InvalidParameter("runs must be at least 1".into()));
    }
    let in_regime = attention_norm_regime(n, d);
    if !in_regime {
        log::warn!("n = {n}, d = {d} lies outside e^sqrt(d) >= n ln n >= d >= ln^2 n; the bound may not apply");
    }
    let max_norms = (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, &[n as u64, d as u64, i]);
            let tokens = sample_uniform_tokens(n, d, &mut rng)?;
            let params = unit_norm_weights(d, beta, &mut rng)?;
            let out = attention_vectors(tokens.directions(), &params)?;
            Ok(out.vectors.column_iter().map(|c| c.norm()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let bound = attention_norm_bound(n, d);
    let ratios = max_norms.iter().map(|m| m / bound).collect();
    Ok(AttentionNormStudy {
        n,
        d,
        beta,
        bound,
        in_regime,
        max_norms,
        ratios,
    })
}

/// Tokens in a cone of pairwise cosine at least `1 - delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeConfig {
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub beta: f64,
}

impl ConeConfig {
    /// Checks `0 ≤ δ < 1/(100 n² β²)`.
    pub fn new(n: usize, d: usize, delta: f64, beta: f64) -> Result<Self> {
        let cfg = Self { n, d, delta, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `δ = fraction / (100 n² β²)`.
    pub fn with_fraction(n: usize, d: usize, beta: f64, fraction: f64) -> Result<Self> {
        Self::new(n, d, fraction / (100.0 * (n * n) as f64 * beta * beta), beta)
    }

    pub fn delta_limit(&self) -> f64 {
        1.0 / (100.0 * (self.n * self.n) as f64 * self.beta * self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.n < 2 {
            return Err(Error::InvalidDimension(format!(
                "cone needs n >= 2 and d >= 2, got n = {}, d = {}",
                self.n, self.d
            )));
        }
        if !(self.beta > 0.0) || !(self.delta >= 0.0 && self.delta < self.delta_limit()) {
            return Err(Error::InvalidParameter(format!(
                "cone needs beta > 0 and 0 <= delta < {:e}, got beta = {}, delta = {:e}",
                self.delta_limit(),
                self.beta,
                self.delta
            )));
        }
        Ok(())
    }
}

/// Consecutive rejected draws after which [`cone_init`] gives up.
pub const CONE_MAX_REJECTIONS: usize = 100;

/// Tokens within geodesic distance `arccos(1 - δ)/2` of a random pole, so
/// every pair is within `arccos(1 - δ)`. The pairwise condition is verified
/// and the draw repeated on failure. All magnitudes are 1.
pub fn cone_init<R: Rng + ?Sized>(cfg: &ConeConfig, rng: &mut R) -> Result<TokenState> {
    cfg.validate()?;
    let radius = (1.0 - cfg.delta).acos() / 2.0;
    let (n, d) = (cfg.n, cfg.d);
    for _ in 0..CONE_MAX_REJECTIONS {
        let pole = sample_uniform_sphere(d, rng)?;
        let mut theta = DMatrix::zeros(d, n);
        for j in 0..n {
            let u = crate::geometry::project_tangent(&pole, sample_uniform_sphere(d, rng)?.as_vector());
            let u_norm = u.norm();
            if u_norm == 0.0 {
                continue;
            }
            let angle = radius * rng.random::<f64>().powf(1.0 / (d - 1) as f64);
            let col = pole.as_vector() * angle.cos() + u * (angle.sin() / u_norm);
            theta.set_column(j, &(&col / col.norm()));
        }
        let g = theta.transpose() * &theta;
        if g.iter().all(|c| *c >= 1.0 - cfg.delta) {
            return TokenState::with_unit_magnitudes(theta);
        }
    }
    Err(Error::ConeRejected {
        attempts: CONE_MAX_REJECTIONS,
    })
}

/// One sample of a cone run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichSample {
    pub t: f64,
    pub variance: f64,
    /// `V'/V` by central differences; `None` at the ends and across a
    /// Mix-LN switch.
    pub rate: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_magnitude: f64,
    pub min_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub scheme: Scheme,
    pub delta: f64,
    pub samples: Vec<SandwichSample>,
    /// Samples whose rate lies outside `[lower, upper]`.
    pub sandwich_violations: usize,
    /// Largest distance of a rate outside its interval.
    pub worst_excess: f64,
    /// Samples with some pairwise cosine below `1 - δ` (flagged, not fatal).
    pub cone_violations: usize,
    /// Steps at which the variance increased.
    pub variance_increases: usize,
    /// Samples with `min_k r_k < (1 - δ) t - tol`; only counted for Pre-LN and
    /// Peri-LN.
    pub radial_violations: usize,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.sandwich_violations == 0 && self.variance_increases == 0 && self.radial_violations == 0
    }

    pub fn checked_rates(&self) -> usize {
        self.samples.iter().filter(|s| s.rate.is_some()).count()
    }
}

/// Tolerance on the radial lower bound.
pub const RADIAL_TOLERANCE: f64 = 1e-6;

/// Integrates from [`cone_init`] and checks, at every recorded sample,
///
/// `(-2 - √2/(3√n)) / min_k s_k ≤ V'/V ≤ (-2 + 2nδ + √2/(3√n)) / max_k s_k`
///
/// with the speed factors measured at that instant, that the variance never
/// increases, and (Pre-LN, Peri-LN) that `r_k(t) ≥ (1 - δ) t`. The variance
/// is the deviation form, which keeps relative precision at small values.
pub fn variance_rate_check<R: Rng + ?Sized>(
    scheme: &Scheme,
    cone: &ConeConfig,
    params: &AttentionParams,
    integ: &IntegratorConfig,
    rng: &mut R,
) -> Result<SandwichReport> {
    if (params.beta() - cone.beta).abs() > 0.0 {
        return Err(Error::InvalidParameter(format!(
            "attention beta {} differs from cone beta {}",
            params.beta(),
            cone.beta
        )));
    }
    let init = cone_init(cone, rng)?;
    let mut sim = Simulation::new(&init, *scheme, params, *integ)?;
    let nf = cone.n as f64;
    let slack = 2.0f64.sqrt() / (3.0 * nf.sqrt());
    let mut raw = Vec::new();
    let mut prev_var = f64::INFINITY;
    let mut variance_increases = 0;
    loop {
        let theta = sim.directions()?;
        let stats = direction_stats(&theta)?;
        let var = stats.variance_by_definition;
        if var > prev_var {
            variance_increases += 1;
        }
        prev_var = var;
        let record = sim.steps_taken() % integ.record_every == 0 || sim.is_finished();
        if record {
            let t = sim.time();
            let state = TokenState::from_parts(theta.clone(), sim.magnitudes());
            let out = attend(&theta, params)?;
            let (mut min_s, mut max_s) = (f64::INFINITY, f64::NEG_INFINITY);
            for j in 0..cone.n {
                let aj = out.vectors.column(j);
                let branch = scheme.step_branch(t);
                let (s, _) = branch.factors(j, t, state.magnitudes()[j], theta.column(j).dot(&aj), aj.norm())?;
                min_s = min_s.min(s);
                max_s = max_s.max(s);
            }
            let g = theta.transpose() * &theta;
            raw.push(SandwichSample {
                t,
                variance: var,
                rate: None,
                lower: (-2.0 - slack) / min_s,
                upper: (-2.0 + 2.0 * nf * cone.delta + slack) / max_s,
                min_speed: min_s,
                max_speed: max_s,
                min_magnitude: state.magnitudes().iter().copied().fold(f64::INFINITY, f64::min),
                min_cosine: g.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
        if !sim.step()? {
            break;
        }
    }
    let switch = match scheme {
        Scheme::MixLn { switch } => Some(*switch),
        _ => None,
    };
    for i in 1..raw.len().saturating_sub(1) {
        let (a, b, c) = (raw[i - 1], raw[i], raw[i + 1]);
        if let Some(s) = switch {
            if a.t < s && c.t > s || b.t == s {
                continue;
            }
        }
        // three-point derivative on a possibly nonuniform grid
        let (h0, h1) = (b.t - a.t, c.t - b.t);
        let dv = -h1 / (h0 * (h0 + h1)) * a.variance
            + (h1 - h0) / (h0 * h1) * b.variance
            + h0 / (h1 * (h0 + h1)) * c.variance;
        if b.variance > 0.0 {
            raw[i].rate = Some(dv / b.variance);
        }
    }
    let radial = matches!(scheme, Scheme::PreLn | Scheme::PeriLn);
    let mut report = SandwichReport {
        scheme: *scheme,
        delta: cone.delta,
        samples: Vec::with_capacity(raw.len()),
        sandwich_violations: 0,
        worst_excess: 0.0,
        cone_violations: 0,
        variance_increases,
        radial_violations: 0,
    };
    for s in raw {
        if let Some(rate) = s.rate {
            let excess = (s.lower - rate).max(rate - s.upper);
            if excess > 0.0 {
                report.sandwich_violations += 1;
                report.worst_excess = report.worst_excess.max(excess);
            }
        }
        if s.min_cosine < 1.0 - cone.delta {
            report.cone_violations += 1;
        }
        if radial && s.min_magnitude < (1.0 - cone.delta) * s.t - RADIAL_TOLERANCE {
            report.radial_violations += 1;
        }
        report.samples.push(s);
    }
    Ok(report)
}
