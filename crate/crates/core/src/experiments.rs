//! Seeded multi-run experiments, aggregation into quantile bands, CSV and
//! manifest output, and the figure presets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{cone_init, quantile_sorted, ConeConfig};
use crate::attention::{sample_weights, WeightRegime};
use crate::dynamics::{energy, integrate, IntegratorConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    collapsed_init, direction_stats, normalize_columns, orthonormal_init, sample_gaussian_tokens,
    sample_uniform_sphere, sample_uniform_tokens, TokenState,
};
use crate::ode::Method;
use crate::schemes::{discrete_update, AlphaSchedule, Scheme, SchemeKind};
use crate::seeds::derive_rng;
use crate::symmetric::integrate_symmetric;

/// Version string written into every manifest.
pub const ARTIFACT_VERSION: &str = concat!("normflow ", env!("CARGO_PKG_VERSION"));

/// Lower and upper band quantiles.
pub const BAND: (f64, f64) = (0.05, 0.95);

/// Largest tolerated fraction of aborted runs.
pub const MAX_ABORT_FRACTION: f64 = 0.1;

/// Fraction of the horizon at which presets switch Mix-LN to Pre-LN.
pub const MIX_SWITCH_FRACTION: f64 = 0.25;

/// Inverse temperature, possibly relative to the dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSpec {
    Value(f64),
    SqrtD,
    FourSqrtD,
    SqrtDHead,
}

impl BetaSpec {
    pub fn resolve(&self, d: usize, n_heads: usize) -> f64 {
        match *self {
            BetaSpec::Value(b) => b,
            BetaSpec::SqrtD => (d as f64).sqrt(),
            BetaSpec::FourSqrtD => 4.0 * (d as f64).sqrt(),
            BetaSpec::SqrtDHead => ((d / n_heads.max(1)) as f64).sqrt(),
        }
    }
}

impl FromStr for BetaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt-d" => Ok(BetaSpec::SqrtD),
            "four-sqrt-d" | "4sqrt-d" => Ok(BetaSpec::FourSqrtD),
            "sqrt-d-head" => Ok(BetaSpec::SqrtDHead),
            other => other.parse::<f64>().map(BetaSpec::Value).map_err(|_| {
                Error::InvalidParameter(format!(
                    "beta must be a number, sqrt-d, four-sqrt-d or sqrt-d-head, got `{other}`"
                ))
            }),
        }
    }
}

impl fmt::Display for BetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSpec::Value(b) => write!(f, "{b}"),
            BetaSpec::SqrtD => f.write_str("sqrt-d"),
            BetaSpec::FourSqrtD => f.write_str("four-sqrt-d"),
            BetaSpec::SqrtDHead => f.write_str("sqrt-d-head"),
        }
    }
}

/// Initial configuration of each run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitKind {
    /// The first `n` basis vectors, unit magnitudes (needs `d ≥ n`).
    Orthonormal,
    /// I.i.d. uniform directions, unit magnitudes.
    Uniform,
    /// I.i.d. standard Gaussian embeddings.
    Gaussian,
    /// Uniform in a cone of pairwise cosine at least `1 - delta`.
    Cone { delta: f64 },
    /// All tokens on one random direction.
    Collapsed,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthonormal" => Ok(InitKind::Orthonormal),
            "uniform" => Ok(InitKind::Uniform),
            "gaussian" => Ok(InitKind::Gaussian),
            "collapsed" => Ok(InitKind::Collapsed),
            other => {
                let delta = other
                    .strip_prefix("cone:")
                    .or_else(|| other.strip_prefix("cone(").and_then(|r| r.strip_suffix(')')))
                    .and_then(|d| d.parse::<f64>().ok());
                delta.map(|delta| InitKind::Cone { delta }).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "unknown init `{other}` (expected orthonormal, uniform, gaussian, collapsed or cone:DELTA)"
                    ))
                })
            }
        }
    }
}

/// How each run is advanced in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Discrete layer updates, one per unit of time; `horizon` is the depth.
    Layers,
    /// The continuous dynamics under the configured integrator.
    Continuous,
    /// The scalar ODE of the orthogonal symmetric start (`Q = K = V = I`).
    Symmetric,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Engine::Layers),
            "continuous" => Ok(Engine::Continuous),
            "symmetric" => Ok(Engine::Symmetric),
            other => Err(Error::InvalidParameter(format!(
                "unknown engine `{other}` (expected layers, continuous or symmetric)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Prefix of every output file.
    pub name: String,
    pub schemes: Vec<Scheme>,
    pub n: usize,
    pub d: usize,
    pub beta: BetaSpec,
    pub init: InitKind,
    pub weights: WeightRegime,
    pub n_heads: usize,
    pub engine: Engine,
    pub integrator: IntegratorConfig,
    pub runs: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn beta_value(&self) -> f64 {
        self.beta.resolve(self.d, self.n_heads)
    }

    /// Sets the horizon and moves every Mix-LN switch to
    /// [`MIX_SWITCH_FRACTION`] of it.
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.integrator.horizon = horizon;
        for s in &mut self.schemes {
            if let Scheme::MixLn { switch } = s {
                *switch = MIX_SWITCH_FRACTION * horizon;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return bad("at least one scheme is required".into());
        }
        if self.n < 2 || self.d < 2 {
            return Err(Error::InvalidDimension(format!(
                "need n >= 2 and d >= 2, got n = {}, d = {}",
                self.n, self.d
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!(
                "experiment name `{}` cannot be used as a file prefix",
                self.name
            ));
        }
        let beta = self.beta_value();
        if !(beta > 0.0) || !beta.is_finite() {
            return bad(format!("beta must be positive, got {beta}"));
        }
        for s in &self.schemes {
            s.validate()?;
        }
        let mut labels: Vec<_> = self.schemes.iter().map(scheme_label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("two schemes share an output label".into());
        }
        self.integrator.validate()?;
        if self.weights != WeightRegime::Identity && (self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads)) {
            return Err(Error::DimensionMismatch {
                expected: format!("a head count dividing d = {}", self.d),
                found: format!("{}", self.n_heads),
            });
        }
        if self.init == InitKind::Orthonormal && self.d < self.n && self.engine != Engine::Symmetric {
            return Err(Error::InvalidDimension(format!(
                "orthonormal init needs d >= n, got n = {}, d = {}",
                self.n, self.d
            )));
        }
        if let InitKind::Cone { delta } = self.init {
            ConeConfig::new(self.n, self.d, delta, beta)?;
        }
        match self.engine {
            Engine::Layers => {
                let h = self.integrator.horizon;
                if h.fract() != 0.0 || h < 1.0 {
                    return bad(format!(
                        "the layer engine needs a whole number of layers, got horizon {h}"
                    ));
                }
            }
            Engine::Continuous => {
                if self.weights.is_resampled() {
                    return bad("resampled weights need the layer engine".into());
                }
            }
            Engine::Symmetric => {
                if self.weights != WeightRegime::Identity || self.init != InitKind::Orthonormal {
                    return bad("the symmetric engine needs identity weights and orthonormal init".into());
                }
            }
        }
        Ok(())
    }
}

/// File-name token of a scheme. nGPT carries its schedule unless it is the
/// default `α ≡ 1`.
pub fn scheme_label(scheme: &Scheme) -> String {
    match scheme {
        Scheme::Ngpt {
            alpha: AlphaSchedule::Constant { c },
        } if *c == 1.0 => "ngpt".into(),
        Scheme::Ngpt { alpha } => format!("ngpt-{}", alpha.name()),
        other => other.name().into(),
    }
}

pub const PRESETS: [&str; 10] = [
    "fig1", "fig2", "fig3", "appx_e1", "appx_e2", "appx_e3", "appx_e4", "appx_e5", "appx_e6", "appx_e7",
];

/// One-line description per preset.
pub fn preset_description(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig1" => "symmetric ODE from orthogonal start, all schemes, beta=5, n=256",
        "fig2" => "symmetric ODE, nGPT with constant, sqrt, linear and sinusoidal-mix alpha",
        "fig3" => "layers, d=512, 1 head, beta=sqrt(d), static Kaiming weights",
        "appx_e1" => "layers, d=512, 1 head, beta=sqrt(d), static Kaiming weights",
        "appx_e2" => "layers, d=512, 1 head, beta=4sqrt(d), static Kaiming weights",
        "appx_e3" => "layers, d=512, 1 head, beta=sqrt(d), Kaiming weights redrawn every layer",
        "appx_e4" => "layers, d=16, 1 head, beta=1, static Kaiming weights",
        "appx_e5" => "layers, d=128, 1 head, beta=sqrt(d), static Kaiming weights",
        "appx_e6" => "layers, d=128, 1 head, beta=4sqrt(d), static Kaiming weights",
        "appx_e7" => "layers, d=768, 12 heads, beta=sqrt(d_head), static GPT-style weights",
        _ => return None,
    })
}

/// Depth of the random-weight presets.
pub const PRESET_LAYERS: f64 = 10.0;
/// Horizon of the symmetric presets.
pub const SYMMETRIC_HORIZON: f64 = 20.0;
/// Desk-scale run count.
pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_SEED: u64 = 42;

fn symmetric_preset(name: &str, schemes: Vec<Scheme>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        schemes,
        n: 256,
        d: 256,
        beta: BetaSpec::Value(5.0),
        init: InitKind::Orthonormal,
        weights: WeightRegime::Identity,
        n_heads: 1,
        engine: Engine::Symmetric,
        integrator: IntegratorConfig::rk4(1e-2, SYMMETRIC_HORIZON).recording_every(5),
        runs: 1,
        seed: DEFAULT_SEED,
    }
}

fn layer_preset(name: &str, d: usize, n_heads: usize, beta: BetaSpec, weights: WeightRegime) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        schemes: Scheme::all(0.0).to_vec(),
        n: 128,
        d,
        beta,
        init: InitKind::Uniform,
        weights,
        n_heads,
        engine: Engine::Layers,
        integrator: IntegratorConfig::euler(1.0, PRESET_LAYERS),
        runs: DEFAULT_RUNS,
        seed: DEFAULT_SEED,
    }
    .with_horizon(PRESET_LAYERS)
}

/// The configuration behind a named figure.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    use WeightRegime::*;
    let cfg = match name {
        "fig1" => symmetric_preset(name, Scheme::all(0.0).to_vec()).with_horizon(SYMMETRIC_HORIZON),
        "fig2" => symmetric_preset(
            name,
            [
                AlphaSchedule::constant(1.0),
                AlphaSchedule::Sqrt,
                AlphaSchedule::Linear,
                AlphaSchedule::SinusoidalMix { c: 1.0 },
            ]
            .into_iter()
            .map(|alpha| Scheme::Ngpt { alpha })
            .collect(),
        ),
        "fig3" | "appx_e1" => layer_preset(name, 512, 1, BetaSpec::SqrtD, KaimingStatic),
        "appx_e2" => layer_preset(name, 512, 1, BetaSpec::FourSqrtD, KaimingStatic),
        "appx_e3" => layer_preset(name, 512, 1, BetaSpec::SqrtD, KaimingResampled),
        "appx_e4" => layer_preset(name, 16, 1, BetaSpec::Value(1.0), KaimingStatic),
        "appx_e5" => layer_preset(name, 128, 1, BetaSpec::SqrtD, KaimingStatic),
        "appx_e6" => layer_preset(name, 128, 1, BetaSpec::FourSqrtD, KaimingStatic),
        "appx_e7" => layer_preset(name, 768, 12, BetaSpec::SqrtDHead, GptStyle),
        other => {
            return Err(Error::UnknownPreset {
                name: other.into(),
                available: PRESETS.join(", "),
            })
        }
    };
    Ok(cfg)
}

/// Mean and quantile band of one observable across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSeries {
    pub series: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    /// `min(q05, mean)`.
    pub lower: Vec<f64>,
    /// `max(q95, mean)`.
    pub upper: Vec<f64>,
    pub runs: Vec<usize>,
}

impl AggregateSeries {
    /// Aggregates equally sampled runs, folding in run order.
    pub fn from_runs(series: &str, times: &[f64], runs: &[&[f64]]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InsufficientData(format!("no completed runs for {series}")));
        }
        let len = times.len();
        if runs.iter().any(|r| r.len() != len) {
            return Err(Error::DimensionMismatch {
                expected: format!("{len} samples per run"),
                found: "runs of differing length".into(),
            });
        }
        let mut out = AggregateSeries {
            series: series.into(),
            times: times.to_vec(),
            mean: Vec::with_capacity(len),
            lower: Vec::with_capacity(len),
            upper: Vec::with_capacity(len),
            runs: vec![runs.len(); len],
        };
        let mut column = Vec::with_capacity(runs.len());
        for i in 0..len {
            column.clear();
            column.extend(runs.iter().map(|r| r[i]));
            let mean = column.iter().sum::<f64>() / column.len() as f64;
            column.sort_by(f64::total_cmp);
            out.mean.push(mean);
            out.lower.push(quantile_sorted(&column, BAND.0).min(mean));
            out.upper.push(quantile_sorted(&column, BAND.1).max(mean));
        }
        Ok(out)
    }

    pub fn band_width(&self) -> f64 {
        let w: f64 = self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum();
        w / self.times.len() as f64
    }

    pub fn mean_at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|&s| s == t).map(|i| self.mean[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        for i in 0..self.times.len() {
            w.serialize((self.times[i], self.mean[i], self.lower[i], self.upper[i], self.runs[i]))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(CSV_HEADER) {
            return Err(Error::InvalidParameter(format!(
                "{} does not have the header {}",
                path.display(),
                CSV_HEADER.join(",")
            )));
        }
        let series = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.rsplit('_').next())
            .unwrap_or_default();
        let mut out = AggregateSeries {
            series: series.into(),
            times: vec![],
            mean: vec![],
            lower: vec![],
            upper: vec![],
            runs: vec![],
        };
        for row in r.deserialize() {
            let (t, mean, lo, hi, runs): (f64, f64, f64, f64, usize) = row?;
            out.times.push(t);
            out.mean.push(mean);
            out.lower.push(lo);
            out.upper.push(hi);
            out.runs.push(runs);
        }
        Ok(out)
    }
}

pub const CSV_HEADER: [&str; 5] = ["t", "mean", "q05", "q95", "runs"];

/// Names of the aggregated observables, in output order.
pub const SERIES: [&str; 4] = ["gamma", "variance", "r", "energy"];

/// Observables of one run at each sampled time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSeries {
    pub times: Vec<f64>,
    pub gamma: Vec<f64>,
    pub variance: Vec<f64>,
    /// Mean magnitude.
    pub r: Vec<f64>,
    pub energy: Vec<f64>,
}

impl RunSeries {
    fn push(&mut self, t: f64, x: &DMatrix<f64>, beta: f64) -> Result<()> {
        let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
        if norms.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFiniteState {
                last_finite_time: self.times.last().copied().unwrap_or(t),
            });
        }
        let theta = normalize_columns(x)?;
        let stats = direction_stats(&theta)?;
        self.times.push(t);
        self.gamma.push(stats.gamma_mean);
        self.variance.push(stats.variance);
        self.r.push(norms.iter().sum::<f64>() / norms.len() as f64);
        self.energy.push(energy(&theta, beta)?);
        Ok(())
    }

    fn get(&self, series: &str) -> &[f64] {
        match series {
            "gamma" => &self.gamma,
            "variance" => &self.variance,
            "r" => &self.r,
            _ => &self.energy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicaRecord {
    pub scheme: String,
    pub run: usize,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeResult {
    pub label: String,
    pub scheme: Scheme,
    pub series: Vec<AggregateSeries>,
    pub aborted: usize,
}

impl SchemeResult {
    pub fn get(&self, series: &str) -> Option<&AggregateSeries> {
        self.series.iter().find(|s| s.series == series)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub results: Vec<SchemeResult>,
    pub replicas: Vec<ReplicaRecord>,
}

impl ExperimentOutput {
    pub fn scheme(&self, label: &str) -> Option<&SchemeResult> {
        self.results.iter().find(|r| r.label == label)
    }
}

/// Errors that abort a single run rather than the experiment.
fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteState { .. }
            | Error::DegenerateAttention { .. }
            | Error::RadialFloor { .. }
            | Error::ZeroMagnitude { .. }
            | Error::ZeroVector
    )
}

fn initial_state(cfg: &ExperimentConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<TokenState> {
    match cfg.init {
        InitKind::Orthonormal => orthonormal_init(cfg.n, cfg.d),
        InitKind::Uniform => sample_uniform_tokens(cfg.n, cfg.d, rng),
        InitKind::Gaussian => sample_gaussian_tokens(cfg.n, cfg.d, rng),
        InitKind::Cone { delta } => cone_init(&ConeConfig::new(cfg.n, cfg.d, delta, cfg.beta_value())?, rng),
        InitKind::Collapsed => Ok(collapsed_init(cfg.n, &sample_uniform_sphere(cfg.d, rng)?)),
    }
}

// Initial state and weights depend on the run only, so every scheme sees the
// same draws. Redrawn weights for layer k come from the path [run, k + 1].
fn run_one(cfg: &ExperimentConfig, scheme: &Scheme, run: usize) -> Result<RunSeries> {
    let beta = cfg.beta_value();
    let mut rng = derive_rng(cfg.seed, &[run as u64]);
    let init = initial_state(cfg, &mut rng)?;
    let params = sample_weights(cfg.weights, cfg.d, cfg.n_heads, beta, &mut rng)?;
    let mut out = RunSeries::default();
    match cfg.engine {
        Engine::Layers => {
            let layers = cfg.integrator.horizon as usize;
            let mut x = init.embeddings();
            out.push(0.0, &x, beta)?;
            for k in 0..layers {
                x = if params.redraw_each_step() {
                    let mut step_rng = derive_rng(cfg.seed, &[run as u64, k as u64 + 1]);
                    let p = sample_weights(cfg.weights, cfg.d, cfg.n_heads, beta, &mut step_rng)?;
                    discrete_update(scheme, &x, k, &p)?
                } else {
                    discrete_update(scheme, &x, k, &params)?
                };
                out.push((k + 1) as f64, &x, beta)?;
            }
        }
        Engine::Continuous => {
            let traj = integrate(&init, scheme, &params, &cfg.integrator)?;
            for (i, &t) in traj.times.iter().enumerate() {
                let m = &traj.magnitudes[i];
                out.times.push(t);
                out.gamma.push(traj.stats[i].gamma_mean);
                out.variance.push(traj.stats[i].variance);
                out.r.push(m.iter().sum::<f64>() / m.len() as f64);
                out.energy.push(traj.energy[i]);
            }
        }
        Engine::Symmetric => {
            let traj = integrate_symmetric(scheme, beta, cfg.n, 1.0, &cfg.integrator)?;
            let nf = cfg.n as f64;
            for s in &traj.states {
                out.times.push(s.t);
                out.gamma.push(s.gamma);
                out.variance.push((nf - 1.0) / nf * s.epsilon);
                out.r.push(s.r);
                // -(1/2β)(n e^β + n(n-1) e^{βγ}) with e^β factored out
                let e = -(nf / (2.0 * beta)) * (1.0 + (nf - 1.0) * (-beta * s.epsilon).exp());
                out.energy.push(e * beta.exp());
            }
        }
    }
    Ok(out)
}

/// Runs every scheme `cfg.runs` times in parallel on the current rayon pool.
/// Results depend only on the configuration, not on the pool size. Runs that
/// hit a numerical failure are excluded and recorded; more than
/// [`MAX_ABORT_FRACTION`] of them fails the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.schemes.len())
        .flat_map(|s| (0..cfg.runs).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<RunSeries>> = jobs
        .par_iter()
        .map(|&(s, r)| run_one(cfg, &cfg.schemes[s], r))
        .collect();
    let mut results = Vec::with_capacity(cfg.schemes.len());
    let mut replicas = Vec::with_capacity(jobs.len());
    for (s, scheme) in cfg.schemes.iter().enumerate() {
        let label = scheme_label(scheme);
        let mut done = Vec::new();
        let mut aborted = 0;
        for (r, outcome) in outcomes[s * cfg.runs..(s + 1) * cfg.runs].iter().enumerate() {
            let status = match outcome {
                Ok(series) => {
                    done.push(series);
                    RunStatus::Ok
                }
                Err(e) if is_numerical(e) => {
                    log::warn!("{} run {r} of {label} aborted: {e}", cfg.name);
                    aborted += 1;
                    RunStatus::Aborted { reason: e.to_string() }
                }
                Err(e) => return Err(Error::InvalidParameter(format!("{label} run {r}: {e}"))),
            };
            replicas.push(ReplicaRecord {
                scheme: label.clone(),
                run: r,
                status,
            });
        }
        if aborted as f64 > MAX_ABORT_FRACTION * cfg.runs as f64 {
            return Err(Error::AbortThreshold {
                scheme: label,
                aborted,
                runs: cfg.runs,
            });
        }
        let times = &done[0].times;
        if done.iter().any(|d| &d.times != times) {
            return Err(Error::InvalidParameter(format!(
                "runs of {label} were sampled at different times"
            )));
        }
        let series = SERIES
            .iter()
            .map(|name| {
                let columns: Vec<&[f64]> = done.iter().map(|d| d.get(name)).collect();
                AggregateSeries::from_runs(name, times, &columns)
            })
            .collect::<Result<_>>()?;
        results.push(SchemeResult {
            label,
            scheme: *scheme,
            series,
            aborted,
        });
    }
    Ok(ExperimentOutput {
        config: cfg.clone(),
        results,
        replicas,
    })
}

/// [`run_experiment`] on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    artifact_version: &'static str,
    config: &'a ExperimentConfig,
    beta_value: f64,
    seed: u64,
    band: (f64, f64),
    files: &'a [String],
    replicas: &'a [ReplicaRecord],
}

pub fn csv_file_name(name: &str, label: &str, series: &str) -> String {
    format!("{name}_{label}_{series}.csv")
}

pub fn manifest_file_name(name: &str) -> String {
    format!("{name}_manifest.json")
}

/// Writes one CSV per (scheme, series) plus the JSON manifest into `dir`,
/// returning the paths in write order (manifest last).
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let name = &output.config.name;
    let mut files = Vec::new();
    let mut paths = Vec::new();
    for res in &output.results {
        for s in &res.series {
            let file = csv_file_name(name, &res.label, &s.series);
            let path = dir.join(&file);
            s.write_csv(&path)?;
            files.push(file);
            paths.push(path);
        }
    }
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION,
        config: &output.config,
        beta_value: output.config.beta_value(),
        seed: output.config.seed,
        band: BAND,
        files: &files,
        replicas: &output.replicas,
    };
    let path = dir.join(manifest_file_name(name));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    paths.push(path);
    Ok(paths)
}

/// Builds a single-scheme configuration from command-line style parts.
#[allow(clippy::too_many_arguments)]
pub fn custom_config(
    name: &str,
    kinds: &[SchemeKind],
    n: usize,
    d: usize,
    beta: BetaSpec,
    init: InitKind,
    weights: WeightRegime,
    n_heads: usize,
    engine: Engine,
    method: Method,
    dt: f64,
    horizon: f64,
    runs: usize,
    seed: u64,
) -> ExperimentConfig {
    let integrator = IntegratorConfig {
        method,
        dt,
        ..IntegratorConfig::default()
    };
    ExperimentConfig {
        name: name.into(),
        schemes: kinds
            .iter()
            .map(|k| k.with_params(0.0, AlphaSchedule::constant(1.0)))
            .collect(),
        n,
        d,
        beta,
        init,
        weights,
        n_heads,
        engine,
        integrator,
        runs,
        seed,
    }
    .with_horizon(horizon)
}
