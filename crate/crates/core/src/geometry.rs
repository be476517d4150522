//! Unit-sphere primitives and the clustering statistics built on them.
//!
//! Token embeddings are stored column-wise: a `d × n` matrix holds `n` tokens
//! of dimension `d`. A [`TokenState`] splits each column into a unit
//! direction and a nonnegative magnitude, `x_k = r_k θ_k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on `|‖θ‖ - 1|` accepted for a unit direction.
pub const UNIT_TOL: f64 = 1e-12;

/// A point on the unit sphere `S^{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(DVector<f64>);

impl Direction {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Returns `x / ‖x‖`.
///
/// A vector that is already unit within [`UNIT_TOL`] is returned unchanged,
/// so `normalize(normalize(x))` is bitwise equal to `normalize(x)`.
pub fn normalize(x: &DVector<f64>) -> Result<Direction> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "vector" });
    }
    let norm = x.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    if (norm - 1.0).abs() <= UNIT_TOL {
        return Ok(Direction(x.clone()));
    }
    Ok(Direction(x / norm))
}

/// Tangent projection `P_θ v = v - ⟨v, θ⟩ θ`.
pub fn project_tangent(theta: &Direction, v: &DVector<f64>) -> DVector<f64> {
    let c = v.dot(&theta.0);
    v - &theta.0 * c
}

/// Uniform sample on `S^{d-1}` (normalized standard Gaussian).
pub fn sample_uniform_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Direction> {
    if d < 2 {
        return Err(Error::InvalidDimension(format!(
            "sphere sampling needs d >= 2, got {d}"
        )));
    }
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 0.0 {
            return Ok(Direction(v / norm));
        }
    }
}

/// Normalizes every column of `x`, failing on a zero column.
pub fn normalize_columns(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !norm.is_finite() {
            return Err(Error::NonFiniteInput { what: "token matrix" });
        }
        if norm == 0.0 {
            log::debug!("column {j} is zero");
            return Err(Error::ZeroVector);
        }
        col /= norm;
    }
    Ok(out)
}

/// Directions and magnitudes of `n` tokens in dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    directions: DMatrix<f64>,
    magnitudes: Vec<f64>,
}

impl TokenState {
    /// Builds a state, checking that every column is unit and every magnitude
    /// is finite and nonnegative.
    pub fn new(directions: DMatrix<f64>, magnitudes: Vec<f64>) -> Result<Self> {
        if directions.ncols() != magnitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} magnitudes", directions.ncols()),
                found: format!("{}", magnitudes.len()),
            });
        }
        for (j, col) in directions.column_iter().enumerate() {
            let norm = col.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidParameter(format!(
                    "direction {j} has norm {norm}, expected 1"
                )));
            }
        }
        if let Some(r) = magnitudes.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "magnitudes must be finite and nonnegative, got {r}"
            )));
        }
        Ok(Self { directions, magnitudes })
    }

    /// Builds a state without validation. Callers guarantee the invariants up
    /// to integrator drift.
    pub(crate) fn from_parts(directions: DMatrix<f64>, magnitudes: Vec<f64>) -> Self {
        Self { directions, magnitudes }
    }

    /// Splits raw embeddings `X` into directions and magnitudes.
    pub fn from_embeddings(x: &DMatrix<f64>) -> Result<Self> {
        let magnitudes: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
        let directions = normalize_columns(x)?;
        Ok(Self { directions, magnitudes })
    }

    /// All tokens at the same unit magnitude.
    pub fn with_unit_magnitudes(directions: DMatrix<f64>) -> Result<Self> {
        let n = directions.ncols();
        Self::new(directions, vec![1.0; n])
    }

    pub fn n(&self) -> usize {
        self.directions.ncols()
    }

    pub fn d(&self) -> usize {
        self.directions.nrows()
    }

    pub fn directions(&self) -> &DMatrix<f64> {
        &self.directions
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn direction(&self, j: usize) -> Direction {
        Direction(self.directions.column(j).into_owned())
    }

    /// Reassembles `X = [r_1 θ_1, …, r_n θ_n]`.
    pub fn embeddings(&self) -> DMatrix<f64> {
        let mut x = self.directions.clone();
        for (mut col, r) in x.column_iter_mut().zip(&self.magnitudes) {
            col *= *r;
        }
        x
    }

    /// Applies the same linear map to every direction (and renormalizes).
    pub fn transformed(&self, map: &DMatrix<f64>) -> Result<Self> {
        let directions = normalize_columns(&(map * &self.directions))?;
        Ok(Self {
            directions,
            magnitudes: self.magnitudes.clone(),
        })
    }

    /// Reorders tokens so that token `j` of the result is token `perm[j]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let directions = DMatrix::from_fn(self.d(), self.n(), |i, j| self.directions[(i, perm[j])]);
        let magnitudes = perm.iter().map(|&p| self.magnitudes[p]).collect();
        Self { directions, magnitudes }
    }
}

/// `n` tokens with i.i.d. standard normal coordinates.
pub fn sample_gaussian_tokens<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<TokenState> {
    check_sizes(n, d)?;
    loop {
        let x = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        match TokenState::from_embeddings(&x) {
            Ok(state) => return Ok(state),
            Err(Error::ZeroVector) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// `n` i.i.d. uniform directions with unit magnitudes.
pub fn sample_uniform_tokens<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<TokenState> {
    check_sizes(n, d)?;
    let mut directions = DMatrix::zeros(d, n);
    for j in 0..n {
        let theta = sample_uniform_sphere(d, rng)?;
        directions.set_column(j, theta.as_vector());
    }
    Ok(TokenState::from_parts(directions, vec![1.0; n]))
}

/// The first `n` canonical basis vectors of `R^d`, all with magnitude 1.
pub fn orthonormal_init(n: usize, d: usize) -> Result<TokenState> {
    if d < n {
        return Err(Error::InvalidDimension(format!(
            "orthonormal init needs d >= n, got n = {n}, d = {d}"
        )));
    }
    let directions = DMatrix::from_fn(d, n, |i, j| if i == j { 1.0 } else { 0.0 });
    Ok(TokenState::from_parts(directions, vec![1.0; n]))
}

/// `n` copies of one direction.
pub fn collapsed_init(n: usize, theta: &Direction) -> TokenState {
    let directions = DMatrix::from_fn(theta.dim(), n, |i, _| theta.0[i]);
    TokenState::from_parts(directions, vec![1.0; n])
}

fn check_sizes(n: usize, d: usize) -> Result<()> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidDimension(format!(
            "need n >= 2 and d >= 2, got n = {n}, d = {d}"
        )));
    }
    Ok(())
}

/// Clustering statistics of a set of directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub n: usize,
    /// Mean of `⟨θ_j, θ_k⟩` over ordered pairs `j ≠ k`.
    pub gamma_mean: f64,
    /// `1 - ‖θ̄‖²`.
    pub variance: f64,
    /// `(1/n) Σ ‖θ_k - θ̄‖²`, evaluated term by term.
    pub variance_by_definition: f64,
    pub mean_direction_norm: f64,
}

impl SummaryStats {
    /// `1 - γ̄` computed from the deviation form, which keeps relative
    /// precision when the tokens are almost collapsed.
    pub fn dissimilarity(&self) -> f64 {
        self.variance_by_definition * self.n as f64 / (self.n as f64 - 1.0)
    }
}

/// Mean direction, variance (both forms) and mean pairwise cosine.
pub fn summary_stats(state: &TokenState) -> Result<SummaryStats> {
    direction_stats(state.directions())
}

pub(crate) fn direction_stats(theta: &DMatrix<f64>) -> Result<SummaryStats> {
    let n = theta.ncols();
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "statistics need n >= 2 tokens, got {n}"
        )));
    }
    let nf = n as f64;
    let mean: DVector<f64> = theta.column_sum() / nf;
    let mean_sq = mean.norm_squared();
    let variance = 1.0 - mean_sq;
    let variance_by_definition = theta.column_iter().map(|c| (c - &mean).norm_squared()).sum::<f64>() / nf;
    let self_sq: f64 = theta.column_iter().map(|c| c.norm_squared()).sum();
    let gamma_mean = (nf * nf * mean_sq - self_sq) / (nf * (nf - 1.0));
    Ok(SummaryStats {
        n,
        gamma_mean,
        variance,
        variance_by_definition,
        mean_direction_norm: mean_sq.sqrt(),
    })
}

/// Gram matrix `Θ^T Θ` of the directions.
pub fn gram(state: &TokenState) -> DMatrix<f64> {
    state.directions().transpose() * state.directions()
}
