//! Softmax self-attention over token columns.
//!
//! For a token matrix `X` (`d × n`) and one head `(Q, K, V)` the weights are
//! `w_jk = exp(β⟨Q x_j, K x_k⟩) / Z_j` and the attention vectors are
//! `A_j = Σ_k w_jk V x_k`. Multi-head attention concatenates per-head outputs
//! along the feature axis and applies an output projection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A linear map that is either the identity or an explicit matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Identity,
    Dense(DMatrix<f64>),
}

impl Linear {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Linear::Identity => x.clone(),
            Linear::Dense(m) => m * x,
        }
    }

    fn shape(&self, d: usize) -> (usize, usize) {
        match self {
            Linear::Identity => (d, d),
            Linear::Dense(m) => m.shape(),
        }
    }

    /// `self^T · other`.
    fn tr_compose(&self, other: &Linear) -> Linear {
        match (self, other) {
            (Linear::Identity, Linear::Identity) => Linear::Identity,
            (Linear::Identity, Linear::Dense(b)) => Linear::Dense(b.clone()),
            (Linear::Dense(a), Linear::Identity) => Linear::Dense(a.transpose()),
            (Linear::Dense(a), Linear::Dense(b)) => Linear::Dense(a.transpose() * b),
        }
    }

    /// `self · other`.
    fn compose(&self, other: &Linear) -> Linear {
        match (self, other) {
            (Linear::Identity, b) => b.clone(),
            (a, Linear::Identity) => a.clone(),
            (Linear::Dense(a), Linear::Dense(b)) => Linear::Dense(a * b),
        }
    }

    fn is_identity(&self) -> bool {
        matches!(self, Linear::Identity)
    }
}

/// Query, key and value maps of one head. Each maps `R^d → R^{d_head}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Attention parameters for one layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    d: usize,
    beta: f64,
    heads: Vec<Head>,
    output: Linear,
    redraw_each_step: bool,
    // Q^T K per head when the head is square.
    score_forms: Vec<Option<Linear>>,
    // W · V for a single head.
    fused_value: Option<Linear>,
}

impl AttentionParams {
    /// `Q = K = V = I`, single head, no output projection.
    pub fn identity(d: usize, beta: f64) -> Result<Self> {
        Self::single_head(d, Linear::Identity, Linear::Identity, Linear::Identity, beta)
    }

    pub fn single_head(d: usize, query: Linear, key: Linear, value: Linear, beta: f64) -> Result<Self> {
        Self::multi_head(d, vec![Head { query, key, value }], Linear::Identity, beta)
    }

    pub fn multi_head(d: usize, heads: Vec<Head>, output: Linear, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature must be finite and nonnegative, got {beta}"
            )));
        }
        let n_heads = heads.len();
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::DimensionMismatch {
                expected: format!("a head count dividing d = {d}"),
                found: format!("{n_heads}"),
            });
        }
        let d_head = d / n_heads;
        for (h, head) in heads.iter().enumerate() {
            for (name, map) in [("query", &head.query), ("key", &head.key), ("value", &head.value)] {
                if map.shape(d) != (d_head, d) {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{name} map of head {h} with shape {d_head}x{d}"),
                        found: format!("{:?}", map.shape(d)),
                    });
                }
            }
        }
        if output.shape(d) != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: format!("output projection {d}x{d}"),
                found: format!("{:?}", output.shape(d)),
            });
        }
        let score_forms = heads
            .iter()
            .map(|h| (d_head == d).then(|| h.query.tr_compose(&h.key)))
            .collect();
        let fused_value = (n_heads == 1).then(|| output.compose(&heads[0].value));
        Ok(Self {
            d,
            beta,
            heads,
            output,
            redraw_each_step: false,
            score_forms,
            fused_value,
        })
    }

    pub fn with_output(self, output: Linear) -> Result<Self> {
        let redraw = self.redraw_each_step;
        let mut p = Self::multi_head(self.d, self.heads, output, self.beta)?;
        p.redraw_each_step = redraw;
        Ok(p)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature must be finite and nonnegative, got {beta}"
            )));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn output(&self) -> &Linear {
        &self.output
    }

    /// Whether the weights are meant to be redrawn every discrete step.
    pub fn redraw_each_step(&self) -> bool {
        self.redraw_each_step
    }

    /// `Q = K = V = I` with a single head and no output projection.
    pub fn is_identity(&self) -> bool {
        self.heads.len() == 1
            && self.output.is_identity()
            && self.heads[0].query.is_identity()
            && self.heads[0].key.is_identity()
            && self.heads[0].value.is_identity()
    }
}

/// Row-stochastic weights of one head and the per-row log partition values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `weights[(j, k)] = w_jk`.
    pub weights: DMatrix<f64>,
    /// `ln Z_j`, with `Z_j = Σ_l exp(β⟨Q x_j, K x_l⟩)`.
    pub log_partitions: DVector<f64>,
}

impl AttentionWeights {
    pub fn partitions(&self) -> DVector<f64> {
        self.log_partitions.map(f64::exp)
    }
}

/// Attention vectors together with the weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Column `j` is `A_j`.
    pub vectors: DMatrix<f64>,
    /// One entry per head.
    pub heads: Vec<AttentionWeights>,
}

impl AttentionOutput {
    /// Weights of the first (for single-head attention, the only) head.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.heads[0].weights
    }

    pub fn log_partitions(&self) -> &DVector<f64> {
        &self.heads[0].log_partitions
    }

    pub fn partitions(&self) -> DVector<f64> {
        self.heads[0].partitions()
    }
}

fn check_input(x: &DMatrix<f64>, params: &AttentionParams) -> Result<()> {
    if x.nrows() != params.d {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", params.d),
            found: format!("{}", x.nrows()),
        });
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidDimension("attention needs at least one token".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "token matrix" });
    }
    Ok(())
}

/// Column-wise softmax of transposed scores. Column `j` of `scores_t` holds
/// `β⟨Q x_j, K x_k⟩` over `k`; on return it holds `w_jk` over `k`.
fn softmax_columns(scores_t: &mut DMatrix<f64>) -> DVector<f64> {
    let n = scores_t.ncols();
    let mut log_z = DVector::zeros(n);
    for (j, mut col) in scores_t.column_iter_mut().enumerate() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        col /= sum;
        log_z[j] = max + sum.ln();
    }
    log_z
}

/// Transposed weights `P` (`P[(k, j)] = w_jk`) and log partitions of head `h`.
fn head_weights(x: &DMatrix<f64>, params: &AttentionParams, h: usize) -> (DMatrix<f64>, DVector<f64>) {
    let head = &params.heads[h];
    let mut scores_t = match &params.score_forms[h] {
        Some(Linear::Identity) => x.transpose() * x,
        Some(Linear::Dense(m)) => (m * x).transpose() * x,
        None => head.key.apply(x).transpose() * head.query.apply(x),
    };
    scores_t *= params.beta;
    let log_z = softmax_columns(&mut scores_t);
    (scores_t, log_z)
}

fn single_head_only(params: &AttentionParams) -> Result<()> {
    if params.n_heads() != 1 {
        return Err(Error::DimensionMismatch {
            expected: "a single attention head".into(),
            found: format!("{} heads", params.n_heads()),
        });
    }
    Ok(())
}

/// Softmax weights and partition values of single-head attention.
pub fn attention_weights(x: &DMatrix<f64>, params: &AttentionParams) -> Result<AttentionWeights> {
    check_input(x, params)?;
    single_head_only(params)?;
    let (p, log_partitions) = head_weights(x, params, 0);
    Ok(AttentionWeights {
        weights: p.transpose(),
        log_partitions,
    })
}

/// `A_j = Σ_k w_jk V x_k` for single-head attention (no output projection).
pub fn attention_vectors(x: &DMatrix<f64>, params: &AttentionParams) -> Result<AttentionOutput> {
    check_input(x, params)?;
    single_head_only(params)?;
    let (p, log_partitions) = head_weights(x, params, 0);
    let vectors = params.heads[0].value.apply(&(x * &p));
    Ok(AttentionOutput {
        vectors,
        heads: vec![AttentionWeights {
            weights: p.transpose(),
            log_partitions,
        }],
    })
}

/// Full attention update: per-head outputs, concatenated, then projected.
///
/// With one head and an identity projection this equals
/// [`attention_vectors`] bitwise.
pub fn attend(x: &DMatrix<f64>, params: &AttentionParams) -> Result<AttentionOutput> {
    check_input(x, params)?;
    let n = x.ncols();
    if let Some(fused) = &params.fused_value {
        let (p, log_partitions) = head_weights(x, params, 0);
        let vectors = fused.apply(&(x * &p));
        return Ok(AttentionOutput {
            vectors,
            heads: vec![AttentionWeights {
                weights: p.transpose(),
                log_partitions,
            }],
        });
    }
    let d_head = params.d / params.n_heads();
    let mut concat = DMatrix::zeros(params.d, n);
    let mut heads = Vec::with_capacity(params.n_heads());
    for h in 0..params.n_heads() {
        let (p, log_partitions) = head_weights(x, params, h);
        let out = params.heads[h].value.apply(&(x * &p));
        concat.rows_mut(h * d_head, d_head).copy_from(&out);
        heads.push(AttentionWeights {
            weights: p.transpose(),
            log_partitions,
        });
    }
    Ok(AttentionOutput {
        vectors: params.output.apply(&concat),
        heads,
    })
}

/// Token columns produced by [`attend`].
pub fn multi_head_update(x: &DMatrix<f64>, params: &AttentionParams) -> Result<DMatrix<f64>> {
    Ok(attend(x, params)?.vectors)
}

/// How attention weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRegime {
    Identity,
    KaimingStatic,
    KaimingResampled,
    GptStyle,
}

impl WeightRegime {
    pub fn is_resampled(self) -> bool {
        matches!(self, WeightRegime::KaimingResampled)
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightRegime::Identity => "identity",
            WeightRegime::KaimingStatic => "kaiming-static",
            WeightRegime::KaimingResampled => "kaiming-resampled",
            WeightRegime::GptStyle => "gpt-style",
        }
    }
}

impl std::str::FromStr for WeightRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(WeightRegime::Identity),
            "kaiming-static" | "kaiming" => Ok(WeightRegime::KaimingStatic),
            "kaiming-resampled" => Ok(WeightRegime::KaimingResampled),
            "gpt-style" | "gpt" => Ok(WeightRegime::GptStyle),
            other => Err(Error::InvalidParameter(format!(
                "unknown weight regime `{other}` \
                 (expected identity, kaiming-static, kaiming-resampled, gpt-style)"
            ))),
        }
    }
}

/// Standard deviation of GPT-style weight entries.
pub const GPT_STYLE_STD: f64 = 0.02;

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Draws `Q_h, K_h, V_h` (`d_head × d`) for every head and `W` (`d × d`).
///
/// Kaiming entries are `N(0, 2 / fan_in)` with `fan_in = d`; GPT-style
/// entries have standard deviation [`GPT_STYLE_STD`].
pub fn sample_weights<R: Rng + ?Sized>(
    regime: WeightRegime,
    d: usize,
    n_heads: usize,
    beta: f64,
    rng: &mut R,
) -> Result<AttentionParams> {
    if regime == WeightRegime::Identity {
        if n_heads != 1 {
            return Err(Error::InvalidParameter("identity weights need a single head".into()));
        }
        return AttentionParams::identity(d, beta);
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::DimensionMismatch {
            expected: format!("a head count dividing d = {d}"),
            found: format!("{n_heads}"),
        });
    }
    let d_head = d / n_heads;
    let std = match regime {
        WeightRegime::GptStyle => GPT_STYLE_STD,
        _ => (2.0 / d as f64).sqrt(),
    };
    let heads = (0..n_heads)
        .map(|_| Head {
            query: Linear::Dense(gaussian(d_head, d, std, rng)),
            key: Linear::Dense(gaussian(d_head, d, std, rng)),
            value: Linear::Dense(gaussian(d_head, d, std, rng)),
        })
        .collect();
    let output = Linear::Dense(gaussian(d, d, std, rng));
    let mut params = AttentionParams::multi_head(d, heads, output, beta)?;
    params.redraw_each_step = regime.is_resampled();
    Ok(params)
}
