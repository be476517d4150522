//! The six normalization schemes, as discrete layer updates and as speed
//! factors in the continuous dynamics `θ̇_j = P_{θ_j} A_j / s_j`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_update, AttentionOutput, AttentionParams};
use crate::error::{Error, Result};
use crate::geometry::{normalize_columns, TokenState};

/// Lower clamp of the sinusoidal nGPT schedule.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Step scaling `α_t` of nGPT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaSchedule {
    Constant {
        c: f64,
    },
    /// `√(t + 1)`
    Sqrt,
    /// `t + 1`
    Linear,
    /// `sin²(4t)(t + 1) + cos²(4t) c`, clamped below at [`ALPHA_FLOOR`].
    SinusoidalMix {
        c: f64,
    },
}

impl AlphaSchedule {
    pub fn constant(c: f64) -> Self {
        AlphaSchedule::Constant { c }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlphaSchedule::Constant { .. } => "constant",
            AlphaSchedule::Sqrt => "sqrt",
            AlphaSchedule::Linear => "linear",
            AlphaSchedule::SinusoidalMix { .. } => "sinusoidal-mix",
        }
    }

    /// `∫_0^∞ α_s ds = ∞`. Each schedule is bounded below by a positive
    /// constant once its parameter is positive, so this reduces to a
    /// parameter check.
    pub fn integral_diverges(&self) -> bool {
        match *self {
            AlphaSchedule::Constant { c } => c > 0.0 && c.is_finite(),
            AlphaSchedule::Sqrt | AlphaSchedule::Linear => true,
            AlphaSchedule::SinusoidalMix { c } => c.is_finite(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.integral_diverges() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "alpha schedule {self:?} must be positive with a divergent integral"
            )))
        }
    }
}

/// `α_t` for the given schedule.
pub fn alpha_value(schedule: &AlphaSchedule, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha schedule needs t >= 0, got {t}")));
    }
    let a = match *schedule {
        AlphaSchedule::Constant { c } => c,
        AlphaSchedule::Sqrt => (t + 1.0).sqrt(),
        AlphaSchedule::Linear => t + 1.0,
        AlphaSchedule::SinusoidalMix { c } => {
            let (s, co) = (4.0 * t).sin_cos();
            (s * s * (t + 1.0) + co * co * c).max(ALPHA_FLOOR)
        }
    };
    if a > 0.0 && a.is_finite() {
        Ok(a)
    } else {
        Err(Error::InvalidParameter(format!(
            "alpha_t = {a} at t = {t} is not positive"
        )))
    }
}

/// Which scheme is active, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    PostLn,
    PreLn,
    /// Post-LN up to and including `switch`, Pre-LN afterwards.
    MixLn {
        switch: f64,
    },
    PeriLn,
    Ngpt {
        alpha: AlphaSchedule,
    },
    LnScaling,
}

/// Parameter-free scheme tag, as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    PostLn,
    PreLn,
    MixLn,
    PeriLn,
    Ngpt,
    LnScaling,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::PostLn,
        SchemeKind::PreLn,
        SchemeKind::MixLn,
        SchemeKind::PeriLn,
        SchemeKind::Ngpt,
        SchemeKind::LnScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::PostLn => "post-ln",
            SchemeKind::PreLn => "pre-ln",
            SchemeKind::MixLn => "mix-ln",
            SchemeKind::PeriLn => "peri-ln",
            SchemeKind::Ngpt => "ngpt",
            SchemeKind::LnScaling => "ln-scaling",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SchemeKind::PostLn => "Post-LN",
            SchemeKind::PreLn => "Pre-LN",
            SchemeKind::MixLn => "Mix-LN",
            SchemeKind::PeriLn => "Peri-LN",
            SchemeKind::Ngpt => "nGPT",
            SchemeKind::LnScaling => "LN-Scaling",
        }
    }

    /// Attach parameters. `switch` is used by Mix-LN, `alpha` by nGPT.
    pub fn with_params(self, switch: f64, alpha: AlphaSchedule) -> Scheme {
        match self {
            SchemeKind::PostLn => Scheme::PostLn,
            SchemeKind::PreLn => Scheme::PreLn,
            SchemeKind::MixLn => Scheme::MixLn { switch },
            SchemeKind::PeriLn => Scheme::PeriLn,
            SchemeKind::Ngpt => Scheme::Ngpt { alpha },
            SchemeKind::LnScaling => Scheme::LnScaling,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "unknown scheme `{s}` (expected one of {})",
                SchemeKind::ALL.map(|k| k.name()).join(", ")
            ))
        })
    }
}

impl Scheme {
    /// All six schemes, with Mix-LN switching at `switch` and nGPT at `α ≡ 1`.
    pub fn all(switch: f64) -> [Scheme; 6] {
        SchemeKind::ALL.map(|k| k.with_params(switch, AlphaSchedule::constant(1.0)))
    }

    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::PostLn => SchemeKind::PostLn,
            Scheme::PreLn => SchemeKind::PreLn,
            Scheme::MixLn { .. } => SchemeKind::MixLn,
            Scheme::PeriLn => SchemeKind::PeriLn,
            Scheme::Ngpt { .. } => SchemeKind::Ngpt,
            Scheme::LnScaling => SchemeKind::LnScaling,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    pub fn label(&self) -> &'static str {
        self.kind().label()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scheme::MixLn { switch } if !(*switch >= 0.0 && switch.is_finite()) => Err(Error::InvalidParameter(
                format!("mix-ln switch must be finite and >= 0, got {switch}"),
            )),
            Scheme::Ngpt { alpha } => alpha.validate(),
            _ => Ok(()),
        }
    }

    /// Whether magnitudes evolve at time `t` (so `ṙ` may be nonzero).
    pub fn magnitude_evolves(&self, t: f64) -> bool {
        match self {
            Scheme::PreLn | Scheme::PeriLn => true,
            Scheme::MixLn { switch } => t > *switch,
            _ => false,
        }
    }

    /// Whether magnitudes ever evolve.
    pub fn has_radial_dynamics(&self) -> bool {
        matches!(self, Scheme::PreLn | Scheme::PeriLn | Scheme::MixLn { .. })
    }

    /// The scheme in force on an integration step that ends at `t_end`.
    /// Mix-LN resolves to its Post-LN or Pre-LN branch; integrators place a
    /// grid point on the switch so no step straddles it.
    pub fn step_branch(&self, t_end: f64) -> Scheme {
        match self {
            Scheme::MixLn { switch } if t_end <= *switch => Scheme::PostLn,
            Scheme::MixLn { .. } => Scheme::PreLn,
            other => *other,
        }
    }

    /// Speed factor and radial rate from the scalars they depend on:
    /// the magnitude `r`, `⟨θ, A⟩` and `‖A‖`.
    pub(crate) fn factors(&self, token: usize, t: f64, r: f64, dot: f64, a_norm: f64) -> Result<(f64, f64)> {
        let need_r = || {
            if r > 0.0 {
                Ok(r)
            } else {
                Err(Error::ZeroMagnitude { token })
            }
        };
        let need_a = || {
            if a_norm > 0.0 {
                Ok(a_norm)
            } else {
                Err(Error::DegenerateAttention { token, time: t })
            }
        };
        Ok(match self {
            Scheme::PostLn => (1.0, 0.0),
            Scheme::PreLn => (need_r()?, dot),
            Scheme::MixLn { switch } => {
                if t <= *switch {
                    (1.0, 0.0)
                } else {
                    (need_r()?, dot)
                }
            }
            Scheme::PeriLn => {
                let a = need_a()?;
                (need_r()? * a, dot / a)
            }
            Scheme::Ngpt { alpha } => (need_a()? / alpha_value(alpha, t)?, 0.0),
            Scheme::LnScaling => ((t + 1.0).sqrt(), 0.0),
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn token_scalars(j: usize, state: &TokenState, attn: &AttentionOutput) -> Result<(f64, f64, f64)> {
    if j >= state.n() || attn.vectors.ncols() != state.n() {
        return Err(Error::DimensionMismatch {
            expected: format!("token index below {} and matching attention output", state.n()),
            found: format!("index {j}, {} attention columns", attn.vectors.ncols()),
        });
    }
    let theta: DVectorView<f64> = state.directions().column(j);
    let a = attn.vectors.column(j);
    Ok((state.magnitudes()[j], theta.dot(&a), a.norm()))
}

/// `s_j(t)`.
pub fn speed_factor(scheme: &Scheme, j: usize, t: f64, state: &TokenState, attn: &AttentionOutput) -> Result<f64> {
    let (r, dot, a_norm) = token_scalars(j, state, attn)?;
    Ok(scheme.factors(j, t, r, dot, a_norm)?.0)
}

/// `ṙ_j(t)`.
pub fn radial_rate(scheme: &Scheme, j: usize, t: f64, state: &TokenState, attn: &AttentionOutput) -> Result<f64> {
    let (r, dot, a_norm) = token_scalars(j, state, attn)?;
    Ok(scheme.factors(j, t, r, dot, a_norm)?.1)
}

fn ngpt_step(x: &DMatrix<f64>, alpha: f64, params: &AttentionParams) -> Result<DMatrix<f64>> {
    let a = normalize_columns(&multi_head_update(x, params)?)?;
    normalize_columns(&(x + a * alpha))
}

/// One layer of the scheme applied to token embeddings `x` (`d × n`) at
/// layer index `layer`.
pub fn discrete_update(
    scheme: &Scheme,
    x: &DMatrix<f64>,
    layer: usize,
    params: &AttentionParams,
) -> Result<DMatrix<f64>> {
    let t = layer as f64;
    let attn = |y: &DMatrix<f64>| multi_head_update(y, params);
    match scheme {
        Scheme::PostLn => normalize_columns(&(x + attn(x)?)),
        Scheme::PreLn => Ok(x + attn(&normalize_columns(x)?)?),
        Scheme::MixLn { switch } => {
            if t <= *switch {
                discrete_update(&Scheme::PostLn, x, layer, params)
            } else {
                discrete_update(&Scheme::PreLn, x, layer, params)
            }
        }
        Scheme::PeriLn => Ok(x + normalize_columns(&attn(&normalize_columns(x)?)?)?),
        Scheme::Ngpt { alpha } => ngpt_step(x, alpha_value(alpha, t)?, params),
        Scheme::LnScaling => normalize_columns(&(x + attn(x)? / (t + 1.0).sqrt())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_vectors, sample_weights, Linear, WeightRegime};
    use crate::geometry::{collapsed_init, normalize, sample_uniform_tokens, TokenState};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn collapsed(r: f64) -> (TokenState, AttentionOutput) {
        let theta = normalize(&DVector::from_column_slice(&[1.0, -2.0, 0.5])).unwrap();
        let base = collapsed_init(4, &theta);
        let state = TokenState::new(base.directions().clone(), vec![r; 4]).unwrap();
        let attn = attention_vectors(state.directions(), &AttentionParams::identity(3, 1.0).unwrap()).unwrap();
        (state, attn)
    }

    #[test]
    fn table_of_speed_factors() {
        let (state, attn) = collapsed(5.0);
        let s = |scheme: Scheme, t: f64| speed_factor(&scheme, 0, t, &state, &attn).unwrap();
        assert_eq!(s(Scheme::PostLn, 7.0), 1.0);
        assert_eq!(s(Scheme::LnScaling, 3.0), 2.0);
        assert!((s(Scheme::PeriLn, 0.0) - 5.0).abs() < 1e-14);
        assert_eq!(s(Scheme::PreLn, 0.0), 5.0);
        assert_eq!(s(Scheme::MixLn { switch: 2.0 }, 2.0), 1.0);
        assert_eq!(s(Scheme::MixLn { switch: 2.0 }, 2.5), 5.0);
        let ngpt = Scheme::Ngpt {
            alpha: AlphaSchedule::Linear,
        };
        assert!((s(ngpt, 1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn table_of_radial_rates() {
        let (state, attn) = collapsed(2.0);
        let rd = |scheme: Scheme, t: f64| radial_rate(&scheme, 1, t, &state, &attn).unwrap();
        assert_eq!(rd(Scheme::PostLn, 1.0), 0.0);
        assert_eq!(rd(Scheme::LnScaling, 1.0), 0.0);
        assert_eq!(
            rd(
                Scheme::Ngpt {
                    alpha: AlphaSchedule::Sqrt
                },
                1.0
            ),
            0.0
        );
        assert!((rd(Scheme::PreLn, 1.0) - 1.0).abs() < 1e-14);
        assert!((rd(Scheme::PeriLn, 1.0) - 1.0).abs() < 1e-14);
        assert_eq!(rd(Scheme::MixLn { switch: 3.0 }, 1.0), 0.0);
        assert!((rd(Scheme::MixLn { switch: 3.0 }, 4.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let theta = normalize(&DVector::from_column_slice(&[1.0, 0.0, 0.0])).unwrap();
        let state = TokenState::new(collapsed_init(2, &theta).directions().clone(), vec![0.0, 1.0]).unwrap();
        let params = AttentionParams::identity(3, 1.0).unwrap();
        let attn = attention_vectors(state.directions(), &params).unwrap();
        assert!(matches!(
            speed_factor(&Scheme::PreLn, 0, 0.0, &state, &attn),
            Err(Error::ZeroMagnitude { token: 0 })
        ));
        assert!(speed_factor(&Scheme::MixLn { switch: 1.0 }, 0, 0.5, &state, &attn).is_ok());

        let zero_v = AttentionParams::single_head(
            3,
            Linear::Identity,
            Linear::Identity,
            Linear::Dense(DMatrix::zeros(3, 3)),
            1.0,
        )
        .unwrap();
        let attn0 = attention_vectors(state.directions(), &zero_v).unwrap();
        assert!(matches!(
            speed_factor(&Scheme::PeriLn, 1, 0.0, &state, &attn0),
            Err(Error::DegenerateAttention { token: 1, .. })
        ));
        assert!(matches!(
            speed_factor(
                &Scheme::Ngpt {
                    alpha: AlphaSchedule::constant(1.0)
                },
                1,
                0.0,
                &state,
                &attn0
            ),
            Err(Error::DegenerateAttention { .. })
        ));
    }

    #[test]
    fn alpha_schedules() {
        assert_eq!(alpha_value(&AlphaSchedule::constant(1.0), 17.0).unwrap(), 1.0);
        assert_eq!(alpha_value(&AlphaSchedule::Sqrt, 8.0).unwrap(), 3.0);
        assert_eq!(alpha_value(&AlphaSchedule::Linear, 0.0).unwrap(), 1.0);
        let mix = AlphaSchedule::SinusoidalMix { c: 0.0 };
        assert_eq!(alpha_value(&mix, 0.0).unwrap(), ALPHA_FLOOR);
        for i in 0..1000 {
            assert!(alpha_value(&mix, i as f64 * 0.01).unwrap() >= ALPHA_FLOOR);
        }
        assert!(alpha_value(&AlphaSchedule::constant(0.0), 1.0).is_err());
        assert!(!AlphaSchedule::constant(0.0).integral_diverges());
        assert!(AlphaSchedule::SinusoidalMix { c: 1.0 }.integral_diverges());
    }

    #[test]
    fn names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("layer-norm".parse::<SchemeKind>().is_err());
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::geometry::sample_gaussian_tokens(n, d, &mut rng)
            .unwrap()
            .embeddings()
    }

    fn kaiming(d: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_weights(WeightRegime::KaimingStatic, d, 1, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn gauge_schemes_output_unit_columns() {
        let x = random_tokens(6, 5, 3);
        let params = kaiming(5, 4);
        for scheme in [
            Scheme::PostLn,
            Scheme::Ngpt {
                alpha: AlphaSchedule::Sqrt,
            },
            Scheme::LnScaling,
        ] {
            for layer in 0..3 {
                let y = discrete_update(&scheme, &x, layer, &params).unwrap();
                for c in y.column_iter() {
                    assert!((c.norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pre_ln_with_zero_values_is_identity() {
        let x = random_tokens(5, 4, 8);
        let zero_v = AttentionParams::single_head(
            4,
            Linear::Identity,
            Linear::Identity,
            Linear::Dense(DMatrix::zeros(4, 4)),
            1.0,
        )
        .unwrap();
        assert_eq!(discrete_update(&Scheme::PreLn, &x, 0, &zero_v).unwrap(), x);
    }

    #[test]
    fn ngpt_with_zero_alpha_only_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_uniform_tokens(5, 4, &mut rng).unwrap().embeddings();
        let y = ngpt_step(&x, 0.0, &kaiming(4, 1)).unwrap();
        assert!((y - &x).abs().max() < 1e-15);
    }

    #[test]
    fn mix_ln_switches_branch() {
        let x = random_tokens(5, 4, 9);
        let p = kaiming(4, 10);
        let mix = Scheme::MixLn { switch: 2.0 };
        assert_eq!(
            discrete_update(&mix, &x, 2, &p).unwrap(),
            discrete_update(&Scheme::PostLn, &x, 2, &p).unwrap()
        );
        assert_eq!(
            discrete_update(&mix, &x, 3, &p).unwrap(),
            discrete_update(&Scheme::PreLn, &x, 3, &p).unwrap()
        );
    }

    #[test]
    fn unit_magnitude_schemes_agree_at_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = sample_uniform_tokens(6, 4, &mut rng).unwrap();
        let attn = attention_vectors(state.directions(), &AttentionParams::identity(4, 1.0).unwrap()).unwrap();
        for j in 0..6 {
            for scheme in [Scheme::PostLn, Scheme::PreLn, Scheme::MixLn { switch: 1.0 }] {
                assert_eq!(speed_factor(&scheme, j, 0.0, &state, &attn).unwrap(), 1.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn pre_ln_radial_rate_lower_bound(seed in any::<u64>(), beta in 0.7f64..4.0, d in 2usize..6, n_frac in 0.0f64..1.0) {
            let n_max = beta.exp().floor() as usize;
            let n = 2 + ((n_max - 2) as f64 * n_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let state = crate::geometry::sample_gaussian_tokens(n, d, &mut rng).unwrap();
            let attn = attention_vectors(state.directions(), &AttentionParams::identity(d, beta).unwrap()).unwrap();
            let bound = 1.0 / (n as f64 * beta.exp());
            for j in 0..n {
                let rd = radial_rate(&Scheme::PreLn, j, 0.0, &state, &attn).unwrap();
                prop_assert!(rd >= bound, "rdot {} < bound {}", rd, bound);
            }
        }
    }
}
