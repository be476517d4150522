use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use normflow::analysis::{attention_norm_study, variance_rate_check, ConeConfig};
use normflow::attention::{AttentionParams, WeightRegime};
use normflow::dynamics::IntegratorConfig;
use normflow::experiments::{
    custom_config, preset, preset_description, run_experiment_with_threads, write_outputs, BetaSpec, Engine,
    ExperimentConfig, InitKind, MIX_SWITCH_FRACTION, PRESETS,
};
use normflow::ode::Method;
use normflow::schemes::{AlphaSchedule, Scheme, SchemeKind};
use normflow::Error;

#[derive(Parser)]
#[command(name = "normflow", version, about = "Token dynamics under normalization schemes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a custom multi-run experiment and write CSV + manifest.
    Run(Box<RunArgs>),
    #[command(subcommand)]
    Study(Study),
    /// List the available presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Start from a named preset (see `normflow presets`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Start from a JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scheme(s) for a custom run; repeat or comma-separate. Defaults to all six.
    #[arg(long, value_delimiter = ',')]
    scheme: Vec<SchemeKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// A number, sqrt-d, four-sqrt-d or sqrt-d-head.
    #[arg(long)]
    beta: Option<BetaSpec>,
    /// orthonormal, uniform, gaussian, collapsed or cone:DELTA.
    #[arg(long)]
    init: Option<InitKind>,
    /// identity, kaiming-static, kaiming-resampled or gpt-style.
    #[arg(long)]
    weights: Option<WeightRegime>,
    #[arg(long)]
    heads: Option<usize>,
    /// layers, continuous or symmetric.
    #[arg(long)]
    engine: Option<Engine>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    dt: Option<f64>,
    /// Final time; number of layers for the layer engine.
    #[arg(long)]
    horizon: Option<f64>,
    /// Mix-LN switch time (default: a quarter of the horizon).
    #[arg(long)]
    mix_switch: Option<f64>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file prefix (defaults to the preset name or `custom`).
    #[arg(long)]
    name: Option<String>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Study {
    /// Size of attention vectors at random initialization.
    AttnNorm {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance decay inside a narrow cone, checked against the rate bounds.
    Cone {
        #[arg(long, default_value = "post-ln")]
        scheme: SchemeKind,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// δ as a fraction of its upper limit 1/(100 n² β²).
        #[arg(long, default_value_t = 0.9)]
        delta_fraction: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(args: &RunArgs) -> normflow::Result<ExperimentConfig> {
    let mut cfg = if let Some(name) = &args.preset {
        preset(name)?
    } else if let Some(path) = &args.config {
        serde_json::from_str(&fs::read_to_string(path)?)?
    } else {
        let kinds = if args.scheme.is_empty() {
            SchemeKind::ALL.to_vec()
        } else {
            args.scheme.clone()
        };
        custom_config(
            "custom",
            &kinds,
            128,
            512,
            BetaSpec::SqrtD,
            InitKind::Uniform,
            WeightRegime::KaimingStatic,
            1,
            Engine::Layers,
            Method::Euler,
            1.0,
            10.0,
            100,
            42,
        )
    };
    if !args.scheme.is_empty() && (args.preset.is_some() || args.config.is_some()) {
        cfg.schemes = args
            .scheme
            .iter()
            .map(|k| k.with_params(0.0, AlphaSchedule::constant(1.0)))
            .collect();
    }
    macro_rules! set {
        ($($arg:ident => $field:ident),*) => {$(
            if let Some(v) = args.$arg.clone() { cfg.$field = v; }
        )*};
    }
    set!(n => n, d => d, beta => beta, init => init, weights => weights, heads => n_heads,
         engine => engine, runs => runs, seed => seed, name => name);
    if let Some(m) = args.method {
        cfg.integrator.method = m;
    }
    if let Some(dt) = args.dt {
        cfg.integrator.dt = dt;
    }
    if let Some(k) = args.record_every {
        cfg.integrator.record_every = k;
    }
    let horizon = args.horizon.unwrap_or(cfg.integrator.horizon);
    cfg = cfg.with_horizon(horizon);
    if let Some(s) = args.mix_switch {
        for scheme in &mut cfg.schemes {
            if let Scheme::MixLn { switch } = scheme {
                *switch = s;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> normflow::Result<()> {
    let cfg = resolve(args)?;
    let output = run_experiment_with_threads(&cfg, args.threads)?;
    let paths = write_outputs(&output, &args.out)?;
    for res in &output.results {
        if let Some(g) = res.get("gamma") {
            println!(
                "{:<18} gamma {:.6} -> {:.6}  ({} aborted)",
                res.label,
                g.mean[0],
                g.mean[g.mean.len() - 1],
                res.aborted
            );
        }
    }
    println!("wrote {} files to {}", paths.len(), args.out.display());
    Ok(())
}

fn emit(report: &serde_json::Value, out: Option<&PathBuf>) -> normflow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    if let Some(path) = out {
        fs::write(path, text + "\n")?;
    } else {
        println!("{text}");
    }
    Ok(())
}

fn study(s: &Study) -> normflow::Result<()> {
    match s {
        Study::AttnNorm {
            n,
            d,
            beta,
            runs,
            seed,
            out,
        } => {
            let st = attention_norm_study(*n, *d, *beta, *runs, *seed)?;
            println!(
                "n={} d={} bound={:.4} median max|A|={:.4} p99 ratio={:.4} in_regime={}",
                st.n,
                st.d,
                st.bound,
                st.median_max_norm(),
                st.ratio_quantile(0.99),
                st.in_regime
            );
            if out.is_some() {
                emit(&serde_json::to_value(&st)?, out.as_ref())?;
            }
        }
        Study::Cone {
            scheme,
            n,
            d,
            beta,
            delta_fraction,
            dt,
            horizon,
            seed,
            out,
        } => {
            let scheme = scheme.with_params(MIX_SWITCH_FRACTION * horizon, AlphaSchedule::constant(1.0));
            let cone = ConeConfig::with_fraction(*n, *d, *beta, *delta_fraction)?;
            let params = AttentionParams::identity(*d, *beta)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let rep = variance_rate_check(&scheme, &cone, &params, &IntegratorConfig::rk4(*dt, *horizon), &mut rng)?;
            println!(
                "{}: {} rates checked, {} sandwich violations (worst {:.3e}), {} variance increases, \
                 {} radial violations, {} cone exits -> {}",
                scheme,
                rep.checked_rates(),
                rep.sandwich_violations,
                rep.worst_excess,
                rep.variance_increases,
                rep.radial_violations,
                rep.cone_violations,
                if rep.passed() { "pass" } else { "FAIL" }
            );
            if out.is_some() {
                emit(&json!(rep), out.as_ref())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Study(s) => study(s),
        Command::Presets => {
            for name in PRESETS {
                println!("{name:<8} {}", preset_description(name).unwrap_or_default());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::AbortThreshold { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
