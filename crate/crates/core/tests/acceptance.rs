//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! measurements and runtime, and exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use normflow::analysis::{attention_norm_study, fit_decay_rate, variance_rate_check, ConeConfig, FitModel};
use normflow::attention::AttentionParams;
use normflow::dynamics::{gradient_flow_residual, integrate, IntegratorConfig};
use normflow::experiments::{preset, run_experiment_with_threads, write_outputs, ExperimentOutput};
use normflow::geometry::{sample_gaussian_tokens, summary_stats};
use normflow::schemes::{AlphaSchedule, Scheme};
use normflow::seeds::derive_rng;
use normflow::symmetric::{initial_velocity, integrate_symmetric, reduction_consistency, terminal_epsilon_rate};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn a1() -> Outcome {
    let cfg = IntegratorConfig::rk4(1e-2, 10.0);
    let mut worst = (0.0f64, 0.0f64);
    let mut ok = true;
    let mut lines = Vec::new();
    for scheme in Scheme::all(2.5) {
        let rep = reduction_consistency(&scheme, 1.0, 8, 16, &cfg).map_err(|e| e.to_string())?;
        ok &= rep.max_deviation < 1e-6 && rep.max_spread < 1e-10;
        worst = (worst.0.max(rep.max_deviation), worst.1.max(rep.max_spread));
        lines.push(format!("{}={:.1e}", scheme.name(), rep.max_deviation));
    }
    check(
        ok,
        format!(
            "max deviation {:.2e} (< 1e-6), max spread {:.2e} (< 1e-10) [{}]",
            worst.0,
            worst.1,
            lines.join(" ")
        ),
    )
}

// Second-order one-sided difference at t = 0.
fn fd_velocity(scheme: &Scheme, beta: f64, n: usize, r0: f64) -> Result<f64, String> {
    let h = 1e-4;
    let cfg = IntegratorConfig::rk4(h, 2.0 * h);
    let traj = integrate_symmetric(scheme, beta, n, r0, &cfg).map_err(|e| e.to_string())?;
    let g = traj.gamma();
    Ok((-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h))
}

fn a2() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for beta in [0.5, 1.0, 5.0] {
        for n in [8, 64, 256] {
            for r0 in [0.5, 1.0, 2.0] {
                for alpha0 in [0.5, 1.0] {
                    let mut schemes = Scheme::all(1.0).to_vec();
                    schemes[4] = Scheme::Ngpt {
                        alpha: AlphaSchedule::constant(alpha0),
                    };
                    for scheme in schemes {
                        let exact = initial_velocity(&scheme, beta, n, r0, alpha0).map_err(|e| e.to_string())?;
                        let fd = fd_velocity(&scheme, beta, n, r0)?;
                        worst = worst.max((fd - exact).abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    check(
        worst < 1e-6,
        format!("{cases} cases, max |fd - closed form| = {worst:.2e} (< 1e-6)"),
    )
}

fn a3() -> Outcome {
    let (beta, n) = (1.0, 8);
    let err = |e: normflow::Error| e.to_string();
    let mut ok = true;
    let mut parts = Vec::new();

    let post = integrate_symmetric(&Scheme::PostLn, beta, n, 1.0, &IntegratorConfig::rk4(1e-2, 20.0)).map_err(err)?;
    let fit = fit_decay_rate(&post.times(), &post.epsilon(), FitModel::ExpRate, (5.0, 20.0)).map_err(err)?;
    ok &= (fit.estimate + 2.0).abs() <= 0.05 * 2.0;
    parts.push(format!("post-ln exp {:.4}", fit.estimate));

    let log_cfg = IntegratorConfig::compactified(1e-3, 1e4).recording_every(5);
    for scheme in [Scheme::PreLn, Scheme::PeriLn, Scheme::MixLn { switch: 2.5 }] {
        let traj = integrate_symmetric(&scheme, beta, n, 1.0, &log_cfg).map_err(err)?;
        let fit = fit_decay_rate(&traj.times(), &traj.epsilon(), FitModel::PowerExponent, (1e2, 1e4)).map_err(err)?;
        ok &= (fit.estimate + 2.0).abs() <= 0.2;
        parts.push(format!("{} pow {:.4}", scheme.name(), fit.estimate));
    }

    let ln_cfg = IntegratorConfig::rk4(1e-2, 1e3).recording_every(10);
    let ln = integrate_symmetric(&Scheme::LnScaling, beta, n, 1.0, &ln_cfg).map_err(err)?;
    let fit = fit_decay_rate(&ln.times(), &ln.epsilon(), FitModel::SqrtExpRate, (1e2, 1e3)).map_err(err)?;
    ok &= (fit.estimate + 4.0).abs() <= 0.1 * 4.0;
    parts.push(format!("ln-scaling sqrt-exp {:.4}", fit.estimate));

    let ngpt = Scheme::Ngpt {
        alpha: AlphaSchedule::constant(1.0),
    };
    let (_, predicted) = terminal_epsilon_rate(&ngpt).ok_or("no nGPT prediction")?;
    let traj = integrate_symmetric(&ngpt, beta, n, 1.0, &IntegratorConfig::rk4(1e-2, 20.0)).map_err(err)?;
    let fit = fit_decay_rate(&traj.times(), &traj.epsilon(), FitModel::ExpRate, (5.0, 20.0)).map_err(err)?;
    ok &= fit.estimate < 0.0 && (fit.estimate - predicted).abs() <= 0.1 * predicted.abs();
    parts.push(format!("ngpt exp {:.4} (predicted {predicted})", fit.estimate));
    check(ok, parts.join(", "))
}

fn a4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = AttentionParams::identity(4, 1.0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let state = sample_gaussian_tokens(8, 4, &mut rng).map_err(|e| e.to_string())?;
        let t = rng.random_range(0.0..10.0);
        for scheme in [Scheme::PostLn, Scheme::PreLn, Scheme::PeriLn, Scheme::LnScaling] {
            worst = worst.max(gradient_flow_residual(&state, &scheme, t, &params).map_err(|e| e.to_string())?);
        }
    }
    check(
        worst < 1e-6,
        format!("20 states x 4 schemes, max residual {worst:.2e} (< 1e-6)"),
    )
}

fn a5() -> Outcome {
    let (n, d) = (10, 4);
    let params = AttentionParams::identity(d, 1.0).map_err(|e| e.to_string())?;
    let cfg = IntegratorConfig::rk4(1e-3, 2.0);
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    for scheme in Scheme::all(0.5) {
        for run in 0..20 {
            let init = sample_gaussian_tokens(n, d, &mut derive_rng(5, &[run])).map_err(|e| e.to_string())?;
            let traj = integrate(&init, &scheme, &params, &cfg).map_err(|e| e.to_string())?;
            for w in traj.energy.windows(2) {
                worst = worst.max((w[1] - w[0]) / w[0].abs());
                steps += 1;
            }
        }
    }
    check(
        worst <= 1e-9,
        format!("{steps} steps, largest relative increase {worst:.2e} (<= 1e-9)"),
    )
}

fn a6() -> Outcome {
    let (n, d, beta) = (16, 8, 1.0);
    let cone = ConeConfig::with_fraction(n, d, beta, 0.9).map_err(|e| e.to_string())?;
    let params = AttentionParams::identity(d, beta).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, scheme) in Scheme::all(2.5).into_iter().enumerate() {
        // sphere schemes collapse exponentially, so their variance leaves
        // double precision long before t = 1000
        let horizon = if scheme.has_radial_dynamics() { 1e3 } else { 10.0 };
        let every = if scheme.has_radial_dynamics() { 10 } else { 1 };
        let integ = IntegratorConfig::rk4(1e-2, horizon).recording_every(every);
        let mut rng = derive_rng(6, &[i as u64]);
        let rep = variance_rate_check(&scheme, &cone, &params, &integ, &mut rng).map_err(|e| e.to_string())?;
        ok &= rep.passed() && rep.checked_rates() > 500;
        parts.push(format!(
            "{} t<={horizon}: {} rates, {} outside, {} var increases, {} radial",
            scheme.name(),
            rep.checked_rates(),
            rep.sandwich_violations,
            rep.variance_increases,
            rep.radial_violations
        ));
    }
    check(ok, format!("delta = {:.3e}; {}", cone.delta, parts.join("; ")))
}

fn a7() -> Outcome {
    let mut ok = true;
    let mut medians = BTreeMap::new();
    let mut parts = Vec::new();
    for (n, d) in [(128, 128), (128, 512), (512, 512)] {
        let st = attention_norm_study(n, d, 1.0, 200, 7).map_err(|e| e.to_string())?;
        let p99 = st.ratio_quantile(0.99);
        ok &= p99 < 10.0;
        medians.insert((n, d), st.median_max_norm());
        parts.push(format!(
            "({n},{d}) p99 ratio {p99:.3} median {:.4}",
            st.median_max_norm()
        ));
    }
    let monotone = medians[&(128, 512)] <= medians[&(128, 128)];
    ok &= monotone;
    check(
        ok,
        format!("{}; median non-increasing in d at n=128: {monotone}", parts.join(", ")),
    )
}

fn a8() -> Outcome {
    let (n, d, beta, runs) = (32, 8, 1.0, 50u64);
    let params = AttentionParams::identity(d, beta).map_err(|e| e.to_string())?;
    let direct = IntegratorConfig::rk4(2e-2, 1e3)
        .stopping_at_sync()
        .recording_every(1000);
    let compact = IntegratorConfig::compactified(1e-2, 1e6)
        .stopping_at_sync()
        .recording_every(1000);
    let mut ok = true;
    let mut floors = 0;
    let mut parts = Vec::new();
    for scheme in Scheme::all(10.0) {
        let cfg = if scheme.has_radial_dynamics() { compact } else { direct };
        let mut synced = 0;
        let mut latest: f64 = 0.0;
        for run in 0..runs {
            let init = sample_gaussian_tokens(n, d, &mut derive_rng(8, &[run])).map_err(|e| e.to_string())?;
            match integrate(&init, &scheme, &params, &cfg) {
                Ok(traj) => {
                    let last = summary_stats(&traj.final_state).map_err(|e| e.to_string())?;
                    if let Some(t) = traj.sync_time.filter(|_| last.variance < cfg.sync_tolerance) {
                        synced += 1;
                        latest = latest.max(t);
                    }
                }
                Err(normflow::Error::RadialFloor { .. }) => floors += 1,
                Err(e) => return Err(format!("{} run {run}: {e}", scheme.name())),
            }
        }
        ok &= synced == runs;
        parts.push(format!("{} {synced}/{runs} (latest t={latest:.3e})", scheme.name()));
    }
    ok &= floors == 0;
    check(ok, format!("{}; q-floor aborts {floors}", parts.join(", ")))
}

fn csv_bytes(out: &ExperimentOutput) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = write_outputs(out, dir.path()).map_err(|e| e.to_string())?;
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn a9(slot: &mut Option<BTreeMap<String, Vec<u8>>>) -> Outcome {
    let cfg = preset("fig3").map_err(|e| e.to_string())?;
    let out = run_experiment_with_threads(&cfg, 1).map_err(|e| e.to_string())?;
    *slot = Some(csv_bytes(&out)?);
    let gamma = |label: &str, i: usize| -> Result<f64, String> {
        let s = out
            .scheme(label)
            .and_then(|r| r.get("gamma"))
            .ok_or(format!("no {label}"))?;
        Ok(s.mean[i])
    };
    let last = out.results[0].get("gamma").unwrap().times.len() - 1;
    let early = 1;
    let (pe, ne, po, pr) = (
        gamma("peri-ln", early)?,
        gamma("ngpt", early)?,
        gamma("post-ln", early)?,
        gamma("pre-ln", early)?,
    );
    let early_ok = pe.min(ne) > po.max(pr);
    let (pe_l, ne_l, po_l, pr_l) = (
        gamma("peri-ln", last)?,
        gamma("ngpt", last)?,
        gamma("post-ln", last)?,
        gamma("pre-ln", last)?,
    );
    let late_ok = po_l.min(ne_l) > pr_l.max(pe_l);
    check(
        early_ok && late_ok,
        format!(
            "{} runs, layer {early}: peri {pe:.4} ngpt {ne:.4} > post {po:.4} pre {pr:.4} ({early_ok}); \
             layer {last}: post {po_l:.6} ngpt {ne_l:.6} > pre {pr_l:.4} peri {pe_l:.4} ({late_ok})",
            cfg.runs
        ),
    )
}

fn a10(reference: Option<&BTreeMap<String, Vec<u8>>>) -> Outcome {
    let reference = reference.ok_or("no reference bundle from A9")?;
    let cfg = preset("fig3").map_err(|e| e.to_string())?;
    let again = csv_bytes(&run_experiment_with_threads(&cfg, 8).map_err(|e| e.to_string())?)?;
    let mut small = preset("appx_e3").map_err(|e| e.to_string())?;
    small.runs = 12;
    small.d = 64;
    let one = csv_bytes(&run_experiment_with_threads(&small, 1).map_err(|e| e.to_string())?)?;
    let four = csv_bytes(&run_experiment_with_threads(&small, 4).map_err(|e| e.to_string())?)?;
    let same = &again == reference && one == four;
    check(
        same,
        format!(
            "fig3 bundle ({} files) 1 vs 8 threads identical: {}; resampled-weights bundle 1 vs 4 threads identical: {}",
            reference.len(),
            &again == reference,
            one == four
        ),
    )
}

fn run(id: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let (pass, detail) = match outcome {
        Ok(d) => (in_time, d),
        Err(d) => (false, d),
    };
    let limit = match budget {
        Some(b) if in_time => format!("budget {}s", b.as_secs()),
        Some(b) => format!("budget {}s, exceeded", b.as_secs()),
        None => "no budget".into(),
    };
    println!(
        "{id} {} {:.1}s ({limit}) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut bundle = None;
    let results = [
        run("A1", secs(10), a1),
        run("A2", secs(5), a2),
        run("A3", secs(120), a3),
        run("A4", secs(5), a4),
        run("A5", secs(30), a5),
        run("A6", secs(60), a6),
        run("A7", secs(120), a7),
        run("A8", secs(300), a8),
        run("A9", secs(180), || a9(&mut bundle)),
        run("A10", None, || a10(bundle.as_ref())),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
