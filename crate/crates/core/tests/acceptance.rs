//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use perpetua::boundary::{expected_exit_time, increasing_eigenfunction};
use perpetua::catalogue;
use perpetua::criterion::{analyze, mean_functional, truncated_mean};
use perpetua::expr::{Bindings, Expression};
use perpetua::quadrature::Decision;
use perpetua::sim::{ks_summary, run_y, run_z, PathEnd, SimConfig};
use perpetua::timechange::{lamperti_pair, transform};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

fn e(s: &str) -> Expression {
    Expression::parse(s).unwrap()
}

fn params(p: &[(&str, f64)]) -> Bindings {
    p.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    if took > budget {
        Err(format!("{detail}; took {took:.1?}, budget {budget:?}"))
    } else {
        Ok(detail)
    }
}

fn bessel_criterion() -> Outcome {
    let start = Instant::now();
    let mut wrong = Vec::new();
    for delta in [2.5, 3.0, 4.0] {
        let d = catalogue::get("bessel", &params(&[("delta", delta)])).unwrap();
        for p in [1.5, 2.5, 3.0, 4.0] {
            let want = if p > 2.0 { Decision::Finite } else { Decision::Infinite };
            let got = analyze(&d, &e(&format!("x^-{p}")), 1.0).map(|r| r.decision());
            if got.as_ref().ok() != Some(&want) {
                wrong.push(format!("delta={delta} p={p}: {got:?}"));
            }
        }
    }
    if !wrong.is_empty() {
        return Err(wrong.join("; "));
    }
    within_budget(start, Duration::from_secs(30), "12/12 conclusive and correct".into())
}

fn drifted_bm_criterion() -> Outcome {
    let start = Instant::now();
    let mut wrong = Vec::new();
    for mu in [0.5, 1.0] {
        let d = catalogue::get("bm_drift", &params(&[("mu", mu)])).unwrap();
        for (f, want) in [
            ("exp(-x)", Decision::Finite),
            ("1/(1 + x^2)", Decision::Finite),
            ("1/(1 + abs(x))", Decision::Infinite),
        ] {
            let got = analyze(&d, &e(f), 0.0).map(|r| r.decision());
            if got.as_ref().ok() != Some(&want) {
                wrong.push(format!("mu={mu} f={f}: {got:?}"));
            }
        }
    }
    if !wrong.is_empty() {
        return Err(wrong.join("; "));
    }
    within_budget(start, Duration::from_secs(10), "6/6 correct".into())
}

fn route_agreement_criterion() -> Outcome {
    let answers = catalogue::known_answers();
    let mut problems = Vec::new();
    let mut both = 0;
    for a in &answers {
        let d = catalogue::get(&a.family, &a.params).unwrap();
        match analyze(&d, &e(&a.f), d.x0) {
            Ok(r) => {
                if r.verdict_y.decision.is_conclusive() && r.verdict_z.decision.is_conclusive() {
                    both += 1;
                }
                if r.decision() != a.expected {
                    problems.push(format!("{} {:?} f={}: {:?}", a.family, a.params, a.f, r.decision()));
                }
            }
            Err(err) => problems.push(format!("{} {:?} f={}: {err}", a.family, a.params, a.f)),
        }
    }
    if problems.is_empty() {
        Ok(format!("{} pairs, {both} with both routes conclusive, 0 disagreements", answers.len()))
    } else {
        Err(problems.join("; "))
    }
}

fn time_change_criterion() -> Outcome {
    let start = Instant::now();
    let d = catalogue::get("bessel", &params(&[("delta", 3.0)])).unwrap();
    let f = e("x^-4");
    // both samples are censored at the same level
    let cap = 4.0;
    let cfg = SimConfig {
        dt: 1e-4,
        n_paths: 10_000,
        seed: 2024,
        t_max: 1e3,
        functional_cap: Some(cap),
        ..SimConfig::new(1.0, 2.0)
    };
    let y = run_y(&d, &f, &cfg).map_err(|e| e.to_string())?;
    let tc = transform(&d, &f).map_err(|e| e.to_string())?;
    let z_cfg = SimConfig { seed: 2025, t_max: cap, functional_cap: None, ..cfg.clone() };
    let z = run_z(&tc, &z_cfg).map_err(|e| e.to_string())?;
    let a: Vec<f64> = y.functionals().iter().map(|v| v.min(cap)).collect();
    let b: Vec<f64> = z.functionals().iter().map(|v| v.min(cap)).collect();
    let ks = ks_summary(&a, &b, 0.01).map_err(|e| e.to_string())?;
    let detail = format!(
        "KS {:.4} vs critical {:.4} (censored at {cap}; Z target g(2) = {:.6})",
        ks.statistic,
        ks.critical,
        tc.g.value(2.0).unwrap()
    );
    if ks.statistic >= ks.critical {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(120), detail)
}

fn exit_time_criterion() -> Outcome {
    let bm = catalogue::get("bm", &Bindings::new()).unwrap();
    let q = expected_exit_time(&bm, 0.0, 1.0, 0.5).map_err(|e| e.to_string())?;
    if (q - 0.25).abs() > 1e-8 {
        return Err(format!("quadrature {q}"));
    }
    let cfg = SimConfig {
        dt: 1e-4,
        n_paths: 100_000,
        seed: 5,
        lower: Some(0.0),
        ..SimConfig::new(0.5, 1.0)
    };
    let rep = run_y(&bm, &e("1"), &cfg).map_err(|e| e.to_string())?;
    let (mean, se) = rep.statistic(|s| s.hit_time);
    let detail = format!("quadrature {q:.12}, Monte Carlo {mean:.5} ± {se:.5}");
    if rep.hit_fraction < 1.0 || (mean - q).abs() > 3.0 * se {
        return Err(detail);
    }
    Ok(detail)
}

fn eigenfunction_criterion() -> Outcome {
    let bm = catalogue::get("bm", &Bindings::new()).unwrap();
    let lambda = 0.5;
    let ef = increasing_eigenfunction(&bm, lambda, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let ratio = ef.psi[0] / ef.psi[1];
    let want = (-1.0f64).exp();
    if (ratio - want).abs() > 1e-5 {
        return Err(format!("ODE ratio {ratio} vs {want}"));
    }
    let cfg = SimConfig { dt: 1e-3, n_paths: 10_000, seed: 6, t_max: 40.0, ..SimConfig::new(0.0, 1.0) };
    let rep = run_y(&bm, &e("1"), &cfg).map_err(|e| e.to_string())?;
    let (mean, se) = rep.statistic(|s| if s.end == PathEnd::Target { (-lambda * s.hit_time).exp() } else { 0.0 });
    let detail = format!("ODE ratio {ratio:.8}, Monte Carlo E[exp(-λH)] {mean:.4} ± {se:.4}, exact {want:.6}");
    if (mean - ratio).abs() > 3.0 * se {
        return Err(detail);
    }
    Ok(detail)
}

/// Composite Simpson rule on `n` panels.
fn simpson<F: Fn(f64) -> f64>(h: F, a: f64, b: f64, n: usize) -> f64 {
    let w = (b - a) / n as f64;
    let mut s = h(a) + h(b);
    for i in 1..n {
        s += h(a + i as f64 * w) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * w / 3.0
}

fn mean_formula_criterion() -> Outcome {
    let d = catalogue::get("bessel", &params(&[("delta", 3.0)])).unwrap();
    let f = e("x^-4");
    let full = mean_functional(&d, &f, 1.0).map_err(|e| e.to_string())?;
    if full.decision != Decision::Infinite {
        return Err(format!("full mean should diverge near 0, got {:?}", full.decision));
    }
    let exact = truncated_mean(&d, &f, 1.0, 1.0, 5.0).map_err(|e| e.to_string())?;
    // 2 ∫_1^5 (1/y − 1/5) y⁻² dy
    if (exact - 0.64).abs() > 1e-6 {
        return Err(format!("truncated mean on [1, 5] is {exact}, expected 0.64"));
    }
    let (lo, hi) = (0.5, 5.0);
    let q = truncated_mean(&d, &f, 1.0, lo, hi).map_err(|e| e.to_string())?;
    // closed-form kernel: S = 1 - 1/y, m = 2y²
    let s = |y: f64| 1.0 - 1.0 / y;
    let kernel = |y: f64| (s(hi) - s(y.max(1.0))) * y.powi(-4) * 2.0 * y * y;
    let oracle = simpson(kernel, lo, 1.0, 200_000) + simpson(kernel, 1.0, hi, 200_000);
    if (q - oracle).abs() > 1e-6 * oracle {
        return Err(format!("quadrature {q} vs oracle {oracle}"));
    }
    let cfg = SimConfig {
        dt: 1e-3,
        n_paths: 10_000,
        seed: 7,
        t_max: 1e4,
        accumulate_above: Some(lo),
        ..SimConfig::new(1.0, hi)
    };
    let rep = run_y(&d, &f, &cfg).map_err(|e| e.to_string())?;
    let detail = format!(
        "full mean diverges; truncated mean {q:.8} (oracle {oracle:.8}); Monte Carlo {:.4} ± {:.4}",
        rep.mean, rep.stderr
    );
    if rep.hit_fraction < 1.0 || (rep.mean - q).abs() > 3.0 * rep.stderr {
        return Err(detail);
    }
    Ok(detail)
}

fn lamperti_criterion() -> Outcome {
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for h in ["exp(-x)", "1/(1 + x^2)", "1/(1 + abs(x))", "1/sqrt(1 + x^2)", "exp(-x/2)"] {
        let (bm, bessel) = lamperti_pair(1.0, &e(h)).map_err(|e| e.to_string())?;
        let a = analyze(&bm.diffusion, &bm.f, 0.0).map(|r| r.decision());
        let b = analyze(&bessel.diffusion, &bessel.f, 1.0).map(|r| r.decision());
        match (&a, &b) {
            (Ok(x), Ok(y)) if x.is_conclusive() && y.is_conclusive() && x != y => {
                bad.push(format!("h={h}: BM {x:?}, Bessel {y:?}"))
            }
            (Err(err), _) | (_, Err(err)) => bad.push(format!("h={h}: {err}")),
            _ => lines.push(format!("{h}: {:?}", a.unwrap())),
        }
    }
    if bad.is_empty() {
        Ok(lines.join(", "))
    } else {
        Err(bad.join("; "))
    }
}

fn property_criterion() -> Outcome {
    let run = |name: &str, cases: u32, result: Result<(), String>| {
        result.map_err(|e| format!("{name}: {e}")).map(|_| format!("{name} ({cases})"))
    };
    let mut done = Vec::new();
    let cfg = |cases| Config { cases, failure_persistence: None, ..Config::default() };
    let mut r = TestRunner::new(cfg(200));
    done.push(run(
        "derivatives",
        200,
        r.run(&(common::smooth_expr(), -2.0f64..2.0), |(ex, x)| common::derivative_matches_differences(&ex, x))
            .map_err(|e| e.to_string()),
    )?);
    let mut r = TestRunner::new(cfg(100));
    done.push(run(
        "scale monotone",
        100,
        r.run(&(0u8..3, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), |(k, t, u, v)| {
            common::scale_is_increasing(&common::transient_model(k, t), u, v)
        })
        .map_err(|e| e.to_string()),
    )?);
    let mut r = TestRunner::new(cfg(100));
    done.push(run(
        "(g'σ)² = f",
        100,
        r.run(&(0u8..3, 0.0f64..1.0, 0u8..4, 0.0f64..1.0), |(k, t, fk, u)| {
            common::g_prime_identity(&common::transient_model(k, t), &common::integrand(fk), u)
        })
        .map_err(|e| e.to_string()),
    )?);
    let mut r = TestRunner::new(cfg(100));
    done.push(run(
        "g⁻¹∘g",
        100,
        r.run(&(0u8..3, 0.0f64..1.0, 0u8..4, 0.0f64..1.0), |(k, t, fk, u)| {
            common::g_round_trip(&common::transient_model(k, t), &common::integrand(fk), u)
        })
        .map_err(|e| e.to_string()),
    )?);
    let mut r = TestRunner::new(cfg(8));
    done.push(run(
        "seed reproducibility",
        8,
        r.run(&(any::<u64>(), 1usize..40), |(seed, n)| common::simulation_is_reproducible(seed, n))
            .map_err(|e| e.to_string()),
    )?);
    let mut r = TestRunner::new(cfg(100));
    done.push(run(
        "p-integral oracle",
        100,
        r.run(&(0.3f64..4.0), common::p_integral_oracle)
            .map_err(|e| e.to_string()),
    )?);
    for p in [0.5, 0.9, 1.0, 1.1, 1.5, 2.0, 3.0] {
        common::p_integral_oracle(p).map_err(|e| format!("p-integral at {p}: {e}"))?;
    }
    Ok(done.join(", "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Bessel criterion", bessel_criterion),
        ("drifted-BM criterion", drifted_bm_criterion),
        ("route agreement on the catalogue", route_agreement_criterion),
        ("time-change identity", time_change_criterion),
        ("expected exit time", exit_time_criterion),
        ("eigenfunction ratio", eigenfunction_criterion),
        ("mean formula", mean_formula_criterion),
        ("Lamperti consistency", lamperti_criterion),
        ("property suites", property_criterion),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{took:.1?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{took:.1?}] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
