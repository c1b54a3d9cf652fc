//! Acceptance checks against the reference numbers. Prints one PASS/FAIL
//! line per criterion and exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dipsd_core::baselines::{
    ad_greedy, ad_throughput, dipsd_fixed_l, dipsd_no_batching, DEFAULT_FIXED_LENGTH,
};
use dipsd_core::cost_model::expected_accepted;
use dipsd_core::instance::{default_instance, heterogeneous_case, ProblemInstance};
use dipsd_core::montecarlo::{simulate, SimConfig};
use dipsd_core::schedule::{canonical_stage_durations, minimal_span};
use dipsd_core::solver::{oracle_check, solve, SolveReport, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AD_TARGET: f64 = 10.45;
const AD_REL_TOL: f64 = 0.005;
const THROUGHPUT_REL_TOL: f64 = 0.02;
const ORACLE_REL_TOL: f64 = 1e-9;
const ORACLE_SEED: u64 = 2024;
const SPAN_SUITE_SEED: u64 = 8;
const SIM_SEED: u64 = 20_240_601;
const SIM_ROUNDS: u64 = 100_000;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn within_rel(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol * target.abs()
}

fn solved(inst: &ProblemInstance) -> (SolveReport, Duration) {
    let start = Instant::now();
    let report = solve(inst, &SolverConfig::default()).expect("solve");
    (report, start.elapsed())
}

fn ad_default() -> Outcome {
    let r = ad_throughput(&default_instance(6)).throughput_tps;
    Outcome {
        pass: within_rel(r, AD_TARGET, AD_REL_TOL),
        detail: format!("AD at defaults = {r:.4} tok/s (target {AD_TARGET} ± 0.5%)"),
    }
}

fn low_accept_rate() -> Outcome {
    let (report, t) = solved(&default_instance(6).with_accept_rate(0.70));
    let r = report.best_metrics.throughput_tps;
    Outcome {
        pass: within_rel(r, 74.13, THROUGHPUT_REL_TOL) && t < Duration::from_secs(10),
        detail: format!(
            "alpha=0.70 R* = {r:.3} tok/s (target 74.13 ± 2%), {:.2?}",
            t
        ),
    }
}

fn high_accept_rate() -> Outcome {
    let (report, t) = solved(&default_instance(6).with_accept_rate(0.95));
    let r = report.best_metrics.throughput_tps;
    let n = report.best_batch_count;
    let uniform7 = report.best_plan.lengths.iter().all(|&l| l == 7);
    Outcome {
        pass: within_rel(r, 117.56, THROUGHPUT_REL_TOL)
            && n == 3
            && uniform7
            && t < Duration::from_secs(10),
        detail: format!(
            "alpha=0.95 R* = {r:.3} tok/s (target 117.56 ± 2%), N* = {n}, l = {:?}, {:.2?}",
            report.best_plan.lengths, t
        ),
    }
}

fn fourteen_users() -> Outcome {
    let (report, t) = solved(&default_instance(14));
    let r = report.best_metrics.throughput_tps;
    let ad = ad_throughput(&default_instance(14)).throughput_tps;
    let ratio = r / ad;
    let exact = report.optimality_status.is_exact();
    Outcome {
        pass: within_rel(r, 186.9, THROUGHPUT_REL_TOL)
            && (ratio - 17.89).abs() <= 0.4
            && exact
            && t < Duration::from_secs(60),
        detail: format!(
            "M=14 R* = {r:.3} tok/s (target 186.9 ± 2%), {ratio:.3}x over AD (17.89 ± 0.4), exact = {exact}, {:.2?}",
            t
        ),
    }
}

fn speedup_ratios() -> Outcome {
    let m14 = default_instance(14);
    let r14 = solved(&m14).0.best_metrics.throughput_tps;
    let g14 = ad_greedy(&m14).unwrap().throughput_tps;
    let hi = default_instance(6).with_accept_rate(0.95);
    let r6 = solved(&hi).0.best_metrics.throughput_tps;
    let g6 = ad_greedy(&hi).unwrap().throughput_tps;
    let a6 = ad_throughput(&hi).throughput_tps;
    let (x, y, z) = (r14 / g14, r6 / g6, r6 / a6);
    Outcome {
        pass: (x - 1.38).abs() <= 0.03 && (y - 1.93).abs() <= 0.04 && (z - 11.25).abs() <= 0.25,
        detail: format!(
            "M=14 vs AD-greedy {x:.3} (1.38 ± 0.03); alpha=0.95 vs AD-greedy {y:.3} (1.93 ± 0.04), vs AD {z:.3} (11.25 ± 0.25)"
        ),
    }
}

fn heterogeneous() -> Outcome {
    let cfg = SolverConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for case in 1..=3u8 {
        let inst = heterogeneous_case(case).unwrap();
        let r = solved(&inst).0.best_metrics.throughput_tps;
        let fixed = dipsd_fixed_l(&inst, DEFAULT_FIXED_LENGTH, &cfg)
            .unwrap()
            .throughput_tps;
        let nobatch = dipsd_no_batching(&inst, &cfg).unwrap().throughput_tps;
        let in_band = (77.0..=86.0).contains(&r);
        let dominates = r >= fixed && r >= nobatch;
        pass &= in_band && dominates;
        parts.push(format!(
            "case {case}: {r:.3}{} (fixed-l {fixed:.2}, no-batch {nobatch:.2})",
            if in_band { "" } else { " OUT OF BAND" }
        ));
    }
    Outcome {
        pass,
        detail: format!("band [77, 86] tok/s; {}", parts.join("; ")),
    }
}

fn oracle() -> Outcome {
    let start = Instant::now();
    let report = oracle_check(
        ORACLE_SEED,
        20,
        5,
        6,
        ORACLE_REL_TOL,
        &SolverConfig::default(),
    )
    .unwrap();
    let t = start.elapsed();
    let worst = report.trials.iter().map(|t| t.rel_diff).fold(0.0, f64::max);
    Outcome {
        pass: report.matched == 20 && t < Duration::from_secs(120),
        detail: format!(
            "{}/20 random instances match exhaustive search (worst rel diff {worst:.1e}), {:.2?}",
            report.matched, t
        ),
    }
}

fn span_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SPAN_SUITE_SEED);
    let feasible = |ready: &[f64], verify: &[f64], s: f64| {
        let t = canonical_stage_durations(verify, s);
        let tol = 1e-12 * s;
        t.iter().zip(verify).all(|(t, v)| *t >= v - tol)
            && (t.iter().sum::<f64>() - s).abs() <= tol
            && ready.iter().zip(verify).all(|(d, v)| s >= d + v - tol)
    };
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let scale = 10f64.powf(rng.gen_range(-1.0..3.0));
        let ready: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0) * scale).collect();
        let verify: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..=1.0) * scale).collect();
        let s = minimal_span(&ready, &verify).unwrap();
        if !feasible(&ready, &verify, s) || feasible(&ready, &verify, s - 1e-6 * s) {
            bad += 1;
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!(
            "{}/1000 timing vectors: S feasible and S - 1e-6 S infeasible",
            1000 - bad
        ),
    }
}

fn monte_carlo() -> Outcome {
    let inst = default_instance(6);
    let plan = solved(&inst).0.best_plan;
    let start = Instant::now();
    let res = simulate(
        &SimConfig {
            rounds: SIM_ROUNDS,
            seed: SIM_SEED,
            plan: plan.clone(),
        },
        &inst,
    )
    .unwrap();
    let t = start.elapsed();
    let rel = (res.empirical_tps - res.analytic_tps).abs() / res.analytic_tps;
    let worst_z = plan
        .lengths
        .iter()
        .zip(&inst.users)
        .enumerate()
        .map(|(k, (&l, u))| {
            let e = expected_accepted(l, u.accept_rate).unwrap();
            (res.per_user_mean_accepted[k] - e).abs() / res.per_user_std_error[k]
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: rel <= 0.01 && worst_z <= 4.0 && t < Duration::from_secs(30),
        detail: format!(
            "empirical {:.3} vs analytic {:.3} tok/s (rel {rel:.2e} <= 1%), worst per-user |z| = {worst_z:.2} <= 4, {:.2?}",
            res.empirical_tps, res.analytic_tps, t
        ),
    }
}

fn monotone_and_dominant() -> Outcome {
    let cfg = SolverConfig::default();
    let mut failures = Vec::new();

    let alphas = [0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    let mut points: Vec<(String, ProblemInstance)> = Vec::new();
    let mut last = 0.0;
    for a in alphas {
        let inst = default_instance(6).with_accept_rate(a);
        let r = solved(&inst).0.best_metrics.throughput_tps;
        if r < last {
            failures.push(format!("R*({a}) = {r:.3} < {last:.3}"));
        }
        last = r;
        points.push((format!("alpha={a}"), inst));
    }

    let six = default_instance(6);
    let twelve = default_instance(12);
    let dipsd_ratio =
        solved(&twelve).0.best_metrics.throughput_tps / solved(&six).0.best_metrics.throughput_tps;
    let greedy_ratio =
        ad_greedy(&twelve).unwrap().throughput_tps / ad_greedy(&six).unwrap().throughput_tps;
    let fixed_ratio = dipsd_fixed_l(&twelve, DEFAULT_FIXED_LENGTH, &cfg)
        .unwrap()
        .throughput_tps
        / dipsd_fixed_l(&six, DEFAULT_FIXED_LENGTH, &cfg)
            .unwrap()
            .throughput_tps;
    for (name, ratio) in [
        ("dipsd", dipsd_ratio),
        ("ad_greedy", greedy_ratio),
        ("dipsd_fixed_l", fixed_ratio),
    ] {
        if ratio < 1.8 {
            failures.push(format!("{name} R(12)/R(6) = {ratio:.3} < 1.8"));
        }
    }

    for m in [2, 4, 8, 10, 12, 14] {
        points.push((format!("M={m}"), default_instance(m)));
    }
    for c in 1..=3 {
        points.push((format!("case {c}"), heterogeneous_case(c).unwrap()));
    }
    for (name, inst) in &points {
        let r = solved(inst).0.best_metrics.throughput_tps;
        let fixed = dipsd_fixed_l(inst, DEFAULT_FIXED_LENGTH, &cfg)
            .unwrap()
            .throughput_tps;
        let nobatch = dipsd_no_batching(inst, &cfg).unwrap().throughput_tps;
        if r < fixed || r < nobatch {
            failures.push(format!(
                "{name}: dipsd {r:.3} vs fixed-l {fixed:.3}, no-batch {nobatch:.3}"
            ));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "R*(alpha) nondecreasing; R(12)/R(6): dipsd {dipsd_ratio:.3}, ad_greedy {greedy_ratio:.3}, fixed-l {fixed_ratio:.3}; dipsd dominates at {} points",
                points.len()
            )
        } else {
            failures.join("; ")
        },
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("AD baseline", ad_default),
        ("low acceptance rate", low_accept_rate),
        ("high acceptance rate", high_accept_rate),
        ("fourteen users", fourteen_users),
        ("speedup ratios", speedup_ratios),
        ("heterogeneous cases", heterogeneous),
        ("oracle equivalence", oracle),
        ("minimal span", span_suite),
        ("monte carlo", monte_carlo),
        ("monotonicity and dominance", monotone_and_dominant),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let out = check();
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {}",
            if out.pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
