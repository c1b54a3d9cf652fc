//! Exhaustive reference solver for small instances, plus the random
//! instance generator used to compare it against the structured search.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{default_instance, ProblemInstance, DEFAULT_DRAFT_COEFFS};
use crate::schedule::{evaluate, Plan, PlanMetrics};
use crate::solver::{solve, SolverConfig};

/// Default ceiling on plan evaluations.
pub const DEFAULT_EVALUATION_CAP: u128 = 100_000_000;

fn stirling2(m: usize, n: usize) -> u128 {
    let mut table = vec![vec![0u128; n + 1]; m + 1];
    table[0][0] = 1;
    for i in 1..=m {
        for j in 1..=n.min(i) {
            table[i][j] = j as u128 * table[i - 1][j] + table[i - 1][j - 1];
        }
    }
    table[m][n]
}

/// Restricted-growth strings: assignments with batches labelled by first use.
fn set_partitions(m: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: usize, m: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            if used == n {
                out.push(cur.clone());
            }
            return;
        }
        if n - used > m - cur.len() {
            return;
        }
        for b in 0..=used.min(n - 1) {
            cur.push(b);
            rec(cur, used.max(b + 1), m, n, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(m), 0, m, n, &mut out);
    out
}

/// Globally best plan over batch counts in `batch_counts`, by evaluating every
/// set partition (one per identical-user orbit) against every length vector.
pub fn brute_force(
    inst: &ProblemInstance,
    batch_counts: std::ops::RangeInclusive<usize>,
    cap: u128,
) -> Result<(Plan, PlanMetrics)> {
    inst.validate()?;
    let m = inst.user_count();
    let l_ub = inst.bounds.l_ub;
    let per_assignment = (l_ub as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    let partitions: u128 = batch_counts
        .clone()
        .filter(|&n| n >= 1 && n <= m)
        .map(|n| stirling2(m, n))
        .sum();
    let required = partitions.saturating_mul(per_assignment);
    if required > cap {
        return Err(Error::CapExceeded { required, cap });
    }

    // Users with equal profiles share a class id; swapping them changes nothing.
    let mut class_of = Vec::with_capacity(m);
    for (k, u) in inst.users.iter().enumerate() {
        let class = inst.users[..k].iter().position(|v| v == u).unwrap_or(k);
        class_of.push(class);
    }

    let mut best: Option<(Plan, PlanMetrics)> = None;
    for n in batch_counts.filter(|&n| n >= 1 && n <= m) {
        let mut seen = HashSet::new();
        for assignment in set_partitions(m, n) {
            let mut signature: Vec<Vec<usize>> = vec![Vec::new(); n];
            for (k, &b) in assignment.iter().enumerate() {
                signature[b].push(class_of[k]);
            }
            signature.iter_mut().for_each(|s| s.sort_unstable());
            signature.sort();
            if !seen.insert(signature) {
                continue;
            }
            let mut lengths = vec![1u32; m];
            loop {
                let plan = Plan::new(n, assignment.clone(), lengths.clone());
                match evaluate(&plan, inst) {
                    Ok(metrics) => {
                        if best
                            .as_ref()
                            .is_none_or(|(_, b)| metrics.throughput > b.throughput)
                        {
                            best = Some((plan, metrics));
                        }
                    }
                    // Memory depends on the assignment only.
                    Err(Error::Infeasible(v))
                        if v.iter()
                            .any(|x| x.kind == crate::schedule::ConstraintKind::Memory) =>
                    {
                        break
                    }
                    Err(Error::Infeasible(_)) => {}
                    Err(e) => return Err(e),
                }
                // odometer over 1..=l_ub
                let mut k = 0;
                while k < m && lengths[k] == l_ub {
                    lengths[k] = 1;
                    k += 1;
                }
                if k == m {
                    break;
                }
                lengths[k] += 1;
            }
        }
    }
    best.ok_or_else(|| Error::NoFeasiblePlan("no feasible plan in the enumerated space".into()))
}

/// Random heterogeneous instance with `2..=max_users` users and `l_ub` in
/// `2..=max_len`. Acceptance rates lie in [0.5, 0.95], prefixes in [64, 1024],
/// draft coefficients are scaled by a factor in [0.2, 7] and communication
/// latency lies in [0, 10] ms. Roughly one user in four copies an earlier one.
pub fn random_instance<R: Rng>(rng: &mut R, max_users: usize, max_len: u32) -> ProblemInstance {
    let m = rng.gen_range(2..=max_users.max(2));
    let mut inst = default_instance(m);
    inst.bounds.l_ub = rng.gen_range(2..=max_len.max(2));
    for k in 0..m {
        if k > 0 && rng.gen_bool(0.25) {
            let j = rng.gen_range(0..k);
            inst.users[k] = inst.users[j];
            continue;
        }
        let u = &mut inst.users[k];
        u.accept_rate = rng.gen_range(0.5..=0.95);
        u.prefix_len = rng.gen_range(64..=1024);
        u.comm_latency_ms = rng.gen_range(0.0..=10.0);
        u.draft_coeffs = DEFAULT_DRAFT_COEFFS.scaled(rng.gen_range(0.2..=7.0));
    }
    inst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTrial {
    pub users: usize,
    pub l_ub: u32,
    pub solver_tps: f64,
    pub oracle_tps: f64,
    pub rel_diff: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub trials: Vec<OracleTrial>,
    pub matched: usize,
}

/// Solves `trials` seeded random instances with both the structured solver
/// and [`brute_force`], counting agreements within `rel_tol`.
pub fn oracle_check(
    seed: u64,
    trials: usize,
    max_users: usize,
    max_len: u32,
    rel_tol: f64,
    cfg: &SolverConfig,
) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<ProblemInstance> = (0..trials)
        .map(|_| random_instance(&mut rng, max_users, max_len))
        .collect();
    let min_n = if cfg.allow_single_batch { 1 } else { 2 };
    let mut out = Vec::with_capacity(trials);
    for inst in &instances {
        let report = solve(inst, cfg)?;
        let (_, oracle) = brute_force(inst, min_n..=inst.user_count(), DEFAULT_EVALUATION_CAP)?;
        let solver_tps = report.best_metrics.throughput_tps;
        let rel_diff = (solver_tps - oracle.throughput_tps).abs() / oracle.throughput_tps;
        out.push(OracleTrial {
            users: inst.user_count(),
            l_ub: inst.bounds.l_ub,
            solver_tps,
            oracle_tps: oracle.throughput_tps,
            rel_diff,
            matched: rel_diff <= rel_tol,
        });
    }
    Ok(OracleCheck {
        matched: out.iter().filter(|t| t.matched).count(),
        trials: out,
    })
}
