//! Comparison methods evaluated under the same cost model: plain
//! autoregressive decoding, autoregressive decoding with greedy
//! memory-feasible batching, and the joint optimizer restricted to singleton
//! batches or to a fixed draft length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost_model::{step_latency, verify_flops};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::schedule::{evaluate, Plan, PlanMetrics};
use crate::solver::{solve, solve_l, solve_x, OptimalityStatus, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ad,
    AdGreedy,
    Dipsd,
    DipsdFixedL,
    DipsdNobatch,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ad,
        Method::AdGreedy,
        Method::Dipsd,
        Method::DipsdFixedL,
        Method::DipsdNobatch,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Ad => "ad",
            Method::AdGreedy => "ad_greedy",
            Method::Dipsd => "dipsd",
            Method::DipsdFixedL => "dipsd_fixed_l",
            Method::DipsdNobatch => "dipsd_nobatch",
        }
    }

    /// Methods that scan batch counts from two upward.
    pub fn scans_batch_count(&self) -> bool {
        matches!(self, Method::Dipsd | Method::DipsdFixedL)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown method `{s}` (expected one of ad, ad_greedy, dipsd, dipsd_fixed_l, dipsd_nobatch)"
                ))
            })
    }
}

/// Outcome of one method on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub throughput_tps: f64,
    pub batch_count: usize,
    /// User indices of each batch (AD: one entry per user, served in turn).
    pub batches: Vec<Vec<usize>>,
    /// Per-user draft lengths; empty for the autoregressive methods.
    pub lengths: Vec<u32>,
    /// Span of one round, or for AD the time to emit one token for every user.
    pub span_ms: f64,
    /// Tokens emitted per round.
    pub utility_tokens: f64,
    pub status: OptimalityStatus,
}

impl BaselineResult {
    fn from_plan(
        method: Method,
        plan: &Plan,
        metrics: &PlanMetrics,
        status: OptimalityStatus,
    ) -> Self {
        BaselineResult {
            method,
            throughput_tps: metrics.throughput_tps,
            batch_count: plan.batch_count,
            batches: plan.batches(),
            lengths: plan.lengths.clone(),
            span_ms: metrics.span,
            utility_tokens: metrics.utility,
            status,
        }
    }
}

/// One target-model forward per token per user, users served one after another.
pub fn ad_throughput(inst: &ProblemInstance) -> BaselineResult {
    let per_token: Vec<f64> = inst
        .users
        .iter()
        .map(|u| {
            step_latency(
                1,
                verify_flops(1, u.prefix_len, &inst.verify_dims),
                &inst.verify_coeffs,
            )
        })
        .collect();
    let total: f64 = per_token.iter().sum();
    let m = inst.user_count();
    BaselineResult {
        method: Method::Ad,
        throughput_tps: 1000.0 * m as f64 / total,
        batch_count: m,
        batches: (0..m).map(|k| vec![k]).collect(),
        lengths: Vec::new(),
        span_ms: total,
        utility_tokens: m as f64,
        status: OptimalityStatus::Exact,
    }
}

/// Autoregressive decoding over batches packed greedily by descending prefix
/// length until the next user would overflow memory; batches run serially.
pub fn ad_greedy(inst: &ProblemInstance) -> Result<BaselineResult> {
    let memory = inst.memory();
    let mut order: Vec<usize> = (0..inst.user_count()).collect();
    order.sort_by(|&a, &b| inst.users[b].prefix_len.cmp(&inst.users[a].prefix_len));

    let mut batches: Vec<(Vec<usize>, u64)> = Vec::new();
    for k in order {
        let prefix = inst.users[k].prefix_len;
        if let Some((members, max_prefix)) = batches.last_mut() {
            let grown = (*max_prefix).max(prefix);
            if memory.fits(members.len() as u64 + 1, grown, &inst.verify_dims) {
                members.push(k);
                *max_prefix = grown;
                continue;
            }
        }
        if !memory.fits(1, prefix, &inst.verify_dims) {
            return Err(Error::NoFeasiblePlan(format!(
                "user {k} alone exceeds the verifier memory cap"
            )));
        }
        batches.push((vec![k], prefix));
    }
    let round: f64 = batches
        .iter()
        .map(|(members, prefix)| {
            step_latency(
                members.len() as u64,
                verify_flops(1, *prefix, &inst.verify_dims),
                &inst.verify_coeffs,
            )
        })
        .sum();
    let m = inst.user_count();
    Ok(BaselineResult {
        method: Method::AdGreedy,
        throughput_tps: 1000.0 * m as f64 / round,
        batch_count: batches.len(),
        batches: batches.into_iter().map(|(members, _)| members).collect(),
        lengths: Vec::new(),
        span_ms: round,
        utility_tokens: m as f64,
        status: OptimalityStatus::Exact,
    })
}

/// One user per batch; only draft lengths are optimized.
pub fn dipsd_no_batching(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<BaselineResult> {
    inst.validate()?;
    let start = Plan::singletons(vec![
        cfg.l_init.clamp(1, inst.bounds.l_ub);
        inst.user_count()
    ]);
    let out = solve_l(inst, &start, cfg)?;
    let status = if out.exact {
        OptimalityStatus::Exact
    } else {
        OptimalityStatus::BudgetTruncated {
            span_lower_bound: None,
        }
    };
    Ok(BaselineResult::from_plan(
        Method::DipsdNobatch,
        &out.plan,
        &out.metrics,
        status,
    ))
}

/// Every user drafts `l_fixed` tokens; the assignment and batch count are optimized.
pub fn dipsd_fixed_l(
    inst: &ProblemInstance,
    l_fixed: u32,
    cfg: &SolverConfig,
) -> Result<BaselineResult> {
    inst.validate()?;
    if l_fixed == 0 || l_fixed > inst.bounds.l_ub {
        return Err(Error::Domain(format!(
            "fixed draft length {l_fixed} outside 1..={}",
            inst.bounds.l_ub
        )));
    }
    let m = inst.user_count();
    let min_n = if cfg.allow_single_batch { 1 } else { 2 };
    let lengths = vec![l_fixed; m];
    let mut best: Option<(Plan, PlanMetrics, OptimalityStatus)> = None;
    for n in min_n..=m {
        let out = match solve_x(inst, n, &lengths, cfg) {
            Ok(out) => out,
            Err(e) if e.is_infeasibility() => continue,
            Err(e) => return Err(e),
        };
        let metrics = evaluate(&out.plan, inst)?;
        let status = if out.exact {
            OptimalityStatus::Exact
        } else {
            OptimalityStatus::BudgetTruncated {
                span_lower_bound: Some(out.lower_bound),
            }
        };
        if best
            .as_ref()
            .is_none_or(|(_, b, _)| metrics.throughput > b.throughput)
        {
            best = Some((out.plan, metrics, status));
        }
    }
    let (plan, metrics, status) = best.ok_or_else(|| {
        Error::NoFeasiblePlan(format!("no batch count in {min_n}..={m} is feasible"))
    })?;
    Ok(BaselineResult::from_plan(
        Method::DipsdFixedL,
        &plan,
        &metrics,
        status,
    ))
}

/// Draft length used by [`Method::DipsdFixedL`] when run through [`run_method`].
pub const DEFAULT_FIXED_LENGTH: u32 = 7;

/// Runs any method, including the full joint optimizer, with a common result shape.
pub fn run_method(
    method: Method,
    inst: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<BaselineResult> {
    match method {
        Method::Ad => {
            inst.validate()?;
            Ok(ad_throughput(inst))
        }
        Method::AdGreedy => {
            inst.validate()?;
            ad_greedy(inst)
        }
        Method::Dipsd => {
            let report = solve(inst, cfg)?;
            Ok(BaselineResult::from_plan(
                Method::Dipsd,
                &report.best_plan,
                &report.best_metrics,
                report.optimality_status,
            ))
        }
        Method::DipsdFixedL => dipsd_fixed_l(inst, DEFAULT_FIXED_LENGTH, cfg),
        Method::DipsdNobatch => dipsd_no_batching(inst, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{default_instance, heterogeneous_case};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn ad_examples() {
        let ad = ad_throughput(&default_instance(6));
        assert!(rel(ad.throughput_tps, 1000.0 / 95.682_852_192_44) < 1e-12);
        assert!((ad.throughput_tps - 10.4512).abs() < 1e-4);
        let single = ad_throughput(&default_instance(1));
        assert!(rel(single.throughput_tps, ad.throughput_tps) < 1e-12);
        // 6000 / sum of per-token latencies over prefixes 200..800
        let case1 = ad_throughput(&heterogeneous_case(1).unwrap());
        assert!(rel(case1.throughput_tps, 10.451_214_218_06) < 1e-10);
    }

    #[test]
    fn ad_is_invariant_to_duplicating_users() {
        for m in [1, 3, 7] {
            let a = ad_throughput(&default_instance(m)).throughput_tps;
            let b = ad_throughput(&default_instance(2 * m)).throughput_tps;
            assert!(rel(a, b) < 1e-12);
        }
    }

    #[test]
    fn ad_greedy_examples() {
        let six = ad_greedy(&default_instance(6)).unwrap();
        assert_eq!(six.batch_count, 1);
        assert!(rel(six.span_ms, 98.560_113_154_64) < 1e-12);
        assert!(rel(six.throughput_tps, 60.876_553_485_55) < 1e-10);

        let fourteen = ad_greedy(&default_instance(14)).unwrap();
        assert_eq!(fourteen.batch_count, 1);
        assert!(rel(fourteen.span_ms, 103.163_730_694_16) < 1e-12);
        assert!(rel(fourteen.throughput_tps, 135.706_608_376_77) < 1e-10);

        let one = default_instance(1);
        assert!(
            rel(
                ad_greedy(&one).unwrap().throughput_tps,
                ad_throughput(&one).throughput_tps
            ) < 1e-12
        );
    }

    #[test]
    fn ad_greedy_splits_at_memory_cap() {
        let inst = default_instance(100);
        let res = ad_greedy(&inst).unwrap();
        assert_eq!(
            res.batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![49, 49, 2]
        );
        let memory = inst.memory();
        for b in &res.batches {
            assert!(memory.fits(b.len() as u64, 512, &inst.verify_dims));
        }
    }

    #[test]
    fn ad_greedy_sorts_by_descending_prefix() {
        let mut inst = heterogeneous_case(1).unwrap();
        inst.mem_cap_bytes = inst.memory().batch_bytes(2, 800, &inst.verify_dims);
        let res = ad_greedy(&inst).unwrap();
        assert_eq!(res.batches, vec![vec![5, 4], vec![3, 2], vec![1, 0]]);
    }

    #[test]
    fn fixed_length_seven_prefers_three_batches() {
        let res = dipsd_fixed_l(&default_instance(6), 7, &SolverConfig::default()).unwrap();
        assert_eq!(res.batch_count, 3);
        assert_eq!(
            res.batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 2, 2]
        );
        assert!(rel(res.throughput_tps, 68.505_055_278_47) < 1e-10);
        assert!(rel(res.span_ms, 343.566_640_748_57) < 1e-10);
        assert!(rel(res.utility_tokens, 23.536_051_716_319) < 1e-12);
        // best two-batch split is 3/3
        let two = evaluate(
            &Plan::new(2, vec![0, 0, 0, 1, 1, 1], vec![7; 6]),
            &default_instance(6),
        )
        .unwrap();
        assert!(rel(two.throughput_tps, 67.711_042_531_27) < 1e-10);
    }

    #[test]
    fn fixed_length_three_matches_joint_optimum() {
        let cfg = SolverConfig::default();
        let inst = default_instance(6);
        let fixed = dipsd_fixed_l(&inst, 3, &cfg).unwrap();
        let joint = run_method(Method::Dipsd, &inst, &cfg).unwrap();
        assert!(rel(fixed.throughput_tps, joint.throughput_tps) < 1e-12);
        assert!(dipsd_fixed_l(&inst, 21, &cfg).is_err());
        assert!(dipsd_fixed_l(&inst, 0, &cfg).is_err());
    }

    #[test]
    fn fixed_length_two_users_forced_singletons() {
        let res = dipsd_fixed_l(&default_instance(2), 7, &SolverConfig::default()).unwrap();
        assert_eq!(res.batches, vec![vec![0], vec![1]]);
    }

    #[test]
    fn no_batching_matches_uniform_scan() {
        let inst = default_instance(6);
        let res = dipsd_no_batching(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(res.batch_count, 6);
        let scan = (1..=20)
            .map(|l| {
                evaluate(&Plan::singletons(vec![l; 6]), &inst)
                    .unwrap()
                    .throughput_tps
            })
            .fold(0.0, f64::max);
        assert!(res.throughput_tps >= scan * (1.0 - 1e-12));
        let joint = run_method(Method::Dipsd, &inst, &SolverConfig::default()).unwrap();
        assert!(res.throughput_tps < joint.throughput_tps);

        let one = default_instance(1);
        let single = dipsd_no_batching(&one, &SolverConfig::default()).unwrap();
        let cfg = SolverConfig {
            allow_single_batch: true,
            ..SolverConfig::default()
        };
        let solved = run_method(Method::Dipsd, &one, &cfg).unwrap();
        assert!(rel(single.throughput_tps, solved.throughput_tps) < 1e-12);
    }

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!("greedy".parse::<Method>().is_err());
    }
}
