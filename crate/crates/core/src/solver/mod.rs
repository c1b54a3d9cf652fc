//! Joint optimizer: scan the batch count, and for each count alternate an
//! exact assignment step with an exact Dinkelbach draft-length step.

mod assign;
mod lengths;
pub mod oracle;
mod refine;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use assign::{solve_x, AssignmentOutcome};
pub use lengths::{solve_l, LengthOutcome};
pub use oracle::{brute_force, oracle_check, random_instance, OracleCheck, OracleTrial};
use refine::{refine, Refinement};

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::schedule::{check_feasible, evaluate, Plan, PlanMetrics};

/// Environment variable overriding [`SolverConfig::search_node_budget`].
pub const NODE_BUDGET_ENV: &str = "DIPSD_NODE_BUDGET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Draft length every user starts from (clamped to `l_ub`).
    pub l_init: u32,
    /// Dinkelbach stops once `|U - q S| <= dinkelbach_tol`.
    pub dinkelbach_tol: f64,
    /// Relative throughput change below which alternation stops.
    pub alt_tol: f64,
    pub max_alt_iters: usize,
    pub max_dinkelbach_iters: usize,
    /// Node limit per subproblem search.
    pub search_node_budget: u64,
    /// Wall-clock limit per subproblem search.
    pub time_budget_ms: Option<u64>,
    /// Allow one batch (and hence single-user instances).
    pub allow_single_batch: bool,
    /// After the alternation for each batch count, solve the length step
    /// on every distinct partition when there are at most this many
    /// candidates. Zero disables the sweep.
    pub refine_partition_limit: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            l_init: 7,
            dinkelbach_tol: 1e-9,
            alt_tol: 1e-9,
            max_alt_iters: 50,
            max_dinkelbach_iters: 50,
            search_node_budget: 10_000_000,
            time_budget_ms: None,
            allow_single_batch: false,
            refine_partition_limit: 20_000,
        }
    }
}

impl SolverConfig {
    /// Defaults with the node budget taken from `DIPSD_NODE_BUDGET` when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = SolverConfig::default();
        if let Ok(raw) = std::env::var(NODE_BUDGET_ENV) {
            cfg.search_node_budget = raw.trim().parse().map_err(|_| {
                Error::validation(
                    NODE_BUDGET_ENV,
                    format!("`{raw}` is not a positive integer"),
                )
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_init == 0 {
            return Err(Error::validation("l_init", "must be at least 1"));
        }
        if self.dinkelbach_tol.is_nan() || self.dinkelbach_tol <= 0.0 {
            return Err(Error::validation("dinkelbach_tol", "must be positive"));
        }
        if self.alt_tol.is_nan() || self.alt_tol <= 0.0 {
            return Err(Error::validation("alt_tol", "must be positive"));
        }
        if self.max_alt_iters == 0 || self.max_dinkelbach_iters == 0 {
            return Err(Error::validation(
                "max_iters",
                "iteration limits must be at least 1",
            ));
        }
        if self.search_node_budget == 0 {
            return Err(Error::validation(
                "search_node_budget",
                "must be at least 1",
            ));
        }
        if self.time_budget_ms == Some(0) {
            return Err(Error::validation("time_budget_ms", "must be at least 1"));
        }
        Ok(())
    }

    fn min_batches(&self) -> usize {
        if self.allow_single_batch {
            1
        } else {
            2
        }
    }
}

/// Node and wall-clock limit shared by a single search.
pub(crate) struct Budget {
    limit: u64,
    nodes: u64,
    deadline: Option<(Instant, u64)>,
    exhausted: bool,
}

impl Budget {
    pub(crate) fn new(limit: u64, deadline: Option<(Instant, u64)>) -> Self {
        Budget {
            limit,
            nodes: 0,
            deadline,
            exhausted: false,
        }
    }

    /// Counts one node; returns true once the budget is spent.
    pub(crate) fn tick(&mut self) -> bool {
        self.nodes += 1;
        if self.nodes > self.limit {
            self.exhausted = true;
        } else if self.nodes.is_multiple_of(4096) {
            if let Some((start, ms)) = self.deadline {
                if start.elapsed().as_millis() as u64 >= ms {
                    self.exhausted = true;
                }
            }
        }
        self.exhausted
    }

    pub(crate) fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub(crate) fn nodes(&self) -> u64 {
        self.nodes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimalityStatus {
    /// Every subproblem search ran to completion.
    Exact,
    /// Some search hit its budget. `span_lower_bound` bounds the span
    /// achievable at the reported lengths when that is known.
    BudgetTruncated { span_lower_bound: Option<f64> },
}

impl OptimalityStatus {
    pub fn is_exact(&self) -> bool {
        matches!(self, OptimalityStatus::Exact)
    }

    fn merge(self, other: OptimalityStatus) -> OptimalityStatus {
        match (self, other) {
            (OptimalityStatus::Exact, o) | (o, OptimalityStatus::Exact) => o,
            (
                OptimalityStatus::BudgetTruncated {
                    span_lower_bound: a,
                },
                OptimalityStatus::BudgetTruncated {
                    span_lower_bound: b,
                },
            ) => OptimalityStatus::BudgetTruncated {
                span_lower_bound: if a == b { a } else { None },
            },
        }
    }
}

/// One alternation: assignment step, then length step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlternationStep {
    pub iteration: usize,
    /// Throughput after the assignment step (tokens/s).
    pub after_assignment_tps: f64,
    /// Lower bound on the span at this iteration's input lengths when the
    /// assignment search was truncated.
    pub assignment_span_lower_bound: Option<f64>,
    /// Throughput after the length step (tokens/s).
    pub throughput_tps: f64,
    pub span: f64,
    pub utility: f64,
    pub lengths: Vec<u32>,
    pub dinkelbach_q: Vec<f64>,
    pub dinkelbach_residual: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Alternation {
    pub plan: Plan,
    pub metrics: PlanMetrics,
    pub trace: Vec<AlternationStep>,
    pub status: OptimalityStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchCountResult {
    #[serde(rename = "N")]
    pub batch_count: usize,
    #[serde(rename = "R_star_tps")]
    pub throughput_tps: Option<f64>,
    pub plan: Option<Plan>,
    /// Fixed point reached by the alternation alone (tokens/s).
    pub alternation_tps: Option<f64>,
    /// Distinct partitions checked by the sweep; `None` when it was skipped.
    pub refined_partitions: Option<usize>,
    pub iterations: usize,
    pub status: BatchCountStatus,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<AlternationStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchCountStatus {
    Solved { optimality: OptimalityStatus },
    Infeasible { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub best_plan: Plan,
    pub best_metrics: PlanMetrics,
    #[serde(rename = "N_star")]
    pub best_batch_count: usize,
    pub per_n: Vec<BatchCountResult>,
    pub optimality_status: OptimalityStatus,
    /// True when every batch count was settled by a completed partition
    /// sweep with exact searches, so `best_plan` is the joint optimum.
    pub joint_optimum_certified: bool,
}

/// Alternating optimization for a fixed batch count.
pub fn alternate(
    inst: &ProblemInstance,
    batch_count: usize,
    cfg: &SolverConfig,
) -> Result<Alternation> {
    cfg.validate()?;
    let m = inst.user_count();
    let min_n = cfg.min_batches();
    if batch_count < min_n || batch_count > m {
        return Err(Error::Domain(format!(
            "batch count {batch_count} outside {min_n}..={m}"
        )));
    }
    let mut lengths = vec![cfg.l_init.clamp(1, inst.bounds.l_ub); m];
    let mut status = OptimalityStatus::Exact;
    let mut trace = Vec::new();
    let mut best: Option<(Plan, PlanMetrics)> = None;
    for iteration in 1..=cfg.max_alt_iters {
        let x = solve_x(inst, batch_count, &lengths, cfg)?;
        // The bound holds for the input lengths only, and the length step
        // changes them, so it is kept in the trace rather than the status.
        if !x.exact {
            status = status.merge(OptimalityStatus::BudgetTruncated {
                span_lower_bound: None,
            });
        }
        let after_x = evaluate(&x.plan, inst)?;
        let prev_tps = best
            .as_ref()
            .map_or(after_x.throughput_tps, |(_, m)| m.throughput_tps);
        let l = solve_l(inst, &x.plan, cfg)?;
        if !l.exact {
            status = status.merge(OptimalityStatus::BudgetTruncated {
                span_lower_bound: None,
            });
        }
        trace.push(AlternationStep {
            iteration,
            after_assignment_tps: after_x.throughput_tps,
            assignment_span_lower_bound: (!x.exact).then_some(x.lower_bound),
            throughput_tps: l.metrics.throughput_tps,
            span: l.metrics.span,
            utility: l.metrics.utility,
            lengths: l.plan.lengths.clone(),
            dinkelbach_q: l.q_trace.clone(),
            dinkelbach_residual: l.residual_trace.clone(),
        });
        let unchanged = l.plan.lengths == lengths;
        let change = (l.metrics.throughput_tps - prev_tps).abs() / prev_tps;
        lengths = l.plan.lengths.clone();
        let improves = best
            .as_ref()
            .is_none_or(|(_, m)| l.metrics.throughput > m.throughput);
        if improves {
            best = Some((l.plan, l.metrics));
        }
        if unchanged && change < cfg.alt_tol {
            break;
        }
    }
    let (plan, metrics) = best.expect("at least one alternation runs");
    Ok(Alternation {
        plan,
        metrics,
        trace,
        status,
    })
}

type BatchCountOutcome = (Alternation, Option<Refinement>);

/// Scans every admissible batch count and keeps the best alternation result.
pub fn solve(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<SolveReport> {
    inst.validate()?;
    cfg.validate()?;
    let m = inst.user_count();
    let min_n = cfg.min_batches();
    if m < min_n {
        return Err(Error::Domain(format!(
            "{m} user(s) need at least {min_n}; enable single-batch solving for one user"
        )));
    }
    let per_n: Vec<(usize, Result<BatchCountOutcome>)> = (min_n..=m)
        .into_par_iter()
        .map(|n| {
            let outcome = alternate(inst, n, cfg).and_then(|alt| {
                let refined = if cfg.refine_partition_limit > 0 {
                    refine(inst, n, cfg)?
                } else {
                    None
                };
                Ok((alt, refined))
            });
            (n, outcome)
        })
        .collect();

    let mut results = Vec::with_capacity(per_n.len());
    let mut best: Option<(usize, Plan, PlanMetrics)> = None;
    let mut status = OptimalityStatus::Exact;
    let mut certified = true;
    for (n, outcome) in per_n {
        match outcome {
            Ok((alt, refined)) => {
                let alternation_tps = alt.metrics.throughput_tps;
                let mut n_status = alt.status;
                let refined_partitions = refined.as_ref().map(|r| r.partitions);
                let (plan, metrics) = match refined {
                    Some(r) => {
                        if !r.exact {
                            n_status = n_status.merge(OptimalityStatus::BudgetTruncated {
                                span_lower_bound: None,
                            });
                        }
                        certified &= r.exact;
                        if r.metrics.throughput > alt.metrics.throughput {
                            (r.plan, r.metrics)
                        } else {
                            (alt.plan, alt.metrics)
                        }
                    }
                    None => {
                        certified = false;
                        (alt.plan, alt.metrics)
                    }
                };
                if !check_feasible(&plan, inst).is_feasible() {
                    return Err(Error::Infeasible(check_feasible(&plan, inst).violations));
                }
                status = status.merge(n_status);
                let better = best
                    .as_ref()
                    .is_none_or(|(_, _, bm)| metrics.throughput > bm.throughput);
                if better {
                    best = Some((n, plan.clone(), metrics.clone()));
                }
                results.push(BatchCountResult {
                    batch_count: n,
                    throughput_tps: Some(metrics.throughput_tps),
                    plan: Some(plan),
                    alternation_tps: Some(alternation_tps),
                    refined_partitions,
                    iterations: alt.trace.len(),
                    status: BatchCountStatus::Solved {
                        optimality: n_status,
                    },
                    trace: alt.trace,
                });
            }
            Err(e) if e.is_infeasibility() => results.push(BatchCountResult {
                batch_count: n,
                throughput_tps: None,
                plan: None,
                alternation_tps: None,
                refined_partitions: None,
                iterations: 0,
                status: BatchCountStatus::Infeasible {
                    reason: e.to_string(),
                },
                trace: Vec::new(),
            }),
            Err(e) => return Err(e),
        }
    }
    let (best_batch_count, best_plan, best_metrics) = best.ok_or_else(|| {
        Error::NoFeasiblePlan(format!(
            "no batch count in {min_n}..={m} admits a feasible plan"
        ))
    })?;
    Ok(SolveReport {
        best_plan,
        best_metrics,
        best_batch_count,
        per_n: results,
        joint_optimum_certified: certified && status.is_exact(),
        optimality_status: status,
    })
}
