//! Plans (batch assignment plus per-user draft lengths), constraint checking
//! and closed-form evaluation of the pipelined round.
//!
//! A round runs `N` verification stages back to back on the edge server while
//! every device drafts in parallel. Stage `n` lasts `T_n >= t_n^v`, the stages
//! fill the span `S = sum T_n`, and each batch must have finished drafting,
//! uploading and verifying within one span: `S >= t_n^d + t_n^v`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost_model::{expected_accepted_unchecked, step_latency, verify_flops};
use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, UserProfile};

/// Batch count, user-to-batch assignment and per-user draft lengths.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub batch_count: usize,
    /// `assignment[m]` is the batch index of user `m`, in `0..batch_count`.
    pub assignment: Vec<usize>,
    pub lengths: Vec<u32>,
}

impl Plan {
    pub fn new(batch_count: usize, assignment: Vec<usize>, lengths: Vec<u32>) -> Self {
        Plan {
            batch_count,
            assignment,
            lengths,
        }
    }

    /// Every user in its own batch, in user order.
    pub fn singletons(lengths: Vec<u32>) -> Self {
        let m = lengths.len();
        Plan::new(m, (0..m).collect(), lengths)
    }

    /// Users of each batch, in user order.
    pub fn batches(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.batch_count];
        for (m, &n) in self.assignment.iter().enumerate() {
            if n < self.batch_count {
                out[n].push(m);
            }
        }
        out
    }

    /// Relabels batches by first appearance in user order.
    pub fn canonicalized(&self) -> Plan {
        let mut relabel = vec![usize::MAX; self.batch_count];
        let mut next = 0;
        let assignment = self
            .assignment
            .iter()
            .map(|&n| {
                if relabel[n] == usize::MAX {
                    relabel[n] = next;
                    next += 1;
                }
                relabel[n]
            })
            .collect();
        Plan::new(self.batch_count, assignment, self.lengths.clone())
    }
}

/// Constraint families a plan can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Each user belongs to exactly one batch with a valid index.
    Assignment,
    /// Draft lengths lie in `1..=l_ub`.
    LengthBound,
    /// Every declared batch holds at least one user.
    EmptyBatch,
    /// Batch prefix maxima stay within `i_ub`.
    PrefixBound,
    /// Stage durations cover verification and stay within `t_ub`.
    StageDuration,
    /// Span stays within `s_ub`.
    SpanBound,
    /// Verifier parameters plus batch KV cache fit in memory.
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    /// Offending user indices (assignment, length) or batch indices (everything else).
    pub indices: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overshoot_bytes: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {:?}: {}", self.kind, self.indices, self.detail)
    }
}

/// Result of [`check_feasible`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub violations: Vec<Violation>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ConstraintKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

/// Derived quantities of an evaluated plan. Times in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub batch_sizes: Vec<usize>,
    pub max_lengths: Vec<u32>,
    pub max_prefix: Vec<u64>,
    pub draft_ready: Vec<f64>,
    pub verify_latency: Vec<f64>,
    pub stage_duration: Vec<f64>,
    pub user_draft_time: Vec<f64>,
    pub span: f64,
    pub utility: f64,
    /// Tokens per ms.
    pub throughput: f64,
    /// Tokens per second.
    pub throughput_tps: f64,
}

/// Local drafting time for `len` tokens: drafting is serial on the device.
pub fn draft_time(user: &UserProfile, len: u32, draft_dims: &crate::cost_model::ModelDims) -> f64 {
    len as f64 * user.draft_step_ms(draft_dims)
}

/// Verification latency of a batch of `size` requests padded to `(max_len, max_prefix)`.
pub fn batch_verify_latency(
    inst: &ProblemInstance,
    size: usize,
    max_len: u32,
    max_prefix: u64,
) -> f64 {
    step_latency(
        size as u64,
        verify_flops(max_len, max_prefix, &inst.verify_dims),
        &inst.verify_coeffs,
    )
}

/// Least span compatible with the stage constraints:
/// `max(sum t^v, max_n (t_n^d + t_n^v))`.
pub fn minimal_span(draft_ready: &[f64], verify_latency: &[f64]) -> Result<f64> {
    if draft_ready.is_empty() {
        return Err(Error::Domain(
            "minimal_span needs at least one batch".into(),
        ));
    }
    if draft_ready.len() != verify_latency.len() {
        return Err(Error::Domain(format!(
            "{} draft times but {} verify latencies",
            draft_ready.len(),
            verify_latency.len()
        )));
    }
    Ok(span_of(draft_ready, verify_latency))
}

pub(crate) fn span_of(draft_ready: &[f64], verify_latency: &[f64]) -> f64 {
    let total: f64 = verify_latency.iter().sum();
    draft_ready
        .iter()
        .zip(verify_latency)
        .map(|(d, v)| d + v)
        .fold(total, f64::max)
}

/// Stage durations for a given span: `T_n = t_n^v` for all but the last
/// stage, which absorbs the slack.
pub fn canonical_stage_durations(verify_latency: &[f64], span: f64) -> Vec<f64> {
    let mut out = verify_latency.to_vec();
    if let Some((last, head)) = out.split_last_mut() {
        *last = span - head.iter().sum::<f64>();
    }
    out
}

fn structural_violations(plan: &Plan, inst: &ProblemInstance) -> Vec<Violation> {
    let m = inst.user_count();
    let mut out = Vec::new();
    if plan.batch_count == 0 {
        out.push(Violation {
            kind: ConstraintKind::Assignment,
            indices: vec![],
            overshoot_bytes: None,
            detail: "batch count must be at least 1".into(),
        });
        return out;
    }
    if plan.assignment.len() != m || plan.lengths.len() != m {
        out.push(Violation {
            kind: ConstraintKind::Assignment,
            indices: vec![],
            overshoot_bytes: None,
            detail: format!(
                "plan covers {} assignments and {} lengths for {m} users",
                plan.assignment.len(),
                plan.lengths.len()
            ),
        });
        return out;
    }
    let bad: Vec<usize> = (0..m)
        .filter(|&k| plan.assignment[k] >= plan.batch_count)
        .collect();
    if !bad.is_empty() {
        out.push(Violation {
            kind: ConstraintKind::Assignment,
            indices: bad,
            overshoot_bytes: None,
            detail: format!("batch index outside 0..{}", plan.batch_count),
        });
    }
    let l_ub = inst.bounds.l_ub;
    let bad: Vec<usize> = (0..m)
        .filter(|&k| plan.lengths[k] == 0 || plan.lengths[k] > l_ub)
        .collect();
    if !bad.is_empty() {
        out.push(Violation {
            kind: ConstraintKind::LengthBound,
            indices: bad,
            overshoot_bytes: None,
            detail: format!("draft length outside 1..={l_ub}"),
        });
    }
    let mut sizes = vec![0usize; plan.batch_count];
    for &n in plan.assignment.iter().filter(|&&n| n < plan.batch_count) {
        sizes[n] += 1;
    }
    let empty: Vec<usize> = (0..plan.batch_count).filter(|&n| sizes[n] == 0).collect();
    if !empty.is_empty() {
        out.push(Violation {
            kind: ConstraintKind::EmptyBatch,
            indices: empty,
            overshoot_bytes: None,
            detail: "batch has no users".into(),
        });
    }
    out
}

/// Metrics without bound or memory checks. The plan must be structurally valid.
pub(crate) fn evaluate_unchecked(plan: &Plan, inst: &ProblemInstance) -> PlanMetrics {
    let n = plan.batch_count;
    let mut batch_sizes = vec![0usize; n];
    let mut max_lengths = vec![0u32; n];
    let mut max_prefix = vec![0u64; n];
    let mut draft_ready = vec![0.0f64; n];
    let mut user_draft_time = Vec::with_capacity(inst.user_count());
    let mut utility = 0.0;
    for (m, user) in inst.users.iter().enumerate() {
        let b = plan.assignment[m];
        let len = plan.lengths[m];
        let tau = draft_time(user, len, &inst.draft_dims);
        user_draft_time.push(tau);
        batch_sizes[b] += 1;
        max_lengths[b] = max_lengths[b].max(len);
        max_prefix[b] = max_prefix[b].max(user.prefix_len);
        draft_ready[b] = draft_ready[b].max(tau + user.comm_latency_ms);
        utility += expected_accepted_unchecked(len, user.accept_rate);
    }
    let verify_latency: Vec<f64> = (0..n)
        .map(|k| batch_verify_latency(inst, batch_sizes[k], max_lengths[k], max_prefix[k]))
        .collect();
    let span = span_of(&draft_ready, &verify_latency);
    let stage_duration = canonical_stage_durations(&verify_latency, span);
    let throughput = utility / span;
    PlanMetrics {
        batch_sizes,
        max_lengths,
        max_prefix,
        draft_ready,
        verify_latency,
        stage_duration,
        user_draft_time,
        span,
        utility,
        throughput,
        throughput_tps: 1000.0 * throughput,
    }
}

fn quantitative_violations(inst: &ProblemInstance, metrics: &PlanMetrics) -> Vec<Violation> {
    let mut out = Vec::new();
    let memory = inst.memory();
    for (n, (&b, &prefix)) in metrics
        .batch_sizes
        .iter()
        .zip(&metrics.max_prefix)
        .enumerate()
    {
        if let Some(over) = memory.overshoot(b as u64, prefix, &inst.verify_dims) {
            out.push(Violation {
                kind: ConstraintKind::Memory,
                indices: vec![n],
                overshoot_bytes: Some(over),
                detail: format!(
                    "batch of {b} at prefix {prefix} needs {} B, cap is {} B",
                    memory.batch_bytes(b as u64, prefix, &inst.verify_dims),
                    memory.cap_bytes
                ),
            });
        }
        if prefix > inst.bounds.i_ub {
            out.push(Violation {
                kind: ConstraintKind::PrefixBound,
                indices: vec![n],
                overshoot_bytes: None,
                detail: format!("prefix maximum {prefix} exceeds {}", inst.bounds.i_ub),
            });
        }
    }
    let long: Vec<usize> = metrics
        .stage_duration
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > inst.bounds.t_ub)
        .map(|(n, _)| n)
        .collect();
    if !long.is_empty() {
        out.push(Violation {
            kind: ConstraintKind::StageDuration,
            indices: long,
            overshoot_bytes: None,
            detail: format!("stage duration exceeds {} ms", inst.bounds.t_ub),
        });
    }
    if metrics.span > inst.bounds.s_ub {
        out.push(Violation {
            kind: ConstraintKind::SpanBound,
            indices: vec![],
            overshoot_bytes: None,
            detail: format!("span {} ms exceeds {} ms", metrics.span, inst.bounds.s_ub),
        });
    }
    out
}

/// Every violated constraint of `plan`; an empty list means feasible.
pub fn check_feasible(plan: &Plan, inst: &ProblemInstance) -> Feasibility {
    let mut violations = structural_violations(plan, inst);
    if violations.is_empty() {
        let metrics = evaluate_unchecked(plan, inst);
        violations = quantitative_violations(inst, &metrics);
    }
    Feasibility { violations }
}

/// Evaluates a plan, failing on structural errors, memory overflow or bound violations.
pub fn evaluate(plan: &Plan, inst: &ProblemInstance) -> Result<PlanMetrics> {
    let structural = structural_violations(plan, inst);
    if !structural.is_empty() {
        return Err(Error::InvalidPlan(
            structural
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let metrics = evaluate_unchecked(plan, inst);
    let violations = quantitative_violations(inst, &metrics);
    if violations.is_empty() {
        Ok(metrics)
    } else {
        Err(Error::Infeasible(violations))
    }
}
