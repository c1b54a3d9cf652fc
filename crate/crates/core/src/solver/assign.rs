//! Batch assignment at fixed draft lengths: minimize the span by depth-first
//! branch and bound over user-to-batch choices.
//!
//! Users are visited grouped by equivalence class (identical profile and draft
//! length). Two symmetry rules prune the tree: a new batch may only be opened
//! as the next unused label, and within a class batch labels are
//! nondecreasing. Both rules together keep one representative per orbit.

use std::time::Instant;

use super::{Budget, SolverConfig};
use crate::cost_model::verify_flops;
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::schedule::{batch_verify_latency, draft_time, Plan};

const REL_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct AssignmentOutcome {
    pub plan: Plan,
    pub span: f64,
    /// False when the node or time budget stopped the search early.
    pub exact: bool,
    /// A valid lower bound on the optimal span.
    pub lower_bound: f64,
    pub nodes: u64,
}

#[derive(Clone, Copy, Default)]
struct BatchState {
    size: usize,
    max_len: u32,
    max_prefix: u64,
    ready: f64,
    verify: f64,
}

struct Search<'a> {
    inst: &'a ProblemInstance,
    batch_count: usize,
    order: Vec<usize>,
    same_class_as_prev: Vec<bool>,
    lengths: &'a [u32],
    ready: Vec<f64>,
    /// Suffix sums of `marginal` in visiting order.
    marginal_suffix: Vec<f64>,
    /// Suffix maxima of `ready + marginal + beta^v` in visiting order.
    precedence_suffix: Vec<f64>,
    batches: Vec<BatchState>,
    chosen: Vec<usize>,
    opened: usize,
    best_span: f64,
    best: Option<Vec<usize>>,
    budget: Budget,
}

fn class_key(inst: &ProblemInstance, m: usize, len: u32) -> [u64; 6] {
    let u = &inst.users[m];
    [
        u.prefix_len,
        u.accept_rate.to_bits(),
        u.comm_latency_ms.to_bits(),
        u.draft_coeffs.c.to_bits(),
        u.draft_coeffs.beta.to_bits(),
        len as u64,
    ]
}

/// Visiting order that groups identical users, classes ordered by first appearance.
pub(crate) fn class_order(inst: &ProblemInstance, lengths: &[u32]) -> (Vec<usize>, Vec<bool>) {
    let m = inst.user_count();
    let keys: Vec<_> = (0..m).map(|k| class_key(inst, k, lengths[k])).collect();
    let mut class_of = vec![0usize; m];
    let mut reps: Vec<[u64; 6]> = Vec::new();
    for k in 0..m {
        class_of[k] = match reps.iter().position(|r| *r == keys[k]) {
            Some(c) => c,
            None => {
                reps.push(keys[k]);
                reps.len() - 1
            }
        };
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&k| class_of[k]);
    let same = (0..m)
        .map(|p| p > 0 && class_of[order[p]] == class_of[order[p - 1]])
        .collect();
    (order, same)
}

impl<'a> Search<'a> {
    fn lower_bound(&self, depth: usize) -> f64 {
        let opened_verify: f64 = self.batches[..self.opened].iter().map(|b| b.verify).sum();
        let empties = (self.batch_count - self.opened) as f64;
        let sum_bound =
            opened_verify + self.marginal_suffix[depth] + empties * self.inst.verify_coeffs.beta;
        let committed = self.batches[..self.opened]
            .iter()
            .map(|b| b.ready + b.verify)
            .fold(0.0, f64::max);
        sum_bound.max(committed).max(self.precedence_suffix[depth])
    }

    fn threshold(&self) -> f64 {
        self.best_span * (1.0 - REL_EPS)
    }

    fn dfs(&mut self, depth: usize) {
        if self.budget.exhausted() {
            return;
        }
        let m = self.order.len();
        if depth == m {
            let total: f64 = self.batches.iter().map(|b| b.verify).sum();
            let span = self
                .batches
                .iter()
                .map(|b| b.ready + b.verify)
                .fold(total, f64::max);
            if span < self.threshold() {
                self.best_span = span;
                self.best = Some(self.chosen.clone());
            }
            return;
        }
        let user = self.order[depth];
        let profile = &self.inst.users[user];
        let len = self.lengths[user];
        let lo = if self.same_class_as_prev[depth] {
            self.chosen[self.order[depth - 1]]
        } else {
            0
        };
        let hi = (self.opened + 1).min(self.batch_count);
        let remaining_after = m - depth - 1;
        let memory = self.inst.memory();
        for b in lo..hi {
            let opening = b == self.opened;
            let opened_after = self.opened + usize::from(opening);
            if self.batch_count - opened_after > remaining_after {
                continue;
            }
            let saved = self.batches[b];
            let size = saved.size + 1;
            let max_prefix = saved.max_prefix.max(profile.prefix_len);
            if !memory.fits(size as u64, max_prefix, &self.inst.verify_dims) {
                continue;
            }
            let max_len = saved.max_len.max(len);
            self.batches[b] = BatchState {
                size,
                max_len,
                max_prefix,
                ready: saved.ready.max(self.ready[user]),
                verify: batch_verify_latency(self.inst, size, max_len, max_prefix),
            };
            self.chosen[user] = b;
            let prev_opened = self.opened;
            self.opened = opened_after;
            self.budget.tick();
            if self.lower_bound(depth + 1) < self.threshold() {
                self.dfs(depth + 1);
            }
            self.opened = prev_opened;
            self.batches[b] = saved;
        }
    }
}

/// Span-minimizing assignment of users to exactly `batch_count` nonempty
/// batches at fixed `lengths`. The returned plan is relabelled by first
/// appearance; among equal spans the first assignment in search order wins.
pub fn solve_x(
    inst: &ProblemInstance,
    batch_count: usize,
    lengths: &[u32],
    cfg: &SolverConfig,
) -> Result<AssignmentOutcome> {
    let m = inst.user_count();
    if lengths.len() != m {
        return Err(Error::InvalidPlan(format!(
            "{} lengths for {m} users",
            lengths.len()
        )));
    }
    if let Some(k) = lengths.iter().position(|&l| l == 0 || l > inst.bounds.l_ub) {
        return Err(Error::InvalidPlan(format!(
            "user {k} draft length {} outside 1..={}",
            lengths[k], inst.bounds.l_ub
        )));
    }
    let min_n = if cfg.allow_single_batch { 1 } else { 2 };
    if batch_count < min_n || batch_count > m {
        return Err(Error::Domain(format!(
            "batch count {batch_count} outside {min_n}..={m}"
        )));
    }

    let (order, same_class_as_prev) = class_order(inst, lengths);
    let ready: Vec<f64> = (0..m)
        .map(|k| {
            let u = &inst.users[k];
            draft_time(u, lengths[k], &inst.draft_dims) + u.comm_latency_ms
        })
        .collect();
    // Least verification time each user adds to whichever batch it joins.
    let marginal: Vec<f64> = (0..m)
        .map(|k| {
            inst.verify_coeffs.c
                * verify_flops(lengths[k], inst.users[k].prefix_len, &inst.verify_dims)
        })
        .collect();
    let mut marginal_suffix = vec![0.0f64; m + 1];
    let mut precedence_suffix = vec![0.0f64; m + 1];
    for p in (0..m).rev() {
        let k = order[p];
        marginal_suffix[p] = marginal_suffix[p + 1] + marginal[k];
        precedence_suffix[p] =
            precedence_suffix[p + 1].max(ready[k] + marginal[k] + inst.verify_coeffs.beta);
    }

    let mut search = Search {
        inst,
        batch_count,
        order,
        same_class_as_prev,
        lengths,
        ready,
        marginal_suffix,
        precedence_suffix,
        batches: vec![BatchState::default(); batch_count],
        chosen: vec![0; m],
        opened: 0,
        best_span: f64::INFINITY,
        best: None,
        budget: Budget::new(
            cfg.search_node_budget,
            cfg.time_budget_ms.map(|ms| (Instant::now(), ms)),
        ),
    };
    let greedy = greedy_assignment(&search);
    if let Some((span, _)) = &greedy {
        // Seed the bound above the heuristic so the first equal-span leaf in
        // search order is still recorded.
        search.best_span = span * (1.0 + 1e-9);
    }
    let root_bound = search.lower_bound(0);
    search.dfs(0);

    let exact = !search.budget.exhausted();
    let found = match search.best.take() {
        Some(assignment) => Some((search.best_span, assignment)),
        // a truncated search that never beat the heuristic falls back to it
        None if !exact => greedy,
        None => None,
    };
    match found {
        Some((span, assignment)) => {
            let plan = Plan::new(batch_count, assignment, lengths.to_vec()).canonicalized();
            Ok(AssignmentOutcome {
                plan,
                span,
                exact,
                lower_bound: if exact { span } else { root_bound },
                nodes: search.budget.nodes(),
            })
        }
        None => Err(Error::NoFeasiblePlan(format!(
            "no memory-feasible assignment into {batch_count} batches"
        ))),
    }
}

/// Quick heuristic: slowest drafters first, each into the feasible batch
/// that currently finishes earliest, empty batches filled first. Returns
/// the span and the assignment.
fn greedy_assignment(search: &Search<'_>) -> Option<(f64, Vec<usize>)> {
    let inst = search.inst;
    let n = search.batch_count;
    let m = inst.user_count();
    let mut users: Vec<usize> = (0..m).collect();
    users.sort_by(|&a, &b| search.ready[b].total_cmp(&search.ready[a]));
    let mut batches = vec![BatchState::default(); n];
    let mut assignment = vec![0; m];
    let memory = inst.memory();
    for (placed, &k) in users.iter().enumerate() {
        let u = &inst.users[k];
        let need_fill = batches.iter().filter(|b| b.size == 0).count() >= m - placed;
        let mut best: Option<(usize, f64)> = None;
        for (b, st) in batches.iter().enumerate() {
            if need_fill && st.size > 0 {
                continue;
            }
            let size = st.size + 1;
            let max_prefix = st.max_prefix.max(u.prefix_len);
            if !memory.fits(size as u64, max_prefix, &inst.verify_dims) {
                continue;
            }
            let verify =
                batch_verify_latency(inst, size, st.max_len.max(search.lengths[k]), max_prefix);
            let cost = verify + st.ready.max(search.ready[k]);
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((b, cost));
            }
        }
        let (b, _) = best?;
        assignment[k] = b;
        let st = &mut batches[b];
        st.size += 1;
        st.max_len = st.max_len.max(search.lengths[k]);
        st.max_prefix = st.max_prefix.max(u.prefix_len);
        st.ready = st.ready.max(search.ready[k]);
        st.verify = batch_verify_latency(inst, st.size, st.max_len, st.max_prefix);
    }
    let total: f64 = batches.iter().map(|b| b.verify).sum();
    Some((
        batches
            .iter()
            .map(|b| b.ready + b.verify)
            .fold(total, f64::max),
        assignment,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{default_instance, heterogeneous_case};
    use crate::schedule::evaluate;

    /// Every assignment of `m` users into exactly `n` nonempty labelled batches.
    fn all_assignments(m: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = vec![0usize; m];
        loop {
            let mut used = vec![false; n];
            cur.iter().for_each(|&b| used[b] = true);
            if used.iter().all(|&u| u) {
                out.push(cur.clone());
            }
            let mut k = 0;
            loop {
                if k == m {
                    return out;
                }
                cur[k] += 1;
                if cur[k] < n {
                    break;
                }
                cur[k] = 0;
                k += 1;
            }
        }
    }

    fn brute_min_span(inst: &ProblemInstance, n: usize, lengths: &[u32]) -> Option<f64> {
        all_assignments(inst.user_count(), n)
            .into_iter()
            .filter_map(|a| evaluate(&Plan::new(n, a, lengths.to_vec()), inst).ok())
            .map(|m| m.span)
            .min_by(f64::total_cmp)
    }

    #[test]
    fn balanced_split_for_defaults() {
        let inst = default_instance(6);
        let out = solve_x(&inst, 2, &[3; 6], &SolverConfig::default()).unwrap();
        assert!(out.exact);
        assert!((out.span - 205.030_289_108_818).abs() < 1e-9);
        let sizes = evaluate(&out.plan, &inst).unwrap().batch_sizes;
        assert_eq!(sizes, vec![3, 3]);
        assert_eq!(out.plan.assignment, vec![0, 0, 0, 1, 1, 1]);
        let brute = brute_min_span(&inst, 2, &[3; 6]).unwrap();
        assert!((out.span - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn two_users_two_batches_is_forced() {
        let inst = default_instance(2);
        for l in [1, 7, 20] {
            let out = solve_x(&inst, 2, &[l, l], &SolverConfig::default()).unwrap();
            assert_eq!(out.plan.assignment, vec![0, 1]);
        }
    }

    #[test]
    fn heterogeneous_latency_matches_enumeration() {
        let inst = heterogeneous_case(3).unwrap();
        for n in 2..=6 {
            for lengths in [[7u32; 6], [1, 3, 5, 7, 9, 11], [4, 4, 2, 2, 1, 1]] {
                let out = solve_x(&inst, n, &lengths, &SolverConfig::default()).unwrap();
                let brute = brute_min_span(&inst, n, &lengths).unwrap();
                assert!(
                    (out.span - brute).abs() <= 1e-12 * brute,
                    "n={n} {lengths:?}: {} vs {brute}",
                    out.span
                );
                let metrics = evaluate(&out.plan, &inst).unwrap();
                assert!((metrics.span - out.span).abs() <= 1e-12 * brute);
            }
        }
    }

    #[test]
    fn mixed_prefixes_match_enumeration() {
        let inst = heterogeneous_case(1).unwrap();
        let lengths = [2, 6, 3, 3, 8, 1];
        for n in 2..=6 {
            let out = solve_x(&inst, n, &lengths, &SolverConfig::default()).unwrap();
            let brute = brute_min_span(&inst, n, &lengths).unwrap();
            assert!((out.span - brute).abs() <= 1e-12 * brute);
        }
    }

    #[test]
    fn memory_limits_batch_sizes() {
        // Cap sized for exactly two requests per batch.
        let mut inst = default_instance(6);
        inst.mem_cap_bytes = inst.memory().batch_bytes(2, 512, &inst.verify_dims);
        assert!(matches!(
            solve_x(&inst, 2, &[3; 6], &SolverConfig::default()),
            Err(Error::NoFeasiblePlan(_))
        ));
        let out = solve_x(&inst, 3, &[3; 6], &SolverConfig::default()).unwrap();
        assert_eq!(
            evaluate(&out.plan, &inst).unwrap().batch_sizes,
            vec![2, 2, 2]
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let inst = default_instance(4);
        let cfg = SolverConfig::default();
        assert!(solve_x(&inst, 1, &[3; 4], &cfg).is_err());
        assert!(solve_x(&inst, 5, &[3; 4], &cfg).is_err());
        assert!(solve_x(&inst, 2, &[3; 3], &cfg).is_err());
        assert!(solve_x(&inst, 2, &[0, 3, 3, 3], &cfg).is_err());
        let single = SolverConfig {
            allow_single_batch: true,
            ..cfg
        };
        let out = solve_x(&inst, 1, &[3; 4], &single).unwrap();
        assert_eq!(out.plan.assignment, vec![0; 4]);
    }

    #[test]
    fn tiny_budget_is_flagged() {
        let inst = heterogeneous_case(3).unwrap();
        let cfg = SolverConfig {
            search_node_budget: 3,
            ..SolverConfig::default()
        };
        let out = solve_x(&inst, 3, &[7; 6], &cfg).unwrap();
        assert!(!out.exact);
        assert!(out.lower_bound <= out.span);
        let metrics = evaluate(&out.plan, &inst).unwrap();
        assert!((metrics.span - out.span).abs() <= 1e-9 * out.span);
        let full = solve_x(&inst, 3, &[7; 6], &SolverConfig::default()).unwrap();
        assert!(full.span <= out.span);
        assert!(out.lower_bound <= full.span);
    }
}
