//! Draft lengths at a fixed assignment: maximize `U(l) / S(l)` with the
//! Dinkelbach iteration, each step solving `max U - q S` exactly.
//!
//! The exact inner step sweeps the candidate values `d` of the largest
//! draft-plus-verify completion `max_n (t_n^d + t_n^v)`. Every such value is
//! some `tau_m^d(l) + tau_m^c + t_n^v(L)` with `l <= L`. With `d` fixed the
//! batches only interact through `A = sum_n t_n^v(L_n)`: each batch picks a
//! padded length `L_n` worth `v_n(L_n)` tokens (each member drafting as long
//! as `d` allows) at cost `t_n^v(L_n)`, and the score is
//! `sum v_n - q max(A, d)`. That is a multiple-choice knapsack, solved by
//! merging per-batch Pareto frontiers of (cost, value).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Budget, SolverConfig};
use crate::cost_model::expected_accepted_unchecked;
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::schedule::{batch_verify_latency, evaluate, Plan, PlanMetrics};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthOutcome {
    pub plan: Plan,
    pub metrics: PlanMetrics,
    /// Dinkelbach ratios, starting from the input plan's throughput (tokens/ms).
    pub q_trace: Vec<f64>,
    /// `U - q S` of each inner solution at the ratio it was solved for.
    pub residual_trace: Vec<f64>,
    /// False if any inner step fell back to coordinate descent.
    pub exact: bool,
}

pub(crate) struct LengthContext<'a> {
    inst: &'a ProblemInstance,
    batches: Vec<Vec<usize>>,
    l_ub: u32,
    /// `verify[n][L - 1]`: verification latency of batch `n` padded to `L`.
    verify: Vec<Vec<f64>>,
    step: Vec<f64>,
    comm: Vec<f64>,
    /// `utility[m][l]` for `l` in `0..=l_ub`; index 0 is unused.
    utility: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
struct Choice {
    weight: f64,
    value: f64,
    len: u32,
}

#[derive(Clone, Copy)]
struct Node {
    weight: f64,
    value: f64,
    parent: u32,
    choice: u32,
}

impl<'a> LengthContext<'a> {
    pub(crate) fn new(inst: &'a ProblemInstance, plan: &Plan) -> Self {
        let l_ub = inst.bounds.l_ub;
        let batches = plan.batches();
        let verify = batches
            .iter()
            .map(|members| {
                let prefix = members
                    .iter()
                    .map(|&m| inst.users[m].prefix_len)
                    .max()
                    .unwrap_or(0);
                (1..=l_ub)
                    .map(|len| batch_verify_latency(inst, members.len(), len, prefix))
                    .collect()
            })
            .collect();
        let step = inst
            .users
            .iter()
            .map(|u| u.draft_step_ms(&inst.draft_dims))
            .collect();
        let comm = inst.users.iter().map(|u| u.comm_latency_ms).collect();
        let utility = inst
            .users
            .iter()
            .map(|u| {
                (0..=l_ub)
                    .map(|l| expected_accepted_unchecked(l, u.accept_rate))
                    .collect()
            })
            .collect();
        LengthContext {
            inst,
            batches,
            l_ub,
            verify,
            step,
            comm,
            utility,
        }
    }

    /// Same arithmetic as plan evaluation, so breakpoints compare exactly.
    #[inline]
    fn ready(&self, m: usize, len: u32) -> f64 {
        len as f64 * self.step[m] + self.comm[m]
    }

    #[inline]
    fn verify_at(&self, n: usize, len: u32) -> f64 {
        self.verify[n][len as usize - 1]
    }

    /// Largest `l <= cap` with `ready(m, l) + verify <= limit`, or 0.
    fn longest_within(&self, m: usize, cap: u32, verify: f64, limit: f64) -> u32 {
        let fits = |l: u32| self.ready(m, l) + verify <= limit;
        let mut l = if self.step[m] > 0.0 {
            let est = ((limit - verify - self.comm[m]) / self.step[m]).floor();
            if est.is_nan() || est < 0.0 {
                0
            } else {
                (est as u64).min(cap as u64) as u32
            }
        } else {
            cap
        };
        while l > 0 && !fits(l) {
            l -= 1;
        }
        while l < cap && fits(l + 1) {
            l += 1;
        }
        l
    }

    fn score(&self, lengths: &[u32], q: f64) -> (f64, f64, f64) {
        let mut utility = 0.0;
        let mut ready = vec![0.0f64; self.batches.len()];
        let mut padded = vec![0u32; self.batches.len()];
        for (n, members) in self.batches.iter().enumerate() {
            for &m in members {
                utility += self.utility[m][lengths[m] as usize];
                ready[n] = ready[n].max(self.ready(m, lengths[m]));
                padded[n] = padded[n].max(lengths[m]);
            }
        }
        let verify: Vec<f64> = (0..self.batches.len())
            .map(|n| self.verify_at(n, padded[n]))
            .collect();
        let span = crate::schedule::span_of(&ready, &verify);
        (utility - q * span, utility, span)
    }

    /// Pareto-pruned choices for batch `n` under completion cap `d`.
    fn batch_choices(&self, n: usize, d: f64) -> Vec<Choice> {
        let members = &self.batches[n];
        let mut raw = Vec::with_capacity(self.l_ub as usize);
        'len: for len in 1..=self.l_ub {
            let verify = self.verify_at(n, len);
            if verify > self.inst.bounds.t_ub {
                continue;
            }
            let mut value = 0.0;
            for &m in members {
                let l = self.longest_within(m, len, verify, d);
                if l == 0 {
                    continue 'len;
                }
                value += self.utility[m][l as usize];
            }
            raw.push(Choice {
                weight: verify,
                value,
                len,
            });
        }
        raw.sort_by(|a, b| {
            a.weight
                .total_cmp(&b.weight)
                .then(b.value.total_cmp(&a.value))
        });
        let mut out: Vec<Choice> = Vec::with_capacity(raw.len());
        for c in raw {
            if out.last().is_none_or(|last| c.value > last.value) {
                out.push(c);
            }
        }
        out
    }

    fn completion_candidates(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (n, members) in self.batches.iter().enumerate() {
            let mut seen: Vec<(f64, f64)> = Vec::new();
            for &m in members {
                let key = (self.step[m], self.comm[m]);
                if seen.contains(&key) {
                    continue;
                }
                seen.push(key);
                for l in 1..=self.l_ub {
                    let r = self.ready(m, l);
                    for len in l..=self.l_ub {
                        out.push(r + self.verify_at(n, len));
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Exact `max_l U(l) - q S(l)` over `l in 1..=l_ub`, never worse than
    /// `incumbent`. Returns the maximizer and whether the budget ran out.
    pub(crate) fn maximize(
        &self,
        q: f64,
        incumbent: &[u32],
        cfg: &SolverConfig,
    ) -> (Vec<u32>, bool) {
        let mut budget = Budget::new(
            cfg.search_node_budget,
            cfg.time_budget_ms.map(|ms| (Instant::now(), ms)),
        );
        match self.sweep(q, incumbent, &mut budget) {
            Some(best) => (best, false),
            None => (self.coordinate_descent(q, incumbent, cfg.l_init), true),
        }
    }

    fn sweep(&self, q: f64, incumbent: &[u32], budget: &mut Budget) -> Option<Vec<u32>> {
        let n_batches = self.batches.len();
        let s_ub = self.inst.bounds.s_ub;
        let (mut best_val, _, _) = self.score(incumbent, q);
        let mut best: Option<(f64, Vec<u32>)> = None;
        let max_utility: f64 = (0..self.inst.user_count())
            .map(|m| self.utility[m][self.l_ub as usize])
            .sum();

        for d in self.completion_candidates() {
            if d > s_ub || max_utility - q * d <= best_val {
                // Candidates ascend, so the bound only gets worse.
                break;
            }
            let choices: Vec<Vec<Choice>> =
                (0..n_batches).map(|n| self.batch_choices(n, d)).collect();
            if choices.iter().any(|c| c.is_empty()) {
                continue;
            }
            let best_value: Vec<f64> = choices
                .iter()
                .map(|c| c.iter().map(|x| x.value).fold(f64::MIN, f64::max))
                .collect();
            let least_weight: Vec<f64> = choices
                .iter()
                .map(|c| c.iter().map(|x| x.weight).fold(f64::INFINITY, f64::min))
                .collect();
            let mut rest_value = vec![0.0; n_batches + 1];
            let mut rest_weight = vec![0.0; n_batches + 1];
            for n in (0..n_batches).rev() {
                rest_value[n] = rest_value[n + 1] + best_value[n];
                rest_weight[n] = rest_weight[n + 1] + least_weight[n];
            }
            if rest_value[0] - q * d.max(rest_weight[0]) <= best_val {
                continue;
            }

            let mut levels: Vec<Vec<Node>> = Vec::with_capacity(n_batches);
            let mut frontier = vec![Node {
                weight: 0.0,
                value: 0.0,
                parent: 0,
                choice: 0,
            }];
            for n in 0..n_batches {
                let mut next = Vec::with_capacity(frontier.len() * choices[n].len());
                for (p, node) in frontier.iter().enumerate() {
                    for (c, ch) in choices[n].iter().enumerate() {
                        if budget.tick() {
                            return None;
                        }
                        let weight = node.weight + ch.weight;
                        let value = node.value + ch.value;
                        let optimistic =
                            value + rest_value[n + 1] - q * d.max(weight + rest_weight[n + 1]);
                        if weight + rest_weight[n + 1] > s_ub || optimistic <= best_val {
                            continue;
                        }
                        next.push(Node {
                            weight,
                            value,
                            parent: p as u32,
                            choice: c as u32,
                        });
                    }
                }
                next.sort_by(|a, b| {
                    a.weight
                        .total_cmp(&b.weight)
                        .then(b.value.total_cmp(&a.value))
                });
                let mut pruned: Vec<Node> = Vec::with_capacity(next.len());
                for node in next {
                    if pruned.last().is_none_or(|last| node.value > last.value) {
                        pruned.push(node);
                    }
                }
                levels.push(std::mem::replace(&mut frontier, pruned));
                if frontier.is_empty() {
                    break;
                }
            }
            if frontier.is_empty() {
                continue;
            }
            let (idx, val) = frontier
                .iter()
                .enumerate()
                .map(|(i, node)| (i, node.value - q * d.max(node.weight)))
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| {
                    if x.1 > acc.1 {
                        x
                    } else {
                        acc
                    }
                });
            if val <= best_val {
                continue;
            }
            // Walk back-pointers to recover each batch's padded length.
            let mut padded = vec![0u32; n_batches];
            let mut at = idx;
            let mut node = frontier[at];
            for n in (0..n_batches).rev() {
                padded[n] = choices[n][node.choice as usize].len;
                at = node.parent as usize;
                if n > 0 {
                    node = levels[n][at];
                }
            }
            let lengths = self.fill_lengths(&padded, d);
            // Scores never fall below the frontier estimate; tightening only helps.
            let (actual, _, _) = self.score(&lengths, q);
            best_val = actual.max(val);
            best = Some((actual, lengths));
        }
        Some(best.map_or_else(|| incumbent.to_vec(), |(_, l)| l))
    }

    fn fill_lengths(&self, padded: &[u32], d: f64) -> Vec<u32> {
        let mut lengths = vec![0u32; self.inst.user_count()];
        for (n, members) in self.batches.iter().enumerate() {
            let verify = self.verify_at(n, padded[n]);
            for &m in members {
                lengths[m] = self.longest_within(m, padded[n], verify, d);
            }
        }
        lengths
    }

    /// Best lengths for a fixed padded-length vector: the span is one of the
    /// completion breakpoints or the verification sum.
    pub(crate) fn best_for_padded(&self, padded: &[u32], q: f64) -> Option<(f64, Vec<u32>)> {
        let verify_sum: f64 = (0..self.batches.len())
            .map(|n| self.verify_at(n, padded[n]))
            .sum();
        let mut candidates = vec![verify_sum];
        for (n, members) in self.batches.iter().enumerate() {
            let verify = self.verify_at(n, padded[n]);
            for &m in members {
                for l in 1..=padded[n] {
                    let s = self.ready(m, l) + verify;
                    if s >= verify_sum {
                        candidates.push(s);
                    }
                }
            }
        }
        let mut best: Option<(f64, Vec<u32>)> = None;
        for s in candidates {
            if s > self.inst.bounds.s_ub {
                continue;
            }
            let mut lengths = vec![0u32; self.inst.user_count()];
            let mut ok = true;
            for (n, members) in self.batches.iter().enumerate() {
                let verify = self.verify_at(n, padded[n]);
                for &m in members {
                    lengths[m] = self.longest_within(m, padded[n], verify, s);
                    ok &= lengths[m] > 0;
                }
            }
            if !ok {
                continue;
            }
            let (val, _, _) = self.score(&lengths, q);
            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                best = Some((val, lengths));
            }
        }
        best
    }

    /// Cyclic exact 1-D updates of each batch's padded length.
    fn coordinate_descent(&self, q: f64, incumbent: &[u32], l_init: u32) -> Vec<u32> {
        let n_batches = self.batches.len();
        let (mut best_val, _, _) = self.score(incumbent, q);
        let mut best = incumbent.to_vec();
        let current_padded: Vec<u32> = self
            .batches
            .iter()
            .map(|members| members.iter().map(|&m| incumbent[m]).max().unwrap_or(1))
            .collect();
        let starts = [
            vec![1; n_batches],
            vec![l_init.clamp(1, self.l_ub); n_batches],
            vec![self.l_ub; n_batches],
            current_padded,
        ];
        for start in starts {
            let mut padded = start;
            let mut here = self.best_for_padded(&padded, q);
            loop {
                let mut improved = false;
                for n in 0..n_batches {
                    for len in 1..=self.l_ub {
                        if len == padded[n] {
                            continue;
                        }
                        let mut trial = padded.clone();
                        trial[n] = len;
                        if let Some((val, lengths)) = self.best_for_padded(&trial, q) {
                            if here
                                .as_ref()
                                .is_none_or(|(h, _)| val > *h + 1e-15 * h.abs())
                            {
                                here = Some((val, lengths));
                                padded = trial;
                                improved = true;
                            }
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            if let Some((val, lengths)) = here {
                if val > best_val {
                    best_val = val;
                    best = lengths;
                }
            }
        }
        best
    }
}

/// Throughput-maximizing draft lengths for the assignment in `plan`, whose
/// lengths serve as the starting point.
pub fn solve_l(inst: &ProblemInstance, plan: &Plan, cfg: &SolverConfig) -> Result<LengthOutcome> {
    let mut metrics = evaluate(plan, inst)?;
    let ctx = LengthContext::new(inst, plan);
    let mut current = plan.clone();
    let mut q = metrics.throughput;
    let mut q_trace = vec![q];
    let mut residual_trace = Vec::new();
    let mut exact = true;
    for _ in 0..cfg.max_dinkelbach_iters {
        let (lengths, truncated) = ctx.maximize(q, &current.lengths, cfg);
        exact &= !truncated;
        let candidate = Plan::new(current.batch_count, current.assignment.clone(), lengths);
        let cand_metrics = match evaluate(&candidate, inst) {
            Ok(m) => m,
            Err(Error::Infeasible(_)) => break,
            Err(e) => return Err(e),
        };
        let residual = cand_metrics.utility - q * cand_metrics.span;
        residual_trace.push(residual);
        if cand_metrics.throughput > metrics.throughput {
            current = candidate;
            metrics = cand_metrics;
            q = metrics.throughput;
            q_trace.push(q);
        }
        if residual.abs() <= cfg.dinkelbach_tol {
            break;
        }
    }
    Ok(LengthOutcome {
        plan: current,
        metrics,
        q_trace,
        residual_trace,
        exact,
    })
}
