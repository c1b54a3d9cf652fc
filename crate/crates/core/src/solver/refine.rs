//! Partition sweep after the alternation. The assignment and length steps
//! are each exact, but alternating them can stop at a fixed point that is
//! not the joint optimum. When the number of distinct partitions into `n`
//! batches is small, solving the length step on every one of them gives
//! the joint optimum for that `n`.

use std::collections::HashSet;

use rayon::prelude::*;

use super::assign::class_order;
use super::{solve_l, SolverConfig};
use crate::error::Result;
use crate::instance::ProblemInstance;
use crate::schedule::{check_feasible, Plan, PlanMetrics};

pub(crate) struct Refinement {
    pub plan: Plan,
    pub metrics: PlanMetrics,
    pub partitions: usize,
    pub exact: bool,
}

/// Assignments into exactly `n` nonempty batches, one per partition up to
/// permutations of identical users and of batch labels. `None` once more
/// than `limit` candidates would be generated.
pub(crate) fn distinct_partitions(
    inst: &ProblemInstance,
    n: usize,
    limit: u64,
) -> Option<Vec<Vec<usize>>> {
    let m = inst.user_count();
    let (order, same_class_as_prev) = class_order(inst, &vec![1; m]);
    let mut class_of = vec![0usize; m];
    let mut c = 0;
    for p in 0..m {
        if p > 0 && !same_class_as_prev[p] {
            c += 1;
        }
        class_of[order[p]] = c;
    }

    struct Walk<'a> {
        n: usize,
        order: &'a [usize],
        same: &'a [bool],
        chosen: Vec<usize>,
        generated: u64,
        limit: u64,
        out: Vec<Vec<usize>>,
    }
    impl Walk<'_> {
        fn go(&mut self, depth: usize, opened: usize) -> bool {
            let m = self.order.len();
            if depth == m {
                if opened == self.n {
                    self.generated += 1;
                    if self.generated > self.limit {
                        return false;
                    }
                    self.out.push(self.chosen.clone());
                }
                return true;
            }
            // leave enough users to open every remaining batch
            if self.n - opened > m - depth {
                return true;
            }
            let k = self.order[depth];
            let lo = if self.same[depth] {
                self.chosen[self.order[depth - 1]]
            } else {
                0
            };
            let hi = opened.min(self.n - 1);
            for b in lo..=hi {
                self.chosen[k] = b;
                if !self.go(depth + 1, opened.max(b + 1)) {
                    return false;
                }
            }
            true
        }
    }
    let mut walk = Walk {
        n,
        order: &order,
        same: &same_class_as_prev,
        chosen: vec![0; m],
        generated: 0,
        limit,
        out: Vec::new(),
    };
    if !walk.go(0, 0) {
        return None;
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for a in walk.out {
        let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (k, &b) in a.iter().enumerate() {
            blocks[b].push(class_of[k]);
        }
        for b in &mut blocks {
            b.sort_unstable();
        }
        blocks.sort();
        if seen.insert(blocks) {
            out.push(a);
        }
    }
    Some(out)
}

/// Runs the length step on every distinct partition into `n` batches and
/// returns the best plan. `Ok(None)` when the partition count exceeds the
/// configured limit.
pub(crate) fn refine(
    inst: &ProblemInstance,
    n: usize,
    cfg: &SolverConfig,
) -> Result<Option<Refinement>> {
    let Some(partitions) = distinct_partitions(inst, n, cfg.refine_partition_limit) else {
        return Ok(None);
    };
    let m = inst.user_count();
    let count = partitions.len();
    let results: Vec<Result<Option<(Plan, PlanMetrics, bool)>>> = partitions
        .into_par_iter()
        .map(|a| {
            // the shortest drafts give the smallest span, so they are
            // feasible whenever any lengths are
            let start = Plan::new(n, a, vec![1; m]);
            if !check_feasible(&start, inst).is_feasible() {
                return Ok(None);
            }
            let out = solve_l(inst, &start, cfg)?;
            Ok(Some((out.plan, out.metrics, out.exact)))
        })
        .collect();

    let mut best: Option<(Plan, PlanMetrics)> = None;
    let mut exact = true;
    for r in results {
        let Some((plan, metrics, ex)) = r? else {
            continue;
        };
        exact &= ex;
        if best
            .as_ref()
            .is_none_or(|(_, b)| metrics.throughput > b.throughput)
        {
            best = Some((plan, metrics));
        }
    }
    Ok(best.map(|(plan, metrics)| Refinement {
        plan: plan.canonicalized(),
        metrics,
        partitions: count,
        exact,
    }))
}
