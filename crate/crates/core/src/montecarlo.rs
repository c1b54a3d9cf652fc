//! Seeded simulation of speculation rounds under the geometric acceptance
//! model. Timing per round is the deterministic span of the plan; only the
//! number of emitted tokens is random.
//!
//! Every user owns one ChaCha8 stream (stream id = user index) derived from
//! the seed, and consumes exactly one 64-bit word pair per round. A chunk of
//! rounds starting at round `r` therefore seeks its streams to position
//! `2r` and produces the same draws as a sequential run, so results do not
//! depend on how rounds are split across threads.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::schedule::{evaluate, Plan};

const CHUNK_ROUNDS: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rounds: u64,
    pub seed: u64,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub rounds: u64,
    pub total_accepted_tokens: u64,
    /// `rounds` times the span of the plan.
    pub total_time_ms: f64,
    pub empirical_tps: f64,
    /// Standard error of `empirical_tps`, from the per-round token totals.
    pub tps_std_error: f64,
    pub analytic_tps: f64,
    pub per_user_mean_accepted: Vec<f64>,
    pub per_user_std_error: Vec<f64>,
}

/// Per-user random streams positioned at a given round.
#[derive(Debug, Clone)]
pub struct UserStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl UserStreams {
    pub fn new(seed: u64, users: usize) -> Self {
        Self::at_round(seed, users, 0)
    }

    pub fn at_round(seed: u64, users: usize, round: u64) -> Self {
        let rngs = (0..users)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                rng.set_word_pos(2 * round as u128);
                rng
            })
            .collect();
        UserStreams { rngs }
    }
}

/// Number of leading accepted drafts, capped at `len`, plus the bonus token.
///
/// Uses the inverse CDF of the geometric law on one uniform draw: with
/// `u` in (0, 1], `P(floor(ln u / ln alpha) >= j) = alpha^j`, which is the
/// law of the first failing index over independent Bernoulli(alpha) trials.
fn accepted_from_word(word: u64, len: u32, alpha: f64) -> u32 {
    let u = 1.0 - (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let k = (u.ln() / alpha.ln()).floor();
    if k >= len as f64 {
        len + 1
    } else {
        k as u32 + 1
    }
}

/// Draws one round of accepted-token counts (bonus token included) per user.
pub fn sample_round(plan: &Plan, inst: &ProblemInstance, streams: &mut UserStreams) -> Vec<u32> {
    plan.lengths
        .iter()
        .zip(&inst.users)
        .zip(streams.rngs.iter_mut())
        .map(|((&len, user), rng)| accepted_from_word(rng.next_u64(), len, user.accept_rate))
        .collect()
}

#[derive(Default)]
struct Tally {
    per_user: Vec<u64>,
    per_user_sq: Vec<u64>,
    round_sq: u128,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        if self.per_user.is_empty() {
            return other;
        }
        for (a, b) in self.per_user.iter_mut().zip(&other.per_user) {
            *a += b;
        }
        for (a, b) in self.per_user_sq.iter_mut().zip(&other.per_user_sq) {
            *a += b;
        }
        self.round_sq += other.round_sq;
        self
    }
}

fn run_chunk(plan: &Plan, inst: &ProblemInstance, seed: u64, start: u64, count: u64) -> Tally {
    let m = inst.user_count();
    let mut streams = UserStreams::at_round(seed, m, start);
    let mut tally = Tally {
        per_user: vec![0; m],
        per_user_sq: vec![0; m],
        round_sq: 0,
    };
    for _ in 0..count {
        let round = sample_round(plan, inst, &mut streams);
        let mut total = 0u64;
        for (k, &a) in round.iter().enumerate() {
            let a = a as u64;
            tally.per_user[k] += a;
            tally.per_user_sq[k] += a * a;
            total += a;
        }
        tally.round_sq += (total as u128) * (total as u128);
    }
    tally
}

fn std_error(sum: f64, sum_sq: f64, n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (var / n).sqrt()
}

/// Simulates `cfg.rounds` rounds of the plan. Rounds are processed in fixed
/// chunks in parallel; counts are integers, so the result is identical to a
/// sequential run.
pub fn simulate(cfg: &SimConfig, inst: &ProblemInstance) -> Result<SimResult> {
    if cfg.rounds == 0 {
        return Err(Error::Domain("rounds must be at least 1".into()));
    }
    let metrics = evaluate(&cfg.plan, inst)?;
    let chunks = cfg.rounds.div_ceil(CHUNK_ROUNDS);
    let tally = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_ROUNDS;
            let count = CHUNK_ROUNDS.min(cfg.rounds - start);
            run_chunk(&cfg.plan, inst, cfg.seed, start, count)
        })
        .reduce(Tally::default, Tally::merge);

    let n = cfg.rounds as f64;
    let total: u64 = tally.per_user.iter().sum();
    let total_time_ms = n * metrics.span;
    let tokens_se = std_error(total as f64, tally.round_sq as f64, n);
    Ok(SimResult {
        rounds: cfg.rounds,
        total_accepted_tokens: total,
        total_time_ms,
        empirical_tps: 1000.0 * total as f64 / total_time_ms,
        tps_std_error: 1000.0 * tokens_se / metrics.span,
        analytic_tps: metrics.throughput_tps,
        per_user_mean_accepted: tally.per_user.iter().map(|&s| s as f64 / n).collect(),
        per_user_std_error: tally
            .per_user
            .iter()
            .zip(&tally.per_user_sq)
            .map(|(&s, &sq)| std_error(s as f64, sq as f64, n))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::expected_accepted;
    use crate::instance::default_instance;

    fn optimum() -> Plan {
        Plan::new(2, vec![0, 0, 0, 1, 1, 1], vec![3; 6])
    }

    fn one_user(alpha: f64, len: u32) -> (ProblemInstance, Plan) {
        let inst = default_instance(1).with_accept_rate(alpha);
        (inst, Plan::singletons(vec![len]))
    }

    fn run(inst: &ProblemInstance, plan: Plan, rounds: u64, seed: u64) -> SimResult {
        simulate(&SimConfig { rounds, seed, plan }, inst).unwrap()
    }

    #[test]
    fn inverse_cdf_edges() {
        assert_eq!(accepted_from_word(0, 7, 0.78), 1);
        assert_eq!(accepted_from_word(u64::MAX, 7, 0.78), 8);
        assert_eq!(accepted_from_word(u64::MAX, 0, 0.5), 1);
        // u just above 0.5 with alpha 0.5: zero accepted; just below: one accepted
        assert_eq!(accepted_from_word((1u64 << 63) - (1 << 11), 1, 0.5), 1);
        assert_eq!(accepted_from_word((1u64 << 63) + (1 << 11), 1, 0.5), 2);
    }

    #[test]
    fn low_accept_rate_is_near_bonus_floor() {
        let (inst, plan) = one_user(0.01, 7);
        let res = run(&inst, plan, 100_000, 1);
        let mean = res.per_user_mean_accepted[0];
        let expect = expected_accepted(7, 0.01).unwrap();
        assert!((expect - 1.0101).abs() < 1e-4);
        assert!((mean - expect).abs() < 4.0 * res.per_user_std_error[0]);
    }

    #[test]
    fn default_length_mean_matches_expectation() {
        let (inst, plan) = one_user(0.78, 7);
        let res = run(&inst, plan, 100_000, 7);
        let expect = expected_accepted(7, 0.78).unwrap();
        assert!((res.per_user_mean_accepted[0] - expect).abs() < 3.0 * res.per_user_std_error[0]);
    }

    #[test]
    fn single_draft_is_fair_coin() {
        let inst = default_instance(1).with_accept_rate(0.5);
        let plan = Plan::singletons(vec![1]);
        let mut streams = UserStreams::new(11, 1);
        let n = 100_000;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            counts[sample_round(&plan, &inst, &mut streams)[0] as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let e = n as f64 / 2.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - e).powi(2) / e)
            .sum();
        // 1 degree of freedom, p = 0.001
        assert!(chi2 < 10.83, "chi2 = {chi2}");
    }

    #[test]
    fn sample_means_track_expectation_across_lengths() {
        for alpha in [0.5, 0.78, 0.95] {
            for len in [1, 2, 5, 10, 20] {
                let (inst, plan) = one_user(alpha, len);
                let res = run(&inst, plan, 100_000, len as u64);
                let expect = expected_accepted(len, alpha).unwrap();
                let mean = res.per_user_mean_accepted[0];
                assert!(
                    (mean - expect).abs() < 4.0 * res.per_user_std_error[0],
                    "alpha {alpha} len {len}: {mean} vs {expect}"
                );
                assert!(mean >= 1.0 && mean <= len as f64 + 1.0);
            }
        }
    }

    #[test]
    fn default_optimum_converges() {
        let inst = default_instance(6);
        let res = run(&inst, optimum(), 100_000, 2024);
        assert!((res.empirical_tps / res.analytic_tps - 1.0).abs() < 0.01);
        assert!((res.analytic_tps - 83.78).abs() < 0.01);
    }

    #[test]
    fn one_round_takes_one_span() {
        let inst = default_instance(6);
        let res = run(&inst, optimum(), 1, 3);
        let span = evaluate(&optimum(), &inst).unwrap().span;
        assert_eq!(res.total_time_ms, span);
        assert_eq!(res.tps_std_error, 0.0);
    }

    #[test]
    fn deterministic_and_chunk_independent() {
        let inst = default_instance(6);
        let rounds = 3 * CHUNK_ROUNDS + 17;
        let a = run(&inst, optimum(), rounds, 99);
        let b = run(&inst, optimum(), rounds, 99);
        assert_eq!(a, b);

        let seq = run_chunk(&optimum(), &inst, 99, 0, rounds);
        assert_eq!(
            seq.per_user,
            a.per_user_mean_accepted
                .iter()
                .map(|m| (m * rounds as f64).round() as u64)
                .collect::<Vec<_>>()
        );
        assert_eq!(seq.per_user.iter().sum::<u64>(), a.total_accepted_tokens);

        let c = run(&inst, optimum(), rounds, 100);
        assert_ne!(a.total_accepted_tokens, c.total_accepted_tokens);
    }

    #[test]
    fn adding_users_keeps_existing_streams() {
        let small = default_instance(3);
        let large = default_instance(5);
        let mut s = UserStreams::new(5, 3);
        let mut l = UserStreams::new(5, 5);
        let ps = Plan::singletons(vec![6; 3]);
        let pl = Plan::singletons(vec![6; 5]);
        for _ in 0..100 {
            let a = sample_round(&ps, &small, &mut s);
            let b = sample_round(&pl, &large, &mut l);
            assert_eq!(a[..], b[..3]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let inst = default_instance(6);
        let cfg = SimConfig {
            rounds: 0,
            seed: 0,
            plan: optimum(),
        };
        assert!(simulate(&cfg, &inst).is_err());
        let cfg = SimConfig {
            rounds: 10,
            seed: 0,
            plan: Plan::singletons(vec![21; 6]),
        };
        assert!(simulate(&cfg, &inst).is_err());
    }
}
