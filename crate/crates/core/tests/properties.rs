use dipsd_core::instance::default_instance;
use dipsd_core::schedule::{canonical_stage_durations, evaluate, minimal_span, Plan};
use dipsd_core::solver::{random_instance, solve, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checks the stage constraints for span `s` under the canonical durations:
/// every stage at least its verify latency, durations summing to `s`, and
/// `s` covering draft plus verify of every batch.
fn stage_constraints_hold(ready: &[f64], verify: &[f64], s: f64) -> bool {
    let t = canonical_stage_durations(verify, s);
    let tol = 1e-12 * s.abs().max(1.0);
    let covers_stage = t.iter().zip(verify).all(|(t, v)| *t >= v - tol);
    let sums = (t.iter().sum::<f64>() - s).abs() <= tol;
    let precedence = ready.iter().zip(verify).all(|(d, v)| s >= d + v - tol);
    covers_stage && sums && precedence
}

fn random_timings(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(1..=12);
    let scale = 10f64.powf(rng.gen_range(-1.0..3.0));
    let ready = (0..n).map(|_| rng.gen_range(0.0..=1.0) * scale).collect();
    let verify = (0..n).map(|_| rng.gen_range(0.01..=1.0) * scale).collect();
    (ready, verify)
}

#[test]
fn minimal_span_is_least_feasible_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let (ready, verify) = random_timings(&mut rng);
        let s = minimal_span(&ready, &verify).unwrap();
        assert!(
            stage_constraints_hold(&ready, &verify, s),
            "{ready:?} {verify:?} -> {s}"
        );
        let shrunk = s - 1e-6 * s;
        assert!(!stage_constraints_hold(&ready, &verify, shrunk));
        // no duration vector at all exists below the bound
        let total: f64 = verify.iter().sum();
        let precedence = ready
            .iter()
            .zip(&verify)
            .map(|(d, v)| d + v)
            .fold(0.0, f64::max);
        assert!(shrunk < total || shrunk < precedence);
    }
}

#[test]
fn stage_order_does_not_change_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (mut ready, mut verify) = random_timings(&mut rng);
        let s = minimal_span(&ready, &verify).unwrap();
        ready.reverse();
        verify.reverse();
        assert!((minimal_span(&ready, &verify).unwrap() - s).abs() <= 1e-12 * s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_all_latencies_scales_the_optimum(seed in any::<u64>(), k in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 5, 8);
        let cfg = SolverConfig::default();
        let base = solve(&inst, &cfg).unwrap();
        let scaled_inst = inst.with_latency_scale(k);
        let scaled = solve(&scaled_inst, &cfg).unwrap();
        let r0 = base.best_metrics.throughput;
        let r1 = scaled.best_metrics.throughput;
        prop_assert!((r1 * k - r0).abs() <= 1e-9 * r0, "{} vs {}", r1 * k, r0);
        // the base optimum keeps its throughput, scaled by 1/k
        let replay = evaluate(&base.best_plan, &scaled_inst).unwrap();
        prop_assert!((replay.span - k * base.best_metrics.span).abs() <= 1e-9 * replay.span);
        prop_assert_eq!(&scaled.best_plan, &base.best_plan);
    }

    #[test]
    fn permuting_identical_users_keeps_the_optimum(seed in any::<u64>()) {
        // a few distinct profiles, each repeated, in two different orders
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_instance(&mut rng, 3, 8);
        let m = rng.gen_range(3..=6);
        let mut inst = base.clone();
        inst.users = (0..m).map(|_| base.users[rng.gen_range(0..base.user_count())]).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = inst.clone();
        shuffled.users = perm.iter().map(|&k| inst.users[k]).collect();
        let cfg = SolverConfig::default();
        let a = solve(&inst, &cfg).unwrap();
        let b = solve(&shuffled, &cfg).unwrap();
        let (ra, rb) = (a.best_metrics.throughput, b.best_metrics.throughput);
        prop_assert!((ra - rb).abs() <= 1e-12 * ra, "{} vs {}", ra, rb);
        // plans agree once users are mapped back through the permutation
        let mut back_lengths = vec![0; m];
        for (pos, &k) in perm.iter().enumerate() {
            back_lengths[k] = b.best_plan.lengths[pos];
        }
        let mut sorted_a: Vec<_> = (0..m).map(|k| (inst.users[k].prefix_len, a.best_plan.lengths[k])).collect();
        let mut sorted_b: Vec<_> = (0..m).map(|k| (inst.users[k].prefix_len, back_lengths[k])).collect();
        sorted_a.sort();
        sorted_b.sort();
        prop_assert_eq!(sorted_a, sorted_b);
    }

    #[test]
    fn reordering_users_keeps_a_certified_optimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 8);
        let mut perm: Vec<usize> = (0..inst.user_count()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = inst.clone();
        shuffled.users = perm.iter().map(|&k| inst.users[k]).collect();
        let cfg = SolverConfig::default();
        let a = solve(&inst, &cfg).unwrap();
        let b = solve(&shuffled, &cfg).unwrap();
        prop_assert!(a.joint_optimum_certified && b.joint_optimum_certified);
        let (ra, rb) = (a.best_metrics.throughput, b.best_metrics.throughput);
        prop_assert!((ra - rb).abs() <= 1e-9 * ra, "{} vs {}", ra, rb);
    }

    #[test]
    fn identical_users_swap_under_any_plan(m in 2usize..8, n in 1usize..8, i in 0usize..8, j in 0usize..8, l in proptest::collection::vec(1u32..=20, 8)) {
        let n = n.min(m);
        let inst = default_instance(m);
        let assignment: Vec<usize> = (0..m).map(|k| k % n).collect();
        let plan = Plan::new(n, assignment, l[..m].to_vec());
        let mut swapped = plan.clone();
        swapped.assignment.swap(i % m, j % m);
        swapped.lengths.swap(i % m, j % m);
        let a = evaluate(&plan, &inst).unwrap();
        let b = evaluate(&swapped, &inst).unwrap();
        prop_assert_eq!(a.span, b.span);
        prop_assert!((a.utility - b.utility).abs() <= 1e-12 * a.utility);
    }

    #[test]
    fn solver_beats_every_uniform_length_singleton_plan(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 5, 10);
        let best = solve(&inst, &SolverConfig::default()).unwrap().best_metrics.throughput;
        for l in 1..=inst.bounds.l_ub {
            let r = evaluate(&Plan::singletons(vec![l; inst.user_count()]), &inst).unwrap().throughput;
            prop_assert!(best >= r * (1.0 - 1e-12));
        }
    }
}
