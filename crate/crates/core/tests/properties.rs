use proptest::prelude::*;

use crosspath_core::explain::{shapley_exact, shapley_from_table};
use crosspath_core::schema::{read_jsonl, write_jsonl, CrossingInstance};
use crosspath_core::synthgen::{self, generate_instance};
use crosspath_core::windowing::{
    make_splits, seconds_to_steps, time_window_count, window_time_based, NormalizationParams, Variant,
};

fn small_config(seed: u64) -> synthgen::GeneratorConfig {
    synthgen::GeneratorConfig {
        seed,
        n_participants: 4,
        scenarios_per_participant: 5,
        ..synthgen::benchmark_config(seed)
    }
}

fn instance(seed: u64, i: usize) -> CrossingInstance {
    generate_instance(&small_config(seed), i).unwrap()
}

/// Average marginal contribution over every ordering of the players.
fn permutation_oracle(n: usize, table: &[f64]) -> Vec<f64> {
    fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permutations(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let mut all = Vec::new();
    permutations(&mut (0..n).collect(), 0, &mut all);
    let mut phi = vec![0.0; n];
    for order in &all {
        let mut mask = 0usize;
        for &p in order {
            let before = table[mask];
            mask |= 1 << p;
            phi[p] += table[mask] - before;
        }
    }
    phi.iter().map(|s| s / all.len() as f64).collect()
}

fn game() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..=6).prop_flat_map(|n| (Just(n), prop::collection::vec(-10.0f64..10.0, 1 << n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip(seed in 0u64..1000, i in 0usize..20) {
        let inst = instance(seed, i);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&inst)).unwrap();
        let back: Vec<CrossingInstance> = read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(back, vec![inst]);
    }

    #[test]
    fn generated_instances_are_valid(seed in 0u64..1000, i in 0usize..20) {
        let inst = instance(seed, i);
        prop_assert!(inst.validate().is_ok());
        let last = inst.points.last().unwrap();
        prop_assert!(last.y >= inst.context.road_width() - 1e-9);
    }

    #[test]
    fn window_counts_match_enumeration(n in 0usize..200, t_in in 1usize..30, t_out in 1usize..30, stride in 1usize..12) {
        let brute = (0..n).step_by(stride).filter(|&s| s + t_in + t_out <= n).count();
        prop_assert_eq!(time_window_count(n, t_in, t_out, stride), brute);
    }

    #[test]
    fn windows_are_slices_of_the_trajectory(seed in 0u64..200, t1 in 1u32..=20, t2 in 1u32..=20, stride in 1usize..8) {
        let inst = instance(seed, 3);
        let (t1, t2) = (f64::from(t1) / 10.0, f64::from(t2) / 10.0);
        let samples = window_time_based(&inst, t1, t2, stride, Variant::Xyod).unwrap();
        let (a, b) = (seconds_to_steps(t1).unwrap(), seconds_to_steps(t2).unwrap());
        prop_assert_eq!(samples.len(), time_window_count(inst.points.len(), a, b, stride));
        for s in &samples {
            prop_assert_eq!(s.input_len(), a);
            prop_assert_eq!(s.output_len(), b);
            let first = &inst.points[s.start_step];
            prop_assert_eq!(s.input_row(0), &[first.x, first.y, first.o, first.d][..]);
            let next = &inst.points[s.start_step + a];
            prop_assert_eq!(&s.target[..2], &[next.x, next.y][..]);
        }
        // swapping input and output lengths never changes the count
        let swapped = window_time_based(&inst, t2, t1, stride, Variant::Xy).unwrap();
        prop_assert_eq!(swapped.len(), samples.len());
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..200) {
        let inst = instance(seed, 1);
        let samples = window_time_based(&inst, 1.0, 1.0, 1, Variant::Xyod).unwrap();
        prop_assume!(!samples.is_empty());
        let norm = NormalizationParams::fit(samples.iter(), Variant::Xyod).unwrap();
        for s in &samples {
            let n = norm.normalize(s).unwrap();
            prop_assert!(n.input.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
            let back = norm.denormalize_xy(&n.target).unwrap();
            for (u, v) in back.iter().zip(&s.target) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn splits_partition_ids(n in 10usize..300, k in 2usize..9, seed in any::<u64>()) {
        prop_assume!(n - (n as f64 * 0.2).round() as usize >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let split = make_splits(&ids, seed, k).unwrap();
        let mut all: Vec<&String> = split.test.iter().chain(split.folds.iter().flatten()).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn shapley_matches_permutation_oracle((n, table) in game()) {
        let phi = shapley_from_table(n, &table).unwrap();
        let oracle = permutation_oracle(n, &table);
        for (a, b) in phi.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let total: f64 = phi.iter().sum();
        prop_assert!((total - (table[(1 << n) - 1] - table[0])).abs() <= 1e-12 * (1.0 + total.abs()));
    }

    #[test]
    fn shapley_additivity_and_dummy((n, u) in game(), w in prop::collection::vec(-10.0f64..10.0, 64), dummy in 0usize..6) {
        let dummy = dummy % n;
        let w = &w[..1 << n];
        // v ignores the dummy player entirely
        let v: Vec<f64> = (0..1usize << n).map(|s| w[s & !(1 << dummy)]).collect();
        let pv = shapley_from_table(n, &v).unwrap();
        prop_assert!(pv[dummy].abs() <= 1e-12);

        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let pu = shapley_from_table(n, &u).unwrap();
        let ps = shapley_from_table(n, &sum).unwrap();
        for i in 0..n {
            prop_assert!((ps[i] - pu[i] - pv[i]).abs() <= 1e-12 * (1.0 + ps[i].abs()));
        }
    }

    #[test]
    fn shapley_symmetry(n in 2usize..=6, w in prop::collection::vec(-5.0f64..5.0, 7)) {
        // v depends only on coalition size, so every player is interchangeable
        let v: Vec<f64> = (0..1usize << n).map(|s| w[s.count_ones() as usize]).collect();
        let phi = shapley_exact(n, |s| Ok(v[s])).unwrap();
        for p in &phi {
            prop_assert!((p - phi[0]).abs() <= 1e-12);
        }
    }
}
