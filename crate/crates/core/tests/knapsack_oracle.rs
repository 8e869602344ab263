//! Knapsack selection checked against exhaustive enumeration.

mod common;

use acesync_core::budget::{
    select_knapsack_exact, select_knapsack_greedy, selection_value, selection_weight, ByteBudget, ExactLimits,
    KnapsackItem,
};
use common::{brute_force_knapsack, random_knapsack, rng};

const INSTANCES: usize = 1000;

#[test]
fn exact_matches_brute_force_and_greedy_keeps_half() {
    let mut r = rng(42);
    let mut worst_ratio = f64::INFINITY;
    for case in 0..INSTANCES {
        let (items, budget) = random_knapsack(&mut r, 20);
        let b = ByteBudget { bytes: budget };
        let opt = brute_force_knapsack(&items, budget);

        let exact = select_knapsack_exact(&items, b, ExactLimits::default()).unwrap();
        assert!(selection_weight(&items, &exact) <= budget, "case {case}: exact over budget");
        let ev = selection_value(&items, &exact);
        assert!((ev - opt).abs() <= 1e-9 * (1.0 + opt), "case {case}: exact {ev} vs brute {opt}");

        let greedy = select_knapsack_greedy(&items, b);
        assert!(selection_weight(&items, &greedy) <= budget, "case {case}: greedy over budget");
        let gv = selection_value(&items, &greedy);
        assert!(gv >= 0.5 * opt - 1e-9, "case {case}: greedy {gv} below half of {opt}");
        if opt > 0.0 {
            worst_ratio = worst_ratio.min(gv / opt);
        }
    }
    println!("worst greedy/optimum ratio {worst_ratio:.4}");
}

#[test]
fn textbook_instance() {
    let items = [
        KnapsackItem { block_id: 0, value: 60.0, weight: 10 },
        KnapsackItem { block_id: 1, value: 100.0, weight: 20 },
        KnapsackItem { block_id: 2, value: 120.0, weight: 30 },
    ];
    let b = ByteBudget { bytes: 50 };
    assert_eq!(brute_force_knapsack(&items, 50), 220.0);
    let exact = select_knapsack_exact(&items, b, ExactLimits::default()).unwrap();
    assert_eq!(exact.block_ids, vec![1, 2]);
    let greedy = select_knapsack_greedy(&items, b);
    assert_eq!(selection_value(&items, &greedy), 160.0);
}

#[test]
fn greedy_falls_back_to_single_large_item() {
    // Ratio order takes the tiny item and then cannot fit the large one.
    let items = [
        KnapsackItem { block_id: 0, value: 2.0, weight: 1 },
        KnapsackItem { block_id: 1, value: 90.0, weight: 100 },
    ];
    let sel = select_knapsack_greedy(&items, ByteBudget { bytes: 100 });
    assert_eq!(sel.block_ids, vec![1]);
    assert_eq!(brute_force_knapsack(&items, 100), 90.0);
}

#[test]
fn empty_budget_selects_nothing() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (items, _) = random_knapsack(&mut r, 10);
        let b = ByteBudget { bytes: 0 };
        assert!(select_knapsack_greedy(&items, b).is_empty());
        assert!(select_knapsack_exact(&items, b, ExactLimits::default()).unwrap().is_empty());
    }
}
