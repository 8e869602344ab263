//! Reference implementations used as oracles by the integration tests. They
//! share no code with the library beyond its public data types.

#![allow(dead_code)]

use acesync_core::budget::KnapsackItem;
use acesync_core::tensor::{ModelParams, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean softmax cross-entropy of a tanh MLP, computed directly from the
/// layout: each layer is a row-major `(fan_out, fan_in)` weight segment
/// followed by its bias segment.
pub fn reference_loss(params: &ModelParams, features: &[f64], labels: &[usize], dim: usize) -> f64 {
    let layers: Vec<(usize, usize, usize, usize)> = params
        .layout
        .chunks(2)
        .map(|pair| {
            let Shape::Matrix { rows, cols } = pair[0].shape else {
                panic!("expected weight matrix first")
            };
            (pair[0].offset, pair[1].offset, cols, rows)
        })
        .collect();
    let v = &params.values;
    let mut total = 0.0;
    for (x, &y) in features.chunks(dim).zip(labels) {
        let mut a = x.to_vec();
        for (li, &(w, b, fan_in, fan_out)) in layers.iter().enumerate() {
            let mut z = vec![0.0; fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = v[b + o];
                for i in 0..fan_in {
                    s += v[w + o * fan_in + i] * a[i];
                }
                *zo = s;
            }
            a = if li + 1 == layers.len() {
                z
            } else {
                z.iter().map(|t| t.tanh()).collect()
            };
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        total += lse - a[y];
    }
    total / labels.len() as f64
}

/// Optimal knapsack value by enumerating every subset in Gray-code order.
pub fn brute_force_knapsack(items: &[KnapsackItem], budget: u64) -> f64 {
    let n = items.len();
    assert!(n <= 24, "brute force limited to 24 items");
    let mut best = 0.0f64;
    let mut value = 0.0f64;
    let mut weight: u64 = 0;
    let mut in_set = vec![false; n];
    for step in 1u64..(1u64 << n) {
        let bit = step.trailing_zeros() as usize;
        if in_set[bit] {
            value -= items[bit].value;
            weight -= items[bit].weight;
        } else {
            value += items[bit].value;
            weight += items[bit].weight;
        }
        in_set[bit] = !in_set[bit];
        if weight <= budget && value > best {
            // Re-sum to avoid drift from incremental floating-point updates.
            let exact: f64 = (0..n).filter(|&i| in_set[i]).map(|i| items[i].value).sum();
            best = best.max(exact);
        }
    }
    best
}

pub fn random_knapsack(rng: &mut ChaCha8Rng, max_items: usize) -> (Vec<KnapsackItem>, u64) {
    let n = rng.random_range(1..=max_items);
    let items: Vec<KnapsackItem> = (0..n)
        .map(|i| KnapsackItem {
            block_id: i,
            value: rng.random_range(0.0..100.0),
            weight: rng.random_range(1..=60),
        })
        .collect();
    let total: u64 = items.iter().map(|it| it.weight).sum();
    let budget = rng.random_range(0..=total);
    (items, budget)
}

/// Lowest within-cluster sum of squares over every split into two non-empty
/// groups, as a label vector with device 0 in group 0.
pub fn best_two_partition(points: &[[f64; 3]]) -> Vec<usize> {
    let n = points.len();
    let sse = |members: &[usize]| {
        let mut c = [0.0; 3];
        for &i in members {
            for d in 0..3 {
                c[d] += points[i][d] / members.len() as f64;
            }
        }
        members
            .iter()
            .map(|&i| (0..3).map(|d| (points[i][d] - c[d]).powi(2)).sum::<f64>())
            .sum::<f64>()
    };
    let mut best = (f64::INFINITY, vec![0; n]);
    for mask in 1u32..(1 << (n - 1)) {
        let mask = mask << 1;
        let a: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
        let b: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let cost = sse(&a) + sse(&b);
        if cost < best.0 {
            best = (cost, (0..n).map(|i| usize::from(mask & (1 << i) != 0)).collect());
        }
    }
    best.1
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
