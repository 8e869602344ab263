//! K-means grouping of devices by link and compute characteristics, and the
//! per-cluster compression schedules derived from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::CompressionSchedule;
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterFeatures {
    pub mean_bandwidth_mbps: f64,
    pub compute_time_per_batch_s: f64,
    pub dataset_size: f64,
}

impl ClusterFeatures {
    fn as_array(&self) -> [f64; 3] {
        [
            self.mean_bandwidth_mbps,
            self.compute_time_per_batch_s,
            self.dataset_size,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id per device, in input order.
    pub assignment: Vec<usize>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == cluster)
            .map(|(i, _)| i)
    }
}

fn normalize(features: &[ClusterFeatures]) -> Vec<[f64; 3]> {
    let raw: Vec<[f64; 3]> = features.iter().map(ClusterFeatures::as_array).collect();
    let mut out = raw.clone();
    for dim in 0..3 {
        let lo = raw.iter().map(|r| r[dim]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r[dim]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (o, r) in out.iter_mut().zip(&raw) {
            o[dim] = if span > 0.0 { (r[dim] - lo) / span } else { 0.0 };
        }
    }
    out
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Moves the point farthest from its center into each empty cluster, never
/// emptying the donor.
fn fill_empty(assignment: &mut [usize], centers: &mut [[f64; 3]], points: &[[f64; 3]]) {
    let mut counts = vec![0usize; centers.len()];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    for j in 0..centers.len() {
        if counts[j] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let d = dist2(p, &centers[assignment[i]]);
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let Some(far) = far else { return };
        counts[assignment[far]] -= 1;
        counts[j] = 1;
        assignment[far] = j;
        centers[j] = points[far];
    }
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means on min-max normalised features with farthest-point seeding.
/// Ties go to the lower cluster id; clusters that empty out are re-seeded with
/// the point farthest from its current center.
pub fn cluster_devices(features: &[ClusterFeatures], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("clusters_k must be in [1, {n}], got {k}")));
    }
    if features
        .iter()
        .flat_map(|f| f.as_array())
        .any(|v| !v.is_finite())
    {
        return Err(Error::config("cluster features must be finite"));
    }
    let points = normalize(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)]];
    while centers.len() < k {
        let mut far = 0;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min);
            if d > far_d {
                far = i;
                far_d = d;
            }
        }
        centers.push(points[far]);
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_ITERATIONS {
        fill_empty(&mut assignment, &mut centers, &points);
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for d in 0..3 {
                sums[c][d] += p[d];
            }
        }
        for j in 0..k {
            centers[j] = sums[j].map(|s| s / counts[j] as f64);
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    fill_empty(&mut assignment, &mut centers, &points);
    Ok(ClusterAssignment { k, assignment })
}

/// One schedule per cluster. The decay rate is scaled by the cluster's mean
/// bandwidth relative to the fleet, so slower clusters stay nearer `c_max`.
pub fn cluster_schedules(
    base: &CompressionSchedule,
    clusters: &ClusterAssignment,
    features: &[ClusterFeatures],
) -> Result<Vec<CompressionSchedule>> {
    if clusters.assignment.len() != features.len() {
        return Err(Error::shape("cluster assignment and features differ in length"));
    }
    let global = features.iter().map(|f| f.mean_bandwidth_mbps).sum::<f64>() / features.len() as f64;
    (0..clusters.k)
        .map(|j| {
            let members: Vec<f64> = clusters
                .members(j)
                .map(|i| features[i].mean_bandwidth_mbps)
                .collect();
            if members.is_empty() {
                return Ok(*base);
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            if mean <= 0.0 {
                return Err(Error::config("cluster mean bandwidth must be positive"));
            }
            Ok(CompressionSchedule {
                beta: base.beta * mean / global,
                ..*base
            })
        })
        .collect()
}
