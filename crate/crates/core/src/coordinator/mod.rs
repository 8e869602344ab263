//! Cloud-side coordination: device weighting, reconstruction of partially
//! transmitted updates, weighted aggregation, divergence-driven sync interval
//! control, device clustering and model broadcast.

mod cluster;

pub use cluster::{cluster_devices, cluster_schedules, ClusterAssignment, ClusterFeatures};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::wire::{self, Body, BlockData, BlockPayload, Message, MessageKind, CLOUD_SENDER};
use crate::error::{Error, Result};
use crate::netsim::{DeviceProfile, NetEvent, NetSim, Node};
use crate::tensor::{BlockIndex, GradientVector, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Dataset size times reliability.
    #[default]
    SizeReliability,
    /// Dataset size only.
    Size,
}

/// Aggregation weights, one per device, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceWeight {
    pub omega: Vec<f64>,
}

impl DeviceWeight {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

pub fn device_weights(profiles: &[DeviceProfile], scheme: WeightScheme) -> Result<DeviceWeight> {
    if profiles.is_empty() {
        return Err(Error::config("need at least one device"));
    }
    let raw: Vec<f64> = profiles
        .iter()
        .map(|p| match scheme {
            WeightScheme::SizeReliability => p.dataset_size as f64 * p.reliability,
            WeightScheme::Size => p.dataset_size as f64,
        })
        .collect();
    if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("device weights must be finite and non-negative"));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("all device weight products are zero"));
    }
    Ok(DeviceWeight {
        omega: raw.iter().map(|w| w / total).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    values: Vec<f64>,
    round_received: u64,
}

/// Last received values per (device, block), replayed at `lambda` scale for
/// blocks a device did not send.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCache {
    pub lambda: f64,
    entries: BTreeMap<(u32, usize), CacheEntry>,
}

impl GradientCache {
    pub fn new(lambda: f64) -> Self {
        GradientCache {
            lambda,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, device: u32, block: usize) -> Option<(&[f64], u64)> {
        self.entries
            .get(&(device, block))
            .map(|e| (e.values.as_slice(), e.round_received))
    }

    pub fn insert(&mut self, device: u32, block: usize, values: Vec<f64>, round: u64) {
        self.entries.insert(
            (device, block),
            CacheEntry {
                values,
                round_received: round,
            },
        );
    }
}

/// One device's uplink message contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpload {
    pub device_id: u32,
    pub blocks: Vec<BlockPayload>,
}

/// Dequantizes received blocks and fills missing ones from the cache.
/// Returns one full-length vector per upload, in input order.
pub fn reconstruct_update(
    uploads: &[DeviceUpload],
    cache: &mut GradientCache,
    index: &BlockIndex,
    round: u64,
) -> Result<Vec<GradientVector>> {
    let mut out = Vec::with_capacity(uploads.len());
    for up in uploads {
        let mut values = vec![0.0; index.total];
        let mut received = vec![false; index.len()];
        for bp in &up.blocks {
            let block = index.get(bp.block_id).ok_or_else(|| {
                Error::Protocol(format!("device {} sent unknown block {}", up.device_id, bp.block_id))
            })?;
            let v = bp.values();
            if v.len() != block.len {
                return Err(Error::Protocol(format!(
                    "block {} carries {} values, expected {}",
                    bp.block_id,
                    v.len(),
                    block.len
                )));
            }
            values[block.range()].copy_from_slice(&v);
            received[bp.block_id] = true;
            cache.insert(up.device_id, bp.block_id, v, round);
        }
        if cache.lambda > 0.0 {
            for block in index.blocks.iter().filter(|b| !received[b.block_id]) {
                if let Some((cached, _)) = cache.get(up.device_id, block.block_id) {
                    for (dst, c) in values[block.range()].iter_mut().zip(cached) {
                        *dst = cache.lambda * c;
                    }
                }
            }
        }
        out.push(GradientVector::new(values));
    }
    Ok(out)
}

/// `G = sum_k omega_k * g_k`, summed in ascending device order.
pub fn aggregate(updates: &[GradientVector], weights: &DeviceWeight) -> Result<GradientVector> {
    if updates.len() != weights.len() || updates.is_empty() {
        return Err(Error::shape(format!(
            "{} updates for {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let n = updates[0].len();
    if updates.iter().any(|u| u.len() != n) {
        return Err(Error::shape("updates differ in length"));
    }
    let mut g = vec![0.0; n];
    for (u, w) in updates.iter().zip(&weights.omega) {
        for (acc, v) in g.iter_mut().zip(&u.values) {
            *acc += w * v;
        }
    }
    Ok(GradientVector::new(g))
}

/// Euclidean distance between a device model and the global model.
pub fn compute_divergence(theta_k: &ModelParams, theta: &ModelParams) -> Result<f64> {
    if theta_k.len() != theta.len() {
        return Err(Error::shape(format!(
            "device model has {} values, global {}",
            theta_k.len(),
            theta.len()
        )));
    }
    Ok(theta_k
        .values
        .iter()
        .zip(&theta.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub divergences: Vec<f64>,
    pub tau: f64,
    pub sync_interval: u32,
    pub i_min: u32,
    pub i_max: u32,
}

impl DivergenceReport {
    pub fn max_divergence(&self) -> f64 {
        self.divergences.iter().cloned().fold(0.0, f64::max)
    }
}

/// Halve the interval when any device exceeds `tau`, otherwise grow it by one.
pub fn adjust_sync_interval(report: &DivergenceReport) -> DivergenceReport {
    let interval = if report.max_divergence() > report.tau {
        (report.sync_interval / 2).max(report.i_min)
    } else {
        (report.sync_interval + 1).min(report.i_max)
    };
    DivergenceReport {
        sync_interval: interval.clamp(report.i_min, report.i_max),
        ..report.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TauMode {
    Fixed { tau: f64 },
    /// `scale * median(D_k)` over the first `warmup_rounds` rounds, then frozen.
    Auto { scale: f64, warmup_rounds: u32 },
}

impl Default for TauMode {
    fn default() -> Self {
        TauMode::Auto {
            scale: 0.5,
            warmup_rounds: 5,
        }
    }
}

/// Stateful wrapper around [`adjust_sync_interval`] that owns the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalController {
    mode: TauMode,
    tau: Option<f64>,
    warmup: Vec<f64>,
    rounds_observed: u32,
    interval: u32,
    i_min: u32,
    i_max: u32,
}

impl IntervalController {
    pub fn new(mode: TauMode, initial: u32, i_min: u32, i_max: u32) -> Result<Self> {
        if i_min < 1 || i_min > i_max {
            return Err(Error::config(format!(
                "interval bounds must satisfy 1 <= i_min <= i_max, got [{i_min}, {i_max}]"
            )));
        }
        let tau = match mode {
            TauMode::Fixed { tau } if tau > 0.0 && tau.is_finite() => Some(tau),
            TauMode::Fixed { tau } => return Err(Error::config(format!("tau {tau} must be > 0"))),
            TauMode::Auto { scale, .. } if scale > 0.0 && scale.is_finite() => None,
            TauMode::Auto { scale, .. } => {
                return Err(Error::config(format!("tau scale {scale} must be > 0")))
            }
        };
        Ok(IntervalController {
            mode,
            tau,
            warmup: Vec::new(),
            rounds_observed: 0,
            interval: initial.clamp(i_min, i_max),
            i_min,
            i_max,
        })
    }

    pub fn interval(&self) -> u32 {
        self.interval
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    /// Feeds one control step's divergences; returns the report acted on, or
    /// `None` while the threshold is still warming up.
    pub fn observe(&mut self, divergences: &[f64]) -> Option<DivergenceReport> {
        self.rounds_observed += 1;
        let tau = match (self.tau, self.mode) {
            (Some(t), _) => t,
            (None, TauMode::Auto { scale, warmup_rounds }) => {
                self.warmup.extend_from_slice(divergences);
                if self.rounds_observed < warmup_rounds.max(1) {
                    return None;
                }
                let t = scale * median(&self.warmup);
                // Degenerate warm-up (no drift at all): fall back to any positive drift.
                let t = if t > 0.0 { t } else { f64::MIN_POSITIVE };
                self.tau = Some(t);
                return None;
            }
            (None, TauMode::Fixed { tau }) => tau,
        };
        let report = adjust_sync_interval(&DivergenceReport {
            divergences: divergences.to_vec(),
            tau,
            sync_interval: self.interval,
            i_min: self.i_min,
            i_max: self.i_max,
        });
        self.interval = report.sync_interval;
        Some(report)
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Full-precision model message from the cloud.
pub fn model_message(theta: &ModelParams, index: &BlockIndex, round: u32) -> Message {
    Message {
        kind: MessageKind::Model,
        sender: CLOUD_SENDER,
        round,
        body: Body::Blocks(
            index
                .blocks
                .iter()
                .map(|b| BlockPayload {
                    block_id: b.block_id,
                    data: BlockData::Full(theta.values[b.range()].to_vec()),
                })
                .collect(),
        ),
    }
}

/// A model copy on its way to one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub device_id: u32,
    pub event: NetEvent,
    pub model: ModelParams,
}

/// Sends the global model to every target through the simulator.
pub fn broadcast_global(
    theta: &ModelParams,
    targets: &[u32],
    index: &BlockIndex,
    sim: &mut NetSim,
    t_now: f64,
    round: u32,
) -> Result<Vec<Delivery>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let msg = model_message(theta, index, round);
    let bytes = wire::encode(&msg).len() as u64;
    let mut out = Vec::with_capacity(targets.len());
    for &d in targets {
        let event = sim.transmit(Node::Cloud, Node::Device(d), bytes, t_now)?;
        out.push(Delivery {
            device_id: d,
            event,
            model: read_back(&msg, theta)?,
        });
    }
    Ok(out)
}

fn read_back(msg: &Message, like: &ModelParams) -> Result<ModelParams> {
    let mut values = vec![0.0; like.len()];
    let Body::Blocks(blocks) = &msg.body else {
        return Err(Error::Protocol("model message without blocks".into()));
    };
    let mut offset = 0;
    for b in blocks {
        let v = b.values();
        values[offset..offset + v.len()].copy_from_slice(&v);
        offset += v.len();
    }
    like.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{full_payload_size, quantize_block};
    use crate::netsim::{BandwidthTrace, TraceSample};
    use crate::tensor::{init_model, partition_blocks};

    fn profile(id: u32, n: usize, r: f64) -> DeviceProfile {
        DeviceProfile {
            device_id: id,
            compute_time_per_batch_s: 0.01,
            dataset_size: n,
            reliability: r,
            trace_id: id,
        }
    }

    #[test]
    fn weight_examples() {
        let eq = device_weights(&[profile(0, 10, 1.0), profile(1, 10, 1.0), profile(2, 10, 1.0)], WeightScheme::SizeReliability).unwrap();
        for w in &eq.omega {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = device_weights(&[profile(0, 100, 1.0), profile(1, 300, 1.0)], WeightScheme::SizeReliability).unwrap();
        assert_eq!(w.omega, vec![0.25, 0.75]);
        let one = device_weights(&[profile(0, 7, 0.3)], WeightScheme::SizeReliability).unwrap();
        assert_eq!(one.omega, vec![1.0]);
        let size_only = device_weights(&[profile(0, 100, 0.1), profile(1, 100, 0.9)], WeightScheme::Size).unwrap();
        assert_eq!(size_only.omega, vec![0.5, 0.5]);
        assert!(matches!(
            device_weights(&[profile(0, 10, 0.0)], WeightScheme::SizeReliability),
            Err(Error::Config(_))
        ));
        assert!(device_weights(&[], WeightScheme::Size).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let u = vec![GradientVector::new(vec![2.0, 0.0]), GradientVector::new(vec![0.0, 2.0])];
        let g = aggregate(&u, &DeviceWeight { omega: vec![0.5, 0.5] }).unwrap();
        assert_eq!(g.values, vec![1.0, 1.0]);
        let g = aggregate(&u, &DeviceWeight { omega: vec![0.75, 0.25] }).unwrap();
        assert_eq!(g.values, vec![1.5, 0.5]);
        let single = aggregate(&u[..1], &DeviceWeight { omega: vec![1.0] }).unwrap();
        assert_eq!(single, u[0]);
        let bad = vec![GradientVector::new(vec![1.0]), GradientVector::new(vec![1.0, 2.0])];
        assert!(matches!(aggregate(&bad, &DeviceWeight { omega: vec![0.5, 0.5] }), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_examples() {
        let a = ModelParams::from_values(&[1, 1], vec![3.0, 4.0]).unwrap();
        let z = a.zeros_like();
        assert_eq!(compute_divergence(&a, &a).unwrap(), 0.0);
        assert_eq!(compute_divergence(&a, &z).unwrap(), 5.0);
        let scaled = ModelParams::from_values(&[1, 1], vec![-6.0, -8.0]).unwrap();
        assert_eq!(compute_divergence(&scaled, &z).unwrap(), 10.0);
        let other = init_model(&[2, 2], 0).unwrap();
        assert!(compute_divergence(&a, &other).is_err());
    }

    fn report(d: f64, tau: f64, interval: u32) -> DivergenceReport {
        DivergenceReport {
            divergences: vec![d],
            tau,
            sync_interval: interval,
            i_min: 1,
            i_max: 8,
        }
    }

    #[test]
    fn interval_rules() {
        assert_eq!(adjust_sync_interval(&report(0.1, 1.0, 4)).sync_interval, 5);
        assert_eq!(adjust_sync_interval(&report(2.0, 1.0, 4)).sync_interval, 2);
        assert_eq!(adjust_sync_interval(&report(2.0, 1.0, 1)).sync_interval, 1);
        assert_eq!(adjust_sync_interval(&report(0.0, 1.0, 8)).sync_interval, 8);
    }

    #[test]
    fn controller_auto_tau_freezes_after_warmup() {
        let mut c = IntervalController::new(
            TauMode::Auto { scale: 0.5, warmup_rounds: 3 },
            2,
            1,
            8,
        )
        .unwrap();
        assert!(c.observe(&[1.0, 3.0]).is_none());
        assert!(c.observe(&[2.0, 2.0]).is_none());
        assert!(c.observe(&[4.0, 2.0]).is_none());
        assert_eq!(c.tau(), Some(1.0));
        assert_eq!(c.interval(), 2);
        c.observe(&[0.5, 0.2]).unwrap();
        assert_eq!(c.interval(), 3);
        c.observe(&[1.5, 0.2]).unwrap();
        assert_eq!(c.interval(), 1);
        assert!(IntervalController::new(TauMode::Fixed { tau: 0.0 }, 1, 1, 8).is_err());
        assert!(IntervalController::new(TauMode::Fixed { tau: 1.0 }, 1, 3, 2).is_err());
    }

    #[test]
    fn reconstruction_with_and_without_cache() {
        let m = init_model(&[2, 2], 0).unwrap();
        // Blocks: weight (4), bias (2).
        let idx = partition_blocks(&m, 4);
        let mut cache = GradientCache::new(0.5);
        let first = DeviceUpload {
            device_id: 0,
            blocks: vec![
                BlockPayload { block_id: 0, data: BlockData::Full(vec![1.0, 2.0, 3.0, 4.0]) },
                BlockPayload { block_id: 1, data: BlockData::Full(vec![2.0, 2.0]) },
            ],
        };
        let full = reconstruct_update(std::slice::from_ref(&first), &mut cache, &idx, 1).unwrap();
        assert_eq!(full[0].values, vec![1.0, 2.0, 3.0, 4.0, 2.0, 2.0]);

        let qb = quantize_block(0, &[0.3, -0.4, 0.0, 0.0], 2).unwrap();
        let second = DeviceUpload {
            device_id: 0,
            blocks: vec![BlockPayload { block_id: 0, data: BlockData::Quantized(qb.clone()) }],
        };
        let out = reconstruct_update(std::slice::from_ref(&second), &mut cache, &idx, 2).unwrap();
        assert_eq!(&out[0].values[4..], &[1.0, 1.0]);
        let (cached, round) = cache.get(0, 0).unwrap();
        assert_eq!(cached, crate::compression::dequantize_block(&qb).as_slice());
        assert_eq!(round, 2);

        let mut no_cache = GradientCache::new(0.0);
        reconstruct_update(std::slice::from_ref(&first), &mut no_cache, &idx, 1).unwrap();
        let out = reconstruct_update(&[second], &mut no_cache, &idx, 2).unwrap();
        assert_eq!(&out[0].values[4..], &[0.0, 0.0]);

        let bogus = DeviceUpload {
            device_id: 0,
            blocks: vec![BlockPayload { block_id: 9, data: BlockData::Full(vec![0.0]) }],
        };
        assert!(matches!(
            reconstruct_update(&[bogus], &mut no_cache, &idx, 3),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn broadcast_accounting() {
        let m = init_model(&[20, 64, 5], 4).unwrap();
        let idx = partition_blocks(&m, 64);
        let trace = BandwidthTrace {
            device_id: 0,
            samples: vec![TraceSample { t_s: 0.0, bandwidth_mbps: 50.0, latency_ms: 20.0 }],
        };
        let mut sim = NetSim::new([(0, trace.clone()), (1, BandwidthTrace { device_id: 1, ..trace })]).unwrap();
        assert!(broadcast_global(&m, &[], &idx, &mut sim, 0.0, 1).unwrap().is_empty());
        assert_eq!(sim.scheduled(), 0);
        let out = broadcast_global(&m, &[1], &idx, &mut sim, 0.0, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].event.bytes, full_payload_size(&idx));
        assert_eq!(out[0].event.bytes, 16 + 27 * 8 + 4 * 1669);
        assert_eq!(out[0].model, m);
        assert_eq!(sim.bytes_between(Node::Cloud, Node::Device(1)), full_payload_size(&idx));
    }
}
