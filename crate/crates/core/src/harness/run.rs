//! Round loops for the adaptive protocol and the three baselines.
//!
//! All methods share one round skeleton. Devices start computing when the
//! round opens, upload once their compute time has elapsed, and the cloud
//! aggregates when the last upload lands. A broadcast, when there is one,
//! starts at that moment and the round closes when every copy is delivered.
//! Divergence is measured on the device models before any broadcast.

use crate::budget::{message_budget, plan_transmission};
use crate::compression::wire::{self, BlockData, BlockPayload, Body, Message, MessageKind};
use crate::compression::{
    accumulate_residual, apply_error_feedback, dequantize_block, full_payload_size, quantize_block,
    ratio_to_bits, schedule_ratio, sparse_payload_size, ErrorFeedbackState, Precision, TransmissionPlan,
};
use crate::coordinator::{
    aggregate, broadcast_global, compute_divergence, device_weights, model_message, reconstruct_update,
    DeviceUpload, DeviceWeight, GradientCache, IntervalController,
};
use crate::error::{Error, Result};
use crate::importance::{
    calibrate_attention, fuse_importance, structural_attention, temporal_attention, top_p_count,
    top_p_select, update_grad_stats, Calibration, GradStats,
};
use crate::netsim::{Direction, NetEvent, NetSim, Node};
use crate::optim::Optimizer;
use crate::tensor::{apply_update, backward_with_loss, forward_loss, BlockIndex, GradientVector, ModelParams};

use super::config::{ExperimentConfig, Method};
use super::metrics::{MetricsLog, MetricsRow};
use super::workload::{device_seed, ShardCursor, Workload};

/// One device upload as seen by error feedback.
#[derive(Debug)]
pub struct UploadRecord<'a> {
    pub round: u32,
    pub device_id: u32,
    /// Raw local gradient before error feedback.
    pub gradient: &'a GradientVector,
    pub gamma: f64,
    pub residual_before: &'a [f64],
    /// Values the cloud reconstructs, zero where nothing was sent.
    pub sent: &'a GradientVector,
    pub residual_after: &'a [f64],
    pub bits: u8,
    pub compression_c: f64,
    pub bytes: u64,
}

/// Hooks into a running experiment. Every method has a no-op default.
pub trait RunObserver {
    fn on_upload(&mut self, _record: &UploadRecord<'_>) {}

    /// Aggregated update the cloud optimizer is about to apply.
    fn on_global_update(&mut self, _round: u32, _update: &GradientVector) {}

    /// Called with mutable device models right before divergence is measured.
    fn before_divergence(&mut self, _round: u32, _devices: &mut [ModelParams], _global: &ModelParams) {}

    /// Divergences of this control step and the interval that results.
    fn on_control(&mut self, _round: u32, _divergences: &[f64], _interval: u32) {}
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

/// Everything a run produces besides the metrics rows.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: MetricsLog,
    /// Netsim's own byte counters at the end of the run.
    pub netsim_uplink_bytes: u64,
    pub netsim_downlink_bytes: u64,
    /// Every processed event, in processing order.
    pub events: Vec<NetEvent>,
    pub final_model: ModelParams,
}

/// Runs whichever method the config names.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    Ok(run_with_observer(cfg, &mut NoopObserver)?.log)
}

/// Like [`run_experiment`], restricted to the baselines.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    if cfg.method == Method::Acesync {
        return Err(Error::Config("run_baseline needs a baseline method".into()));
    }
    run_experiment(cfg)
}

pub fn run_with_observer(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<RunOutcome> {
    let workload = Workload::build(cfg)?;
    let mut engine = Engine::new(cfg, workload, observer)?;
    match cfg.method {
        Method::Acesync => engine.run_acesync()?,
        Method::Fullsync => engine.run_fullsync()?,
        Method::Topk => engine.run_topk()?,
        Method::FedavgPeriodic => engine.run_fedavg()?,
    }
    engine.log.validate()?;
    Ok(RunOutcome {
        netsim_uplink_bytes: engine.sim.total_bytes(Direction::Uplink),
        netsim_downlink_bytes: engine.sim.total_bytes(Direction::Downlink),
        log: engine.log,
        events: engine.events,
        final_model: engine.theta,
    })
}

/// Traffic and timing gathered while a round is in flight.
#[derive(Default)]
struct RoundTally {
    uplink: u64,
    downlink: u64,
    delays: Vec<f64>,
    losses: Vec<f64>,
    compression: Vec<f64>,
}

struct Engine<'a> {
    cfg: &'a ExperimentConfig,
    w: Workload,
    sim: NetSim,
    theta: ModelParams,
    models: Vec<ModelParams>,
    cursors: Vec<ShardCursor>,
    weights: DeviceWeight,
    optimizer: Optimizer,
    events: Vec<NetEvent>,
    log: MetricsLog,
    observer: &'a mut dyn RunObserver,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ExperimentConfig, w: Workload, observer: &'a mut dyn RunObserver) -> Result<Self> {
        let sim = NetSim::new(w.traces.iter().map(|t| (t.device_id, t.clone())))?;
        let weights = device_weights(&w.profiles, cfg.policy.weighting)?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.adamw, w.theta0.len())?;
        let cursors = w
            .shards
            .iter()
            .enumerate()
            .map(|(k, s)| ShardCursor::new(s.len(), device_seed(cfg.seed, k as u32)))
            .collect();
        Ok(Engine {
            cfg,
            theta: w.theta0.clone(),
            models: vec![w.theta0.clone(); w.profiles.len()],
            cursors,
            sim,
            weights,
            optimizer,
            events: Vec::new(),
            log: MetricsLog::default(),
            observer,
            w,
        })
    }

    fn device_count(&self) -> usize {
        self.models.len()
    }

    fn index(&self) -> &BlockIndex {
        &self.w.index
    }

    fn compute_time(&self, k: usize) -> f64 {
        self.w.profiles[k].compute_time_per_batch_s * self.cfg.local_batches_per_round as f64
    }

    /// Gradient and mean loss of this round's local batches at the device model.
    fn local_gradient(&mut self, k: usize) -> Result<(GradientVector, f64)> {
        let n = self.cfg.batch_size * self.cfg.local_batches_per_round;
        let rows = self.cursors[k].take(n);
        let batch = self.w.shards[k].select(&rows);
        let (g, report) = backward_with_loss(&self.models[k], &batch.as_batch())?;
        Ok((g, report.loss))
    }

    /// Encodes, checks the size against the framing rules, and transmits.
    fn send(&mut self, msg: &Message, expected: u64, src: Node, dst: Node, t: f64) -> Result<u64> {
        let bytes = wire::encode(msg).len() as u64;
        if bytes != expected {
            return Err(Error::Invariant(format!(
                "encoded message has {bytes} bytes, framing predicts {expected}"
            )));
        }
        self.sim.transmit(src, dst, bytes, t)?;
        Ok(bytes)
    }

    /// Processes every in-flight event; returns the latest completion time.
    fn drain(&mut self, floor: f64, tally: &mut RoundTally) -> f64 {
        let mut t = floor;
        for ev in self.sim.run_until_idle() {
            t = t.max(ev.time);
            if ev.direction() == Direction::Uplink {
                tally.delays.push(ev.delay());
            }
            self.events.push(ev);
        }
        t
    }

    fn broadcast(&mut self, round: u32, t: f64, tally: &mut RoundTally) -> Result<f64> {
        let targets: Vec<u32> = (0..self.device_count() as u32).collect();
        let deliveries = broadcast_global(&self.theta, &targets, &self.w.index, &mut self.sim, t, round)?;
        for d in deliveries {
            tally.downlink += d.event.bytes;
            self.models[d.device_id as usize] = d.model;
        }
        Ok(self.drain(t, tally))
    }

    fn divergences(&mut self, round: u32) -> Result<Vec<f64>> {
        self.observer.before_divergence(round, &mut self.models, &self.theta);
        self.models
            .iter()
            .map(|m| compute_divergence(m, &self.theta))
            .collect()
    }

    fn accuracy(&self) -> Result<f64> {
        let v = &self.w.validation;
        let report = forward_loss(&self.theta, &v.as_batch())?;
        Ok(report.correct as f64 / v.len() as f64)
    }

    fn push_row(&mut self, round: u32, t_end: f64, tally: RoundTally, divergences: &[f64], interval: u32) -> Result<()> {
        self.sim.advance_to(t_end);
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let max = |xs: &[f64]| xs.iter().cloned().fold(0.0, f64::max);
        let row = MetricsRow {
            round,
            epoch: self.w.epoch_of(round),
            uplink_bytes: tally.uplink,
            downlink_bytes: tally.downlink,
            train_loss: mean(&tally.losses),
            val_accuracy: self.accuracy()?,
            mean_divergence: mean(divergences),
            max_divergence: max(divergences),
            sync_interval: interval,
            mean_compression_c: mean(&tally.compression),
            sim_time_s: t_end,
            mean_sync_delay_s: mean(&tally.delays),
            max_sync_delay_s: max(&tally.delays),
        };
        self.log.rows.push(row);
        Ok(())
    }

    fn step_global(&mut self, round: u32, update: &GradientVector) -> Result<()> {
        self.observer.on_global_update(round, update);
        self.theta = self.optimizer.step(&self.theta, update)?;
        Ok(())
    }

    fn run_acesync(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let p = &cfg.policy;
        let n_blocks = self.index().len();
        let n = self.theta.len();
        let k_count = self.device_count();
        let structural = structural_attention(self.index(), self.theta.depth_count());
        let calibration = Calibration {
            eta: p.calibration_eta,
            ..Calibration::default()
        };
        let mut attention = p.attention();
        let mut stats: Vec<GradStats> = (0..k_count).map(|_| GradStats::new(n_blocks, p.rho, p.window)).collect();
        let mut feedback: Vec<ErrorFeedbackState> = (0..k_count).map(|_| ErrorFeedbackState::new(n, p.gamma)).collect();
        let mut cache = GradientCache::new(p.lambda);
        let mut controller = IntervalController::new(p.tau, p.initial_interval, p.i_min, p.i_max)?;
        let mut since_sync = 0u32;

        for round in 1..=cfg.rounds {
            let t0 = self.sim.clock();
            let mut tally = RoundTally::default();
            let mut uploads = Vec::with_capacity(k_count);
            let mut t_floor = t0;
            for k in 0..k_count {
                let id = k as u32;
                let (g, loss) = self.local_gradient(k)?;
                tally.losses.push(loss);
                let corrected = apply_error_feedback(&g, &feedback[k])?;
                update_grad_stats(&mut stats[k], &corrected, self.index())?;
                let temporal = temporal_attention(&stats[k], &attention);
                let importance = fuse_importance(&temporal, &structural, p.alpha)?;
                let top = top_p_select(&importance, p.p);

                let t_send = t0 + self.compute_time(k);
                t_floor = t_floor.max(t_send);
                let link = self.sim.link_state(id, t_send)?;
                let schedule = self.w.schedules[k];
                let c = schedule_ratio(link.bandwidth_mbps, &schedule);
                let bits = ratio_to_bits(c, &schedule);
                tally.compression.push(c);
                let budget = message_budget(link.bandwidth_mbps, p.budget_window_s);
                let plan = plan_transmission(&importance, &top, bits, self.index(), budget)?;
                let (blocks, sent) = build_payload(&plan, &corrected, self.index())?;

                let msg = Message {
                    kind: MessageKind::GradientBlocks,
                    sender: id as u16,
                    round,
                    body: Body::Blocks(blocks),
                };
                let bytes = self.send(&msg, plan.bytes(), Node::Device(id), Node::Cloud, t_send)?;
                tally.uplink += bytes;

                let before = feedback[k].residual.clone();
                accumulate_residual(&mut feedback[k], &corrected, &sent)?;
                self.observer.on_upload(&UploadRecord {
                    round,
                    device_id: id,
                    gradient: &g,
                    gamma: p.gamma,
                    residual_before: &before,
                    sent: &sent,
                    residual_after: &feedback[k].residual,
                    bits,
                    compression_c: c,
                    bytes,
                });

                self.models[k] = apply_update(&self.models[k], &g, cfg.lr)?;
                let Body::Blocks(blocks) = msg.body else { unreachable!() };
                uploads.push(DeviceUpload { device_id: id, blocks });
            }
            let t_agg = self.drain(t_floor, &mut tally);

            let updates = reconstruct_update(&uploads, &mut cache, self.index(), round as u64)?;
            let global = aggregate(&updates, &self.weights)?;
            self.step_global(round, &global)?;
            if calibration.eta > 0.0 {
                let refs: Vec<&GradStats> = stats.iter().collect();
                attention = calibrate_attention(&attention, &refs, &calibration);
            }

            let divergences = self.divergences(round)?;
            controller.observe(&divergences);
            let interval = controller.interval();
            self.observer.on_control(round, &divergences, interval);
            since_sync += 1;
            let t_end = if since_sync >= interval {
                since_sync = 0;
                self.broadcast(round, t_agg, &mut tally)?
            } else {
                t_agg
            };
            self.push_row(round, t_end, tally, &divergences, interval)?;
        }
        Ok(())
    }

    fn run_fullsync(&mut self) -> Result<()> {
        let full_bytes = full_payload_size(self.index());
        let plan = TransmissionPlan::full(self.index());
        let mut cache = GradientCache::new(0.0);
        for round in 1..=self.cfg.rounds {
            let t0 = self.sim.clock();
            let mut tally = RoundTally::default();
            let mut uploads = Vec::with_capacity(self.device_count());
            let mut t_floor = t0;
            for k in 0..self.device_count() {
                let id = k as u32;
                let (g, loss) = self.local_gradient(k)?;
                tally.losses.push(loss);
                let (blocks, _) = build_payload(&plan, &g, self.index())?;
                let msg = Message {
                    kind: MessageKind::GradientBlocks,
                    sender: id as u16,
                    round,
                    body: Body::Blocks(blocks),
                };
                let t_send = t0 + self.compute_time(k);
                t_floor = t_floor.max(t_send);
                tally.uplink += self.send(&msg, full_bytes, Node::Device(id), Node::Cloud, t_send)?;
                let Body::Blocks(blocks) = msg.body else { unreachable!() };
                uploads.push(DeviceUpload { device_id: id, blocks });
            }
            let t_agg = self.drain(t_floor, &mut tally);
            let updates = reconstruct_update(&uploads, &mut cache, self.index(), round as u64)?;
            let global = aggregate(&updates, &self.weights)?;
            self.step_global(round, &global)?;
            let divergences = self.divergences(round)?;
            self.observer.on_control(round, &divergences, 1);
            let t_end = self.broadcast(round, t_agg, &mut tally)?;
            self.push_row(round, t_end, tally, &divergences, 1)?;
        }
        Ok(())
    }

    fn run_topk(&mut self) -> Result<()> {
        let n = self.theta.len();
        let k_coords = top_p_count(self.cfg.baseline.topk_fraction, n);
        let expected = sparse_payload_size(k_coords);
        let mut feedback: Vec<ErrorFeedbackState> =
            (0..self.device_count()).map(|_| ErrorFeedbackState::new(n, 1.0)).collect();
        for round in 1..=self.cfg.rounds {
            let t0 = self.sim.clock();
            let mut tally = RoundTally::default();
            let mut updates = Vec::with_capacity(self.device_count());
            let mut t_floor = t0;
            for k in 0..self.device_count() {
                let id = k as u32;
                let (g, loss) = self.local_gradient(k)?;
                tally.losses.push(loss);
                let corrected = apply_error_feedback(&g, &feedback[k])?;
                let coords = top_k_coordinates(&corrected.values, k_coords);
                let mut sent = vec![0.0; n];
                for &(i, v) in &coords {
                    sent[i as usize] = v;
                }
                let sent = GradientVector::new(sent);
                let msg = Message {
                    kind: MessageKind::SparseCoords,
                    sender: id as u16,
                    round,
                    body: Body::Sparse(coords),
                };
                let t_send = t0 + self.compute_time(k);
                t_floor = t_floor.max(t_send);
                let bytes = self.send(&msg, expected, Node::Device(id), Node::Cloud, t_send)?;
                tally.uplink += bytes;
                let before = feedback[k].residual.clone();
                accumulate_residual(&mut feedback[k], &corrected, &sent)?;
                self.observer.on_upload(&UploadRecord {
                    round,
                    device_id: id,
                    gradient: &g,
                    gamma: 1.0,
                    residual_before: &before,
                    sent: &sent,
                    residual_after: &feedback[k].residual,
                    bits: 32,
                    compression_c: 0.0,
                    bytes,
                });
                updates.push(sent);
            }
            let t_agg = self.drain(t_floor, &mut tally);
            let global = aggregate(&updates, &self.weights)?;
            self.step_global(round, &global)?;
            let divergences = self.divergences(round)?;
            self.observer.on_control(round, &divergences, 1);
            let t_end = self.broadcast(round, t_agg, &mut tally)?;
            self.push_row(round, t_end, tally, &divergences, 1)?;
        }
        Ok(())
    }

    fn run_fedavg(&mut self) -> Result<()> {
        let period = self.cfg.baseline.fedavg_period;
        let full_bytes = full_payload_size(self.index());
        for round in 1..=self.cfg.rounds {
            let t0 = self.sim.clock();
            let mut tally = RoundTally::default();
            let mut t_floor = t0;
            for k in 0..self.device_count() {
                let (g, loss) = self.local_gradient(k)?;
                tally.losses.push(loss);
                self.models[k] = apply_update(&self.models[k], &g, self.cfg.lr)?;
                t_floor = t_floor.max(t0 + self.compute_time(k));
            }
            let sync = round % period == 0;
            let t_agg = if sync {
                for k in 0..self.device_count() {
                    let id = k as u32;
                    let mut msg = model_message(&self.models[k], self.index(), round);
                    msg.sender = id as u16;
                    let t_send = t0 + self.compute_time(k);
                    tally.uplink += self.send(&msg, full_bytes, Node::Device(id), Node::Cloud, t_send)?;
                }
                let t = self.drain(t_floor, &mut tally);
                let as_updates: Vec<GradientVector> = self
                    .models
                    .iter()
                    .map(|m| GradientVector::new(m.values.clone()))
                    .collect();
                let averaged = aggregate(&as_updates, &self.weights)?;
                self.theta = self.theta.with_values(averaged.values)?;
                t
            } else {
                t_floor
            };
            let divergences = self.divergences(round)?;
            self.observer.on_control(round, &divergences, period);
            let t_end = if sync {
                self.broadcast(round, t_agg, &mut tally)?
            } else {
                t_agg
            };
            self.push_row(round, t_end, tally, &divergences, period)?;
        }
        Ok(())
    }
}

/// Block payloads for `plan` cut from `values`, plus the dense vector the
/// receiver will reconstruct from them.
pub fn build_payload(
    plan: &TransmissionPlan,
    values: &GradientVector,
    index: &BlockIndex,
) -> Result<(Vec<BlockPayload>, GradientVector)> {
    if values.len() != index.total {
        return Err(Error::Shape(format!(
            "vector has {} entries, block index covers {}",
            values.len(),
            index.total
        )));
    }
    let mut sent = vec![0.0; index.total];
    let mut blocks = Vec::with_capacity(plan.blocks.len());
    for bp in &plan.blocks {
        let block = index
            .get(bp.block_id)
            .ok_or_else(|| Error::Protocol(format!("plan names unknown block {}", bp.block_id)))?;
        let slice = &values.values[block.range()];
        let data = match bp.precision {
            Precision::Full => {
                sent[block.range()].copy_from_slice(slice);
                BlockData::Full(slice.to_vec())
            }
            Precision::Quantized { bits } => {
                let qb = quantize_block(bp.block_id, slice, bits)?;
                sent[block.range()].copy_from_slice(&dequantize_block(&qb));
                BlockData::Quantized(qb)
            }
        };
        blocks.push(BlockPayload {
            block_id: bp.block_id,
            data,
        });
    }
    Ok((blocks, GradientVector::new(sent)))
}

/// The `k` largest-magnitude coordinates, ties to the lower index, returned
/// in ascending index order.
pub fn top_k_coordinates(values: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| (i as u32, values[i])).collect()
}
