//! Deterministic discrete-event simulation of the cloud-edge links.
//!
//! Every device has one private link to the cloud, described by its trace.
//! A transfer started at `t` completes at
//! `t + latency_ms / 1000 + bytes * 8 / (bandwidth_mbps * 1e6)`, with both
//! trace values frozen at `t`. Links do not share capacity.

mod trace;

pub use trace::{
    gen_trace, load_traces, read_traces, sample_bandwidth, save_traces, write_traces,
    BandwidthTrace, TraceSample, TraceSpec, BANDWIDTH_LIMITS_MBPS, LATENCY_LIMITS_MS,
    TRACE_CSV_HEADER,
};

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of one edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: u32,
    pub compute_time_per_batch_s: f64,
    pub dataset_size: usize,
    pub reliability: f64,
    pub trace_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    Cloud,
    Device(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    TransferComplete,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetEvent {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub src: Node,
    pub dst: Node,
    pub bytes: u64,
    /// Time the transfer (or control timer) was started.
    pub sent_at: f64,
}

impl NetEvent {
    pub fn delay(&self) -> f64 {
        self.time - self.sent_at
    }

    pub fn direction(&self) -> Direction {
        if self.dst == Node::Cloud {
            Direction::Uplink
        } else {
            Direction::Downlink
        }
    }
}

struct Queued(NetEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .time
            .total_cmp(&other.0.time)
            .then(self.0.seq.cmp(&other.0.seq))
    }
}

/// Closed-form transfer time for one message.
pub fn transfer_delay(bytes: u64, sample: &TraceSample) -> f64 {
    sample.latency_ms / 1000.0 + bytes as f64 * 8.0 / (sample.bandwidth_mbps * 1e6)
}

pub struct NetSim {
    clock: f64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    traces: BTreeMap<u32, BandwidthTrace>,
    counters: BTreeMap<(Node, Node), u64>,
    scheduled: u64,
    processed: u64,
}

impl NetSim {
    /// Builds a simulator with one trace per device, keyed by device id.
    pub fn new(traces: impl IntoIterator<Item = (u32, BandwidthTrace)>) -> Result<Self> {
        let traces: BTreeMap<u32, BandwidthTrace> = traces.into_iter().collect();
        for t in traces.values() {
            t.validate()?;
        }
        Ok(NetSim {
            clock: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            traces,
            counters: BTreeMap::new(),
            scheduled: 0,
            processed: 0,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    fn link_trace(&self, src: Node, dst: Node) -> Result<&BandwidthTrace> {
        let device = match (src, dst) {
            (Node::Device(d), _) | (Node::Cloud, Node::Device(d)) => d,
            (Node::Cloud, Node::Cloud) => {
                return Err(Error::config("a transfer needs a device endpoint"));
            }
        };
        self.traces
            .get(&device)
            .ok_or_else(|| Error::config(format!("unknown device {device}")))
    }

    /// Trace values a transfer on this device's link would see at `t`.
    pub fn link_state(&self, device: u32, t: f64) -> Result<TraceSample> {
        Ok(sample_bandwidth(self.link_trace(Node::Device(device), Node::Cloud)?, t))
    }

    fn push(&mut self, ev: NetEvent) -> NetEvent {
        self.queue.push(Reverse(Queued(ev)));
        self.scheduled += 1;
        ev
    }

    /// Schedules a transfer starting at `t_now`; its bytes are counted at once.
    pub fn transmit(&mut self, src: Node, dst: Node, bytes: u64, t_now: f64) -> Result<NetEvent> {
        if t_now < self.clock {
            return Err(Error::Invariant(format!(
                "transfer started at {t_now} before simulation clock {}",
                self.clock
            )));
        }
        let sample = sample_bandwidth(self.link_trace(src, dst)?, t_now);
        let seq = self.next_seq;
        self.next_seq += 1;
        *self.counters.entry((src, dst)).or_insert(0) += bytes;
        Ok(self.push(NetEvent {
            time: t_now + transfer_delay(bytes, &sample),
            seq,
            kind: EventKind::TransferComplete,
            src,
            dst,
            bytes,
            sent_at: t_now,
        }))
    }

    /// Schedules a zero-byte timer on the cloud.
    pub fn schedule_control(&mut self, at: f64) -> Result<NetEvent> {
        if at < self.clock {
            return Err(Error::Invariant(format!(
                "control event at {at} before simulation clock {}",
                self.clock
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(self.push(NetEvent {
            time: at,
            seq,
            kind: EventKind::Control,
            src: Node::Cloud,
            dst: Node::Cloud,
            bytes: 0,
            sent_at: self.clock,
        }))
    }

    /// Pops the earliest `(time, seq)` event; `None` once the queue is empty.
    pub fn step(&mut self) -> Option<NetEvent> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.clock = self.clock.max(ev.time);
        self.processed += 1;
        Some(ev)
    }

    /// Processes every pending event in order.
    pub fn run_until_idle(&mut self) -> Vec<NetEvent> {
        std::iter::from_fn(|| self.step()).collect()
    }

    /// Moves the clock forward without processing events.
    pub fn advance_to(&mut self, t: f64) {
        self.clock = self.clock.max(t);
    }

    pub fn bytes_between(&self, src: Node, dst: Node) -> u64 {
        self.counters.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> impl Iterator<Item = ((Node, Node), u64)> + '_ {
        self.counters.iter().map(|(k, v)| (*k, *v))
    }

    pub fn total_bytes(&self, direction: Direction) -> u64 {
        self.counters
            .iter()
            .filter(|((_, dst), _)| match direction {
                Direction::Uplink => *dst == Node::Cloud,
                Direction::Downlink => *dst != Node::Cloud,
            })
            .map(|(_, v)| *v)
            .sum()
    }
}
