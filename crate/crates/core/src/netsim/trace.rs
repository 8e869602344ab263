//! Piecewise-constant bandwidth/latency traces.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BANDWIDTH_LIMITS_MBPS: (f64, f64) = (5.0, 200.0);
pub const LATENCY_LIMITS_MS: (f64, f64) = (10.0, 300.0);
/// Pull toward the range midpoint per step.
const MEAN_REVERSION: f64 = 0.2;

pub const TRACE_CSV_HEADER: &str = "device_id,t_s,bandwidth_mbps,latency_ms";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t_s: f64,
    pub bandwidth_mbps: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    pub device_id: u32,
    pub samples: Vec<TraceSample>,
}

impl BandwidthTrace {
    /// Checks ordering and value sanity.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::config(format!("trace for device {} is empty", self.device_id)))?;
        if first.t_s != 0.0 {
            return Err(Error::config(format!(
                "trace for device {} must start at t = 0",
                self.device_id
            )));
        }
        for w in self.samples.windows(2) {
            if !(w[1].t_s > w[0].t_s) {
                return Err(Error::config(format!(
                    "trace for device {} is not strictly increasing in time",
                    self.device_id
                )));
            }
        }
        for s in &self.samples {
            check_sample(s).map_err(Error::Config)?;
        }
        Ok(())
    }

    pub fn mean_bandwidth(&self) -> f64 {
        self.samples.iter().map(|s| s.bandwidth_mbps).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

fn check_sample(s: &TraceSample) -> std::result::Result<(), String> {
    if !s.t_s.is_finite() || s.t_s < 0.0 {
        return Err(format!("time {} must be finite and >= 0", s.t_s));
    }
    if !(s.bandwidth_mbps.is_finite() && s.bandwidth_mbps > 0.0) {
        return Err(format!("bandwidth {} must be finite and > 0", s.bandwidth_mbps));
    }
    if !(s.latency_ms.is_finite() && s.latency_ms >= 0.0) {
        return Err(format!("latency {} must be finite and >= 0", s.latency_ms));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub duration_s: f64,
    pub step_s: f64,
    pub bw_range: (f64, f64),
    pub lat_range: (f64, f64),
    /// Step noise as a fraction of the range width.
    pub jitter_sigma: f64,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        let (blo, bhi) = self.bw_range;
        let (llo, lhi) = self.lat_range;
        if !(BANDWIDTH_LIMITS_MBPS.0 <= blo && blo <= bhi && bhi <= BANDWIDTH_LIMITS_MBPS.1) {
            return Err(Error::config(format!(
                "bandwidth range [{blo}, {bhi}] must lie within [5, 200] Mbps"
            )));
        }
        if !(LATENCY_LIMITS_MS.0 <= llo && llo <= lhi && lhi <= LATENCY_LIMITS_MS.1) {
            return Err(Error::config(format!(
                "latency range [{llo}, {lhi}] must lie within [10, 300] ms"
            )));
        }
        if !(self.step_s > 0.0 && self.step_s.is_finite()) {
            return Err(Error::config(format!("step_s {} must be > 0", self.step_s)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::config(format!("duration_s {} must be > 0", self.duration_s)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config(format!("jitter_sigma {} must be >= 0", self.jitter_sigma)));
        }
        Ok(())
    }
}

/// Mean-reverting random walk, clamped to the ranges, one sample per step.
pub fn gen_trace(spec: &TraceSpec, device_id: u32, seed: u64) -> Result<BandwidthTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ((spec.duration_s / spec.step_s).ceil() as usize).max(1);
    let walk = |x: f64, (lo, hi): (f64, f64), z: f64| {
        let mid = 0.5 * (lo + hi);
        (x + MEAN_REVERSION * (mid - x) + spec.jitter_sigma * (hi - lo) * z).clamp(lo, hi)
    };
    let mut bw = 0.5 * (spec.bw_range.0 + spec.bw_range.1);
    let mut lat = 0.5 * (spec.lat_range.0 + spec.lat_range.1);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let zb: f64 = StandardNormal.sample(&mut rng);
            let zl: f64 = StandardNormal.sample(&mut rng);
            bw = walk(bw, spec.bw_range, zb);
            lat = walk(lat, spec.lat_range, zl);
        }
        samples.push(TraceSample {
            t_s: i as f64 * spec.step_s,
            bandwidth_mbps: bw,
            latency_ms: lat,
        });
    }
    Ok(BandwidthTrace { device_id, samples })
}

/// Latest sample at or before `t`; the last sample beyond the end.
pub fn sample_bandwidth(trace: &BandwidthTrace, t: f64) -> TraceSample {
    let idx = trace.samples.partition_point(|s| s.t_s <= t);
    trace.samples[idx.saturating_sub(1)]
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    device_id: u32,
    t_s: f64,
    bandwidth_mbps: f64,
    latency_ms: f64,
}

/// Writes traces as CSV rows sorted by `(device_id, t_s)`.
pub fn write_traces<W: Write>(traces: &[BandwidthTrace], out: W) -> Result<()> {
    let mut sorted: Vec<&BandwidthTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| t.device_id);
    let mut w = csv::Writer::from_writer(out);
    for t in sorted {
        for s in &t.samples {
            w.serialize(TraceRow {
                device_id: t.device_id,
                t_s: s.t_s,
                bandwidth_mbps: s.bandwidth_mbps,
                latency_ms: s.latency_ms,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_traces(traces: &[BandwidthTrace], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_traces(traces, std::io::BufWriter::new(file))
}

/// Parses and validates a trace CSV; errors carry the offending line number.
pub fn read_traces<R: Read>(input: R) -> Result<Vec<BandwidthTrace>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRACE_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{TRACE_CSV_HEADER}`"),
        });
    }
    let mut traces: Vec<BandwidthTrace> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: TraceRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let sample = TraceSample {
            t_s: row.t_s,
            bandwidth_mbps: row.bandwidth_mbps,
            latency_ms: row.latency_ms,
        };
        check_sample(&sample).map_err(|msg| Error::Parse { line, msg })?;
        match traces.last_mut() {
            Some(t) if t.device_id == row.device_id => {
                let prev = t.samples.last().unwrap().t_s;
                if !(sample.t_s > prev) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("time {} does not increase past {prev}", sample.t_s),
                    });
                }
                t.samples.push(sample);
            }
            Some(t) if t.device_id > row.device_id => {
                return Err(Error::Parse {
                    line,
                    msg: format!("device {} appears after device {}", row.device_id, t.device_id),
                });
            }
            _ => {
                if sample.t_s != 0.0 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("first sample of device {} must have t_s = 0", row.device_id),
                    });
                }
                traces.push(BandwidthTrace {
                    device_id: row.device_id,
                    samples: vec![sample],
                });
            }
        }
    }
    if traces.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no trace rows (missing t = 0 sample)".into(),
        });
    }
    Ok(traces)
}

pub fn load_traces(path: &Path) -> Result<Vec<BandwidthTrace>> {
    let file = std::fs::File::open(path)?;
    read_traces(std::io::BufReader::new(file))
}
