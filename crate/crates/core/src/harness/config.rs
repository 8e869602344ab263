//! Experiment configuration, loaded from TOML.
//!
//! Every section has defaults matching the desk-scale workload, so a config
//! file only needs the keys it changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::CompressionSchedule;
use crate::coordinator::{TauMode, WeightScheme};
use crate::error::{Error, Result};
use crate::importance::TemporalAttentionParams;
use crate::netsim::TraceSpec;
use crate::optim::{AdamwParams, OptimizerKind};
use crate::tensor::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Acesync,
    Fullsync,
    Topk,
    FedavgPeriodic,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Acesync,
        Method::Fullsync,
        Method::Topk,
        Method::FedavgPeriodic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Acesync => "acesync",
            Method::Fullsync => "fullsync",
            Method::Topk => "topk",
            Method::FedavgPeriodic => "fedavg_periodic",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub class_sep: f64,
    pub noise_sigma: f64,
    /// Fraction of samples held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 10_000,
            class_sep: 4.0,
            noise_sigma: 1.0,
            validation_fraction: 0.2,
        }
    }
}

/// Explicit per-device settings; anything omitted falls back to generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub compute_time_per_batch_s: f64,
    pub reliability: f64,
    #[serde(default)]
    pub dataset_size: Option<usize>,
    #[serde(default)]
    pub trace_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DevicesConfig {
    pub count: usize,
    pub compute_time_range_s: (f64, f64),
    pub reliability_range: (f64, f64),
    pub trace: TraceSpec,
    /// Trace CSV to use instead of generating traces.
    pub trace_file: Option<PathBuf>,
    pub profiles: Option<Vec<ProfileSpec>>,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        DevicesConfig {
            count: 8,
            compute_time_range_s: (0.002, 0.01),
            reliability_range: (0.8, 1.0),
            trace: TraceSpec {
                duration_s: 60.0,
                step_s: 0.5,
                bw_range: (5.0, 200.0),
                lat_range: (10.0, 300.0),
                jitter_sigma: 0.15,
            },
            trace_file: None,
            profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Fraction of blocks sent at full precision.
    pub p: f64,
    pub alpha: f64,
    pub w1: f64,
    pub w2: f64,
    pub rho: f64,
    /// Magnitude window length.
    pub window: usize,
    pub beta: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub b_min: u8,
    pub b_max: u8,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: TauMode,
    pub i_min: u32,
    pub i_max: u32,
    pub initial_interval: u32,
    pub block_size: usize,
    pub clusters_k: usize,
    /// Seconds of link time a device may spend per upload; `None` means no
    /// cap, written as `"unbounded"` in config files.
    #[serde(with = "budget_window")]
    pub budget_window_s: Option<f64>,
    /// Step size of the attention calibration; zero disables it.
    pub calibration_eta: f64,
    pub weighting: WeightScheme,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            p: 0.1,
            alpha: 0.7,
            w1: 4.0,
            w2: 1.0,
            rho: 0.9,
            window: 16,
            beta: 0.02,
            c_min: 0.25,
            c_max: 0.75,
            b_min: 2,
            b_max: 8,
            gamma: 0.9,
            lambda: 0.0,
            tau: TauMode::default(),
            i_min: 1,
            i_max: 8,
            initial_interval: 1,
            block_size: 64,
            clusters_k: 1,
            budget_window_s: Some(0.002),
            calibration_eta: 0.1,
            weighting: WeightScheme::SizeReliability,
        }
    }
}

impl PolicyConfig {
    pub fn schedule(&self) -> CompressionSchedule {
        CompressionSchedule {
            c_min: self.c_min,
            c_max: self.c_max,
            beta: self.beta,
            b_min: self.b_min,
            b_max: self.b_max,
        }
    }

    pub fn attention(&self) -> TemporalAttentionParams {
        TemporalAttentionParams {
            w1: self.w1,
            w2: self.w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub topk_fraction: f64,
    pub fedavg_period: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            topk_fraction: 0.1,
            fedavg_period: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Layer widths, input first.
    pub arch: Vec<usize>,
    pub rounds: u32,
    pub local_batches_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adamw: AdamwParams,
    pub data: DataConfig,
    pub devices: DevicesConfig,
    pub policy: PolicyConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Acesync,
            seed: 1,
            arch: vec![20, 64, 5],
            rounds: 40,
            local_batches_per_round: 5,
            batch_size: 25,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            adamw: AdamwParams::default(),
            data: DataConfig::default(),
            devices: DevicesConfig::default(),
            policy: PolicyConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

mod budget_window {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    const UNBOUNDED: &str = "unbounded";

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Seconds(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(w) => Repr::Seconds(*w),
            None => Repr::Word(UNBOUNDED.into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Seconds(w) => Ok(Some(w)),
            Repr::Word(w) if w == UNBOUNDED => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "budget_window_s must be seconds or \"{UNBOUNDED}\", got \"{w}\""
            ))),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl ExperimentConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples: self.data.samples,
            dim: self.arch.first().copied().unwrap_or(0),
            classes: self.arch.last().copied().unwrap_or(0),
            class_sep: self.data.class_sep,
            noise_sigma: self.data.noise_sigma,
        }
    }

    pub fn validation_samples(&self) -> usize {
        (self.data.samples as f64 * self.data.validation_fraction).round() as usize
    }

    /// Rejects any out-of-range setting before a run starts.
    pub fn validate(&self) -> Result<()> {
        check(self.arch.len() >= 2 && self.arch.iter().all(|&w| w > 0), || {
            format!("arch must list at least two positive widths, got {:?}", self.arch)
        })?;
        check(self.arch.last().copied().unwrap_or(0) >= 2, || {
            "the output layer needs at least 2 classes".into()
        })?;
        check(self.local_batches_per_round >= 1 && self.batch_size >= 1, || {
            "local_batches_per_round and batch_size must be >= 1".into()
        })?;
        check(self.lr > 0.0 && self.lr.is_finite(), || format!("lr {} must be > 0", self.lr))?;

        let d = &self.data;
        check(d.validation_fraction > 0.0 && d.validation_fraction < 1.0, || {
            format!("validation_fraction {} must be in (0, 1)", d.validation_fraction)
        })?;
        let n_val = self.validation_samples();
        check(n_val >= 1 && n_val < d.samples, || {
            format!("validation split of {n_val} rows is unusable with {} samples", d.samples)
        })?;

        let dev = &self.devices;
        check(dev.count >= 1 && dev.count < u16::MAX as usize, || {
            format!("device count {} out of range", dev.count)
        })?;
        let (clo, chi) = dev.compute_time_range_s;
        check(clo > 0.0 && clo <= chi && chi.is_finite(), || {
            format!("compute_time_range_s [{clo}, {chi}] must be positive and ordered")
        })?;
        let (rlo, rhi) = dev.reliability_range;
        check(unit(rlo) && unit(rhi) && rlo <= rhi, || {
            format!("reliability_range [{rlo}, {rhi}] must be ordered within [0, 1]")
        })?;
        if dev.trace_file.is_none() {
            dev.trace.validate()?;
        }
        if let Some(profiles) = &dev.profiles {
            check(profiles.len() == dev.count, || {
                format!("{} profiles given for {} devices", profiles.len(), dev.count)
            })?;
            for (i, p) in profiles.iter().enumerate() {
                check(p.compute_time_per_batch_s > 0.0 && p.compute_time_per_batch_s.is_finite(), || {
                    format!("device {i}: compute_time_per_batch_s must be > 0")
                })?;
                check(unit(p.reliability), || format!("device {i}: reliability must be in [0, 1]"))?;
                check(p.dataset_size != Some(0), || format!("device {i}: dataset_size must be > 0"))?;
            }
            let explicit: usize = profiles.iter().filter_map(|p| p.dataset_size).sum();
            check(explicit <= d.samples - n_val, || {
                format!("explicit dataset sizes total {explicit}, more than the training set")
            })?;
        }
        check((d.samples - n_val) / dev.count >= 1, || {
            "every device needs at least one training sample".into()
        })?;

        let p = &self.policy;
        check(p.p > 0.0 && p.p <= 1.0, || format!("p {} must be in (0, 1]", p.p))?;
        check(unit(p.alpha), || format!("alpha {} must be in [0, 1]", p.alpha))?;
        check(p.w1.is_finite() && p.w2.is_finite(), || "w1 and w2 must be finite".into())?;
        check(p.rho >= 0.0 && p.rho < 1.0, || format!("rho {} must be in [0, 1)", p.rho))?;
        check(p.window >= 1, || "window must be >= 1".into())?;
        self.policy.schedule().validate()?;
        check(unit(p.gamma), || format!("gamma {} must be in [0, 1]", p.gamma))?;
        check(unit(p.lambda), || format!("lambda {} must be in [0, 1]", p.lambda))?;
        check(p.i_min >= 1 && p.i_min <= p.i_max, || {
            format!("interval bounds must satisfy 1 <= i_min <= i_max, got [{}, {}]", p.i_min, p.i_max)
        })?;
        check(p.block_size >= 1, || "block_size must be >= 1".into())?;
        check(p.clusters_k >= 1 && p.clusters_k <= dev.count, || {
            format!("clusters_k {} must be in [1, {}]", p.clusters_k, dev.count)
        })?;
        if let Some(w) = p.budget_window_s {
            check(w > 0.0 && w.is_finite(), || format!("budget_window_s {w} must be > 0"))?;
        }
        check(p.calibration_eta >= 0.0 && p.calibration_eta.is_finite(), || {
            "calibration_eta must be >= 0".into()
        })?;
        match p.tau {
            TauMode::Fixed { tau } => check(tau > 0.0 && tau.is_finite(), || format!("tau {tau} must be > 0"))?,
            TauMode::Auto { scale, warmup_rounds } => check(scale > 0.0 && scale.is_finite() && warmup_rounds >= 1, || {
                "auto tau needs scale > 0 and warmup_rounds >= 1".into()
            })?,
        }

        let b = &self.baseline;
        check(b.topk_fraction > 0.0 && b.topk_fraction <= 1.0, || {
            format!("topk_fraction {} must be in (0, 1]", b.topk_fraction)
        })?;
        check(b.fedavg_period >= 1, || "fedavg_period must be >= 1".into())?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative trace paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(tf), Some(dir)) = (&cfg.devices.trace_file, path.parent()) {
            if tf.is_relative() {
                cfg.devices.trace_file = Some(dir.join(tf));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
