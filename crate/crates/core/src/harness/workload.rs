//! Everything a run needs before round one: data shards, device profiles,
//! link traces, the initial model and its block partition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::compression::CompressionSchedule;
use crate::coordinator::{cluster_devices, cluster_schedules, ClusterAssignment, ClusterFeatures};
use crate::error::{Error, Result};
use crate::netsim::{gen_trace, load_traces, BandwidthTrace, DeviceProfile};
use crate::tensor::{init_model, make_synthetic_dataset, partition_blocks, BlockIndex, Dataset, ModelParams};

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_PROFILES: u64 = 3;
const STREAM_CLUSTERS: u64 = 4;
const STREAM_TRACE: u64 = 0x100;
const STREAM_DEVICE: u64 = 0x10000;

/// Independent sub-seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn device_seed(seed: u64, device: u32) -> u64 {
    derive_seed(seed, STREAM_DEVICE + device as u64)
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub theta0: ModelParams,
    pub index: BlockIndex,
    pub shards: Vec<Dataset>,
    pub validation: Dataset,
    pub profiles: Vec<DeviceProfile>,
    /// Trace per device, in device order.
    pub traces: Vec<BandwidthTrace>,
    pub clusters: ClusterAssignment,
    /// Compression schedule per device, after cluster overrides.
    pub schedules: Vec<CompressionSchedule>,
    pub rounds_per_epoch: u32,
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig) -> Result<Workload> {
        cfg.validate()?;
        let seed = cfg.seed;
        let data = make_synthetic_dataset(&cfg.dataset_spec(), derive_seed(seed, STREAM_DATA))?;
        let (train, validation) = data.split_tail(cfg.validation_samples());

        let k = cfg.devices.count;
        let equal = train.len() / k;
        let explicit = cfg.devices.profiles.as_ref();
        let sizes: Vec<usize> = (0..k)
            .map(|i| {
                explicit
                    .and_then(|ps| ps[i].dataset_size)
                    .unwrap_or(equal)
            })
            .collect();
        if sizes.iter().sum::<usize>() > train.len() {
            return Err(Error::Config(format!(
                "device shards need {} rows, training set has {}",
                sizes.iter().sum::<usize>(),
                train.len()
            )));
        }
        let mut start = 0;
        let shards: Vec<Dataset> = sizes
            .iter()
            .map(|&n| {
                let idx: Vec<usize> = (start..start + n).collect();
                start += n;
                train.select(&idx)
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROFILES));
        let (clo, chi) = cfg.devices.compute_time_range_s;
        let (rlo, rhi) = cfg.devices.reliability_range;
        let profiles: Vec<DeviceProfile> = (0..k)
            .map(|i| {
                let ct = if chi > clo { rng.random_range(clo..=chi) } else { clo };
                let rel = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
                let (ct, rel, trace_id) = match explicit {
                    Some(ps) => (
                        ps[i].compute_time_per_batch_s,
                        ps[i].reliability,
                        ps[i].trace_id.unwrap_or(i as u32),
                    ),
                    None => (ct, rel, i as u32),
                };
                DeviceProfile {
                    device_id: i as u32,
                    compute_time_per_batch_s: ct,
                    dataset_size: sizes[i],
                    reliability: rel,
                    trace_id,
                }
            })
            .collect();

        let traces = match &cfg.devices.trace_file {
            Some(path) => {
                let loaded = load_traces(path)?;
                profiles
                    .iter()
                    .map(|p| {
                        loaded
                            .iter()
                            .find(|t| t.device_id == p.trace_id)
                            .map(|t| BandwidthTrace {
                                device_id: p.device_id,
                                samples: t.samples.clone(),
                            })
                            .ok_or_else(|| {
                                Error::Config(format!(
                                    "device {} references missing trace {}",
                                    p.device_id, p.trace_id
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => profiles
                .iter()
                .map(|p| {
                    let t = gen_trace(&cfg.devices.trace, p.trace_id, derive_seed(seed, STREAM_TRACE + p.trace_id as u64))?;
                    Ok(BandwidthTrace {
                        device_id: p.device_id,
                        samples: t.samples,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };

        let features: Vec<ClusterFeatures> = profiles
            .iter()
            .zip(&traces)
            .map(|(p, t)| ClusterFeatures {
                mean_bandwidth_mbps: t.mean_bandwidth(),
                compute_time_per_batch_s: p.compute_time_per_batch_s,
                dataset_size: p.dataset_size as f64,
            })
            .collect();
        let clusters = cluster_devices(&features, cfg.policy.clusters_k, derive_seed(seed, STREAM_CLUSTERS))?;
        let per_cluster = if cfg.policy.clusters_k == 1 {
            vec![cfg.policy.schedule()]
        } else {
            cluster_schedules(&cfg.policy.schedule(), &clusters, &features)?
        };
        let schedules = clusters.assignment.iter().map(|&c| per_cluster[c]).collect();

        let theta0 = init_model(&cfg.arch, derive_seed(seed, STREAM_INIT))?;
        let index = partition_blocks(&theta0, cfg.policy.block_size);
        let per_round = cfg.batch_size * cfg.local_batches_per_round;
        let max_shard = sizes.iter().copied().max().unwrap_or(1);
        let rounds_per_epoch = max_shard.div_ceil(per_round).max(1) as u32;

        Ok(Workload {
            theta0,
            index,
            shards,
            validation,
            profiles,
            traces,
            clusters,
            schedules,
            rounds_per_epoch,
        })
    }

    pub fn epoch_of(&self, round: u32) -> u32 {
        round.div_ceil(self.rounds_per_epoch)
    }
}

/// A device's pass over its shard, reshuffled at the start of every pass.
#[derive(Debug, Clone)]
pub struct ShardCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShardCursor {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        ShardCursor { order, pos: 0, rng }
    }

    /// The next `n` row indices, wrapping into a fresh permutation.
    pub fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
