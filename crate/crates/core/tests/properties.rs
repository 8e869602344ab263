//! Property tests over the compression, selection, aggregation, trace, wire
//! and metrics layers.

use acesync_core::compression::wire::{decode, encode, BlockData, BlockPayload, Body, Message, MessageKind};
use acesync_core::compression::{
    block_bytes, dequantize_block, quantize_block, ratio_to_bits, schedule_ratio, sparse_payload_size,
    CompressionSchedule, Precision, MESSAGE_HEADER_BYTES,
};
use acesync_core::coordinator::{aggregate, device_weights, WeightScheme};
use acesync_core::harness::{MetricsLog, MetricsRow};
use acesync_core::importance::top_p_count;
use acesync_core::netsim::{gen_trace, DeviceProfile, TraceSpec};
use acesync_core::tensor::{init_model, partition_blocks, GradientVector};
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = CompressionSchedule> {
    (0.01f64..0.5, 0.0f64..0.5, 0.0f64..0.1, 2u8..=8, 0u8..=8).prop_map(|(c_min, span, beta, b_min, extra)| {
        CompressionSchedule {
            c_min,
            c_max: c_min + span,
            beta,
            b_min,
            b_max: b_min + extra,
        }
    })
}

fn arch() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..12, 2..5)
}

fn as_f32(x: f64) -> f64 {
    x as f32 as f64
}

proptest! {
    #[test]
    fn quantization_error_is_bounded(
        g in prop::collection::vec(-50.0f64..50.0, 1..80),
        bits in 2u8..=16,
    ) {
        let qb = quantize_block(0, &g, bits).unwrap();
        let deq = dequantize_block(&qb);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bound = norm / (2.0 * ((1u32 << bits) - 1) as f64);
        for (x, y) in g.iter().zip(&deq) {
            prop_assert!((x - y).abs() <= bound * (1.0 + 1e-12) + 1e-300);
            // Signs survive quantization; a zero level may round either way to zero.
            prop_assert!(x * y >= 0.0);
        }
    }

    #[test]
    fn schedule_stays_in_bounds_and_is_monotone(
        s in schedule(),
        b1 in 0.0f64..300.0,
        b2 in 0.0f64..300.0,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let c_lo = schedule_ratio(lo, &s);
        let c_hi = schedule_ratio(hi, &s);
        prop_assert!(s.c_min <= c_hi && c_hi <= c_lo && c_lo <= s.c_max);
        let bits_lo = ratio_to_bits(c_lo, &s);
        let bits_hi = ratio_to_bits(c_hi, &s);
        prop_assert!(s.b_min <= bits_lo && bits_lo <= bits_hi && bits_hi <= s.b_max);
    }

    #[test]
    fn blocks_tile_the_parameter_vector(a in arch(), block_size in 1usize..40) {
        let m = init_model(&a, 0).unwrap();
        let idx = partition_blocks(&m, block_size);
        prop_assert_eq!(idx.total, m.len());
        let mut next = 0;
        for (i, b) in idx.blocks.iter().enumerate() {
            prop_assert_eq!(b.block_id, i);
            prop_assert_eq!(b.offset, next);
            prop_assert!(b.len >= 1 && b.len <= block_size);
            let seg = m.layout.iter().find(|l| l.offset <= b.offset && b.offset < l.offset + l.length).unwrap();
            prop_assert!(b.offset + b.len <= seg.offset + seg.length);
            next += b.len;
        }
        prop_assert_eq!(next, m.len());
    }

    #[test]
    fn weights_sum_to_one_and_aggregation_is_linear(
        devs in prop::collection::vec((1usize..2000, 0.05f64..1.0), 1..8),
        n in 1usize..30,
        a in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let profiles: Vec<DeviceProfile> = devs
            .iter()
            .enumerate()
            .map(|(i, &(size, rel))| DeviceProfile {
                device_id: i as u32,
                compute_time_per_batch_s: 0.01,
                dataset_size: size,
                reliability: rel,
                trace_id: i as u32,
            })
            .collect();
        for scheme in [WeightScheme::SizeReliability, WeightScheme::Size] {
            let w = device_weights(&profiles, scheme).unwrap();
            prop_assert!((w.omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.omega.iter().all(|&x| x > 0.0));
        }
        let w = device_weights(&profiles, WeightScheme::SizeReliability).unwrap();
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let u: Vec<GradientVector> = (0..devs.len()).map(|_| GradientVector::new((0..n).map(|_| next()).collect())).collect();
        let v: Vec<GradientVector> = (0..devs.len()).map(|_| GradientVector::new((0..n).map(|_| next()).collect())).collect();
        let mix: Vec<GradientVector> = u
            .iter()
            .zip(&v)
            .map(|(x, y)| GradientVector::new(x.values.iter().zip(&y.values).map(|(p, q)| a * p + q).collect()))
            .collect();
        let gu = aggregate(&u, &w).unwrap();
        let gv = aggregate(&v, &w).unwrap();
        let gm = aggregate(&mix, &w).unwrap();
        for i in 0..n {
            prop_assert!((gm.values[i] - (a * gu.values[i] + gv.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_traces_respect_ranges(
        lo_bw in 5.0f64..100.0,
        span_bw in 0.0f64..100.0,
        lo_lat in 10.0f64..150.0,
        span_lat in 0.0f64..150.0,
        jitter in 0.0f64..0.5,
        duration in 0.5f64..30.0,
        seed in any::<u64>(),
    ) {
        let spec = TraceSpec {
            duration_s: duration,
            step_s: 0.5,
            bw_range: (lo_bw, lo_bw + span_bw),
            lat_range: (lo_lat, lo_lat + span_lat),
            jitter_sigma: jitter,
        };
        let t = gen_trace(&spec, 3, seed).unwrap();
        prop_assert!(t.validate().is_ok());
        prop_assert_eq!(t.samples[0].t_s, 0.0);
        for w in t.samples.windows(2) {
            prop_assert!(w[0].t_s < w[1].t_s);
        }
        for s in &t.samples {
            prop_assert!(spec.bw_range.0 <= s.bandwidth_mbps && s.bandwidth_mbps <= spec.bw_range.1);
            prop_assert!(spec.lat_range.0 <= s.latency_ms && s.latency_ms <= spec.lat_range.1);
        }
        prop_assert_eq!(gen_trace(&spec, 3, seed).unwrap(), t);
    }

    #[test]
    fn block_messages_round_trip_with_predicted_length(
        a in arch(),
        block_size in 1usize..40,
        choices in prop::collection::vec((any::<bool>(), 0u8..=16, any::<bool>()), 1..60),
        round in any::<u32>(),
        sender in any::<u16>(),
        seed in any::<u64>(),
    ) {
        let m = init_model(&a, seed).unwrap();
        let idx = partition_blocks(&m, block_size);
        let mut payloads = Vec::new();
        let mut expected = Vec::new();
        let mut predicted = MESSAGE_HEADER_BYTES;
        for (b, &(include, raw_bits, quantized)) in idx.blocks.iter().zip(choices.iter().cycle()) {
            if !include {
                continue;
            }
            let values: Vec<f64> = m.values[b.range()].iter().map(|&x| as_f32(x * 3.0)).collect();
            if quantized {
                let bits = raw_bits.clamp(2, 16);
                let qb = quantize_block(b.block_id, &values, bits).unwrap();
                let mut received = qb.clone();
                received.scale = as_f32(qb.scale);
                payloads.push(BlockPayload { block_id: b.block_id, data: BlockData::Quantized(qb) });
                expected.push(BlockPayload { block_id: b.block_id, data: BlockData::Quantized(received) });
                predicted += block_bytes(b.len, Precision::Quantized { bits });
            } else {
                payloads.push(BlockPayload { block_id: b.block_id, data: BlockData::Full(values.clone()) });
                expected.push(BlockPayload { block_id: b.block_id, data: BlockData::Full(values) });
                predicted += block_bytes(b.len, Precision::Full);
            }
        }
        let msg = Message { kind: MessageKind::GradientBlocks, sender, round, body: Body::Blocks(payloads) };
        let bytes = encode(&msg);
        prop_assert_eq!(bytes.len() as u64, predicted);
        let back = decode(&bytes, &idx).unwrap();
        prop_assert_eq!(back, Message { body: Body::Blocks(expected), ..msg });
        // Any truncation is rejected.
        prop_assert!(decode(&bytes[..bytes.len() - 1], &idx).is_err());
    }

    #[test]
    fn sparse_messages_round_trip_with_predicted_length(
        a in arch(),
        coords in prop::collection::vec((any::<u32>(), -10.0f32..10.0), 0..50),
    ) {
        let m = init_model(&a, 1).unwrap();
        let idx = partition_blocks(&m, 64);
        let coords: Vec<(u32, f64)> = coords.iter().map(|&(i, v)| (i % m.len() as u32, v as f64)).collect();
        let msg = Message { kind: MessageKind::SparseCoords, sender: 2, round: 9, body: Body::Sparse(coords.clone()) };
        let bytes = encode(&msg);
        prop_assert_eq!(bytes.len() as u64, sparse_payload_size(coords.len()));
        prop_assert_eq!(decode(&bytes, &idx).unwrap(), msg);
    }

    #[test]
    fn halving_topk_fraction_halves_payload(f in 0.001f64..1.0, n in 1usize..5000) {
        let full = sparse_payload_size(top_p_count(f, n)) - MESSAGE_HEADER_BYTES;
        let half = sparse_payload_size(top_p_count(f / 2.0, n)) - MESSAGE_HEADER_BYTES;
        // Rounding the count up can leave half a coordinate over.
        prop_assert!(2 * half <= full + 8, "f {} n {}: {} vs {}", f, n, half, full);
    }

    #[test]
    fn metrics_round_trip_through_csv_and_json(
        rows in prop::collection::vec(
            (any::<u64>(), any::<u64>(), -1e6f64..1e6, 0.0f64..1.0, 0.0f64..1e3, 1u32..64, 0.0f64..1.0, 0.0f64..1e4),
            1..12,
        ),
    ) {
        let log = MetricsLog {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(up, down, loss, acc, div, interval, c, t))| MetricsRow {
                    round: i as u32 + 1,
                    epoch: i as u32 / 3 + 1,
                    uplink_bytes: up,
                    downlink_bytes: down,
                    train_loss: loss,
                    val_accuracy: acc,
                    mean_divergence: div / 2.0,
                    max_divergence: div,
                    sync_interval: interval,
                    mean_compression_c: c,
                    sim_time_s: t,
                    mean_sync_delay_s: c / 3.0,
                    max_sync_delay_s: c,
                })
                .collect(),
        };
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        prop_assert_eq!(&MetricsLog::read_csv(csv.as_slice()).unwrap(), &log);
        let mut json = Vec::new();
        log.write_json(&mut json).unwrap();
        prop_assert_eq!(&MetricsLog::read_json(json.as_slice()).unwrap(), &log);
    }
}
