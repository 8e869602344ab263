//! Bandwidth-adaptive compression.
//!
//! The schedule maps available bandwidth to an aggressiveness `c` in
//! `[c_min, c_max]`, which selects a quantization bit-width. Quantized blocks
//! carry a sign, the block's l2 norm and a per-element level in
//! `[0, 2^b - 1]`. Error feedback keeps whatever the quantizer or the selector
//! dropped and re-injects it, scaled by `gamma`, into the next gradient.
//!
//! Payload sizes follow the framing in [`wire`]; see the README for the byte
//! layout table.

pub mod wire;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::SelectionResult;
use crate::tensor::{BlockIndex, GradientVector};

pub const MESSAGE_HEADER_BYTES: u64 = 16;
pub const BLOCK_HEADER_BYTES: u64 = 8;
/// Full-precision values and quantization scales travel as 32-bit floats.
pub const VALUE_BYTES: u64 = 4;
/// Sparse coordinates: 4-byte index plus 4-byte value.
pub const SPARSE_COORD_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionSchedule {
    pub c_min: f64,
    pub c_max: f64,
    pub beta: f64,
    pub b_min: u8,
    pub b_max: u8,
}

impl CompressionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_min > 0.0 && self.c_min <= self.c_max && self.c_max <= 1.0) {
            return Err(Error::config(format!(
                "compression bounds must satisfy 0 < c_min <= c_max <= 1, got [{}, {}]",
                self.c_min, self.c_max
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(2 <= self.b_min && self.b_min <= self.b_max && self.b_max <= 16) {
            return Err(Error::config(format!(
                "bit bounds must satisfy 2 <= b_min <= b_max <= 16, got [{}, {}]",
                self.b_min, self.b_max
            )));
        }
        Ok(())
    }
}

/// `c = c_min + (c_max - c_min) * exp(-beta * B)` for bandwidth `B` in Mbps.
pub fn schedule_ratio(bandwidth_mbps: f64, sched: &CompressionSchedule) -> f64 {
    let b = bandwidth_mbps.max(0.0);
    let c = sched.c_min + (sched.c_max - sched.c_min) * (-sched.beta * b).exp();
    c.clamp(sched.c_min, sched.c_max)
}

/// `clamp(round((1 - c) * b_max), b_min, b_max)`.
pub fn ratio_to_bits(c: f64, sched: &CompressionSchedule) -> u8 {
    let raw = ((1.0 - c) * sched.b_max as f64).round();
    raw.clamp(sched.b_min as f64, sched.b_max as f64) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub block_id: usize,
    /// `true` for negative elements.
    pub negative: Vec<bool>,
    pub levels: Vec<u16>,
    /// l2 norm of the original block.
    pub scale: f64,
    pub bits: u8,
}

impl QuantizedBlock {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    fn max_level(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }
}

pub fn quantize_block(block_id: usize, g: &[f64], bits: u8) -> Result<QuantizedBlock> {
    if !(2..=16).contains(&bits) {
        return Err(Error::config(format!("bit-width {bits} outside [2, 16]")));
    }
    if g.is_empty() {
        return Err(Error::shape("cannot quantize an empty block"));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in block {block_id}")));
    }
    let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_level = ((1u32 << bits) - 1) as f64;
    let levels = if scale == 0.0 {
        vec![0; g.len()]
    } else {
        g.iter()
            .map(|x| ((x.abs() / scale) * max_level).round().min(max_level) as u16)
            .collect()
    };
    Ok(QuantizedBlock {
        block_id,
        negative: g.iter().map(|x| *x < 0.0).collect(),
        levels,
        scale,
        bits,
    })
}

/// `sign * scale * level / (2^b - 1)`.
pub fn dequantize_block(qb: &QuantizedBlock) -> Vec<f64> {
    let max_level = qb.max_level();
    qb.negative
        .iter()
        .zip(&qb.levels)
        .map(|(&neg, &lvl)| {
            let mag = qb.scale * lvl as f64 / max_level;
            if neg {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// Residual memory for error feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedbackState {
    pub residual: Vec<f64>,
    pub gamma: f64,
}

impl ErrorFeedbackState {
    pub fn new(n: usize, gamma: f64) -> Self {
        ErrorFeedbackState {
            residual: vec![0.0; n],
            gamma,
        }
    }
}

/// `corrected = g + gamma * e`.
pub fn apply_error_feedback(g: &GradientVector, ef: &ErrorFeedbackState) -> Result<GradientVector> {
    if g.len() != ef.residual.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries, residual {}",
            g.len(),
            ef.residual.len()
        )));
    }
    Ok(GradientVector::new(
        g.values
            .iter()
            .zip(&ef.residual)
            .map(|(g, e)| g + ef.gamma * e)
            .collect(),
    ))
}

/// `e = corrected - sent`.
pub fn accumulate_residual(
    ef: &mut ErrorFeedbackState,
    corrected: &GradientVector,
    sent: &GradientVector,
) -> Result<()> {
    if corrected.len() != ef.residual.len() || sent.len() != ef.residual.len() {
        return Err(Error::shape(format!(
            "residual has {} entries, corrected {}, sent {}",
            ef.residual.len(),
            corrected.len(),
            sent.len()
        )));
    }
    for ((e, c), s) in ef.residual.iter_mut().zip(&corrected.values).zip(&sent.values) {
        *e = c - s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Full,
    Quantized { bits: u8 },
}

/// Bytes one block adds to a message: block header plus payload.
pub fn block_bytes(len: usize, precision: Precision) -> u64 {
    let payload = match precision {
        Precision::Full => VALUE_BYTES * len as u64,
        Precision::Quantized { bits } => VALUE_BYTES + (len as u64 * (bits as u64 + 1)).div_ceil(8),
    };
    BLOCK_HEADER_BYTES + payload
}

/// One block's entry in a device's transmission plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub block_id: usize,
    pub len: usize,
    pub precision: Precision,
    pub bytes: u64,
}

impl BlockPlan {
    pub fn new(block_id: usize, len: usize, precision: Precision) -> Self {
        BlockPlan {
            block_id,
            len,
            precision,
            bytes: block_bytes(len, precision),
        }
    }
}

/// Blocks a device transmits this round, ids ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransmissionPlan {
    pub blocks: Vec<BlockPlan>,
}

impl TransmissionPlan {
    /// Message size including the message header.
    pub fn bytes(&self) -> u64 {
        MESSAGE_HEADER_BYTES + self.blocks.iter().map(|b| b.bytes).sum::<u64>()
    }

    /// Every block of the index at full precision.
    pub fn full(index: &BlockIndex) -> Self {
        TransmissionPlan {
            blocks: index
                .blocks
                .iter()
                .map(|b| BlockPlan::new(b.block_id, b.len, Precision::Full))
                .collect(),
        }
    }
}

/// Size of a message carrying `selection`; ids in `full_precision` go at full
/// precision, the rest quantized at `bits`.
pub fn payload_size(
    selection: &SelectionResult,
    index: &BlockIndex,
    bits: u8,
    full_precision: &SelectionResult,
) -> Result<u64> {
    let mut total = MESSAGE_HEADER_BYTES;
    for &id in &selection.block_ids {
        let block = index
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("unknown block id {id}")))?;
        let precision = if full_precision.contains(id) {
            Precision::Full
        } else {
            Precision::Quantized { bits }
        };
        total += block_bytes(block.len, precision);
    }
    Ok(total)
}

/// Size of a top-k message with `k` coordinates.
pub fn sparse_payload_size(k: usize) -> u64 {
    MESSAGE_HEADER_BYTES + SPARSE_COORD_BYTES * k as u64
}

/// Size of a full-precision model or gradient message.
pub fn full_payload_size(index: &BlockIndex) -> u64 {
    MESSAGE_HEADER_BYTES + BLOCK_HEADER_BYTES * index.len() as u64 + VALUE_BYTES * index.total as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_model, partition_blocks};

    fn sched() -> CompressionSchedule {
        CompressionSchedule {
            c_min: 0.01,
            c_max: 0.5,
            beta: 0.02,
            b_min: 2,
            b_max: 16,
        }
    }

    #[test]
    fn schedule_examples() {
        let s = sched();
        assert_eq!(schedule_ratio(0.0, &s), 0.5);
        assert!((schedule_ratio(2500.0, &s) - 0.01).abs() < 1e-15);
        let c = schedule_ratio(100.0, &s);
        assert!((c - (0.01 + 0.49 * (-2.0f64).exp())).abs() < 1e-15);
        assert!((c - 0.07632).abs() < 1e-5);
    }

    #[test]
    fn bits_examples() {
        let s = sched();
        assert_eq!(ratio_to_bits(1.0, &s), 2);
        assert_eq!(ratio_to_bits(0.0, &s), 16);
        assert_eq!(ratio_to_bits(1e-6, &s), 16);
        assert_eq!(ratio_to_bits(0.5, &s), 8);
    }

    #[test]
    fn schedule_validation() {
        assert!(sched().validate().is_ok());
        let mut bad = sched();
        bad.c_min = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = sched();
        bad.c_max = 1.2;
        assert!(bad.validate().is_err());
        let mut bad = sched();
        bad.b_min = 1;
        assert!(bad.validate().is_err());
        let mut bad = sched();
        bad.b_max = 17;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quantize_hand_example() {
        let qb = quantize_block(0, &[0.3, -0.4], 2).unwrap();
        assert!((qb.scale - 0.5).abs() < 1e-15);
        assert_eq!(qb.levels, vec![2, 2]);
        assert_eq!(qb.negative, vec![false, true]);
        let back = dequantize_block(&qb);
        assert!((back[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((back[1] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_block_and_errors() {
        let qb = quantize_block(3, &[0.0, 0.0], 4).unwrap();
        assert_eq!(qb.scale, 0.0);
        assert_eq!(qb.levels, vec![0, 0]);
        assert_eq!(dequantize_block(&qb), vec![0.0, 0.0]);
        assert!(matches!(quantize_block(0, &[f64::NAN], 4), Err(Error::Numeric(_))));
        assert!(matches!(quantize_block(0, &[1.0], 1), Err(Error::Config(_))));
        assert!(quantize_block(0, &[], 4).is_err());
    }

    #[test]
    fn representable_vector_is_fixed_point() {
        // [3, -4, 0] has norm 5 and sits on the b = 4 grid: levels 9, 12, 0 of 15.
        let v = [3.0, -4.0, 0.0];
        let qb = quantize_block(0, &v, 4).unwrap();
        assert_eq!(qb.levels, vec![9, 12, 0]);
        assert_eq!(dequantize_block(&qb), v.to_vec());
        let single = [2.5];
        assert_eq!(dequantize_block(&quantize_block(0, &single, 8).unwrap()), vec![2.5]);
    }

    #[test]
    fn error_feedback_rules() {
        let g = GradientVector::new(vec![1.0, -1.0]);
        let ef = ErrorFeedbackState {
            residual: vec![0.5, 0.5],
            gamma: 0.9,
        };
        let c = apply_error_feedback(&g, &ef).unwrap();
        assert!((c.values[0] - 1.45).abs() < 1e-15);
        assert!((c.values[1] + 0.55).abs() < 1e-15);

        let zero = ErrorFeedbackState::new(2, 0.9);
        assert_eq!(apply_error_feedback(&g, &zero).unwrap(), g);
        let no_gamma = ErrorFeedbackState {
            residual: vec![3.0, 3.0],
            gamma: 0.0,
        };
        assert_eq!(apply_error_feedback(&g, &no_gamma).unwrap(), g);

        let mut ef = ErrorFeedbackState::new(2, 0.9);
        accumulate_residual(&mut ef, &c, &c).unwrap();
        assert_eq!(ef.residual, vec![0.0, 0.0]);
        accumulate_residual(&mut ef, &c, &GradientVector::zeros(2)).unwrap();
        assert_eq!(ef.residual, c.values);

        assert!(matches!(
            apply_error_feedback(&GradientVector::zeros(3), &ef),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            accumulate_residual(&mut ef, &c, &GradientVector::zeros(1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn payload_framing_examples() {
        let m = init_model(&[99, 1], 0).unwrap();
        // fc1.weight has 99 entries, fc1.bias 1: blocks of 99 and 1 with block_size 100.
        let idx = partition_blocks(&m, 100);
        let empty = SelectionResult::empty();
        assert_eq!(payload_size(&empty, &idx, 4, &empty).unwrap(), 16);

        let m = init_model(&[100, 1], 0).unwrap();
        let idx = partition_blocks(&m, 100);
        let first = SelectionResult {
            block_ids: vec![0],
            p: None,
        };
        assert_eq!(payload_size(&first, &idx, 4, &first).unwrap(), 424);
        assert_eq!(payload_size(&first, &idx, 4, &empty).unwrap(), 91);
        let unknown = SelectionResult {
            block_ids: vec![7],
            p: None,
        };
        assert!(matches!(payload_size(&unknown, &idx, 4, &empty), Err(Error::Protocol(_))));
    }

    #[test]
    fn full_sync_payload_formula() {
        let m = init_model(&[20, 64, 5], 0).unwrap();
        let idx = partition_blocks(&m, 64);
        let expect = 16 + 27 * 8 + 4 * 1669;
        assert_eq!(full_payload_size(&idx), expect);
        assert_eq!(TransmissionPlan::full(&idx).bytes(), expect);
        let all = SelectionResult {
            block_ids: (0..27).collect(),
            p: None,
        };
        assert_eq!(payload_size(&all, &idx, 8, &all).unwrap(), expect);
        assert_eq!(sparse_payload_size(167), 1352);
    }
}
