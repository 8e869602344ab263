//! Little-endian wire codec for device and cloud messages.
//!
//! ```text
//! message header (16 bytes)
//!   u32 magic "ACS1" | u16 kind | u16 sender | u32 round | u32 item count
//! block item (kind 1 gradient blocks, kind 3 model)
//!   u32 block_id | u8 flags (bit 0: quantized) | u8 bits | u16 reserved
//!   full:      len x f32
//!   quantized: f32 scale | ceil(len * (bits + 1) / 8) bytes, per element a
//!              sign bit then `bits` level bits, packed LSB-first
//! sparse item (kind 2)
//!   u32 coordinate | f32 value
//! ```
//!
//! Block lengths are not on the wire; the receiver knows them from the shared
//! [`BlockIndex`].

use crate::error::{Error, Result};
use crate::tensor::BlockIndex;

use super::{dequantize_block, QuantizedBlock};

pub const MAGIC: u32 = u32::from_le_bytes(*b"ACS1");
/// Sender id used by the cloud.
pub const CLOUD_SENDER: u16 = u16::MAX;

const FLAG_QUANTIZED: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    GradientBlocks = 1,
    SparseCoords = 2,
    Model = 3,
}

impl MessageKind {
    fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(MessageKind::GradientBlocks),
            2 => Some(MessageKind::SparseCoords),
            3 => Some(MessageKind::Model),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    Full(Vec<f64>),
    Quantized(QuantizedBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPayload {
    pub block_id: usize,
    pub data: BlockData,
}

impl BlockPayload {
    /// Values the receiver reconstructs for this block.
    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            BlockData::Full(v) => v.clone(),
            BlockData::Quantized(qb) => dequantize_block(qb),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Blocks(Vec<BlockPayload>),
    Sparse(Vec<(u32, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: u16,
    pub round: u32,
    pub body: Body,
}

impl Message {
    fn item_count(&self) -> usize {
        match &self.body {
            Body::Blocks(b) => b.len(),
            Body::Sparse(s) => s.len(),
        }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    n: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            out: Vec::new(),
            acc: 0,
            n: 0,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        for i in 0..width {
            self.acc |= ((value >> i) & 1) << self.n;
            self.n += 1;
            if self.n == 8 {
                self.out.push(self.acc as u8);
                self.acc = 0;
                self.n = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u32 {
        let mut v = 0;
        for i in 0..width {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u32) << i;
            self.pos += 1;
        }
        v
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(msg.kind as u16).to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&(msg.item_count() as u32).to_le_bytes());
    match &msg.body {
        Body::Blocks(blocks) => {
            for b in blocks {
                out.extend_from_slice(&(b.block_id as u32).to_le_bytes());
                match &b.data {
                    BlockData::Full(values) => {
                        out.extend_from_slice(&[0, 0, 0, 0]);
                        for v in values {
                            out.extend_from_slice(&(*v as f32).to_le_bytes());
                        }
                    }
                    BlockData::Quantized(qb) => {
                        out.extend_from_slice(&[FLAG_QUANTIZED, qb.bits, 0, 0]);
                        out.extend_from_slice(&(qb.scale as f32).to_le_bytes());
                        let mut w = BitWriter::new();
                        for (&neg, &lvl) in qb.negative.iter().zip(&qb.levels) {
                            w.push(neg as u32, 1);
                            w.push(lvl as u32, qb.bits as u32);
                        }
                        out.extend(w.finish());
                    }
                }
            }
        }
        Body::Sparse(coords) => {
            for &(i, v) in coords {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Protocol(format!(
                "message truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn decode(bytes: &[u8], index: &BlockIndex) -> Result<Message> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.u32()? != MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let kind_raw = cur.u16()?;
    let kind = MessageKind::from_u16(kind_raw)
        .ok_or_else(|| Error::Protocol(format!("unknown message kind {kind_raw}")))?;
    let sender = cur.u16()?;
    let round = cur.u32()?;
    let count = cur.u32()? as usize;
    let body = match kind {
        MessageKind::SparseCoords => {
            let mut coords = Vec::with_capacity(count);
            for _ in 0..count {
                let i = cur.u32()?;
                if i as usize >= index.total {
                    return Err(Error::Protocol(format!("coordinate {i} out of range")));
                }
                coords.push((i, cur.f32()?));
            }
            Body::Sparse(coords)
        }
        MessageKind::GradientBlocks | MessageKind::Model => {
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                let block_id = cur.u32()? as usize;
                let block = index
                    .get(block_id)
                    .ok_or_else(|| Error::Protocol(format!("unknown block id {block_id}")))?;
                let hdr = cur.take(4)?;
                let data = if hdr[0] & FLAG_QUANTIZED != 0 {
                    let bits = hdr[1];
                    if !(2..=16).contains(&bits) {
                        return Err(Error::Protocol(format!("bit-width {bits} out of range")));
                    }
                    let scale = cur.f32()?;
                    let packed = cur.take((block.len * (bits as usize + 1)).div_ceil(8))?;
                    let mut r = BitReader {
                        bytes: packed,
                        pos: 0,
                    };
                    let mut negative = Vec::with_capacity(block.len);
                    let mut levels = Vec::with_capacity(block.len);
                    for _ in 0..block.len {
                        negative.push(r.take(1) == 1);
                        levels.push(r.take(bits as u32) as u16);
                    }
                    BlockData::Quantized(QuantizedBlock {
                        block_id,
                        negative,
                        levels,
                        scale,
                        bits,
                    })
                } else {
                    let mut values = Vec::with_capacity(block.len);
                    for _ in 0..block.len {
                        values.push(cur.f32()?);
                    }
                    BlockData::Full(values)
                };
                blocks.push(BlockPayload { block_id, data });
            }
            Body::Blocks(blocks)
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::Protocol(format!(
            "{} trailing bytes after message",
            bytes.len() - cur.pos
        )));
    }
    Ok(Message {
        kind,
        sender,
        round,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{
        block_bytes, full_payload_size, quantize_block, sparse_payload_size, Precision,
        MESSAGE_HEADER_BYTES,
    };
    use crate::tensor::{init_model, partition_blocks};

    #[test]
    fn encoded_length_matches_framing() {
        let m = init_model(&[20, 64, 5], 1).unwrap();
        let idx = partition_blocks(&m, 64);
        let blocks: Vec<BlockPayload> = idx
            .blocks
            .iter()
            .map(|b| BlockPayload {
                block_id: b.block_id,
                data: BlockData::Full(m.values[b.range()].to_vec()),
            })
            .collect();
        let msg = Message {
            kind: MessageKind::Model,
            sender: CLOUD_SENDER,
            round: 3,
            body: Body::Blocks(blocks),
        };
        let bytes = encode(&msg);
        assert_eq!(bytes.len() as u64, full_payload_size(&idx));
        let back = decode(&bytes, &idx).unwrap();
        assert_eq!(back.round, 3);
        assert_eq!(back.sender, CLOUD_SENDER);

        let b = &idx.blocks[4];
        let qb = quantize_block(4, &m.values[b.range()], 5).unwrap();
        let msg = Message {
            kind: MessageKind::GradientBlocks,
            sender: 2,
            round: 1,
            body: Body::Blocks(vec![BlockPayload {
                block_id: 4,
                data: BlockData::Quantized(qb.clone()),
            }]),
        };
        let bytes = encode(&msg);
        assert_eq!(
            bytes.len() as u64,
            MESSAGE_HEADER_BYTES + block_bytes(b.len, Precision::Quantized { bits: 5 })
        );
        match &decode(&bytes, &idx).unwrap().body {
            Body::Blocks(bs) => match &bs[0].data {
                BlockData::Quantized(d) => {
                    assert_eq!(d.levels, qb.levels);
                    assert_eq!(d.negative, qb.negative);
                    assert_eq!(d.scale, qb.scale as f32 as f64);
                }
                _ => panic!("expected quantized block"),
            },
            _ => panic!("expected blocks"),
        }

        let sparse = Message {
            kind: MessageKind::SparseCoords,
            sender: 0,
            round: 9,
            body: Body::Sparse(vec![(0, 1.5), (1000, -2.25)]),
        };
        let bytes = encode(&sparse);
        assert_eq!(bytes.len() as u64, sparse_payload_size(2));
        assert_eq!(decode(&bytes, &idx).unwrap(), sparse);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let m = init_model(&[4, 2], 1).unwrap();
        let idx = partition_blocks(&m, 4);
        let msg = Message {
            kind: MessageKind::GradientBlocks,
            sender: 0,
            round: 0,
            body: Body::Blocks(vec![BlockPayload {
                block_id: 99,
                data: BlockData::Full(vec![0.0; 4]),
            }]),
        };
        assert!(matches!(decode(&encode(&msg), &idx), Err(Error::Protocol(_))));
        let mut good = encode(&Message {
            kind: MessageKind::GradientBlocks,
            sender: 0,
            round: 0,
            body: Body::Blocks(vec![]),
        });
        assert!(decode(&good, &idx).is_ok());
        good.push(0);
        assert!(decode(&good, &idx).is_err());
        assert!(decode(&good[..10], &idx).is_err());
        let mut bad_magic = encode(&Message {
            kind: MessageKind::Model,
            sender: 0,
            round: 0,
            body: Body::Blocks(vec![]),
        });
        bad_magic[0] ^= 0xFF;
        assert!(decode(&bad_magic, &idx).is_err());
    }
}
