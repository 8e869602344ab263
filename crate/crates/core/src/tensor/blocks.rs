use serde::{Deserialize, Serialize};

use super::ModelParams;

/// A contiguous run of parameters inside a single layout segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: usize,
    pub offset: usize,
    pub len: usize,
    pub depth: usize,
    /// `len / n` for a model of `n` parameters.
    pub density: f64,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockIndex {
    pub block_size: usize,
    pub blocks: Vec<Block>,
    /// Total parameter count covered.
    pub total: usize,
}

impl BlockIndex {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, block_id: usize) -> Option<&Block> {
        self.blocks.get(block_id)
    }

    pub fn max_depth(&self) -> usize {
        self.blocks.iter().map(|b| b.depth).max().unwrap_or(0)
    }
}

/// Splits each layout segment into runs of `block_size`; a block never crosses
/// a segment boundary. `block_size` of zero is treated as one.
pub fn partition_blocks(params: &ModelParams, block_size: usize) -> BlockIndex {
    let block_size = block_size.max(1);
    let n = params.len();
    let mut blocks = Vec::new();
    for meta in &params.layout {
        let mut start = 0;
        while start < meta.length {
            let len = block_size.min(meta.length - start);
            blocks.push(Block {
                block_id: blocks.len(),
                offset: meta.offset + start,
                len,
                depth: meta.depth,
                density: len as f64 / n as f64,
            });
            start += len;
        }
    }
    BlockIndex {
        block_size,
        blocks,
        total: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_model, LayerMeta, Shape};

    fn custom(lengths: &[usize]) -> ModelParams {
        let mut m = init_model(&[1, 1], 0).unwrap();
        let mut offset = 0;
        m.layout = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let meta = LayerMeta {
                    name: format!("seg{i}"),
                    depth: i + 1,
                    offset,
                    length: len,
                    shape: Shape::Vector { len },
                };
                offset += len;
                meta
            })
            .collect();
        m.values = vec![0.0; offset];
        m
    }

    #[test]
    fn single_layer_tail_block() {
        let idx = partition_blocks(&custom(&[10]), 4);
        let lens: Vec<_> = idx.blocks.iter().map(|b| b.len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }

    #[test]
    fn blocks_cut_at_layer_boundaries() {
        let idx = partition_blocks(&custom(&[5, 3]), 4);
        let lens: Vec<_> = idx.blocks.iter().map(|b| b.len).collect();
        assert_eq!(lens, vec![4, 1, 3]);
        assert_eq!(idx.blocks[2].depth, 2);
        assert!((idx.blocks[0].density - 0.5).abs() < 1e-15);
    }

    #[test]
    fn desk_model_has_27_blocks() {
        let m = init_model(&[20, 64, 5], 0).unwrap();
        let idx = partition_blocks(&m, 64);
        assert_eq!(idx.len(), 27);
        for (i, b) in idx.blocks.iter().enumerate() {
            assert_eq!(b.block_id, i);
        }
    }

    #[test]
    fn zero_block_size_treated_as_one() {
        let idx = partition_blocks(&custom(&[3]), 0);
        assert_eq!(idx.len(), 3);
    }
}
