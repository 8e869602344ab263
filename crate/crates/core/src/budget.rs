//! Byte-budgeted block selection.
//!
//! Each round a device may send at most `floor(B * 1e6 * window / 8)` bytes.
//! The top-p blocks are sent at full precision; whatever budget remains is
//! filled with quantized low-importance blocks by a 0/1 knapsack that
//! maximizes total importance. The production path is the ratio greedy with
//! the max-single fallback (at least half the optimum); [`select_knapsack_exact`]
//! is a dynamic-programming oracle for tests.

use serde::{Deserialize, Serialize};

use crate::compression::{BlockPlan, Precision, TransmissionPlan, MESSAGE_HEADER_BYTES};
use crate::error::{Error, Result};
use crate::importance::{ImportanceScore, SelectionResult};
use crate::tensor::BlockIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnapsackItem {
    pub block_id: usize,
    pub value: f64,
    pub weight: u64,
}

/// Per-round byte allowance, excluding the message header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteBudget {
    pub bytes: u64,
}

impl ByteBudget {
    pub const UNBOUNDED: ByteBudget = ByteBudget { bytes: u64::MAX };
}

/// `max(0, floor(B * 1e6 * window_s / 8) - overhead)`.
pub fn byte_budget(bandwidth_mbps: f64, window_s: f64, overhead: u64) -> ByteBudget {
    let raw = bandwidth_mbps.max(0.0) * 1e6 * window_s / 8.0;
    // Absorb representation error so exact products do not floor one short.
    let whole = (raw * (1.0 + 1e-12)).floor() as u64;
    ByteBudget {
        bytes: whole.saturating_sub(overhead),
    }
}

fn total_value(items: &[KnapsackItem], ids: &[usize]) -> f64 {
    items
        .iter()
        .filter(|it| ids.contains(&it.block_id))
        .map(|it| it.value)
        .sum()
}

fn selection(mut ids: Vec<usize>) -> SelectionResult {
    ids.sort_unstable();
    SelectionResult {
        block_ids: ids,
        p: None,
    }
}

/// Ratio-ordered greedy, compared against the best single feasible item.
pub fn select_knapsack_greedy(items: &[KnapsackItem], budget: ByteBudget) -> SelectionResult {
    let mut order: Vec<&KnapsackItem> = items.iter().filter(|it| it.weight > 0).collect();
    order.sort_by(|a, b| {
        let ra = a.value / a.weight as f64;
        let rb = b.value / b.weight as f64;
        rb.total_cmp(&ra)
            .then(b.value.total_cmp(&a.value))
            .then(a.block_id.cmp(&b.block_id))
    });
    let mut remaining = budget.bytes;
    let mut greedy = Vec::new();
    for it in &order {
        if it.weight <= remaining {
            remaining -= it.weight;
            greedy.push(it.block_id);
        }
    }
    let single = items
        .iter()
        .filter(|it| it.weight > 0 && it.weight <= budget.bytes)
        .max_by(|a, b| a.value.total_cmp(&b.value).then(b.block_id.cmp(&a.block_id)));
    if let Some(best) = single {
        if best.value > total_value(items, &greedy) {
            return selection(vec![best.block_id]);
        }
    }
    selection(greedy)
}

/// Size limits for the exact solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactLimits {
    pub max_items: usize,
    /// Upper bound on `items * (capacity + 1)` table cells.
    pub max_cells: u64,
}

impl Default for ExactLimits {
    fn default() -> Self {
        ExactLimits {
            max_items: 64,
            max_cells: 20_000_000,
        }
    }
}

#[derive(Clone, Copy)]
struct Cell {
    value: f64,
    count: u32,
}

fn strictly_better(a: Cell, b: Cell) -> bool {
    let tol = 1e-12 * (1.0 + a.value.abs().max(b.value.abs()));
    if a.value > b.value + tol {
        return true;
    }
    (a.value - b.value).abs() <= tol && a.count < b.count
}

/// Maximum-value subset by DP over byte capacity. Ties prefer fewer items,
/// then the lexicographically smallest id set.
pub fn select_knapsack_exact(
    items: &[KnapsackItem],
    budget: ByteBudget,
    limits: ExactLimits,
) -> Result<SelectionResult> {
    if items.len() > limits.max_items {
        return Err(Error::Capacity(format!(
            "{} items exceeds limit {}",
            items.len(),
            limits.max_items
        )));
    }
    let mut sorted: Vec<KnapsackItem> = items.iter().filter(|it| it.weight > 0).copied().collect();
    sorted.sort_by_key(|it| it.block_id);
    let total_weight: u64 = sorted.iter().map(|it| it.weight).sum();
    let cap = budget.bytes.min(total_weight);
    let cells = sorted.len() as u64 * (cap + 1);
    if cells > limits.max_cells {
        return Err(Error::Capacity(format!(
            "{cells} table cells exceeds limit {}",
            limits.max_cells
        )));
    }
    let cap = cap as usize;
    let n = sorted.len();
    // Suffix DP: row i holds the best over items i.. for every capacity.
    let mut next = vec![Cell { value: 0.0, count: 0 }; cap + 1];
    let mut take = vec![false; n * (cap + 1)];
    for i in (0..n).rev() {
        let w = sorted[i].weight as usize;
        let mut row = next.clone();
        for c in w..=cap {
            let with = Cell {
                value: next[c - w].value + sorted[i].value,
                count: next[c - w].count + 1,
            };
            if !strictly_better(next[c], with) {
                row[c] = with;
                take[i * (cap + 1) + c] = true;
            }
        }
        next = row;
    }
    let mut c = cap;
    let mut ids = Vec::new();
    for (i, it) in sorted.iter().enumerate() {
        if take[i * (cap + 1) + c] {
            ids.push(it.block_id);
            c -= it.weight as usize;
        }
    }
    Ok(selection(ids))
}

/// Sum of item values over a selection.
pub fn selection_value(items: &[KnapsackItem], sel: &SelectionResult) -> f64 {
    total_value(items, &sel.block_ids)
}

/// Sum of item weights over a selection.
pub fn selection_weight(items: &[KnapsackItem], sel: &SelectionResult) -> u64 {
    items
        .iter()
        .filter(|it| sel.contains(it.block_id))
        .map(|it| it.weight)
        .sum()
}

/// Marks blocks of `full_precision` as full precision and every other
/// selected block as quantized at `bits`.
pub fn assign_precision(
    selection: &SelectionResult,
    full_precision: &SelectionResult,
    bits: u8,
    index: &BlockIndex,
) -> Result<TransmissionPlan> {
    let mut blocks = Vec::with_capacity(selection.len());
    for &id in &selection.block_ids {
        let block = index
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("unknown block id {id}")))?;
        let precision = if full_precision.contains(id) {
            Precision::Full
        } else {
            Precision::Quantized { bits }
        };
        blocks.push(BlockPlan::new(id, block.len, precision));
    }
    Ok(TransmissionPlan { blocks })
}

/// Two-stage selection: the top-p set at full precision first, then a
/// knapsack over the remaining blocks at `bits`. When the top-p set alone
/// does not fit, the knapsack runs over it at full precision and everything
/// else is deferred.
pub fn plan_transmission(
    importance: &ImportanceScore,
    top_p: &SelectionResult,
    bits: u8,
    index: &BlockIndex,
    budget: ByteBudget,
) -> Result<TransmissionPlan> {
    let item = |id: usize, precision: Precision| -> Result<KnapsackItem> {
        let block = index
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("unknown block id {id}")))?;
        Ok(KnapsackItem {
            block_id: id,
            value: importance.scores[id],
            weight: BlockPlan::new(id, block.len, precision).bytes,
        })
    };
    let must: Vec<KnapsackItem> = top_p
        .block_ids
        .iter()
        .map(|&id| item(id, Precision::Full))
        .collect::<Result<_>>()?;
    let must_bytes: u64 = must.iter().map(|it| it.weight).sum();
    if must_bytes > budget.bytes {
        let chosen = select_knapsack_greedy(&must, budget);
        return assign_precision(&chosen, &chosen, bits, index);
    }
    let optional: Vec<KnapsackItem> = index
        .blocks
        .iter()
        .filter(|b| !top_p.contains(b.block_id))
        .map(|b| item(b.block_id, Precision::Quantized { bits }))
        .collect::<Result<_>>()?;
    let rest = select_knapsack_greedy(
        &optional,
        ByteBudget {
            bytes: budget.bytes - must_bytes,
        },
    );
    let mut ids = top_p.block_ids.clone();
    ids.extend(&rest.block_ids);
    assign_precision(&selection(ids), top_p, bits, index)
}

/// Per-round byte budget net of the message header.
pub fn message_budget(bandwidth_mbps: f64, window_s: Option<f64>) -> ByteBudget {
    match window_s {
        Some(w) => byte_budget(bandwidth_mbps, w, MESSAGE_HEADER_BYTES),
        None => ByteBudget::UNBOUNDED,
    }
}
