//! Dense numerics for the toy workload: flat parameter vectors with a layer
//! layout, a tanh MLP with exact gradients, synthetic Gaussian-mixture data and
//! block partitioning of the parameter vector.

mod blocks;
mod data;
mod mlp;

pub use blocks::{partition_blocks, Block, BlockIndex};
pub use data::{make_synthetic_dataset, Batch, Dataset, DatasetSpec};
pub use mlp::{backward, forward_loss, LossReport};
pub(crate) use mlp::backward_with_loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one layout segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

/// One contiguous segment of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    /// 1-based layer depth; weight and bias of the same layer share it.
    pub depth: usize,
    pub offset: usize,
    pub length: usize,
    pub shape: Shape,
}

/// Flat model parameters plus the layout describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Vec<LayerMeta>,
    arch: Vec<usize>,
}

impl ModelParams {
    /// Layer widths, input first.
    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of distinct depths (weight layers).
    pub fn depth_count(&self) -> usize {
        self.arch.len() - 1
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
            arch: self.arch.clone(),
        }
    }

    /// Replace the values, keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ModelParams> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(ModelParams {
            values,
            layout: self.layout.clone(),
            arch: self.arch.clone(),
        })
    }

    /// Builds a model with the standard weight/bias layout for `arch` holding
    /// the given values.
    pub fn from_values(arch: &[usize], values: Vec<f64>) -> Result<ModelParams> {
        let layout = build_layout(arch)?;
        let n: usize = layout.iter().map(|l| l.length).sum();
        if values.len() != n {
            return Err(Error::shape(format!(
                "architecture {arch:?} has {n} parameters, got {}",
                values.len()
            )));
        }
        Ok(ModelParams {
            values,
            layout,
            arch: arch.to_vec(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient with the same length and layout as its model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        GradientVector { values }
    }

    pub fn zeros(n: usize) -> Self {
        GradientVector {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn build_layout(arch: &[usize]) -> Result<Vec<LayerMeta>> {
    if arch.len() < 2 {
        return Err(Error::config(format!(
            "architecture needs at least 2 widths, got {}",
            arch.len()
        )));
    }
    if let Some(w) = arch.iter().find(|&&w| w == 0) {
        return Err(Error::config(format!("layer width {w} must be >= 1")));
    }
    let mut layout = Vec::with_capacity(2 * (arch.len() - 1));
    let mut offset = 0;
    for (i, pair) in arch.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let depth = i + 1;
        layout.push(LayerMeta {
            name: format!("fc{depth}.weight"),
            depth,
            offset,
            length: fan_in * fan_out,
            shape: Shape::Matrix {
                rows: fan_out,
                cols: fan_in,
            },
        });
        offset += fan_in * fan_out;
        layout.push(LayerMeta {
            name: format!("fc{depth}.bias"),
            depth,
            offset,
            length: fan_out,
            shape: Shape::Vector { len: fan_out },
        });
        offset += fan_out;
    }
    Ok(layout)
}

/// Initializes an MLP: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases zero. Weight matrices are row-major `(fan_out, fan_in)`.
pub fn init_model(arch: &[usize], seed: u64) -> Result<ModelParams> {
    let layout = build_layout(arch)?;
    let n: usize = layout.iter().map(|l| l.length).sum();
    let mut values = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for meta in &layout {
        if let Shape::Matrix { cols, .. } = meta.shape {
            let bound = 1.0 / (cols as f64).sqrt();
            for v in &mut values[meta.offset..meta.offset + meta.length] {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }
    Ok(ModelParams {
        values,
        layout,
        arch: arch.to_vec(),
    })
}

/// `values[i] -= lr * update[i]`.
pub fn apply_update(params: &ModelParams, update: &GradientVector, lr: f64) -> Result<ModelParams> {
    if update.len() != params.len() {
        return Err(Error::shape(format!(
            "update has {} entries, model has {}",
            update.len(),
            params.len()
        )));
    }
    let values = params
        .values
        .iter()
        .zip(&update.values)
        .map(|(p, u)| p - lr * u)
        .collect();
    params.with_values(values)
}
