use serde::{Deserialize, Serialize};

use crate::model::ParameterStore;
use crate::tensor::Gradients;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Summed gradients for the whole store, plus which elements received any.
///
/// Sub-model gradients are top-left blocks, so the covered set of each
/// parameter is a staircase: row `r` is covered on columns
/// `0..cols_by_row[r]`.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
    widths: Vec<usize>,
    cols_by_row: Vec<Vec<usize>>,
}

impl GradBuffer {
    pub fn new(store: &ParameterStore) -> Self {
        let mut grads = Vec::new();
        let mut widths = Vec::new();
        let mut cols_by_row = Vec::new();
        for p in store.params() {
            let (rows, cols) = p.value.as_matrix_dims();
            grads.push(vec![0.0; rows * cols]);
            widths.push(cols);
            cols_by_row.push(vec![0; rows]);
        }
        GradBuffer {
            grads,
            widths,
            cols_by_row,
        }
    }

    /// Adds a `rows x cols` block into the top-left of parameter `key`.
    pub fn add_block(&mut self, key: usize, rows: usize, cols: usize, block: &[f64]) -> Result<()> {
        let width = self.widths[key];
        let covered = &mut self.cols_by_row[key];
        if rows > covered.len() || cols > width || block.len() != rows * cols {
            return Err(Error::shape(format!(
                "gradient block {rows}x{cols} for parameter {key} of {}x{width}",
                covered.len()
            )));
        }
        let g = &mut self.grads[key];
        for r in 0..rows {
            for (dst, src) in g[r * width..r * width + cols].iter_mut().zip(&block[r * cols..(r + 1) * cols]) {
                *dst += src;
            }
            covered[r] = covered[r].max(cols);
        }
        Ok(())
    }

    /// Adds every cropped-parameter gradient of a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<'_>) -> Result<()> {
        for pg in grads.params() {
            self.add_block(pg.key, pg.rows, pg.cols, pg.grad)?;
        }
        Ok(())
    }

    pub fn grad(&self, key: usize) -> &[f64] {
        &self.grads[key]
    }

    pub fn is_covered(&self, key: usize, row: usize, col: usize) -> bool {
        col < self.cols_by_row[key][row]
    }

    pub fn covered_count(&self) -> usize {
        self.cols_by_row.iter().flatten().sum()
    }

    /// Zeroes the covered elements and resets coverage.
    pub fn clear(&mut self) {
        for ((g, c), &width) in self.grads.iter_mut().zip(&mut self.cols_by_row).zip(&self.widths) {
            for (r, cols) in c.iter_mut().enumerate() {
                g[r * width..r * width + *cols].fill(0.0);
                *cols = 0;
            }
        }
    }
}

/// ADAM moments for every store element and the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        OptimizerState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, key: usize) -> &[f64] {
        &self.m[key]
    }

    pub fn second_moment(&self, key: usize) -> &[f64] {
        &self.v[key]
    }
}

/// One bias-corrected ADAM update at learning rate `lr`.
///
/// Only covered elements move, and only their moments decay; everything a
/// sampled sub-model did not read this step is left bit-identical.
pub fn adam_step(state: &mut OptimizerState, store: &mut ParameterStore, grads: &GradBuffer, lr: f64) -> Result<()> {
    if state.m.len() != store.params().len() || grads.grads.len() != store.params().len() {
        return Err(Error::shape("optimizer state does not match the store"));
    }
    for (i, p) in store.params().iter().enumerate() {
        if state.m[i].len() != p.value.len() || grads.grads[i].len() != p.value.len() {
            return Err(Error::shape(format!("moment shape mismatch for {}", p.name)));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for key in 0..store.params().len() {
        if grads.cols_by_row[key].iter().all(|&c| c == 0) {
            continue;
        }
        let width = grads.widths[key];
        let (m, v, g) = (&mut state.m[key], &mut state.v[key], &grads.grads[key]);
        let w = store.get_mut(key).data_mut();
        for (r, &cols) in grads.cols_by_row[key].iter().enumerate() {
            for idx in r * width..r * width + cols {
                let gi = g[idx];
                m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
                v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                w[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
