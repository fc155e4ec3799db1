//! Dense f32 tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]. Trainable state lives in a [`ParamStore`], which owns every
//! parameter's value and gradient buffer plus batch-norm running statistics. A [`Tape`]
//! records one forward pass; [`Tape::backward`] replays it in reverse and accumulates
//! gradients into the store.

pub mod gradcheck;
mod kernels;
mod params;
mod tape;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::{conv2d_forward, conv_output_dim, copy_prefix, gemm};
pub use params::{BnStats, Param, ParamId, ParamKind, ParamStore, StatsId};
pub use tape::{BnMode, Tape, Var, BN_EPS, BN_MOMENTUM};

/// Row-major f32 array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Copies the leading `dims` along each axis into a new contiguous tensor.
    pub fn prefix(&self, dims: &[usize]) -> Result<Tensor> {
        check_prefix(&self.shape, dims)?;
        let mut out = Tensor::zeros(dims);
        copy_prefix(&self.data, &self.shape, &mut out.data, dims);
        Ok(out)
    }

    /// Selects rows (first-axis entries) by index.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let row_len: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality of shape and contents (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn check_prefix(shape: &[usize], dims: &[usize]) -> Result<()> {
    if shape.len() != dims.len() || shape.iter().zip(dims).any(|(s, d)| d > s || *d == 0) {
        return Err(Error::Capacity(format!(
            "prefix {dims:?} does not fit inside {shape:?}"
        )));
    }
    Ok(())
}

/// Inner-loop accumulation precision for conv/matmul kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accumulation {
    F32,
    F64,
}

thread_local! {
    static ACCUMULATION: Cell<Accumulation> = const { Cell::new(Accumulation::F32) };
}

pub fn accumulation() -> Accumulation {
    ACCUMULATION.with(|a| a.get())
}

/// Runs `f` with the given accumulation precision on the current thread.
pub fn with_accumulation<T>(acc: Accumulation, f: impl FnOnce() -> T) -> T {
    let prev = ACCUMULATION.with(|a| a.replace(acc));
    struct Restore(Accumulation);
    impl Drop for Restore {
        fn drop(&mut self) {
            ACCUMULATION.with(|a| a.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}
