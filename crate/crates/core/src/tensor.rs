//! Dense `(batch, time, channel)` buffers used across the engine.

use serde::{Deserialize, Serialize};

/// Row-major tensor indexed `[batch][time][channel]`.
///
/// Viewed as a matrix it is `(batch*time) x channel` row-major, which is the
/// same bytes as a column-major `channel x (batch*time)` matrix; the mixer
/// and decoder rely on that to call into `nalgebra` without copying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub batch: usize,
    pub time: usize,
    pub chan: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, time: usize, chan: usize) -> Self {
        Self {
            batch,
            time,
            chan,
            data: vec![0.0; batch * time * chan],
        }
    }

    pub fn from_vec(batch: usize, time: usize, chan: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), batch * time * chan, "tensor data length");
        Self {
            batch,
            time,
            chan,
            data,
        }
    }

    pub fn filled(batch: usize, time: usize, chan: usize, value: f64) -> Self {
        Self {
            batch,
            time,
            chan,
            data: vec![value; batch * time * chan],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.time, self.chan)
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn idx(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.time + t) * self.chan + c
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, c: usize) -> f64 {
        self.data[self.idx(b, t, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, c: usize, v: f64) {
        let i = self.idx(b, t, c);
        self.data[i] = v;
    }

    /// Number of `(batch, time)` rows.
    pub fn rows(&self) -> usize {
        self.batch * self.time
    }

    /// Copy the time series of channel `c` in batch item `b` into `out`.
    pub fn gather_series(&self, b: usize, c: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.time);
        let base = b * self.time * self.chan + c;
        for (t, o) in out.iter_mut().enumerate() {
            *o = self.data[base + t * self.chan];
        }
    }

    /// Inverse of [`gather_series`](Self::gather_series).
    pub fn scatter_series(&mut self, b: usize, c: usize, src: &[f64]) {
        debug_assert_eq!(src.len(), self.time);
        let base = b * self.time * self.chan + c;
        for (t, s) in src.iter().enumerate() {
            self.data[base + t * self.chan] = *s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert!(self.same_shape(other), "tensor shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            batch: self.batch,
            time: self.time,
            chan: self.chan,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}
