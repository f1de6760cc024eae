//! Sliding feature history and feature standardization.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, FEATURE_COUNT};
use crate::error::{Error, Result};

/// Default window length (current tick plus 14 past ticks).
pub const HISTORY_LEN: usize = 15;

/// The most recent feature vectors, oldest first.
#[derive(Debug, Clone)]
pub struct History {
    capacity: usize,
    buf: VecDeque<FeatureVector>,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        Self { capacity, buf: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.capacity
    }

    pub fn push(&mut self, f: FeatureVector) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(f);
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    /// Raw window, available once the history is full.
    pub fn window(&self) -> Option<Window> {
        self.is_full().then(|| Window::from_rows(self.buf.iter()))
    }
}

/// One model input: `steps x FEATURE_COUNT`, oldest row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    data: Array2<f64>,
    normalized: bool,
}

impl Window {
    pub fn from_rows<'a>(rows: impl ExactSizeIterator<Item = &'a FeatureVector>) -> Self {
        let steps = rows.len();
        let mut data = Array2::zeros((steps, FEATURE_COUNT));
        for (mut dst, f) in data.rows_mut().into_iter().zip(rows) {
            dst.assign(&ndarray::ArrayView1::from(&f.0));
        }
        Self { data, normalized: false }
    }

    /// Wrap data that is already standardized.
    pub fn normalized(data: Array2<f64>) -> Self {
        Self { data, normalized: true }
    }

    pub fn raw(data: Array2<f64>) -> Self {
        Self { data, normalized: false }
    }

    pub fn steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

/// Per-feature affine standardization `(f - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], scale: vec![1.0; width] }
    }

    /// Mean and population standard deviation of each column. Constant
    /// columns get scale 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; FEATURE_COUNT];
        let mut sq = [0.0; FEATURE_COUNT];
        for f in rows {
            n += 1;
            for k in 0..FEATURE_COUNT {
                sum[k] += f.0[k];
                sq[k] += f.0[k] * f.0[k];
            }
        }
        if n == 0 {
            return Err(Error::Dataset("cannot fit normalization on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = (0..FEATURE_COUNT)
            .map(|k| {
                let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
                if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Standardize a raw window. Refuses windows that were already
    /// standardized.
    pub fn apply(&self, w: &Window) -> Result<Window> {
        if w.normalized {
            return Err(Error::AlreadyNormalized);
        }
        if w.data.ncols() != self.width() {
            return Err(Error::Model(format!(
                "window has {} features, normalizer expects {}",
                w.data.ncols(),
                self.width()
            )));
        }
        let mut data = w.data.clone();
        for mut row in data.rows_mut() {
            for k in 0..self.width() {
                row[k] = (row[k] - self.mean[k]) / self.scale[k];
            }
        }
        Ok(Window { data, normalized: true })
    }
}
