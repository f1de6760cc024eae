//! Labeled feature rows, their on-disk format, and window construction.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
use super::history::Normalizer;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub m_k: usize,
    pub feature_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub episode: u64,
    pub tick: u64,
    pub gamma: FeatureVector,
    /// Index of the driver's chosen backup controller (the one-hot hot slot).
    pub label: usize,
    /// Backup controller active in the filter at this tick.
    pub active: usize,
}

/// Rows grouped by episode, episodes stored contiguously with increasing
/// ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m_k: usize,
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn new(m_k: usize, rows: Vec<DatasetRow>) -> Result<Self> {
        let d = Self { m_k, rows };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_k == 0 {
            return Err(Error::Dataset("m_k must be positive".into()));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.label >= self.m_k || r.active >= self.m_k {
                return Err(Error::Dataset(format!("row {i}: label or active index out of range for m_k = {}", self.m_k)));
            }
            if !r.gamma.is_finite() {
                return Err(Error::Dataset(format!("row {i}: non-finite feature")));
            }
            let continues = i > 0 && self.rows[i - 1].episode == r.episode;
            if continues {
                if r.tick <= self.rows[i - 1].tick {
                    return Err(Error::Dataset(format!("row {i}: ticks must increase within episode {}", r.episode)));
                }
            } else if !seen.insert(r.episode) {
                return Err(Error::Dataset(format!("episode {} is not stored contiguously", r.episode)));
            }
        }
        Ok(())
    }

    /// `(episode id, row range)` in storage order.
    pub fn episodes(&self) -> Vec<(u64, Range<usize>)> {
        let mut out: Vec<(u64, Range<usize>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            match out.last_mut() {
                Some((id, range)) if *id == r.episode => range.end = i + 1,
                _ => out.push((r.episode, i..i + 1)),
            }
        }
        out
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.m_k];
        for r in &self.rows {
            c[r.label] += 1;
        }
        c
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            version: DATASET_VERSION,
            m_k: self.m_k,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines.next().ok_or_else(|| Error::Dataset("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION.to_string(),
                found: header.version.to_string(),
            });
        }
        if header.feature_order != FEATURE_NAMES {
            return Err(Error::Dataset(format!("unexpected feature order {:?}", header.feature_order)));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line)?);
        }
        Self::new(header.m_k, rows)
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Relabel every row with the label recorded `k` ticks later in the same
/// episode. The last `k` rows of each episode are dropped, and episodes
/// shorter than `k` are dropped entirely.
pub fn shift_labels(d: &Dataset, k: usize) -> Dataset {
    let mut rows = Vec::with_capacity(d.rows.len());
    for (id, range) in d.episodes() {
        let ep = &d.rows[range];
        if ep.len() < k {
            log::warn!("episode {id} has {} rows, fewer than the label shift {k}; dropped", ep.len());
            continue;
        }
        for j in 0..ep.len() - k {
            rows.push(DatasetRow { label: ep[j + k].label, ..ep[j].clone() });
        }
    }
    Dataset { m_k: d.m_k, rows }
}

/// Episode ids split into `(train, validation)` by a seeded shuffle.
pub fn split_episodes<R: Rng>(d: &Dataset, validation_fraction: f64, rng: &mut R) -> (Vec<u64>, Vec<u64>) {
    let mut ids: Vec<u64> = d.episodes().into_iter().map(|(id, _)| id).collect();
    ids.shuffle(rng);
    let n_val = if ids.len() < 2 { 0 } else { ((ids.len() as f64 * validation_fraction).round() as usize).clamp(1, ids.len() - 1) };
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

/// Fixed-length windows with the label of their newest row.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    /// `N x steps x FEATURE_COUNT`.
    pub data: Array3<f64>,
    pub labels: Vec<usize>,
    pub episodes: Vec<u64>,
    normalized: bool,
}

impl WindowSet {
    /// Every window of `steps` consecutive rows inside one episode, for
    /// episodes in `include` (all episodes when `None`).
    pub fn build(d: &Dataset, steps: usize, include: Option<&HashSet<u64>>) -> Self {
        let mut starts = Vec::new();
        for (id, range) in d.episodes() {
            if include.is_some_and(|s| !s.contains(&id)) || range.len() < steps {
                continue;
            }
            starts.extend((range.start..=range.end - steps).map(|s| (id, s)));
        }
        let mut data = Array3::zeros((starts.len(), steps, FEATURE_COUNT));
        let mut labels = Vec::with_capacity(starts.len());
        let mut episodes = Vec::with_capacity(starts.len());
        for (n, &(id, s)) in starts.iter().enumerate() {
            for t in 0..steps {
                for k in 0..FEATURE_COUNT {
                    data[[n, t, k]] = d.rows[s + t].gamma.0[k];
                }
            }
            labels.push(d.rows[s + steps - 1].label);
            episodes.push(id);
        }
        Self { data, labels, episodes, normalized: false }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalize(&mut self, n: &Normalizer) -> Result<()> {
        if self.normalized {
            return Err(Error::AlreadyNormalized);
        }
        for mut row in self.data.rows_mut() {
            for k in 0..FEATURE_COUNT {
                row[k] = (row[k] - n.mean[k]) / n.scale[k];
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Copy the windows at `idx` into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Array3<f64>, Vec<usize>) {
        let (_, t, k) = self.data.dim();
        let mut batch = Array3::zeros((idx.len(), t, k));
        for (b, &i) in idx.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), b).assign(&self.data.index_axis(ndarray::Axis(0), i));
        }
        (batch, idx.iter().map(|&i| self.labels[i]).collect())
    }
}
