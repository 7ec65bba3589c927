//! Experience-replay memory: a small verbatim sample of every finished task,
//! served back at a fixed step frequency.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::data::{decode_dataset, encode_dataset, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream, Rng};

pub const BUFFER_MAGIC: &[u8; 8] = b"TAMCLRB\0";
pub const BUFFER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Fraction of each task's training set kept.
    pub sample_pct: f64,
    /// Replay fires on every step that is a multiple of this.
    pub frequency: usize,
    /// Count steps from 0 instead of 1, so the very first step replays.
    pub at_step_zero: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            sample_pct: 0.01,
            frequency: 100,
            at_step_zero: false,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_pct > 0.0 && self.sample_pct <= 1.0) {
            return Err(Error::Config {
                field: "replay.sample_pct".into(),
                message: format!("{} outside (0, 1]", self.sample_pct),
            });
        }
        if self.frequency == 0 {
            return Err(Error::Config {
                field: "replay.frequency".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// `max(1, floor(sample_pct · n))`.
    pub fn store_size(&self, n: usize) -> usize {
        ((self.sample_pct * n as f64).floor() as usize).clamp(1, n.max(1))
    }

    /// Whether the 1-indexed `step` of an epoch replays.
    pub fn should_replay(&self, step: usize) -> bool {
        let s = if self.at_step_zero { step.saturating_sub(1) } else { step };
        s % self.frequency == 0
    }

    /// Replay steps in an epoch of `steps` steps.
    pub fn replays_per_epoch(&self, steps: usize) -> usize {
        (1..=steps).filter(|&s| self.should_replay(s)).count()
    }
}

/// Samples drawn from one task's store.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub task: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    config: ReplayConfig,
    stores: BTreeMap<usize, Dataset>,
    rng: Rng,
}

impl MemoryBuffer {
    pub fn new(config: ReplayConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(MemoryBuffer {
            config,
            stores: BTreeMap::new(),
            rng: seeded(seed, stream::REPLAY),
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn should_replay(&self, step: usize) -> bool {
        self.config.should_replay(step)
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.stores.keys().copied()
    }

    pub fn store(&self, task: usize) -> Option<&[Sample]> {
        self.stores.get(&task).map(|d| d.samples.as_slice())
    }

    /// Total stored samples across tasks.
    pub fn len(&self) -> usize {
        self.stores.values().map(Dataset::len).sum()
    }

    /// Keeps a uniform random subset of `dataset`, without replacement and
    /// in the dataset's original order.
    pub fn store_task_samples(&mut self, task: usize, dataset: &Dataset) -> Result<usize> {
        if self.stores.contains_key(&task) {
            return Err(Error::invalid_state(format!("task {task} already has stored samples")));
        }
        if dataset.is_empty() {
            return Err(Error::invalid_argument(format!("task {task}: nothing to store")));
        }
        let k = self.config.store_size(dataset.len());
        let mut picked = index::sample(&mut self.rng, dataset.len(), k).into_vec();
        picked.sort_unstable();
        let samples = picked.into_iter().map(|i| dataset.samples[i].clone()).collect();
        self.stores.insert(
            task,
            Dataset {
                spec: dataset.spec.clone(),
                split: Split::Train,
                samples,
            },
        );
        Ok(k)
    }

    /// A previous task chosen uniformly, then `batch_size` of its samples
    /// drawn with replacement. `None` while the buffer is empty.
    pub fn get_batch(&mut self, batch_size: usize) -> Option<ReplayBatch> {
        if self.stores.is_empty() || batch_size == 0 {
            return None;
        }
        let pick = self.rng.random_range(0..self.stores.len());
        let (&task, store) = self.stores.iter().nth(pick).expect("index in range");
        let samples = (0..batch_size)
            .map(|_| store.samples[self.rng.random_range(0..store.len())].clone())
            .collect();
        Some(ReplayBatch { task, samples })
    }

    /// Stores as dataset records, each prefixed by its task index. The RNG
    /// position is not saved.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stores.len() as u32).to_le_bytes());
        for (&task, ds) in &self.stores {
            let bytes = encode_dataset(ds)?;
            out.extend_from_slice(&(task as u32).to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], config: ReplayConfig, seed: u64) -> Result<Self> {
        let mut buffer = MemoryBuffer::new(config, seed)?;
        let mut r = Reader::new(bytes);
        r.header(BUFFER_MAGIC, BUFFER_VERSION)?;
        let n = r.u32("task count")?;
        for _ in 0..n {
            let task = r.u32("task index")? as usize;
            let len = r.u64("store length")? as usize;
            let at = r.pos;
            let ds = decode_dataset(r.take(len, "store")?).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format {
                    offset: offset + at as u64,
                    message,
                },
                other => other,
            })?;
            if buffer.stores.insert(task, ds).is_some() {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("task {task} stored twice"),
                });
            }
        }
        r.finish()?;
        Ok(buffer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, config: ReplayConfig, seed: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, config, seed)
    }
}
