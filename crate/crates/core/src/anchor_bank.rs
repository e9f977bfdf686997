//! Recovered samples keyed by target sample id, with the entropy the frozen
//! source model assigns them. The lowest-entropy fraction is averaged into
//! the representative anchor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::datagen::{io, Dataset, Split, TimeSeriesSample};
use crate::error::{Result, TemsrError};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub sample: Array2<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    entries: BTreeMap<usize, BankEntry>,
    capacity: usize,
}

/// `max(1, floor(ratio * size))`.
pub fn anchor_count(size: usize, ratio: f64) -> usize {
    ((ratio * size as f64 + 1e-9).floor() as usize).clamp(1, size.max(1))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(TemsrError::Config(format!("anchor ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Ids ordered by (entropy, id), truncated to `k`.
fn lowest(entropies: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = entropies.collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(id, _)| id).collect()
}

fn mean_of<'a>(samples: impl Iterator<Item = &'a Array2<f64>>) -> Array2<f64> {
    let mut acc: Option<Array2<f64>> = None;
    let mut k = 0.0;
    for s in samples {
        match acc.as_mut() {
            Some(a) => *a += s,
            None => acc = Some(s.clone()),
        }
        k += 1.0;
    }
    acc.expect("at least one sample") / k
}

/// Anchor drawn from the current batch instead of the bank.
pub fn batch_anchor(samples: &[Array2<f64>], entropies: &[f64], ratio: f64) -> Result<Array2<f64>> {
    check_ratio(ratio)?;
    if samples.is_empty() || samples.len() != entropies.len() {
        return Err(TemsrError::State(format!(
            "batch anchor needs matching non-empty inputs, got {} samples and {} entropies",
            samples.len(),
            entropies.len()
        )));
    }
    let k = anchor_count(samples.len(), ratio);
    let ids = lowest(entropies.iter().copied().enumerate(), k);
    Ok(mean_of(ids.iter().map(|&i| &samples[i])))
}

impl AnchorBank {
    pub fn new(capacity: usize) -> Self {
        AnchorBank {
            entries: BTreeMap::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, id: usize) -> Option<&BankEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &BankEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    /// Latest recovery wins. Ids must lie below the capacity.
    pub fn update(&mut self, id: usize, sample: Array2<f64>, entropy: f64) -> Result<()> {
        if !entropy.is_finite() || entropy < 0.0 {
            return Err(TemsrError::training(
                "anchor_bank",
                format!("entropy {entropy} for sample {id} is not a finite nonnegative value"),
            ));
        }
        if id >= self.capacity {
            return Err(TemsrError::State(format!(
                "sample id {id} outside bank capacity {}",
                self.capacity
            )));
        }
        if let Some((_, first)) = self.entries.iter().next() {
            if first.sample.dim() != sample.dim() {
                return Err(TemsrError::Shape(format!(
                    "bank holds {:?} samples, got {:?}",
                    first.sample.dim(),
                    sample.dim()
                )));
            }
        }
        self.entries.insert(id, BankEntry { sample, entropy });
        Ok(())
    }

    /// Ids of the `max(1, floor(ratio * size))` lowest-entropy entries,
    /// ties by smaller id.
    pub fn select_topk_ids(&self, ratio: f64) -> Result<Vec<usize>> {
        check_ratio(ratio)?;
        if self.entries.is_empty() {
            return Err(TemsrError::State("anchor requested from an empty bank".into()));
        }
        let k = anchor_count(self.entries.len(), ratio);
        Ok(lowest(self.entries.iter().map(|(&id, e)| (id, e.entropy)), k))
    }

    pub fn select_topk(&self, ratio: f64) -> Result<Vec<&Array2<f64>>> {
        Ok(self
            .select_topk_ids(ratio)?
            .into_iter()
            .map(|id| &self.entries[&id].sample)
            .collect())
    }

    /// Element-wise mean of the selected raw samples.
    pub fn representative_anchor(&self, ratio: f64) -> Result<TimeSeriesSample> {
        let chosen = self.select_topk(ratio)?;
        Ok(TimeSeriesSample::new(mean_of(chosen.into_iter()), None))
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".entropy");
        PathBuf::from(p)
    }

    /// Writes the samples (dataset format, id order) to `path` and the
    /// `(u32 id, f32 entropy)` table to `<path>.entropy`, preceded by u32
    /// count and u32 capacity.
    pub fn save(&self, path: &Path) -> Result<()> {
        let samples = self
            .entries
            .values()
            .map(|e| TimeSeriesSample::new(e.sample.clone(), None))
            .collect();
        let ds = Dataset::new(samples, "bank", 2, Split::Train)?;
        fs::write(path, io::encode(&ds)?)?;
        let mut table = Vec::with_capacity(8 + 8 * self.entries.len());
        table.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        table.extend_from_slice(&(self.capacity as u32).to_le_bytes());
        for (&id, e) in &self.entries {
            table.extend_from_slice(&(id as u32).to_le_bytes());
            table.extend_from_slice(&(e.entropy as f32).to_le_bytes());
        }
        fs::write(Self::sidecar(path), table)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds = io::decode(&fs::read(path)?, "bank", Split::Train)?;
        let table = fs::read(Self::sidecar(path))?;
        let word = |o: usize| -> Result<[u8; 4]> {
            table
                .get(o..o + 4)
                .map(|b| b.try_into().unwrap())
                .ok_or_else(|| TemsrError::Format("truncated entropy table".into()))
        };
        let count = u32::from_le_bytes(word(0)?) as usize;
        let capacity = u32::from_le_bytes(word(4)?) as usize;
        if count != ds.len() || table.len() != 8 + 8 * count {
            return Err(TemsrError::Format(format!(
                "entropy table lists {count} entries for {} samples",
                ds.len()
            )));
        }
        let mut bank = AnchorBank::new(capacity);
        for (i, s) in ds.samples().iter().enumerate() {
            let id = u32::from_le_bytes(word(8 + 8 * i)?) as usize;
            let h = f32::from_le_bytes(word(12 + 8 * i)?) as f64;
            bank.update(id, s.values.clone(), h)?;
        }
        Ok(bank)
    }
}
