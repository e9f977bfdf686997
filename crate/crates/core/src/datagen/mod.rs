//! Time-series samples and datasets, synthetic domain pairs, the on-disk
//! dataset format, min-max normalization and time-point masking.

pub(crate) mod io;
mod mask;
mod synthetic;

pub use io::{load_dataset, save_dataset, MAGIC};
pub use mask::{apply_mask, apply_mask_batch, make_mask, masked_count, MaskSpec};
pub use synthetic::{generate_domain_pair, DomainShift, DomainSplits, MotifFamily, SyntheticSpec};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TemsrError};

/// Shortest sequence the pipeline accepts.
pub const MIN_LENGTH: usize = 8;

/// One multichannel sequence, `values` is `[channels, length]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Array2<f64>,
    pub label: Option<usize>,
}

impl TimeSeriesSample {
    pub fn new(values: Array2<f64>, label: Option<usize>) -> Self {
        TimeSeriesSample { values, label }
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<TimeSeriesSample>,
    domain_id: String,
    class_count: usize,
    split: Split,
}

impl Dataset {
    /// Validates shapes, finiteness and label range.
    pub fn new(
        samples: Vec<TimeSeriesSample>,
        domain_id: impl Into<String>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(TemsrError::Config(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        if let Some(first) = samples.first() {
            let (n, l) = first.values.dim();
            if n == 0 || l < MIN_LENGTH {
                return Err(TemsrError::Shape(format!(
                    "samples need N >= 1 and L >= {MIN_LENGTH}, got N={n}, L={l}"
                )));
            }
            let labeled = first.label.is_some();
            for (i, s) in samples.iter().enumerate() {
                if s.values.dim() != (n, l) {
                    return Err(TemsrError::Shape(format!(
                        "sample {i} has shape {:?}, expected {:?}",
                        s.values.dim(),
                        (n, l)
                    )));
                }
                if s.label.is_some() != labeled {
                    return Err(TemsrError::Data(
                        "labels must be present on all samples or none".into(),
                    ));
                }
                if let Some(y) = s.label {
                    if y >= class_count {
                        return Err(TemsrError::Data(format!(
                            "sample {i} label {y} outside [0, {class_count})"
                        )));
                    }
                }
                if s.values.iter().any(|v| !v.is_finite()) {
                    return Err(TemsrError::Data(format!("sample {i} has non-finite values")));
                }
            }
        }
        Ok(Dataset {
            samples,
            domain_id: domain_id.into(),
            class_count,
            split,
        })
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(channels, length)`, or `None` for an empty dataset.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.values.dim())
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.first().is_some_and(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Copy with labels removed; what an adaptation run is allowed to see.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| TimeSeriesSample::new(s.values.clone(), None))
                .collect(),
            domain_id: self.domain_id.clone(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    /// Stacks the selected samples into a `[B, N, L]` array.
    pub fn batch(&self, indices: &[usize]) -> Array3<f64> {
        let (n, l) = self.shape().unwrap_or((0, 0));
        let mut out = Array3::zeros((indices.len(), n, l));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.samples[i].values);
        }
        out
    }

    pub fn to_batch(&self) -> Array3<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Per-channel extrema of a train split.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxStats {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.shape().map_or(0, |(n, _)| n);
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for s in ds.samples() {
            for (c, row) in s.values.outer_iter().enumerate() {
                for &v in row {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        MinMaxStats { min, max }
    }

    /// Affine map to `[0, 1]` per channel; constant channels map to 0.
    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let samples = ds
            .samples()
            .iter()
            .map(|s| {
                let mut v = s.values.clone();
                for (c, mut row) in v.outer_iter_mut().enumerate() {
                    let span = self.max[c] - self.min[c];
                    if span > 0.0 {
                        row.mapv_inplace(|x| (x - self.min[c]) / span);
                    } else {
                        row.fill(0.0);
                    }
                }
                TimeSeriesSample::new(v, s.label)
            })
            .collect();
        Dataset {
            samples,
            domain_id: ds.domain_id.clone(),
            class_count: ds.class_count,
            split: ds.split,
        }
    }
}

/// Min-max normalization with statistics taken from `ds` itself, which is
/// expected to be a train split. Use [`MinMaxStats`] to carry the train
/// statistics over to a test split.
pub fn min_max_normalize(ds: &Dataset) -> Dataset {
    MinMaxStats::fit(ds).apply(ds)
}
