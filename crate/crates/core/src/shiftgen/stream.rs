use serde::{Deserialize, Serialize};

use super::task::{permutation, Dataset};
use crate::autodiff::Tensor;
use crate::error::{CocaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOrder {
    IidShuffled,
    /// Every sample of class 0, then class 1, and so on.
    LabelSorted,
    /// Shuffled, then cut into blocks of four batches that are each sorted by
    /// label: a milder, recurring label shift.
    MixedBlocks,
}

fn default_batch_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub order: StreamOrder,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Number of samples to stream; all of them when absent.
    #[serde(default)]
    pub total: Option<usize>,
}

impl StreamSpec {
    pub fn new(order: StreamOrder, batch_size: usize, total: Option<usize>) -> Self {
        Self {
            order,
            batch_size,
            total,
        }
    }
}

/// One test batch. Labels travel with the batch for scoring only.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Ordered batches over a dataset. A trailing batch smaller than 2 is
/// dropped.
#[derive(Clone, Debug)]
pub struct Stream {
    data: Dataset,
    batch_size: usize,
    pos: usize,
}

impl Stream {
    pub fn num_batches(&self) -> usize {
        let n = self.data.len();
        let full = n / self.batch_size;
        full + usize::from(n % self.batch_size >= 2)
    }

    /// The reordered samples behind the stream.
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }
}

impl Iterator for Stream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let n = self.data.len();
        let end = (self.pos + self.batch_size).min(n);
        if end - self.pos < 2 {
            return None;
        }
        let idx: Vec<usize> = (self.pos..end).collect();
        self.pos = end;
        Some(Batch {
            features: self.data.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.data.labels[i]).collect(),
        })
    }
}

pub fn make_stream(dataset: &Dataset, spec: &StreamSpec, seed: u64) -> Result<Stream> {
    if dataset.is_empty() {
        return Err(CocaError::invalid("cannot stream an empty dataset"));
    }
    if spec.batch_size == 0 {
        return Err(CocaError::invalid("batch_size must be >= 1"));
    }
    let total = spec.total.unwrap_or(dataset.len());
    if total == 0 || total > dataset.len() {
        return Err(CocaError::invalid(format!(
            "stream total {total} out of range for {} samples",
            dataset.len()
        )));
    }
    let base: Vec<usize> = (0..total).collect();
    let labels = &dataset.labels;
    let order = match spec.order {
        StreamOrder::IidShuffled => permutation(total, seed),
        StreamOrder::LabelSorted => {
            let mut idx = base;
            idx.sort_by_key(|&i| labels[i]);
            idx
        }
        StreamOrder::MixedBlocks => {
            let mut idx = permutation(total, seed);
            for block in idx.chunks_mut(4 * spec.batch_size) {
                block.sort_by_key(|&i| labels[i]);
            }
            idx
        }
    };
    Ok(Stream {
        data: dataset.subset(&order),
        batch_size: spec.batch_size,
        pos: 0,
    })
}
