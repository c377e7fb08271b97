use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity FIFO of unit-norm momentum embeddings.
///
/// Entries from manipulated pairs are stored like any other; the flag is kept
/// for diagnostics only.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    manipulated: Vec<bool>,
    len: usize,
    cursor: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidInput("queue capacity and dimension must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            manipulated: vec![false; capacity],
            len: 0,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Append the rows of `batch` (`[B, dim]`), evicting the oldest entries once full.
    pub fn push(&mut self, batch: &Tensor, manipulated: &[bool]) -> Result<()> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.dim || batch.shape()[0] != manipulated.len() {
            return Err(Error::shape("queue_push", batch.shape(), &[manipulated.len(), self.dim]));
        }
        for (i, row) in batch.data().chunks(self.dim).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidInput(format!("queue entries must be unit-norm, row {i} has norm {n}")));
            }
        }
        for (row, &flag) in batch.data().chunks(self.dim).zip(manipulated) {
            let c = self.cursor;
            self.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(row);
            self.manipulated[c] = flag;
            self.cursor = (c + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], bool)> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(move |i| {
            let s = (start + i) % self.capacity;
            (&self.data[s * self.dim..(s + 1) * self.dim], self.manipulated[s])
        })
    }

    pub fn newest(&self) -> Option<&[f64]> {
        self.iter().last().map(|(r, _)| r)
    }

    /// `[len, dim]` copy of the stored entries, oldest first.
    pub fn snapshot(&self) -> Tensor {
        let data = self.iter().flat_map(|(r, _)| r.iter().copied()).collect();
        Tensor::from_parts(vec![self.len, self.dim], data)
    }

    pub fn manipulated_count(&self) -> usize {
        self.iter().filter(|(_, m)| *m).count()
    }

    /// Raw ring storage, cursor and fill, for checkpointing.
    pub fn raw_parts(&self) -> (&[f64], &[bool], usize, usize) {
        (&self.data, &self.manipulated, self.len, self.cursor)
    }

    pub fn from_raw_parts(
        capacity: usize,
        dim: usize,
        data: Vec<f64>,
        manipulated: Vec<bool>,
        len: usize,
        cursor: usize,
    ) -> Result<Self> {
        if capacity == 0
            || dim == 0
            || data.len() != capacity * dim
            || manipulated.len() != capacity
            || len > capacity
            || cursor >= capacity
        {
            return Err(Error::Checkpoint("inconsistent queue state".into()));
        }
        Ok(Self { capacity, dim, data, manipulated, len, cursor })
    }
}
