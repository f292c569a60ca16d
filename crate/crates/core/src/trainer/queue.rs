use std::collections::VecDeque;

use crate::diffcore::{self, Matrix};
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity FIFO of unit gallery features tagged with identities.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, u32)>,
}

impl GalleryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        GalleryQueue { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u32)> {
        self.entries.iter().map(|(f, id)| (f.as_slice(), *id))
    }

    /// Appends rows in order, evicting the oldest entries past capacity.
    /// Nothing is pushed if any row is not unit-norm.
    pub fn push(&mut self, features: &Matrix, ids: &[u32]) -> Result<()> {
        if features.rows() != ids.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ids", features.rows()),
                found: format!("{} ids", ids.len()),
            });
        }
        if features.rows() == 0 {
            return Ok(());
        }
        if features.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("features of dim {}", self.dim),
                found: format!("dim {}", features.cols()),
            });
        }
        for row in features.iter_rows() {
            let n = diffcore::norm(row);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotUnit { norm: n });
            }
        }
        for (row, &id) in features.iter_rows().zip(ids) {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((row.to_vec(), id));
        }
        Ok(())
    }

    /// Queue entries whose identity is not among `batch_ids`, oldest first.
    pub fn negatives_for(&self, batch_ids: &[u32]) -> (Matrix, Vec<u32>) {
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for (f, id) in &self.entries {
            if !batch_ids.contains(id) {
                data.extend_from_slice(f);
                ids.push(*id);
            }
        }
        let rows = ids.len();
        (Matrix::new(rows, self.dim, data).expect("queue rows share one dimension"), ids)
    }
}
