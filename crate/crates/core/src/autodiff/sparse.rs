use crate::error::{Error, Result};

/// Row-grouped sparse pattern.
///
/// Row `r` owns entries `offsets[r]..offsets[r + 1]`. Each entry names a
/// `slot` (an index into a per-edge weight or logit vector) and, for
/// aggregation, a `col` (the row of the dense operand being gathered).
/// Segment ops (softmax, centering) only read `slots`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    slots: Vec<usize>,
    cols: Vec<usize>,
}

impl Neighborhoods {
    pub fn new(offsets: Vec<usize>, slots: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(Error::Shape("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Shape("offsets must be non-decreasing".into()));
        }
        let nnz = *offsets.last().unwrap();
        if slots.len() != nnz || (!cols.is_empty() && cols.len() != nnz) {
            return Err(Error::Shape(format!(
                "pattern has {nnz} entries but {} slots and {} cols",
                slots.len(),
                cols.len()
            )));
        }
        Ok(Self {
            offsets,
            slots,
            cols,
        })
    }

    /// Build from per-row lists of `(slot, col)` pairs.
    pub fn from_rows(rows: &[Vec<(usize, usize)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut slots = Vec::new();
        let mut cols = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(s, c) in row {
                slots.push(s);
                cols.push(c);
            }
            offsets.push(slots.len());
        }
        Self {
            offsets,
            slots,
            cols,
        }
    }

    /// One segment spanning slots `0..n`.
    pub fn single(n: usize) -> Self {
        Self {
            offsets: vec![0, n],
            slots: (0..n).collect(),
            cols: (0..n).collect(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.slots.len()
    }

    pub fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn slots(&self, row: usize) -> &[usize] {
        &self.slots[self.range(row)]
    }

    pub fn cols(&self, row: usize) -> &[usize] {
        &self.cols[self.range(row)]
    }

    pub fn has_cols(&self) -> bool {
        self.cols.len() == self.slots.len()
    }

    pub fn max_slot(&self) -> Option<usize> {
        self.slots.iter().copied().max()
    }

    pub fn max_col(&self) -> Option<usize> {
        self.cols.iter().copied().max()
    }

    /// True when every slot in `0..n` appears in exactly one row.
    pub fn partitions(&self, n: usize) -> bool {
        if self.slots.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &s in &self.slots {
            if s >= n || seen[s] {
                return false;
            }
            seen[s] = true;
        }
        true
    }
}
