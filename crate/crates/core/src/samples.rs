//! Row-oriented sample access.
//!
//! Feature construction only ever needs one sample vector at a time, so every
//! consumer is written against [`SampleRows`]. Embedded datasets hand out
//! zero-copy windows into the source series; [`RowMatrix`] is the owned
//! dense alternative.

use faer::Mat;

use crate::error::{FkmdError, Result};

pub trait SampleRows: Sync {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
}

/// Dense row-major matrix of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    data: Vec<f64>,
    n_cols: usize,
}

impl RowMatrix {
    pub fn new(data: Vec<f64>, n_cols: usize) -> Result<Self> {
        if n_cols == 0 || data.len() % n_cols != 0 {
            return Err(FkmdError::DimensionMismatch(format!(
                "{} values cannot be split into rows of width {n_cols}",
                data.len()
            )));
        }
        Ok(Self { data, n_cols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(FkmdError::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(data, n_cols)
    }

    pub fn collect<S: SampleRows + ?Sized>(rows: &S) -> Self {
        let mut data = Vec::with_capacity(rows.n_rows() * rows.dim());
        for i in 0..rows.n_rows() {
            data.extend_from_slice(rows.row(i));
        }
        Self {
            data,
            n_cols: rows.dim(),
        }
    }

    pub fn select<S: SampleRows + ?Sized>(rows: &S, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * rows.dim());
        for &i in indices {
            data.extend_from_slice(rows.row(i));
        }
        Self {
            data,
            n_cols: rows.dim(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_mat(&self) -> Mat<f64> {
        Mat::from_fn(self.n_rows(), self.n_cols, |i, j| self.data[i * self.n_cols + j])
    }
}

impl SampleRows for RowMatrix {
    fn n_rows(&self) -> usize {
        self.data.len() / self.n_cols
    }

    fn dim(&self) -> usize {
        self.n_cols
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

/// Overlapping windows over a row-major buffer: row `i` is the slice of
/// `width` values starting `stride * (offset + i)` values in.
#[derive(Debug, Clone, Copy)]
pub struct WindowRows<'a> {
    data: &'a [f64],
    stride: usize,
    width: usize,
    offset: usize,
    count: usize,
}

impl<'a> WindowRows<'a> {
    pub(crate) fn new(data: &'a [f64], stride: usize, width: usize, offset: usize, count: usize) -> Self {
        debug_assert!(count == 0 || (offset + count - 1) * stride + width <= data.len());
        Self {
            data,
            stride,
            width,
            offset,
            count,
        }
    }
}

impl SampleRows for WindowRows<'_> {
    fn n_rows(&self) -> usize {
        self.count
    }

    fn dim(&self) -> usize {
        self.width
    }

    fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.count, "row {i} out of range for {} windows", self.count);
        let start = (self.offset + i) * self.stride;
        &self.data[start..start + self.width]
    }
}

/// A subset of another row source, addressed through an index list.
pub struct IndexedRows<'a, S: SampleRows + ?Sized> {
    source: &'a S,
    indices: &'a [usize],
}

impl<'a, S: SampleRows + ?Sized> IndexedRows<'a, S> {
    pub fn new(source: &'a S, indices: &'a [usize]) -> Self {
        Self { source, indices }
    }
}

impl<S: SampleRows + ?Sized> SampleRows for IndexedRows<'_, S> {
    fn n_rows(&self) -> usize {
        self.indices.len()
    }

    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn row(&self, i: usize) -> &[f64] {
        self.source.row(self.indices[i])
    }
}

/// A single sample viewed as a one-row source.
pub struct SingleRow<'a>(pub &'a [f64]);

impl SampleRows for SingleRow<'_> {
    fn n_rows(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        self.0.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        assert_eq!(i, 0);
        self.0
    }
}
