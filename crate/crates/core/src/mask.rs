// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use crate::error::{Error, Result};

/// Attendability mask: `allowed(i, j)` is true when query `i` may attend to
/// key `j`. Every row keeps at least one position.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Arc<[bool]>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Input(format!(
                "mask of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(Error::Contract(format!("mask row {r} has no attendable position")));
        }
        Ok(Self {
            rows,
            cols,
            allowed: allowed.into(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, allowed)
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i).expect("causal rows are never empty")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub(crate) fn shared(&self) -> Arc<[bool]> {
        Arc::clone(&self.allowed)
    }

    /// Number of attendable keys for each query.
    pub fn row_counts(&self) -> Vec<usize> {
        self.allowed
            .chunks(self.cols)
            .map(|r| r.iter().filter(|&&a| a).count())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_row_is_rejected() {
        let err = Mask::new(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn causal_counts() {
        assert_eq!(Mask::causal(4).row_counts(), vec![1, 2, 3, 4]);
    }
}
