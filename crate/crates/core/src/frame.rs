use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Visual tokens of one frame plus their cached mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePacket {
    tokens: DMatrix<f64>,
    pooled: DVector<f64>,
    pub frame_index: usize,
    pub is_raymap: bool,
}

impl FramePacket {
    /// Builds a packet from a `T_tok × d_in` token matrix. Fails on an empty token list
    /// or non-finite entries.
    pub fn new(tokens: DMatrix<f64>, frame_index: usize, is_raymap: bool) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::invalid("frame packet needs at least one token of non-zero width"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame tokens must be finite"));
        }
        let pooled = tokens.row_mean().transpose();
        Ok(Self {
            tokens,
            pooled,
            frame_index,
            is_raymap,
        })
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], frame_index: usize) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::dim("frame token rows have unequal widths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), width, &flat), frame_index, false)
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    /// Arithmetic mean of the token rows.
    pub fn pooled(&self) -> &DVector<f64> {
        &self.pooled
    }

    pub fn d_in(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }
}
