//! Compressed sparse column storage with relative (delta) row indices.
//!
//! Within each column the first entry's delta is its row index and every
//! later delta is the distance to the previous row. A delta that reaches
//! 2^index_bits cannot be stored directly, so the encoder inserts a
//! zero-valued filler entry whose stored delta is 0 and which advances the
//! decoder by a full 2^index_bits step. Fillers are recognized by their
//! 0.0 value: real entries are nonzero by construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CscLayer {
    pub rows: usize,
    pub cols: usize,
    /// Shape of the tensor this matrix was flattened from.
    pub original_shape: Vec<usize>,
    pub index_bits: u8,
    /// Number of real (nonzero) entries; fillers excluded.
    pub real_count: usize,
    /// Entry offsets per column, fillers included; length cols + 1.
    pub col_ptr: Vec<usize>,
    /// Stored deltas, one per entry; fillers store 0.
    pub deltas: Vec<u16>,
    /// One value per entry; fillers hold exactly 0.0.
    pub values: Vec<f64>,
}

impl CscLayer {
    /// Entries in the packed streams, fillers included.
    pub fn entry_count(&self) -> usize {
        self.values.len()
    }

    /// The pre-packing CSC storage count: 2a + m + 1 numbers.
    pub fn storage_numbers(&self) -> usize {
        2 * self.real_count + self.cols + 1
    }

    /// Exact packed size in bits given the container's fixed widths.
    pub fn packed_bits(&self, value_bits: u64, ptr_bits: u64) -> u64 {
        self.entry_count() as u64 * (self.index_bits as u64 + value_bits)
            + (self.cols as u64 + 1) * ptr_bits
    }

    /// Decoded (row, value) pairs of one column, fillers skipped.
    pub fn column_entries(&self, col: usize) -> Result<Vec<(usize, f64)>> {
        let bound = 1usize << self.index_bits;
        let mut out = Vec::new();
        let mut pos = 0usize;
        for idx in self.col_ptr[col]..self.col_ptr[col + 1] {
            let delta = self.deltas[idx] as usize;
            if delta >= bound {
                return Err(Error::CorruptStream(format!(
                    "delta {delta} exceeds {}-bit bound",
                    self.index_bits
                )));
            }
            let value = self.values[idx];
            if value == 0.0 {
                // filler: advances by the full bound
                if delta != 0 {
                    return Err(Error::CorruptStream(
                        "filler entry with nonzero delta".into(),
                    ));
                }
                pos += bound;
            } else {
                let row = pos + delta;
                if row >= self.rows {
                    return Err(Error::CorruptStream(format!(
                        "row {row} outside {} rows",
                        self.rows
                    )));
                }
                if let Some(&(prev, _)) = out.last() {
                    if row <= prev {
                        return Err(Error::CorruptStream(format!(
                            "rows not strictly increasing: {prev} then {row}"
                        )));
                    }
                }
                out.push((row, value));
                pos = row;
            }
        }
        Ok(out)
    }
}

/// Encode a 2-D tensor (rows x cols, row-major) into CSC with delta
/// indices. Lossless: decode reproduces the input exactly.
pub fn csc_encode(matrix: &Tensor, index_bits: u8) -> Result<CscLayer> {
    if matrix.ndim() != 2 {
        return Err(Error::NotAMatrix(matrix.shape().to_vec()));
    }
    if index_bits == 0 || index_bits > 16 {
        return Err(Error::BadIndexBits(index_bits));
    }
    let rows = matrix.shape()[0];
    let cols = matrix.shape()[1];
    encode_slice(matrix.data(), rows, cols, index_bits, matrix.shape().to_vec())
}

/// Encode a row-major slice already known to be rows x cols; callers that
/// flatten conv weights pass the original tensor shape through.
pub fn encode_slice(
    data: &[f64],
    rows: usize,
    cols: usize,
    index_bits: u8,
    original_shape: Vec<usize>,
) -> Result<CscLayer> {
    if data.len() != rows * cols {
        return Err(Error::BadTensor {
            shape: vec![rows, cols],
            expected: rows * cols,
            got: data.len(),
        });
    }
    if index_bits == 0 || index_bits > 16 {
        return Err(Error::BadIndexBits(index_bits));
    }
    let bound = 1usize << index_bits;
    let mut col_ptr = Vec::with_capacity(cols + 1);
    let mut deltas: Vec<u16> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut real_count = 0usize;
    col_ptr.push(0);
    for col in 0..cols {
        let mut pos = 0usize;
        for row in 0..rows {
            let v = data[row * cols + col];
            if v == 0.0 {
                continue;
            }
            let mut gap = row - pos;
            while gap >= bound {
                deltas.push(0);
                values.push(0.0);
                pos += bound;
                gap -= bound;
            }
            deltas.push(gap as u16);
            values.push(v);
            pos = row;
            real_count += 1;
        }
        col_ptr.push(deltas.len());
    }
    Ok(CscLayer {
        rows,
        cols,
        original_shape,
        index_bits,
        real_count,
        col_ptr,
        deltas,
        values,
    })
}

/// Exact dense reconstruction; filler entries vanish.
pub fn csc_decode(layer: &CscLayer) -> Result<Tensor> {
    if layer.col_ptr.len() != layer.cols + 1
        || layer.deltas.len() != layer.values.len()
        || layer.col_ptr.last().copied() != Some(layer.deltas.len())
    {
        return Err(Error::CorruptStream(
            "column pointers disagree with entry streams".into(),
        ));
    }
    let mut data = vec![0.0; layer.rows * layer.cols];
    let mut reals = 0usize;
    for col in 0..layer.cols {
        for (row, value) in layer.column_entries(col)? {
            data[row * layer.cols + col] = value;
            reals += 1;
        }
    }
    if reals != layer.real_count {
        return Err(Error::CorruptStream(format!(
            "expected {} real entries, decoded {reals}",
            layer.real_count
        )));
    }
    Tensor::new(vec![layer.rows, layer.cols], data)
}

/// y = A x over the sparse storage, without densifying.
pub fn csc_matvec(layer: &CscLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.cols {
        return Err(Error::ShapeMismatch {
            context: "csc_matvec input length vs columns",
            expected: vec![layer.cols],
            got: vec![x.len()],
        });
    }
    let bound = 1usize << layer.index_bits;
    let mut y = vec![0.0; layer.rows];
    for (col, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let mut pos = 0usize;
        for idx in layer.col_ptr[col]..layer.col_ptr[col + 1] {
            let value = layer.values[idx];
            if value == 0.0 {
                pos += bound;
            } else {
                pos += layer.deltas[idx] as usize;
                y[pos] += value * xj;
            }
        }
    }
    Ok(y)
}
