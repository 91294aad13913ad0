//! Dense tensors with emulated numeric formats, sparsity masks, and the
//! flattened CSR layout used for byte accounting of sparse weights.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::half::half_round;

/// Storage/arithmetic format of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NumericFormat {
    Fp16,
    Fp32,
    Fp64,
}

impl NumericFormat {
    pub const fn element_bytes(self) -> u64 {
        match self {
            NumericFormat::Fp16 => 2,
            NumericFormat::Fp32 => 4,
            NumericFormat::Fp64 => 8,
        }
    }

    pub const fn bits(self) -> u32 {
        (self.element_bytes() * 8) as u32
    }

    /// Rounds a working value to the nearest value representable in this format.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            NumericFormat::Fp64 => x,
            NumericFormat::Fp32 => x as f32 as f64,
            NumericFormat::Fp16 => half_round(x),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp16" | "16" | "half" => Some(NumericFormat::Fp16),
            "fp32" | "32" | "single" => Some(NumericFormat::Fp32),
            "fp64" | "64" | "double" => Some(NumericFormat::Fp64),
            _ => None,
        }
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NumericFormat::Fp16 => "fp16",
            NumericFormat::Fp32 => "fp32",
            NumericFormat::Fp64 => "fp64",
        };
        f.write_str(s)
    }
}

/// Bytes of a dense tensor: product of extents times element size.
pub fn tensor_bytes(shape: &[usize], format: NumericFormat) -> u64 {
    shape.iter().map(|&d| d as u64).product::<u64>() * format.element_bytes()
}

/// Dense tensor whose values are always exactly representable in `format`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    format: NumericFormat,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize], format: NumericFormat) -> Self {
        let n = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            format,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor, quantizing every value into `format`.
    pub fn from_vec(shape: &[usize], format: NumericFormat, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|x| format.round(x)).collect();
        Ok(DenseTensor {
            shape: shape.to_vec(),
            format,
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * self.format.element_bytes()
    }

    /// Overwrites element `i`, rounding into the tensor's format.
    pub fn set(&mut self, i: usize, x: f64) {
        self.data[i] = self.format.round(x);
    }

    /// Applies `f` to every element, re-rounding the result.
    pub fn map_inplace(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let fmt = self.format;
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = fmt.round(f(i, *v));
        }
    }

    /// Converts to another format (rounding when narrowing).
    pub fn cast(&self, format: NumericFormat) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            format,
            data: self.data.iter().map(|&x| format.round(x)).collect(),
        }
    }

    pub fn apply_mask(&mut self, mask: &SparsityMask) -> Result<()> {
        if mask.shape() != self.shape() {
            return Err(Error::contract(format!(
                "mask shape {:?} does not match tensor shape {:?}",
                mask.shape(),
                self.shape
            )));
        }
        for (v, &keep) in self.data.iter_mut().zip(mask.bits()) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One boolean per element of a paired tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    nnz: usize,
}

impl SparsityMask {
    pub fn full(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        SparsityMask {
            shape: shape.to_vec(),
            bits: vec![true; n],
            nnz: n,
        }
    }

    pub fn empty(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        SparsityMask {
            shape: shape.to_vec(),
            bits: vec![false; n],
            nnz: 0,
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() {
            return Err(Error::contract(format!(
                "mask shape {shape:?} needs {n} bits, got {}",
                bits.len()
            )));
        }
        let nnz = bits.iter().filter(|&&b| b).count();
        Ok(SparsityMask {
            shape: shape.to_vec(),
            bits,
            nnz,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        if self.bits[i] != on {
            self.bits[i] = on;
            if on {
                self.nnz += 1;
            } else {
                self.nnz -= 1;
            }
        }
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            1.0
        } else {
            self.nnz as f64 / self.bits.len() as f64
        }
    }
}

/// Number of bits per column index: `ceil(log2(cols))`, zero for a single column.
pub fn col_index_bits(cols: usize) -> u32 {
    if cols <= 1 {
        0
    } else {
        usize::BITS - (cols - 1).leading_zeros()
    }
}

/// Byte size of a CSR matrix with packed column indices and 32-bit row pointers.
///
/// With `shares_indices` only the value array is charged; the index arrays
/// belong to another tensor with the same sparsity pattern.
pub fn csr_bytes(rows: usize, cols: usize, nnz: u64, element_bytes: u64, shares_indices: bool) -> u64 {
    let values = nnz * element_bytes;
    if shares_indices {
        return values;
    }
    let index_bits = nnz * col_index_bits(cols) as u64;
    index_bits.div_ceil(8) + (rows as u64 + 1) * 4 + values
}

/// Conv weight `c_o x c_i x k1 x k2` flattened to a `c_o x (c_i k1 k2)` CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvCSR {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub col_index_bits: u32,
    pub col_indices: Vec<u32>,
    pub row_ptr: Vec<u32>,
    pub element_bytes: u64,
    /// Original 4-D weight shape, kept for the inverse transform.
    pub weight_shape: Vec<usize>,
    pub format: NumericFormat,
}

impl SparseConvCSR {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Checks the structural invariants of the CSR arrays.
    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[0] != 0 {
            return Err(Error::contract("row_ptr must have rows+1 entries starting at 0"));
        }
        if *self.row_ptr.last().unwrap() as usize != self.nnz() || self.col_indices.len() != self.nnz() {
            return Err(Error::contract("row_ptr[rows] must equal nnz"));
        }
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            if a > b {
                return Err(Error::contract("row_ptr must be nondecreasing"));
            }
            let row = &self.col_indices[a..b];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c as usize >= self.cols) {
                return Err(Error::contract("column indices must be increasing and < cols"));
            }
        }
        Ok(())
    }
}

/// Flattens a 4-D (or 2-D, treated as `k1 = k2 = 1`) weight into CSR, keeping masked-true entries.
pub fn csr_from_dense(weight: &DenseTensor, mask: &SparsityMask) -> Result<SparseConvCSR> {
    if weight.shape() != mask.shape() {
        return Err(Error::contract(format!(
            "mask shape {:?} does not match weight shape {:?}",
            mask.shape(),
            weight.shape()
        )));
    }
    let shape = weight.shape();
    if shape.is_empty() {
        return Err(Error::contract("weight must have at least one dimension"));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mut values = Vec::with_capacity(mask.nnz());
    let mut col_indices = Vec::with_capacity(mask.nnz());
    let mut row_ptr = Vec::with_capacity(rows + 1);
    row_ptr.push(0u32);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if mask.get(i) {
                values.push(weight.data()[i]);
                col_indices.push(c as u32);
            }
        }
        row_ptr.push(values.len() as u32);
    }
    Ok(SparseConvCSR {
        rows,
        cols,
        values,
        col_index_bits: col_index_bits(cols),
        col_indices,
        row_ptr,
        element_bytes: weight.format().element_bytes(),
        weight_shape: shape.to_vec(),
        format: weight.format(),
    })
}

pub fn csr_to_dense(csr: &SparseConvCSR) -> DenseTensor {
    let mut out = DenseTensor::zeros(&csr.weight_shape, csr.format);
    for r in 0..csr.rows {
        for k in csr.row_ptr[r] as usize..csr.row_ptr[r + 1] as usize {
            out.data[r * csr.cols + csr.col_indices[k] as usize] = csr.values[k];
        }
    }
    out
}

/// Storage bytes of a CSR tensor; see [`csr_bytes`].
pub fn csr_storage_bytes(csr: &SparseConvCSR, shares_indices: bool) -> u64 {
    csr_bytes(csr.rows, csr.cols, csr.nnz() as u64, csr.element_bytes, shares_indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_sizes() {
        assert_eq!(NumericFormat::Fp64.element_bytes(), 8);
        assert_eq!(NumericFormat::Fp32.element_bytes(), 4);
        assert_eq!(NumericFormat::Fp16.element_bytes(), 2);
    }

    #[test]
    fn tensor_bytes_examples() {
        assert_eq!(tensor_bytes(&[1], NumericFormat::Fp32), 4);
        assert_eq!(tensor_bytes(&[1_460_000], NumericFormat::Fp32), 5_840_000);
        assert_eq!(tensor_bytes(&[64, 128], NumericFormat::Fp16), 16_384);
    }

    #[test]
    fn index_bits() {
        assert_eq!(col_index_bits(1), 0);
        assert_eq!(col_index_bits(2), 1);
        assert_eq!(col_index_bits(144), 8);
        assert_eq!(col_index_bits(288), 9);
        assert_eq!(col_index_bits(256), 8);
        assert_eq!(col_index_bits(257), 9);
    }

    #[test]
    fn singleton_csr() {
        let w = DenseTensor::from_vec(&[1, 1, 1, 1], NumericFormat::Fp32, vec![5.0]).unwrap();
        let csr = csr_from_dense(&w, &SparsityMask::full(&[1, 1, 1, 1])).unwrap();
        assert_eq!((csr.rows, csr.cols), (1, 1));
        assert_eq!(csr.values, vec![5.0]);
        assert_eq!(csr.col_index_bits, 0);
        assert_eq!(csr_storage_bytes(&csr, false), 12);
    }

    #[test]
    fn two_row_csr() {
        let w = DenseTensor::from_vec(&[2, 1, 1, 2], NumericFormat::Fp32, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = SparsityMask::from_bits(&[2, 1, 1, 2], vec![false, true, true, false]).unwrap();
        let csr = csr_from_dense(&w, &m).unwrap();
        assert_eq!(csr.row_ptr, vec![0, 1, 2]);
        assert_eq!(csr.col_indices, vec![1, 0]);
        assert_eq!(csr.values, vec![2.0, 3.0]);
        csr.validate().unwrap();
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let w = DenseTensor::zeros(&[2, 2, 1, 1], NumericFormat::Fp32);
        let m = SparsityMask::full(&[2, 1, 1, 2]);
        assert!(matches!(csr_from_dense(&w, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn sharing_charges_values_only() {
        // 32x16x3x3 at 1383 nonzeros in FP16: 8-bit indices
        let bytes = csr_bytes(32, 144, 1383, 2, false);
        assert_eq!(bytes, 1383 + 33 * 4 + 1383 * 2);
        assert_eq!(csr_bytes(32, 144, 1383, 2, true), 2766);
    }
}
