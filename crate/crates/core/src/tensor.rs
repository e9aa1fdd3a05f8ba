use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor with single-precision storage.
///
/// Arithmetic elsewhere in the crate accumulates in `f64`; tensors are the
/// storage and interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Builds a tensor from double-precision values, rounding to storage precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value at a (height, width, channel) coordinate of a rank-3 tensor.
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }
}

/// Appends one tensor entry: little-endian `u32` rank, `u64` dimensions, `f32` data.
pub(crate) fn encode_tensor(out: &mut Vec<u8>, tensor: &Tensor) {
    out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes a concatenation of tensor entries. Errors carry the byte offset
/// at which decoding failed.
pub(crate) fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cursor = 0usize;
    let mut tensors = Vec::new();
    while cursor < bytes.len() {
        let entry_start = cursor;
        let rank = u32::from_le_bytes(take::<4>(bytes, &mut cursor)?) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format {
                offset: entry_start as u64,
                message: format!("implausible tensor rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let dim_at = cursor;
            let d = u64::from_le_bytes(take::<8>(bytes, &mut cursor)?);
            if d == 0 || d > (1 << 32) {
                return Err(Error::Format {
                    offset: dim_at as u64,
                    message: format!("implausible dimension {d}"),
                });
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let needed = n.checked_mul(4).filter(|&b| cursor + b <= bytes.len());
        let Some(nbytes) = needed else {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "tensor starting at byte {entry_start} needs {n} floats but the data is truncated"
                ),
            });
        };
        let data: Vec<f32> = bytes[cursor..cursor + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cursor += nbytes;
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: entry_start as u64,
            message: e.to_string(),
        })?;
        tensors.push(tensor);
    }
    Ok(tensors)
}

fn take<const N: usize>(bytes: &[u8], cursor: &mut usize) -> Result<[u8; N]> {
    let end = *cursor + N;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("unexpected end of data reading {N} bytes at {}", *cursor),
        });
    }
    let mut buf = [0u8; N];
    buf.copy_from_slice(&bytes[*cursor..end]);
    *cursor = end;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn truncated_entry_reports_offset() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = Vec::new();
        encode_tensor(&mut bytes, &t);
        encode_tensor(&mut bytes, &t);
        let cut = &bytes[..bytes.len() - 3];
        match decode_tensors(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![t.clone(), t]);
    }
}
