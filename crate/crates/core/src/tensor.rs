//! Tagged, typed, strided N-D tensor descriptors over shared byte buffers.

use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{EpError, Result};
use crate::quant::{e4m3_to_f32, f32_to_e4m3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    BF16,
    F16,
    /// E4M3 codes; the per-block scale travels in a separate SCALES tensor.
    FP8,
    I32,
    I64,
}

impl Dtype {
    pub const ALL: [Dtype; 6] = [Dtype::F32, Dtype::BF16, Dtype::F16, Dtype::FP8, Dtype::I32, Dtype::I64];

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::BF16 | Dtype::F16 => 2,
            Dtype::FP8 => 1,
            Dtype::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, Dtype::I32 | Dtype::I64)
    }

    pub fn encode_f32(self, value: f32, out: &mut [u8]) {
        match self {
            Dtype::F32 => out.copy_from_slice(&value.to_le_bytes()),
            Dtype::BF16 => out.copy_from_slice(&bf16::from_f32(value).to_le_bytes()),
            Dtype::F16 => out.copy_from_slice(&f16::from_f32(value).to_le_bytes()),
            Dtype::FP8 => out[0] = f32_to_e4m3(value),
            Dtype::I32 => out.copy_from_slice(&(value as i32).to_le_bytes()),
            Dtype::I64 => out.copy_from_slice(&(value as i64).to_le_bytes()),
        }
    }

    pub fn decode_f32(self, bytes: &[u8]) -> f32 {
        match self {
            Dtype::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            Dtype::BF16 => bf16::from_le_bytes(bytes[..2].try_into().unwrap()).to_f32(),
            Dtype::F16 => f16::from_le_bytes(bytes[..2].try_into().unwrap()).to_f32(),
            Dtype::FP8 => e4m3_to_f32(bytes[0]),
            Dtype::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f32,
            Dtype::I64 => i64::from_le_bytes(bytes[..8].try_into().unwrap()) as f32,
        }
    }

    pub fn encode_i64(self, value: i64, out: &mut [u8]) {
        match self {
            Dtype::I32 => out.copy_from_slice(&(value as i32).to_le_bytes()),
            Dtype::I64 => out.copy_from_slice(&value.to_le_bytes()),
            other => other.encode_f32(value as f32, out),
        }
    }

    pub fn decode_i64(self, bytes: &[u8]) -> i64 {
        match self {
            Dtype::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as i64,
            Dtype::I64 => i64::from_le_bytes(bytes[..8].try_into().unwrap()),
            other => other.decode_f32(bytes) as i64,
        }
    }

    /// Round-trips a value through this dtype's wire encoding.
    pub fn round_f32(self, value: f32) -> f32 {
        let mut buf = [0u8; 8];
        let w = self.byte_width();
        self.encode_f32(value, &mut buf[..w]);
        self.decode_f32(&buf[..w])
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dtype::F32 => "f32",
            Dtype::BF16 => "bf16",
            Dtype::F16 => "f16",
            Dtype::FP8 => "fp8",
            Dtype::I32 => "i32",
            Dtype::I64 => "i64",
        };
        f.write_str(s)
    }
}

/// Role of a tensor passed to dispatch or combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TensorTag {
    Tokens,
    TopkIdx,
    TopkWeights,
    Scales,
    RecvExpertCounterDevice,
    RecvExpertCounterHost,
    None,
    TokensPerExperts,
}

impl TensorTag {
    pub const ALL: [TensorTag; 8] = [
        TensorTag::Tokens,
        TensorTag::TopkIdx,
        TensorTag::TopkWeights,
        TensorTag::Scales,
        TensorTag::RecvExpertCounterDevice,
        TensorTag::RecvExpertCounterHost,
        TensorTag::None,
        TensorTag::TokensPerExperts,
    ];
}

/// Byte storage shared between tensor descriptors, standing in for device memory.
#[derive(Clone, Default)]
pub struct TensorBuffer(Arc<Mutex<Vec<u8>>>);

impl TensorBuffer {
    pub fn zeroed(len: usize) -> Self {
        Self::from_vec(vec![0; len])
    }

    pub fn from_vec(bytes: Vec<u8>) -> Self {
        Self(Arc::new(Mutex::new(bytes)))
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.lock().clone()
    }

    pub fn same_storage(&self, other: &TensorBuffer) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn lock(&self) -> MutexGuard<'_, Vec<u8>> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl fmt::Debug for TensorBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorBuffer({} bytes)", self.len())
    }
}

#[derive(Clone, Debug)]
pub struct NDTensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    dtype: Dtype,
    tag: TensorTag,
    buffer: TensorBuffer,
    offset: usize,
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl NDTensor {
    /// Contiguous row-major descriptor over `buffer`.
    pub fn create(shape: &[usize], dtype: Dtype, tag: TensorTag, buffer: TensorBuffer) -> Result<Self> {
        let strides = row_major_strides(shape);
        Self::strided(shape, &strides, dtype, tag, buffer, 0)
    }

    pub fn strided(
        shape: &[usize],
        strides: &[usize],
        dtype: Dtype,
        tag: TensorTag,
        buffer: TensorBuffer,
        offset: usize,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(EpError::invalid("tensor shape must not be empty"));
        }
        if shape.len() != strides.len() {
            return Err(EpError::invalid(format!(
                "rank mismatch: shape {shape:?} vs strides {strides:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let span = if numel == 0 {
            0
        } else {
            offset + 1 + shape.iter().zip(strides).map(|(&n, &s)| (n - 1) * s).sum::<usize>()
        };
        let needed = span * dtype.byte_width();
        if needed > buffer.len() {
            return Err(EpError::invalid(format!(
                "buffer of {} bytes too small for {shape:?} {dtype} (needs {needed})",
                buffer.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), strides: strides.to_vec(), dtype, tag, buffer, offset })
    }

    pub fn zeros(shape: &[usize], dtype: Dtype, tag: TensorTag) -> Self {
        let bytes = shape.iter().product::<usize>() * dtype.byte_width();
        Self::create(shape, dtype, tag, TensorBuffer::zeroed(bytes)).expect("sized buffer")
    }

    pub fn from_f32(shape: &[usize], dtype: Dtype, tag: TensorTag, values: &[f32]) -> Result<Self> {
        let t = Self::zeros(shape, dtype, tag);
        if values.len() != t.numel() {
            return Err(EpError::shape(format!("{} values for shape {shape:?}", values.len())));
        }
        t.write_f32(values)?;
        Ok(t)
    }

    pub fn from_i64(shape: &[usize], dtype: Dtype, tag: TensorTag, values: &[i64]) -> Result<Self> {
        let t = Self::zeros(shape, dtype, tag);
        if values.len() != t.numel() {
            return Err(EpError::shape(format!("{} values for shape {shape:?}", values.len())));
        }
        let w = dtype.byte_width();
        let mut buf = t.buffer.lock();
        for (i, &v) in values.iter().enumerate() {
            dtype.encode_i64(v, &mut buf[i * w..(i + 1) * w]);
        }
        drop(buf);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn tag(&self) -> TensorTag {
        self.tag
    }

    pub fn buffer(&self) -> &TensorBuffer {
        &self.buffer
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == row_major_strides(&self.shape)
    }

    /// Same storage, different tag.
    pub fn with_tag(&self, tag: TensorTag) -> Self {
        Self { tag, ..self.clone() }
    }

    /// Number of rows when the last dimension is the row.
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    fn row_base(&self, row: usize) -> usize {
        let mut rem = row;
        let mut base = self.offset;
        for d in (0..self.shape.len() - 1).rev() {
            let idx = rem % self.shape[d];
            rem /= self.shape[d];
            base += idx * self.strides[d];
        }
        base
    }

    /// Element offset of a multi-index.
    pub fn element_offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(&i, &n)| i >= n) {
            return Err(EpError::invalid(format!("index {index:?} out of bounds for {:?}", self.shape)));
        }
        Ok(self.offset + index.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum::<usize>())
    }

    /// Raw bytes of one row (last dimension), in logical order.
    pub fn read_row_bytes(&self, row: usize) -> Vec<u8> {
        let w = self.dtype.byte_width();
        let base = self.row_base(row);
        let n = self.row_len();
        let stride = *self.strides.last().unwrap();
        let buf = self.buffer.lock();
        if stride == 1 {
            buf[base * w..(base + n) * w].to_vec()
        } else {
            let mut out = Vec::with_capacity(n * w);
            for j in 0..n {
                let o = (base + j * stride) * w;
                out.extend_from_slice(&buf[o..o + w]);
            }
            out
        }
    }

    pub fn write_row_bytes(&self, row: usize, bytes: &[u8]) {
        let w = self.dtype.byte_width();
        let base = self.row_base(row);
        let n = self.row_len();
        assert_eq!(bytes.len(), n * w, "row byte length");
        let stride = *self.strides.last().unwrap();
        let mut buf = self.buffer.lock();
        if stride == 1 {
            buf[base * w..(base + n) * w].copy_from_slice(bytes);
        } else {
            for j in 0..n {
                let o = (base + j * stride) * w;
                buf[o..o + w].copy_from_slice(&bytes[j * w..(j + 1) * w]);
            }
        }
    }

    pub fn read_row_f32(&self, row: usize) -> Vec<f32> {
        let w = self.dtype.byte_width();
        self.read_row_bytes(row).chunks_exact(w).map(|c| self.dtype.decode_f32(c)).collect()
    }

    pub fn write_row_f32(&self, row: usize, values: &[f32]) {
        let w = self.dtype.byte_width();
        let mut bytes = vec![0u8; values.len() * w];
        for (v, out) in values.iter().zip(bytes.chunks_exact_mut(w)) {
            self.dtype.encode_f32(*v, out);
        }
        self.write_row_bytes(row, &bytes);
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.rows()).flat_map(|r| self.read_row_f32(r)).collect()
    }

    pub fn to_i64_vec(&self) -> Vec<i64> {
        let w = self.dtype.byte_width();
        (0..self.rows())
            .flat_map(|r| {
                self.read_row_bytes(r).chunks_exact(w).map(|c| self.dtype.decode_i64(c)).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Logical contents as bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.rows()).flat_map(|r| self.read_row_bytes(r)).collect()
    }

    pub fn write_f32(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(EpError::shape(format!("{} values for {:?}", values.len(), self.shape)));
        }
        let n = self.row_len();
        for r in 0..self.rows() {
            self.write_row_f32(r, &values[r * n..(r + 1) * n]);
        }
        Ok(())
    }

    pub fn write_i64(&self, values: &[i64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(EpError::shape(format!("{} values for {:?}", values.len(), self.shape)));
        }
        let w = self.dtype.byte_width();
        let n = self.row_len();
        for r in 0..self.rows() {
            let mut bytes = vec![0u8; n * w];
            for (v, out) in values[r * n..(r + 1) * n].iter().zip(bytes.chunks_exact_mut(w)) {
                self.dtype.encode_i64(*v, out);
            }
            self.write_row_bytes(r, &bytes);
        }
        Ok(())
    }
}

/// Tensor creation entry point mirroring the C surface.
pub fn tensor_create(shape: &[usize], dtype: Dtype, tag: TensorTag, buffer: TensorBuffer) -> Result<NDTensor> {
    NDTensor::create(shape, dtype, tag, buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;
    use proptest::prelude::*;

    #[test]
    fn byte_widths() {
        assert_eq!(Dtype::F32.byte_width(), 4);
        assert_eq!(Dtype::BF16.byte_width(), 2);
        assert_eq!(Dtype::F16.byte_width(), 2);
        assert_eq!(Dtype::FP8.byte_width(), 1);
    }

    #[test]
    fn create_row_major() {
        let t = tensor_create(&[4, 8], Dtype::F32, TensorTag::Tokens, TensorBuffer::zeroed(128)).unwrap();
        assert_eq!(t.strides(), &[8, 1]);
        assert_eq!(t.tag(), TensorTag::Tokens);
        assert!(t.is_contiguous());
    }

    #[test]
    fn fp8_token_block_size() {
        let need = 128 * 7168 * Dtype::FP8.byte_width();
        assert_eq!(need, 917_504);
        let ok = tensor_create(&[128, 7168], Dtype::FP8, TensorTag::Tokens, TensorBuffer::zeroed(need));
        assert!(ok.is_ok());
        let short = tensor_create(&[128, 7168], Dtype::FP8, TensorTag::Tokens, TensorBuffer::zeroed(need - 1));
        assert_eq!(short.unwrap_err().code, ErrorCode::InvalidArgument);
    }

    #[test]
    fn too_small_or_empty_shape() {
        let e = tensor_create(&[2, 2], Dtype::F32, TensorTag::Tokens, TensorBuffer::zeroed(8)).unwrap_err();
        assert_eq!(e.code, ErrorCode::InvalidArgument);
        let e = tensor_create(&[], Dtype::F32, TensorTag::Tokens, TensorBuffer::zeroed(8)).unwrap_err();
        assert_eq!(e.code, ErrorCode::InvalidArgument);
    }

    #[test]
    fn strided_rows_read_transposed_view() {
        // 3x2 row-major storage viewed as its 2x3 transpose
        let base = NDTensor::from_f32(&[3, 2], Dtype::F32, TensorTag::None, &[0., 1., 2., 3., 4., 5.]).unwrap();
        let view = NDTensor::strided(&[2, 3], &[1, 2], Dtype::F32, TensorTag::None, base.buffer().clone(), 0).unwrap();
        assert_eq!(view.read_row_f32(0), vec![0., 2., 4.]);
        assert_eq!(view.read_row_f32(1), vec![1., 3., 5.]);
        view.write_row_f32(1, &[7., 8., 9.]);
        assert_eq!(base.to_f32_vec(), vec![0., 7., 2., 8., 4., 9.]);
        assert!(NDTensor::strided(&[2, 3], &[1, 2], Dtype::F32, TensorTag::None, base.buffer().clone(), 1).is_err());
    }

    #[test]
    fn tags_are_closed_and_serialize() {
        assert_eq!(TensorTag::ALL.len(), 8);
        for tag in TensorTag::ALL {
            let s = serde_json::to_string(&tag).unwrap();
            assert_eq!(serde_json::from_str::<TensorTag>(&s).unwrap(), tag);
        }
        assert_eq!(serde_json::to_string(&TensorTag::TokensPerExperts).unwrap(), "\"TOKENS_PER_EXPERTS\"");
        for d in Dtype::ALL {
            let s = serde_json::to_string(&d).unwrap();
            assert_eq!(serde_json::from_str::<Dtype>(&s).unwrap(), d);
        }
    }

    proptest! {
        #[test]
        fn every_index_maps_inside_buffer(shape in proptest::collection::vec(1usize..5, 1..4), dt in 0usize..4) {
            let dtype = Dtype::ALL[dt];
            let t = NDTensor::zeros(&shape, dtype, TensorTag::Tokens);
            let elems = t.buffer().len() / dtype.byte_width();
            let total: usize = shape.iter().product();
            for flat in 0..total {
                let mut rem = flat;
                let mut idx = vec![0usize; shape.len()];
                for d in (0..shape.len()).rev() {
                    idx[d] = rem % shape[d];
                    rem /= shape[d];
                }
                let off = t.element_offset(&idx).unwrap();
                prop_assert!(off < elems);
            }
        }

        #[test]
        fn f32_values_roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let t = NDTensor::from_f32(&[values.len()], Dtype::F32, TensorTag::Tokens, &values).unwrap();
            prop_assert_eq!(t.to_f32_vec(), values);
        }
    }
}
