use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Scalar precision of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Size of one scalar in bytes.
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Numeric code used by the checkpoint format.
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" | "float32" => Some(DType::F32),
            "f64" | "float64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Row-major scalar buffer tagged with its precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; len]),
            DType::F64 => Storage::F64(vec![0.0; len]),
        }
    }

    pub fn from_f64(values: &[f64], dtype: DType) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    /// Elementwise `self += other`. Both buffers must share dtype and length.
    pub fn add_assign(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (Storage::F64(a), Storage::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            _ => panic!("storage dtype mismatch in accumulation"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Little-endian raw bytes of the buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(bytes: &[u8], dtype: DType) -> Option<Storage> {
        if !bytes.len().is_multiple_of(dtype.size_of()) {
            return None;
        }
        Some(match dtype {
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        })
    }
}

/// Scalar types a [`Storage`] can hold. Kernels are written once against this
/// trait and monomorphized per precision.
pub trait Element:
    Float + FromPrimitive + Sum + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn slice(storage: &Storage) -> &[Self];
    fn slice_mut(storage: &mut Storage) -> &mut [Self];
    fn wrap(values: Vec<Self>) -> Storage;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn slice(storage: &Storage) -> &[f32] {
        match storage {
            Storage::F32(v) => v,
            Storage::F64(_) => panic!("expected f32 storage"),
        }
    }

    fn slice_mut(storage: &mut Storage) -> &mut [f32] {
        match storage {
            Storage::F32(v) => v,
            Storage::F64(_) => panic!("expected f32 storage"),
        }
    }

    fn wrap(values: Vec<f32>) -> Storage {
        Storage::F32(values)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn slice(storage: &Storage) -> &[f64] {
        match storage {
            Storage::F64(v) => v,
            Storage::F32(_) => panic!("expected f64 storage"),
        }
    }

    fn slice_mut(storage: &mut Storage) -> &mut [f64] {
        match storage {
            Storage::F64(v) => v,
            Storage::F32(_) => panic!("expected f64 storage"),
        }
    }

    fn wrap(values: Vec<f64>) -> Storage {
        Storage::F64(values)
    }
}

/// Runs `$body` with `$T` bound to the scalar type matching `$dtype`.
#[macro_export]
macro_rules! with_dtype {
    ($dtype:expr, $T:ident, $body:block) => {
        match $dtype {
            $crate::DType::F32 => {
                #[allow(unused_imports)]
                use $crate::__scalar_traits::*;
                #[allow(dead_code)]
                type $T = f32;
                $body
            }
            $crate::DType::F64 => {
                #[allow(unused_imports)]
                use $crate::__scalar_traits::*;
                #[allow(dead_code)]
                type $T = f64;
                $body
            }
        }
    };
}
