//! Fixed-width element types carried by reductions.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I64,
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::I64 | DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// A reducible element with a little-endian wire encoding.
pub trait Element: Copy + Send + Sync + PartialEq + Debug + 'static {
    const DTYPE: DType;

    fn zero() -> Self;

    /// Sum used by reductions. Integers wrap so reductions never panic.
    fn add(self, other: Self) -> Self;

    fn encode(values: &[Self]) -> Vec<u8>;

    fn decode(bytes: &[u8]) -> Result<Vec<Self>>;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $zero:expr, $add:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn zero() -> Self {
                $zero
            }

            fn add(self, other: Self) -> Self {
                $add(self, other)
            }

            fn encode(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn decode(bytes: &[u8]) -> Result<Vec<Self>> {
                const W: usize = std::mem::size_of::<$t>();
                if bytes.len() % W != 0 {
                    return Err(Error::TypeMismatch(format!(
                        "{} bytes is not a whole number of {:?} elements",
                        bytes.len(),
                        $dtype
                    )));
                }
                Ok(bytes
                    .chunks_exact(W)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    };
}

impl_element!(i64, DType::I64, 0, i64::wrapping_add);
impl_element!(f32, DType::F32, 0.0, |a: f32, b: f32| a + b);
impl_element!(f64, DType::F64, 0.0, |a: f64, b: f64| a + b);
