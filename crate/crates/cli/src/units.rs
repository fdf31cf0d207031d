//! Numbers with unit suffixes: `"32 GB"`, `"12.5 GB/s"`, `"100 Gbps"`, `"30 us"`.

use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

/// A physical dimension and its accepted suffixes (case-sensitive).
pub trait Dimension {
    const NAME: &'static str;
    /// Value of a bare number.
    const BASE: &'static str;
    /// `(multiplier, divisor)`; dividing keeps sub-unit suffixes exact.
    fn scale(unit: &str) -> Option<(f64, f64)>;
}

macro_rules! dimension {
    ($ty:ident, $name:literal, $base:literal, { $($unit:literal => $mul:expr, $div:expr);* $(;)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $ty;
        impl Dimension for $ty {
            const NAME: &'static str = $name;
            const BASE: &'static str = $base;
            fn scale(unit: &str) -> Option<(f64, f64)> {
                match unit {
                    $($unit => Some(($mul, $div)),)*
                    _ => None,
                }
            }
        }
    };
}

const KI: f64 = 1024.0;

dimension!(Bytes, "size", "B", {
    "B" => 1.0, 1.0; "KB" => 1e3, 1.0; "MB" => 1e6, 1.0; "GB" => 1e9, 1.0; "TB" => 1e12, 1.0;
    "KiB" => KI, 1.0; "MiB" => KI * KI, 1.0; "GiB" => KI * KI * KI, 1.0; "TiB" => KI * KI * KI * KI, 1.0;
});
dimension!(Rate, "bandwidth", "B/s", {
    "B/s" => 1.0, 1.0; "KB/s" => 1e3, 1.0; "MB/s" => 1e6, 1.0; "GB/s" => 1e9, 1.0; "TB/s" => 1e12, 1.0;
    "KiB/s" => KI, 1.0; "MiB/s" => KI * KI, 1.0; "GiB/s" => KI * KI * KI, 1.0;
    "bps" => 1.0, 8.0; "Kbps" => 1e3, 8.0; "Mbps" => 1e6, 8.0; "Gbps" => 1e9, 8.0; "Tbps" => 1e12, 8.0;
});
dimension!(Time, "time", "s", {
    "s" => 1.0, 1.0; "ms" => 1.0, 1e3; "us" => 1.0, 1e6; "µs" => 1.0, 1e6; "ns" => 1.0, 1e9;
});
dimension!(Flops, "compute rate", "FLOPS", {
    "FLOPS" => 1.0, 1.0; "GFLOPS" => 1e9, 1.0; "TFLOPS" => 1e12, 1.0; "PFLOPS" => 1e15, 1.0;
});
dimension!(Count, "FLOP count", "FLOP", {
    "FLOP" => 1.0, 1.0; "GFLOP" => 1e9, 1.0; "TFLOP" => 1e12, 1.0; "PFLOP" => 1e15, 1.0;
});

/// Parses `"<number>[ ]<unit>"`; a bare number is in base units.
pub fn parse_quantity<D: Dimension>(text: &str) -> Result<f64, String> {
    let text = text.trim();
    let split = text
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E' | '_')))
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let value: f64 = num
        .replace('_', "")
        .parse()
        .map_err(|_| format!("invalid number in {text:?}"))?;
    let unit = unit.trim();
    let (mul, div) = if unit.is_empty() {
        (1.0, 1.0)
    } else {
        D::scale(unit).ok_or_else(|| format!("{unit:?} is not a {} unit (e.g. {})", D::NAME, D::BASE))?
    };
    let v = value * mul / div;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{text:?} must be a finite non-negative {}", D::NAME));
    }
    Ok(v)
}

/// A non-negative quantity stored in base units.
pub struct Qty<D> {
    pub value: f64,
    _dim: PhantomData<D>,
}

impl<D> Qty<D> {
    pub fn new(value: f64) -> Self {
        Qty { value, _dim: PhantomData }
    }
}

impl<D> Clone for Qty<D> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<D> Copy for Qty<D> {}
impl<D> PartialEq for Qty<D> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}
impl<D> fmt::Debug for Qty<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.value)
    }
}

impl<D> Serialize for Qty<D> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value)
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Qty<D> {
    fn deserialize<De: Deserializer<'de>>(d: De) -> Result<Self, De::Error> {
        struct V<D>(PhantomData<D>);
        impl<D: Dimension> Visitor<'_> for V<D> {
            type Value = Qty<D>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a {} as a number or a string with a unit", D::NAME)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                if v < 0 {
                    return Err(E::custom(format!("{} must be non-negative", D::NAME)));
                }
                Ok(Qty::new(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(Qty::new(v as f64))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                if !v.is_finite() || v < 0.0 {
                    return Err(E::custom(format!("{} must be finite and non-negative", D::NAME)));
                }
                Ok(Qty::new(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                parse_quantity::<D>(v).map(Qty::new).map_err(E::custom)
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

/// A byte count that must be a whole number after unit scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ByteCount(pub u64);

impl<'de> Deserialize<'de> for ByteCount {
    fn deserialize<De: Deserializer<'de>>(d: De) -> Result<Self, De::Error> {
        let q = Qty::<Bytes>::deserialize(d)?;
        if q.value.fract() != 0.0 || q.value > u64::MAX as f64 {
            return Err(de::Error::custom(format!("{} is not a whole number of bytes", q.value)));
        }
        Ok(ByteCount(q.value as u64))
    }
}
