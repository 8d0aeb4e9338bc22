//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that manipulates parameters (trees, models, optimizers, clipping,
//! the federation loop) is generic over [`Real`], implemented for `f32` and
//! `f64`. The privacy accountant works in `f64` only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar usable as a parameter/gradient element.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`; constants and config values go through here.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable in every Real")
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize is representable in every Real")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Name written into run manifests.
    fn type_name() -> &'static str;
}

impl Real for f32 {
    fn type_name() -> &'static str {
        "f32"
    }
}

impl Real for f64 {
    fn type_name() -> &'static str {
        "f64"
    }
}

/// Serde adapter for bounds that may legitimately be infinite.
///
/// JSON has no infinity literal, so `+inf` is written as the string `"inf"`.
/// Plain numbers are accepted on input, as are `"inf"`, `"+inf"` and
/// `"infinity"`.
pub mod ext_float {
    use super::Real;
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;
    use std::marker::PhantomData;

    pub fn serialize<T: Real, S: Serializer>(value: &T, s: S) -> Result<S::Ok, S::Error> {
        let v = value.to_f64_lossy();
        if v.is_infinite() {
            s.serialize_str(if v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(v)
        }
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<T: Real> Visitor<'_> for V<T> {
            type Value = T;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<T, E> {
                Ok(T::of(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<T, E> {
                Ok(T::of(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<T, E> {
                Ok(T::of(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<T, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "+inf" | "infinity" | "+infinity" => Ok(T::infinity()),
                    "-inf" | "-infinity" => Ok(T::neg_infinity()),
                    other => Err(E::custom(format!("expected a number or \"inf\", got {other:?}"))),
                }
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}
