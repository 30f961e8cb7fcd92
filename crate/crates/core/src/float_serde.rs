//! Serde helpers for floats that may be infinite.
//!
//! JSON has no infinities, and serde_json silently writes them as `null`.
//! Fields using these helpers write `"inf"`, `"-inf"` or `"nan"` instead and
//! accept both numbers and those strings on input.

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Number(f64),
    Text(String),
}

fn parse(repr: Repr) -> Result<f64, String> {
    match repr {
        Repr::Number(x) => Ok(x),
        Repr::Text(s) => match s.as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(format!("expected a number, \"inf\", \"-inf\" or \"nan\", got {other:?}")),
        },
    }
}

pub fn serialize<S: Serializer>(x: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        serializer.serialize_f64(*x)
    } else if x.is_nan() {
        serializer.serialize_str("nan")
    } else if *x > 0.0 {
        serializer.serialize_str("inf")
    } else {
        serializer.serialize_str("-inf")
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    parse(Repr::deserialize(deserializer)?).map_err(de::Error::custom)
}

/// The same encoding for a pair of floats.
pub mod pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    pub fn serialize<S: Serializer>(x: &(f64, f64), serializer: S) -> Result<S::Ok, S::Error> {
        (Wrapped(x.0), Wrapped(x.1)).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<(f64, f64), D::Error> {
        let (a, b) = <(Wrapped, Wrapped)>::deserialize(deserializer)?;
        Ok((a.0, b.0))
    }
}
