//! Fixed-precision JSON float encoding.
//!
//! All persisted artifacts (meshes, datasets, trajectories, checkpoints)
//! write `f64` values as decimal literals with 17 significant digits, which
//! uniquely identify every finite double, so serialize → parse → serialize
//! is stable both in value (bit-exact) and in text.
//!
//! The helpers are meant for `#[serde(with = "...")]` on `f64`, `Vec<f64>`
//! and `Vec<Vec<f64>>` fields.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Formats a finite double with 17 significant digits as a JSON number
/// literal (e.g. `1.0000000000000000e0`).
pub fn literal(v: f64) -> String {
    let mut s = String::with_capacity(24);
    // {:.16e} prints one digit before the point and 16 after: 17 total.
    write!(s, "{v:.16e}").expect("formatting f64 cannot fail");
    s
}

fn number(v: f64) -> Result<serde_json::Number, String> {
    if !v.is_finite() {
        return Err(format!("cannot serialize non-finite value {v}"));
    }
    serde_json::Number::from_str(&literal(v)).map_err(|e| e.to_string())
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        number(*v).map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let nums: Result<Vec<_>, _> = v.iter().map(|x| number(*x)).collect();
        nums.map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

pub mod vec2 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Result<Vec<Vec<_>>, _> = v
            .iter()
            .map(|row| row.iter().map(|x| number(*x)).collect())
            .collect();
        rows.map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<f64>>::deserialize(d)
    }
}

pub mod arr2 {
    use super::*;
    use ndarray::Array2;

    pub fn serialize<S: Serializer>(v: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Result<Vec<Vec<_>>, _> = v
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|x| number(*x)).collect())
            .collect();
        rows.map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
            .map_err(D::Error::custom)
    }
}
