//! Serde helpers: nested-array conversions for dense tables and a float codec
//! that survives JSON for `+inf`.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

pub fn vec2<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn vec3<T: Clone>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter().map(|m| vec2(&m.to_owned())).collect()
}

pub fn vec4<T: Clone>(a: &Array4<T>) -> Vec<Vec<Vec<Vec<T>>>> {
    a.outer_iter().map(|m| vec3(&m.to_owned())).collect()
}

pub fn arr1<T: Clone>(v: &[T]) -> Array1<T> {
    Array1::from(v.to_vec())
}

pub fn arr2<T: Clone>(v: &[Vec<T>], what: &str) -> Result<Array2<T>> {
    let rows = v.len();
    let cols = v.first().map_or(0, |r| r.len());
    if v.iter().any(|r| r.len() != cols) {
        return invalid(format!("{what}: ragged 2-d array"));
    }
    let flat: Vec<T> = v.iter().flatten().cloned().collect();
    Array2::from_shape_vec((rows, cols), flat).map_err(|e| crate::Error::InvalidInput(format!("{what}: {e}")))
}

pub fn arr3<T: Clone>(v: &[Vec<Vec<T>>], what: &str) -> Result<Array3<T>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |m| m.len());
    let d2 = v.first().and_then(|m| m.first()).map_or(0, |r| r.len());
    if v.iter().any(|m| m.len() != d1 || m.iter().any(|r| r.len() != d2)) {
        return invalid(format!("{what}: ragged 3-d array"));
    }
    let flat: Vec<T> = v.iter().flatten().flatten().cloned().collect();
    Array3::from_shape_vec((d0, d1, d2), flat).map_err(|e| crate::Error::InvalidInput(format!("{what}: {e}")))
}

pub fn arr4<T: Clone>(v: &[Vec<Vec<Vec<T>>>], what: &str) -> Result<Array4<T>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |m| m.len());
    let d2 = v.first().and_then(|m| m.first()).map_or(0, |r| r.len());
    let d3 = v
        .first()
        .and_then(|m| m.first())
        .and_then(|r| r.first())
        .map_or(0, |x| x.len());
    let ragged = v
        .iter()
        .any(|m| m.len() != d1 || m.iter().any(|r| r.len() != d2 || r.iter().any(|x| x.len() != d3)));
    if ragged {
        return invalid(format!("{what}: ragged 4-d array"));
    }
    let flat: Vec<T> = v.iter().flatten().flatten().flatten().cloned().collect();
    Array4::from_shape_vec((d0, d1, d2, d3), flat).map_err(|e| crate::Error::InvalidInput(format!("{what}: {e}")))
}

/// `f64` that may be `+inf`; encoded as the string `"inf"` in JSON.
pub mod extended_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_infinite() && *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s}"))),
        }
    }
}

/// Render a float for CSV/console, with `inf` for infinity.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}
