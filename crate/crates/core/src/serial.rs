//! Serde adapters that write reals as 17-significant-digit decimal strings
//! and complex numbers as `["re", "im"]` pairs, so values round-trip exactly.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

use crate::linalg::{CVec, C64};

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_real<E: serde::de::Error>(s: &str) -> Result<f64, E> {
    let x: f64 = s.trim().parse().map_err(|_| E::custom(format!("`{s}` is not a real number")))?;
    if !x.is_finite() {
        return Err(E::custom(format!("non-finite value `{s}`")));
    }
    Ok(x)
}

pub mod real {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_real(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        parse_real(&String::deserialize(d)?)
    }
}

pub mod reals {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&fmt_real(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|s| parse_real(s)).collect()
    }
}

pub mod complexes {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[C64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for z in v {
            seq.serialize_element(&[fmt_real(z.re), fmt_real(z.im)])?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CVec, D::Error> {
        Vec::<[String; 2]>::deserialize(d)?
            .iter()
            .map(|[re, im]| Ok(C64::new(parse_real(re)?, parse_real(im)?)))
            .collect::<Result<_, D::Error>>()
            .map_err(|e: D::Error| D::Error::custom(format!("complex entry: {e}")))
    }
}
