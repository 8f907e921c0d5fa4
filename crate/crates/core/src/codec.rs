//! JSON parameter documents.
//!
//! Every tensor is stored as its shape plus the base64 of its little-endian
//! IEEE-754 bytes, and every scalar as the hex of its bit pattern next to a
//! human-readable copy, so a round trip reproduces each double bit for bit.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const FORMAT: &str = "doran-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub rows: usize,
    pub cols: usize,
    pub f64_le_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedScalar {
    /// Display copy; decoding reads `bits`.
    pub value: f64,
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDoc {
    pub format: String,
    pub structure: String,
    pub tensors: BTreeMap<String, EncodedTensor>,
    pub scalars: BTreeMap<String, EncodedScalar>,
    #[serde(default)]
    pub topology: BTreeMap<String, serde_json::Value>,
}

pub fn encode_matrix(m: &Matrix) -> EncodedTensor {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    EncodedTensor {
        rows: m.rows(),
        cols: m.cols(),
        f64_le_base64: STANDARD.encode(bytes),
    }
}

pub fn decode_matrix(t: &EncodedTensor) -> Result<Matrix> {
    let bytes = STANDARD
        .decode(&t.f64_le_base64)
        .map_err(|e| Error::Serialization(format!("bad base64 tensor: {e}")))?;
    if bytes.len() != t.rows * t.cols * 8 {
        return Err(Error::Serialization(format!(
            "tensor {}x{} carries {} bytes",
            t.rows,
            t.cols,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::from_vec(t.rows, t.cols, data)
}

pub fn encode_scalar(v: f64) -> EncodedScalar {
    EncodedScalar {
        value: if v.is_finite() { v } else { 0.0 },
        bits: format!("{:016x}", v.to_bits()),
    }
}

pub fn decode_scalar(s: &EncodedScalar) -> Result<f64> {
    u64::from_str_radix(&s.bits, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Serialization(format!("bad scalar bits {:?}: {e}", s.bits)))
}

impl ParamDoc {
    pub fn new(structure: impl Into<String>) -> Self {
        Self {
            format: FORMAT.into(),
            structure: structure.into(),
            tensors: BTreeMap::new(),
            scalars: BTreeMap::new(),
            topology: BTreeMap::new(),
        }
    }

    pub fn expect_structure(&self, structure: &str) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Serialization(format!(
                "unsupported format {:?}",
                self.format
            )));
        }
        if self.structure != structure {
            return Err(Error::Serialization(format!(
                "expected structure {structure:?}, found {:?}",
                self.structure
            )));
        }
        Ok(())
    }

    pub fn put_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.insert(name.into(), encode_matrix(m));
    }

    pub fn put_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.put_matrix(name, &Matrix::column_vector(v));
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.scalars.insert(name.into(), encode_scalar(v));
    }

    pub fn put_topology(&mut self, name: impl Into<String>, v: impl Into<serde_json::Value>) {
        self.topology.insert(name.into(), v.into());
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Serialization(format!("missing tensor {name:?}")))
            .and_then(decode_matrix)
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.matrix(name)?;
        if m.cols() != 1 {
            return Err(Error::Serialization(format!("tensor {name:?} is not a vector")));
        }
        Ok(m.into_vec())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .ok_or_else(|| Error::Serialization(format!("missing scalar {name:?}")))
            .and_then(decode_scalar)
    }

    pub fn topology_str(&self, name: &str) -> Result<&str> {
        self.topology
            .get(name)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Serialization(format!("missing topology string {name:?}")))
    }

    pub fn topology_usize(&self, name: &str) -> Result<usize> {
        self.topology
            .get(name)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Serialization(format!("missing topology count {name:?}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;

    #[test]
    fn tensor_and_scalar_roundtrip_bit_exact() {
        let mut rng = SeededRng::new(1);
        let mut m = rng.gaussian_matrix(3, 4, 1.0);
        m.set(0, 0, -0.0);
        m.set(1, 1, f64::MIN_POSITIVE / 3.0);
        let mut doc = ParamDoc::new("test");
        doc.put_matrix("m", &m);
        doc.put_scalar("s", 0.1 + 0.2);
        let back = ParamDoc::from_json(&doc.to_json().unwrap()).unwrap();
        let m2 = back.matrix("m").unwrap();
        for (a, b) in m.as_slice().iter().zip(m2.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.scalar("s").unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn corrupted_tensor_rejected() {
        let mut t = encode_matrix(&Matrix::identity(2));
        t.rows = 3;
        assert!(matches!(decode_matrix(&t), Err(Error::Serialization(_))));
        let doc = ParamDoc::new("a");
        assert!(doc.expect_structure("b").is_err());
    }
}
