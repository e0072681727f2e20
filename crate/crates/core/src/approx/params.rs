use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

/// Named tensors stored back to back in one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub tensors: Vec<TensorMeta>,
    pub values: Vec<f64>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet { tensors: Vec::new(), values: Vec::new() }
    }

    /// Append a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let meta = TensorMeta { name: name.into(), shape, offset: self.values.len() };
        assert_eq!(meta.numel(), values.len(), "tensor {} size mismatch", meta.name);
        self.values.extend(values);
        self.tensors.push(meta);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let t = &self.tensors[self.index_of(name)?];
        Some(&self.values[t.offset..t.offset + t.numel()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let idx = self.index_of(name)?;
        let (off, n) = (self.tensors[idx].offset, self.tensors[idx].numel());
        Some(&mut self.values[off..off + n])
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        alloc::vec![0.0; self.values.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same names, shapes and offsets.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors == other.tensors && self.values.len() == other.values.len()
    }

    /// Stable 64-bit FNV-1a hash of the raw parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for t in &self.tensors {
            contract!(t.offset == expected, "tensor {} at offset {} (expected {})", t.name, t.offset, expected);
            expected += t.numel();
        }
        contract!(expected == self.values.len(), "tensor sizes sum to {expected}, values hold {}", self.values.len());
        contract!(self.all_finite(), "non-finite parameter value");
        Ok(())
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn soft_update(target: &mut ParameterSet, online: &ParameterSet, tau: f64) -> Result<()> {
    contract!(tau > 0.0 && tau <= 1.0, "tau must be in (0, 1], got {tau}");
    contract!(target.same_layout(online), "soft_update layout mismatch");
    if tau == 1.0 {
        target.values.copy_from_slice(&online.values);
        return Ok(());
    }
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}
