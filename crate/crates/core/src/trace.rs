// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer, per-head post-softmax attention recorded from one prefill pass.
//!
//! Matrices are stored flat in `(layer, head, row, col)` order, which is
//! also the on-disk order of the CLVA-TRACE payload. Values are held at
//! 64-bit precision in memory and quantized to 32-bit on write.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenLayout;

/// Row-sum tolerance applied when validating a trace.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Current trace schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Descriptive metadata carried alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_id: String,
    #[serde(default)]
    pub notes: String,
    /// Free-form key/value annotations (prompt hash, grouping factor, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl TraceMeta {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), ..Default::default() }
    }

    pub fn with_note(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }
}

/// What a validation offender did wrong.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViolationKind {
    /// Causally visible part of the row does not sum to 1.
    RowSum { sum: f64 },
    /// Entry outside `[0, 1]` or not finite.
    OutOfRange { col: usize, value: f64 },
    /// Non-zero weight above the diagonal.
    NonCausal { col: usize, value: f64 },
}

/// A single offending attention row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(layer {}, head {}, row {}): ", self.layer, self.head, self.row)?;
        match self.kind {
            ViolationKind::RowSum { sum } => write!(f, "row sums to {sum}"),
            ViolationKind::OutOfRange { col, value } => write!(f, "column {col} has weight {value} outside [0, 1]"),
            ViolationKind::NonCausal { col, value } => write!(f, "masked column {col} has weight {value}"),
        }
    }
}

/// Attention recorded from a single forward pass over a prompt.
///
/// Immutable once built; every constructor validates shapes and the
/// stochasticity invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    head_dim: usize,
    layout: TokenLayout,
    attn: Vec<f64>,
    values: Option<Vec<f64>>,
    meta: TraceMeta,
}

impl AttentionTrace {
    /// Builds and validates a trace.
    ///
    /// `attn` holds `layers * heads * seq_len * seq_len` weights and
    /// `values`, when present, `layers * heads * seq_len * head_dim` entries.
    pub fn new(
        layers: usize,
        heads: usize,
        head_dim: usize,
        layout: TokenLayout,
        attn: Vec<f64>,
        values: Option<Vec<f64>>,
        meta: TraceMeta,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 {
            return Err(Error::Shape(format!("layers ({layers}) and heads ({heads}) must be positive")));
        }
        let s = layout.seq_len();
        let expect = layers * heads * s * s;
        if attn.len() != expect {
            return Err(Error::Shape(format!("attention payload has {} entries, expected {expect}", attn.len())));
        }
        if let Some(v) = &values {
            let expect = layers * heads * s * head_dim;
            if head_dim == 0 || v.len() != expect {
                return Err(Error::Shape(format!(
                    "value payload has {} entries, expected {expect} (head_dim {head_dim})",
                    v.len()
                )));
            }
        }
        let trace = Self { layers, heads, head_dim, layout, attn, values, meta };
        let bad = trace.violations();
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        Ok(trace)
    }

    /// Same shape and metadata, new attention payload.
    pub fn with_attention(&self, attn: Vec<f64>) -> Result<Self> {
        Self::new(self.layers, self.heads, self.head_dim, self.layout, attn, self.values.clone(), self.meta.clone())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn seq_len(&self) -> usize {
        self.layout.seq_len()
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn has_values(&self) -> bool {
        self.values.is_some()
    }

    /// Flat attention payload.
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }

    /// Flat value payload, if recorded.
    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    /// Row-major `seq_len x seq_len` matrix of one head.
    ///
    /// # Panics
    /// If `layer` or `head` is out of range.
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        assert!(layer < self.layers && head < self.heads, "({layer}, {head}) out of range");
        let s2 = self.seq_len() * self.seq_len();
        let off = (layer * self.heads + head) * s2;
        &self.attn[off..off + s2]
    }

    /// One attention row of one head.
    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f64] {
        let s = self.seq_len();
        &self.head(layer, head)[row * s..(row + 1) * s]
    }

    /// Row-major `seq_len x head_dim` value matrix of one head.
    pub fn head_values(&self, layer: usize, head: usize) -> Option<&[f64]> {
        let v = self.values.as_ref()?;
        let n = self.seq_len() * self.head_dim;
        let off = (layer * self.heads + head) * n;
        Some(&v[off..off + n])
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::LayerOutOfRange { layer, layers: self.layers });
        }
        Ok(())
    }

    /// Every row that breaks the causal stochastic-matrix invariants.
    pub fn violations(&self) -> Vec<Violation> {
        let s = self.seq_len();
        let mut out = Vec::new();
        for layer in 0..self.layers {
            for head in 0..self.heads {
                let m = self.head(layer, head);
                for (row, r) in m.chunks_exact(s).enumerate() {
                    let mut push = |kind| out.push(Violation { layer, head, row, kind });
                    let mut sum = 0.0;
                    for (col, &value) in r.iter().enumerate() {
                        if col > row {
                            if value != 0.0 {
                                push(ViolationKind::NonCausal { col, value });
                            }
                        } else if !(0.0..=1.0).contains(&value) {
                            push(ViolationKind::OutOfRange { col, value });
                        } else {
                            sum += value;
                        }
                    }
                    if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                        push(ViolationKind::RowSum { sum });
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_causal(layers: usize, heads: usize, layout: TokenLayout) -> Vec<f64> {
        let s = layout.seq_len();
        let mut v = Vec::with_capacity(layers * heads * s * s);
        for _ in 0..layers * heads {
            for i in 0..s {
                for j in 0..s {
                    v.push(if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
                }
            }
        }
        v
    }

    #[test]
    fn accepts_uniform_causal() {
        let layout = TokenLayout::build(1, 2, 1).unwrap();
        let t = AttentionTrace::new(2, 3, 4, layout, uniform_causal(2, 3, layout), None, TraceMeta::new("t")).unwrap();
        assert_eq!(t.row(1, 2, 3), &[0.25; 4]);
        assert_eq!(t.head(0, 0).len(), 16);
    }

    #[test]
    fn flags_offending_rows_only() {
        let layout = TokenLayout::build(1, 2, 1).unwrap();
        let mut a = uniform_causal(1, 2, layout);
        // head 1, row 3: scale to 0.9 total
        for j in 0..4 {
            a[16 + 12 + j] *= 0.9;
        }
        // head 0, row 1 within tolerance
        a[4] += 5e-5;
        let err = AttentionTrace::new(1, 2, 4, layout, a, None, TraceMeta::default()).unwrap_err();
        let Error::Validation(v) = err else { panic!("expected validation error") };
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].layer, v[0].head, v[0].row), (0, 1, 3));
        assert!(matches!(v[0].kind, ViolationKind::RowSum { sum } if (sum - 0.9).abs() < 1e-12));
    }

    #[test]
    fn flags_mass_above_diagonal() {
        let layout = TokenLayout::build(0, 1, 1).unwrap();
        let a = vec![0.5, 0.5, 0.5, 0.5];
        let Error::Validation(v) = AttentionTrace::new(1, 1, 1, layout, a, None, TraceMeta::default()).unwrap_err()
        else {
            panic!()
        };
        assert!(v.iter().any(|x| matches!(x.kind, ViolationKind::NonCausal { col: 1, .. })));
    }

    #[test]
    fn rejects_bad_shapes() {
        let layout = TokenLayout::build(0, 1, 1).unwrap();
        assert!(matches!(
            AttentionTrace::new(1, 1, 1, layout, vec![1.0, 0.0, 0.5], None, TraceMeta::default()),
            Err(Error::Shape(_))
        ));
        let a = uniform_causal(1, 1, layout);
        assert!(matches!(
            AttentionTrace::new(1, 1, 2, layout, a, Some(vec![0.0; 3]), TraceMeta::default()),
            Err(Error::Shape(_))
        ));
    }
}
