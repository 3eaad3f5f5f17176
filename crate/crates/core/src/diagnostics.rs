// SPDX-License-Identifier: MIT OR Apache-2.0

//! Drift diagnostics: attention entropy, Pearson correlation against the
//! anchor maps, and the linguistic/visual split of an attention output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anchors::{extract_saliency, AnchorSet};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::stats::{mean, sig9};
use crate::trace::AttentionTrace;

/// Shannon entropy (nats) of a map renormalized to a probability vector.
///
/// Saliency maps are sub-distributions over the visual span; dividing by
/// their total mass keeps layers with different visual mass comparable.
pub fn attention_entropy(map: &[f64]) -> Result<f64> {
    let total: f64 = map.iter().sum();
    if map.is_empty() || !(total > 0.0) {
        return Err(Error::NoDistribution);
    }
    Ok(-map
        .iter()
        .map(|&m| m / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Pearson correlation with population moments.
///
/// A constant input has no correlation and is reported as
/// [`Error::ZeroVariance`] rather than as zero.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::TooFewTokens(a.len()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 {
        return Err(Error::ZeroVariance("first"));
    }
    if vb == 0.0 {
        return Err(Error::ZeroVariance("second"));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// `O_i = O_P + O_V` for one query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDecomposition {
    pub row: usize,
    /// Contribution of system and text tokens.
    pub linguistic: Vec<f64>,
    /// Contribution of visual tokens.
    pub visual: Vec<f64>,
    pub linguistic_norm: f64,
    pub visual_norm: f64,
}

impl OutputDecomposition {
    /// `linguistic + visual`, the full attention output row.
    pub fn total(&self) -> Vec<f64> {
        self.linguistic.iter().zip(&self.visual).map(|(p, v)| p + v).collect()
    }
}

/// Splits `attn_row · V` into linguistic and visual parts.
///
/// `values` is the `seq_len x head_dim` value matrix in row-major order.
pub fn output_decomposition(
    attn_row: &[f64],
    values: &[f64],
    layout: &TokenLayout,
    row: usize,
) -> Result<OutputDecomposition> {
    let s = layout.seq_len();
    if attn_row.len() != s || values.is_empty() || !values.len().is_multiple_of(s) {
        return Err(Error::Shape(format!(
            "attention row of {} and value matrix of {} entries do not fit seq_len {s}",
            attn_row.len(),
            values.len()
        )));
    }
    let d = values.len() / s;
    let mut linguistic = vec![0.0; d];
    let mut visual = vec![0.0; d];
    for (j, (&a, v)) in attn_row.iter().zip(values.chunks_exact(d)).enumerate() {
        let acc = if layout.vis().contains(j) { &mut visual } else { &mut linguistic };
        for (o, x) in acc.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(OutputDecomposition { row, linguistic_norm: norm(&linguistic), visual_norm: norm(&visual), linguistic, visual })
}

/// Decomposes row `row` of head `(layer, head)` using the recorded values.
pub fn decompose_trace_row(trace: &AttentionTrace, layer: usize, head: usize, row: usize) -> Result<OutputDecomposition> {
    trace.check_layer(layer)?;
    if head >= trace.heads() {
        return Err(Error::HeadOutOfRange { head, heads: trace.heads() });
    }
    let txt = trace.layout().txt();
    if !txt.contains(row) {
        return Err(Error::QueryRowOutOfSpan { row, start: txt.start, end: txt.end });
    }
    let values = trace.head_values(layer, head).ok_or(Error::MissingValues)?;
    output_decomposition(trace.row(layer, head, row), values, trace.layout(), row)
}

/// Per-layer drift curves.
///
/// `None` marks a value that is undefined for that layer (no visual mass,
/// or a constant map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    pub layers: Vec<usize>,
    pub entropy: Vec<Option<f64>>,
    /// Correlation with the negative anchor map.
    pub r_neg: Vec<Option<f64>>,
    /// Correlation with the positive anchor map.
    pub r_pos: Vec<Option<f64>>,
}

impl DriftMetrics {
    pub fn last_r_neg(&self) -> Option<f64> {
        self.r_neg.last().copied().flatten()
    }

    /// Writes `layer,entropy,r_neg,r_pos`; undefined cells are left empty.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let cell = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["layer", "entropy", "r_neg", "r_pos"])?;
        for (k, &l) in self.layers.iter().enumerate() {
            w.write_record([l.to_string(), cell(self.entropy[k]), cell(self.r_neg[k]), cell(self.r_pos[k])])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Drift curves using every head of each layer.
pub fn drift_report(trace: &AttentionTrace, anchors: &AnchorSet) -> Result<DriftMetrics> {
    let all: Vec<usize> = (0..trace.heads()).collect();
    drift_report_with(trace, anchors, |_| all.clone())
}

/// Drift curves with a caller-chosen head set per layer.
pub fn drift_report_with(
    trace: &AttentionTrace,
    anchors: &AnchorSet,
    heads_for: impl Fn(usize) -> Vec<usize>,
) -> Result<DriftMetrics> {
    if anchors.len() != trace.layout().n_vis() {
        return Err(Error::MaskLengthMismatch { expected: trace.layout().n_vis(), got: anchors.len() });
    }
    let row = anchors.pos_map.query_row;
    let mut m = DriftMetrics { layers: Vec::new(), entropy: Vec::new(), r_neg: Vec::new(), r_pos: Vec::new() };
    for l in 0..trace.layers() {
        let map = extract_saliency(trace, l, &heads_for(l), row)?;
        m.layers.push(l);
        m.entropy.push(attention_entropy(&map.values).ok());
        m.r_neg.push(pearson(&map.values, &anchors.neg_map.values).ok());
        m.r_pos.push(pearson(&map.values, &anchors.pos_map.values).ok());
    }
    Ok(m)
}
