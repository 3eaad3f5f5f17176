// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention re-anchoring.
//!
//! For every text query row `i` and visual column `j` of an affected
//! layer, the post-softmax weight is scaled by
//! `max(floor, 1 + s_pos * alpha * Z_pos(j) - s_neg * beta * Z_neg(j))`
//! and the row is renormalized over all of its columns. Linguistic columns
//! keep their weight before renormalization, so any net gain in visual
//! mass is paid for by the system and text tokens.
//!
//! Rows whose factors are all exactly one are left untouched, which makes
//! `alpha = beta = 0` a bitwise no-op.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLayers, AnchorSet};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::trace::AttentionTrace;

/// Default positive-anchor amplification.
pub const DEFAULT_ALPHA: f64 = 14.0;
/// Default negative-anchor penalty.
pub const DEFAULT_BETA: f64 = 0.9;

/// Which anchor terms are active, and with which sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Amplify positive anchors, suppress negative ones.
    #[default]
    Standard,
    PosOnly,
    NegOnly,
    /// Suppress positive anchors and amplify negative ones.
    Flipped,
}

impl SignMode {
    /// `(s_pos, s_neg)` multipliers of the alpha and beta terms.
    pub fn signs(self) -> (f64, f64) {
        match self {
            SignMode::Standard => (1.0, 1.0),
            SignMode::PosOnly => (1.0, 0.0),
            SignMode::NegOnly => (0.0, 1.0),
            SignMode::Flipped => (-1.0, -1.0),
        }
    }

    pub const ALL: [SignMode; 4] = [SignMode::Standard, SignMode::PosOnly, SignMode::NegOnly, SignMode::Flipped];
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignMode::Standard => "standard",
            SignMode::PosOnly => "pos_only",
            SignMode::NegOnly => "neg_only",
            SignMode::Flipped => "flipped",
        })
    }
}

impl FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "standard" => Ok(SignMode::Standard),
            "pos_only" => Ok(SignMode::PosOnly),
            "neg_only" => Ok(SignMode::NegOnly),
            "flipped" => Ok(SignMode::Flipped),
            other => Err(Error::Config(format!("unknown sign mode {other:?}"))),
        }
    }
}

/// Where the modulation lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Text rows attending to the visual span of decoder self-attention.
    #[default]
    DecoderSelfAttention,
    /// Cross-attention inside a query compressor: every row is a query and
    /// every column an image feature, so masks cover all columns.
    CompressorCrossAttention,
}

/// When anchors are recomputed during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRefresh {
    /// Extracted once from the prefill pass.
    #[default]
    Frozen,
    /// Re-extracted from the current query at every decoding step.
    PerStep,
}

/// Half-open interval of layer indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Layers strictly after `l_mid` through the last layer.
    pub fn after(l_mid: usize, layers: usize) -> Self {
        Self { start: (l_mid + 1).min(layers), end: layers }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.start <= layer && layer < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    /// Parses `a..b`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer range {s:?} is not of the form a..b"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        Ok(Self { start: a.trim().parse().map_err(|_| bad())?, end: b.trim().parse().map_err(|_| bad())? })
    }
}

/// Knobs of the intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub layer_range: LayerRange,
    #[serde(default)]
    pub sign_mode: SignMode,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub anchor_refresh: AnchorRefresh,
    #[serde(default)]
    pub clamp_floor: f64,
}

impl InterventionConfig {
    /// Default strengths, applied to every layer after the positive anchor.
    pub fn for_depth(layers: usize) -> Self {
        let AnchorLayers { l_mid, .. } = AnchorLayers::for_depth(layers);
        Self::new(DEFAULT_ALPHA, DEFAULT_BETA, LayerRange::after(l_mid, layers))
    }

    pub fn new(alpha: f64, beta: f64, layer_range: LayerRange) -> Self {
        Self {
            alpha,
            beta,
            layer_range,
            sign_mode: SignMode::Standard,
            placement: Placement::DecoderSelfAttention,
            anchor_refresh: AnchorRefresh::Frozen,
            clamp_floor: 0.0,
        }
    }

    pub fn with_sign_mode(mut self, mode: SignMode) -> Self {
        self.sign_mode = mode;
        self
    }

    pub fn with_strengths(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_refresh(mut self, refresh: AnchorRefresh) -> Self {
        self.anchor_refresh = refresh;
        self
    }

    /// Checks parameter signs and that the layer range fits `layers`.
    pub fn validate(&self, layers: usize) -> Result<()> {
        check_strengths(self.alpha, self.beta)?;
        if !(self.clamp_floor >= 0.0) {
            return Err(Error::NegativeParameter { name: "clamp_floor", value: self.clamp_floor });
        }
        if self.layer_range.end > layers || self.layer_range.start > self.layer_range.end {
            return Err(Error::Config(format!(
                "layer range {}..{} outside 0..{layers}",
                self.layer_range.start, self.layer_range.end
            )));
        }
        Ok(())
    }

    /// Per-column multiplier for a pair of masks.
    pub fn factors(&self, pos_mask: &[bool], neg_mask: &[bool]) -> Result<Vec<f64>> {
        if pos_mask.len() != neg_mask.len() {
            return Err(Error::MaskLengthMismatch { expected: pos_mask.len(), got: neg_mask.len() });
        }
        let (sp, sn) = self.sign_mode.signs();
        Ok(pos_mask
            .iter()
            .zip(neg_mask)
            .map(|(&p, &n)| {
                let f = 1.0 + sp * self.alpha * f64::from(u8::from(p)) - sn * self.beta * f64::from(u8::from(n));
                f.max(self.clamp_floor)
            })
            .collect())
    }
}

fn check_strengths(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) {
        return Err(Error::NegativeParameter { name: "alpha", value: alpha });
    }
    if !(beta >= 0.0) {
        return Err(Error::NegativeParameter { name: "beta", value: beta });
    }
    Ok(())
}

/// Mass bookkeeping for one modulated row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub row: usize,
    pub pre_pos: f64,
    pub post_pos: f64,
    pub pre_neg: f64,
    pub post_neg: f64,
    pub pre_ling: f64,
    pub post_ling: f64,
    /// Sum of the modulated row before renormalization, `1 + alpha*P - beta*N`
    /// for a stochastic input row.
    pub normalizer: f64,
}

/// Columns of a row the masks refer to, plus which of them count as
/// positive / negative anchors.
#[derive(Debug, Clone, Copy)]
pub struct RowTarget<'a> {
    /// Column offset of mask entry 0.
    pub offset: usize,
    pub factors: &'a [f64],
    pub pos_mask: &'a [bool],
    pub neg_mask: &'a [bool],
}

/// Modulates and renormalizes a single attention row in place.
///
/// Returns `None` and leaves the row untouched when every factor is one
/// or when the modulated row has no mass left.
pub fn modulate_row(row: &mut [f64], target: RowTarget<'_>, row_index: usize) -> Option<RowReport> {
    let RowTarget { offset, factors, pos_mask, neg_mask } = target;
    if factors.iter().all(|&f| f == 1.0) {
        return None;
    }
    let cols = offset..offset + factors.len();
    let masses = |r: &[f64]| {
        let (mut pos, mut neg) = (0.0, 0.0);
        for (k, &a) in r[cols.clone()].iter().enumerate() {
            if pos_mask[k] {
                pos += a;
            }
            if neg_mask[k] {
                neg += a;
            }
        }
        (pos, neg)
    };
    let (pre_pos, pre_neg) = masses(row);
    let pre_ling: f64 = row.iter().enumerate().filter(|(j, _)| !cols.contains(j)).map(|(_, a)| a).sum();

    let mut scaled = row.to_vec();
    for (a, &f) in scaled[cols.clone()].iter_mut().zip(factors) {
        *a *= f;
    }
    let normalizer: f64 = scaled.iter().sum();
    if !(normalizer > 0.0) {
        return None;
    }
    for (dst, a) in row.iter_mut().zip(scaled) {
        *dst = a / normalizer;
    }
    let (post_pos, post_neg) = masses(row);
    let post_ling: f64 = row.iter().enumerate().filter(|(j, _)| !cols.contains(j)).map(|(_, a)| a).sum();
    Some(RowReport { row: row_index, pre_pos, post_pos, pre_neg, post_neg, pre_ling, post_ling, normalizer })
}

/// Query rows and first masked column for a placement.
fn placement_target(layout: &TokenLayout, placement: Placement) -> (Range<usize>, usize, usize) {
    match placement {
        Placement::DecoderSelfAttention => (layout.txt().range(), layout.vis().start, layout.n_vis()),
        Placement::CompressorCrossAttention => (0..layout.seq_len(), 0, layout.seq_len()),
    }
}

/// Re-anchors one head's `seq_len x seq_len` attention matrix.
pub fn reanchor_attention(
    attn: &[f64],
    layout: &TokenLayout,
    anchors: &AnchorSet,
    cfg: &InterventionConfig,
) -> Result<(Vec<f64>, Vec<RowReport>)> {
    check_strengths(cfg.alpha, cfg.beta)?;
    let factors = cfg.factors(&anchors.pos_mask, &anchors.neg_mask)?;
    reanchor_with_factors(attn, layout, cfg.placement, &factors, &anchors.pos_mask, &anchors.neg_mask)
}

fn reanchor_with_factors(
    attn: &[f64],
    layout: &TokenLayout,
    placement: Placement,
    factors: &[f64],
    pos_mask: &[bool],
    neg_mask: &[bool],
) -> Result<(Vec<f64>, Vec<RowReport>)> {
    let s = layout.seq_len();
    if attn.len() != s * s {
        return Err(Error::Shape(format!("attention matrix has {} entries, expected {}", attn.len(), s * s)));
    }
    let (rows, offset, n) = placement_target(layout, placement);
    if factors.len() != n {
        return Err(Error::MaskLengthMismatch { expected: n, got: factors.len() });
    }
    let mut out = attn.to_vec();
    let target = RowTarget { offset, factors, pos_mask, neg_mask };
    let reports = rows.filter_map(|i| modulate_row(&mut out[i * s..(i + 1) * s], target, i)).collect();
    Ok((out, reports))
}

/// Head-averaged mask ablation: one fractional mask
/// `Z_avg = mean_h Z_h` applied with factor `1 + (alpha - beta) * Z_avg(j)`.
pub fn reanchor_averaged(
    attn: &[f64],
    layout: &TokenLayout,
    per_head_masks: &[Vec<bool>],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_strengths(alpha, beta)?;
    let z_avg = average_masks(per_head_masks, layout.n_vis())?;
    let factors: Vec<f64> = z_avg.iter().map(|z| (1.0 + (alpha - beta) * z).max(0.0)).collect();
    let support: Vec<bool> = z_avg.iter().map(|&z| z > 0.0).collect();
    let none = vec![false; support.len()];
    Ok(reanchor_with_factors(attn, layout, Placement::DecoderSelfAttention, &factors, &support, &none)?.0)
}

/// Column-wise mean of binary masks.
pub fn average_masks(masks: &[Vec<bool>], n: usize) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::EmptyMaskList);
    }
    let mut acc = vec![0.0; n];
    for m in masks {
        if m.len() != n {
            return Err(Error::MaskLengthMismatch { expected: n, got: m.len() });
        }
        for (a, &b) in acc.iter_mut().zip(m) {
            *a += f64::from(u8::from(b));
        }
    }
    let k = masks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Aggregated masses for one layer (means over heads and touched rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub rows_touched: usize,
    pub pre_pos: f64,
    pub post_pos: f64,
    pub pre_neg: f64,
    pub post_neg: f64,
    pub pre_ling: f64,
    pub post_ling: f64,
    /// Row normalizers in `(head, row)` order.
    pub normalizers: Vec<f64>,
}

/// What an intervention did to a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub config: InterventionConfig,
    pub layers: Vec<LayerReport>,
}

impl InterventionReport {
    pub fn touched_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn rows_touched(&self) -> usize {
        self.layers.iter().map(|l| l.rows_touched).sum()
    }
}

/// Re-anchors every head of every layer in `cfg.layer_range`.
pub fn apply_to_trace(
    trace: &AttentionTrace,
    anchors: &AnchorSet,
    cfg: &InterventionConfig,
) -> Result<(AttentionTrace, InterventionReport)> {
    cfg.validate(trace.layers())?;
    let factors = cfg.factors(&anchors.pos_mask, &anchors.neg_mask)?;
    let layout = trace.layout();
    let heads = trace.heads();
    let s2 = trace.seq_len() * trace.seq_len();

    let jobs: Vec<(usize, usize)> = cfg.layer_range.range().flat_map(|l| (0..heads).map(move |h| (l, h))).collect();
    let results: Vec<(Vec<f64>, Vec<RowReport>)> = jobs
        .par_iter()
        .map(|&(l, h)| {
            reanchor_with_factors(
                trace.head(l, h),
                layout,
                cfg.placement,
                &factors,
                &anchors.pos_mask,
                &anchors.neg_mask,
            )
        })
        .collect::<Result<_>>()?;

    let mut attn = trace.attention().to_vec();
    let mut layers = Vec::new();
    for (chunk, layer) in results.chunks(heads.max(1)).zip(cfg.layer_range.range()) {
        let mut rep = LayerReport {
            layer,
            rows_touched: 0,
            pre_pos: 0.0,
            post_pos: 0.0,
            pre_neg: 0.0,
            post_neg: 0.0,
            pre_ling: 0.0,
            post_ling: 0.0,
            normalizers: Vec::new(),
        };
        for (h, (m, rows)) in chunk.iter().enumerate() {
            let off = (layer * heads + h) * s2;
            attn[off..off + s2].copy_from_slice(m);
            for r in rows {
                rep.pre_pos += r.pre_pos;
                rep.post_pos += r.post_pos;
                rep.pre_neg += r.pre_neg;
                rep.post_neg += r.post_neg;
                rep.pre_ling += r.pre_ling;
                rep.post_ling += r.post_ling;
                rep.normalizers.push(r.normalizer);
            }
            rep.rows_touched += rows.len();
        }
        if rep.rows_touched > 0 {
            let k = rep.rows_touched as f64;
            for v in [
                &mut rep.pre_pos,
                &mut rep.post_pos,
                &mut rep.pre_neg,
                &mut rep.post_neg,
                &mut rep.pre_ling,
                &mut rep.post_ling,
            ] {
                *v /= k;
            }
        }
        layers.push(rep);
    }
    let new = trace.with_attention(attn)?;
    Ok((new, InterventionReport { config: *cfg, layers }))
}
