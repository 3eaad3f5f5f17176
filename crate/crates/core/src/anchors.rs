// SPDX-License-Identifier: MIT OR Apache-2.0

//! Positive and negative visual anchors.
//!
//! A saliency map is the last-query-row attention over the visual span,
//! averaged over a head subset. The positive anchor comes from the
//! sensitive heads of a mid-depth layer, the negative anchor from the
//! insensitive heads of the first layer. Each map is z-scored over the
//! visual tokens and thresholded into a binary mask of spatial outliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::HeadProfile;
use crate::stats::{mean, pop_std_with_mean};
use crate::trace::AttentionTrace;

/// Default z-score threshold.
pub const DEFAULT_TAU: f64 = 2.0;

/// Stabilizer added to the standard deviation before dividing.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Attention of one query row over the visual tokens, averaged over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub source_layer: usize,
    pub source_heads: Vec<usize>,
    pub query_row: usize,
}

impl SaliencyMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (j, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| v > self.values[b]) {
                best = Some(j);
            }
        }
        best
    }
}

/// Averages `A[layer][h](query_row, j)` over `heads` for every visual `j`.
pub fn extract_saliency(trace: &AttentionTrace, layer: usize, heads: &[usize], query_row: usize) -> Result<SaliencyMap> {
    trace.check_layer(layer)?;
    if heads.is_empty() {
        return Err(Error::EmptyHeadSet);
    }
    if let Some(&head) = heads.iter().find(|&&h| h >= trace.heads()) {
        return Err(Error::HeadOutOfRange { head, heads: trace.heads() });
    }
    let txt = trace.layout().txt();
    if !txt.contains(query_row) {
        return Err(Error::QueryRowOutOfSpan { row: query_row, start: txt.start, end: txt.end });
    }
    let vis = trace.layout().vis();
    let mut values = vec![0.0; vis.len()];
    for &h in heads {
        let row = &trace.row(layer, h, query_row)[vis.range()];
        for (acc, &a) in values.iter_mut().zip(row) {
            *acc += a;
        }
    }
    let k = heads.len() as f64;
    values.iter_mut().for_each(|v| *v /= k);
    Ok(SaliencyMap { values, source_layer: layer, source_heads: heads.to_vec(), query_row })
}

/// Z-scores of a map and the mask of entries whose score exceeds `tau`.
///
/// `z_j = (M_j - mean) / (std + epsilon)` with the population standard
/// deviation over all entries.
pub fn zscore_mask(map: &[f64], tau: f64, epsilon: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if map.len() < 2 {
        return Err(Error::TooFewTokens(map.len()));
    }
    let mu = mean(map);
    let denom = pop_std_with_mean(map, mu) + epsilon;
    let z: Vec<f64> = map.iter().map(|m| (m - mu) / denom).collect();
    let mask = z.iter().map(|&zj| zj > tau).collect();
    Ok((z, mask))
}

/// Layers the anchors are read from (0-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorLayers {
    pub l_mid: usize,
    pub l_neg: usize,
}

impl AnchorLayers {
    /// Positive anchor at 1-indexed layer `max(2, L/2 - 2)`, negative anchor
    /// at the first decoder layer. For `L = 32` that is layer 14, index 13.
    pub fn for_depth(layers: usize) -> Self {
        let one_indexed = (layers / 2).saturating_sub(2).max(2).min(layers.max(1));
        Self { l_mid: one_indexed - 1, l_neg: 0 }
    }
}

/// Everything needed to derive an [`AnchorSet`] from a profiled trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    pub layers: AnchorLayers,
    pub tau: f64,
    pub epsilon: f64,
    /// Query row for the saliency maps; the last prompt token when `None`.
    pub query_row: Option<usize>,
}

impl AnchorParams {
    pub fn for_depth(layers: usize) -> Self {
        Self { layers: AnchorLayers::for_depth(layers), tau: DEFAULT_TAU, epsilon: DEFAULT_EPSILON, query_row: None }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }
}

/// Positive and negative anchor maps with their z-scores and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub l_mid: usize,
    pub l_neg: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub pos_map: SaliencyMap,
    pub neg_map: SaliencyMap,
    pub pos_z: Vec<f64>,
    pub neg_z: Vec<f64>,
    pub pos_mask: Vec<bool>,
    pub neg_mask: Vec<bool>,
}

impl AnchorSet {
    /// Builds the set from two already extracted maps.
    pub fn from_maps(pos_map: SaliencyMap, neg_map: SaliencyMap, tau: f64, epsilon: f64) -> Result<Self> {
        if pos_map.len() != neg_map.len() {
            return Err(Error::LengthMismatch(pos_map.len(), neg_map.len()));
        }
        let (pos_z, pos_mask) = zscore_mask(&pos_map.values, tau, epsilon)?;
        let (neg_z, neg_mask) = zscore_mask(&neg_map.values, tau, epsilon)?;
        Ok(Self {
            l_mid: pos_map.source_layer,
            l_neg: neg_map.source_layer,
            tau,
            epsilon,
            pos_map,
            neg_map,
            pos_z,
            neg_z,
            pos_mask,
            neg_mask,
        })
    }

    /// Number of anchor columns (visual tokens).
    pub fn len(&self) -> usize {
        self.pos_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_mask.is_empty()
    }

    pub fn pos_indices(&self) -> Vec<usize> {
        indices(&self.pos_mask)
    }

    pub fn neg_indices(&self) -> Vec<usize> {
        indices(&self.neg_mask)
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(j, &m)| m.then_some(j)).collect()
}

/// Extracts both anchors from `trace` using the head sets in `profile`.
pub fn derive_anchor_set(trace: &AttentionTrace, profile: &HeadProfile, params: &AnchorParams) -> Result<AnchorSet> {
    let AnchorLayers { l_mid, l_neg } = params.layers;
    trace.check_layer(l_mid)?;
    trace.check_layer(l_neg)?;
    if profile.layers() != trace.layers() {
        return Err(Error::Shape(format!(
            "profile covers {} layers, trace has {}",
            profile.layers(),
            trace.layers()
        )));
    }
    let row = params.query_row.unwrap_or(trace.layout().last_row());
    let pos = extract_saliency(trace, l_mid, &profile.sens[l_mid], row)?;
    let neg = extract_saliency(trace, l_neg, &profile.insens[l_neg], row)?;
    AnchorSet::from_maps(pos, neg, params.tau, params.epsilon)
}

/// One binary mask per head of `layer`, each from that head's own saliency.
pub fn per_head_masks(trace: &AttentionTrace, layer: usize, query_row: usize, tau: f64, epsilon: f64) -> Result<Vec<Vec<bool>>> {
    (0..trace.heads())
        .map(|h| {
            let map = extract_saliency(trace, layer, &[h], query_row)?;
            Ok(zscore_mask(&map.values, tau, epsilon)?.1)
        })
        .collect()
}
