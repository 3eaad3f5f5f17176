// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations shared by integration tests.
//!
//! These work directly on the flat `[layer][head][row][col]` buffer with
//! explicit index arithmetic and never call into the crate's kernels.

#![allow(dead_code)]

use clva::layout::TokenLayout;
use clva::simulator::random_trace;
use clva::trace::AttentionTrace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-9;

pub fn at(t: &AttentionTrace, l: usize, h: usize, i: usize, j: usize) -> f64 {
    let s = t.seq_len();
    t.attention()[((l * t.heads() + h) * s + i) * s + j]
}

/// Random small trace: `L <= 4`, `H <= 4`, `S <= 12`, at least two
/// visual tokens and one text token.
pub fn small_trace(seed: u64) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layers = rng.random_range(1..=4);
    let heads = rng.random_range(1..=4);
    let n_vis = rng.random_range(2..=8);
    let n_txt = rng.random_range(1..=(12 - n_vis).min(3));
    let n_sys = rng.random_range(0..=(12 - n_vis - n_txt));
    let layout = TokenLayout::build(n_sys, n_vis, n_txt).unwrap();
    random_trace(seed, layers, heads, layout, None)
}

pub fn phi(t: &AttentionTrace, l: usize, h: usize) -> f64 {
    let lay = t.layout();
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in lay.txt().start..lay.txt().end {
        let mut s = 0.0;
        for j in lay.vis().start..lay.vis().end {
            s += at(t, l, h, i, j);
        }
        total += s;
        rows += 1;
    }
    total / rows as f64
}

/// `(sens, insens)` for one layer, falling back to the extreme head.
pub fn classify(phis: &[f64], lambda: f64) -> (Vec<usize>, Vec<usize>) {
    let n = phis.len() as f64;
    let mu = phis.iter().sum::<f64>() / n;
    let var = phis.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
    let sd = var.sqrt();
    let mut sens = Vec::new();
    let mut insens = Vec::new();
    for (h, &p) in phis.iter().enumerate() {
        if p > mu + lambda * sd {
            sens.push(h);
        }
        if p < mu - lambda * sd {
            insens.push(h);
        }
    }
    if sens.is_empty() {
        let max = phis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        sens.push(phis.iter().position(|&p| p == max).unwrap());
    }
    if insens.is_empty() {
        let min = phis.iter().copied().fold(f64::INFINITY, f64::min);
        insens.push(phis.iter().position(|&p| p == min).unwrap());
    }
    (sens, insens)
}

pub fn zscores(map: &[f64], eps: f64) -> Vec<f64> {
    let n = map.len() as f64;
    let mu = map.iter().sum::<f64>() / n;
    let sd = (map.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
    map.iter().map(|m| (m - mu) / (sd + eps)).collect()
}

/// One re-anchored row: scale visual columns, renormalize.
pub fn reanchor_row(row: &[f64], vis_start: usize, pos: &[bool], neg: &[bool], alpha: f64, beta: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    let mut any = false;
    for k in 0..pos.len() {
        let f = (1.0 + if pos[k] { alpha } else { 0.0 } - if neg[k] { beta } else { 0.0 }).max(0.0);
        if f != 1.0 {
            any = true;
        }
        out[vis_start + k] *= f;
    }
    if !any {
        return row.to_vec();
    }
    let z: f64 = out.iter().sum();
    if z <= 0.0 {
        return row.to_vec();
    }
    out.iter().map(|a| a / z).collect()
}

/// `sum xy / n - mean(x) mean(y)` over the product of standard deviations.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let cov = sxy / n - (sx / n) * (sy / n);
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    cov / (vx * vy).sqrt()
}

pub fn entropy(map: &[f64]) -> f64 {
    let z: f64 = map.iter().sum();
    let mut h = 0.0;
    for &m in map {
        if m > 0.0 {
            h -= (m / z) * (m / z).ln();
        }
    }
    h
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}
