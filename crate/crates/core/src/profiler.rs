// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual attention intensity per head and sensitive/insensitive head
//! classification.
//!
//! A head's visual intensity is the mean, over text-token query rows, of
//! the total attention that row pays to the visual span. Within each
//! layer, heads more than `lambda_vis` population standard deviations
//! above the layer mean are *visually sensitive*, those more than
//! `lambda_vis` below it are *visually insensitive*.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::{mean, pop_std_with_mean, sig9};
use crate::trace::AttentionTrace;

/// Default threshold multiplier for head classification.
pub const DEFAULT_LAMBDA_VIS: f64 = 1.0;

/// Per-head intensity scores, `layers x heads`, row-major by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadIntensity {
    pub layers: usize,
    pub heads: usize,
    /// Mean text-row attention mass on visual tokens.
    pub vis: Vec<f64>,
    /// Mean text-row attention mass on system and text tokens.
    pub prompt: Vec<f64>,
}

impl HeadIntensity {
    pub fn vis_at(&self, layer: usize, head: usize) -> f64 {
        self.vis[layer * self.heads + head]
    }

    pub fn prompt_at(&self, layer: usize, head: usize) -> f64 {
        self.prompt[layer * self.heads + head]
    }

    /// Visual intensities of every head in `layer`.
    pub fn vis_layer(&self, layer: usize) -> &[f64] {
        &self.vis[layer * self.heads..(layer + 1) * self.heads]
    }
}

/// Intensities plus the per-layer classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub intensity: HeadIntensity,
    pub lambda_vis: f64,
    pub layer_mean: Vec<f64>,
    /// Population standard deviation of the layer's visual intensities.
    pub layer_std: Vec<f64>,
    pub sens: Vec<Vec<usize>>,
    pub insens: Vec<Vec<usize>>,
    /// Set when the sensitive set was empty and the max-intensity head was used.
    pub sens_fallback: Vec<bool>,
    /// Set when the insensitive set was empty and the min-intensity head was used.
    pub insens_fallback: Vec<bool>,
}

impl HeadProfile {
    pub fn layers(&self) -> usize {
        self.intensity.layers
    }

    pub fn fallback_used(&self, layer: usize) -> bool {
        self.sens_fallback[layer] || self.insens_fallback[layer]
    }

    pub fn is_sens(&self, layer: usize, head: usize) -> bool {
        self.sens[layer].contains(&head)
    }

    pub fn is_insens(&self, layer: usize, head: usize) -> bool {
        self.insens[layer].contains(&head)
    }
}

/// Computes visual and prompt intensity for every `(layer, head)`.
pub fn head_intensity(trace: &AttentionTrace) -> HeadIntensity {
    let layout = trace.layout();
    let (vis, txt) = (layout.vis(), layout.txt());
    let n_txt = txt.len() as f64;
    let pairs: Vec<(f64, f64)> = (0..trace.layers() * trace.heads())
        .into_par_iter()
        .map(|k| {
            let (l, h) = (k / trace.heads(), k % trace.heads());
            let (mut v, mut p) = (0.0, 0.0);
            for i in txt.range() {
                let row = trace.row(l, h, i);
                v += row[vis.range()].iter().sum::<f64>();
                // columns past i are causally masked zeros
                p += row[..vis.start].iter().sum::<f64>() + row[txt.start..=i].iter().sum::<f64>();
            }
            (v / n_txt, p / n_txt)
        })
        .collect();
    let (vis, prompt) = pairs.into_iter().unzip();
    HeadIntensity { layers: trace.layers(), heads: trace.heads(), vis, prompt }
}

/// Splits each layer's heads into sensitive and insensitive sets.
///
/// Membership uses strict inequalities against `mean ± lambda_vis * std`.
/// An empty set falls back to the single extreme head (lowest index on
/// ties) and the corresponding fallback flag is raised.
pub fn classify_heads(intensity: &HeadIntensity, lambda_vis: f64) -> HeadProfile {
    let layers = intensity.layers;
    let mut p = HeadProfile {
        intensity: intensity.clone(),
        lambda_vis,
        layer_mean: Vec::with_capacity(layers),
        layer_std: Vec::with_capacity(layers),
        sens: Vec::with_capacity(layers),
        insens: Vec::with_capacity(layers),
        sens_fallback: Vec::with_capacity(layers),
        insens_fallback: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let phi = intensity.vis_layer(l);
        let mu = mean(phi);
        let sigma = pop_std_with_mean(phi, mu);
        let hi = mu + lambda_vis * sigma;
        let lo = mu - lambda_vis * sigma;
        let mut sens: Vec<usize> = (0..phi.len()).filter(|&h| phi[h] > hi).collect();
        let mut insens: Vec<usize> = (0..phi.len()).filter(|&h| phi[h] < lo).collect();
        let sens_fb = sens.is_empty();
        if sens_fb {
            sens.push(extreme(phi, |a, b| a > b));
        }
        let insens_fb = insens.is_empty();
        if insens_fb {
            insens.push(extreme(phi, |a, b| a < b));
        }
        p.layer_mean.push(mu);
        p.layer_std.push(sigma);
        p.sens.push(sens);
        p.insens.push(insens);
        p.sens_fallback.push(sens_fb);
        p.insens_fallback.push(insens_fb);
    }
    p
}

/// Index of the first element that no later element beats.
fn extreme(xs: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if better(x, xs[best]) {
            best = i;
        }
    }
    best
}

/// Profiles `trace` in one step.
pub fn profile(trace: &AttentionTrace, lambda_vis: f64) -> HeadProfile {
    classify_heads(&head_intensity(trace), lambda_vis)
}

/// Writes the layer x head intensity matrix as CSV
/// (`layer,head,vis_intensity,prompt_intensity,is_sens,is_insens`).
pub fn export_intensity_matrix<W: Write>(profile: &HeadProfile, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["layer", "head", "vis_intensity", "prompt_intensity", "is_sens", "is_insens"])?;
    let int = &profile.intensity;
    for l in 0..int.layers {
        for h in 0..int.heads {
            w.write_record([
                l.to_string(),
                h.to_string(),
                sig9(int.vis_at(l, h)),
                sig9(int.prompt_at(l, h)),
                u8::from(profile.is_sens(l, h)).to_string(),
                u8::from(profile.is_insens(l, h)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
