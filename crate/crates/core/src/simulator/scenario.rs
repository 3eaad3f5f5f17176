// SPDX-License-Identifier: MIT OR Apache-2.0

//! Constructed drift scenarios with known ground truth.
//!
//! Every layer has designated sensitive heads whose last text row
//! attends to a mixture of a ground-truth pattern and a noise pattern,
//! `(1 - gamma(l)) * C_gt + gamma(l) * C_noise`, with linguistic mass
//! `rho(l)`. Insensitive heads attend to the noise pattern at every
//! layer. The remaining heads spread their mass near-uniformly.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayers;
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::trace::{AttentionTrace, TraceMeta};

/// Description of a synthetic drift scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScenario {
    pub layers: usize,
    pub heads: usize,
    pub n_sys: usize,
    pub n_vis: usize,
    pub n_txt: usize,
    /// Visual indices (0-based within the visual span) of the true object.
    pub gt_region: Vec<usize>,
    /// Visual indices the early layers attend to by default.
    pub noise_region: Vec<usize>,
    /// Sensitive heads per layer.
    pub sens_heads: Vec<Vec<usize>>,
    /// Insensitive heads per layer.
    pub insens_heads: Vec<Vec<usize>>,
    /// Drift coefficient per layer, 0 up to the positive-anchor layer.
    pub gamma: Vec<f64>,
    /// Linguistic mass of the sensitive heads per layer.
    pub rho: Vec<f64>,
    /// Linguistic mass of the insensitive heads.
    pub insens_rho: f64,
    /// Share of a pattern's mass placed on its region.
    pub concentration: f64,
    /// Relative amplitude of the multiplicative noise on every weight.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DriftScenario {
    /// 8 layers, 4 heads, 16 visual tokens, ground truth at token 5,
    /// noise at tokens 0, 3 and 12, drift rising to 0.85.
    fn default() -> Self {
        Self::build(8, 4, (2, 16, 6), vec![5], vec![0, 3, 12], 0.85, 7)
    }
}

impl DriftScenario {
    /// Scenario with head 1 sensitive and head 2 insensitive at every layer
    /// (head 0 when `heads == 1`), and the default drift/linguistic schedules.
    pub fn build(
        layers: usize,
        heads: usize,
        (n_sys, n_vis, n_txt): (usize, usize, usize),
        gt_region: Vec<usize>,
        noise_region: Vec<usize>,
        gamma_max: f64,
        seed: u64,
    ) -> Self {
        let sens = 1.min(heads.saturating_sub(1));
        let insens = 2.min(heads.saturating_sub(1));
        let l_mid = AnchorLayers::for_depth(layers).l_mid;
        Self {
            layers,
            heads,
            n_sys,
            n_vis,
            n_txt,
            gt_region,
            noise_region,
            sens_heads: vec![vec![sens]; layers],
            insens_heads: vec![if insens != sens { vec![insens] } else { vec![] }; layers],
            gamma: gamma_schedule(layers, l_mid, gamma_max),
            rho: gamma_schedule(layers, l_mid, 1.0).iter().map(|g| 0.1 + 0.3 * g).collect(),
            insens_rho: 0.5,
            concentration: 0.9,
            jitter: 0.01,
            seed,
        }
    }

    /// Replaces the drift schedule with the default ramp up to `gamma_max`.
    pub fn with_gamma_max(mut self, gamma_max: f64) -> Self {
        let l_mid = AnchorLayers::for_depth(self.layers).l_mid;
        self.gamma = gamma_schedule(self.layers, l_mid, gamma_max);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::build(self.n_sys, self.n_vis, self.n_txt)
    }

    /// Checks region, head and schedule consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        self.layout()?;
        if self.layers == 0 || self.heads == 0 {
            return bad("layers and heads must be positive".into());
        }
        for (name, region) in [("gt_region", &self.gt_region), ("noise_region", &self.noise_region)] {
            if region.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if let Some(j) = region.iter().find(|&&j| j >= self.n_vis) {
                return bad(format!("{name} index {j} outside {} visual tokens", self.n_vis));
            }
            if region.len() == self.n_vis {
                return bad(format!("{name} covers every visual token"));
            }
        }
        let gt: BTreeSet<_> = self.gt_region.iter().collect();
        if self.noise_region.iter().any(|j| gt.contains(j)) {
            return bad("gt_region and noise_region overlap".into());
        }
        for (name, v) in [("sens_heads", &self.sens_heads), ("insens_heads", &self.insens_heads)] {
            if v.len() != self.layers {
                return bad(format!("{name} has {} layers, expected {}", v.len(), self.layers));
            }
            if let Some(h) = v.iter().flatten().find(|&&h| h >= self.heads) {
                return bad(format!("{name} refers to head {h} of {}", self.heads));
            }
        }
        for l in 0..self.layers {
            if self.sens_heads[l].iter().any(|h| self.insens_heads[l].contains(h)) {
                return bad(format!("layer {l}: a head is both sensitive and insensitive"));
            }
        }
        for (name, v) in [("gamma", &self.gamma), ("rho", &self.rho)] {
            if v.len() != self.layers {
                return bad(format!("{name} has {} entries, expected {}", v.len(), self.layers));
            }
        }
        if self.gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return bad("gamma values must lie in [0, 1]".into());
        }
        if self.rho.iter().chain([&self.insens_rho]).any(|r| !(0.0..1.0).contains(r)) {
            return bad("linguistic masses must lie in [0, 1)".into());
        }
        let l_mid = AnchorLayers::for_depth(self.layers).l_mid;
        if self.gamma[l_mid] != 0.0 {
            return bad(format!("gamma at the positive-anchor layer {l_mid} must be 0"));
        }
        if !(0.8..=1.0).contains(&self.concentration) {
            return bad("concentration must lie in [0.8, 1]".into());
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad("jitter must lie in [0, 0.5)".into());
        }
        Ok(())
    }

    /// Pattern concentrated on `region`, remaining mass spread uniformly.
    fn pattern(&self, region: &[usize]) -> Vec<f64> {
        let rest = (self.n_vis - region.len()) as f64;
        let mut c = vec![(1.0 - self.concentration) / rest; self.n_vis];
        for &j in region {
            c[j] = self.concentration / region.len() as f64;
        }
        c
    }

    pub fn gt_pattern(&self) -> Vec<f64> {
        self.pattern(&self.gt_region)
    }

    pub fn noise_pattern(&self) -> Vec<f64> {
        self.pattern(&self.noise_region)
    }
}

/// Zero through `l_mid`, then a linear ramp reaching `gamma_max` at the
/// last layer.
pub fn gamma_schedule(layers: usize, l_mid: usize, gamma_max: f64) -> Vec<f64> {
    let last = layers.saturating_sub(1);
    (0..layers)
        .map(|l| if l <= l_mid || last <= l_mid { 0.0 } else { gamma_max * (l - l_mid) as f64 / (last - l_mid) as f64 })
        .collect()
}

/// How a text row splits its mass.
enum RowShape<'a> {
    /// Visual mass and the visual distribution to use.
    Split { vis_mass: f64, dist: &'a [f64] },
    Uniform,
}

/// Generates the attention trace of a scenario.
pub fn make_scenario(spec: &DriftScenario) -> Result<AttentionTrace> {
    spec.validate()?;
    let layout = spec.layout()?;
    let s = layout.seq_len();
    let (vis, txt) = (layout.vis(), layout.txt());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c_gt = spec.gt_pattern();
    let c_noise = spec.noise_pattern();
    let flat = vec![1.0 / spec.n_vis as f64; spec.n_vis];

    let mut attn = vec![0.0; spec.layers * spec.heads * s * s];
    for l in 0..spec.layers {
        let g = spec.gamma[l];
        let mixed: Vec<f64> = c_gt.iter().zip(&c_noise).map(|(a, b)| (1.0 - g) * a + g * b).collect();
        for h in 0..spec.heads {
            let off = (l * spec.heads + h) * s * s;
            let is_sens = spec.sens_heads[l].contains(&h);
            let is_insens = spec.insens_heads[l].contains(&h);
            for i in 0..s {
                let row = &mut attn[off + i * s..off + (i + 1) * s];
                let shape = if !txt.contains(i) {
                    RowShape::Uniform
                } else if is_sens || is_insens {
                    let (vis_mass, last_dist) =
                        if is_sens { (1.0 - spec.rho[l], &mixed) } else { (1.0 - spec.insens_rho, &c_noise) };
                    let dist = if i == layout.last_row() { last_dist.as_slice() } else { flat.as_slice() };
                    RowShape::Split { vis_mass, dist }
                } else {
                    RowShape::Uniform
                };
                match shape {
                    RowShape::Uniform => row[..=i].fill(1.0 / (i + 1) as f64),
                    RowShape::Split { vis_mass, dist } => {
                        let n_ling = (i + 1 - vis.len()) as f64;
                        for (j, a) in row[..=i].iter_mut().enumerate() {
                            *a = if vis.contains(j) { vis_mass * dist[j - vis.start] } else { (1.0 - vis_mass) / n_ling };
                        }
                    }
                }
                jitter_row(&mut row[..=i], spec.jitter, &mut rng);
            }
        }
    }
    let mut meta = TraceMeta::new("drift-scenario").with_note("synthetic drift scenario");
    meta.extra.insert("seed".into(), spec.seed.to_string());
    AttentionTrace::new(spec.layers, spec.heads, 0, layout, attn, None, meta)
}

fn jitter_row(row: &mut [f64], amplitude: f64, rng: &mut ChaCha8Rng) {
    if amplitude == 0.0 {
        return;
    }
    for a in row.iter_mut() {
        *a *= 1.0 + amplitude * rng.random_range(-1.0..=1.0);
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|a| *a /= total);
}

/// Random causal trace: each row is a softmax of Gaussian logits scaled by
/// a per-row temperature, so concentration varies from near-uniform to
/// near one-hot. Values, when requested, are standard normal.
pub fn random_trace(seed: u64, layers: usize, heads: usize, layout: TokenLayout, head_dim: Option<usize>) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = layout.seq_len();
    let mut attn = vec![0.0; layers * heads * s * s];
    for m in attn.chunks_exact_mut(s * s) {
        for (i, row) in m.chunks_exact_mut(s).enumerate() {
            let temp: f64 = rng.random_range(0.2..4.0);
            let logits: Vec<f64> = (0..=i).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); temp * z }).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for (a, z) in row.iter_mut().zip(&logits) {
                *a = (z - max).exp() / total;
            }
        }
    }
    let values = head_dim.map(|d| (0..layers * heads * s * d).map(|_| StandardNormal.sample(&mut rng)).collect());
    AttentionTrace::new(layers, heads, head_dim.unwrap_or(0), layout, attn, values, TraceMeta::new("random"))
        .expect("softmax rows are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = DriftScenario::default();
        assert_eq!(s.gamma[1], 0.0);
        assert!((s.gamma[7] - 0.85).abs() < 1e-15);
        assert!(s.gamma.windows(2).all(|w| w[0] <= w[1]));
        s.validate().unwrap();
    }

    #[test]
    fn overlapping_regions_rejected() {
        let mut s = DriftScenario::default();
        s.noise_region.push(5);
        assert!(matches!(make_scenario(&s), Err(Error::Scenario(m)) if m.contains("overlap")));
    }

    #[test]
    fn patterns_are_concentrated() {
        let s = DriftScenario::default();
        let gt = s.gt_pattern();
        assert!((gt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gt[5] >= 0.8);
        let noise = s.noise_pattern();
        assert!([0, 3, 12].iter().map(|&j| noise[j]).sum::<f64>() >= 0.8);
    }

    #[test]
    fn generated_trace_is_valid_and_deterministic() {
        let s = DriftScenario::default();
        let a = make_scenario(&s).unwrap();
        let b = make_scenario(&s).unwrap();
        assert_eq!(a, b);
        assert!(a.violations().is_empty());
        assert_ne!(make_scenario(&s.clone().with_seed(8)).unwrap(), a);
    }

    #[test]
    fn json_round_trip() {
        let s = DriftScenario::default();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DriftScenario>(&text).unwrap(), s);
    }
}
