// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy multimodal decoder.
//!
//! Attention-only blocks with residual connections, sinusoidal positions
//! and a tied unembedding; no MLP and no normalization. Weights come from
//! a ChaCha8 stream seeded with `ToyModelConfig::seed`: token embeddings
//! are standard normal, projection entries are normal with standard
//! deviation `1/sqrt(model_dim)`, drawn in the order embed, then per layer
//! `W_q, W_k, W_v, W_o`.
//!
//! Decoding is greedy and uses a per-layer key/value cache. An optional
//! [`GenerationHook`] re-anchors the attention rows of text queries in the
//! affected layers before the value product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{derive_anchor_set, zscore_mask, AnchorParams, AnchorSet};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::profiler::{profile, HeadProfile};
use crate::reanchor::{modulate_row, AnchorRefresh, InterventionConfig, Placement, RowTarget};
use crate::trace::{AttentionTrace, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub vocab: usize,
    pub layout: TokenLayout,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("toy model counts must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        Ok(())
    }
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            model_dim: 32,
            vocab: 64,
            layout: TokenLayout::build(2, 16, 6).expect("static layout"),
            seed: 0,
        }
    }
}

struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

pub struct ToyModel {
    cfg: ToyModelConfig,
    embed: Vec<f64>,
    layers: Vec<Layer>,
}

/// Intervention applied during generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationHook {
    pub cfg: InterventionConfig,
    pub anchors: AnchorParams,
    pub lambda_vis: f64,
}

/// Output of [`run_generation`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Logits each generated token was chosen from.
    pub logits: Vec<Vec<f64>>,
    /// Unmodified prefill attention, with values.
    pub prefill: AttentionTrace,
    pub anchors: Option<AnchorSet>,
}

/// `x (1 x n) · W (n x m)` with `W` row-major.
fn matvec(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (xi, row) in x.iter().zip(w.chunks_exact(m)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

#[derive(Default)]
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-run modulation state.
struct Modulation<'a> {
    cfg: InterventionConfig,
    layout: TokenLayout,
    factors: Vec<f64>,
    pos_mask: Vec<bool>,
    neg_mask: Vec<bool>,
    refresh: Option<Refresh<'a>>,
}

struct Refresh<'a> {
    profile: &'a HeadProfile,
    params: AnchorParams,
}

impl Modulation<'_> {
    fn applies(&self, layer: usize, pos: usize) -> bool {
        self.cfg.layer_range.contains(layer) && pos >= self.layout.txt().start
    }

    fn apply(&self, row: &mut [f64], pos: usize) {
        let target = RowTarget {
            offset: self.layout.vis().start,
            factors: &self.factors,
            pos_mask: &self.pos_mask,
            neg_mask: &self.neg_mask,
        };
        modulate_row(row, target, pos);
    }

    /// Rebuilds masks from the current query's unmodified anchor-layer rows.
    fn refresh(&mut self, layer_rows: &[Vec<Vec<f64>>]) -> Result<()> {
        let Some(r) = &self.refresh else { return Ok(()) };
        let vis = self.layout.vis();
        let map = |layer: usize, heads: &[usize]| -> Vec<f64> {
            let mut m = vec![0.0; vis.len()];
            for &h in heads {
                for (acc, a) in m.iter_mut().zip(&layer_rows[layer][h][vis.range()]) {
                    *acc += a;
                }
            }
            m.iter().map(|v| v / heads.len() as f64).collect()
        };
        let (l_mid, l_neg) = (r.params.layers.l_mid, r.params.layers.l_neg);
        let pos = map(l_mid, &r.profile.sens[l_mid]);
        let neg = map(l_neg, &r.profile.insens[l_neg]);
        self.pos_mask = zscore_mask(&pos, r.params.tau, r.params.epsilon)?.1;
        self.neg_mask = zscore_mask(&neg, r.params.tau, r.params.epsilon)?.1;
        self.factors = self.cfg.factors(&self.pos_mask, &self.neg_mask)?;
        Ok(())
    }
}

/// Per layer, per head: one attention row.
type LayerRows = Vec<Vec<Vec<f64>>>;

impl ToyModel {
    pub fn init(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_dim;
        let embed = (0..cfg.vocab * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut draw = || (0..d * d).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
        let layers = (0..cfg.layers).map(|_| Layer { wq: draw(), wk: draw(), wv: draw(), wo: draw() }).collect();
        Ok(Self { cfg, embed, layers })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// A deterministic prompt that fills the model's layout.
    pub fn sample_prompt(&self, seed: u64) -> Vec<usize> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.cfg.layout.seq_len()).map(|_| rng.random_range(0..self.cfg.vocab)).collect()
    }

    fn input(&self, token: usize, pos: usize) -> Vec<f64> {
        let d = self.cfg.model_dim;
        let mut h = self.embed[token * d..(token + 1) * d].to_vec();
        for (k, x) in h.iter_mut().enumerate() {
            let freq = 1.0 / 10000f64.powf((k - k % 2) as f64 / d as f64);
            *x += if k % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
        }
        h
    }

    fn unembed(&self, h: &[f64]) -> Vec<f64> {
        self.embed.chunks_exact(self.cfg.model_dim).map(|e| e.iter().zip(h).map(|(a, b)| a * b).sum()).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            Some(&token) => Err(Error::TokenOutOfVocab { token, vocab: self.cfg.vocab }),
            None => Ok(()),
        }
    }

    /// Runs one token through every layer, appending to the cache.
    ///
    /// Returns the logits and, per layer and head, the attention row of
    /// this query before any modulation.
    fn step(
        &self,
        token: usize,
        cache: &mut [KvCache],
        mut modulation: Option<&mut Modulation<'_>>,
    ) -> Result<(Vec<f64>, LayerRows)> {
        let (d, nh) = (self.cfg.model_dim, self.cfg.heads);
        let hd = self.cfg.head_dim();
        let pos = cache[0].keys.len();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = self.input(token, pos);
        let mut raw_rows = Vec::with_capacity(self.layers.len());
        let refresh_after = modulation.as_ref().and_then(|m| {
            m.refresh.as_ref().map(|r| r.params.layers.l_mid.max(r.params.layers.l_neg))
        });

        for (l, (layer, kv)) in self.layers.iter().zip(cache.iter_mut()).enumerate() {
            let q = matvec(&h, &layer.wq, d);
            kv.keys.push(matvec(&h, &layer.wk, d));
            kv.values.push(matvec(&h, &layer.wv, d));
            let mut concat = vec![0.0; d];
            let mut rows = Vec::with_capacity(nh);
            for head in 0..nh {
                let cols = head * hd..(head + 1) * hd;
                let mut row: Vec<f64> = kv
                    .keys
                    .iter()
                    .map(|k| q[cols.clone()].iter().zip(&k[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                softmax_in_place(&mut row);
                rows.push(row.clone());
                if let Some(m) = modulation.as_deref() {
                    if m.applies(l, pos) {
                        m.apply(&mut row, pos);
                    }
                }
                for (a, v) in row.iter().zip(&kv.values) {
                    for (o, x) in concat[cols.clone()].iter_mut().zip(&v[cols.clone()]) {
                        *o += a * x;
                    }
                }
            }
            raw_rows.push(rows);
            for (x, y) in h.iter_mut().zip(matvec(&concat, &layer.wo, d)) {
                *x += y;
            }
            if refresh_after == Some(l) && pos >= self.cfg.layout.txt().end {
                if let Some(m) = modulation.as_deref_mut() {
                    m.refresh(&raw_rows)?;
                }
            }
        }
        Ok((self.unembed(&h), raw_rows))
    }

    /// Logits at the last position, recomputed from scratch over the whole
    /// sequence without a cache. Optional frozen modulation is applied to
    /// every text row of the affected layers.
    pub fn logits_full(&self, tokens: &[usize], modulation: Option<(&InterventionConfig, &AnchorSet)>) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let (d, nh, hd) = (self.cfg.model_dim, self.cfg.heads, self.cfg.head_dim());
        let n = tokens.len();
        let layout = self.cfg.layout;
        let factors = match modulation {
            Some((cfg, a)) => Some(cfg.factors(&a.pos_mask, &a.neg_mask)?),
            None => None,
        };
        let mut hs: Vec<Vec<f64>> = tokens.iter().enumerate().map(|(p, &t)| self.input(t, p)).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let qs: Vec<_> = hs.iter().map(|h| matvec(h, &layer.wq, d)).collect();
            let ks: Vec<_> = hs.iter().map(|h| matvec(h, &layer.wk, d)).collect();
            let vs: Vec<_> = hs.iter().map(|h| matvec(h, &layer.wv, d)).collect();
            let mut outs = vec![vec![0.0; d]; n];
            for head in 0..nh {
                let c = head * hd..(head + 1) * hd;
                for i in 0..n {
                    let mut row: Vec<f64> = (0..=i)
                        .map(|j| {
                            qs[i][c.clone()].iter().zip(&ks[j][c.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    softmax_in_place(&mut row);
                    if let (Some(f), Some((cfg, a))) = (&factors, modulation) {
                        if cfg.layer_range.contains(l) && i >= layout.txt().start {
                            let target = RowTarget {
                                offset: layout.vis().start,
                                factors: f,
                                pos_mask: &a.pos_mask,
                                neg_mask: &a.neg_mask,
                            };
                            modulate_row(&mut row, target, i);
                        }
                    }
                    for (j, a) in row.iter().enumerate() {
                        for (o, x) in outs[i][c.clone()].iter_mut().zip(&vs[j][c.clone()]) {
                            *o += a * x;
                        }
                    }
                }
            }
            for (h, o) in hs.iter_mut().zip(&outs) {
                for (x, y) in h.iter_mut().zip(matvec(o, &layer.wo, d)) {
                    *x += y;
                }
            }
        }
        Ok(self.unembed(&hs[n - 1]))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy generation of `steps` tokens after `prompt`.
///
/// The prefill pass is always recorded without intervention. With a hook,
/// the head profile and anchors are derived from that record, and the
/// prompt is replayed with the text rows of the affected layers
/// re-anchored before decoding continues.
pub fn run_generation(model: &ToyModel, prompt: &[usize], steps: usize, hook: Option<&GenerationHook>) -> Result<Generation> {
    let cfg = &model.cfg;
    let layout = cfg.layout;
    if prompt.len() != layout.seq_len() {
        return Err(Error::Shape(format!("prompt has {} tokens, layout expects {}", prompt.len(), layout.seq_len())));
    }
    model.check_tokens(prompt)?;

    let s = layout.seq_len();
    let (nl, nh, hd) = (cfg.layers, cfg.heads, cfg.head_dim());
    let fresh = || (0..nl).map(|_| KvCache::default()).collect::<Vec<_>>();
    let mut cache = fresh();
    let mut attn = vec![0.0; nl * nh * s * s];
    let mut last = Vec::new();
    for (pos, &tok) in prompt.iter().enumerate() {
        let (logits, rows) = model.step(tok, &mut cache, None)?;
        for (l, heads) in rows.iter().enumerate() {
            for (h, row) in heads.iter().enumerate() {
                let off = (l * nh + h) * s * s + pos * s;
                attn[off..off + row.len()].copy_from_slice(row);
            }
        }
        last = logits;
    }
    let mut values = vec![0.0; nl * nh * s * hd];
    for (l, kv) in cache.iter().enumerate() {
        for h in 0..nh {
            for (pos, v) in kv.values.iter().enumerate() {
                let off = ((l * nh + h) * s + pos) * hd;
                values[off..off + hd].copy_from_slice(&v[h * hd..(h + 1) * hd]);
            }
        }
    }
    let meta = TraceMeta::new(format!("toy-l{nl}-h{nh}-d{}-seed{}", cfg.model_dim, cfg.seed));
    let prefill = AttentionTrace::new(nl, nh, hd, layout, attn, Some(values), meta)?;

    let mut profile_store = None;
    let mut anchors = None;
    let mut modulation = None;
    if let Some(hook) = hook {
        hook.cfg.validate(nl)?;
        if hook.cfg.placement != Placement::DecoderSelfAttention {
            return Err(Error::Config("the toy decoder only supports decoder self-attention placement".into()));
        }
        let p = profile(&prefill, hook.lambda_vis);
        let a = derive_anchor_set(&prefill, &p, &hook.anchors)?;
        if hook.cfg.anchor_refresh == AnchorRefresh::PerStep {
            let l = hook.anchors.layers;
            if !hook.cfg.layer_range.is_empty() && hook.cfg.layer_range.start <= l.l_mid.max(l.l_neg) {
                return Err(Error::Config("per-step anchor refresh needs every affected layer after both anchor layers".into()));
            }
        }
        anchors = Some(a);
        profile_store = Some(p);
    }
    if let (Some(hook), Some(a)) = (hook, &anchors) {
        let refresh = (hook.cfg.anchor_refresh == AnchorRefresh::PerStep)
            .then(|| Refresh { profile: profile_store.as_ref().expect("profiled"), params: hook.anchors });
        let mut m = Modulation {
            cfg: hook.cfg,
            layout,
            factors: hook.cfg.factors(&a.pos_mask, &a.neg_mask)?,
            pos_mask: a.pos_mask.clone(),
            neg_mask: a.neg_mask.clone(),
            refresh,
        };
        cache = fresh();
        for &tok in prompt {
            last = model.step(tok, &mut cache, Some(&mut m))?.0;
        }
        modulation = Some(m);
    }

    let mut tokens = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps);
    for step in 0..steps {
        let next = argmax(&last);
        tokens.push(next);
        logits.push(std::mem::take(&mut last));
        if step + 1 < steps {
            last = model.step(next, &mut cache, modulation.as_mut())?.0;
        }
    }
    Ok(Generation { tokens, logits, prefill, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs_and_tokens() {
        let cfg = ToyModelConfig { model_dim: 30, ..Default::default() };
        assert!(matches!(ToyModel::init(cfg), Err(Error::Config(_))));
        let m = ToyModel::init(ToyModelConfig::default()).unwrap();
        let mut prompt = m.sample_prompt(1);
        prompt[3] = 64;
        assert!(matches!(run_generation(&m, &prompt, 2, None), Err(Error::TokenOutOfVocab { token: 64, .. })));
        assert!(matches!(run_generation(&m, &prompt[..5], 2, None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_steps_records_prefill_only() {
        let m = ToyModel::init(ToyModelConfig::default()).unwrap();
        let g = run_generation(&m, &m.sample_prompt(3), 0, None).unwrap();
        assert!(g.tokens.is_empty());
        assert!(g.prefill.violations().is_empty());
        assert!(g.prefill.has_values());
        assert_eq!((g.prefill.layers(), g.prefill.heads(), g.prefill.head_dim()), (8, 4, 8));
    }
}
