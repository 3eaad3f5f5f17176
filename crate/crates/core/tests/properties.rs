// SPDX-License-Identifier: MIT OR Apache-2.0

use clva::anchors::zscore_mask;
use clva::diagnostics::{attention_entropy, pearson};
use clva::format::{decode, write_trace};
use clva::layout::TokenLayout;
use clva::profiler::{classify_heads, HeadIntensity};
use clva::reanchor::{modulate_row, RowTarget};
use clva::simulator::random_trace;
use proptest::prelude::*;

/// A probability row of length `n_ling + n_vis` with the visual block last.
fn row_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..6, 2usize..12).prop_flat_map(|(n_ling, n_vis)| {
        (prop::collection::vec(0.01f64..1.0, n_ling + n_vis), Just(n_ling))
    })
    .prop_map(|(raw, n_ling)| {
        let z: f64 = raw.iter().sum();
        (raw.iter().map(|a| a / z).collect(), n_ling)
    })
}

fn factors(pos: &[bool], neg: &[bool], alpha: f64, beta: f64) -> Vec<f64> {
    pos.iter()
        .zip(neg)
        .map(|(&p, &n)| (1.0 + if p { alpha } else { 0.0 } - if n { beta } else { 0.0 }).max(0.0))
        .collect()
}

fn apply(row: &[f64], n_ling: usize, pos: &[bool], neg: &[bool], alpha: f64, beta: f64) -> Vec<f64> {
    let f = factors(pos, neg, alpha, beta);
    let mut out = row.to_vec();
    modulate_row(&mut out, RowTarget { offset: n_ling, factors: &f, pos_mask: pos, neg_mask: neg }, 0);
    out
}

proptest! {
    #[test]
    fn layout_partitions_sequence(s in 0usize..50, v in 1usize..600, t in 1usize..40) {
        let lay = TokenLayout::build(s, v, t).unwrap();
        prop_assert_eq!(lay.sys().start, 0);
        prop_assert_eq!(lay.sys().end, lay.vis().start);
        prop_assert_eq!(lay.vis().end, lay.txt().start);
        prop_assert_eq!(lay.txt().end, lay.seq_len());
        prop_assert_eq!(lay.seq_len(), s + v + t);
    }

    #[test]
    fn format_round_trip_is_byte_stable(seed in any::<u64>(), l in 1usize..4, h in 1usize..4, d in prop::option::of(1usize..5)) {
        let t = random_trace(seed, l, h, TokenLayout::build(1, 3, 2).unwrap(), d);
        let mut a = Vec::new();
        write_trace(&t, &mut a).unwrap();
        let back = decode(&a).unwrap();
        let mut b = Vec::new();
        write_trace(&back, &mut b).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(decode(&b).unwrap(), back);
    }

    #[test]
    fn pearson_affine_invariant(x in prop::collection::vec(-5f64..5.0, 3..20), scale in 0.1f64..10.0, shift in -3f64..3.0, seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + ((seed >> (i % 60)) & 1) as f64).collect();
        prop_assume!(pearson(&x, &y).is_ok());
        let r = pearson(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let xn: Vec<f64> = x.iter().map(|v| -scale * v + shift).collect();
        prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&xn, &y).unwrap() + r).abs() < 1e-9);
    }

    #[test]
    fn entropy_permutation_invariant(mut m in prop::collection::vec(0f64..1.0, 2..30), rot in 0usize..30) {
        prop_assume!(m.iter().sum::<f64>() > 0.0);
        let h = attention_entropy(&m).unwrap();
        let k = rot % m.len();
        m.rotate_left(k);
        m.reverse();
        prop_assert!((attention_entropy(&m).unwrap() - h).abs() < 1e-12);
        prop_assert!(h >= 0.0 && h <= (m.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn mask_invariant_under_power_of_two_scaling(m in prop::collection::vec(0f64..1.0, 2..40), e in -4i32..5, tau in 0f64..3.0) {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = m.iter().map(|v| v * c).collect();
        prop_assert_eq!(zscore_mask(&m, tau, 0.0).unwrap().1, zscore_mask(&scaled, tau, 0.0).unwrap().1);
    }

    #[test]
    fn zscores_center_and_obey_chebyshev(m in prop::collection::vec(0f64..1.0, 2..200)) {
        let mu = m.iter().sum::<f64>() / m.len() as f64;
        prop_assume!(m.iter().any(|&v| (v - mu).abs() > 1e-6));
        let (z, mask) = zscore_mask(&m, 2.0, 0.0).unwrap();
        prop_assert!((z.iter().sum::<f64>() / z.len() as f64).abs() < 1e-9);
        prop_assert!((mask.iter().filter(|&&b| b).count() as f64) < m.len() as f64 / 4.0);
    }

    #[test]
    fn classification_commutes_with_head_permutation(phis in prop::collection::vec(0f64..1.0, 2..9), rot in 0usize..9, lambda in 0f64..2.0) {
        let n = phis.len();
        let k = rot % n;
        let perm: Vec<usize> = (0..n).map(|i| (i + k) % n).collect();
        let permuted: Vec<f64> = perm.iter().map(|&p| phis[p]).collect();
        let mk = |v: Vec<f64>| HeadIntensity { layers: 1, heads: n, prompt: vec![0.0; n], vis: v };
        let a = classify_heads(&mk(phis.clone()), lambda);
        let b = classify_heads(&mk(permuted), lambda);
        prop_assume!(!a.sens_fallback[0] && !a.insens_fallback[0]);
        let mut mapped: Vec<usize> = b.sens[0].iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.sens[0].clone());
        let mut mapped: Vec<usize> = b.insens[0].iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.insens[0].clone());
    }

    #[test]
    fn ratio_law_and_compounding((row, n_ling) in row_strategy(), alpha in 0f64..20.0, seed in any::<u64>()) {
        let n_vis = row.len() - n_ling;
        let pos: Vec<bool> = (0..n_vis).map(|k| (seed >> (k % 64)) & 1 == 1).collect();
        let neg = vec![false; n_vis];
        prop_assume!(pos.iter().any(|&p| p));
        let once = apply(&row, n_ling, &pos, &neg, alpha, 0.0);
        let twice = apply(&once, n_ling, &pos, &neg, alpha, 0.0);
        let j = n_ling + pos.iter().position(|&p| p).unwrap();
        for k in (0..row.len()).filter(|&k| k < n_ling || !pos[k - n_ling]) {
            let pre = row[j] / row[k];
            prop_assert!(((once[j] / once[k]) / pre - (1.0 + alpha)).abs() < 1e-9);
            prop_assert!(((twice[j] / twice[k]) / pre - (1.0 + alpha).powi(2)).abs() < 1e-9 * (1.0 + alpha).powi(2));
        }
    }

    #[test]
    fn linguistic_mass_falls_iff_pos_gain_beats_neg_loss((row, n_ling) in row_strategy(), alpha in 0f64..20.0, beta in 0f64..1.0, seed in any::<u64>()) {
        let n_vis = row.len() - n_ling;
        let pos: Vec<bool> = (0..n_vis).map(|k| (seed >> (k % 64)) & 1 == 1).collect();
        let neg: Vec<bool> = (0..n_vis).map(|k| (seed >> ((k + 17) % 64)) & 1 == 1).collect();
        let p: f64 = (0..n_vis).filter(|&k| pos[k]).map(|k| row[n_ling + k]).sum();
        let n: f64 = (0..n_vis).filter(|&k| neg[k]).map(|k| row[n_ling + k]).sum();
        let gap = alpha * p - beta * n;
        prop_assume!(gap.abs() > 1e-9);
        let out = apply(&row, n_ling, &pos, &neg, alpha, beta);
        let pre: f64 = row[..n_ling].iter().sum();
        let post: f64 = out[..n_ling].iter().sum();
        prop_assert_eq!(post < pre, gap > 0.0);
        prop_assert!(out.iter().all(|&a| a >= 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
