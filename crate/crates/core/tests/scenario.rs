// SPDX-License-Identifier: MIT OR Apache-2.0

use clva::anchors::{extract_saliency, AnchorLayers, AnchorParams};
use clva::diagnostics::drift_report_with;
use clva::prelude::*;
use clva::render::render_heatmap;
use clva::simulator::{region_mass, run_experiment_on};

fn default_run() -> (DriftScenario, AttentionTrace, HeadProfile, clva::anchors::AnchorSet) {
    let sc = DriftScenario::default();
    let t = make_scenario(&sc).unwrap();
    let p = profile(&t, DEFAULT_LAMBDA_VIS);
    let a = derive_anchor_set(&t, &p, &AnchorParams::for_depth(sc.layers)).unwrap();
    (sc, t, p, a)
}

#[test]
fn anchor_layers_for_common_depths() {
    assert_eq!(AnchorLayers::for_depth(32), AnchorLayers { l_mid: 13, l_neg: 0 });
    assert_eq!(AnchorLayers::for_depth(8), AnchorLayers { l_mid: 1, l_neg: 0 });
}

#[test]
fn classification_recovers_designated_heads() {
    let (sc, _, p, _) = default_run();
    let l_mid = AnchorLayers::for_depth(sc.layers).l_mid;
    assert_eq!(p.sens[l_mid], vec![1]);
    assert!(!p.sens_fallback[l_mid]);
    assert_eq!(p.insens[0], vec![2]);
}

#[test]
fn anchors_land_on_the_constructed_regions() {
    let (sc, _, _, a) = default_run();
    assert_eq!(a.pos_map.argmax(), Some(5));
    assert!(a.pos_indices().iter().any(|j| sc.gt_region.contains(j)));
    assert!(a.neg_indices().iter().any(|j| sc.noise_region.contains(j)));
    assert!(a.pos_indices().iter().all(|j| !sc.noise_region.contains(j)));
}

#[test]
fn negative_anchor_correlates_perfectly_with_itself() {
    let (_, t, p, a) = default_run();
    let m = drift_report_with(&t, &a, |l| p.insens[l].clone()).unwrap();
    assert!((m.r_neg[0].unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn full_drift_reproduces_the_noise_prior() {
    let sc = DriftScenario { jitter: 0.0, ..DriftScenario::default().with_gamma_max(1.0) };
    let t = make_scenario(&sc).unwrap();
    let p = profile(&t, DEFAULT_LAMBDA_VIS);
    let a = derive_anchor_set(&t, &p, &AnchorParams::for_depth(sc.layers)).unwrap();
    let m = drift_report_with(&t, &a, |l| sc.sens_heads[l].clone()).unwrap();
    assert!((m.r_neg[sc.layers - 1].unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn drift_rises_with_depth() {
    let (sc, t, _, a) = default_run();
    let m = drift_report_with(&t, &a, |l| sc.sens_heads[l].clone()).unwrap();
    let l_mid = a.l_mid;
    let r: Vec<f64> = m.r_neg.iter().map(|r| r.unwrap()).collect();
    assert!(r[l_mid..].windows(2).all(|w| w[0] <= w[1] + 1e-12), "{r:?}");
    assert!(r[sc.layers - 1] > 0.9);
}

#[test]
fn without_drift_intervention_keeps_focus_on_ground_truth() {
    let sc = DriftScenario::default().with_gamma_max(0.0);
    let t = make_scenario(&sc).unwrap();
    let cfg = InterventionConfig::for_depth(sc.layers);
    let (report, after) = run_experiment_on(&sc, &t, &cfg, DEFAULT_TAU, DEFAULT_LAMBDA_VIS).unwrap();
    let last = sc.layers - 1;
    let map = extract_saliency(&after, last, &sc.sens_heads[last], t.layout().last_row()).unwrap();
    assert!(sc.gt_region.contains(&map.argmax().unwrap()));
    assert!(report.post_gt_mass >= report.pre_gt_mass);
}

#[test]
fn untouched_layers_are_bit_identical() {
    let (sc, t, _, a) = default_run();
    let cfg = InterventionConfig::for_depth(sc.layers);
    let (after, rep) = apply_to_trace(&t, &a, &cfg).unwrap();
    for l in 0..sc.layers {
        for h in 0..sc.heads {
            let (x, y) = (t.head(l, h), after.head(l, h));
            if !cfg.layer_range.contains(l) {
                assert_eq!(x, y);
            }
            for i in 0..t.seq_len() {
                if !t.layout().txt().contains(i) {
                    assert_eq!(t.row(l, h, i), after.row(l, h, i));
                }
            }
        }
    }
    assert_eq!(rep.touched_layers(), cfg.layer_range.range().collect::<Vec<_>>());
}

#[test]
fn heatmap_brightest_pixel_is_ground_truth() {
    let (_, _, _, a) = default_run();
    let px = render_heatmap(&a.pos_map.values, 4, 4, Vec::new()).unwrap();
    let max = *px.iter().max().unwrap();
    assert_eq!(px.iter().position(|&p| p == max), Some(5));
    assert_eq!(max, 255);
}

#[test]
fn region_mass_adds_up() {
    let (sc, t, _, _) = default_run();
    let vis: Vec<usize> = (0..sc.n_vis).collect();
    let total = region_mass(&t, 0, t.layout().last_row(), &vis).unwrap();
    let parts: f64 = (0..sc.n_vis).map(|j| region_mass(&t, 0, t.layout().last_row(), &[j]).unwrap()).sum();
    assert!((total - parts).abs() < 1e-12);
}
