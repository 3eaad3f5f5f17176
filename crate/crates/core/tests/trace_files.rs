// SPDX-License-Identifier: MIT OR Apache-2.0

use clva::format::{load, save, MAGIC};
use clva::prelude::*;
use clva::simulator::random_trace;

#[test]
fn file_round_trip_is_bit_identical() {
    let dir = std::env::temp_dir().join(format!("clva-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("t.clva");
    let t = random_trace(11, 2, 3, TokenLayout::build(2, 5, 3).unwrap(), Some(4));
    let n = save(&t, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(n, bytes.len());
    assert_eq!(&bytes[..8], MAGIC);
    let back = load(&path).unwrap();
    let path2 = dir.join("t2.clva");
    save(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path2).unwrap(), bytes);
    assert_eq!(load(&path2).unwrap(), back);
    for (a, b) in t.attention().iter().zip(back.attention()) {
        assert_eq!(*a as f32, *b as f32);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn scenario_trace_survives_the_file_format() {
    let sc = DriftScenario::default();
    let t = make_scenario(&sc).unwrap();
    let mut buf = Vec::new();
    write_trace(&t, &mut buf).unwrap();
    let back = read_trace(buf.as_slice()).unwrap();
    let a = run_experiment(&sc, &InterventionConfig::for_depth(8), 2.0, 1.0).unwrap();
    let b = clva::simulator::run_experiment_on(&sc, &back, &InterventionConfig::for_depth(8), 2.0, 1.0).unwrap().0;
    assert!((a.post_gt_mass - b.post_gt_mass).abs() < 1e-6);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load("/nonexistent/clva/trace.bin").unwrap_err();
    assert!(err.is_io());
}
