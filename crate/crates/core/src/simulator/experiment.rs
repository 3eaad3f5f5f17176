// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs: profile, derive anchors, intervene, re-measure.

use serde::{Deserialize, Serialize};

use crate::anchors::{derive_anchor_set, AnchorParams, AnchorSet};
use crate::diagnostics::{drift_report, DriftMetrics};
use crate::error::{Error, Result};
use crate::profiler::{profile, HeadProfile};
use crate::reanchor::{apply_to_trace, InterventionConfig, InterventionReport};
use crate::simulator::scenario::{make_scenario, DriftScenario};
use crate::trace::AttentionTrace;

/// Mean over heads of the attention mass that `row` of `layer` puts on the
/// given visual indices.
pub fn region_mass(trace: &AttentionTrace, layer: usize, row: usize, region: &[usize]) -> Result<f64> {
    trace.check_layer(layer)?;
    let vis = trace.layout().vis();
    if let Some(&j) = region.iter().find(|&&j| j >= vis.len()) {
        return Err(Error::Config(format!("region index {j} outside {} visual tokens", vis.len())));
    }
    let total: f64 = (0..trace.heads())
        .map(|h| {
            let r = trace.row(layer, h, row);
            region.iter().map(|&j| r[vis.start + j]).sum::<f64>()
        })
        .sum();
    Ok(total / trace.heads() as f64)
}

/// Everything produced by one pipeline run on a trace.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub profile: HeadProfile,
    pub anchors: AnchorSet,
    pub intervened: AttentionTrace,
    pub intervention: InterventionReport,
    pub pre: DriftMetrics,
    pub post: DriftMetrics,
}

/// Profiles `trace`, derives anchors, intervenes and recomputes drift
/// metrics on the result against the same anchors.
pub fn run_pipeline(
    trace: &AttentionTrace,
    cfg: &InterventionConfig,
    anchor_params: &AnchorParams,
    lambda_vis: f64,
) -> Result<PipelineRun> {
    let profile = profile(trace, lambda_vis);
    let anchors = derive_anchor_set(trace, &profile, anchor_params)?;
    let (intervened, intervention) = apply_to_trace(trace, &anchors, cfg)?;
    let pre = drift_report(trace, &anchors)?;
    let post = drift_report(&intervened, &anchors)?;
    Ok(PipelineRun { profile, anchors, intervened, intervention, pre, post })
}

/// Serializable summary of a scenario experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: DriftScenario,
    pub config: InterventionConfig,
    pub anchor_params: AnchorParams,
    pub lambda_vis: f64,
    /// Final-layer last-row ground-truth mass, mean over heads.
    pub pre_gt_mass: f64,
    pub post_gt_mass: f64,
    /// Final-layer correlation with the negative anchor.
    pub pre_r_neg_final: Option<f64>,
    pub post_r_neg_final: Option<f64>,
    pub profile: HeadProfile,
    pub anchors: AnchorSet,
    pub intervention: InterventionReport,
    pub pre: DriftMetrics,
    pub post: DriftMetrics,
}

/// Final-layer ground-truth mass and negative-anchor correlation.
pub fn final_layer_metrics(trace: &AttentionTrace, gt_region: &[usize], drift: &DriftMetrics) -> Result<(f64, Option<f64>)> {
    let mass = region_mass(trace, trace.layers() - 1, trace.layout().last_row(), gt_region)?;
    Ok((mass, drift.last_r_neg()))
}

/// Runs the whole pipeline on an already generated scenario trace.
pub fn run_experiment_on(
    scenario: &DriftScenario,
    trace: &AttentionTrace,
    cfg: &InterventionConfig,
    tau: f64,
    lambda_vis: f64,
) -> Result<(ExperimentReport, AttentionTrace)> {
    let anchor_params = AnchorParams::for_depth(trace.layers()).with_tau(tau);
    let run = run_pipeline(trace, cfg, &anchor_params, lambda_vis)?;
    let (pre_gt_mass, pre_r_neg_final) = final_layer_metrics(trace, &scenario.gt_region, &run.pre)?;
    let (post_gt_mass, post_r_neg_final) = final_layer_metrics(&run.intervened, &scenario.gt_region, &run.post)?;
    let report = ExperimentReport {
        scenario: scenario.clone(),
        config: *cfg,
        anchor_params,
        lambda_vis,
        pre_gt_mass,
        post_gt_mass,
        pre_r_neg_final,
        post_r_neg_final,
        profile: run.profile,
        anchors: run.anchors,
        intervention: run.intervention,
        pre: run.pre,
        post: run.post,
    };
    Ok((report, run.intervened))
}

/// Generates the scenario and runs the pipeline with default anchor layers.
pub fn run_experiment(scenario: &DriftScenario, cfg: &InterventionConfig, tau: f64, lambda_vis: f64) -> Result<ExperimentReport> {
    let trace = make_scenario(scenario)?;
    Ok(run_experiment_on(scenario, &trace, cfg, tau, lambda_vis)?.0)
}
