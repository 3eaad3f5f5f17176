// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grid sweep over intervention strengths.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reanchor::InterventionConfig;
use crate::simulator::{make_scenario, run_experiment_on, DriftScenario};
use crate::stats::sig9;

/// One `(alpha, beta)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub gt_mass: f64,
    pub r_neg: Option<f64>,
}

/// Evaluates every `(alpha, beta)` pair on `scenario`.
///
/// Cells run in parallel; rows come back sorted by `(alpha, beta)`.
pub fn run_sweep(
    scenario: &DriftScenario,
    alphas: &[f64],
    betas: &[f64],
    base: &InterventionConfig,
    tau: f64,
    lambda_vis: f64,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let trace = make_scenario(scenario)?;
    let cells: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    let mut rows = cells
        .par_iter()
        .map(|&(alpha, beta)| {
            let cfg = base.with_strengths(alpha, beta);
            let (r, _) = run_experiment_on(scenario, &trace, &cfg, tau, lambda_vis)?;
            Ok(SweepRow { alpha, beta, gt_mass: r.post_gt_mass, r_neg: r.post_r_neg_final })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|x, y| x.alpha.total_cmp(&y.alpha).then(x.beta.total_cmp(&y.beta)));
    Ok(rows)
}

/// Writes `alpha,beta,gt_mass,r_neg`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["alpha", "beta", "gt_mass", "r_neg"])?;
    for r in rows {
        w.write_record([sig9(r.alpha), sig9(r.beta), sig9(r.gt_mass), r.r_neg.map(sig9).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}
