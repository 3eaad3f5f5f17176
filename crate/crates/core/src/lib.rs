// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-layer visual anchors for multimodal attention.
//!
//! The crate reads per-head attention recorded from a multimodal decoder,
//! finds the heads that look at the image, extracts a *positive* anchor
//! (what mid-depth sensitive heads attend to) and a *negative* anchor
//! (what first-layer insensitive heads attend to), and re-weights the
//! text-to-image attention of deeper layers toward the former and away
//! from the latter.
//!
//! Pipeline stages, in order:
//!
//! - [`trace`] / [`format`]: attention container and its binary file format
//! - [`profiler`]: per-head visual intensity and head classification
//! - [`anchors`]: saliency maps, z-scores and binary anchor masks
//! - [`reanchor`]: the modulation itself, plus ablation modes
//! - [`diagnostics`]: entropy, Pearson drift curves, output decomposition
//! - [`simulator`]: toy decoder, drift scenarios, end-to-end experiments
//!
//! ```
//! use clva::prelude::*;
//!
//! let scenario = DriftScenario::default();
//! let cfg = InterventionConfig::for_depth(scenario.layers);
//! let report = run_experiment(&scenario, &cfg, DEFAULT_TAU, DEFAULT_LAMBDA_VIS).unwrap();
//! assert!(report.post_gt_mass > report.pre_gt_mass);
//! ```

// negated float comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod diagnostics;
pub mod error;
pub mod format;
pub mod layout;
pub mod profiler;
pub mod reanchor;
pub mod render;
pub mod simulator;
pub mod stats;
pub mod sweep;
pub mod trace;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::anchors::{
        derive_anchor_set, extract_saliency, zscore_mask, AnchorLayers, AnchorParams, AnchorSet, SaliencyMap,
        DEFAULT_EPSILON, DEFAULT_TAU,
    };
    pub use crate::diagnostics::{attention_entropy, drift_report, output_decomposition, pearson, DriftMetrics};
    pub use crate::error::{Error, Result};
    pub use crate::format::{read_trace, write_trace};
    pub use crate::layout::{Span, TokenLayout};
    pub use crate::profiler::{classify_heads, head_intensity, profile, HeadIntensity, HeadProfile, DEFAULT_LAMBDA_VIS};
    pub use crate::reanchor::{
        apply_to_trace, reanchor_attention, reanchor_averaged, AnchorRefresh, InterventionConfig, LayerRange,
        Placement, SignMode, DEFAULT_ALPHA, DEFAULT_BETA,
    };
    pub use crate::simulator::{
        make_scenario, run_experiment, run_generation, DriftScenario, GenerationHook, ToyModel, ToyModelConfig,
    };
    pub use crate::trace::{AttentionTrace, TraceMeta};
}
