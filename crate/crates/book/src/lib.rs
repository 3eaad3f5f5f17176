// SPDX-License-Identifier: MIT OR Apache-2.0

//! Compiles every chapter of the guide as doc-tests, so the snippets in
//! `book/src` stay in sync with the library.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/traces.md")]
pub mod traces {}
#[doc = include_str!("../../../book/src/profiling.md")]
pub mod profiling {}
#[doc = include_str!("../../../book/src/anchors.md")]
pub mod anchors {}
#[doc = include_str!("../../../book/src/reanchoring.md")]
pub mod reanchoring {}
#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
