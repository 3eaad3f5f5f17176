// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grayscale heatmaps of saliency maps as binary PGM (P5) rasters.

use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::profiler::HeadProfile;

/// Which heads of a layer feed a heatmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSelector {
    All,
    Sensitive,
    Insensitive,
    List(Vec<usize>),
}

impl HeadSelector {
    pub fn resolve(&self, profile: &HeadProfile, layer: usize) -> Vec<usize> {
        match self {
            HeadSelector::All => (0..profile.intensity.heads).collect(),
            HeadSelector::Sensitive => profile.sens[layer].clone(),
            HeadSelector::Insensitive => profile.insens[layer].clone(),
            HeadSelector::List(v) => v.clone(),
        }
    }
}

impl FromStr for HeadSelector {
    type Err = Error;

    /// `all`, `sensitive`, `insensitive`, or a comma-separated head list.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "sensitive" | "sens" => Ok(Self::Sensitive),
            "insensitive" | "insens" => Ok(Self::Insensitive),
            list => list
                .split(',')
                .map(|h| h.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Self::List)
                .map_err(|_| Error::Config(format!("bad head selector {s:?}"))),
        }
    }
}

/// Min-max scales `map` to bytes: `round(255 * (m - min) / (max - min))`.
/// A constant map renders black.
pub fn scale_to_gray(map: &[f64]) -> Vec<u8> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    map.iter()
        .map(|&m| if range > 0.0 { (255.0 * (m - min) / range).round() as u8 } else { 0 })
        .collect()
}

/// Writes `map` as a `rows x cols` P5 image and returns its pixels.
pub fn render_heatmap<W: Write>(map: &[f64], rows: usize, cols: usize, mut sink: W) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || rows * cols != map.len() {
        return Err(Error::Grid { rows, cols, n: map.len() });
    }
    let pixels = scale_to_gray(map);
    write!(sink, "P5\n{cols} {rows}\n255\n")?;
    sink.write_all(&pixels)?;
    sink.flush()?;
    Ok(pixels)
}

/// Near-square grid for `n` tokens: the largest divisor `r <= sqrt(n)`.
pub fn square_grid(n: usize) -> (usize, usize) {
    let mut r = (n as f64).sqrt() as usize;
    while r > 1 && !n.is_multiple_of(r) {
        r -= 1;
    }
    let r = r.max(1);
    (r, n / r)
}
