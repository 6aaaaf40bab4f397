//! Per-layer latency lookup tables and the estimates built on them.
//!
//! Latencies are stored rounded to a dyadic grid of 2^-24 ms, so sums of
//! table entries are exact and independent of summation order.

mod bench;
mod io;

pub use bench::{build_table, host_bench, synthetic_bench, BenchSpec};
pub use io::{read_table, write_table, TABLE_HEADER};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::PruningScheme;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("no latency entry for {desc} under {scheme} at ratio {ratio}")]
    MissingEntry {
        desc: LayerDescriptor,
        scheme: SchemeKey,
        ratio: f64,
    },
    #[error("target {target} ms is not above the fixed latency {fixed} ms")]
    InfeasibleTarget { target: f64, fixed: f64 },
    #[error("required speedup {required:.4} unreachable: {}", describe(.layers))]
    Unreachable {
        required: f64,
        layers: Vec<InfeasibleLayer>,
    },
    #[error("benchmark failed for {desc} {scheme} ratio {ratio}: {reason}")]
    Bench {
        desc: LayerDescriptor,
        scheme: SchemeKey,
        ratio: f64,
        reason: String,
    },
    #[error("invalid ratio grid: {0}")]
    Grid(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("latency table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe(layers: &[InfeasibleLayer]) -> String {
    layers
        .iter()
        .map(|l| format!("layer {} ({} {}) reaches at most {:.4}x", l.index, l.desc, l.scheme, l.max_speedup))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibleLayer {
    pub index: usize,
    pub desc: LayerDescriptor,
    pub scheme: PruningScheme,
    pub max_speedup: f64,
}

const QUANTUM: f64 = 16_777_216.0; // 2^24 steps per ms

/// Rounds a latency onto the table's dyadic grid.
pub fn quantize_ms(ms: f64) -> f64 {
    (ms * QUANTUM).round() / QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    SkipAdd,
    PixelShuffle,
}

impl LayerType {
    pub fn name(self) -> &'static str {
        match self {
            LayerType::Conv1x1 => "conv1x1",
            LayerType::Conv3x3 => "conv3x3",
            LayerType::Conv5x5 => "conv5x5",
            LayerType::SkipAdd => "skip_add",
            LayerType::PixelShuffle => "pixel_shuffle",
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            LayerType::Conv1x1 => Some(1),
            LayerType::Conv3x3 => Some(3),
            LayerType::Conv5x5 => Some(5),
            _ => None,
        }
    }

    pub fn conv(kernel: usize) -> Option<Self> {
        match kernel {
            1 => Some(LayerType::Conv1x1),
            3 => Some(LayerType::Conv3x3),
            5 => Some(LayerType::Conv5x5),
            _ => None,
        }
    }

    pub fn prunable(self) -> bool {
        self.kernel().is_some()
    }
}

impl FromStr for LayerType {
    type Err = LatencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "conv1x1" => LayerType::Conv1x1,
            "conv3x3" => LayerType::Conv3x3,
            "conv5x5" => LayerType::Conv5x5,
            "skip_add" => LayerType::SkipAdd,
            "pixel_shuffle" => LayerType::PixelShuffle,
            other => return Err(LatencyError::Invalid(format!("unknown layer type {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub layer_type: LayerType,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerDescriptor {
    pub fn new(layer_type: LayerType, in_ch: usize, out_ch: usize, h: usize, w: usize) -> Result<Self, LatencyError> {
        if in_ch == 0 || out_ch == 0 || h == 0 || w == 0 {
            return Err(LatencyError::Invalid(format!(
                "{} with zero dimension ({in_ch}->{out_ch}, {h}x{w})",
                layer_type.name()
            )));
        }
        Ok(Self {
            layer_type,
            in_ch,
            out_ch,
            h,
            w,
        })
    }

    /// Multiply-accumulates of a dense forward pass (element ops otherwise).
    pub fn macs(&self) -> usize {
        match self.layer_type.kernel() {
            Some(k) => self.out_ch * self.in_ch * k * k * self.h * self.w,
            None => self.out_ch * self.h * self.w,
        }
    }
}

impl fmt::Display for LayerDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}->{} @{}x{}",
            self.layer_type.name(),
            self.in_ch,
            self.out_ch,
            self.h,
            self.w
        )
    }
}

/// Dense execution or one of the pruning schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKey {
    Dense,
    Sparse(PruningScheme),
}

impl SchemeKey {
    pub fn from_scheme(s: Option<PruningScheme>) -> Self {
        s.map_or(SchemeKey::Dense, SchemeKey::Sparse)
    }
}

impl fmt::Display for SchemeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKey::Dense => f.write_str("dense"),
            SchemeKey::Sparse(s) => f.write_str(s.name()),
        }
    }
}

impl FromStr for SchemeKey {
    type Err = LatencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "dense" {
            return Ok(SchemeKey::Dense);
        }
        s.parse::<PruningScheme>()
            .map(SchemeKey::Sparse)
            .map_err(|e| LatencyError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Measured,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Measured => "measured",
            Provenance::Synthetic => "synthetic",
        })
    }
}

pub const DEFAULT_GRID: [f64; 10] = [0.0, 0.3, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub fn validate_grid(grid: &[f64]) -> Result<(), LatencyError> {
    if grid.is_empty() {
        return Err(LatencyError::Grid("empty".into()));
    }
    if grid.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(LatencyError::Grid(format!("ratios must lie in [0, 1): {grid:?}")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LatencyError::Grid(format!("ratios must be strictly increasing: {grid:?}")));
    }
    Ok(())
}

const RATIO_EPS: f64 = 1e-9;

/// Latency by (descriptor, scheme, ratio).
///
/// Dense latency is stored once per descriptor under [`SchemeKey::Dense`];
/// ratio 0 of any scheme resolves to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    pub device: String,
    pub provenance: Provenance,
    pub grid: Vec<f64>,
    entries: BTreeMap<(LayerDescriptor, SchemeKey), Vec<(f64, f64)>>,
}

impl LatencyTable {
    pub fn new(device: impl Into<String>, provenance: Provenance, grid: Vec<f64>) -> Result<Self, LatencyError> {
        validate_grid(&grid)?;
        Ok(Self {
            device: device.into(),
            provenance,
            grid,
            entries: BTreeMap::new(),
        })
    }

    /// Inserts or replaces an entry; the latency is quantized.
    pub fn insert(&mut self, desc: LayerDescriptor, scheme: SchemeKey, ratio: f64, ms: f64) {
        let (scheme, ratio) = if ratio == 0.0 { (SchemeKey::Dense, 0.0) } else { (scheme, ratio) };
        let series = self.entries.entry((desc, scheme)).or_default();
        let ms = quantize_ms(ms);
        match series.iter_mut().find(|(r, _)| (r - ratio).abs() < RATIO_EPS) {
            Some(slot) => slot.1 = ms,
            None => {
                series.push((ratio, ms));
                series.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        let mut d: Vec<_> = self.entries.keys().map(|k| k.0).collect();
        d.dedup();
        d
    }

    /// Every entry as `(descriptor, scheme, ratio, ms)`, sorted.
    pub fn entries(&self) -> impl Iterator<Item = (LayerDescriptor, SchemeKey, f64, f64)> + '_ {
        self.entries
            .iter()
            .flat_map(|(&(d, s), series)| series.iter().map(move |&(r, ms)| (d, s, r, ms)))
    }

    pub fn dense(&self, desc: &LayerDescriptor) -> Result<f64, LatencyError> {
        self.entries
            .get(&(*desc, SchemeKey::Dense))
            .and_then(|s| s.first().map(|e| e.1))
            .ok_or(LatencyError::MissingEntry {
                desc: *desc,
                scheme: SchemeKey::Dense,
                ratio: 0.0,
            })
    }

    /// Sparse series of a scheme, with the dense entry prepended as ratio 0.
    pub fn series(&self, desc: &LayerDescriptor, scheme: PruningScheme) -> Result<Vec<(f64, f64)>, LatencyError> {
        let mut out = vec![(0.0, self.dense(desc)?)];
        if let Some(s) = self.entries.get(&(*desc, SchemeKey::Sparse(scheme))) {
            out.extend(s.iter().copied());
        }
        Ok(out)
    }

    /// Latency at `ratio`. Off-grid ratios use the largest tabulated ratio
    /// not above it, which never under-estimates a non-increasing series.
    pub fn lookup(&self, desc: &LayerDescriptor, scheme: SchemeKey, ratio: f64) -> Result<f64, LatencyError> {
        match scheme {
            SchemeKey::Sparse(s) if ratio > 0.0 => {
                let series = self.series(desc, s)?;
                series
                    .iter()
                    .rev()
                    .find(|(r, _)| *r <= ratio + RATIO_EPS)
                    .map(|e| e.1)
                    .ok_or(LatencyError::MissingEntry {
                        desc: *desc,
                        scheme,
                        ratio,
                    })
            }
            _ => self.dense(desc),
        }
    }

    /// Clamps every series to be non-increasing in ratio; returns the number
    /// of entries changed.
    pub fn enforce_monotone(&mut self) -> usize {
        let dense: BTreeMap<LayerDescriptor, f64> = self
            .entries
            .iter()
            .filter(|((_, s), _)| *s == SchemeKey::Dense)
            .filter_map(|((d, _), v)| v.first().map(|e| (*d, e.1)))
            .collect();
        let mut changed = 0;
        for ((desc, scheme), series) in self.entries.iter_mut() {
            if *scheme == SchemeKey::Dense {
                continue;
            }
            let mut floor = dense.get(desc).copied().unwrap_or(f64::INFINITY);
            for (r, ms) in series.iter_mut() {
                if *ms > floor {
                    log::warn!("latency of {desc} {scheme} at ratio {r} raised above a lower ratio; clamped to {floor} ms");
                    *ms = floor;
                    changed += 1;
                }
                floor = *ms;
            }
        }
        changed
    }

    pub fn is_monotone(&self) -> bool {
        self.entries.iter().all(|((desc, scheme), series)| {
            let start = match scheme {
                SchemeKey::Dense => f64::INFINITY,
                SchemeKey::Sparse(_) => self.dense(desc).unwrap_or(f64::INFINITY),
            };
            series
                .iter()
                .try_fold(start, |prev, &(_, ms)| (ms <= prev).then_some(ms))
                .is_some()
        })
    }
}

/// One layer of a model as seen by the latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelLayer {
    pub desc: LayerDescriptor,
    /// `None` for layers that always run dense.
    pub scheme: Option<PruningScheme>,
    pub ratio: f64,
}

impl ModelLayer {
    pub fn dense(desc: LayerDescriptor) -> Self {
        Self {
            desc,
            scheme: None,
            ratio: 0.0,
        }
    }

    pub fn key(&self) -> SchemeKey {
        SchemeKey::from_scheme(self.scheme)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEstimate {
    pub total_ms: f64,
    pub per_layer_ms: Vec<f64>,
    pub overhead_ms: f64,
}

/// `overhead + Σ per-layer latency`.
pub fn estimate(layers: &[ModelLayer], table: &LatencyTable, overhead_ms: f64) -> Result<LatencyEstimate, LatencyError> {
    let per_layer = layers
        .iter()
        .map(|l| table.lookup(&l.desc, l.key(), l.ratio))
        .collect::<Result<Vec<_>, _>>()?;
    let overhead_ms = quantize_ms(overhead_ms);
    let total_ms = per_layer.iter().fold(overhead_ms, |acc, v| acc + v);
    Ok(LatencyEstimate {
        total_ms,
        per_layer_ms: per_layer,
        overhead_ms,
    })
}

/// Largest cell count whose dense latency fits the target, at least 1.
///
/// Each entry of `cell_templates` lists the layers of one block type; a cell
/// costs as much as its slowest block.
pub fn determine_cell_count(
    table: &LatencyTable,
    cell_templates: &[Vec<LayerDescriptor>],
    overhead_ms: f64,
    target_ms: f64,
) -> Result<usize, LatencyError> {
    let overhead_ms = quantize_ms(overhead_ms);
    if target_ms <= overhead_ms {
        return Err(LatencyError::InfeasibleTarget {
            target: target_ms,
            fixed: overhead_ms,
        });
    }
    let mut per_cell: f64 = 0.0;
    for template in cell_templates {
        let mut cost = 0.0;
        for d in template {
            cost += table.dense(d)?;
        }
        per_cell = per_cell.max(cost);
    }
    if per_cell <= 0.0 {
        return Err(LatencyError::Invalid("per-cell latency must be positive".into()));
    }
    let mut n = 1;
    let mut total = overhead_ms + per_cell;
    while total + per_cell <= target_ms {
        total += per_cell;
        n += 1;
    }
    Ok(n)
}

/// `(t' − F) / (t − F)`: the uniform per-layer speedup that brings the
/// prunable part of a model with dense latency `t'` and fixed part `F` to `t`.
pub fn required_speedup(dense_ms: f64, target_ms: f64, fixed_ms: f64) -> Result<f64, LatencyError> {
    if target_ms <= fixed_ms || target_ms <= 0.0 {
        return Err(LatencyError::InfeasibleTarget {
            target: target_ms,
            fixed: fixed_ms,
        });
    }
    Ok((dense_ms - fixed_ms) / (target_ms - fixed_ms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioPlan {
    pub required_speedup: f64,
    pub dense_ms: f64,
    /// One ratio per input layer; 0 for dense-only layers.
    pub ratios: Vec<f64>,
    pub estimate: LatencyEstimate,
}

impl RatioPlan {
    pub fn layers(&self, layers: &[ModelLayer]) -> Vec<ModelLayer> {
        layers
            .iter()
            .zip(&self.ratios)
            .map(|(l, &ratio)| ModelLayer { ratio, ..*l })
            .collect()
    }
}

/// Smallest per-layer grid ratios meeting the uniform required speedup.
///
/// The result is verified against [`estimate`]; if grid rounding leaves the
/// total above `target_ms`, the slowest layers are pushed to their next grid
/// ratio until it fits. Layers with `scheme == None` stay dense.
pub fn min_pruning_ratios(
    layers: &[ModelLayer],
    table: &LatencyTable,
    overhead_ms: f64,
    target_ms: f64,
) -> Result<RatioPlan, LatencyError> {
    if target_ms <= 0.0 {
        return Err(LatencyError::Invalid(format!("target {target_ms} ms must be positive")));
    }
    let dense_layers: Vec<ModelLayer> = layers.iter().map(|l| ModelLayer { ratio: 0.0, ..*l }).collect();
    let dense = estimate(&dense_layers, table, overhead_ms)?;
    let fixed = dense_layers
        .iter()
        .zip(&dense.per_layer_ms)
        .filter(|(l, _)| l.scheme.is_none())
        .fold(dense.overhead_ms, |acc, (_, v)| acc + v);
    let s = required_speedup(dense.total_ms, target_ms, fixed)?;
    let mut ratios = vec![0.0; layers.len()];
    if s <= 1.0 {
        return Ok(RatioPlan {
            required_speedup: s,
            dense_ms: dense.total_ms,
            ratios,
            estimate: dense,
        });
    }
    let mut series = Vec::with_capacity(layers.len());
    let mut infeasible = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        let Some(scheme) = l.scheme else {
            series.push(Vec::new());
            continue;
        };
        let sr = table.series(&l.desc, scheme)?;
        let d = sr[0].1;
        match sr.iter().position(|&(_, ms)| d / ms >= s) {
            Some(pos) => ratios[i] = sr[pos].0,
            None => infeasible.push(InfeasibleLayer {
                index: i,
                desc: l.desc,
                scheme,
                max_speedup: sr.iter().map(|&(_, ms)| d / ms).fold(0.0, f64::max),
            }),
        }
        series.push(sr);
    }
    if !infeasible.is_empty() {
        return Err(LatencyError::Unreachable {
            required: s,
            layers: infeasible,
        });
    }
    loop {
        let planned: Vec<ModelLayer> = layers
            .iter()
            .zip(&ratios)
            .map(|(l, &ratio)| ModelLayer { ratio, ..*l })
            .collect();
        let est = estimate(&planned, table, overhead_ms)?;
        if est.total_ms <= target_ms {
            return Ok(RatioPlan {
                required_speedup: s,
                dense_ms: dense.total_ms,
                ratios,
                estimate: est,
            });
        }
        // rounding slack: advance the slowest layer that can still go further
        let bump = (0..layers.len())
            .filter(|&i| {
                let sr = &series[i];
                !sr.is_empty() && sr.iter().any(|(r, ms)| *r > ratios[i] && *ms < est.per_layer_ms[i])
            })
            .max_by(|&a, &b| est.per_layer_ms[a].total_cmp(&est.per_layer_ms[b]).then(b.cmp(&a)));
        match bump {
            Some(i) => {
                let next = series[i]
                    .iter()
                    .find(|(r, ms)| *r > ratios[i] && *ms < est.per_layer_ms[i])
                    .expect("filtered above");
                ratios[i] = next.0;
            }
            None => {
                return Err(LatencyError::Unreachable {
                    required: s,
                    layers: layers
                        .iter()
                        .enumerate()
                        .filter_map(|(i, l)| {
                            l.scheme.map(|scheme| InfeasibleLayer {
                                index: i,
                                desc: l.desc,
                                scheme,
                                max_speedup: series[i].iter().map(|&(_, ms)| series[i][0].1 / ms).fold(0.0, f64::max),
                            })
                        })
                        .collect(),
                })
            }
        }
    }
}
