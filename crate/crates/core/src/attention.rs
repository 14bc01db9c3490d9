//! Where the last encoder and language-model layers put their attention,
//! aggregated by input region.

use std::collections::BTreeSet;
use std::path::Path;

use m2pt_tensor::{Tape, Var};
use serde::Serialize;

use crate::model::Graph;
use crate::pipeline::{forward, M2ptModel, Trace};
use crate::sequence::{Region, TokenSequence};
use crate::tasks::{Instance, SYSTEM};
use crate::trainer::example;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionMean {
    pub region: Region,
    pub start: usize,
    pub width: usize,
    /// Mean over the region's key columns of the attention they receive,
    /// itself averaged over heads and query rows.
    pub mean: f64,
}

/// Head-averaged probabilities of one layer for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub len: usize,
    /// Row-major `len x len`; row = query, column = key.
    pub probs: Vec<f64>,
    pub regions: Vec<RegionMean>,
}

impl AttentionMap {
    pub fn row_sums(&self) -> Vec<f64> {
        self.probs.chunks(self.len).map(|r| r.iter().sum()).collect()
    }

    /// `sum(width * mean)` over regions; 1 up to rounding.
    pub fn weighted_total(&self) -> f64 {
        self.regions.iter().map(|r| r.width as f64 * r.mean).sum()
    }

    pub fn region(&self, region: Region) -> Option<&RegionMean> {
        self.regions.iter().find(|r| r.region == region)
    }

    /// Dumps the raw map as CSV and the region legend beside it as
    /// `<stem>.legend.csv`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for row in self.probs.chunks(self.len) {
            w.write_record(row.iter().map(|p| format!("{p:.6e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let legend = path.with_extension("legend.csv");
        let mut w = csv::Writer::from_path(&legend)?;
        w.write_record(["region", "start", "end"])?;
        for r in &self.regions {
            w.write_record([r.region.name().to_string(), r.start.to_string(), (r.start + r.width).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(legend, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRegionReport {
    pub encoder: AttentionMap,
    pub llm: AttentionMap,
}

#[derive(Serialize)]
struct SummaryRow {
    tower: &'static str,
    region: Region,
    start: usize,
    width: usize,
    mean: f64,
}

impl AttentionRegionReport {
    /// One row per (tower, region).
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (tower, map) in [("encoder", &self.encoder), ("llm", &self.llm)] {
            for r in &map.regions {
                w.serialize(SummaryRow {
                    tower,
                    region: r.region,
                    start: r.start,
                    width: r.width,
                    mean: r.mean,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn region_map(tape: &Tape<f32>, attention: Var, seq: &TokenSequence, segment: usize) -> Result<AttentionMap> {
    let maps = tape
        .attention_maps(attention)
        .ok_or_else(|| Error::State("no attention probabilities were captured for this layer".into()))?;
    let layout = seq
        .layouts
        .get(segment)
        .ok_or_else(|| Error::State(format!("segment {segment} not in the batch")))?;
    let len = layout.len();
    if maps.segment_lens.get(segment) != Some(&len) {
        return Err(Error::State("captured map does not match the sequence layout".into()));
    }
    let probs: Vec<f64> = maps.mean_over_heads(segment).into_iter().map(f64::from).collect();
    let mut received = vec![0.0; len];
    for row in probs.chunks(len) {
        received.iter_mut().zip(row).for_each(|(r, &p)| *r += p);
    }
    received.iter_mut().for_each(|r| *r /= len as f64);
    let regions = layout
        .present()
        .into_iter()
        .map(|region| {
            let range = layout.range(region);
            let mean = received[range.clone()].iter().sum::<f64>() / range.len() as f64;
            RegionMean {
                region,
                start: range.start,
                width: range.len(),
                mean,
            }
        })
        .collect();
    Ok(AttentionMap { len, probs, regions })
}

impl AttentionRegionReport {
    /// Report for sequence `segment` of an already computed forward pass.
    pub fn from_trace(tape: &Tape<f32>, trace: &Trace, segment: usize) -> Result<Self> {
        let (enc_in, enc) = trace
            .encoder_inputs
            .last()
            .zip(trace.encoder_layers.last())
            .ok_or_else(|| Error::State("trace holds no encoder layers".into()))?;
        let (llm_in, llm) = trace
            .llm_inputs
            .last()
            .zip(trace.llm_layers.last())
            .ok_or_else(|| Error::State("trace holds no language-model layers".into()))?;
        Ok(AttentionRegionReport {
            encoder: region_map(tape, enc.attention, enc_in, segment)?,
            llm: region_map(tape, llm.attention, llm_in, segment)?,
        })
    }
}

/// Runs `instance` through the model, target included, and aggregates the
/// last-layer attention of both towers.
pub fn extract_attention_report(model: &M2ptModel, instance: &Instance) -> Result<AttentionRegionReport> {
    let none = BTreeSet::new();
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, &model.params, &none);
    let trace = forward(&mut g, &model.arch, &SYSTEM, &[example(instance)])?;
    AttentionRegionReport::from_trace(&tape, &trace, 0)
}
