//! Layer-by-component grid of fused scores with top-half markers.

use std::collections::BTreeMap;

use super::analysis::AnalysisReport;
use super::HarnessError;
use crate::archmap::ComponentKind;
use crate::canonical;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub components: Vec<ComponentKind>,
    pub layers: usize,
    /// `values[row][layer]`: fused score min-max normalized within the row;
    /// `NaN` where the report has no tensor for that cell.
    pub values: Vec<Vec<f64>>,
    pub top_mask: Vec<Vec<bool>>,
}

fn normalize_row(raw: &[f64]) -> Vec<f64> {
    let present = raw.iter().copied().filter(|v| !v.is_nan());
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    raw.iter()
        .map(|&v| match v {
            v if v.is_nan() => v,
            _ if hi > lo => (v - lo) / (hi - lo),
            _ => 0.5,
        })
        .collect()
}

/// Highest `⌈L/2⌉` cells, ties to the lower layer.
fn top_half(values: &[f64]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&l| !values[l].is_nan()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut mask = vec![false; values.len()];
    for &l in order.iter().take(values.len().div_ceil(2)) {
        mask[l] = true;
    }
    mask
}

pub fn heatmap(report: &AnalysisReport) -> Result<HeatmapTable> {
    let mut cells: BTreeMap<ComponentKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for row in &report.rows {
        if let (true, Some(layer)) = (ComponentKind::LAYERED.contains(&row.component), row.layer) {
            cells
                .entry(row.component)
                .or_default()
                .entry(layer)
                .or_default()
                .push(row.fused);
        }
    }
    let layers = cells
        .values()
        .flat_map(|m| m.keys())
        .max()
        .map(|&l| l + 1)
        .ok_or(HarnessError::NoLayeredComponents)?;
    let mut table = HeatmapTable {
        components: Vec::new(),
        layers,
        values: Vec::new(),
        top_mask: Vec::new(),
    };
    for (kind, by_layer) in cells {
        let raw: Vec<f64> = (0..layers)
            .map(|l| match by_layer.get(&l) {
                Some(v) => v.iter().sum::<f64>() / v.len() as f64,
                None => f64::NAN,
            })
            .collect();
        let values = normalize_row(&raw);
        table.top_mask.push(top_half(&values));
        table.values.push(values);
        table.components.push(kind);
    }
    Ok(table)
}

impl HeatmapTable {
    /// Long-format CSV: `component,layer,fused_score,top50`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["component", "layer", "fused_score", "top50"])
            .expect("in-memory write");
        for (i, kind) in self.components.iter().enumerate() {
            for l in 0..self.layers {
                w.write_record([
                    kind.as_str().to_string(),
                    l.to_string(),
                    canonical::format_float(self.values[i][l]),
                    self.top_mask[i][l].to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
