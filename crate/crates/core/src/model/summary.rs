//! Per-layer parameter and multiply-accumulate census.
//!
//! The census counts the contraction work (convolutions, matrix products)
//! plus elementwise products in the attention and normalization paths;
//! additions, resampling and activations are not multiply-accumulates. For a
//! transformer block the attention row is exactly the mechanism's cost
//! formula (`4*C^2*N + 2*C*N` for depth-wise self-attention).

use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct LayerRow {
    pub name: String,
    pub output: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SummarySink {
    pub rows: Vec<LayerRow>,
}

impl SummarySink {
    pub fn row(&mut self, name: &str, channels: usize, h: usize, w: usize, params: u64, macs: u64) {
        self.rows.push(LayerRow {
            name: name.to_string(),
            output: format!("{channels}x{h}x{w}"),
            params,
            macs,
        });
    }
}

#[derive(Clone, Debug)]
pub struct ModelSummary {
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub input_size: usize,
}

impl ModelSummary {
    pub fn new(rows: Vec<LayerRow>, input_size: usize) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        ModelSummary {
            rows,
            total_params,
            total_macs,
            input_size,
        }
    }

    /// Text table: layer name, output shape, params, MACs.
    pub fn render(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>12}  {:>12}  {:>14}",
            "layer", "output", "params", "macs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>12}  {:>12}  {:>14}",
                r.name, r.output, r.params, r.macs
            );
        }
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>12}  {:>12}  {:>14}",
            "total", "", self.total_params, self.total_macs
        );
        let _ = writeln!(
            out,
            "params: {:.3}M   flops: {:.3}G (multiply-accumulates at {}x{} input)",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9,
            self.input_size,
            self.input_size,
        );
        out
    }
}
