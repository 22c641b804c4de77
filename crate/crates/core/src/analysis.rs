//! Parameter, size and FLOP accounting over a [`LayerGraph`].
//!
//! Model size counts conv weights and biases plus the four batch-norm
//! values per channel, 4 bytes each, in MiB. BFLOPS counts 2 FLOPs per
//! conv multiply-accumulate plus one op per output element for each batch
//! norm, activation, residual add and upsample.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fr::stage_exponent;
use crate::network::{build_network, BlockKind, LayerGraph, NetworkConfig, NodeKind, Section, Weights};

const BYTES_PER_PARAM: f64 = 4.0;
const MIB: f64 = 1_048_576.0;

/// Model size (MB) and BFLOPS of the squeeze-ratio table, k = 1..7.
pub const REFERENCE_SWEEP: [(u32, f64, f64); 7] = [
    (1, 187.12, 48.52),
    (2, 146.95, 36.825),
    (3, 126.87, 30.977),
    (4, 116.82, 28.053),
    (5, 111.8, 26.591),
    (6, 109.29, 25.86),
    (7, 108.04, 25.494),
];

pub fn bytes_to_mb(params: u64) -> f64 {
    params as f64 * BYTES_PER_PARAM / MIB
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub id: usize,
    pub name: String,
    pub kind: &'static str,
    pub section: String,
    /// `[C, H, W]` of the node's output.
    pub output: [usize; 3],
    pub params_conv: u64,
    pub params_total: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionReport {
    pub section: String,
    pub params_conv: u64,
    pub params_total: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub input_size: usize,
    pub nodes: Vec<NodeReport>,
    pub sections: Vec<SectionReport>,
    pub params_conv: u64,
    pub params_total: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
    pub model_size_mb: f64,
    pub model_size_conv_mb: f64,
    pub bflops: f64,
}

impl AnalysisReport {
    pub fn conv_bflops(&self) -> f64 {
        2.0 * self.macs as f64 / 1e9
    }
}

fn node_report(graph: &LayerGraph, id: usize, input_size: usize) -> NodeReport {
    let node = &graph.nodes[id];
    let side = input_size / node.stride;
    let in_side = node.inputs.first().map_or(side, |&p| input_size / graph.nodes[p].stride);
    let outputs = (node.out_channels * side * side) as u64;
    let convs = node.kind.convs();
    let params_conv: u64 = convs.iter().map(|c| c.conv_params()).sum();
    let params_total = params_conv + convs.iter().map(|c| c.bn_params()).sum::<u64>();
    let mut macs = 0;
    let mut elementwise_ops = 0;
    match &node.kind {
        NodeKind::Conv(c) => {
            macs = c.macs(in_side, in_side);
            elementwise_ops = c.elementwise_ops(in_side, in_side);
        }
        NodeKind::Fr(m) => {
            let [sq, e1, e3] = m.convs();
            macs = sq.macs(side, side) + e1.macs(side, side) + e3.macs(side, side);
            elementwise_ops = sq.elementwise_ops(side, side) + e1.elementwise_ops(side, side) + e3.elementwise_ops(side, side);
            if m.residual {
                elementwise_ops += outputs;
            }
        }
        NodeKind::Residual(b) => {
            let [r, e] = b.convs();
            macs = r.macs(side, side) + e.macs(side, side);
            elementwise_ops = r.elementwise_ops(side, side) + e.elementwise_ops(side, side) + outputs;
        }
        NodeKind::Upsample => elementwise_ops = outputs,
        NodeKind::Input | NodeKind::Concat | NodeKind::Detect(_) => {}
    }
    NodeReport {
        id,
        name: node.name.clone(),
        kind: node.kind.label(),
        section: node.section.to_string(),
        output: [node.out_channels, side, side],
        params_conv,
        params_total,
        macs,
        elementwise_ops,
    }
}

/// Parameter counts and FLOPs of `graph` evaluated at `input_size`.
pub fn estimate_flops(graph: &LayerGraph, input_size: usize) -> Result<AnalysisReport> {
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::Config(format!("input size {input_size} is not a positive multiple of 32")));
    }
    let nodes: Vec<NodeReport> = (0..graph.nodes.len()).map(|i| node_report(graph, i, input_size)).collect();
    let mut sections: Vec<(Section, SectionReport)> = Vec::new();
    for (n, r) in graph.nodes.iter().zip(&nodes) {
        let pos = match sections.iter().position(|(s, _)| *s == n.section) {
            Some(p) => p,
            None => {
                sections.push((
                    n.section,
                    SectionReport {
                        section: n.section.to_string(),
                        params_conv: 0,
                        params_total: 0,
                        macs: 0,
                    },
                ));
                sections.len() - 1
            }
        };
        let s = &mut sections[pos].1;
        s.params_conv += r.params_conv;
        s.params_total += r.params_total;
        s.macs += r.macs;
    }
    sections.sort_by_key(|(s, _)| *s);
    let params_conv = nodes.iter().map(|n| n.params_conv).sum();
    let params_total = nodes.iter().map(|n| n.params_total).sum();
    let macs: u64 = nodes.iter().map(|n| n.macs).sum();
    let elementwise_ops: u64 = nodes.iter().map(|n| n.elementwise_ops).sum();
    Ok(AnalysisReport {
        input_size,
        nodes,
        sections: sections.into_iter().map(|(_, r)| r).collect(),
        params_conv,
        params_total,
        macs,
        elementwise_ops,
        model_size_mb: bytes_to_mb(params_total),
        model_size_conv_mb: bytes_to_mb(params_conv),
        bflops: (2 * macs + elementwise_ops) as f64 / 1e9,
    })
}

/// [`estimate_flops`] at the graph's own input size.
pub fn count_parameters(graph: &LayerGraph) -> AnalysisReport {
    estimate_flops(graph, graph.input_size).expect("graphs are built from validated configs")
}

/// Counts parameters by walking the allocated tensors: `(conv, total)`.
pub fn enumerate_parameters(weights: &Weights) -> (u64, u64) {
    let mut conv = 0u64;
    let mut total = 0u64;
    for layer in weights.layers.iter().flatten() {
        conv += (layer.conv.weight.data().len() + layer.conv.bias.data().len()) as u64;
        total += layer.tensors().iter().map(|t| t.data().len() as u64).sum::<u64>();
    }
    (conv, total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: u32,
    pub model_size_mb: f64,
    pub model_size_conv_mb: f64,
    pub bflops: f64,
    pub params_conv: u64,
    pub params_total: u64,
    pub reference_mb: Option<f64>,
    pub reference_bflops: Option<f64>,
}

impl SweepRow {
    /// `(ours - ref) / ref` for the model size, in percent.
    pub fn size_deviation_pct(&self) -> Option<f64> {
        self.reference_mb.map(|r| 100.0 * (self.model_size_mb - r) / r)
    }

    pub fn bflops_deviation_pct(&self) -> Option<f64> {
        self.reference_bflops.map(|r| 100.0 * (self.bflops - r) / r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub input_size: usize,
    pub rows: Vec<SweepRow>,
}

/// Rebuilds the network for each squeeze exponent in `ks`.
pub fn sweep_squeeze_ratio(config: &NetworkConfig, ks: RangeInclusive<u32>) -> Result<SweepReport> {
    if ks.is_empty() || *ks.start() == 0 {
        return Err(Error::Config(format!("invalid k range {}..={}", ks.start(), ks.end())));
    }
    if config.block == BlockKind::Fr {
        for k in ks.clone() {
            for (i, stage) in config.stages.iter().enumerate() {
                let e = stage_exponent(stage.channels, k);
                if stage.blocks > 0 && (e >= usize::BITS || stage.channels % (1usize << e) != 0) {
                    return Err(Error::Config(format!(
                        "k={k}: stage {} ({} channels) is not divisible by 2^{k}",
                        i + 1,
                        stage.channels
                    )));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for k in ks {
        let mut cfg = config.clone();
        cfg.squeeze_exponent = k;
        let report = count_parameters(&build_network(&cfg)?);
        let reference = REFERENCE_SWEEP.iter().find(|r| r.0 == k);
        rows.push(SweepRow {
            k,
            model_size_mb: report.model_size_mb,
            model_size_conv_mb: report.model_size_conv_mb,
            bflops: report.bflops,
            params_conv: report.params_conv,
            params_total: report.params_total,
            reference_mb: reference.map(|r| r.1),
            reference_bflops: reference.map(|r| r.2),
        });
    }
    Ok(SweepReport {
        input_size: config.input_size,
        rows,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,model_size_mb,bflops,params_conv,params_total\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{},{}",
                r.k, r.model_size_mb, r.bflops, r.params_conv, r.params_total
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"));
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.1}%"));
        let mut out = format!(
            "Squeeze-ratio sweep at input {0}x{0}. Size counts conv weights, biases and batch-norm values (4 bytes each); \
             the conv-only column omits batch norm. Deviation is (ours - reference) / reference.\n\n",
            self.input_size
        );
        out.push_str(
            "| k | size MB | conv-only MB | reference MB | size dev | BFLOPS | reference BFLOPS | BFLOPS dev |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {} | {} | {:.3} | {} | {} |",
                r.k,
                r.model_size_mb,
                r.model_size_conv_mb,
                opt(r.reference_mb, 2),
                pct(r.size_deviation_pct()),
                r.bflops,
                opt(r.reference_bflops, 3),
                pct(r.bflops_deviation_pct()),
            );
        }
        out
    }
}

impl AnalysisReport {
    /// Plain-text summary: one line per section, then totals.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>14} {:>14} {:>16}\n",
            "section", "params_conv", "params_total", "MACs"
        );
        for s in &self.sections {
            let _ = writeln!(
                out,
                "{:<10} {:>14} {:>14} {:>16}",
                s.section, s.params_conv, s.params_total, s.macs
            );
        }
        let _ = writeln!(
            out,
            "total      {:>14} {:>14} {:>16}\nmodel size {:.2} MB (conv only {:.2} MB), {:.3} BFLOPS at {}x{}",
            self.params_conv,
            self.params_total,
            self.macs,
            self.model_size_mb,
            self.model_size_conv_mb,
            self.bflops,
            self.input_size,
            self.input_size
        );
        out
    }
}
