//! Layer graph of the full detector: backbone, feature pyramid and heads.

use std::fmt;

use serde::Serialize;

use super::config::{Anchor, BlockKind, NetworkConfig, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};
use crate::fr::{build_fr_module, stage_exponent, FrConfig, FrModule, ResidualBlock};
use crate::layer::ConvSpec;

/// Output contract of one detection head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSpec {
    /// 0 = coarsest grid (input/32), 2 = finest (input/8).
    pub head: usize,
    pub anchors: [Anchor; ANCHORS_PER_SCALE],
    /// 4 for plain heads, 8 with Gaussian variances.
    pub box_params: usize,
    pub num_classes: usize,
}

impl DetectSpec {
    pub fn fields_per_anchor(&self) -> usize {
        self.box_params + 1 + self.num_classes
    }

    pub fn gaussian(&self) -> bool {
        self.box_params == 8
    }
}

/// What the loss and decoder need to know about one head tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadLayout {
    pub grid: usize,
    pub anchors: [Anchor; ANCHORS_PER_SCALE],
    pub box_params: usize,
    pub num_classes: usize,
}

impl HeadLayout {
    pub fn fields_per_anchor(&self) -> usize {
        self.box_params + 1 + self.num_classes
    }

    pub fn channels(&self) -> usize {
        ANCHORS_PER_SCALE * self.fields_per_anchor()
    }

    pub fn gaussian(&self) -> bool {
        self.box_params == 8
    }

    /// Channel holding the objectness logit of anchor `a`.
    pub fn objectness_channel(&self, a: usize) -> usize {
        a * self.fields_per_anchor() + self.box_params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Conv(ConvSpec),
    Fr(FrModule),
    Residual(ResidualBlock),
    Upsample,
    Concat,
    Detect(DetectSpec),
}

impl NodeKind {
    /// Convolutions owned by the node, in weight-file order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        match self {
            NodeKind::Conv(c) => vec![*c],
            NodeKind::Fr(m) => m.convs().to_vec(),
            NodeKind::Residual(b) => b.convs().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv(_) => "conv",
            NodeKind::Fr(_) => "fr",
            NodeKind::Residual(_) => "residual",
            NodeKind::Upsample => "upsample",
            NodeKind::Concat => "concat",
            NodeKind::Detect(_) => "detect",
        }
    }
}

/// Coarse grouping used for per-section reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Section {
    Stem,
    Stage(usize),
    /// Neck convs and the lateral path feeding a head.
    Neck(usize),
    /// The 1x1 output conv and detect node of a head.
    Head(usize),
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Section::Stem => write!(f, "stem"),
            Section::Stage(i) => write!(f, "stage{}", i + 1),
            Section::Neck(i) => write!(f, "neck{i}"),
            Section::Head(i) => write!(f, "head{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub id: usize,
    pub name: String,
    pub kind: NodeKind,
    /// Producer node ids, in operand order.
    pub inputs: Vec<usize>,
    pub out_channels: usize,
    /// Spatial downsampling factor relative to the network input.
    pub stride: usize,
    pub section: Section,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGraph {
    pub nodes: Vec<Node>,
    /// Ids of the three detect nodes, coarsest first.
    pub heads: Vec<usize>,
    pub input_size: usize,
    pub num_classes: usize,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: String, kind: NodeKind, inputs: Vec<usize>, section: Section) -> Result<usize> {
        let id = self.nodes.len();
        let in_ch: Vec<usize> = inputs.iter().map(|&i| self.nodes[i].out_channels).collect();
        let in_stride: Vec<usize> = inputs.iter().map(|&i| self.nodes[i].stride).collect();
        let fail = |detail: String| Error::Build {
            node: name.clone(),
            detail,
        };
        let (out_channels, stride) = match &kind {
            NodeKind::Input => (3, 1),
            NodeKind::Conv(c) => {
                if in_ch[0] != c.in_channels {
                    return Err(fail(format!(
                        "conv expects {} input channels, producer gives {}",
                        c.in_channels, in_ch[0]
                    )));
                }
                (c.out_channels, in_stride[0] * c.stride)
            }
            NodeKind::Fr(m) => {
                if in_ch[0] != m.channels() {
                    return Err(fail(format!("FR module for C={} fed {} channels", m.channels(), in_ch[0])));
                }
                (m.channels(), in_stride[0])
            }
            NodeKind::Residual(b) => {
                if in_ch[0] != b.channels {
                    return Err(fail(format!("residual block for C={} fed {} channels", b.channels, in_ch[0])));
                }
                (b.channels, in_stride[0])
            }
            NodeKind::Upsample => (in_ch[0], in_stride[0] / 2),
            NodeKind::Concat => {
                if in_stride[0] != in_stride[1] {
                    return Err(fail(format!(
                        "concat of stride {} and stride {} maps",
                        in_stride[0], in_stride[1]
                    )));
                }
                (in_ch[0] + in_ch[1], in_stride[0])
            }
            NodeKind::Detect(d) => {
                let expected = ANCHORS_PER_SCALE * d.fields_per_anchor();
                if in_ch[0] != expected {
                    return Err(fail(format!("head conv gives {} channels, need {expected}", in_ch[0])));
                }
                (in_ch[0], in_stride[0])
            }
        };
        self.nodes.push(Node {
            id,
            name,
            kind,
            inputs,
            out_channels,
            stride,
            section,
        });
        Ok(id)
    }

    fn conv(&mut self, name: String, spec: ConvSpec, input: usize, section: Section) -> Result<usize> {
        self.push(name, NodeKind::Conv(spec), vec![input], section)
    }
}

/// Builds the detector graph described by `config`.
///
/// Backbone: stem conv, then per stage a stride-2 3x3 conv and the stage's
/// FR modules. Pyramid: starting from the deepest stage, each level runs a
/// neck (alternating 1x1/3x3 convs ending in a 1x1 "route"), a 3x3 conv and
/// a linear 1x1 head conv; the route is reduced, upsampled and concatenated
/// with the next shallower stage to feed the next level.
pub fn build_network(config: &NetworkConfig) -> Result<LayerGraph> {
    config.validate()?;
    let mut b = Builder { nodes: Vec::new() };
    let input = b.push("input".into(), NodeKind::Input, vec![], Section::Stem)?;
    let mut x = b.conv(
        "stem".into(),
        ConvSpec::hidden(3, config.stem_channels, 3, 1),
        input,
        Section::Stem,
    )?;
    let mut prev = config.stem_channels;
    let mut stage_out = Vec::with_capacity(config.stages.len());
    for (si, stage) in config.stages.iter().enumerate() {
        let section = Section::Stage(si);
        x = b.conv(
            format!("stage{}.down", si + 1),
            ConvSpec::hidden(prev, stage.channels, 3, 2),
            x,
            section,
        )?;
        for j in 0..stage.blocks {
            let name = format!("stage{}.block{}", si + 1, j + 1);
            let kind = match config.block {
                BlockKind::Fr => {
                    let fr = FrConfig::new(stage.channels, stage_exponent(stage.channels, config.squeeze_exponent)).map_err(|e| Error::Build {
                        node: name.clone(),
                        detail: e.to_string(),
                    })?;
                    NodeKind::Fr(build_fr_module(fr).with_residual(config.residual))
                }
                BlockKind::Residual => NodeKind::Residual(ResidualBlock::new(stage.channels)?),
            };
            x = b.push(name, kind, vec![x], section)?;
        }
        prev = stage.channels;
        stage_out.push(x);
    }

    let head_channels = config.head_channels();
    let last = config.stages.len() - 1;
    let mut heads = Vec::with_capacity(3);
    let mut level_in = stage_out[last];
    for head in 0..3 {
        let level = last - head;
        let c = config.stages[level].channels;
        let h = c / 2;
        let neck = Section::Neck(head);
        let mut cur = level_in;
        let mut route = cur;
        for i in 0..config.neck_depth {
            let cin = b.nodes[cur].out_channels;
            route = b.conv(format!("neck{head}.conv{}", 2 * i + 1), ConvSpec::hidden(cin, h, 1, 1), cur, neck)?;
            cur = route;
            if i + 1 < config.neck_depth {
                cur = b.conv(format!("neck{head}.conv{}", 2 * i + 2), ConvSpec::hidden(h, c, 3, 1), cur, neck)?;
            }
        }
        let feat = b.conv(format!("head{head}.pre"), ConvSpec::hidden(h, c, 3, 1), route, Section::Head(head))?;
        let out = b.conv(
            format!("head{head}.conv"),
            ConvSpec::linear_1x1(c, head_channels),
            feat,
            Section::Head(head),
        )?;
        let group = 2 - head;
        let anchors: [Anchor; ANCHORS_PER_SCALE] = config.anchors
            [group * ANCHORS_PER_SCALE..(group + 1) * ANCHORS_PER_SCALE]
            .try_into()
            .expect("validated 9 anchors");
        let detect = b.push(
            format!("head{head}.detect"),
            NodeKind::Detect(DetectSpec {
                head,
                anchors,
                box_params: config.box_params(),
                num_classes: config.num_classes,
            }),
            vec![out],
            Section::Head(head),
        )?;
        heads.push(detect);

        if head < 2 {
            let shallower = config.stages[level - 1].channels;
            let lateral = b.conv(
                format!("neck{head}.lateral"),
                ConvSpec::hidden(h, shallower / 2, 1, 1),
                route,
                Section::Neck(head + 1),
            )?;
            let up = b.push(format!("neck{head}.upsample"), NodeKind::Upsample, vec![lateral], Section::Neck(head + 1))?;
            level_in = b.push(
                format!("neck{}.concat", head + 1),
                NodeKind::Concat,
                vec![up, stage_out[level - 1]],
                Section::Neck(head + 1),
            )?;
        }
    }

    Ok(LayerGraph {
        nodes: b.nodes,
        heads,
        input_size: config.input_size,
        num_classes: config.num_classes,
    })
}

impl LayerGraph {
    /// Node ids that own convolution weights, in graph order.
    pub fn parameterized(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| !n.kind.convs().is_empty())
    }

    pub fn detect_specs(&self) -> Vec<&DetectSpec> {
        self.heads
            .iter()
            .map(|&h| match &self.nodes[h].kind {
                NodeKind::Detect(d) => d,
                _ => unreachable!("heads index detect nodes"),
            })
            .collect()
    }

    pub fn head_layouts(&self) -> Vec<HeadLayout> {
        self.heads
            .iter()
            .zip(self.detect_specs())
            .map(|(&h, d)| HeadLayout {
                grid: self.spatial(h),
                anchors: d.anchors,
                box_params: d.box_params,
                num_classes: d.num_classes,
            })
            .collect()
    }

    /// Spatial side of a node's output at the graph's input size.
    pub fn spatial(&self, node: usize) -> usize {
        self.input_size / self.nodes[node].stride
    }

    pub fn count(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Checks acyclicity (producers precede consumers) and channel agreement.
    pub fn validate(&self) -> Result<()> {
        for n in &self.nodes {
            let fail = |detail: String| Error::Build {
                node: n.name.clone(),
                detail,
            };
            if n.inputs.iter().any(|&i| i >= n.id) {
                return Err(fail("input does not precede node".into()));
            }
            let in_ch: Vec<usize> = n.inputs.iter().map(|&i| self.nodes[i].out_channels).collect();
            let ok = match &n.kind {
                NodeKind::Input => n.inputs.is_empty(),
                NodeKind::Conv(c) => in_ch == [c.in_channels],
                NodeKind::Fr(m) => in_ch == [m.channels()],
                NodeKind::Residual(r) => in_ch == [r.channels],
                NodeKind::Upsample | NodeKind::Detect(_) => in_ch.len() == 1,
                NodeKind::Concat => in_ch.len() == 2 && in_ch[0] + in_ch[1] == n.out_channels,
            };
            if !ok {
                return Err(fail(format!("input channels {in_ch:?} do not match {}", n.kind.label())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_stride2(k: &NodeKind) -> bool {
        matches!(k, NodeKind::Conv(c) if c.stride == 2)
    }

    #[test]
    fn default_graph_structure() {
        let g = build_network(&NetworkConfig::default()).unwrap();
        g.validate().unwrap();
        assert_eq!(g.heads.len(), 3);
        assert_eq!(g.count(is_stride2), 5);
        assert_eq!(g.count(|k| matches!(k, NodeKind::Upsample)), 2);
        assert_eq!(g.count(|k| matches!(k, NodeKind::Concat)), 2);
        assert_eq!(g.count(|k| matches!(k, NodeKind::Fr(_))), 1 + 2 + 8 + 8 + 4);
        let grids: Vec<usize> = g.heads.iter().map(|&h| g.spatial(h)).collect();
        assert_eq!(grids, vec![13, 26, 52]);
        for &h in &g.heads {
            assert_eq!(g.nodes[h].out_channels, 3 * (8 + 1 + 3));
        }
    }

    #[test]
    fn concat_fed_by_upsample_and_backbone() {
        let g = build_network(&NetworkConfig::default()).unwrap();
        for n in g.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Concat)) {
            assert!(matches!(g.nodes[n.inputs[0]].kind, NodeKind::Upsample));
            assert!(matches!(g.nodes[n.inputs[1]].section, Section::Stage(_)));
        }
    }

    #[test]
    fn plain_head_channels() {
        let cfg = NetworkConfig {
            gaussian_head: false,
            ..NetworkConfig::default()
        };
        let g = build_network(&cfg).unwrap();
        for &h in &g.heads {
            assert_eq!(g.nodes[h].out_channels, 3 * (4 + 1 + 3));
        }
    }

    #[test]
    fn indivisible_stage_names_node() {
        let mut cfg = NetworkConfig::default();
        cfg.squeeze_exponent = 6;
        cfg.stages[0].channels = 96; // 96 / 64 fails
        cfg.stages[1].channels = 192;
        let err = build_network(&cfg).unwrap_err().to_string();
        assert!(err.contains("stage1.block1"), "{err}");
    }

    #[test]
    fn power_of_two_stage_saturates_at_one_squeeze_kernel() {
        let mut cfg = NetworkConfig::default();
        cfg.squeeze_exponent = 7;
        let g = build_network(&cfg).unwrap();
        let squeeze: Vec<usize> = g
            .nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Fr(m) => Some(m.config.squeeze()),
                _ => None,
            })
            .collect();
        assert_eq!(squeeze[0], 1); // 64 channels
        assert_eq!(squeeze[1], 1); // 128 channels
        assert_eq!(*squeeze.last().unwrap(), 8); // 1024 channels
    }

    #[test]
    fn anchors_route_to_matching_grid() {
        let g = build_network(&NetworkConfig::default()).unwrap();
        let specs = g.detect_specs();
        assert_eq!(specs[0].anchors[0].width, 116.0);
        assert_eq!(specs[2].anchors[0].width, 10.0);
    }
}
