//! Text architecture description.
//!
//! ```text
//! # comment
//! [net] input=416 classes=3 k=4 gaussian=1
//! names=Car,Cyclist,Pedestrian
//! [stage] channels=64 fr=1
//! ...                                  (exactly five [stage] blocks)
//! [anchors] 10,13 16,30 33,23 30,61 62,45 59,119 116,90 156,198 373,326
//! ```
//!
//! Keys may share the header's line or follow on later lines. `[net]` keys:
//! `input`, `classes`, `names`, `k`, `gaussian`, `residual`, `block`
//! (`fr` or `residual`), `stem`, `neck`. `[stage]` keys: `channels`, `fr`.
//! Omitted `[stage]` blocks fall back to the Darknet-53 layout; an omitted
//! `[anchors]` block falls back to the YOLOv3 anchors scaled to `input`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fr::DEFAULT_SQUEEZE_EXPONENT;

/// Anchor prior in input pixels. `scale_index` 0 is the finest grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anchor {
    pub width: f32,
    pub height: f32,
    pub scale_index: usize,
}

impl Anchor {
    pub fn area(&self) -> f32 {
        self.width * self.height
    }
}

/// What each backbone stage repeats after its downsampling conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Fr,
    /// Darknet residual block (1x1 C->C/2, 3x3 C/2->C, add).
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageSpec {
    pub channels: usize,
    /// Number of FR (or residual) blocks after the stage's downsample conv.
    pub blocks: usize,
}

pub const NUM_STAGES: usize = 5;
pub const NUM_ANCHORS: usize = 9;
pub const ANCHORS_PER_SCALE: usize = 3;

/// YOLOv3 COCO anchors at 416x416.
pub const YOLOV3_ANCHORS: [(f32, f32); NUM_ANCHORS] = [
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
];

pub const DARKNET53_STAGES: [StageSpec; NUM_STAGES] = [
    StageSpec { channels: 64, blocks: 1 },
    StageSpec { channels: 128, blocks: 2 },
    StageSpec { channels: 256, blocks: 8 },
    StageSpec { channels: 512, blocks: 8 },
    StageSpec { channels: 1024, blocks: 4 },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub gaussian_head: bool,
    pub squeeze_exponent: u32,
    /// Residual connection inside FR modules.
    pub residual: bool,
    pub block: BlockKind,
    pub stem_channels: usize,
    /// Number of 1x1 convs per neck; 3x3 convs are interleaved between them.
    pub neck_depth: usize,
    pub anchors: Vec<Anchor>,
    pub stages: Vec<StageSpec>,
}

impl Default for NetworkConfig {
    /// 416 input, the three KITTI classes, k=4, Gaussian heads, Darknet-53
    /// stage layout and a YOLOv3-depth neck.
    fn default() -> Self {
        NetworkConfig {
            input_size: 416,
            num_classes: 3,
            class_names: vec!["Car".into(), "Cyclist".into(), "Pedestrian".into()],
            gaussian_head: true,
            squeeze_exponent: DEFAULT_SQUEEZE_EXPONENT,
            residual: true,
            block: BlockKind::Fr,
            stem_channels: 32,
            neck_depth: 3,
            anchors: scaled_yolov3_anchors(416),
            stages: DARKNET53_STAGES.to_vec(),
        }
    }
}

/// YOLOv3 anchors rescaled from 416 to `input_size`.
pub fn scaled_yolov3_anchors(input_size: usize) -> Vec<Anchor> {
    let f = input_size as f32 / 416.0;
    YOLOV3_ANCHORS
        .iter()
        .enumerate()
        .map(|(i, &(w, h))| Anchor {
            width: w * f,
            height: h * f,
            scale_index: i / ANCHORS_PER_SCALE,
        })
        .collect()
}

fn assign_scales(mut anchors: Vec<Anchor>) -> Vec<Anchor> {
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()));
    for (i, a) in anchors.iter_mut().enumerate() {
        a.scale_index = i / ANCHORS_PER_SCALE;
    }
    anchors
}

impl NetworkConfig {
    pub fn grid_sizes(&self) -> [usize; 3] {
        [self.input_size / 32, self.input_size / 16, self.input_size / 8]
    }

    /// Box parameters per anchor: 4 coordinates, plus 4 variances when Gaussian.
    pub fn box_params(&self) -> usize {
        if self.gaussian_head {
            8
        } else {
            4
        }
    }

    /// Channels of each head tensor: `3 * (B + 1 + N_C)`.
    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_SCALE * (self.box_params() + 1 + self.num_classes)
    }

    pub fn class_name(&self, id: usize) -> String {
        self.class_names
            .get(id)
            .cloned()
            .unwrap_or_else(|| format!("class{id}"))
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Structural checks that do not depend on building the graph.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return fail(format!("input={} is not a positive multiple of 32", self.input_size));
        }
        if self.num_classes == 0 {
            return fail("classes must be at least 1".into());
        }
        if self.class_names.len() != self.num_classes {
            return fail(format!(
                "{} class names for classes={}",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if self.squeeze_exponent == 0 {
            return fail("k must be at least 1".into());
        }
        if self.stem_channels == 0 || self.neck_depth == 0 {
            return fail("stem and neck must be positive".into());
        }
        if self.anchors.len() != NUM_ANCHORS {
            return fail(format!("expected 9 anchors, got {}", self.anchors.len()));
        }
        if self.anchors.iter().any(|a| !(a.width > 0.0 && a.height > 0.0)) {
            return fail("anchor dimensions must be positive".into());
        }
        if self.stages.len() != NUM_STAGES {
            return fail(format!("expected 5 stages, got {}", self.stages.len()));
        }
        if let Some((i, s)) = self
            .stages
            .iter()
            .enumerate()
            .find(|(_, s)| s.channels < 4 || s.channels % 4 != 0)
        {
            return fail(format!(
                "stage {} channels={} must be a positive multiple of 4",
                i + 1,
                s.channels
            ));
        }
        Ok(())
    }

    /// Renders the config in the text format accepted by [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "[net]\ninput={}\nclasses={}\nnames={}\nk={}\ngaussian={}\nresidual={}\nblock={}\nstem={}\nneck={}",
            self.input_size,
            self.num_classes,
            self.class_names.join(","),
            self.squeeze_exponent,
            u8::from(self.gaussian_head),
            u8::from(self.residual),
            match self.block {
                BlockKind::Fr => "fr",
                BlockKind::Residual => "residual",
            },
            self.stem_channels,
            self.neck_depth
        );
        for st in &self.stages {
            let _ = writeln!(s, "\n[stage]\nchannels={}\nfr={}", st.channels, st.blocks);
        }
        let pairs: Vec<String> = self
            .anchors
            .iter()
            .map(|a| format!("{},{}", a.width, a.height))
            .collect();
        let _ = writeln!(s, "\n[anchors]\n{}", pairs.join(" "));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Net,
    Stage,
    Anchors,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(line, format!("{key}={value} is not a valid number")))
}

fn parse_flag(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::parse(line, format!("{key}={value} must be 0 or 1"))),
    }
}

/// Parses and validates a network description.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::default();
    let mut input_line = 0;
    let mut input_set = false;
    let mut names: Option<(usize, Vec<String>)> = None;
    let mut stages: Vec<(usize, Option<usize>, Option<usize>)> = Vec::new();
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut anchors_line = None;
    let mut section = Section::None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut rest = line;
        if let Some(stripped) = line.strip_prefix('[') {
            let end = stripped
                .find(']')
                .ok_or_else(|| Error::parse(line_no, "unterminated section header"))?;
            section = match &stripped[..end] {
                "net" => Section::Net,
                "stage" => {
                    stages.push((line_no, None, None));
                    Section::Stage
                }
                "anchors" => {
                    anchors_line = Some(line_no);
                    Section::Anchors
                }
                other => return Err(Error::parse(line_no, format!("unknown section [{other}]"))),
            };
            rest = stripped[end + 1..].trim();
        }
        for token in rest.split_whitespace() {
            match section {
                Section::None => {
                    return Err(Error::parse(line_no, format!("'{token}' outside any section")))
                }
                Section::Anchors => {
                    let (w, h) = token.split_once(',').ok_or_else(|| {
                        Error::parse(line_no, format!("anchor '{token}' is not a w,h pair"))
                    })?;
                    let width: f32 = parse_num(line_no, "anchor width", w)?;
                    let height: f32 = parse_num(line_no, "anchor height", h)?;
                    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
                        return Err(Error::parse(line_no, format!("anchor '{token}' must be positive")));
                    }
                    anchors.push(Anchor {
                        width,
                        height,
                        scale_index: 0,
                    });
                }
                Section::Net | Section::Stage => {
                    let (key, value) = token.split_once('=').ok_or_else(|| {
                        Error::parse(line_no, format!("expected key=value, got '{token}'"))
                    })?;
                    if section == Section::Stage {
                        let stage = stages.last_mut().expect("pushed at header");
                        match key {
                            "channels" => stage.1 = Some(parse_num(line_no, key, value)?),
                            "fr" => stage.2 = Some(parse_num(line_no, key, value)?),
                            _ => return Err(Error::parse(line_no, format!("unknown key '{key}' in [stage]"))),
                        }
                        continue;
                    }
                    match key {
                        "input" => {
                            cfg.input_size = parse_num(line_no, key, value)?;
                            input_line = line_no;
                            input_set = true;
                        }
                        "classes" => cfg.num_classes = parse_num(line_no, key, value)?,
                        "names" => {
                            names = Some((line_no, value.split(',').map(str::to_string).collect()))
                        }
                        "k" => cfg.squeeze_exponent = parse_num(line_no, key, value)?,
                        "gaussian" => cfg.gaussian_head = parse_flag(line_no, key, value)?,
                        "residual" => cfg.residual = parse_flag(line_no, key, value)?,
                        "block" => {
                            cfg.block = match value {
                                "fr" => BlockKind::Fr,
                                "residual" => BlockKind::Residual,
                                _ => {
                                    return Err(Error::parse(
                                        line_no,
                                        format!("block={value} must be 'fr' or 'residual'"),
                                    ))
                                }
                            }
                        }
                        "stem" => cfg.stem_channels = parse_num(line_no, key, value)?,
                        "neck" => cfg.neck_depth = parse_num(line_no, key, value)?,
                        _ => return Err(Error::parse(line_no, format!("unknown key '{key}' in [net]"))),
                    }
                }
            }
        }
    }

    if cfg.input_size == 0 || cfg.input_size % 32 != 0 {
        return Err(Error::parse(
            input_line,
            format!("input={} is not a positive multiple of 32", cfg.input_size),
        ));
    }
    if cfg.num_classes == 0 {
        return Err(Error::parse(0, "classes must be at least 1"));
    }
    match names {
        Some((line, list)) => {
            if list.len() != cfg.num_classes || list.iter().any(|n| n.is_empty()) {
                return Err(Error::parse(
                    line,
                    format!("{} class names for classes={}", list.len(), cfg.num_classes),
                ));
            }
            cfg.class_names = list;
        }
        None if cfg.num_classes == 3 => {}
        None => cfg.class_names = (0..cfg.num_classes).map(|i| format!("class{i}")).collect(),
    }
    if !stages.is_empty() {
        if stages.len() != NUM_STAGES {
            return Err(Error::parse(
                stages.last().map_or(0, |s| s.0),
                format!("expected exactly 5 [stage] blocks, found {}", stages.len()),
            ));
        }
        cfg.stages = stages
            .iter()
            .map(|&(line, ch, blocks)| match (ch, blocks) {
                (Some(channels), Some(blocks)) => Ok(StageSpec { channels, blocks }),
                _ => Err(Error::parse(line, "[stage] needs both channels= and fr=")),
            })
            .collect::<Result<_>>()?;
    }
    match anchors_line {
        Some(line) => {
            if anchors.len() != NUM_ANCHORS {
                return Err(Error::parse(
                    line,
                    format!("expected 9 anchor pairs, got {}", anchors.len()),
                ));
            }
            cfg.anchors = assign_scales(anchors);
        }
        None => {
            if input_set {
                cfg.anchors = scaled_yolov3_anchors(cfg.input_size);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
