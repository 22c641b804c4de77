//! SGD training loop, checkpoints and held-out evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{evaluate, image_to_tensor, EvalImage, EvalReport, Sample};
use crate::error::{Error, Result};
use crate::layer::{apply_batch_stats, ConvLayer, ConvVars, Recorder};
use crate::loss::{assign_targets, record_loss, GtBox, LossBreakdown, LossConfig};
use crate::network::{LayerGraph, NetworkConfig, Weights};
use crate::postprocess::{detect, DecodeOptions, Detection, NamedDetection};
use crate::tensor::Tensor;

/// Score threshold used when collecting detections for AP.
pub const EVAL_CONF_THRESH: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 2000,
            seed: 0,
            checkpoint_every: 500,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings (batch 64, lr 0.0005) for GPU training on KITTI.
    pub fn paper_preset() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 5e-4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("max gradient norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1) and weight decay >= 0 (momentum={}, weight_decay={})",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Image tensor `(1, 3, S, S)` with its boxes in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub stem: String,
    pub image: Tensor<f32>,
    pub boxes: Vec<GtBox>,
}

/// Converts a labelled image; DontCare regions are dropped and unknown
/// class names rejected.
pub fn prepare_sample(sample: &Sample, config: &NetworkConfig) -> Result<TrainingSample> {
    let size = config.input_size;
    if sample.image.width() as usize != size || sample.image.height() as usize != size {
        return Err(Error::shape(
            "prepare_sample",
            format!(
                "{}: image is {}x{}, network input is {size}x{size}",
                sample.stem,
                sample.image.width(),
                sample.image.height()
            ),
        ));
    }
    let mut boxes = Vec::new();
    for l in sample.labels.iter().filter(|l| !l.is_dont_care()) {
        let class_id = config.class_id(&l.class_name).ok_or_else(|| {
            Error::Config(format!("{}: unknown class {:?}", sample.stem, l.class_name))
        })?;
        let [x1, y1, x2, y2] = l.bbox;
        boxes.push(GtBox::from_corners(class_id, x1, y1, x2, y2, size as f64));
    }
    Ok(TrainingSample {
        stem: sample.stem.clone(),
        image: image_to_tensor(&sample.image),
        boxes,
    })
}

/// Momentum buffers laid out like [`ConvLayer::tensors`] minus the running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub max_grad_norm: Option<f32>,
    velocity: Vec<Vec<[Vec<f32>; 4]>>,
}

impl Sgd {
    pub fn new(weights: &Weights, config: &TrainConfig) -> Self {
        let velocity = weights
            .layers
            .iter()
            .map(|node| {
                node.iter()
                    .map(|l| {
                        let bn = l.bn.as_ref().map_or(0, |b| b.channels());
                        [
                            vec![0.0; l.conv.weight.numel()],
                            vec![0.0; l.conv.bias.numel()],
                            vec![0.0; bn],
                            vec![0.0; bn],
                        ]
                    })
                    .collect()
            })
            .collect();
        Sgd {
            learning_rate: config.learning_rate as f32,
            momentum: config.momentum as f32,
            weight_decay: config.weight_decay as f32,
            max_grad_norm: config.max_grad_norm.map(|m| m as f32),
            velocity,
        }
    }

    /// `v = momentum * v + s * g + decay * w; w -= lr * v`, with decay
    /// applied to conv weights only. `s` is the clipping factor.
    pub fn update(&mut self, param: &mut [f32], grad: &[f32], scale: f32, slot: (usize, usize, usize)) {
        let decay = if slot.2 == 0 { self.weight_decay } else { 0.0 };
        let v = &mut self.velocity[slot.0][slot.1][slot.2];
        for ((w, g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + scale * *g + decay * *w;
            *w -= self.learning_rate * *v;
        }
    }
}

fn layer_params(layer: &mut ConvLayer) -> [Option<&mut Tensor<f32>>; 4] {
    let (scale, shift) = match &mut layer.bn {
        Some(bn) => (Some(&mut bn.scale), Some(&mut bn.shift)),
        None => (None, None),
    };
    [Some(&mut layer.conv.weight), Some(&mut layer.conv.bias), scale, shift]
}

/// One forward/backward pass and SGD update on `batch`. Leaves `weights`
/// untouched when the loss is not finite.
pub fn train_step(
    graph: &LayerGraph,
    weights: &mut Weights,
    sgd: &mut Sgd,
    batch: &[&TrainingSample],
) -> Result<LossBreakdown> {
    let images: Vec<Tensor<f32>> = batch.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<Vec<GtBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let layouts = graph.head_layouts();
    let assignment = assign_targets(&gts, &layouts, graph.input_size)?;

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::stack_batch(&images)?);
    let mut rec = Recorder::new(&mut tape, true, true);
    let heads = graph.record(weights, &mut rec, x)?;
    let vars = std::mem::take(&mut rec.vars);
    let stats = std::mem::take(&mut rec.batch_stats);
    let (loss, breakdown) = record_loss(&mut tape, &heads, &layouts, &assignment, &LossConfig::default())?;
    tape.backward(loss)?;

    let handles = |cv: &ConvVars| [Some(cv.weight), Some(cv.bias), cv.scale, cv.shift];
    let scale = match sgd.max_grad_norm {
        Some(max) => {
            let sq: f64 = vars
                .iter()
                .flat_map(|(_, cv)| handles(cv))
                .flatten()
                .filter_map(|v| tape.grad(v))
                .flat_map(|g| g.iter().map(|&x| f64::from(x) * f64::from(x)))
                .sum();
            let norm = sq.sqrt() as f32;
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let mut updated = weights.clone();
    for ((node, idx), cv) in &vars {
        let layer = &mut updated.layers[*node][*idx];
        for (slot, (param, var)) in layer_params(layer).into_iter().zip(handles(cv)).enumerate() {
            if let (Some(param), Some(var)) = (param, var) {
                if let Some(g) = tape.grad(var) {
                    sgd.update(param.data_mut(), g, scale, (*node, *idx, slot));
                }
            }
        }
    }
    for ((node, idx), s) in &stats {
        apply_batch_stats(&mut updated.layers[*node][*idx], s);
    }
    if !updated.is_finite() {
        return Err(Error::NonFinite("weights after update".into()));
    }
    *weights = updated;
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,loss_box,loss_obj,loss_cls,loss_total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.iter, r.loss.box_loss, r.loss.objectness, r.loss.class, r.loss.total
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub log: Vec<LogRow>,
    pub evaluation: Option<EvalReport>,
    /// Files written to the output directory.
    pub files: Vec<PathBuf>,
}

/// Deterministic batch order: the training set is reshuffled every epoch.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: len,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains for `config.iterations` steps.
///
/// With an output directory, writes `train_log.csv`, periodic
/// `ckpt_<iter>.frdw` files and `final.frdw`. A non-finite loss stops
/// training: the last good weights go to `last_good.frdw` and the error is
/// returned. `progress` sees every log row.
pub fn train(
    graph: &LayerGraph,
    mut weights: Weights,
    data: &[TrainingSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    weights.check(graph)?;
    if data.is_empty() && config.iterations > 0 {
        return Err(Error::Config("no training samples".into()));
    }
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut sgd = Sgd::new(&weights, config);
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut log = Vec::with_capacity(config.iterations);
    let write_log = |log: &[LogRow], files: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out_dir {
            let p = dir.join("train_log.csv");
            std::fs::write(&p, log_csv(log)).map_err(|e| Error::file(&p, e))?;
            if !files.contains(&p) {
                files.push(p);
            }
        }
        Ok(())
    };
    for iter in 1..=config.iterations {
        let idx = sampler.next(config.batch_size);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &data[i]).collect();
        let loss = match train_step(graph, &mut weights, &mut sgd, &batch) {
            Ok(l) => l,
            Err(Error::NonFinite(detail)) => {
                if let Some(dir) = out_dir {
                    let p = dir.join("last_good.frdw");
                    weights.save(&p)?;
                    write_log(&log, &mut files)?;
                }
                return Err(Error::NonFinite(format!("{detail} at iteration {iter}")));
            }
            Err(e) => return Err(e),
        };
        let row = LogRow { iter, loss };
        progress(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && iter % config.checkpoint_every == 0 {
                let p = dir.join(format!("ckpt_{iter:06}.frdw"));
                weights.save(&p)?;
                files.push(p);
                write_log(&log, &mut files)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("final.frdw");
        weights.save(&p)?;
        files.push(p);
        write_log(&log, &mut files)?;
    }
    Ok(TrainOutcome {
        weights,
        log,
        evaluation: None,
        files,
    })
}

/// Trains on `train_set`, then evaluates on `val_set` at IoU 0.5. The report
/// is also written to `eval.txt` in the output directory.
pub fn train_and_evaluate(
    config: &NetworkConfig,
    graph: &LayerGraph,
    weights: Weights,
    train_set: &[Sample],
    val_set: &[Sample],
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let data = train_set
        .iter()
        .map(|s| prepare_sample(s, config))
        .collect::<Result<Vec<_>>>()?;
    let mut outcome = train(graph, weights, &data, train_config, out_dir, progress)?;
    if !val_set.is_empty() {
        let report = evaluate_model(graph, &outcome.weights, val_set, config, crate::data::DEFAULT_EVAL_IOU)?;
        if let Some(dir) = out_dir {
            let p = dir.join("eval.txt");
            std::fs::write(&p, report.to_text()).map_err(|e| Error::file(&p, e))?;
            outcome.files.push(p);
        }
        outcome.evaluation = Some(report);
    }
    Ok(outcome)
}

/// Detections for one `(1, 3, S, S)` image in inference mode.
pub fn predict(graph: &LayerGraph, weights: &Weights, image: &Tensor<f32>, opts: &DecodeOptions) -> Result<Vec<Detection>> {
    let heads = graph.forward(weights, image)?;
    detect(&heads, &graph.head_layouts(), 0, graph.input_size, opts)
}

/// AP of the model over labelled samples.
pub fn evaluate_model(
    graph: &LayerGraph,
    weights: &Weights,
    samples: &[Sample],
    config: &NetworkConfig,
    iou_thresh: f64,
) -> Result<EvalReport> {
    let opts = DecodeOptions {
        conf_thresh: EVAL_CONF_THRESH,
        ..Default::default()
    };
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let t = prepare_sample(s, config)?;
        let dets = predict(graph, weights, &t.image, &opts)?;
        images.push(EvalImage {
            detections: dets
                .into_iter()
                .map(|d| NamedDetection {
                    class_name: config.class_name(d.class_id),
                    score: d.score,
                    bbox: d.bbox,
                    uncertainty: d.uncertainty,
                })
                .collect(),
            labels: s.labels.clone(),
        });
    }
    Ok(evaluate(&images, &config.class_names, iou_thresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthSpec};
    use crate::network::{build_network, init_weights, parse_config};

    fn tiny() -> (NetworkConfig, LayerGraph) {
        let cfg = parse_config(include_str!("../../../configs/tiny.cfg")).unwrap();
        let g = build_network(&cfg).unwrap();
        (cfg, g)
    }

    fn samples(cfg: &NetworkConfig, n: usize, seed: u64) -> Vec<TrainingSample> {
        generate_synthetic_dataset(&SynthSpec::default(), n, seed)
            .iter()
            .map(|s| prepare_sample(s, cfg).unwrap())
            .collect()
    }

    #[test]
    fn zero_iterations_leave_weights_unchanged() {
        let (cfg, g) = tiny();
        let w = init_weights(&g, 1);
        let config = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train(&g, w.clone(), &samples(&cfg, 2, 0), &config, None, |_| {}).unwrap();
        assert_eq!(out.weights, w);
        assert!(out.log.is_empty());
    }

    #[test]
    fn pure_sgd_probe() {
        let (_, g) = tiny();
        let w = Weights::zeros(&g);
        let config = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut sgd = Sgd::new(&w, &config);
        let mut p = [2.0f32];
        sgd.velocity[1][0][0] = vec![0.0];
        sgd.update(&mut p, &[0.25], 1.0, (1, 0, 0));
        assert_eq!(p, [2.0 - 0.5 * 0.25]);
        sgd.update(&mut p, &[0.25], 1.0, (1, 0, 0));
        assert_eq!(p, [2.0 - 2.0 * 0.5 * 0.25]);
    }

    #[test]
    fn momentum_and_decay_update_equation() {
        let (_, g) = tiny();
        let w = Weights::zeros(&g);
        let config = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut sgd = Sgd::new(&w, &config);
        sgd.velocity[1][0][0] = vec![0.0];
        let mut p = [1.0f32];
        sgd.update(&mut p, &[0.2], 1.0, (1, 0, 0));
        let v1 = 0.2f32 + 0.01;
        assert!((p[0] - (1.0 - 0.1 * v1)).abs() < 1e-7);
        let w1 = p[0];
        sgd.update(&mut p, &[0.2], 1.0, (1, 0, 0));
        let v2 = 0.5 * v1 + 0.2 + 0.01 * w1;
        assert!((p[0] - (w1 - 0.1 * v2)).abs() < 1e-7);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (cfg, g) = tiny();
        let data = samples(&cfg, 4, 3);
        let config = TrainConfig {
            iterations: 3,
            batch_size: 2,
            seed: 5,
            ..Default::default()
        };
        let a = train(&g, init_weights(&g, 2), &data, &config, None, |_| {}).unwrap();
        let b = train(&g, init_weights(&g, 2), &data, &config, None, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn small_step_decreases_loss() {
        let (cfg, g) = tiny();
        let mut decreased = 0;
        for seed in 0..20u64 {
            let data = samples(&cfg, 2, 100 + seed);
            let batch: Vec<&TrainingSample> = data.iter().collect();
            let mut w = init_weights(&g, seed);
            let config = TrainConfig {
                learning_rate: 1e-5,
                momentum: 0.0,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut sgd = Sgd::new(&w, &config);
            // batch statistics differ from the running ones, so compare two
            // training-mode losses on the same batch
            let before = train_step(&g, &mut w, &mut sgd, &batch).unwrap().total;
            let mut probe = Sgd::new(&w, &TrainConfig { learning_rate: 1e-30, ..config.clone() });
            let after = train_step(&g, &mut w.clone(), &mut probe, &batch).unwrap().total;
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 19, "{decreased}/20");
    }

    #[test]
    fn checkpoints_and_log_written() {
        let (cfg, g) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            iterations: 2,
            batch_size: 1,
            checkpoint_every: 1,
            ..Default::default()
        };
        let out = train(&g, init_weights(&g, 0), &samples(&cfg, 2, 0), &config, Some(dir.path()), |_| {}).unwrap();
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().next().unwrap(), "iter,loss_box,loss_obj,loss_cls,loss_total");
        assert_eq!(log.lines().count(), 3);
        let last = Weights::load(&g, dir.path().join("final.frdw")).unwrap();
        assert_eq!(last, out.weights);
        assert_eq!(Weights::load(&g, dir.path().join("ckpt_000002.frdw")).unwrap(), out.weights);
        let img = &samples(&cfg, 1, 9)[0].image;
        assert_eq!(g.forward(&last, img).unwrap(), g.forward(&out.weights, img).unwrap());
    }

    #[test]
    fn non_finite_loss_keeps_last_good_weights() {
        let (cfg, g) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut w = init_weights(&g, 0);
        let head = g.nodes.iter().find(|n| n.name == "head0.conv").unwrap().id;
        w.layers[head][0].conv.bias.data_mut()[0] = f32::INFINITY;
        let config = TrainConfig {
            iterations: 3,
            batch_size: 1,
            ..Default::default()
        };
        let err = train(&g, w.clone(), &samples(&cfg, 1, 0), &config, Some(dir.path()), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(Weights::load(&g, dir.path().join("last_good.frdw")).unwrap(), w);
    }
}
