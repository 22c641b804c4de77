//! Forward evaluation of a [`LayerGraph`] on a tape.

use super::graph::{LayerGraph, NodeKind};
use super::weights::Weights;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layer::Recorder;
use crate::tensor::Tensor;

impl LayerGraph {
    /// Records the whole network on `rec`'s tape and returns the raw output
    /// of each detect node, coarsest grid first.
    pub fn record(&self, weights: &Weights, rec: &mut Recorder<'_>, image: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = rec.tape.value(image).dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "image is {c}x{h}x{w}, network expects 3x{0}x{0}",
                    self.input_size
                ),
            ));
        }
        if weights.layers.len() != self.nodes.len() {
            return Err(Error::Weights(format!(
                "weights cover {} nodes, graph has {}",
                weights.layers.len(),
                self.nodes.len()
            )));
        }
        let mut values: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for node in &self.nodes {
            let arg = |i: usize| values[node.inputs[i]].expect("producers precede consumers");
            let layers = &weights.layers[node.id];
            let out = match &node.kind {
                NodeKind::Input => image,
                NodeKind::Conv(spec) => rec.conv_block((node.id, 0), spec, &layers[0], arg(0))?,
                NodeKind::Fr(m) => m.record(rec, node.id, layers, arg(0))?,
                NodeKind::Residual(b) => b.record(rec, node.id, layers, arg(0))?,
                NodeKind::Upsample => rec.tape.upsample2x(arg(0))?,
                NodeKind::Concat => rec.tape.concat_channels(arg(0), arg(1))?,
                NodeKind::Detect(_) => arg(0),
            };
            values[node.id] = Some(out);
        }
        Ok(self
            .heads
            .iter()
            .map(|&h| values[h].expect("heads evaluated"))
            .collect())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, weights: &Weights, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        weights.check(self)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let mut rec = Recorder::new(&mut tape, false, false);
        let heads = self.record(weights, &mut rec, x)?;
        Ok(heads.into_iter().map(|h| tape.value(h).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use crate::network::{build_network, init_weights, parse_config, NetworkConfig, Weights};
    use crate::tensor::Tensor;

    fn small(gaussian: bool, classes: usize) -> NetworkConfig {
        let mut cfg = parse_config(include_str!("../../../../configs/tiny.cfg")).unwrap();
        cfg.gaussian_head = gaussian;
        cfg.num_classes = classes;
        cfg.class_names = (0..classes).map(|i| format!("c{i}")).collect();
        cfg
    }

    #[test]
    fn zero_model_gives_zero_heads() {
        let g = build_network(&small(true, 2)).unwrap();
        let w = Weights::zeros(&g);
        let heads = g.forward(&w, &Tensor::zeros(vec![1, 3, 160, 160])).unwrap();
        let shapes: Vec<Vec<usize>> = heads.iter().map(|h| h.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 33, 5, 5], vec![1, 33, 10, 10], vec![1, 33, 20, 20]]);
        assert!(heads.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn plain_head_shapes() {
        let g = build_network(&small(false, 3)).unwrap();
        let heads = g.forward(&init_weights(&g, 1), &Tensor::full(vec![1, 3, 160, 160], 0.3)).unwrap();
        assert!(heads.iter().all(|h| h.shape()[1] == 24));
        assert!(heads.iter().all(Tensor::is_finite));
    }

    #[test]
    fn wrong_image_size_rejected() {
        let g = build_network(&small(true, 2)).unwrap();
        let w = Weights::zeros(&g);
        assert!(g.forward(&w, &Tensor::zeros(vec![1, 3, 128, 128])).is_err());
    }

    #[test]
    fn mismatched_weights_rejected() {
        let g = build_network(&small(true, 2)).unwrap();
        let other = build_network(&small(false, 2)).unwrap();
        let w = Weights::zeros(&other);
        assert!(g.forward(&w, &Tensor::zeros(vec![1, 3, 160, 160])).is_err());
    }
}
