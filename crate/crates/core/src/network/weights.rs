//! Instantiated parameters of a [`LayerGraph`] and the FRDW weights file.
//!
//! FRDW layout (little-endian): magic `FRDW`, u32 version (1), u32 count of
//! parameterized nodes, then per node in graph order: u32 node id, u32 blob
//! length in floats, and the blob as f32 values. A node's blob concatenates
//! its convs in order, each as weight, bias, then BN scale, shift, running
//! mean and running variance when the conv has batch norm.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::LayerGraph;
use crate::error::{Error, Result};
use crate::layer::ConvLayer;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FRDW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Conv layers per graph node; empty for parameter-free nodes.
    pub layers: Vec<Vec<ConvLayer>>,
}

impl Weights {
    /// Zero conv weights and identity batch norm for every node.
    pub fn zeros(graph: &LayerGraph) -> Self {
        Weights {
            layers: graph
                .nodes
                .iter()
                .map(|n| n.kind.convs().iter().map(|c| c.allocate()).collect())
                .collect(),
        }
    }

    /// Checks that every node's tensors match the graph.
    pub fn check(&self, graph: &LayerGraph) -> Result<()> {
        if self.layers.len() != graph.nodes.len() {
            return Err(Error::Weights(format!(
                "weights cover {} nodes, graph has {}",
                self.layers.len(),
                graph.nodes.len()
            )));
        }
        for (node, layers) in graph.nodes.iter().zip(&self.layers) {
            let specs = node.kind.convs();
            if specs.len() != layers.len() {
                return Err(Error::Weights(format!(
                    "node {} has {} conv layers, expected {}",
                    node.name,
                    layers.len(),
                    specs.len()
                )));
            }
            for (spec, layer) in specs.iter().zip(layers) {
                let expected = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
                if layer.conv.weight.shape() != expected
                    || layer.conv.bias.numel() != spec.out_channels
                    || layer.bn.is_some() != spec.batch_norm
                    || layer.bn.as_ref().is_some_and(|bn| bn.channels() != spec.out_channels)
                {
                    return Err(Error::Weights(format!(
                        "node {}: conv weight {:?} does not match {:?}",
                        node.name,
                        layer.conv.weight.shape(),
                        expected
                    )));
                }
            }
        }
        Ok(())
    }

    /// Conv weight and bias elements actually allocated.
    pub fn conv_param_count(&self) -> usize {
        self.layers.iter().flatten().map(ConvLayer::conv_param_count).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.layers.iter().flatten().map(ConvLayer::total_param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|l| l.tensors().iter().all(|t| t.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let populated: Vec<(usize, &Vec<ConvLayer>)> =
            self.layers.iter().enumerate().filter(|(_, l)| !l.is_empty()).collect();
        out.extend_from_slice(&(populated.len() as u32).to_le_bytes());
        for (id, layers) in populated {
            let blob: Vec<f32> = layers
                .iter()
                .flat_map(|l| l.tensors().into_iter().flat_map(|t| t.data().iter().copied()))
                .collect();
            out.extend_from_slice(&(id as u32).to_le_bytes());
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a weights file for `graph`; node ids and blob lengths must
    /// match the graph exactly.
    pub fn from_bytes(graph: &LayerGraph, bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Weights("truncated header".into()))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Weights("bad magic, expected FRDW".into()));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut weights = Weights::zeros(graph);
        let expected: Vec<usize> = graph.parameterized().map(|n| n.id).collect();
        if count != expected.len() {
            return Err(Error::Weights(format!(
                "file has {count} parameterized nodes, graph has {}",
                expected.len()
            )));
        }
        for &id in &expected {
            let file_id = read_u32(&mut r)? as usize;
            if file_id != id {
                return Err(Error::Weights(format!("expected node {id}, found node {file_id}")));
            }
            let len = read_u32(&mut r)? as usize;
            let layers = &mut weights.layers[id];
            let want: usize = layers.iter().map(ConvLayer::total_param_count).sum();
            if len != want {
                return Err(Error::Weights(format!(
                    "node {} ({}) blob has {len} floats, graph needs {want}",
                    id, graph.nodes[id].name
                )));
            }
            for layer in layers.iter_mut() {
                for t in layer.tensors_mut() {
                    for v in t.data_mut() {
                        *v = read_f32(&mut r)?;
                    }
                }
            }
        }
        if !r.is_empty() {
            return Err(Error::Weights(format!("{} trailing bytes", r.len())));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(graph: &LayerGraph, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(graph, &bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Weights("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut &[u8]) -> Result<f32> {
    read_u32(r).map(f32::from_bits)
}

/// Conv weights uniform in `(-b, b)` with `b = sqrt(1 / (K^2 * Cin))`;
/// zero biases; unit BN scale, zero shift, zero mean, unit variance.
pub fn init_weights(graph: &LayerGraph, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::zeros(graph);
    for layer in weights.layers.iter_mut().flatten() {
        let (_, cin, k, _) = layer.conv.weight.dims4().expect("conv weights are rank 4");
        let bound = (1.0 / (k * k * cin) as f64).sqrt() as f32;
        for v in layer.conv.weight.data_mut() {
            // open interval: resample the (measure-zero) lower endpoint
            let mut s = rng.gen_range(-bound..bound);
            while s == -bound {
                s = rng.gen_range(-bound..bound);
            }
            *v = s;
        }
    }
    weights
}
