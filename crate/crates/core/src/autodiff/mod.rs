//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and applies each op's vector-Jacobian product.
//! Nodes are appended in evaluation order, so index order is a topological
//! order.

pub mod gradcheck;
pub(crate) mod kernels;

use kernels::ConvGeometry;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{check_gradients, GradCheckReport};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_statistics: bool,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Upsample2x {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    /// Scalar output whose local gradient w.r.t. each input was computed
    /// together with the forward value.
    Fused {
        inputs: Vec<Var>,
        local_grads: Vec<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How batch norm obtains its normalization statistics.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the current batch's statistics.
    Train { epsilon: T },
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
        epsilon: T,
    },
}

/// Statistics of one training-mode batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) estimate, used for the running-variance update.
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (oc, wc, kh, kw) = self.value(weight).dims4()?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects Cin={wc}"),
            ));
        }
        if self.value(bias).numel() != oc {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries, Cout={oc}", self.value(bias).numel()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {kh}x{kw} with padding {padding}"),
            ));
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: oc,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = vec![n, oc, geometry.out_height(), geometry.out_width()];
        let requires = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            requires,
        ))
    }

    /// Per-channel batch normalization. In training mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} entries for {c} channels", self.value(v).numel()),
                ));
            }
        }
        let plane = h * w;
        let (mean, var, epsilon, stats) = match mode {
            BatchNormMode::Train { epsilon } => {
                if n * plane == 0 {
                    return Err(Error::shape("batch_norm", "empty batch in training mode"));
                }
                let (mean, var) = kernels::channel_stats(self.value(input).data(), n, c, plane);
                let count = n * plane;
                let unbiased = if count > 1 {
                    let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, epsilon, Some(stats))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
                epsilon,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics sized {} for {c} channels", running_mean.len()),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), epsilon, None)
            }
        };
        let mut inv_std = Vec::with_capacity(c);
        for &v in &var {
            let denom = v + epsilon;
            if denom <= T::zero() {
                return Err(Error::Domain("batch_norm variance + epsilon must be positive".into()));
            }
            inv_std.push(denom.sqrt().recip());
        }
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let requires = self.needs(&[input, scale, shift]);
        let var_out = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                batch_statistics: stats.is_some(),
            },
            requires,
        );
        Ok((var_out, stats))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { slope * v });
        let requires = self.needs(&[input]);
        self.push(out, Op::LeakyRelu { input, slope }, requires)
    }

    /// Concatenates along channels, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("(N,H,W) differ: ({na},{ha},{wa}) vs ({nb},{hb},{wb})"),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let requires = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![na, ca + cb, ha, wa], out)?,
            Op::Concat { a, b },
            requires,
        ))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("residual_add", format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let requires = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, requires))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample2x_forward(self.value(input).data(), n * c, h, w);
        let requires = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x { input },
            requires,
        ))
    }

    /// Scalar `sum_i weights[i] * x[i]`; a random projection for gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), self.value(input).numel()),
            ));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum();
        let requires = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            requires,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let ones = vec![T::one(); self.value(input).numel()];
        self.weighted_sum(input, &ones).expect("weights sized from input")
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient with respect to each input.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: T, local_grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(Error::shape("fused_scalar", "one gradient per input required"));
        }
        for (v, g) in inputs.iter().zip(&local_grads) {
            if self.value(*v).numel() != g.len() {
                return Err(Error::shape(
                    "fused_scalar",
                    format!("gradient has {} entries for {} elements", g.len(), self.value(*v).numel()),
                ));
            }
        }
        let requires = self.needs(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                local_grads,
            },
            requires,
        ))
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Back-propagates from a single-element `root`, accumulating into the
    /// gradient buffer of every node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        self.nodes[root.0].value.accumulate_grad(&[T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].value.take_grad() else {
                continue;
            };
            let contributions = self.vjp(idx, &g);
            self.nodes[idx].value.set_grad(g);
            for (parent, grad) in contributions {
                if self.nodes[parent.0].requires_grad {
                    self.nodes[parent.0].value.accumulate_grad(&grad);
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    wants(input),
                );
                let mut out = vec![(*weight, grads.weight), (*bias, grads.bias)];
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                out
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                batch_statistics,
            } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("recorded as rank 4");
                let plane = h * w;
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * plane;
                        for i in start..start + plane {
                            dgamma[ch] = dgamma[ch] + g[i] * normalized[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                if *batch_statistics {
                    let m = T::from_usize(n * plane).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / m;
                            let start = (b * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = k * (m * g[i] - dbeta[ch] - normalized[i] * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch];
                            let start = (b * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
                vec![(*input, dx), (*scale, dgamma), (*shift, dbeta)]
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { *slope * gi })
                    .collect();
                vec![(*input, dx)]
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for img in g.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&img[..ca * plane]);
                    gb.extend_from_slice(&img[ca * plane..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Upsample2x { input } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                vec![(*input, kernels::upsample2x_backward(g, n * c, h, w))]
            }
            Op::WeightedSum { input, weights } => {
                vec![(*input, weights.iter().map(|&w| w * g[0]).collect())]
            }
            Op::Fused {
                inputs,
                local_grads,
            } => inputs
                .iter()
                .zip(local_grads)
                .map(|(v, lg)| (*v, lg.iter().map(|&d| d * g[0]).collect()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full(vec![1, 2, 2, 2], 1.0));
        let b = tape.param(Tensor::full(vec![1, 3, 2, 2], 2.0));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 2, 2]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 8]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn concat_with_empty_channels_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t4([1, 2, 2, 2], (0..8).map(f64::from).collect()));
        let e = tape.constant(Tensor::zeros(vec![1, 0, 2, 2]));
        let c = tape.concat_channels(x, e).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn add_values_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);

        let z = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, z).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
        let p = tape.param(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = tape.add(x, p).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(tape.backward(x).is_err());
    }
}
