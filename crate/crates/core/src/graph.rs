//! Reverse-mode autodiff over a recorded tape of tensor ops.
//!
//! A `Graph` records every forward op in issue order (which is already a
//! topological order), then `backward` walks the tape in reverse applying
//! each op's chain rule. Values are immutable once written; gradients are
//! accumulated in a parallel buffer keyed by node index.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Element, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

// Each variant records the full forward context even where backward does not
// need every field (out_pad, the custom forward fn).
#[allow(dead_code)]
enum Op<E: Element> {
    Leaf {
        trainable: bool,
    },
    Reshape {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        spatial: usize,
        eps: E,
        mean: Vec<E>,
        var: Vec<E>,
        training: bool,
    },
    LeakyRelu {
        x: usize,
        alpha: E,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: E,
    },
    MseMean {
        a: usize,
        b: usize,
    },
    SumSqDiff {
        a: usize,
        b: usize,
        mask: Vec<E>,
    },
    CosineSum {
        pred: usize,
        target: Tensor<E>,
        edges: Arc<Vec<(usize, usize)>>,
        mask: Vec<E>,
    },
    LimbLenSum {
        pred: usize,
        target: Tensor<E>,
        edges: Arc<Vec<(usize, usize)>>,
        mask: Vec<E>,
    },
    CustomUnary {
        x: usize,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

impl<E: Element> Op<E> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Reshape { .. } => "reshape",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::MseMean { .. } => "mse_mean",
            Op::SumSqDiff { .. } => "sum_sq_diff",
            Op::CosineSum { .. } => "cosine_sum",
            Op::LimbLenSum { .. } => "limb_len_sum",
            Op::CustomUnary { .. } => "custom_unary",
        }
    }
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    label: Option<String>,
}

/// Gradients of a scalar output w.r.t. every recorded node, zero where unused.
#[derive(Debug)]
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient tensor for `v`; materializes zeros for untouched nodes.
    pub fn get(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }
}

/// Recorded computation; issue order doubles as topological order.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Verify every op output is finite, failing with the layer's label.
    pub fn with_finite_checks() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn label(&mut self, v: Var, name: &str) {
        self.nodes[v.0].label = Some(name.to_string());
    }

    fn describe(&self, idx: usize) -> String {
        match &self.nodes[idx].label {
            Some(l) => format!("{} ({})", l, self.nodes[idx].op.kind()),
            None => format!("node {idx} ({})", self.nodes[idx].op.kind()),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            let idx = self.nodes.len();
            self.nodes.push(Node {
                value: Tensor::scalar(E::ZERO),
                op,
                label: None,
            });
            return Err(Error::Numeric(format!(
                "non-finite output in {}",
                self.describe(idx)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable leaf (network input or constant).
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { trainable: false },
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (parameter).
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { trainable: true },
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape { x: x.0 })
    }

    /// y[N,O] = x[N,I] . w[I,O] + b[O]
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "dense: input {xs:?} vs weight {ws:?} on the inner axis"
            )));
        }
        if bs != [ws[1]] {
            return Err(Error::ShapeMismatch(format!(
                "dense: bias {bs:?} vs fan-out {}",
                ws[1]
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![E::ZERO; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        matmul_acc(&mut out, self.value(x).data(), self.value(w).data(), n, i, o);
        self.push(
            Tensor::new(vec![n, o], out)?,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    /// y[N,O,OH,OW] from x[N,C,H,W] and w[O,C,K,K]; OH = (H + 2p - K)/s + 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input {xs:?} vs weight {ws:?} on the channel axis"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[3] != k {
            return Err(Error::ShapeMismatch("conv2d: non-square kernel".into()));
        }
        if self.value(b).shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias {:?} vs out channels {o}",
                self.value(b).shape()
            )));
        }
        let oh = conv_out(h, k, stride, pad)?;
        let ow = conv_out(wd, k, stride, pad)?;
        let ckk = c * k * k;
        let sp = oh * ow;
        let mut out = vec![E::ZERO; n * o * sp];
        let mut col = vec![E::ZERO; ckk * sp];
        for s in 0..n {
            let xin = &self.value(x).data()[s * c * h * wd..(s + 1) * c * h * wd];
            im2col(xin, c, h, wd, k, stride, pad, oh, ow, &mut col);
            let yout = &mut out[s * o * sp..(s + 1) * o * sp];
            for (oc, &bias) in self.value(b).data().iter().enumerate() {
                yout[oc * sp..(oc + 1) * sp].fill(bias);
            }
            matmul_acc(yout, self.value(w).data(), &col, o, ckk, sp);
        }
        self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    /// Transposed convolution with zero insertion; w[C,O,K,K].
    /// OH = (H - 1)*s - 2p + K + out_pad.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "deconv2d: input {xs:?} vs weight {ws:?} on the channel axis"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[1], ws[2]);
        if ws[3] != k {
            return Err(Error::ShapeMismatch("deconv2d: non-square kernel".into()));
        }
        if self.value(b).shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "deconv2d: bias {:?} vs out channels {o}",
                self.value(b).shape()
            )));
        }
        let oh = deconv_out(h, k, stride, pad, out_pad)?;
        let ow = deconv_out(wd, k, stride, pad, out_pad)?;
        let okk = o * k * k;
        let sp_in = h * wd;
        let sp_out = oh * ow;
        let mut out = vec![E::ZERO; n * o * sp_out];
        let mut col = vec![E::ZERO; okk * sp_in];
        for s in 0..n {
            let xin = &self.value(x).data()[s * c * sp_in..(s + 1) * c * sp_in];
            col.fill(E::ZERO);
            // col[OKK, HW] = W^T[OKK, C] . x[C, HW]
            matmul_at_b_acc(&mut col, self.value(w).data(), xin, okk, c, sp_in);
            let yout = &mut out[s * o * sp_out..(s + 1) * o * sp_out];
            for (oc, &bias) in self.value(b).data().iter().enumerate() {
                yout[oc * sp_out..(oc + 1) * sp_out].fill(bias);
            }
            col2im_scatter(&col, o, h, wd, k, stride, pad, oh, ow, yout);
        }
        self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Deconv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                out_pad,
            },
        )
    }

    /// Batch normalization. Shapes: x[N,C,H,W] normalizes per C over (N,H,W);
    /// x[N,F] normalizes per F over N. Training mode uses batch statistics
    /// (retrievable via `batch_stats`); eval mode is an affine map under the
    /// provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        training: bool,
        running: Option<(&[E], &[E])>,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (channels, spatial) = match xs.len() {
            2 => (xs[1], 1),
            4 => (xs[1], xs[2] * xs[3]),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "batchnorm: rank-{r} input unsupported"
                )))
            }
        };
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm: gamma/beta must be [{channels}]"
            )));
        }
        let n = xs[0];
        let m = n * spatial;
        let eps_e = E::from_f64(eps);

        let (mean, var) = if training {
            let data = self.value(x).data();
            let mut mean = vec![E::ZERO; channels];
            let mut var = vec![E::ZERO; channels];
            let minv = E::from_f64(1.0 / m as f64);
            for c in 0..channels {
                let mut acc = E::ZERO;
                for s in 0..n {
                    let base = (s * channels + c) * spatial;
                    for i in 0..spatial {
                        acc += data[base + i];
                    }
                }
                let mu = acc * minv;
                let mut vacc = E::ZERO;
                for s in 0..n {
                    let base = (s * channels + c) * spatial;
                    for i in 0..spatial {
                        let d = data[base + i] - mu;
                        vacc += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = vacc * minv;
            }
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::Usage("batchnorm eval mode requires running statistics".into())
            })?;
            if rm.len() != channels || rv.len() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "batchnorm: running stats length {} vs {channels} channels",
                    rm.len()
                )));
            }
            (rm.to_vec(), rv.to_vec())
        };

        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![E::ZERO; data.len()];
        for c in 0..channels {
            let inv = E::ONE / (var[c] + eps_e).sqrt();
            let scale = g[c] * inv;
            let shift = bt[c] - g[c] * mean[c] * inv;
            for s in 0..n {
                let base = (s * channels + c) * spatial;
                for i in 0..spatial {
                    out[base + i] = data[base + i] * scale + shift;
                }
            }
        }
        self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                spatial,
                eps: eps_e,
                mean,
                var,
                training,
            },
        )
    }

    /// Batch statistics saved by a training-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[E], &[E])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                training: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let a = E::from_f64(alpha);
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { a * v })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LeakyRelu { x: x.0, alpha: a })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| E::ONE / (E::ONE + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sigmoid { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64(c);
        let out: Vec<E> = self.value(x).data().iter().map(|&v| v * ce).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale { x: x.0, c: ce })
    }

    /// Mean over all cells of the squared difference; both sides differentiable.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let m = self.value(a).numel() as f64;
        let mut acc = 0.0;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        self.push(
            Tensor::scalar(E::from_f64(acc / m)),
            Op::MseMean { a: a.0, b: b.0 },
        )
    }

    /// Sum over samples n of mask[n] * sum of squared differences in row n.
    /// First axis is the batch; mask length must match it.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "sum_sq_diff: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let n = self.value(a).shape()[0];
        if mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sum_sq_diff: mask length {} vs batch {n}",
                mask.len()
            )));
        }
        let row = self.value(a).numel() / n;
        let mut acc = 0.0;
        for s in 0..n {
            if mask[s] == 0.0 {
                continue;
            }
            let mut race = 0.0;
            for i in s * row..(s + 1) * row {
                let d = self.value(a).data()[i].to_f64() - self.value(b).data()[i].to_f64();
                race += d * d;
            }
            acc += mask[s] * race;
        }
        let me: Vec<E> = mask.iter().map(|&v| E::from_f64(v)).collect();
        self.push(
            Tensor::scalar(E::from_f64(acc)),
            Op::SumSqDiff {
                a: a.0,
                b: b.0,
                mask: me,
            },
        )
    }

    /// Sum over samples and limbs of the cosine between predicted and target
    /// limb vectors. `pred` is [N, J*3]; `target` a constant of the same shape;
    /// `edges` are (parent, child) joint indices. Degenerate limbs (either norm
    /// below 1e-9) contribute zero with zero gradient.
    pub fn cosine_sum(
        &mut self,
        pred: Var,
        target: &Tensor<E>,
        edges: &Arc<Vec<(usize, usize)>>,
        mask: &[f64],
    ) -> Result<Var> {
        self.limb_reduce(pred, target, edges, mask, true)
    }

    /// Sum over samples and limbs of the Euclidean distance between target and
    /// predicted limb vectors.
    pub fn limb_len_sum(
        &mut self,
        pred: Var,
        target: &Tensor<E>,
        edges: &Arc<Vec<(usize, usize)>>,
        mask: &[f64],
    ) -> Result<Var> {
        self.limb_reduce(pred, target, edges, mask, false)
    }

    fn limb_reduce(
        &mut self,
        pred: Var,
        target: &Tensor<E>,
        edges: &Arc<Vec<(usize, usize)>>,
        mask: &[f64],
        cosine: bool,
    ) -> Result<Var> {
        let ps = self.value(pred).shape().to_vec();
        if ps.len() != 2 || ps[1] % 3 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "limb term: pred must be [N, J*3], got {ps:?}"
            )));
        }
        if target.shape() != ps.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "limb term: target {:?} vs pred {ps:?}",
                target.shape()
            )));
        }
        let n = ps[0];
        if mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "limb term: mask length {} vs batch {n}",
                mask.len()
            )));
        }
        let joints = ps[1] / 3;
        for &(p, c) in edges.iter() {
            if p >= joints || c >= joints {
                return Err(Error::ShapeMismatch(format!(
                    "limb term: edge ({p},{c}) out of {joints} joints"
                )));
            }
        }
        let mut acc = 0.0;
        for s in 0..n {
            if mask[s] == 0.0 {
                continue;
            }
            let prow = &self.value(pred).data()[s * ps[1]..(s + 1) * ps[1]];
            let trow = &target.data()[s * ps[1]..(s + 1) * ps[1]];
            for &(pa, ch) in edges.iter() {
                let pv = limb_vec_f64(prow, pa, ch);
                let tv = limb_vec_f64(trow, pa, ch);
                acc += mask[s]
                    * if cosine {
                        cosine_of(&tv, &pv)
                    } else {
                        let d = [tv[0] - pv[0], tv[1] - pv[1], tv[2] - pv[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    };
            }
        }
        let me: Vec<E> = mask.iter().map(|&v| E::from_f64(v)).collect();
        let op = if cosine {
            Op::CosineSum {
                pred: pred.0,
                target: target.clone(),
                edges: Arc::clone(edges),
                mask: me,
            }
        } else {
            Op::LimbLenSum {
                pred: pred.0,
                target: target.clone(),
                edges: Arc::clone(edges),
                mask: me,
            }
        };
        self.push(Tensor::scalar(E::from_f64(acc)), op)
    }

    /// Elementwise op with caller-supplied value/derivative rules. Exists so
    /// tests can inject deliberately wrong derivatives against grad_check.
    pub fn custom_unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| E::from_f64(f(v.to_f64())))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::CustomUnary { x: x.0, f, df })
    }

    /// Backward from a scalar loss, seeding with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(E::ONE))
    }

    /// Backward from any recorded value with an explicit seed gradient.
    pub fn backward_seeded(&self, output: Var, seed: Tensor<E>) -> Result<Gradients<E>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: unknown output var".into()));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch(format!(
                "seed gradient {:?} vs output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g_out, &mut grads)?;
            grads[idx] = Some(g_out);
        }

        if self.check_finite {
            for (idx, g) in grads.iter().enumerate() {
                if let Some(t) = g {
                    if !t.all_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient at {}",
                            self.describe(idx)
                        )));
                    }
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g_out: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let val = |i: usize| -> &Tensor<E> { &self.nodes[i].value };
        let mut acc = |i: usize, add: &mut dyn FnMut(&mut [E])| {
            let slot =
                grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
            add(slot.data_mut());
        };

        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Reshape { x } => {
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    for (g, &v) in gx.iter_mut().zip(go) {
                        *g += v;
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (n, i) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[1];
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    matmul_a_bt_acc(gx, go, val(*w).data(), n, o, i);
                });
                acc(*w, &mut |gw| {
                    matmul_at_b_acc(gw, val(*x).data(), go, i, n, o);
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        for c in 0..o {
                            gb[c] += go[r * o + c];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let os = g_out.shape();
                let (oh, ow) = (os[2], os[3]);
                let ckk = c * k * k;
                let sp = oh * ow;
                let mut col = vec![E::ZERO; ckk * sp];
                let mut dcol = vec![E::ZERO; ckk * sp];
                for s in 0..n {
                    let gy = &g_out.data()[s * o * sp..(s + 1) * o * sp];
                    let xin = &val(*x).data()[s * c * h * wd..(s + 1) * c * h * wd];
                    im2col(xin, c, h, wd, k, *stride, *pad, oh, ow, &mut col);
                    acc(*w, &mut |gw| {
                        matmul_a_bt_acc(gw, gy, &col, o, sp, ckk);
                    });
                    acc(*b, &mut |gb| {
                        for oc in 0..o {
                            let mut s_acc = E::ZERO;
                            for p in 0..sp {
                                s_acc += gy[oc * sp + p];
                            }
                            gb[oc] += s_acc;
                        }
                    });
                    dcol.fill(E::ZERO);
                    matmul_at_b_acc(&mut dcol, val(*w).data(), gy, ckk, o, sp);
                    acc(*x, &mut |gx| {
                        let gxs = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                        col2im_scatter(&dcol, c, oh, ow, k, *stride, *pad, h, wd, gxs);
                    });
                }
            }
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
                ..
            } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[1], ws[2]);
                let os = g_out.shape();
                let (oh, ow) = (os[2], os[3]);
                let okk = o * k * k;
                let sp_in = h * wd;
                let sp_out = oh * ow;
                let mut dcol = vec![E::ZERO; okk * sp_in];
                for s in 0..n {
                    let gy = &g_out.data()[s * o * sp_out..(s + 1) * o * sp_out];
                    let xin = &val(*x).data()[s * c * sp_in..(s + 1) * c * sp_in];
                    // dcol[OKK, HW] gathers gy at the scatter positions.
                    im2col(gy, o, oh, ow, k, *stride, *pad, h, wd, &mut dcol);
                    acc(*x, &mut |gx| {
                        let gxs = &mut gx[s * c * sp_in..(s + 1) * c * sp_in];
                        matmul_acc(gxs, val(*w).data(), &dcol, c, okk, sp_in);
                    });
                    acc(*w, &mut |gw| {
                        matmul_a_bt_acc(gw, xin, &dcol, c, sp_in, okk);
                    });
                    acc(*b, &mut |gb| {
                        for oc in 0..o {
                            let mut s_acc = E::ZERO;
                            for p in 0..sp_out {
                                s_acc += gy[oc * sp_out + p];
                            }
                            gb[oc] += s_acc;
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                eps,
                mean,
                var,
                training,
            } => {
                let xs = val(*x).shape();
                let n = xs[0];
                let channels = mean.len();
                let m = n * spatial;
                let minv = E::from_f64(1.0 / m as f64);
                let xd = val(*x).data();
                let g = val(*gamma).data();
                let go = g_out.data();
                for cch in 0..channels {
                    let inv = E::ONE / (var[cch] + *eps).sqrt();
                    let mu = mean[cch];
                    // Channel reductions.
                    let mut sum_dy = E::ZERO;
                    let mut sum_dy_xhat = E::ZERO;
                    let mut sum_dxhat = E::ZERO;
                    let mut sum_dxhat_xc = E::ZERO;
                    let mut sum_xc = E::ZERO;
                    for s in 0..n {
                        let base = (s * channels + cch) * spatial;
                        for i in 0..*spatial {
                            let dy = go[base + i];
                            let xc = xd[base + i] - mu;
                            let xhat = xc * inv;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            let dxhat = dy * g[cch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xc += dxhat * xc;
                            sum_xc += xc;
                        }
                    }
                    acc(*beta, &mut |gb| gb[cch] += sum_dy);
                    acc(*gamma, &mut |gg| gg[cch] += sum_dy_xhat);
                    if *training {
                        let half = E::from_f64(0.5);
                        let two = E::from_f64(2.0);
                        let dvar = -(sum_dxhat_xc) * half * inv * inv * inv;
                        let dmean = -(sum_dxhat) * inv + dvar * (-(two) * sum_xc * minv);
                        acc(*x, &mut |gx| {
                            for s in 0..n {
                                let base = (s * channels + cch) * spatial;
                                for i in 0..*spatial {
                                    let dy = go[base + i];
                                    let xc = xd[base + i] - mu;
                                    gx[base + i] += dy * g[cch] * inv
                                        + dvar * two * xc * minv
                                        + dmean * minv;
                                }
                            }
                        });
                    } else {
                        acc(*x, &mut |gx| {
                            for s in 0..n {
                                let base = (s * channels + cch) * spatial;
                                for i in 0..*spatial {
                                    gx[base + i] += go[base + i] * g[cch] * inv;
                                }
                            }
                        });
                    }
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xd = val(*x).data();
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += if xd[i] > E::ZERO {
                            go[i]
                        } else {
                            *alpha * go[i]
                        };
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = self.nodes[idx].value.data();
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += go[i] * yd[i] * (E::ONE - yd[i]);
                    }
                });
            }
            Op::Add { a, b } => {
                let go = g_out.data();
                acc(*a, &mut |ga| {
                    for (g, &v) in ga.iter_mut().zip(go) {
                        *g += v;
                    }
                });
                acc(*b, &mut |gb| {
                    for (g, &v) in gb.iter_mut().zip(go) {
                        *g += v;
                    }
                });
            }
            Op::Scale { x, c } => {
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    for (g, &v) in gx.iter_mut().zip(go) {
                        *g += *c * v;
                    }
                });
            }
            Op::MseMean { a, b } => {
                let seed = g_out.data()[0];
                let m = E::from_f64(2.0 / val(*a).numel() as f64) * seed;
                let ad = val(*a).data();
                let bd = val(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += m * (ad[i] - bd[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= m * (ad[i] - bd[i]);
                    }
                });
            }
            Op::SumSqDiff { a, b, mask } => {
                let seed = g_out.data()[0];
                let two = E::from_f64(2.0);
                let n = mask.len();
                let row = val(*a).numel() / n;
                let ad = val(*a).data();
                let bd = val(*b).data();
                acc(*a, &mut |ga| {
                    for s in 0..n {
                        let w = two * mask[s] * seed;
                        for i in s * row..(s + 1) * row {
                            ga[i] += w * (ad[i] - bd[i]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for s in 0..n {
                        let w = two * mask[s] * seed;
                        for i in s * row..(s + 1) * row {
                            gb[i] -= w * (ad[i] - bd[i]);
                        }
                    }
                });
            }
            Op::CosineSum {
                pred,
                target,
                edges,
                mask,
            } => {
                let seed = g_out.data()[0].to_f64();
                let n = mask.len();
                let cols = val(*pred).shape()[1];
                let pd = val(*pred).data();
                let td = target.data();
                acc(*pred, &mut |gp| {
                    for s in 0..n {
                        let w = mask[s].to_f64() * seed;
                        if w == 0.0 {
                            continue;
                        }
                        let prow = &pd[s * cols..(s + 1) * cols];
                        let trow = &td[s * cols..(s + 1) * cols];
                        for &(pa, ch) in edges.iter() {
                            let pv = limb_vec_f64(prow, pa, ch);
                            let tv = limb_vec_f64(trow, pa, ch);
                            let np = norm3(&pv);
                            let nt = norm3(&tv);
                            if np < DEGENERATE_LIMB || nt < DEGENERATE_LIMB {
                                continue;
                            }
                            let dot = pv[0] * tv[0] + pv[1] * tv[1] + pv[2] * tv[2];
                            let cosv = dot / (np * nt);
                            // d cos / d pred_limb = (t/|t| - cos * p/|p|) / |p|
                            for ax in 0..3 {
                                let gl = w * (tv[ax] / nt - cosv * pv[ax] / np) / np;
                                let gbase = s * cols;
                                gp[gbase + ch * 3 + ax] += E::from_f64(gl);
                                gp[gbase + pa * 3 + ax] -= E::from_f64(gl);
                            }
                        }
                    }
                });
            }
            Op::LimbLenSum {
                pred,
                target,
                edges,
                mask,
            } => {
                let seed = g_out.data()[0].to_f64();
                let n = mask.len();
                let cols = val(*pred).shape()[1];
                let pd = val(*pred).data();
                let td = target.data();
                acc(*pred, &mut |gp| {
                    for s in 0..n {
                        let w = mask[s].to_f64() * seed;
                        if w == 0.0 {
                            continue;
                        }
                        let prow = &pd[s * cols..(s + 1) * cols];
                        let trow = &td[s * cols..(s + 1) * cols];
                        for &(pa, ch) in edges.iter() {
                            let pv = limb_vec_f64(prow, pa, ch);
                            let tv = limb_vec_f64(trow, pa, ch);
                            let d = [tv[0] - pv[0], tv[1] - pv[1], tv[2] - pv[2]];
                            let nd = norm3(&d);
                            if nd < DEGENERATE_LIMB {
                                continue;
                            }
                            for ax in 0..3 {
                                let gl = -w * d[ax] / nd;
                                let gbase = s * cols;
                                gp[gbase + ch * 3 + ax] += E::from_f64(gl);
                                gp[gbase + pa * 3 + ax] -= E::from_f64(gl);
                            }
                        }
                    }
                });
            }
            Op::CustomUnary { x, df, .. } => {
                let xd = val(*x).data();
                let go = g_out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += go[i] * E::from_f64(df(xd[i].to_f64()));
                    }
                });
            }
        }
        Ok(())
    }
}

const DEGENERATE_LIMB: f64 = 1e-9;

fn limb_vec_f64<E: Element>(row: &[E], parent: usize, child: usize) -> [f64; 3] {
    [
        row[child * 3].to_f64() - row[parent * 3].to_f64(),
        row[child * 3 + 1].to_f64() - row[parent * 3 + 1].to_f64(),
        row[child * 3 + 2].to_f64() - row[parent * 3 + 2].to_f64(),
    ]
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cosine_of(t: &[f64; 3], p: &[f64; 3]) -> f64 {
    let nt = norm3(t);
    let np = norm3(p);
    if nt < DEGENERATE_LIMB || np < DEGENERATE_LIMB {
        return 0.0;
    }
    (t[0] * p[0] + t[1] * p[1] + t[2] * p[2]) / (nt * np)
}

/// Output size of a convolution along one axis.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidSpec("conv: kernel and stride must be >= 1".into()));
    }
    let padded = h + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "conv: input {h} too small for kernel {k} with pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output size of a transposed convolution along one axis.
pub fn deconv_out(h: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidSpec(
            "deconv: kernel and stride must be >= 1".into(),
        ));
    }
    let raw = (h - 1) * stride + k + out_pad;
    if raw < 2 * pad {
        return Err(Error::ShapeMismatch(format!(
            "deconv: padding {pad} exceeds output extent {raw}"
        )));
    }
    Ok(raw - 2 * pad)
}

/// Gather input patches into col[C*K*K, OH*OW]; out-of-bounds reads are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    input: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), c * k * k * oh * ow);
    let sp = oh * ow;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ch * k + kh) * k + kw) * sp..((ch * k + kh) * k + kw + 1) * sp];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(E::ZERO);
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            in_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add col[C*K*K, IH*IW] back onto an output plane [C, OH, OW],
/// mapping (ih, iw, kh, kw) -> (ih*stride - pad + kh, iw*stride - pad + kw).
#[allow(clippy::too_many_arguments)]
fn col2im_scatter<E: Element>(
    col: &[E],
    c: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    debug_assert_eq!(col.len(), c * k * k * ih * iw);
    debug_assert_eq!(out.len(), c * oh * ow);
    let sp = ih * iw;
    for ch in 0..c {
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ch * k + kh) * k + kw) * sp..((ch * k + kh) * k + kw + 1) * sp];
                for y in 0..ih {
                    let ty = (y * stride + kh) as isize - pad as isize;
                    if ty < 0 || ty >= oh as isize {
                        continue;
                    }
                    let in_row = &row[y * iw..(y + 1) * iw];
                    let out_row = &mut plane[ty as usize * ow..(ty as usize + 1) * ow];
                    for (x, &v) in in_row.iter().enumerate() {
                        let tx = (x * stride + kw) as isize - pad as isize;
                        if tx < 0 || tx >= ow as isize {
                            continue;
                        }
                        out_row[tx as usize] += v;
                    }
                }
            }
        }
    }
}
