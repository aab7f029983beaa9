//! Reverse-mode differentiation over a small set of dense-tensor ops.
//!
//! A [`Graph`] is an append-only list of named nodes in topological order.
//! `forward` evaluates every node from leaf bindings; `gradients` runs the
//! adjoint pass for a scalar loss. Both are pure functions of the graph and
//! the bindings.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{mm_acc, mm_nt_acc, mm_tn_acc};
use crate::tensor::Tensor;

pub type NodeId = usize;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding keeping the spatial size (odd kernels center exactly).
    Same,
    /// No padding; output shrinks by kernel-1.
    Valid,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param,
    /// Elementwise sum; rhs may be a scalar or a per-channel `[C]` vector.
    Add(NodeId, NodeId),
    /// Elementwise product; same broadcasting as `Add`.
    Mul(NodeId, NodeId),
    /// `[m,k] x [k,n]`
    MatMul(NodeId, NodeId),
    /// input `[B,H,W,Cin]`, kernel `[KH,KW,Cin,Cout]`, stride 1.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    },
    /// 2x2 max pooling with stride 2; odd trailing row/column dropped.
    MaxPool2(NodeId),
    Relu(NodeId),
    /// Per-channel batch statistics over all leading axes.
    BatchNormTrain {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    /// Normalization with externally supplied (running) statistics.
    BatchNormEval {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: NodeId,
        var: NodeId,
    },
    /// `x[B,I] * w[I,O] + b[O]`
    Affine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean negative log-likelihood of the softmax over logits `[B,K]`
    /// at integer labels `[B]`. Labels are not differentiated.
    SoftmaxXent { logits: NodeId, labels: NodeId },
    Reshape(NodeId, Vec<usize>),
    /// Scalar mean over all elements.
    Mean(NodeId),
    /// Multiplication by a compile-time constant.
    Scale(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
}

fn bcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Full)
    } else if rhs == [1] {
        Some(Broadcast::Scalar)
    } else if rhs.len() == 1 && lhs.last() == Some(&rhs[0]) {
        Some(Broadcast::Channel)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Full,
    Scalar,
    Channel,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn insert(&mut self, name: &str, op: Op, shape: Vec<usize>) -> Result<NodeId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateNode(name.to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            shape,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        self.insert(name, Op::Input, shape)
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        self.insert(name, Op::Param, shape)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shape(a, b, "add")?;
        self.insert(name, Op::Add(a, b), shape)
    }

    pub fn mul(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shape(a, b, "mul")?;
        self.insert(name, Op::Mul(a, b), shape)
    }

    fn elementwise_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if bcast_kind(sa, sb).is_none() {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    pub fn matmul(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        self.insert(name, Op::MatMul(a, b), shape)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let (si, sk) = (&self.nodes[input].shape, &self.nodes[kernel].shape);
        if si.len() != 4 || sk.len() != 4 || si[3] != sk[2] {
            return Err(Error::ShapeMismatch(format!("conv2d: {si:?} * {sk:?}")));
        }
        let (h, w) = (si[1], si[2]);
        let (kh, kw) = (sk[0], sk[1]);
        let (ho, wo) = match padding {
            Padding::Same => (h, w),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d valid: kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                (h - kh + 1, w - kw + 1)
            }
        };
        let shape = vec![si[0], ho, wo, sk[3]];
        self.insert(
            name,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
            shape,
        )
    }

    pub fn maxpool2(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let s = &self.nodes[x].shape;
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::ShapeMismatch(format!("maxpool2: {s:?}")));
        }
        let shape = vec![s[0], s[1] / 2, s[2] / 2, s[3]];
        self.insert(name, Op::MaxPool2(x), shape)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        self.insert(name, Op::Relu(x), shape)
    }

    pub fn batchnorm_train(
        &mut self,
        name: &str,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId> {
        self.check_bn_params(x, scale, shift)?;
        let shape = self.nodes[x].shape.clone();
        self.insert(name, Op::BatchNormTrain { x, scale, shift }, shape)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_eval(
        &mut self,
        name: &str,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: NodeId,
        var: NodeId,
    ) -> Result<NodeId> {
        self.check_bn_params(x, scale, shift)?;
        let c = *self.nodes[x].shape.last().unwrap();
        for stat in [mean, var] {
            if self.nodes[stat].shape != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batchnorm stats: want [{c}], got {:?}",
                    self.nodes[stat].shape
                )));
            }
        }
        let shape = self.nodes[x].shape.clone();
        self.insert(
            name,
            Op::BatchNormEval {
                x,
                scale,
                shift,
                mean,
                var,
            },
            shape,
        )
    }

    fn check_bn_params(&self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<()> {
        let s = &self.nodes[x].shape;
        if s.len() < 2 {
            return Err(Error::ShapeMismatch(format!("batchnorm input: {s:?}")));
        }
        let c = *s.last().unwrap();
        for p in [scale, shift] {
            if self.nodes[p].shape != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batchnorm scale/shift: want [{c}], got {:?}",
                    self.nodes[p].shape
                )));
            }
        }
        Ok(())
    }

    pub fn affine(&mut self, name: &str, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            &self.nodes[x].shape,
            &self.nodes[weight].shape,
            &self.nodes[bias].shape,
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != &vec![sw[1]] {
            return Err(Error::ShapeMismatch(format!(
                "affine: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let shape = vec![sx[0], sw[1]];
        self.insert(name, Op::Affine { x, weight, bias }, shape)
    }

    pub fn softmax_xent(&mut self, name: &str, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let (sl, sy) = (&self.nodes[logits].shape, &self.nodes[labels].shape);
        if sl.len() != 2 || sy != &vec![sl[0]] {
            return Err(Error::ShapeMismatch(format!(
                "softmax_xent: logits {sl:?}, labels {sy:?}"
            )));
        }
        self.insert(name, Op::SoftmaxXent { logits, labels }, vec![1])
    }

    pub fn reshape(&mut self, name: &str, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let m: usize = self.nodes[x].shape.iter().product();
        if n != m {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x].shape
            )));
        }
        self.insert(name, Op::Reshape(x, shape.clone()), shape)
    }

    pub fn mean(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.insert(name, Op::Mean(x), vec![1])
    }

    pub fn scale(&mut self, name: &str, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        self.insert(name, Op::Scale(x, c), shape)
    }

    /// Ids of label inputs (not differentiated, skipped by the checker).
    fn label_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::SoftmaxXent { labels, .. } => Some(labels),
                _ => None,
            })
            .collect()
    }

    /// Evaluate every node; returns values indexed by `NodeId`.
    pub fn forward(&self, bindings: &HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Param => {
                    let t = bindings
                        .get(&node.name)
                        .ok_or_else(|| Error::UnboundNode(node.name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch(format!(
                            "binding `{}`: declared {:?}, bound {:?}",
                            node.name,
                            node.shape,
                            t.shape()
                        )));
                    }
                    t.clone()
                }
                Op::Add(a, b) => ew_forward(&values[*a], &values[*b], |x, y| x + y),
                Op::Mul(a, b) => ew_forward(&values[*a], &values[*b], |x, y| x * y),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut out = Tensor::zeros(vec![m, n]);
                    mm_acc(va.data(), vb.data(), m, k, n, out.data_mut());
                    out
                }
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => conv2d_forward(&values[*input], &values[*kernel], *padding, &node.shape),
                Op::MaxPool2(x) => maxpool2_forward(&values[*x], &node.shape),
                Op::Relu(x) => values[*x].map(|v| v.max(0.0)),
                Op::BatchNormTrain { x, scale, shift } => {
                    bn_train_forward(&values[*x], &values[*scale], &values[*shift])
                }
                Op::BatchNormEval {
                    x,
                    scale,
                    shift,
                    mean,
                    var,
                } => bn_eval_forward(
                    &values[*x],
                    &values[*scale],
                    &values[*shift],
                    &values[*mean],
                    &values[*var],
                ),
                Op::Affine { x, weight, bias } => {
                    let (vx, vw, vb) = (&values[*x], &values[*weight], &values[*bias]);
                    let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                    let mut out = Tensor::zeros(vec![m, n]);
                    for row in 0..m {
                        out.data_mut()[row * n..(row + 1) * n].copy_from_slice(vb.data());
                    }
                    mm_acc(vx.data(), vw.data(), m, k, n, out.data_mut());
                    out
                }
                Op::SoftmaxXent { logits, labels } => {
                    softmax_xent_forward(&values[*logits], &values[*labels])?
                }
                Op::Reshape(x, shape) => values[*x].clone().reshaped(shape.clone())?,
                Op::Mean(x) => {
                    let v = &values[*x];
                    Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
                }
                Op::Scale(x, c) => values[*x].scale(*c),
            };
            if !v.all_finite() {
                return Err(Error::NonFinite(node.name.clone()));
            }
            values.push(v);
        }
        Ok(values)
    }

    /// Public evaluation API: value of every named node.
    pub fn evaluate(&self, bindings: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        let values = self.forward(bindings)?;
        Ok(self
            .nodes
            .iter()
            .zip(values)
            .map(|(n, v)| (n.name.clone(), v))
            .collect())
    }

    /// Reverse-mode gradients of the scalar `loss` node with respect to the
    /// named `wrt` nodes. Disconnected nodes get all-zero gradients.
    pub fn gradients(
        &self,
        loss: &str,
        wrt: &[&str],
        bindings: &HashMap<String, Tensor>,
    ) -> Result<HashMap<String, Tensor>> {
        let values = self.forward(bindings)?;
        let adjoints = self.backward(loss, &values)?;
        let mut out = HashMap::new();
        for &name in wrt {
            let id = self.id(name)?;
            let g = adjoints[id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].shape.clone()));
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }

    /// Forward values plus adjoints for every node; the workhorse behind
    /// `gradients` when callers also need intermediate activations.
    pub fn forward_backward(
        &self,
        loss: &str,
        bindings: &HashMap<String, Tensor>,
    ) -> Result<(Vec<Tensor>, Vec<Option<Tensor>>)> {
        let values = self.forward(bindings)?;
        let adjoints = self.backward(loss, &values)?;
        Ok((values, adjoints))
    }

    fn backward(&self, loss: &str, values: &[Tensor]) -> Result<Vec<Option<Tensor>>> {
        let loss_id = self.id(loss)?;
        if self.nodes[loss_id].shape != [1] {
            return Err(Error::LossNotScalar(loss.to_string()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss_id] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input | Op::Param => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let kind = bcast_kind(&self.nodes[*a].shape, &self.nodes[*b].shape).unwrap();
                    acc(&mut adj, *a, &self.nodes[*a].shape, |t| {
                        t.axpy(1.0, &g);
                    });
                    acc_bcast(&mut adj, *b, &self.nodes[*b].shape, kind, g.data(), |_| 1.0);
                }
                Op::Mul(a, b) => {
                    let kind = bcast_kind(&self.nodes[*a].shape, &self.nodes[*b].shape).unwrap();
                    let (va, vb) = (&values[*a], &values[*b]);
                    let c = *self.nodes[*b].shape.last().unwrap();
                    acc(&mut adj, *a, &self.nodes[*a].shape, |t| {
                        for (i, (o, &gv)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                            let bv = match kind {
                                Broadcast::Full => vb.data()[i],
                                Broadcast::Scalar => vb.data()[0],
                                Broadcast::Channel => vb.data()[i % c],
                            };
                            *o += gv * bv;
                        }
                    });
                    acc_bcast(&mut adj, *b, &self.nodes[*b].shape, kind, g.data(), |i| {
                        va.data()[i]
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    acc(&mut adj, *a, &self.nodes[*a].shape, |t| {
                        mm_nt_acc(g.data(), vb.data(), m, k, n, t.data_mut());
                    });
                    acc(&mut adj, *b, &self.nodes[*b].shape, |t| {
                        mm_tn_acc(va.data(), g.data(), m, k, n, t.data_mut());
                    });
                }
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => {
                    conv2d_backward(
                        &values[*input],
                        &values[*kernel],
                        *padding,
                        &g,
                        &mut adj,
                        *input,
                        *kernel,
                        &self.nodes[*input].shape,
                        &self.nodes[*kernel].shape,
                    );
                }
                Op::MaxPool2(x) => {
                    let vx = &values[*x];
                    let gd = g.clone();
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        maxpool2_backward(vx, &gd, t);
                    });
                }
                Op::Relu(x) => {
                    let vx = &values[*x];
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(vx.data())
                        {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::BatchNormTrain { x, scale, shift } => {
                    bn_train_backward(
                        &values[*x],
                        &values[*scale],
                        &g,
                        &mut adj,
                        (*x, *scale, *shift),
                        &self.nodes[*x].shape,
                    );
                }
                Op::BatchNormEval {
                    x,
                    scale,
                    shift,
                    mean,
                    var,
                } => {
                    bn_eval_backward(
                        &values[*x],
                        &values[*scale],
                        &values[*mean],
                        &values[*var],
                        &g,
                        &mut adj,
                        (*x, *scale, *shift, *mean, *var),
                        &self.nodes[*x].shape,
                    );
                }
                Op::Affine { x, weight, bias } => {
                    let (vx, vw) = (&values[*x], &values[*weight]);
                    let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        mm_nt_acc(g.data(), vw.data(), m, k, n, t.data_mut());
                    });
                    acc(&mut adj, *weight, &self.nodes[*weight].shape, |t| {
                        mm_tn_acc(vx.data(), g.data(), m, k, n, t.data_mut());
                    });
                    acc(&mut adj, *bias, &self.nodes[*bias].shape, |t| {
                        for row in 0..m {
                            for (o, &gv) in
                                t.data_mut().iter_mut().zip(&g.data()[row * n..(row + 1) * n])
                            {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::SoftmaxXent { logits, labels } => {
                    let (vl, vy) = (&values[*logits], &values[*labels]);
                    let gs = g.data()[0];
                    let (b, k) = (vl.shape()[0], vl.shape()[1]);
                    acc(&mut adj, *logits, &self.nodes[*logits].shape, |t| {
                        for row in 0..b {
                            let z = &vl.data()[row * k..(row + 1) * k];
                            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
                            let y = vy.data()[row].round() as usize;
                            let out = &mut t.data_mut()[row * k..(row + 1) * k];
                            for (j, o) in out.iter_mut().enumerate() {
                                let p = (z[j] - m).exp() / denom;
                                let onehot = if j == y { 1.0 } else { 0.0 };
                                *o += gs * (p - onehot) / b as f64;
                            }
                        }
                    });
                    // labels are integer-valued; no adjoint flows into them
                }
                Op::Reshape(x, _) => {
                    let gx = g
                        .clone()
                        .reshaped(self.nodes[*x].shape.clone())
                        .expect("reshape volumes agree by construction");
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        t.axpy(1.0, &gx);
                    });
                }
                Op::Mean(x) => {
                    let n = values[*x].len() as f64;
                    let gv = g.data()[0] / n;
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        for o in t.data_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut adj, *x, &self.nodes[*x].shape, |t| {
                        t.axpy(c, &g);
                    });
                }
            }
            adj[id] = Some(g);
        }
        Ok(adj)
    }

    /// Worst relative discrepancy between reverse-mode gradients and central
    /// finite differences over every bound input/param coordinate (label
    /// inputs excluded).
    pub fn finite_difference_check(
        &self,
        loss: &str,
        bindings: &HashMap<String, Tensor>,
        step: f64,
    ) -> Result<f64> {
        if step <= 0.0 {
            return Err(Error::InvalidArgument("fd step must be > 0".into()));
        }
        let labels = self.label_nodes();
        let targets: Vec<&str> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(id, n)| {
                matches!(n.op, Op::Input | Op::Param) && !labels.contains(id)
            })
            .map(|(_, n)| n.name.as_str())
            .collect();
        let grads = self.gradients(loss, &targets, bindings)?;

        let mut worst = 0.0f64;
        let mut work = bindings.clone();
        for &name in &targets {
            let base = bindings[name].clone();
            for i in 0..base.len() {
                let orig = base.data()[i];
                let probe = |val: f64, work: &mut HashMap<String, Tensor>| -> Result<f64> {
                    work.get_mut(name).unwrap().data_mut()[i] = val;
                    let vals = self.forward(work)?;
                    Ok(vals[self.id(loss)?].data()[0])
                };
                let lp = probe(orig + step, &mut work)?;
                let lm = probe(orig - step, &mut work)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * step);
                if !fd.is_finite() {
                    return Err(Error::NonFinite(format!("fd estimate for `{name}`")));
                }
                let ad = grads[name].data()[i];
                let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// Ensure an adjoint buffer exists, then let `f` accumulate into it.
fn acc(adj: &mut [Option<Tensor>], id: NodeId, shape: &[usize], f: impl FnOnce(&mut Tensor)) {
    if adj[id].is_none() {
        adj[id] = Some(Tensor::zeros(shape.to_vec()));
    }
    f(adj[id].as_mut().unwrap());
}

/// Accumulate a (possibly reduced) adjoint into a broadcast operand:
/// contribution at flat index i is `g[i] * weight(i)`.
fn acc_bcast(
    adj: &mut [Option<Tensor>],
    id: NodeId,
    shape: &[usize],
    kind: Broadcast,
    g: &[f64],
    weight: impl Fn(usize) -> f64,
) {
    acc(adj, id, shape, |t| {
        let out = t.data_mut();
        match kind {
            Broadcast::Full => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += g[i] * weight(i);
                }
            }
            Broadcast::Scalar => {
                let mut s = 0.0;
                for (i, &gv) in g.iter().enumerate() {
                    s += gv * weight(i);
                }
                out[0] += s;
            }
            Broadcast::Channel => {
                let c = out.len();
                for (i, &gv) in g.iter().enumerate() {
                    out[i % c] += gv * weight(i);
                }
            }
        }
    });
}

fn ew_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let kind = bcast_kind(a.shape(), b.shape()).expect("validated at insertion");
    match kind {
        Broadcast::Full => a.zip(b, f).expect("shapes equal"),
        Broadcast::Scalar => {
            let bv = b.data()[0];
            a.map(|x| f(x, bv))
        }
        Broadcast::Channel => {
            let c = b.len();
            let mut out = a.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, b.data()[i % c]);
            }
            out
        }
    }
}

fn pad_offsets(padding: Padding, kh: usize, kw: usize) -> (isize, isize) {
    match padding {
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
        Padding::Valid => (0, 0),
    }
}

fn im2col(
    ex: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    pad: (isize, isize),
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let patch = kh * kw * c;
    col.fill(0.0);
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut col[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - pad.0;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pad.1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    dst[(ky * kw + kx) * c..(ky * kw + kx + 1) * c]
                        .copy_from_slice(&ex[src..src + c]);
                }
            }
        }
    }
}

fn col2im_acc(
    col: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    pad: (isize, isize),
    ho: usize,
    wo: usize,
    ex: &mut [f64],
) {
    let patch = kh * kw * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &col[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - pad.0;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pad.1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    for ch in 0..c {
                        ex[dst + ch] += src[(ky * kw + kx) * c + ch];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, padding: Padding, out_shape: &[usize]) -> Tensor {
    let [b, h, w, cin]: [usize; 4] = input.shape().try_into().unwrap();
    let [kh, kw, _, cout]: [usize; 4] = kernel.shape().try_into().unwrap();
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let pad = pad_offsets(padding, kh, kw);
    let patch = kh * kw * cin;
    let mut out = Tensor::zeros(out_shape.to_vec());
    let mut col = vec![0.0; ho * wo * patch];
    for ex in 0..b {
        let src = &input.data()[ex * h * w * cin..(ex + 1) * h * w * cin];
        im2col(src, h, w, cin, kh, kw, pad, ho, wo, &mut col);
        let dst = &mut out.data_mut()[ex * ho * wo * cout..(ex + 1) * ho * wo * cout];
        mm_acc(&col, kernel.data(), ho * wo, patch, cout, dst);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    g: &Tensor,
    adj: &mut [Option<Tensor>],
    input_id: NodeId,
    kernel_id: NodeId,
    input_shape: &[usize],
    kernel_shape: &[usize],
) {
    let [b, h, w, cin]: [usize; 4] = input.shape().try_into().unwrap();
    let [kh, kw, _, cout]: [usize; 4] = kernel.shape().try_into().unwrap();
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let pad = pad_offsets(padding, kh, kw);
    let patch = kh * kw * cin;

    let mut col = vec![0.0; ho * wo * patch];
    let mut dcol = vec![0.0; ho * wo * patch];
    if adj[input_id].is_none() {
        adj[input_id] = Some(Tensor::zeros(input_shape.to_vec()));
    }
    if adj[kernel_id].is_none() {
        adj[kernel_id] = Some(Tensor::zeros(kernel_shape.to_vec()));
    }
    // split borrows: take both out, put back after
    let mut dinput = adj[input_id].take().unwrap();
    let mut dkernel = adj[kernel_id].take().unwrap();
    for ex in 0..b {
        let src = &input.data()[ex * h * w * cin..(ex + 1) * h * w * cin];
        let gex = &g.data()[ex * ho * wo * cout..(ex + 1) * ho * wo * cout];
        im2col(src, h, w, cin, kh, kw, pad, ho, wo, &mut col);
        // dK += col^T * g
        mm_tn_acc(&col, gex, ho * wo, patch, cout, dkernel.data_mut());
        // dcol = g * K^T
        dcol.fill(0.0);
        mm_nt_acc(gex, kernel.data(), ho * wo, patch, cout, &mut dcol);
        let dst = &mut dinput.data_mut()[ex * h * w * cin..(ex + 1) * h * w * cin];
        col2im_acc(&dcol, h, w, cin, kh, kw, pad, ho, wo, dst);
    }
    adj[input_id] = Some(dinput);
    adj[kernel_id] = Some(dkernel);
}

fn maxpool2_forward(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let [b, h, w, c]: [usize; 4] = x.shape().try_into().unwrap();
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let mut out = Tensor::zeros(out_shape.to_vec());
    let od = out.data_mut();
    let xd = x.data();
    for ex in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((ex * h + oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                            }
                        }
                    }
                    od[((ex * ho + oy) * wo + ox) * c + ch] = best;
                }
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first (row-major) max position.
fn maxpool2_backward(x: &Tensor, g: &Tensor, dx: &mut Tensor) {
    let [b, h, w, c]: [usize; 4] = x.shape().try_into().unwrap();
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let xd = x.data();
    let gd = g.data();
    let dd = dx.data_mut();
    for ex in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx2 in 0..2 {
                            let idx = ((ex * h + oy * 2 + dy) * w + ox * 2 + dx2) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dd[best_idx] += gd[((ex * ho + oy) * wo + ox) * c + ch];
                }
            }
        }
    }
}

/// Per-channel mean/population-variance over all leading axes.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let rows = x.len() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    for (i, &v) in x.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for v in &mut var {
        *v /= rows as f64;
    }
    (mean, var)
}

fn bn_train_forward(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let (mean, var) = channel_stats(x);
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = x.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *o = scale.data()[ch] * (*o - mean[ch]) * inv[ch] + shift.data()[ch];
    }
    out
}

fn bn_train_backward(
    x: &Tensor,
    scale: &Tensor,
    g: &Tensor,
    adj: &mut [Option<Tensor>],
    ids: (NodeId, NodeId, NodeId),
    x_shape: &[usize],
) {
    let (x_id, scale_id, shift_id) = ids;
    let c = *x.shape().last().unwrap();
    let rows = x.len() / c;
    let n = rows as f64;
    let (mean, var) = channel_stats(x);
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut sum_g = vec![0.0; c];
    let mut sum_g_xhat = vec![0.0; c];
    for (i, &gv) in g.data().iter().enumerate() {
        let ch = i % c;
        let xhat = (x.data()[i] - mean[ch]) * inv[ch];
        sum_g[ch] += gv;
        sum_g_xhat[ch] += gv * xhat;
    }

    acc(adj, shift_id, &[c], |t| {
        for (o, &s) in t.data_mut().iter_mut().zip(&sum_g) {
            *o += s;
        }
    });
    acc(adj, scale_id, &[c], |t| {
        for (o, &s) in t.data_mut().iter_mut().zip(&sum_g_xhat) {
            *o += s;
        }
    });
    acc(adj, x_id, x_shape, |t| {
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            let xhat = (x.data()[i] - mean[ch]) * inv[ch];
            *o += scale.data()[ch] * inv[ch]
                * (g.data()[i] - sum_g[ch] / n - xhat * sum_g_xhat[ch] / n);
        }
    });
}

fn bn_eval_forward(x: &Tensor, scale: &Tensor, shift: &Tensor, mean: &Tensor, var: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let inv: Vec<f64> = var.data().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = x.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *o = scale.data()[ch] * (*o - mean.data()[ch]) * inv[ch] + shift.data()[ch];
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn bn_eval_backward(
    x: &Tensor,
    scale: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    g: &Tensor,
    adj: &mut [Option<Tensor>],
    ids: (NodeId, NodeId, NodeId, NodeId, NodeId),
    x_shape: &[usize],
) {
    let (x_id, scale_id, shift_id, mean_id, var_id) = ids;
    let c = *x.shape().last().unwrap();
    let inv: Vec<f64> = var.data().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut sum_g = vec![0.0; c];
    let mut sum_g_xc = vec![0.0; c]; // sum of g * (x - mean)
    for (i, &gv) in g.data().iter().enumerate() {
        let ch = i % c;
        sum_g[ch] += gv;
        sum_g_xc[ch] += gv * (x.data()[i] - mean.data()[ch]);
    }

    acc(adj, x_id, x_shape, |t| {
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *o += g.data()[i] * scale.data()[ch] * inv[ch];
        }
    });
    acc(adj, scale_id, &[c], |t| {
        for ch in 0..c {
            t.data_mut()[ch] += sum_g_xc[ch] * inv[ch];
        }
    });
    acc(adj, shift_id, &[c], |t| {
        for ch in 0..c {
            t.data_mut()[ch] += sum_g[ch];
        }
    });
    acc(adj, mean_id, &[c], |t| {
        for ch in 0..c {
            t.data_mut()[ch] -= scale.data()[ch] * inv[ch] * sum_g[ch];
        }
    });
    acc(adj, var_id, &[c], |t| {
        for ch in 0..c {
            t.data_mut()[ch] -= 0.5 * scale.data()[ch] * inv[ch].powi(3) * sum_g_xc[ch];
        }
    });
}

fn softmax_xent_forward(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for row in 0..b {
        let z = &logits.data()[row * k..(row + 1) * k];
        let y = labels.data()[row].round();
        if y < 0.0 || y as usize >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y as usize];
    }
    Ok(Tensor::scalar(total / b as f64))
}
