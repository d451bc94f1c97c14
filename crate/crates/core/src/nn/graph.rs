//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. When recording is off
//! (inference) no tape is kept and intermediate values are released as soon
//! as the caller drops their [`Var`] handles.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Statistics source for a batch-norm layer.
pub enum BnStats<'a> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with stored running statistics.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

/// Batch statistics observed by a batch-norm layer in training mode; the
/// caller folds them into the running estimates.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f32>,
    /// Unbiased variance estimate.
    pub var: Vec<f32>,
}

pub const BN_EPSILON: f32 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<u8>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    observations: Vec<BnObservation>,
}

impl Graph {
    /// A graph that records a tape for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            observations: Vec::new(),
        }
    }

    /// A graph that keeps no tape.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
            observations: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let value = Rc::new(value);
        let node = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::clone(&value),
            op,
        });
        Var {
            value,
            node: Some(node),
        }
    }

    fn untracked(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    fn emit(&mut self, value: Tensor, inputs_tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if self.record && inputs_tracked {
            self.push(value, op())
        } else {
            Self::untracked(value)
        }
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        Self::untracked(value)
    }

    /// A differentiable input whose gradient can be read back.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        if self.record {
            self.push(value, Op::Leaf)
        } else {
            Self::untracked(value)
        }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.shared(id);
        if self.record {
            let node = self.nodes.len();
            self.nodes.push(Node {
                value: Rc::clone(&value),
                op: Op::Param(id),
            });
            Var {
                value,
                node: Some(node),
            }
        } else {
            Var { value, node: None }
        }
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, dilation: usize) -> Result<Var> {
        let [cout, cin, kh, kw] = w.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv kernel must be square and odd, got {kh}×{kw}"
            )));
        }
        if x.shape()[1] != cin {
            return Err(Error::Shape(format!(
                "conv expects {cin} input channels, got {}",
                x.shape()[1]
            )));
        }
        if let Some(b) = b {
            if b.shape() != [1, cout, 1, 1] {
                return Err(Error::Shape(format!("conv bias shape {:?}", b.shape())));
            }
        }
        let geom = ConvGeom {
            kernel: kh,
            dilation,
        };
        let out = kernels::conv2d_forward(x.value(), w.value(), b.map(Var::value), geom);
        let tracked = x.tracked() || w.tracked() || b.is_some_and(Var::tracked);
        Ok(self.emit(out, tracked, || Op::Conv {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            geom,
        }))
    }

    /// Returns the normalised output and, for [`BnStats::Batch`], the
    /// observed batch mean and biased variance.
    pub fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>)> {
        let c = x.shape()[1];
        if gamma.shape() != [1, c, 1, 1] || beta.shape() != [1, c, 1, 1] {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got gamma {:?} beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (mean, var, observed, batch_stats) = match stats {
            BnStats::Batch => {
                let (m, v) = kernels::channel_moments(x.value());
                (m.clone(), v.clone(), Some((m, v)), true)
            }
            BnStats::Fixed { mean, var } => (mean.to_vec(), var.to_vec(), None, false),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let out =
            kernels::batch_norm_apply(x.value(), &mean, &inv_std, gamma.value(), beta.value());
        let tracked = x.tracked() || gamma.tracked() || beta.tracked();
        let var = self.emit(out, tracked, || Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            inv_std,
            batch_stats,
        });
        Ok((var, observed))
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let mut out = x.value().clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.emit(out, x.tracked(), || Op::Relu { x: x.clone() })
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let mut out = x.value().clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.emit(out, x.tracked(), || Op::Sigmoid { x: x.clone() })
    }

    pub fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let [_, _, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "2×2 pooling needs even spatial size, got {h}×{w}"
            )));
        }
        let (out, arg) = kernels::max_pool2_forward(x.value());
        Ok(self.emit(out, x.tracked(), || Op::MaxPool { x: x.clone(), arg }))
    }

    pub fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Shape("upsampling factor must be positive".into()));
        }
        let out = kernels::upsample_bilinear_forward(x.value(), factor);
        Ok(self.emit(out, x.tracked(), || Op::Upsample {
            x: x.clone(),
            factor,
        }))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
            .shape();
        let mut channels = 0;
        for x in xs {
            let s = x.shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::Shape(format!(
                    "concat shape mismatch {first:?} vs {s:?}"
                )));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let mut out = Tensor::zeros([n, channels, h, w]);
        for s in 0..n {
            let dst = out.sample_mut(s);
            let mut off = 0;
            for x in xs {
                let src = x.value().sample(s);
                dst[off..off + src.len()].copy_from_slice(src);
                off += x.shape()[1] * hw;
            }
        }
        let tracked = xs.iter().any(|x| x.tracked());
        Ok(self.emit(out, tracked, || Op::Concat {
            xs: xs.iter().map(|&x| x.clone()).collect(),
        }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        Ok(self.emit(out, a.tracked() || b.tracked(), || Op::Add {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn observe_batch_norm(&mut self, obs: BnObservation) {
        self.observations.push(obs);
    }

    pub fn take_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.observations)
    }

    /// Propagate the given output gradients back through the tape.
    pub fn backward(&self, seeds: &[(&Var, Tensor)]) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Numerical(
                "backward on a graph that did not record".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            if var.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    var.shape()
                )));
            }
            accumulate(&mut grads, var, g.clone());
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(*id, g);
                    }
                },
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        x.value(),
                        w.value(),
                        &g,
                        *geom,
                        x.tracked(),
                        b.as_ref().is_some_and(Var::tracked),
                    );
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, x, dx);
                    }
                    accumulate(&mut grads, w, cg.weight);
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let bg = kernels::batch_norm_backward(
                        x.value(),
                        mean,
                        inv_std,
                        gamma.value(),
                        &g,
                        *batch_stats,
                        x.tracked(),
                    );
                    if let Some(dx) = bg.input {
                        accumulate(&mut grads, x, dx);
                    }
                    accumulate(&mut grads, gamma, bg.gamma);
                    accumulate(&mut grads, beta, bg.beta);
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::MaxPool { x, arg } => {
                    accumulate(
                        &mut grads,
                        x,
                        kernels::max_pool2_backward(x.shape(), arg, &g),
                    );
                }
                Op::Upsample { x, factor } => {
                    accumulate(
                        &mut grads,
                        x,
                        kernels::upsample_bilinear_backward(x.shape(), *factor, &g),
                    );
                }
                Op::Concat { xs } => {
                    let [n, _, h, w] = g.shape();
                    let hw = h * w;
                    let mut off = 0;
                    for x in xs {
                        let c = x.shape()[1];
                        if x.tracked() {
                            let mut part = Tensor::zeros(x.shape());
                            for s in 0..n {
                                part.sample_mut(s)
                                    .copy_from_slice(&g.sample(s)[off..off + c * hw]);
                            }
                            accumulate(&mut grads, x, part);
                        }
                        off += c * hw;
                    }
                }
                Op::Add { a, b } => {
                    if b.tracked() {
                        accumulate(&mut grads, b, g.clone());
                    }
                    accumulate(&mut grads, a, g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: &Var, g: Tensor) {
    if let Some(j) = var.node {
        match &mut grads[j] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a [`Graph::leaf`] input.
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|i| self.nodes[i].as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}
