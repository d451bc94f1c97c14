use rand_chacha::ChaCha8Rng;

use super::graph::{BnObservation, BnStats, Graph, Var};
use super::params::{he_normal, ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Batch-norm running statistics move this far toward each batch estimate.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are observed for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Conv2d {
        let weight = he_normal([cout, cin, kernel, kernel], self.rng);
        let weight = self.store.insert(
            self.full_name(&format!("{name}.weight")),
            ParamKind::Trainable,
            weight,
        );
        let bias = self.store.insert(
            self.full_name(&format!("{name}.bias")),
            ParamKind::Trainable,
            Tensor::zeros([1, cout, 1, 1]),
        );
        Conv2d {
            weight,
            bias: Some(bias),
            dilation,
            cin,
            cout,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let shape = [1, channels, 1, 1];
        let mut add = |leaf: &str, kind, value| {
            let n = self.full_name(&format!("{name}.{leaf}"));
            self.store.insert(n, kind, value)
        };
        BatchNorm {
            gamma: add("gamma", ParamKind::Trainable, Tensor::full(shape, 1.0)),
            beta: add("beta", ParamKind::Trainable, Tensor::zeros(shape)),
            running_mean: add("running_mean", ParamKind::Buffer, Tensor::zeros(shape)),
            running_var: add("running_var", ParamKind::Buffer, Tensor::full(shape, 1.0)),
        }
    }

    /// Convolution followed by batch norm and, optionally, ReLU.
    /// Parameters are named `<name>.weight`, `<name>.bias`, `<name>.bn.*`.
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        relu: bool,
    ) -> ConvBn {
        let conv = self.conv(name, cin, cout, kernel, dilation);
        let bn = self.batch_norm(&format!("{name}.bn"), cout);
        ConvBn { conv, bn, relu }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.graph.conv2d(x, &w, b.as_ref(), self.dilation)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (out, observed) = ctx.graph.batch_norm(x, &gamma, &beta, BnStats::Batch)?;
                if let Some((mean, var)) = observed {
                    let [n, _, h, w] = x.shape();
                    let count = (n * h * w) as f32;
                    let correction = if count > 1.0 {
                        count / (count - 1.0)
                    } else {
                        1.0
                    };
                    ctx.graph.observe_batch_norm(BnObservation {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        mean,
                        var: var.into_iter().map(|v| v * correction).collect(),
                    });
                }
                Ok(out)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                let (out, _) = ctx.graph.batch_norm(
                    x,
                    &gamma,
                    &beta,
                    BnStats::Fixed {
                        mean: &mean,
                        var: &var,
                    },
                )?;
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        Ok(if self.relu { ctx.graph.relu(&y) } else { y })
    }
}

/// Fold observed batch statistics into the running estimates.
pub fn apply_bn_observations(store: &mut ParamStore, observations: &[BnObservation]) {
    for obs in observations {
        let rm = store.get_mut(obs.running_mean);
        for (r, &m) in rm.data_mut().iter_mut().zip(&obs.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(obs.running_var);
        for (r, &v) in rv.data_mut().iter_mut().zip(&obs.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
