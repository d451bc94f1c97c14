//! The coarse-to-fine fusion network: a U-shaped backbone, the four-module
//! fusion stream, and the fusion / auxiliary / edge heads.
//!
//! With `use_fsp = false` the graph reduces to the backbone and its single
//! auxiliary head, which then serves as the segmentation output.

mod backbone;
mod config;
mod fsp;
mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::{Backbone, FeaturePyramid, TripleConv};
pub use config::ModelConfig;
pub use fsp::{
    Aspp, Cff, EdgeConstraint, FspModule, FspOutput, FusionOutput, FusionStream, TinyUnet,
};
pub use heads::{EdgeHead, MapHead};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Graph, Mode, ParamBuilder, ParamStore, Tensor, Var};

/// Network outputs. Probability maps are `B×1×S×S`.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `P^F`, present when the fusion stream is enabled.
    pub fusion: Option<Var>,
    /// `P^U` from the last decoder block.
    pub aux: Var,
    /// `P^e`, present when the edge constraint is enabled.
    pub edge: Option<Var>,
    /// `Em¹..Em⁴`, index 0 at full resolution.
    pub edge_features: Vec<Var>,
}

impl PredictionSet {
    /// The map thresholded at inference: `P^F`, or `P^U` for backbone-only
    /// graphs.
    pub fn segmentation(&self) -> &Var {
        self.fusion.as_ref().unwrap_or(&self.aux)
    }
}

pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub predictions: PredictionSet,
}

#[derive(Clone, Debug)]
pub struct Cf2Net {
    config: ModelConfig,
    backbone: Backbone,
    fusion_stream: Option<FusionStream>,
    fusion_head: Option<MapHead>,
    aux_head: MapHead,
    edge_head: Option<EdgeHead>,
}

impl Cf2Net {
    /// Build the graph and a freshly initialised parameter store. Weights are
    /// He-normal, biases zero, batch-norm scale 1 and shift 0.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Cf2Net, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut pb, config);
        let fusion_stream = config.use_fsp.then(|| FusionStream::new(&mut pb, config));
        let mut heads = pb.scope("head");
        let fusion_head = config
            .use_fsp
            .then(|| MapHead::new(&mut heads, "fusion", config.fsp_width));
        let aux_head = MapHead::new(&mut heads, "aux", config.scale_channels(1));
        let edge_head = config
            .use_ec
            .then(|| EdgeHead::new(&mut heads, config.em_channels));
        let net = Cf2Net {
            config: config.clone(),
            backbone,
            fusion_stream,
            fusion_head,
            aux_head,
            edge_head,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion_stream(&self) -> Option<&FusionStream> {
        self.fusion_stream.as_ref()
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [n, c, h, w] = shape;
        let s = self.config.size;
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != self.config.input_channels() {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels()
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "input {h}×{w} is not a multiple of 16"
            )));
        }
        if h != s || w != s {
            return Err(Error::Shape(format!(
                "model expects {s}×{s} input, got {h}×{w}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, input: &Var) -> Result<ForwardOutput> {
        self.check_input(input.shape())?;
        let pyramid = self.backbone.forward(ctx, input)?;
        let aux = self.aux_head.forward(ctx, &pyramid.decoder[0])?;
        let (fusion, edge, edge_features) = match (&self.fusion_stream, &self.fusion_head) {
            (Some(stream), Some(head)) => {
                let out =
                    stream.forward(ctx, &pyramid.encoder, &pyramid.decoder, &pyramid.middle)?;
                let fusion = head.forward(ctx, &out.features)?;
                let edge = match &self.edge_head {
                    Some(eh) => Some(eh.forward(ctx, &out.edge_features)?),
                    None => None,
                };
                (Some(fusion), edge, out.edge_features)
            }
            _ => (None, None, Vec::new()),
        };
        Ok(ForwardOutput {
            pyramid,
            predictions: PredictionSet {
                fusion,
                aux,
                edge,
                edge_features,
            },
        })
    }

    /// Inference with running batch-norm statistics and no tape.
    pub fn predict(&self, store: &ParamStore, input: Tensor) -> Result<PredictionMaps> {
        let mut graph = Graph::inference();
        let x = graph.constant(input);
        let mut ctx = Ctx {
            graph: &mut graph,
            store,
            mode: Mode::Eval,
        };
        let out = self.forward(&mut ctx, &x)?.predictions;
        Ok(PredictionMaps {
            fusion: out.fusion.map(|v| v.value().clone()),
            aux: out.aux.value().clone(),
            edge: out.edge.map(|v| v.value().clone()),
        })
    }
}

/// Detached output maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    pub fusion: Option<Tensor>,
    pub aux: Tensor,
    pub edge: Option<Tensor>,
}

impl PredictionMaps {
    pub fn segmentation(&self) -> &Tensor {
        self.fusion.as_ref().unwrap_or(&self.aux)
    }
}
