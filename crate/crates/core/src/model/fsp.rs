//! Fusion stream units. One [`FspModule`] runs per scale, coarse to fine,
//! each consuming the encoder and decoder features of its scale plus the
//! output of the previous (coarser) module.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, Ctx, ParamBuilder, Var};

/// Atrous pyramid: parallel dilated 3×3 convolutions, ReLU on each branch,
/// branches summed. Channel count is preserved.
#[derive(Clone, Debug)]
pub struct Aspp {
    branches: Vec<Conv2d>,
}

impl Aspp {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, rates: &[usize]) -> Self {
        Aspp {
            branches: rates
                .iter()
                .map(|&r| pb.conv(&format!("rate{r}"), channels, channels, 3, r))
                .collect(),
        }
    }

    pub fn branches(&self) -> &[Conv2d] {
        &self.branches
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let mut sum: Option<Var> = None;
        for conv in &self.branches {
            let y = conv.forward(ctx, x)?;
            let y = ctx.graph.relu(&y);
            sum = Some(match sum {
                None => y,
                Some(s) => ctx.graph.add(&s, &y)?,
            });
        }
        sum.ok_or_else(|| Error::Config("atrous pyramid without branches".into()))
    }
}

/// Cascade feature fusion of same-scale encoder/decoder features with the
/// upsampled output of the coarser module.
#[derive(Clone, Debug)]
pub struct Cff {
    /// Dilated (rate 2) 3×3 conv + BN on the upsampled coarse features.
    coarse: ConvBn,
    enc_proj: ConvBn,
    dec_proj: ConvBn,
    /// 3×3 fusion of the `3·fsp_width` concatenation.
    fuse: ConvBn,
}

impl Cff {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        enc_channels: usize,
        dec_channels: usize,
        prev_channels: usize,
        width: usize,
    ) -> Self {
        Cff {
            coarse: pb.conv_bn("coarse", prev_channels, width, 3, 2, false),
            enc_proj: pb.conv_bn("enc_proj", enc_channels, width, 1, 1, true),
            dec_proj: pb.conv_bn("dec_proj", dec_channels, width, 1, 1, true),
            fuse: pb.conv_bn("fuse", 3 * width, width, 3, 1, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, enc: &Var, dec: &Var, prev: &Var) -> Result<Var> {
        let [_, _, h, w] = enc.shape();
        let [_, _, dh, dw] = dec.shape();
        let [_, _, ph, pw] = prev.shape();
        if (dh, dw) != (h, w) || (2 * ph, 2 * pw) != (h, w) {
            return Err(Error::Shape(format!(
                "fusion inputs at {h}×{w} / {dh}×{dw} need coarse features at half resolution, got {ph}×{pw}"
            )));
        }
        let up = ctx.graph.upsample(prev, 2)?;
        let coarse = self.coarse.forward(ctx, &up)?;
        let e = self.enc_proj.forward(ctx, enc)?;
        let d = self.dec_proj.forward(ctx, dec)?;
        let cat = ctx.graph.concat(&[&coarse, &e, &d])?;
        self.fuse.forward(ctx, &cat)
    }
}

/// Edge constraint unit: returns the tiny U-Net input and the per-scale edge
/// features `Emⁱ`.
#[derive(Clone, Debug)]
pub struct EdgeConstraint {
    trunk1: ConvBn,
    trunk2: ConvBn,
    semantic: ConvBn,
    em: Conv2d,
}

impl EdgeConstraint {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, em_channels: usize) -> Self {
        EdgeConstraint {
            trunk1: pb.conv_bn("trunk1", width, width, 1, 1, true),
            trunk2: pb.conv_bn("trunk2", width, width, 3, 1, true),
            semantic: pb.conv_bn("semantic", width, width, 1, 1, true),
            em: pb.conv("em", width, em_channels, 1, 1),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, fused: &Var) -> Result<(Var, Var)> {
        let t = self.trunk1.forward(ctx, fused)?;
        let t = self.trunk2.forward(ctx, &t)?;
        let sem = self.semantic.forward(ctx, &t)?;
        let tiny_input = ctx.graph.concat(&[&sem, fused])?;
        let em = self.em.forward(ctx, &t)?;
        Ok((tiny_input, em))
    }
}

/// One-level pool/upsample block with a full-resolution fusion convolution.
#[derive(Clone, Debug)]
pub struct TinyUnet {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    fuse: ConvBn,
}

impl TinyUnet {
    pub fn new(pb: &mut ParamBuilder<'_>, cin: usize, width: usize) -> Self {
        TinyUnet {
            conv1: pb.conv_bn("conv1", cin, width, 3, 1, true),
            conv2: pb.conv_bn("conv2", width, width, 3, 1, true),
            conv3: pb.conv_bn("conv3", width, width, 3, 1, true),
            fuse: pb.conv_bn("fuse", width + cin, width, 3, 1, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let [_, _, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "tiny U-Net needs even spatial size, got {h}×{w}"
            )));
        }
        let a = self.conv1.forward(ctx, x)?;
        let p = ctx.graph.max_pool2(&a)?;
        let b = self.conv2.forward(ctx, &p)?;
        let u = ctx.graph.upsample(&b, 2)?;
        let c = self.conv3.forward(ctx, &u)?;
        let cat = ctx.graph.concat(&[&c, x])?;
        self.fuse.forward(ctx, &cat)
    }
}

#[derive(Clone, Debug)]
pub struct FspModule {
    pub aspp_enc: Option<Aspp>,
    pub aspp_dec: Option<Aspp>,
    pub cff: Cff,
    pub ec: Option<EdgeConstraint>,
    pub tiny: TinyUnet,
}

/// Output of one fusion module.
pub struct FspOutput {
    pub fused: Var,
    pub tiny_input: Var,
    pub features: Var,
    pub edge_features: Option<Var>,
}

impl FspModule {
    fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig, scale: usize) -> Self {
        let c = config.scale_channels(scale);
        let width = config.fsp_width;
        let prev = if scale == 4 {
            config.middle_channels()
        } else {
            width
        };
        let (aspp_enc, aspp_dec) = if config.use_aspp {
            (
                Some(Aspp::new(&mut pb.scope("aspp.enc"), c, &config.aspp_rates)),
                Some(Aspp::new(&mut pb.scope("aspp.dec"), c, &config.aspp_rates)),
            )
        } else {
            (None, None)
        };
        let cff = Cff::new(&mut pb.scope("cff"), c, c, prev, width);
        let ec = config
            .use_ec
            .then(|| EdgeConstraint::new(&mut pb.scope("ec"), width, config.em_channels));
        let tiny_in = if config.use_ec { 2 * width } else { width };
        let tiny = TinyUnet::new(&mut pb.scope("tiny"), tiny_in, width);
        FspModule {
            aspp_enc,
            aspp_dec,
            cff,
            ec,
            tiny,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        enc: &Var,
        dec: &Var,
        prev: &Var,
    ) -> Result<FspOutput> {
        let a_e = match &self.aspp_enc {
            Some(a) => a.forward(ctx, enc)?,
            None => enc.clone(),
        };
        let a_d = match &self.aspp_dec {
            Some(a) => a.forward(ctx, dec)?,
            None => dec.clone(),
        };
        let fused = self.cff.forward(ctx, &a_e, &a_d, prev)?;
        let (tiny_input, edge_features) = match &self.ec {
            Some(ec) => {
                let (t, em) = ec.forward(ctx, &fused)?;
                (t, Some(em))
            }
            None => (fused.clone(), None),
        };
        let features = self.tiny.forward(ctx, &tiny_input)?;
        Ok(FspOutput {
            fused,
            tiny_input,
            features,
            edge_features,
        })
    }
}

/// The four fusion modules, index 0 at scale 1.
#[derive(Clone, Debug)]
pub struct FusionStream {
    modules: Vec<FspModule>,
}

/// Fine-scale output and per-scale edge features (index 0 = scale 1).
pub struct FusionOutput {
    pub features: Var,
    pub edge_features: Vec<Var>,
}

impl FusionStream {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Self {
        let mut pb = pb.scope("fsp");
        FusionStream {
            modules: (1..=4)
                .map(|i| FspModule::new(&mut pb.scope(i.to_string()), config, i))
                .collect(),
        }
    }

    pub fn modules(&self) -> &[FspModule] {
        &self.modules
    }

    /// Runs scales 4 → 1; the middle block seeds the coarsest module.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        encoder: &[Var],
        decoder: &[Var],
        middle: &Var,
    ) -> Result<FusionOutput> {
        let mut prev = middle.clone();
        let mut edge: Vec<Option<Var>> = vec![None; 4];
        for i in (0..4).rev() {
            let out = self.modules[i].forward(ctx, &encoder[i], &decoder[i], &prev)?;
            edge[i] = out.edge_features;
            prev = out.features;
        }
        Ok(FusionOutput {
            features: prev,
            edge_features: edge.into_iter().flatten().collect(),
        })
    }
}
