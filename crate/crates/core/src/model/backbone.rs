use super::ModelConfig;
use crate::error::Result;
use crate::nn::{ConvBn, Ctx, ParamBuilder, Var};

/// Three 3×3 convolutions, each followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct TripleConv {
    convs: [ConvBn; 3],
}

impl TripleConv {
    pub fn new(pb: &mut ParamBuilder<'_>, cin: usize, cout: usize) -> Self {
        TripleConv {
            convs: [
                pb.conv_bn("conv1", cin, cout, 3, 1, true),
                pb.conv_bn("conv2", cout, cout, 3, 1, true),
                pb.conv_bn("conv3", cout, cout, 3, 1, true),
            ],
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let mut h = self.convs[0].forward(ctx, x)?;
        for conv in &self.convs[1..] {
            h = conv.forward(ctx, &h)?;
        }
        Ok(h)
    }
}

/// Multi-scale features of the encoder–decoder. Index 0 holds scale 1
/// (full resolution).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Pre-pooling encoder outputs `E¹..E⁴`.
    pub encoder: Vec<Var>,
    pub middle: Var,
    /// Decoder outputs `D¹..D⁴`.
    pub decoder: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    encoder: Vec<TripleConv>,
    middle: TripleConv,
    decoder: Vec<TripleConv>,
    skips: bool,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Self {
        let mut pb = pb.scope("backbone");
        let mut encoder = Vec::with_capacity(4);
        let mut cin = config.input_channels();
        for i in 1..=4 {
            let cout = config.scale_channels(i);
            encoder.push(TripleConv::new(
                &mut pb.scope(format!("enc.{i}")),
                cin,
                cout,
            ));
            cin = cout;
        }
        let middle = TripleConv::new(&mut pb.scope("mid"), cin, config.middle_channels());
        let mut decoder = Vec::with_capacity(4);
        for i in 1..=4 {
            let deeper = if i == 4 {
                config.middle_channels()
            } else {
                config.scale_channels(i + 1)
            };
            let skip = if config.backbone_skips {
                config.scale_channels(i)
            } else {
                0
            };
            decoder.push(TripleConv::new(
                &mut pb.scope(format!("dec.{i}")),
                deeper + skip,
                config.scale_channels(i),
            ));
        }
        Backbone {
            encoder,
            middle,
            decoder,
            skips: config.backbone_skips,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<FeaturePyramid> {
        let mut encoder = Vec::with_capacity(4);
        let mut h = x.clone();
        for block in &self.encoder {
            let e = block.forward(ctx, &h)?;
            h = ctx.graph.max_pool2(&e)?;
            encoder.push(e);
        }
        let middle = self.middle.forward(ctx, &h)?;
        let mut decoder: Vec<Option<Var>> = vec![None; 4];
        let mut deeper = middle.clone();
        for i in (0..4).rev() {
            let mut u = ctx.graph.upsample(&deeper, 2)?;
            if self.skips {
                u = ctx.graph.concat(&[&u, &encoder[i]])?;
            }
            let d = self.decoder[i].forward(ctx, &u)?;
            deeper = d.clone();
            decoder[i] = Some(d);
        }
        Ok(FeaturePyramid {
            encoder,
            middle,
            decoder: decoder
                .into_iter()
                .map(|d| d.expect("all scales decoded"))
                .collect(),
        })
    }
}
