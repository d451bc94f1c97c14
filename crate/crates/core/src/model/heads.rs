use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamBuilder, Var};

/// Edge prediction `σ(f([up(Em¹,1), up(Em²,2), up(Em³,4), up(Em⁴,8)]))`
/// with `f` a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct EdgeHead {
    conv: Conv2d,
    em_channels: usize,
}

impl EdgeHead {
    pub fn new(pb: &mut ParamBuilder<'_>, em_channels: usize) -> Self {
        EdgeHead {
            conv: pb.conv("edge", 4 * em_channels, 1, 1, 1),
            em_channels,
        }
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// `edge_features[i]` must sit at `1/2^i` of the output resolution.
    pub fn forward(&self, ctx: &mut Ctx<'_>, edge_features: &[Var]) -> Result<Var> {
        if edge_features.len() != 4 {
            return Err(Error::Shape(format!(
                "edge head needs 4 scales, got {}",
                edge_features.len()
            )));
        }
        let [n, _, size, _] = edge_features[0].shape();
        let mut ups = Vec::with_capacity(4);
        for (i, em) in edge_features.iter().enumerate() {
            let rate = 1 << i;
            let want = [n, self.em_channels, size / rate, size / rate];
            if em.shape() != want || size % rate != 0 {
                return Err(Error::Shape(format!(
                    "edge features at scale {} have shape {:?}, expected {want:?}",
                    i + 1,
                    em.shape()
                )));
            }
            ups.push(ctx.graph.upsample(em, rate)?);
        }
        let refs: Vec<&Var> = ups.iter().collect();
        let cat = ctx.graph.concat(&refs)?;
        let logits = self.conv.forward(ctx, &cat)?;
        Ok(ctx.graph.sigmoid(&logits))
    }
}

/// 1×1 projection to one channel followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct MapHead {
    conv: Conv2d,
}

impl MapHead {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize) -> Self {
        MapHead {
            conv: pb.conv(name, cin, 1, 1, 1),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let logits = self.conv.forward(ctx, x)?;
        Ok(ctx.graph.sigmoid(&logits))
    }
}
