use std::path::Path;

use image::{Rgb, RgbImage};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::dataset::{boundary, preprocess_image};
use crate::error::{Error, Result};
use crate::model::Cf2Net;
use crate::nn::{ParamStore, Tensor};
use crate::plane::Plane;
use crate::superpixel::{superpixel_channel, SlicParams};

/// Inference from a checkpoint, with the preprocessing it was trained with.
pub struct Predictor {
    net: Cf2Net,
    store: ParamStore,
    superpixel: Option<SlicParams>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Preprocessed input at `S×S`.
    pub image: Plane<f32>,
    /// Segmentation probabilities.
    pub probability: Plane<f32>,
    /// `probability ≥ 0.5`.
    pub mask: Plane<bool>,
    /// Edge-band probabilities, for models with an edge head.
    pub edge: Option<Plane<f32>>,
}

impl Predictor {
    pub fn new(
        net: Cf2Net,
        store: ParamStore,
        superpixel: Option<SlicParams>,
    ) -> Result<Predictor> {
        match (&superpixel, net.config().use_superpixel) {
            (None, true) => Err(Error::Config(
                "model takes a superpixel channel but no superpixel parameters were given".into(),
            )),
            (Some(_), false) => Err(Error::Config(
                "superpixel parameters given for a model without a superpixel channel".into(),
            )),
            _ => Ok(Predictor {
                net,
                store,
                superpixel,
            }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Predictor> {
        let sp = ck.info.superpixel.clone();
        if ck.net.config().use_superpixel && sp.is_none() {
            return Err(Error::Checkpoint(
                "model takes a superpixel channel but the checkpoint stores no superpixel parameters"
                    .into(),
            ));
        }
        Predictor::new(ck.net, ck.store, sp)
    }

    pub fn load(path: &Path) -> Result<Predictor> {
        Predictor::from_checkpoint(load_checkpoint(path)?)
    }

    pub fn net(&self) -> &Cf2Net {
        &self.net
    }

    /// `superpixels` states whether the caller expects the region-mean
    /// channel; it must agree with the checkpoint.
    pub fn predict(&self, image: &Plane<f32>, superpixels: bool) -> Result<Prediction> {
        let config = self.net.config();
        if superpixels != config.use_superpixel {
            return Err(Error::Config(format!(
                "configuration mismatch: checkpoint was trained {} the superpixel channel, \
                 inference requested {}",
                if config.use_superpixel {
                    "with"
                } else {
                    "without"
                },
                if superpixels { "it" } else { "none" }
            )));
        }
        let s = config.size;
        let image = preprocess_image("input", image, s)?;
        let mut data = image.data().to_vec();
        if let Some(params) = &self.superpixel {
            let mut sp = superpixel_channel(&image, params)?;
            sp.quantize_u8();
            data.extend_from_slice(sp.data());
        }
        let input = Tensor::from_vec([1, config.input_channels(), s, s], data);
        let maps = self.net.predict(&self.store, input)?;
        let probability = Plane::from_vec(s, s, maps.segmentation().data().to_vec())?;
        let mask = probability.map(|p| p >= crate::metrics::THRESHOLD);
        let edge = maps
            .edge
            .map(|e| Plane::from_vec(s, s, e.into_vec()))
            .transpose()?;
        Ok(Prediction {
            image,
            probability,
            mask,
            edge,
        })
    }
}

impl Prediction {
    /// The input in gray with the predicted contour in red.
    pub fn overlay(&self) -> RgbImage {
        let contour = boundary(&self.mask);
        let (w, h) = self.image.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if contour.get(x, y) {
                Rgb([255, 0, 0])
            } else {
                let g = (self.image.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([g, g, g])
            }
        })
    }

    pub fn save_overlay(&self, path: &Path) -> Result<()> {
        self.overlay().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
