//! Three-block convolutional feature extractor.

use diffcore::{fan_in_uniform, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;

/// Feature width used by the full-scale model.
pub const FULL_SCALE_D: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Widths of the first two blocks; the third block emits the model width.
    pub widths: [usize; 2],
    /// Total spatial reduction; a power of two no larger than 8.
    pub downsample: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [8, 16],
            downsample: 4,
        }
    }
}

impl BackboneConfig {
    pub fn pooled_blocks(&self) -> Result<usize> {
        match self.downsample {
            1 => Ok(0),
            2 => Ok(1),
            4 => Ok(2),
            8 => Ok(3),
            other => Err(Error::contract(format!("downsample {other} is not one of 1, 2, 4, 8"))),
        }
    }
}

/// Spatial features of one image, held in a graph as an `[h*w, d]` matrix.
#[derive(Clone, Copy, Debug)]
pub struct SpatialFeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Row-major over spatial cells.
    pub flat: NodeId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub d: usize,
    blocks: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.pooled_blocks()?;
        let chans = [cfg.in_channels, cfg.widths[0], cfg.widths[1], d];
        let blocks = (0..3)
            .map(|b| {
                let (cin, cout) = (chans[b], chans[b + 1]);
                let kernel = fan_in_uniform(rng, &[3, 3, cin, cout], 9 * cin);
                (
                    store.add(format!("{prefix}.conv{b}.w"), kernel),
                    store.add(format!("{prefix}.conv{b}.b"), Tensor::zeros(&[cout])),
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            d,
            blocks,
        })
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.cfg.downsample, width / self.cfg.downsample)
    }

    pub fn extract(&self, g: &mut Graph, store: &ParamStore, image: &RasterImage) -> Result<SpatialFeatureMap> {
        let ds = self.cfg.downsample;
        if !image.height.is_multiple_of(ds) || !image.width.is_multiple_of(ds) {
            return Err(Error::contract(format!(
                "image {}x{} not divisible by downsample {ds}",
                image.height, image.width
            )));
        }
        if image.channels != self.cfg.in_channels {
            return Err(Error::contract(format!(
                "backbone expects {} channels, image has {}",
                self.cfg.in_channels, image.channels
            )));
        }
        if image.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values outside [0, 1]"));
        }
        let pooled = self.cfg.pooled_blocks()?;
        let mut x = g.constant(Tensor::new(
            &[image.height, image.width, image.channels],
            image.pixels.clone(),
        )?);
        for (b, (w, bias)) in self.blocks.iter().enumerate() {
            let wn = g.param(store, *w);
            let bn = g.param(store, *bias);
            let conv = g.conv2d(x, wn)?;
            let shifted = g.add(conv, bn)?;
            x = g.relu(shifted)?;
            if b < pooled {
                x = g.max_pool2d(x)?;
            }
        }
        let (h, w) = self.output_dims(image.height, image.width);
        let d = self.d;
        let flat = g.reshape(x, &[h * w, d])?;
        Ok(SpatialFeatureMap { h, w, d, flat })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(cfg: &BackboneConfig, d: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = Backbone::new(&mut store, "bb", cfg, d, &mut rng).unwrap();
        (store, bb)
    }

    #[test]
    fn shape_contract_over_grid() {
        for size in [16, 32, 64] {
            for ds in [2, 4] {
                let cfg = BackboneConfig {
                    widths: [2, 3],
                    downsample: ds,
                    ..BackboneConfig::default()
                };
                let (store, bb) = build(&cfg, 5);
                let mut g = Graph::no_grad();
                let f = bb.extract(&mut g, &store, &RasterImage::blank(size, size, 1)).unwrap();
                assert_eq!((f.h, f.w, f.d), (size / ds, size / ds, 5));
                assert_eq!(g.shape(f.flat), &[(size / ds) * (size / ds), 5]);
            }
        }
    }

    #[test]
    fn default_shape_and_zero_image() {
        let (store, bb) = build(&BackboneConfig::default(), 64);
        let mut g = Graph::no_grad();
        let f = bb.extract(&mut g, &store, &RasterImage::blank(32, 32, 1)).unwrap();
        assert_eq!((f.h, f.w, f.d), (8, 8, 64));
        assert!(g.value(f.flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let (store, bb) = build(&BackboneConfig::default(), 64);
        let mut g = Graph::no_grad();
        let err = bb.extract(&mut g, &store, &RasterImage::blank(30, 32, 1)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn full_scale_width_is_recorded() {
        assert_eq!(FULL_SCALE_D, 2048);
    }
}
