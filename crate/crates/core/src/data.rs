use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{resize_center_crop, RasterImage};
use crate::ingest::{apply_uncertain_policy, load_raster, parse_manifest, UncertainPolicy};

/// Ground truth known only for generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTruth {
    /// Pixels covered by any rendered blob.
    pub mask: Vec<bool>,
    /// Per-class blob center `(y, x)`, `None` for negative classes.
    pub blob_centers: Vec<Option<(usize, usize)>>,
    pub blob_radius: usize,
    pub marker: bool,
}

impl SampleTruth {
    /// Pixels of the blob rendered for `class`, empty when the class is negative.
    pub fn class_mask(&self, class: usize, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        if let Some((cy, cx)) = self.blob_centers[class] {
            for (y, x) in disc_pixels(cy, cx, self.blob_radius, height, width) {
                m[y * width + x] = true;
            }
        }
        m
    }
}

/// Integer lattice points within `radius` of `(cy, cx)` that fall inside the image.
pub fn disc_pixels(cy: usize, cx: usize, radius: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx > r * r {
                continue;
            }
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RasterImage,
    /// Resolved labels in `{0, 1}`.
    pub labels: Vec<f64>,
    /// Raw token ids, without the classification token or padding.
    pub tokens: Vec<u32>,
    pub truth: Option<SampleTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every record of a manifest, resolving uncertain labels and
    /// resizing/cropping each raster.
    pub fn load(manifest: &Path, policy: UncertainPolicy, resize_to: usize, crop_to: usize) -> Result<Self> {
        let m = parse_manifest(manifest)?;
        let mut samples = Vec::with_capacity(m.records.len());
        for rec in &m.records {
            let raw = load_raster(&m.resolve(rec))?;
            let image = if raw.height == crop_to && raw.width == crop_to && resize_to == crop_to {
                raw
            } else {
                resize_center_crop(&raw, resize_to, crop_to)?
            };
            samples.push(Sample {
                image,
                labels: apply_uncertain_policy(&rec.raw_labels(), policy)?,
                tokens: rec.tokens.clone(),
                truth: None,
            });
        }
        if samples.is_empty() {
            return Err(Error::contract(format!("{} has no records", manifest.display())));
        }
        Ok(Self {
            classes: m.classes,
            samples,
        })
    }
}
