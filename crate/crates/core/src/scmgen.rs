//! Synthetic confounded data.
//!
//! Each positive class draws a disc ("blob") near its home location; that blob
//! is the only causal parent of the label. A square marker in one corner is
//! drawn with probability `rho` of agreeing with the label of class 0, so the
//! marker is a spurious cue whose reliability differs between the splits.
//! Token records carry noisy per-class descriptors of the positive classes and
//! never depend on the marker.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{disc_pixels, Dataset, Sample, SampleTruth};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::ingest::{write_raster, Manifest, ManifestRecord};
use crate::rng::Streams;
use crate::semfuse::{CLS_ID, PAD_ID};

/// The single class whose label the marker is correlated with.
pub const CONFOUNDED_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub image_size: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub prevalence: f64,
    pub rho_train: f64,
    pub rho_test: f64,
    pub blob_radius: usize,
    pub blob_intensity: f64,
    pub blob_jitter: usize,
    pub marker_corner: Corner,
    pub marker_size: usize,
    pub marker_intensity: f64,
    pub noise_sigma: f64,
    pub vocab_size: usize,
    /// Number of uninformative token ids per record.
    pub tokens_per_sample: usize,
    /// Probability that a positive class contributes its descriptor token.
    pub token_fidelity: f64,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 4,
            n_train: 2000,
            n_test: 500,
            prevalence: 0.3,
            rho_train: 0.9,
            rho_test: 0.1,
            blob_radius: 3,
            blob_intensity: 0.25,
            blob_jitter: 2,
            marker_corner: Corner::BottomRight,
            marker_size: 6,
            marker_intensity: 1.0,
            noise_sigma: 0.3,
            vocab_size: 64,
            tokens_per_sample: 6,
            token_fidelity: 0.5,
            seed: 0,
        }
    }
}

impl ScmConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let cfg: Self = crate::config::read_kv(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First id of the uninformative token range.
    pub fn noise_token_start(&self) -> u32 {
        2 + self.classes as u32
    }

    pub fn descriptor_token(&self, class: usize) -> u32 {
        2 + class as u32
    }

    /// Home `(y, x)` of each class blob on a square grid. The grid spans the
    /// square that excludes the marker's row and column band.
    pub fn home(&self, class: usize) -> (usize, usize) {
        let g = (self.classes as f64).sqrt().ceil() as usize;
        let span = self.image_size - self.marker_size;
        let cell = span / g;
        let (oy, ox) = match self.marker_corner {
            Corner::TopLeft => (self.marker_size, self.marker_size),
            Corner::TopRight => (self.marker_size, 0),
            Corner::BottomLeft => (0, self.marker_size),
            Corner::BottomRight => (0, 0),
        };
        let (r, c) = (class / g, class % g);
        (oy + cell * r + cell / 2, ox + cell * c + cell / 2)
    }

    /// Top-left pixel `(y0, x0)` of the marker square.
    pub fn marker_origin(&self) -> (usize, usize) {
        let far = self.image_size - self.marker_size;
        match self.marker_corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, far),
            Corner::BottomLeft => (far, 0),
            Corner::BottomRight => (far, far),
        }
    }

    fn in_marker(&self, y: usize, x: usize) -> bool {
        let (my, mx) = self.marker_origin();
        y >= my && y < my + self.marker_size && x >= mx && x < mx + self.marker_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if !(0.0..=1.0).contains(&self.rho_train) || !(0.0..=1.0).contains(&self.rho_test) {
            return bad(format!("rho values must lie in [0, 1]: {} {}", self.rho_train, self.rho_test));
        }
        if !(0.0..=1.0).contains(&self.prevalence) || !(0.0..=1.0).contains(&self.token_fidelity) {
            return bad("prevalence and token_fidelity must lie in [0, 1]".into());
        }
        if self.classes < 2 || self.classes > 16 {
            return bad(format!("classes must be in 2..=16, got {}", self.classes));
        }
        if self.image_size == 0 || self.marker_size == 0 || self.marker_size > self.image_size {
            return bad("marker does not fit inside the image".into());
        }
        if self.vocab_size <= self.noise_token_start() as usize {
            return bad(format!(
                "vocab_size {} leaves no room for noise tokens",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.blob_intensity) || !(0.0..=1.0).contains(&self.marker_intensity) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        // every jittered blob must stay inside the image and clear of the marker
        let (r, j) = (self.blob_radius as isize, self.blob_jitter as isize);
        let s = self.image_size as isize;
        for class in 0..self.classes {
            let (hy, hx) = self.home(class);
            for dy in -j..=j {
                for dx in -j..=j {
                    let (cy, cx) = (hy as isize + dy, hx as isize + dx);
                    if cy - r < 0 || cx - r < 0 || cy + r >= s || cx + r >= s {
                        return bad(format!("blob of class {class} leaves the image"));
                    }
                    for (y, x) in disc_pixels(cy as usize, cx as usize, self.blob_radius, s as usize, s as usize) {
                        if self.in_marker(y, x) {
                            return bad(format!("blob of class {class} can overlap the marker"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-sample random streams for the parts of rendering that draw randomness.
pub struct SampleRng {
    pub geometry: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub tokens: ChaCha8Rng,
}

impl SampleRng {
    pub fn derive(streams: &Streams, split: &str, index: u64) -> Self {
        Self {
            geometry: streams.stream(&format!("geometry:{split}"), index),
            noise: streams.stream(&format!("noise:{split}"), index),
            tokens: streams.stream(&format!("tokens:{split}"), index),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: RasterImage,
    pub labels: Vec<f64>,
    pub tokens: Vec<u32>,
    pub ground_truth_mask: Vec<bool>,
    pub marker_flag: bool,
    pub blob_centers: Vec<Option<(usize, usize)>>,
}

impl SyntheticSample {
    pub fn into_sample(self, blob_radius: usize) -> Sample {
        Sample {
            image: self.image,
            labels: self.labels,
            tokens: self.tokens,
            truth: Some(SampleTruth {
                mask: self.ground_truth_mask,
                blob_centers: self.blob_centers,
                blob_radius,
                marker: self.marker_flag,
            }),
        }
    }
}

pub fn render_sample(cfg: &ScmConfig, labels: &[f64], marker: bool, rng: &mut SampleRng) -> Result<SyntheticSample> {
    cfg.validate()?;
    if labels.len() != cfg.classes {
        return Err(Error::contract(format!(
            "expected {} labels, got {}",
            cfg.classes,
            labels.len()
        )));
    }
    let s = cfg.image_size;
    let mut px = vec![0.0f64; s * s];
    let mut mask = vec![false; s * s];
    let mut centers = vec![None; cfg.classes];
    let j = cfg.blob_jitter as isize;
    for (class, &l) in labels.iter().enumerate() {
        // jitter is drawn for every class so positives do not shift the stream
        let dy = rng.geometry.gen_range(-j..=j);
        let dx = rng.geometry.gen_range(-j..=j);
        if l != 1.0 {
            continue;
        }
        let (hy, hx) = cfg.home(class);
        let (cy, cx) = ((hy as isize + dy) as usize, (hx as isize + dx) as usize);
        centers[class] = Some((cy, cx));
        for (y, x) in disc_pixels(cy, cx, cfg.blob_radius, s, s) {
            px[y * s + x] = px[y * s + x].max(cfg.blob_intensity);
            mask[y * s + x] = true;
        }
    }
    if marker {
        let (my, mx) = cfg.marker_origin();
        for y in my..my + cfg.marker_size {
            for x in mx..mx + cfg.marker_size {
                px[y * s + x] = cfg.marker_intensity;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
        for v in px.iter_mut() {
            *v += normal.sample(&mut rng.noise);
        }
    }
    // stored rasters are 32-bit, so keep the in-memory copy identical to what lands on disk
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }

    let mut tokens = Vec::new();
    for (class, &l) in labels.iter().enumerate() {
        let emit = rng.tokens.gen_bool(cfg.token_fidelity);
        if l == 1.0 && emit {
            tokens.push(cfg.descriptor_token(class));
        }
    }
    let lo = cfg.noise_token_start();
    for _ in 0..cfg.tokens_per_sample {
        tokens.push(rng.tokens.gen_range(lo..cfg.vocab_size as u32));
    }
    tokens.shuffle(&mut rng.tokens);
    debug_assert!(tokens.iter().all(|&t| t != PAD_ID && t != CLS_ID));

    Ok(SyntheticSample {
        image: RasterImage::new(s, s, 1, px)?,
        labels: labels.to_vec(),
        tokens,
        ground_truth_mask: mask,
        marker_flag: marker,
        blob_centers: centers,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: ScmConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

fn generate_split(cfg: &ScmConfig, streams: &Streams, split: &str, n: usize, rho: f64) -> Result<Vec<SyntheticSample>> {
    (0..n as u64)
        .map(|i| {
            let mut lr = streams.stream(&format!("labels:{split}"), i);
            let labels: Vec<f64> = (0..cfg.classes)
                .map(|_| if lr.gen_bool(cfg.prevalence) { 1.0 } else { 0.0 })
                .collect();
            let agree = streams.stream(&format!("marker:{split}"), i).gen_bool(rho);
            let positive = labels[CONFOUNDED_CLASS] == 1.0;
            let marker = if agree { positive } else { !positive };
            render_sample(cfg, &labels, marker, &mut SampleRng::derive(streams, split, i))
        })
        .collect()
}

pub fn generate_dataset(cfg: &ScmConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    Ok(SyntheticDataset {
        config: cfg.clone(),
        train: generate_split(cfg, &streams, "train", cfg.n_train, cfg.rho_train)?,
        test: generate_split(cfg, &streams, "test", cfg.n_test, cfg.rho_test)?,
    })
}

/// Fraction of samples whose marker state equals the confounded class label.
pub fn marker_agreement(samples: &[SyntheticSample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let agree = samples
        .iter()
        .filter(|s| s.marker_flag == (s.labels[CONFOUNDED_CLASS] == 1.0))
        .count();
    agree as f64 / samples.len() as f64
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

pub fn to_dataset(samples: &[SyntheticSample], k: usize, blob_radius: usize) -> Dataset {
    Dataset {
        classes: class_names(k),
        samples: samples.iter().cloned().map(|s| s.into_sample(blob_radius)).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct WrittenDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub summary: PathBuf,
}

impl SyntheticDataset {
    pub fn train_set(&self) -> Dataset {
        to_dataset(&self.train, self.config.classes, self.config.blob_radius)
    }

    pub fn test_set(&self) -> Dataset {
        to_dataset(&self.test, self.config.classes, self.config.blob_radius)
    }

    /// Writes rasters, one manifest per split, and a key=value summary under `dir`.
    pub fn write(&self, dir: &Path) -> Result<WrittenDataset> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut manifests = Vec::new();
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            let mut records = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let rel = format!("images/{split}_{i:05}.ivr");
                write_raster(&dir.join(&rel), &s.image)?;
                records.push(ManifestRecord {
                    image_path: rel,
                    labels: s.labels.iter().map(|&l| l as i8).collect(),
                    tokens: s.tokens.clone(),
                });
            }
            let m = Manifest {
                classes: class_names(self.config.classes),
                records,
                dir: dir.to_path_buf(),
            };
            let path = dir.join(format!("{split}.txt"));
            m.write(&path)?;
            manifests.push(path);
        }
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, self.summary()).map_err(|e| Error::io(&summary, e))?;
        Ok(WrittenDataset {
            train_manifest: manifests[0].clone(),
            test_manifest: manifests[1].clone(),
            summary,
        })
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", c.seed);
        let _ = writeln!(s, "classes={}", c.classes);
        let _ = writeln!(s, "confounded_class={CONFOUNDED_CLASS}");
        let _ = writeln!(s, "n_train={}", self.train.len());
        let _ = writeln!(s, "n_test={}", self.test.len());
        let _ = writeln!(s, "rho_train={}", c.rho_train);
        let _ = writeln!(s, "rho_test={}", c.rho_test);
        let _ = writeln!(s, "train_marker_agreement={}", marker_agreement(&self.train));
        let _ = writeln!(s, "test_marker_agreement={}", marker_agreement(&self.test));
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for class in 0..c.classes {
                let pos = samples.iter().filter(|x| x.labels[class] == 1.0).count();
                let _ = writeln!(s, "{split}_positives_class{class}={pos}");
            }
        }
        s
    }
}
