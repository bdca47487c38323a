//! Manifests, PNG I/O, normalization, augmentation and the synthetic corpus.

mod augment;
mod manifest;
mod synth;

use std::fmt::Write as _;
use std::path::Path;

pub use augment::{
    center_crop, reflect_pad_to, resize_bilinear, resize_nearest, sample_training_crop,
    AugmentConfig,
};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic_corpus, render_sample, SyntheticCorpus, SyntheticSpec};

use crate::error::{Error, Result};
use crate::planar::Planar;

/// Per-channel statistics file written next to generated manifests.
pub const NORM_FILE: &str = "norm.txt";

pub fn load_rgb(path: &Path) -> Result<Planar<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Planar::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c]))
}

pub fn load_mask(path: &Path) -> Result<Planar<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Planar::new(1, h, w, img.into_raw())
}

/// Saves a 3-channel image with values in [0, 1] (clamped) as 8-bit PNG.
pub fn save_rgb_png(path: &Path, img: &Planar<f32>) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels)));
    }
    let mut raw = Vec::with_capacity(img.height * img.width * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                raw.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(path, &raw, img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn save_mask_png(path: &Path, mask: &Planar<u8>) -> Result<()> {
    if mask.channels != 1 {
        return Err(Error::Shape(format!("masks have one channel, got {}", mask.channels)));
    }
    image::save_buffer(path, &mask.data, mask.width as u32, mask.height as u32, image::ColorType::L8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Per-channel mean and standard deviation of images scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub struct StatsAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: u64,
}

impl StatsAccumulator {
    pub fn add(&mut self, img: &Planar<f32>) {
        let plane = img.height * img.width;
        for c in 0..self.sum.len() {
            for &v in &img.data[c * plane..(c + 1) * plane] {
                self.sum[c] += v as f64;
                self.sum_sq[c] += (v as f64) * (v as f64);
            }
        }
        self.count += plane as u64;
    }

    pub fn finish(&self) -> ChannelStats {
        let n = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        ChannelStats { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn accumulator(channels: usize) -> StatsAccumulator {
        StatsAccumulator { sum: vec![0.0; channels], sum_sq: vec![0.0; channels], count: 0 }
    }

    pub fn normalize(&self, img: &Planar<f32>) -> Planar<f32> {
        let plane = img.height * img.width;
        let mut out = img.clone();
        for c in 0..img.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, img: &Planar<f32>) -> Planar<f32> {
        let plane = img.height * img.width;
        let mut out = img.clone();
        for c in 0..img.channels {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(out, "{c}\t{m}\t{s}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut stats = Self { mean: Vec::new(), std: Vec::new() };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::ConfigParse { line: i + 1, message: "expected `channel\\tmean\\tstd`".into() };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0].trim().parse::<usize>().ok() != Some(stats.mean.len()) {
                return Err(bad());
            }
            let m: f32 = cols[1].trim().parse().map_err(|_| bad())?;
            let s: f32 = cols[2].trim().parse().map_err(|_| bad())?;
            if !(m.is_finite() && s.is_finite() && s > 0.0) {
                return Err(bad());
            }
            stats.mean.push(m);
            stats.std.push(s);
        }
        Ok(stats)
    }
}

pub fn to_unit(img: &Planar<u8>) -> Planar<f32> {
    img.map(|v| v as f32 / 255.0)
}

/// A manifest loaded into memory, normalized.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Vec<Planar<f32>>,
    pub masks: Option<Vec<Planar<u8>>>,
    pub stats: ChannelStats,
}

impl ImageSet {
    /// Uses `norm.txt` beside the manifest when present, otherwise statistics of these images.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let raw: Vec<Planar<f32>> = manifest
            .entries
            .iter()
            .map(|e| load_rgb(&e.image_path).map(|i| to_unit(&i)))
            .collect::<Result<_>>()?;
        let masks = if manifest.has_masks() {
            Some(
                manifest
                    .entries
                    .iter()
                    .map(|e| load_mask(e.mask_path.as_ref().expect("has_masks")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let norm_path = manifest.base_dir.join(NORM_FILE);
        let stats = if norm_path.is_file() {
            let text = std::fs::read_to_string(&norm_path)
                .map_err(|e| Error::io(format!("reading {}", norm_path.display()), e))?;
            ChannelStats::parse(&text)?
        } else {
            let mut acc = ChannelStats::accumulator(3);
            raw.iter().for_each(|i| acc.add(i));
            acc.finish()
        };
        if stats.mean.len() != 3 {
            return Err(Error::Shape(format!("{} has {} channels, images have 3", norm_path.display(), stats.mean.len())));
        }
        let images = raw.iter().map(|i| stats.normalize(i)).collect();
        Ok(Self { images, masks, stats })
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(&load_manifest(path)?)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
