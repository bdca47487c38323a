//! Synthetic scenes for desk-scale experiments.
//!
//! Each class owns a texture (stripe orientation and frequency over a muted color) and an anchor
//! position fixed for the whole corpus. An image picks 2 to 6 classes and grows a region around
//! each class's jittered anchor, so where a texture appears says something about where a patch
//! came from. A smooth illumination ramp with random direction and strength is laid over the
//! scene; it perturbs intensities without encoding position.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::manifest::{entries_to_tsv, ManifestEntry};
use super::{save_mask_png, save_rgb_png, ChannelStats};
use crate::error::{Error, Result};
use crate::planar::Planar;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub texture_seed: u64,
    /// Trailing images that go to `val.tsv`.
    pub val_count: usize,
}

impl SyntheticSpec {
    pub fn new(num_images: usize, num_classes: usize, texture_seed: u64) -> Self {
        Self { num_images, image_size: 128, num_classes, texture_seed, val_count: num_images / 5 }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: &str| {
            Err(Error::InvalidValue { key: key.into(), message: message.into() })
        };
        if self.num_images == 0 {
            return invalid("images", "need at least one image");
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return invalid("classes", "need between 2 and 255 classes");
        }
        if self.image_size < 8 {
            return invalid("image_size", "images must be at least 8 pixels wide");
        }
        if self.val_count > self.num_images {
            return invalid("val", "more validation images than images");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ClassLook {
    color: [f64; 3],
    angle: f64,
    frequency: f64,
    stripe_amp: f64,
    noise: f64,
    /// Preferred region center, as fractions of the image side.
    anchor: (f64, f64),
}

fn class_looks(spec: &SyntheticSpec) -> Vec<ClassLook> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let k = spec.num_classes as f64;
    (0..spec.num_classes)
        .map(|c| {
            let gray: f64 = rng.random_range(0.35..0.65);
            ClassLook {
                color: [0.0; 3].map(|_| gray + rng.random_range(-0.08..0.08)),
                angle: PI * (c as f64 + rng.random_range(0.0..0.5)) / k,
                frequency: rng.random_range(0.1..0.4),
                stripe_amp: rng.random_range(0.1..0.2),
                noise: rng.random_range(0.02..0.08),
                anchor: (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
            }
        })
        .collect()
}

/// One image and its class mask. Deterministic in `(spec.texture_seed, index)`.
pub fn render_sample(spec: &SyntheticSpec, index: usize) -> (Planar<f32>, Planar<u8>) {
    render_with_looks(spec, &class_looks(spec), index)
}

fn render_with_looks(spec: &SyntheticSpec, looks: &[ClassLook], index: usize) -> (Planar<f32>, Planar<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    rng.set_stream(index as u64 + 1);
    let s = spec.image_size;
    let sf = s as f64;

    let max_regions = spec.num_classes.min(6);
    let regions = rng.random_range(2..=max_regions);
    let classes = rand::seq::index::sample(&mut rng, spec.num_classes, regions).into_vec();
    let sites: Vec<(f64, f64)> = classes
        .iter()
        .map(|&c| {
            let (ax, ay) = looks[c].anchor;
            let jx: f64 = StandardNormal.sample(&mut rng);
            let jy: f64 = StandardNormal.sample(&mut rng);
            ((ax + 0.06 * jx) * sf, (ay + 0.06 * jy) * sf)
        })
        .collect();
    // Wavy borders: distances are measured in a gently warped coordinate frame.
    let warp_amp = rng.random_range(0.0..0.05) * sf;
    let warp_cycles = rng.random_range(0.5..2.0);
    let warp_phase = rng.random_range(0.0..2.0 * PI);
    let phases: Vec<f64> = classes.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let light_dir = rng.random_range(0.0..2.0 * PI);
    let light_gain = rng.random_range(0.1..0.4);

    let mut mask = Planar::filled(1, s, s, 0u8);
    let mut image = Planar::filled(3, s, s, 0f32);
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            let wx = xf + warp_amp * (2.0 * PI * warp_cycles * yf / sf + warp_phase).sin();
            let wy = yf + warp_amp * (2.0 * PI * warp_cycles * xf / sf + warp_phase).cos();
            let region = sites
                .iter()
                .map(|(sx, sy)| (wx - sx).powi(2) + (wy - sy).powi(2))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least two regions");
            let class = classes[region];
            mask.set(0, y, x, class as u8);
            let look = &looks[class];
            let along = xf * look.angle.cos() + yf * look.angle.sin();
            let stripe = look.stripe_amp * (2.0 * PI * look.frequency * along + phases[region]).sin();
            let u = (xf / sf - 0.5) * light_dir.cos() + (yf / sf - 0.5) * light_dir.sin();
            let light = 1.0 + light_gain * u;
            for c in 0..3 {
                let n: f64 = StandardNormal.sample(&mut rng);
                let v = light * (look.color[c] + stripe + look.noise * n);
                image.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    (image, mask)
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dir: PathBuf,
    pub all_manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub stats: ChannelStats,
}

/// Writes `images/`, `masks/`, `all.tsv`, `train.tsv`, `val.tsv` and `norm.txt` under `out`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let io = |what: &Path, e| Error::io(format!("writing {}", what.display()), e);
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    let looks = class_looks(spec);
    let train_count = spec.num_images - spec.val_count;
    let mut entries = Vec::with_capacity(spec.num_images);
    let mut stats = ChannelStats::accumulator(3);
    for i in 0..spec.num_images {
        let (image, mask) = render_with_looks(spec, &looks, i);
        let image_rel = PathBuf::from(format!("images/{i:05}.png"));
        let mask_rel = PathBuf::from(format!("masks/{i:05}.png"));
        // Quantize before accumulating so the statistics describe the stored files.
        let stored = image.map(|v| (v * 255.0).round() / 255.0);
        save_rgb_png(&out.join(&image_rel), &stored)?;
        save_mask_png(&out.join(&mask_rel), &mask)?;
        if i < train_count {
            stats.add(&stored);
        }
        entries.push(ManifestEntry { image_path: image_rel, mask_path: Some(mask_rel) });
    }
    let stats = if train_count > 0 { stats.finish() } else { ChannelStats::identity(3) };

    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
        Ok(p)
    };
    Ok(SyntheticCorpus {
        dir: out.to_path_buf(),
        all_manifest: write("all.tsv", entries_to_tsv(&entries))?,
        train_manifest: write("train.tsv", entries_to_tsv(&entries[..train_count]))?,
        val_manifest: write("val.tsv", entries_to_tsv(&entries[train_count..]))?,
        stats: {
            write(super::NORM_FILE, stats.to_text())?;
            stats
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_stay_in_class_range() {
        let spec = SyntheticSpec { image_size: 32, ..SyntheticSpec::new(6, 3, 11) };
        for i in 0..6 {
            let (img, mask) = render_sample(&spec, i);
            assert!(mask.data.iter().all(|&c| (c as usize) < 3));
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let distinct: std::collections::BTreeSet<_> = mask.data.iter().collect();
            assert!(distinct.len() >= 2 || spec.image_size < 16, "image {i} has one region");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SyntheticSpec { image_size: 24, ..SyntheticSpec::new(2, 4, 5) };
        assert_eq!(render_sample(&spec, 1), render_sample(&spec, 1));
        assert_ne!(render_sample(&spec, 0).0, render_sample(&spec, 1).0);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(SyntheticSpec::new(0, 3, 1).validate().is_err());
        assert!(SyntheticSpec::new(3, 1, 1).validate().is_err());
    }
}
