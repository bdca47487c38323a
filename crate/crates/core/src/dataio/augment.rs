use rand::Rng;

use crate::error::{Error, Result};
use crate::planar::Planar;

/// Largest crop side accepted from a config.
pub const MAX_CROP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub scale_range: (f64, f64),
    /// `(height, width)` of the sampled crop.
    pub crop_size: (usize, usize),
}

impl AugmentConfig {
    pub fn new(mirror_prob: f64, scale_range: (f64, f64), crop_size: (usize, usize)) -> Result<Self> {
        let cfg = Self { mirror_prob, scale_range, crop_size };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No scaling and no mirroring; only the crop remains.
    pub fn crop_only(crop_size: (usize, usize)) -> Self {
        Self { mirror_prob: 0.0, scale_range: (1.0, 1.0), crop_size }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| Err(Error::InvalidValue { key: key.into(), message });
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return invalid("mirror_prob", format!("{} is not in [0, 1]", self.mirror_prob));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid("scale_range", format!("({lo}, {hi}) needs 0 < low <= high"));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return invalid("crop_size", "must be positive".into());
        }
        if self.crop_size.0.max(self.crop_size.1) > MAX_CROP {
            return invalid("crop_size", format!("at most {MAX_CROP} pixels"));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { mirror_prob: 0.5, scale_range: (0.5, 2.0), crop_size: (96, 96) }
    }
}

/// Random scale, random mirror, random crop. The mask, when given, gets the same geometry with
/// nearest-neighbor resampling. Exactly four values are drawn from `rng` per call.
pub fn sample_training_crop<R: Rng + ?Sized>(
    image: &Planar<f32>,
    mask: Option<&Planar<u8>>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Planar<f32>, Option<Planar<u8>>) {
    let (lo, hi) = cfg.scale_range;
    let scale = lo + (hi - lo) * rng.random::<f64>();
    let mirror = rng.random::<f64>() < cfg.mirror_prob;
    let u_top: f64 = rng.random();
    let u_left: f64 = rng.random();

    let nh = ((image.height as f64 * scale).round() as usize).max(1);
    let nw = ((image.width as f64 * scale).round() as usize).max(1);
    let (mut img, mut msk) = if (nh, nw) == (image.height, image.width) {
        (image.clone(), mask.cloned())
    } else {
        (resize_bilinear(image, nh, nw), mask.map(|m| resize_nearest(m, nh, nw)))
    };
    if mirror {
        img = img.mirrored();
        msk = msk.map(|m| m.mirrored());
    }
    let (ch, cw) = cfg.crop_size;
    img = reflect_pad_to(&img, ch, cw);
    msk = msk.map(|m| reflect_pad_to(&m, ch, cw));
    let top = offset(u_top, img.height - ch);
    let left = offset(u_left, img.width - cw);
    let crop = |p: &Planar<f32>| p.crop(top, left, ch, cw).expect("crop inside padded image");
    let out = crop(&img);
    let out_mask = msk.map(|m| m.crop(top, left, ch, cw).expect("crop inside padded mask"));
    (out, out_mask)
}

fn offset(u: f64, slack: usize) -> usize {
    ((u * (slack + 1) as f64) as usize).min(slack)
}

/// Deterministic evaluation crop: centered window, reflect-padded when the image is smaller.
pub fn center_crop<T: Copy>(image: &Planar<T>, height: usize, width: usize) -> Planar<T> {
    let padded = reflect_pad_to(image, height, width);
    let top = (padded.height - height) / 2;
    let left = (padded.width - width) / 2;
    padded.crop(top, left, height, width).expect("crop inside padded image")
}

fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < len as i64 { m } else { period - m }) as usize
}

/// Grows each axis to at least the target by mirror reflection, split evenly on both sides.
pub fn reflect_pad_to<T: Copy>(image: &Planar<T>, height: usize, width: usize) -> Planar<T> {
    if image.height >= height && image.width >= width {
        return image.clone();
    }
    let nh = image.height.max(height);
    let nw = image.width.max(width);
    let top = ((nh - image.height) / 2) as i64;
    let left = ((nw - image.width) / 2) as i64;
    Planar::from_fn(image.channels, nh, nw, |c, y, x| {
        image.at(
            c,
            reflect_index(y as i64 - top, image.height),
            reflect_index(x as i64 - left, image.width),
        )
    })
}

pub fn resize_bilinear(image: &Planar<f32>, height: usize, width: usize) -> Planar<f32> {
    let coords = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..height).map(|y| coords(y, image.height, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| coords(x, image.width, width)).collect();
    Planar::from_fn(image.channels, height, width, |c, y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = image.at(c, y0, x0) * (1.0 - fx) + image.at(c, y0, x1) * fx;
        let bot = image.at(c, y1, x0) * (1.0 - fx) + image.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn resize_nearest<T: Copy>(image: &Planar<T>, height: usize, width: usize) -> Planar<T> {
    let pick = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
    };
    Planar::from_fn(image.channels, height, width, |c, y, x| {
        image.at(c, pick(y, image.height, height), pick(x, image.width, width))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Planar<f32> {
        Planar::from_fn(3, h, w, |c, y, x| (c * 1000 + y * w + x) as f32)
    }

    #[test]
    fn identity_when_nothing_to_do() {
        let img = ramp(8, 8);
        let cfg = AugmentConfig::crop_only((8, 8));
        let (out, _) = sample_training_crop(&img, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, img);
    }

    #[test]
    fn mirror_always() {
        let img = ramp(6, 7);
        let cfg = AugmentConfig { mirror_prob: 1.0, ..AugmentConfig::crop_only((6, 7)) };
        let (out, _) = sample_training_crop(&img, None, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(out.at(c, y, x), img.at(c, y, 6 - x));
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_mask_follows() {
        let img = ramp(20, 24);
        let mask = Planar::from_fn(1, 20, 24, |_, y, x| ((y * 24 + x) % 251) as u8);
        let cfg = AugmentConfig::new(0.5, (0.5, 2.0), (16, 16)).unwrap();
        let run = |seed| {
            sample_training_crop(&img, Some(&mask), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        let (a, am) = run(9);
        let (b, bm) = run(9);
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(am, bm);
        assert_eq!((a.height, a.width), (16, 16));
        assert_eq!((am.as_ref().unwrap().height, am.as_ref().unwrap().width), (16, 16));
    }

    #[test]
    fn mask_geometry_matches_image() {
        // Encode each pixel's source coordinates in both image and mask; nearest resampling must
        // pick the same source row and column the image was mirrored/cropped to.
        let img = Planar::from_fn(1, 30, 30, |_, y, x| (y * 30 + x) as f32);
        let mask = Planar::from_fn(1, 30, 30, |_, y, x| (y * 30 + x) as u8);
        let cfg = AugmentConfig { mirror_prob: 1.0, ..AugmentConfig::crop_only((10, 10)) };
        let (out, m) = sample_training_crop(&img, Some(&mask), &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let m = m.unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(out.at(0, y, x) as usize % 256, m.at(0, y, x) as usize);
            }
        }
    }

    #[test]
    fn small_images_are_padded() {
        let img = ramp(4, 4);
        let cfg = AugmentConfig::crop_only((7, 9));
        let (out, _) = sample_training_crop(&img, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((out.height, out.width), (7, 9));
        let padded = reflect_pad_to(&img, 6, 4);
        // Rows: reflect of [0,1,2,3] with one row on each side -> 1,0,1,2,3,2.
        assert_eq!(padded.at(0, 0, 0), img.at(0, 1, 0));
        assert_eq!(padded.at(0, 5, 0), img.at(0, 2, 0));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AugmentConfig::new(1.5, (1.0, 1.0), (8, 8)).is_err());
        assert!(AugmentConfig::new(0.5, (0.0, 1.0), (8, 8)).is_err());
        assert!(AugmentConfig::new(0.5, (2.0, 1.0), (8, 8)).is_err());
    }

    #[test]
    fn center_crop_window() {
        let img = ramp(10, 10);
        let c = center_crop(&img, 4, 6);
        assert_eq!(c.at(0, 0, 0), img.at(0, 3, 2));
    }
}
