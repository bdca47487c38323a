use super::layers::Act;
use super::params::{Init, ParamGroup, ParamSpec, ParamStore};
use crate::archspec::{rf_center, RfProfile};
use crate::error::{Error, Result};
use crate::planar::Planar;
use crate::tensor::{gemm, MatRef, Real};

pub const SEG_WEIGHT: &str = "seg.classifier.weight";
pub const SEG_BIAS: &str = "seg.classifier.bias";

/// Mask value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Linear interpolation taps for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

/// Output pixel `y` samples the feature map at `(y - c0) / S0`, where `c0` is the receptive-field
/// center of feature pixel 0, clamped to the map.
fn taps(profile: &RfProfile, feat: usize, out: usize) -> Vec<Tap> {
    let c0 = rf_center(profile, 0, 0).row.as_f64();
    let s = profile.effective_stride as f64;
    (0..out)
        .map(|y| {
            let u = ((y as f64 - c0) / s).clamp(0.0, (feat - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(feat - 1);
            Tap { lo, hi, w_hi: u - lo as f64 }
        })
        .collect()
}

/// 1x1 classifier on the last feature map followed by bilinear upsampling to the input size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegHead {
    pub channels: usize,
    pub classes: usize,
    pub profile: RfProfile,
}

pub struct SegCache<T> {
    features: Act<T>,
    coarse_shape: (usize, usize),
}

impl SegHead {
    pub fn new(channels: usize, classes: usize, profile: RfProfile) -> Result<Self> {
        if channels == 0 || classes < 2 {
            return Err(Error::Shape(format!("seg head needs channels >= 1 and classes >= 2, got {channels}, {classes}")));
        }
        Ok(Self { channels, classes, profile })
    }

    pub fn upsample_factor(&self) -> usize {
        self.profile.effective_stride
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: SEG_WEIGHT.into(),
                shape: vec![self.classes, self.channels],
                init: Init::Lecun { fan_in: self.channels },
                trainable: true,
                group: ParamGroup::SegHead,
            },
            ParamSpec {
                name: SEG_BIAS.into(),
                shape: vec![self.classes],
                init: Init::Zeros,
                trainable: true,
                group: ParamGroup::SegHead,
            },
        ]
    }

    /// Class scores `K x B x H x W` at input resolution `(h, w)`.
    pub fn forward<T: Real>(&self, params: &ParamStore<T>, fm: &Act<T>, out: (usize, usize)) -> Result<(Act<T>, SegCache<T>)> {
        if fm.c != self.channels {
            return Err(Error::Shape(format!("seg head expects {} channels, got {}", self.channels, fm.c)));
        }
        let n = fm.per_channel();
        let mut coarse = Act::zeros(self.classes, fm.b, fm.h, fm.w);
        for (k, b) in params.get(SEG_BIAS).data().iter().enumerate() {
            coarse.data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        let w = MatRef::new(params.get(SEG_WEIGHT).data(), self.classes, self.channels);
        gemm(T::one(), w, MatRef::new(&fm.data, fm.c, n), T::one(), &mut coarse.data);
        let scores = self.upsample(&coarse, out);
        Ok((scores, SegCache { features: fm.clone(), coarse_shape: (fm.h, fm.w) }))
    }

    fn upsample<T: Real>(&self, coarse: &Act<T>, (h, w): (usize, usize)) -> Act<T> {
        let ty = taps(&self.profile, coarse.h, h);
        let tx = taps(&self.profile, coarse.w, w);
        let mut out = Act::zeros(coarse.c, coarse.b, h, w);
        for k in 0..coarse.c {
            for b in 0..coarse.b {
                for (y, a) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::lit(a.w_hi), T::lit(1.0 - a.w_hi));
                    for (x, c) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::lit(c.w_hi), T::lit(1.0 - c.w_hi));
                        let v = wy0 * (wx0 * coarse.at(k, b, a.lo, c.lo) + wx1 * coarse.at(k, b, a.lo, c.hi))
                            + wy1 * (wx0 * coarse.at(k, b, a.hi, c.lo) + wx1 * coarse.at(k, b, a.hi, c.hi));
                        let i = out.idx(k, b, y, x);
                        out.data[i] = v;
                    }
                }
            }
        }
        out
    }

    fn downsample_grad<T: Real>(&self, d: &Act<T>, (fh, fw): (usize, usize)) -> Act<T> {
        let ty = taps(&self.profile, fh, d.h);
        let tx = taps(&self.profile, fw, d.w);
        let mut out = Act::zeros(d.c, d.b, fh, fw);
        for k in 0..d.c {
            for b in 0..d.b {
                for (y, a) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::lit(a.w_hi), T::lit(1.0 - a.w_hi));
                    for (x, c) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::lit(c.w_hi), T::lit(1.0 - c.w_hi));
                        let g = d.at(k, b, y, x);
                        for (yy, xx, wt) in [
                            (a.lo, c.lo, wy0 * wx0),
                            (a.lo, c.hi, wy0 * wx1),
                            (a.hi, c.lo, wy1 * wx0),
                            (a.hi, c.hi, wy1 * wx1),
                        ] {
                            let i = out.idx(k, b, yy, xx);
                            out.data[i] += g * wt;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates classifier gradients; returns the gradient for the feature map when asked.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &SegCache<T>,
        d_scores: &Act<T>,
        grads: &mut ParamStore<T>,
        need_features: bool,
    ) -> Option<Act<T>> {
        let d_coarse = self.downsample_grad(d_scores, cache.coarse_shape);
        let fm = &cache.features;
        let n = fm.per_channel();
        let mut dw = vec![T::zero(); self.classes * self.channels];
        gemm(T::one(), MatRef::new(&d_coarse.data, self.classes, n), MatRef::new(&fm.data, fm.c, n).t(), T::zero(), &mut dw);
        grads.accumulate(SEG_WEIGHT, &[self.classes, self.channels], &dw);
        let db: Vec<T> = d_coarse.data.chunks(n).map(|c| c.iter().copied().sum()).collect();
        grads.accumulate(SEG_BIAS, &[self.classes], &db);
        if !need_features {
            return None;
        }
        let mut d_fm = Act::zeros(fm.c, fm.b, fm.h, fm.w);
        let w = MatRef::new(params.get(SEG_WEIGHT).data(), self.classes, self.channels);
        gemm(T::one(), w.t(), MatRef::new(&d_coarse.data, self.classes, n), T::zero(), &mut d_fm.data);
        Some(d_fm)
    }
}

fn check_masks<T>(scores: &Act<T>, masks: &[&Planar<u8>]) -> Result<()> {
    if masks.len() != scores.b {
        return Err(Error::Shape(format!("{} masks for a batch of {}", masks.len(), scores.b)));
    }
    if let Some(i) = masks.iter().position(|m| (m.channels, m.height, m.width) != (1, scores.h, scores.w)) {
        return Err(Error::Shape(format!("mask {i} does not match the {}x{} scores", scores.h, scores.w)));
    }
    Ok(())
}

/// Mean per-pixel softmax cross-entropy over non-ignored pixels, and its gradient.
pub fn pixel_cross_entropy<T: Real>(scores: &Act<T>, masks: &[&Planar<u8>]) -> Result<(T, Act<T>)> {
    check_masks(scores, masks)?;
    let k = scores.c;
    let n = scores.per_channel();
    let plane = scores.plane();
    let mut grad = Act::zeros(k, scores.b, scores.h, scores.w);
    let counted = masks.iter().flat_map(|m| &m.data).filter(|&&l| l != IGNORE_LABEL).count();
    if counted == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize_lossy(counted);
    let mut loss = T::zero();
    let mut row = vec![T::zero(); k];
    for i in 0..n {
        let label = masks[i / plane].data[i % plane];
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        for (c, r) in row.iter_mut().enumerate() {
            *r = scores.data[c * n + i];
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
        loss += log_z - row[label];
        for (c, r) in row.iter().enumerate() {
            grad.data[c * n + i] = (*r - log_z).exp() * inv;
        }
        grad.data[label * n + i] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Per-pixel argmax over classes, ties to the smallest class, one map per batch element.
pub fn predict_classes<T: Real>(scores: &Act<T>) -> Vec<Planar<u8>> {
    let n = scores.per_channel();
    let plane = scores.plane();
    (0..scores.b)
        .map(|b| {
            let data = (0..plane)
                .map(|p| {
                    let i = b * plane + p;
                    let mut best = 0;
                    for c in 1..scores.c {
                        if scores.data[c * n + i] > scores.data[best * n + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Planar::new(1, scores.h, scores.w, data).expect("plane-sized map")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> SegHead {
        SegHead::new(3, 4, RfProfile { rf: 187, effective_stride: 32, effective_padding: 93 }).unwrap()
    }

    #[test]
    fn output_shape_and_upsample_factor() {
        let h = head();
        assert_eq!(h.upsample_factor(), 32);
        let params = ParamStore::<f64>::init(&h.param_specs(), &mut ChaCha8Rng::seed_from_u64(1));
        let fm = Act::<f64>::zeros(3, 2, 3, 2);
        let (scores, _) = h.forward(&params, &fm, (96, 64)).unwrap();
        assert_eq!((scores.c, scores.b, scores.h, scores.w), (4, 2, 96, 64));
    }

    #[test]
    fn upsampling_hits_feature_values_at_rf_centers() {
        let h = head();
        let mut coarse = Act::<f64>::zeros(1, 1, 3, 3);
        coarse.data = (0..9).map(|v| v as f64).collect();
        let up = h.upsample(&coarse, (96, 96));
        assert_eq!(up.at(0, 0, 0, 0), 0.0);
        assert_eq!(up.at(0, 0, 32, 64), 5.0);
        assert_eq!(up.at(0, 0, 16, 0), 1.5);
        assert_eq!(up.at(0, 0, 95, 95), 8.0);
    }

    #[test]
    fn uniform_scores_give_log_k() {
        let scores = Act::<f64>::zeros(4, 1, 2, 2);
        let mask = Planar::new(1, 2, 2, vec![0, 1, 2, IGNORE_LABEL]).unwrap();
        let (loss, grad) = pixel_cross_entropy(&scores, &[&mask]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grad.data.iter().skip(3).step_by(4).all(|g| *g == 0.0));
        let bad = Planar::new(1, 2, 2, vec![0, 9, 0, 0]).unwrap();
        assert!(pixel_cross_entropy(&scores, &[&bad]).is_err());
    }

    #[test]
    fn argmax_ignores_constant_shift() {
        let mut scores = Act::<f64>::zeros(3, 1, 1, 2);
        scores.data = vec![0.1, 2.0, 0.5, 1.0, 0.3, 1.5];
        let a = predict_classes(&scores);
        scores.data.iter_mut().for_each(|v| *v += 7.0);
        assert_eq!(predict_classes(&scores), a);
        assert_eq!(a[0].data, vec![1, 0]);
    }
}
