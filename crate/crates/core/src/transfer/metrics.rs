use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::center_crop;
use crate::error::{Error, Result};
use crate::model::layers::{argmax, Act};
use crate::model::{predict_classes, ForwardMode, JigsawNet, ParamStore, SegNet, IGNORE_LABEL};
use crate::planar::Planar;
use crate::puzzle::{sample_permutation, shuffle, GridSpec};

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct MIoUReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

/// Integer intersection and union counts, accumulated over any number of maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        Self { intersection: vec![0; classes], union: vec![0; classes] }
    }

    /// Pixels whose truth is the ignore id are skipped.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
        }
        let k = self.union.len();
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= k || p >= k {
                return Err(Error::LabelOutOfRange { label: t.max(p), classes: k });
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MIoUReport {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        MIoUReport { per_class_iou, mean_iou, intersection: self.intersection.clone(), union: self.union.clone() }
    }
}

/// Intersection over union per class and their mean over classes with a nonempty union.
pub fn miou(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<MIoUReport> {
    let mut counts = IouCounts::new(num_classes);
    counts.add(pred, truth)?;
    Ok(counts.report())
}

/// Full-image segmentation of every image, scored against its mask.
pub fn evaluate_seg(net: &SegNet, params: &ParamStore<f32>, images: &[Planar<f32>], masks: &[Planar<u8>]) -> Result<MIoUReport> {
    if images.len() != masks.len() {
        return Err(Error::Shape(format!("{} images but {} masks", images.len(), masks.len())));
    }
    let mut counts = IouCounts::new(net.head.classes);
    let mode = ForwardMode::eval(net.backbone.num_layers());
    let mut start = 0;
    while start < images.len() {
        // Batch only equally sized neighbors.
        let shape = (images[start].height, images[start].width);
        let mut end = start + 1;
        while end < images.len() && end - start < EVAL_BATCH && (images[end].height, images[end].width) == shape {
            end += 1;
        }
        let input: Act<f32> = Act::from_images(&images[start..end].iter().collect::<Vec<_>>())?;
        let pass = net.forward(params, &input, &mode)?;
        for (pred, mask) in predict_classes(&pass.scores).iter().zip(&masks[start..end]) {
            counts.add(&pred.data, &mask.data)?;
        }
        start = end;
    }
    Ok(counts.report())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PuzzleScore {
    pub correct: usize,
    pub total: usize,
}

impl PuzzleScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// One seeded puzzle per image (center crop of `crop`), scored by any predictor that maps a batch
/// of puzzle images to one location per cell, row-major per image.
pub fn puzzle_accuracy_with<F>(images: &[Planar<f32>], grid: GridSpec, crop: (usize, usize), seed: u64, mut predict: F) -> Result<PuzzleScore>
where
    F: FnMut(&[Planar<f32>]) -> Result<Vec<usize>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score = PuzzleScore { correct: 0, total: 0 };
    for chunk in images.chunks(EVAL_BATCH) {
        let mut puzzles = Vec::with_capacity(chunk.len());
        let mut labels = Vec::new();
        for img in chunk {
            let cropped = center_crop(img, crop.0, crop.1);
            let perm = sample_permutation(&mut rng, grid);
            let p = shuffle(&cropped, &perm, grid)?;
            labels.extend_from_slice(&p.labels);
            puzzles.push(p.image);
        }
        let predicted = predict(&puzzles)?;
        if predicted.len() != labels.len() {
            return Err(Error::Shape(format!("{} predictions for {} cells", predicted.len(), labels.len())));
        }
        score.correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        score.total += labels.len();
    }
    Ok(score)
}

/// Row-argmax of the location logits, evaluation-mode network.
pub fn puzzle_accuracy(net: &JigsawNet, params: &ParamStore<f32>, images: &[Planar<f32>], crop: (usize, usize), seed: u64) -> Result<PuzzleScore> {
    let n = net.grid.num_cells();
    let mode = ForwardMode::eval(net.backbone.num_layers());
    puzzle_accuracy_with(images, net.grid, crop, seed, |batch| {
        let input: Act<f32> = Act::from_images(&batch.iter().collect::<Vec<_>>())?;
        let pass = net.forward(params, &input, &mode)?;
        Ok(pass.logits.chunks(n).map(argmax).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_iou() {
        let r = miou(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean_iou, 0.25);
        let r = miou(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.mean_iou, 1.0);
        let r = miou(&[0, 1], &[0, IGNORE_LABEL], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), None]);
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let images: Vec<Planar<f32>> = (0..3).map(|i| Planar::filled(3, 9, 9, i as f32)).collect();
        let grid = GridSpec::new(3).unwrap();
        // Re-derive the labels with the same seed to act as an oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<usize> = (0..3).flat_map(|_| sample_permutation(&mut rng, grid).as_slice().to_vec()).collect();
        let s = puzzle_accuracy_with(&images, grid, (9, 9), 8, |_| Ok(truth.clone())).unwrap();
        assert_eq!(s.accuracy(), 1.0);
        let s = puzzle_accuracy_with(&images, grid, (9, 9), 8, |b| Ok(vec![0; b.len() * 9])).unwrap();
        assert_eq!((s.correct, s.total), (3, 27));
    }
}
