use super::layers::Act;
use super::params::{Init, ParamGroup, ParamSpec, ParamStore};
use crate::archspec::CellAssignment;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real};

pub const HEAD_DIM: usize = 512;

pub const REDUCE_WEIGHT: &str = "head.reduce.weight";
pub const REDUCE_BIAS: &str = "head.reduce.bias";
pub const CLASSIFIER_WEIGHT: &str = "head.classifier.weight";
pub const CLASSIFIER_BIAS: &str = "head.classifier.bias";

/// What the first layer of a location head sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// One cell plus the center cell.
    ReferenceConcat,
    /// All cells at once, as in permutation-index classifiers.
    PermutationConcat,
}

/// Weight count of the first reduction layer, with a 512-wide output.
pub fn head_param_count(channels: usize, cells: usize, mode: HeadMode) -> usize {
    match mode {
        HeadMode::PermutationConcat => cells * channels * HEAD_DIM,
        HeadMode::ReferenceConcat => 2 * channels * HEAD_DIM,
    }
}

/// Mean-pooled features per cell, rows `batch * cells`, `channels` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatures<T> {
    pub batch: usize,
    pub cells: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> CellFeatures<T> {
    pub fn row(&self, b: usize, cell: usize) -> &[T] {
        let r = b * self.cells + cell;
        &self.data[r * self.channels..(r + 1) * self.channels]
    }
}

fn check_assignment<T>(fm: &Act<T>, a: &CellAssignment) -> Result<()> {
    if (fm.h, fm.w) != (a.feat_h, a.feat_w) {
        return Err(Error::Shape(format!(
            "feature map is {}x{}, assignment expects {}x{}",
            fm.h, fm.w, a.feat_h, a.feat_w
        )));
    }
    Ok(())
}

/// Averages the feature pixels assigned to each cell.
pub fn pool_cells<T: Real>(fm: &Act<T>, assignment: &CellAssignment) -> Result<CellFeatures<T>> {
    check_assignment(fm, assignment)?;
    let n = assignment.grid.num_cells();
    if let Some(cell) = assignment.counts.iter().position(|&k| k == 0) {
        let g = assignment.grid.side();
        return Err(Error::ResolutionMismatch { cell, row: cell / g, col: cell % g });
    }
    let mut data = vec![T::zero(); fm.b * n * fm.c];
    let plane = fm.plane();
    for c in 0..fm.c {
        for b in 0..fm.b {
            let src = &fm.data[(c * fm.b + b) * plane..][..plane];
            for (px, v) in src.iter().enumerate() {
                let cell = assignment.cell_of[px];
                data[(b * n + cell) * fm.c + c] += *v;
            }
        }
    }
    for (r, row) in data.chunks_mut(fm.c).enumerate() {
        let inv = T::one() / T::from_usize_lossy(assignment.counts[r % n]);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(CellFeatures { batch: fm.b, cells: n, channels: fm.c, data })
}

/// Gradient of [`pool_cells`]: each pixel receives its cell's gradient divided by the cell size.
pub fn unpool_cells<T: Real>(d: &CellFeatures<T>, assignment: &CellAssignment) -> Act<T> {
    let mut out = Act::zeros(d.channels, d.batch, assignment.feat_h, assignment.feat_w);
    let plane = out.plane();
    for c in 0..d.channels {
        for b in 0..d.batch {
            let dst = &mut out.data[(c * d.batch + b) * plane..][..plane];
            for (px, v) in dst.iter_mut().enumerate() {
                let cell = assignment.cell_of[px];
                *v = d.data[(b * d.cells + cell) * d.channels + c]
                    / T::from_usize_lossy(assignment.counts[cell]);
            }
        }
    }
    out
}

/// `classifier(relu(reduce([x_p; x_center])))`, applied to every position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JigsawHead {
    pub channels: usize,
    pub hidden: usize,
    pub cells: usize,
    pub center: usize,
}

pub struct HeadCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    rows: usize,
}

impl JigsawHead {
    pub fn new(channels: usize, hidden: usize, cells: usize) -> Result<Self> {
        if channels == 0 || hidden == 0 || cells == 0 || cells.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "head needs positive sizes and an odd cell count, got C={channels} D={hidden} N={cells}"
            )));
        }
        Ok(Self { channels, hidden, cells, center: (cells - 1) / 2 })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let in_dim = 2 * self.channels;
        let spec = |name: &str, shape: Vec<usize>, init| ParamSpec {
            name: name.into(),
            shape,
            init,
            trainable: true,
            group: ParamGroup::JigsawHead,
        };
        vec![
            spec(REDUCE_WEIGHT, vec![self.hidden, in_dim], Init::Kaiming { fan_in: in_dim }),
            spec(REDUCE_BIAS, vec![self.hidden], Init::Zeros),
            spec(CLASSIFIER_WEIGHT, vec![self.cells, self.hidden], Init::Lecun { fan_in: self.hidden }),
            spec(CLASSIFIER_BIAS, vec![self.cells], Init::Zeros),
        ]
    }

    /// Logits, rows `batch * cells`, each scoring the `cells` absolute locations.
    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &CellFeatures<T>) -> Result<(Vec<T>, HeadCache<T>)> {
        if x.channels != self.channels || x.cells != self.cells {
            return Err(Error::Shape(format!(
                "head expects {} cells of {} channels, got {} of {}",
                self.cells, self.channels, x.cells, x.channels
            )));
        }
        let rows = x.batch * self.cells;
        let in_dim = 2 * self.channels;
        let mut input = Vec::with_capacity(rows * in_dim);
        for b in 0..x.batch {
            let center = x.row(b, self.center);
            for p in 0..self.cells {
                input.extend_from_slice(x.row(b, p));
                input.extend_from_slice(center);
            }
        }
        let mut hidden = bias_rows(params.get(REDUCE_BIAS).data(), rows);
        let w1 = MatRef::new(params.get(REDUCE_WEIGHT).data(), self.hidden, in_dim);
        gemm(T::one(), MatRef::new(&input, rows, in_dim), w1.t(), T::one(), &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut logits = bias_rows(params.get(CLASSIFIER_BIAS).data(), rows);
        let w2 = MatRef::new(params.get(CLASSIFIER_WEIGHT).data(), self.cells, self.hidden);
        gemm(T::one(), MatRef::new(&hidden, rows, self.hidden), w2.t(), T::one(), &mut logits);
        Ok((logits, HeadCache { input, hidden, rows }))
    }

    /// Accumulates head gradients into `grads` and returns the gradient for the cell features.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &HeadCache<T>,
        d_logits: &[T],
        grads: &mut ParamStore<T>,
    ) -> CellFeatures<T> {
        let (rows, d, n, in_dim) = (cache.rows, self.hidden, self.cells, 2 * self.channels);
        let mut dw2 = vec![T::zero(); n * d];
        gemm(T::one(), MatRef::new(d_logits, rows, n).t(), MatRef::new(&cache.hidden, rows, d), T::zero(), &mut dw2);
        grads.accumulate(CLASSIFIER_WEIGHT, &[n, d], &dw2);
        grads.accumulate(CLASSIFIER_BIAS, &[n], &column_sums(d_logits, n));

        let mut dh = vec![T::zero(); rows * d];
        let w2 = MatRef::new(params.get(CLASSIFIER_WEIGHT).data(), n, d);
        gemm(T::one(), MatRef::new(d_logits, rows, n), w2, T::zero(), &mut dh);
        for (g, h) in dh.iter_mut().zip(&cache.hidden) {
            if *h <= T::zero() {
                *g = T::zero();
            }
        }
        let mut dw1 = vec![T::zero(); d * in_dim];
        gemm(T::one(), MatRef::new(&dh, rows, d).t(), MatRef::new(&cache.input, rows, in_dim), T::zero(), &mut dw1);
        grads.accumulate(REDUCE_WEIGHT, &[d, in_dim], &dw1);
        grads.accumulate(REDUCE_BIAS, &[d], &column_sums(&dh, d));

        let mut dx = vec![T::zero(); rows * in_dim];
        let w1 = MatRef::new(params.get(REDUCE_WEIGHT).data(), d, in_dim);
        gemm(T::one(), MatRef::new(&dh, rows, d), w1, T::zero(), &mut dx);

        let c = self.channels;
        let batch = rows / n;
        let mut out = vec![T::zero(); rows * c];
        for b in 0..batch {
            for p in 0..n {
                let src = &dx[(b * n + p) * in_dim..][..in_dim];
                for k in 0..c {
                    out[(b * n + p) * c + k] += src[k];
                    out[(b * n + self.center) * c + k] += src[c + k];
                }
            }
        }
        CellFeatures { batch, cells: n, channels: c, data: out }
    }
}

fn bias_rows<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn column_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    out
}

/// Logits `N x N` for one sample's `N x C` cell features.
pub fn jigsaw_head_forward<T: Real>(
    params: &ParamStore<T>,
    cell_feats: &[T],
    channels: usize,
    center_index: usize,
) -> Result<Vec<T>> {
    if channels == 0 || !cell_feats.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!("{} values are not rows of {channels}", cell_feats.len())));
    }
    let cells = cell_feats.len() / channels;
    let hidden = params.try_get(REDUCE_BIAS).map(|t| t.len()).unwrap_or(0);
    let head = JigsawHead::new(channels, hidden, cells)?;
    if head.center != center_index {
        return Err(Error::Shape(format!("center of {cells} cells is {}, not {center_index}", head.center)));
    }
    let x = CellFeatures { batch: 1, cells, channels, data: cell_feats.to_vec() };
    head.forward(params, &x).map(|(logits, _)| logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{cell_assignment, RfProfile};
    use crate::puzzle::GridSpec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_from_the_parameter_arithmetic() {
        assert_eq!(head_param_count(512, 9, HeadMode::PermutationConcat), 2_359_296);
        assert_eq!(head_param_count(512, 9, HeadMode::ReferenceConcat), 524_288);
        assert_eq!(head_param_count(1, 9, HeadMode::ReferenceConcat), 1024);
    }

    #[test]
    fn spec_weights_match_count() {
        let head = JigsawHead::new(64, HEAD_DIM, 9).unwrap();
        let specs = head.param_specs();
        assert_eq!(specs[0].numel(), head_param_count(64, 9, HeadMode::ReferenceConcat));
        let total: usize = specs.iter().map(|s| s.numel()).sum();
        assert_eq!(total, 2 * 64 * 512 + 512 + 512 * 9 + 9);
    }

    #[test]
    fn pooling_constant_and_single_cell() {
        let profile = RfProfile { rf: 1, effective_stride: 1, effective_padding: 0 };
        let a = cell_assignment(&profile, (2, 2), GridSpec::new(1).unwrap()).unwrap();
        let mut fm = Act::<f64>::zeros(1, 1, 2, 2);
        fm.data = vec![1.0, 2.0, 3.0, 6.0];
        assert_eq!(pool_cells(&fm, &a).unwrap().data, vec![3.0]);

        let a = cell_assignment(&profile, (6, 6), GridSpec::new(3).unwrap()).unwrap();
        let mut fm = Act::<f64>::zeros(2, 1, 6, 6);
        fm.data.iter_mut().for_each(|v| *v = 0.75);
        assert!(pool_cells(&fm, &a).unwrap().data.iter().all(|v| *v == 0.75));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let head = JigsawHead::new(4, 8, 9).unwrap();
        let mut params = ParamStore::<f64>::new();
        for s in head.param_specs() {
            params.insert(&s.name, Tensor::zeros(s.shape.clone()));
        }
        let feats: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let logits = jigsaw_head_forward(&params, &feats, 4, 4).unwrap();
        assert_eq!(logits.len(), 81);
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_is_positionwise() {
        let head = JigsawHead::new(3, 16, 9).unwrap();
        let params = ParamStore::<f64>::init(&head.param_specs(), &mut ChaCha8Rng::seed_from_u64(9));
        let feats: Vec<f64> = (0..27).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let base = jigsaw_head_forward(&params, &feats, 3, 4).unwrap();
        // Swap non-center rows 0 and 7.
        let mut swapped = feats.clone();
        for k in 0..3 {
            swapped.swap(k, 21 + k);
        }
        let out = jigsaw_head_forward(&params, &swapped, 3, 4).unwrap();
        assert_eq!(&out[..9], &base[63..72]);
        assert_eq!(&out[63..72], &base[..9]);
        assert_eq!(&out[36..45], &base[36..45]);
    }
}
