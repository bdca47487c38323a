use std::fmt;

use super::ArchSpec;
use crate::error::{Error, Result};
use crate::puzzle::GridSpec;

/// Receptive-field geometry of a whole layer chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RfProfile {
    pub rf: usize,
    pub effective_stride: usize,
    pub effective_padding: usize,
}

/// `r = sum_l (k_l - 1) * prod_{i<l} s_i + 1`, `S0 = prod_l s_l`, `P0 = sum_l p_l * prod_{i<l} s_i`.
pub fn compute_rf_profile(arch: &ArchSpec) -> Result<RfProfile> {
    if arch.layers().is_empty() {
        return Err(Error::InvalidArchitecture("no layers".into()));
    }
    let overflow = || Error::InvalidArchitecture("receptive field overflows".into());
    let mut jump = 1usize;
    let mut rf = 1usize;
    let mut padding = 0usize;
    for layer in arch.layers() {
        rf = (layer.kernel - 1)
            .checked_mul(jump)
            .and_then(|v| v.checked_add(rf))
            .ok_or_else(overflow)?;
        padding = layer
            .padding
            .checked_mul(jump)
            .and_then(|v| v.checked_add(padding))
            .ok_or_else(overflow)?;
        jump = jump.checked_mul(layer.stride).ok_or_else(overflow)?;
    }
    Ok(RfProfile { rf, effective_stride: jump, effective_padding: padding })
}

/// A pixel coordinate stored doubled so that half-pixel centers stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HalfPixel(pub i64);

impl HalfPixel {
    pub fn from_pixels(v: i64) -> Self {
        HalfPixel(2 * v)
    }

    pub fn is_integral(self) -> bool {
        self.0 % 2 == 0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 2.0
    }

    /// Nearest pixel, with `x.5` going down.
    pub fn round_half_down(self) -> i64 {
        self.0.div_euclid(2)
    }
}

impl fmt::Display for HalfPixel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integral() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}.5", self.round_half_down())
        }
    }
}

/// Input-image coordinates of the receptive-field center of one feature pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RfCenter {
    pub row: HalfPixel,
    pub col: HalfPixel,
}

pub fn rf_center(profile: &RfProfile, i: usize, j: usize) -> RfCenter {
    let along = |idx: usize| {
        HalfPixel(
            -2 * profile.effective_padding as i64
                + (profile.rf as i64 - 1)
                + 2 * idx as i64 * profile.effective_stride as i64,
        )
    };
    RfCenter { row: along(i), col: along(j) }
}

/// Receptive field measured by propagating input dependencies through the actual layer chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BruteForceRf {
    /// Extent of the central interior output pixel.
    pub rf: usize,
    pub output_len: usize,
    /// `(output index, measured center)` for every output pixel untouched by padding.
    pub centers: Vec<(usize, HalfPixel)>,
}

#[derive(Clone)]
struct Deps {
    bits: Vec<u64>,
    touches_padding: bool,
}

impl Deps {
    fn extent(&self) -> Option<(usize, usize)> {
        let first = self.bits.iter().position(|w| *w != 0)?;
        let last = self.bits.iter().rposition(|w| *w != 0)?;
        let lo = first * 64 + self.bits[first].trailing_zeros() as usize;
        let hi = last * 64 + 63 - self.bits[last].leading_zeros() as usize;
        Some((lo, hi))
    }
}

/// Marks, for every output pixel of a 1-D slice through the network, the set of input pixels it
/// reads. Pixels whose computation touched padding are excluded from the measurement.
pub fn brute_force_rf(arch: &ArchSpec, input_size: usize) -> Result<BruteForceRf> {
    let words = input_size.div_ceil(64);
    let mut deps: Vec<Deps> = (0..input_size)
        .map(|i| {
            let mut bits = vec![0u64; words];
            bits[i / 64] |= 1 << (i % 64);
            Deps { bits, touches_padding: false }
        })
        .collect();

    for layer in arch.layers() {
        let out_len = layer.output_len(deps.len()).ok_or_else(|| Error::InsufficientInput {
            size: input_size,
            message: format!("layer `{}` produces no output", layer.name),
        })?;
        let mut next = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let mut acc = Deps { bits: vec![0u64; words], touches_padding: false };
            for t in 0..layer.kernel {
                let pos = (o * layer.stride + t) as i64 - layer.padding as i64;
                match usize::try_from(pos).ok().and_then(|p| deps.get(p)) {
                    Some(src) => {
                        for (a, b) in acc.bits.iter_mut().zip(&src.bits) {
                            *a |= *b;
                        }
                        acc.touches_padding |= src.touches_padding;
                    }
                    None => acc.touches_padding = true,
                }
            }
            next.push(acc);
        }
        deps = next;
    }

    let output_len = deps.len();
    let centers: Vec<(usize, HalfPixel, usize)> = deps
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.touches_padding)
        .filter_map(|(o, d)| d.extent().map(|(lo, hi)| (o, HalfPixel((lo + hi) as i64), hi - lo + 1)))
        .collect();
    if centers.is_empty() {
        return Err(Error::InsufficientInput {
            size: input_size,
            message: "no output pixel has a receptive field inside the input".into(),
        });
    }
    let rf = centers[centers.len() / 2].2;
    Ok(BruteForceRf {
        rf,
        output_len,
        centers: centers.into_iter().map(|(o, c, _)| (o, c)).collect(),
    })
}

/// Which puzzle cell each feature pixel belongs to, by the position of its receptive-field center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellAssignment {
    pub grid: GridSpec,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Row-major over feature pixels.
    pub cell_of: Vec<usize>,
    pub counts: Vec<usize>,
}

impl CellAssignment {
    /// Feature pixel indices of one cell, row-major.
    pub fn pixels_of(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.cell_of
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == cell)
            .map(|(p, _)| p)
    }
}

pub fn cell_assignment(
    profile: &RfProfile,
    input: (usize, usize),
    grid: GridSpec,
) -> Result<CellAssignment> {
    let (h, w) = input;
    let g = grid.side();
    if h < g || w < g {
        return Err(Error::ImageTooSmall { height: h, width: w, side: g });
    }
    let feat_len = |size: usize| {
        let padded = size + 2 * profile.effective_padding;
        if padded < profile.rf {
            Err(Error::InsufficientInput {
                size,
                message: format!("receptive field {} exceeds the padded input", profile.rf),
            })
        } else {
            Ok((padded - profile.rf) / profile.effective_stride + 1)
        }
    };
    let (feat_h, feat_w) = (feat_len(h)?, feat_len(w)?);
    let (cell_h, cell_w) = (h / g, w / g);
    let cell_along = |center: HalfPixel, size: usize, cell: usize| {
        let px = center.round_half_down().clamp(0, size as i64 - 1) as usize;
        (px / cell).min(g - 1)
    };

    let mut cell_of = Vec::with_capacity(feat_h * feat_w);
    let mut counts = vec![0usize; grid.num_cells()];
    for i in 0..feat_h {
        for j in 0..feat_w {
            let c = rf_center(profile, i, j);
            let cell = cell_along(c.row, h, cell_h) * g + cell_along(c.col, w, cell_w);
            counts[cell] += 1;
            cell_of.push(cell);
        }
    }
    if let Some(cell) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ResolutionMismatch { cell, row: cell / g, col: cell % g });
    }
    Ok(CellAssignment { grid, feat_h, feat_w, cell_of, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, LayerSpec};

    fn profile(rf: usize, s: usize, p: usize) -> RfProfile {
        RfProfile { rf, effective_stride: s, effective_padding: p }
    }

    #[test]
    fn single_conv() {
        let arch = ArchSpec::chain(vec![LayerSpec::conv("c", 3, 1, 1, 1)], 1).unwrap();
        assert_eq!(compute_rf_profile(&arch).unwrap(), profile(3, 1, 1));
    }

    #[test]
    fn tinyfcn_profile() {
        let arch = preset("tinyfcn").unwrap().arch;
        assert_eq!(compute_rf_profile(&arch).unwrap(), profile(187, 32, 93));
    }

    #[test]
    fn centers() {
        let c = rf_center(&profile(7, 4, 0), 0, 0);
        assert_eq!((c.row, c.col), (HalfPixel(6), HalfPixel(6)));
        let tiny = profile(187, 32, 93);
        assert_eq!(rf_center(&tiny, 0, 0).row, HalfPixel(0));
        assert_eq!(rf_center(&tiny, 1, 0).row, HalfPixel::from_pixels(32));
        assert_eq!(rf_center(&tiny, 1, 0).col, HalfPixel(0));
    }

    #[test]
    fn even_rf_gives_half_pixel() {
        let c = rf_center(&profile(4, 2, 0), 0, 0);
        assert_eq!(c.row.to_string(), "1.5");
        assert_eq!(c.row.round_half_down(), 1);
        assert_eq!(HalfPixel(-3).round_half_down(), -2);
    }

    #[test]
    fn brute_force_small_chains() {
        let two = ArchSpec::chain(
            vec![LayerSpec::conv("a", 3, 2, 0, 1), LayerSpec::conv("b", 3, 2, 0, 1)],
            1,
        )
        .unwrap();
        assert_eq!(brute_force_rf(&two, 32).unwrap().rf, 7);
        let one = ArchSpec::chain(vec![LayerSpec::conv("a", 5, 1, 0, 1)], 1).unwrap();
        assert_eq!(brute_force_rf(&one, 9).unwrap().rf, 5);
    }

    #[test]
    fn brute_force_needs_interior_pixel() {
        let arch = ArchSpec::chain(vec![LayerSpec::conv("a", 5, 1, 2, 1)], 1).unwrap();
        assert!(matches!(brute_force_rf(&arch, 4), Err(Error::InsufficientInput { .. })));
        let big = ArchSpec::chain(vec![LayerSpec::conv("a", 9, 1, 0, 1)], 1).unwrap();
        assert!(matches!(brute_force_rf(&big, 4), Err(Error::InsufficientInput { .. })));
    }

    #[test]
    fn tinyfcn_cells() {
        let tiny = profile(187, 32, 93);
        let a = cell_assignment(&tiny, (576, 576), GridSpec::new(3).unwrap()).unwrap();
        assert_eq!((a.feat_h, a.feat_w), (18, 18));
        assert!(a.counts.iter().all(|&n| n == 36));
        let a = cell_assignment(&tiny, (960, 960), GridSpec::new(5).unwrap()).unwrap();
        assert_eq!((a.feat_h, a.feat_w), (30, 30));
        assert!(a.counts.iter().all(|&n| n == 36));
    }

    #[test]
    fn non_overlapping_one_pixel_per_cell() {
        let p = profile(8, 8, 0);
        let a = cell_assignment(&p, (24, 24), GridSpec::new(3).unwrap()).unwrap();
        assert_eq!(a.counts, vec![1; 9]);
        assert_eq!(a.cell_of, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn too_coarse_names_cell() {
        let p = profile(187, 32, 93);
        // 64x64 gives a 2x2 feature map, so the 3x3 grid must leave cells empty.
        let err = cell_assignment(&p, (64, 64), GridSpec::new(3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ResolutionMismatch { .. }), "{err}");
    }
}
