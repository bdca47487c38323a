//! Jigsaw puzzles on a square grid whose center cell never moves.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::planar::Planar;

/// Odd grid side `g`; cells are indexed row-major from 0 to `g*g - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    side: usize,
}

impl GridSpec {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || side.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!("grid side must be odd and positive, got {side}")));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_cells(&self) -> usize {
        self.side * self.side
    }

    pub fn center_index(&self) -> usize {
        (self.num_cells() - 1) / 2
    }
}

/// `sigma[p]` is the original cell of the patch placed at position `p`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    sigma: Vec<usize>,
}

impl Permutation {
    pub fn new(sigma: Vec<usize>, grid: GridSpec) -> Result<Self> {
        let n = grid.num_cells();
        if sigma.len() != n {
            return Err(Error::InvalidPermutation(format!("expected {n} entries, got {}", sigma.len())));
        }
        let mut seen = vec![false; n];
        for &s in &sigma {
            if s >= n || std::mem::replace(&mut seen[s], true) {
                return Err(Error::InvalidPermutation(format!("{sigma:?} is not a bijection on 0..{n}")));
            }
        }
        let c = grid.center_index();
        if sigma[c] != c {
            return Err(Error::InvalidPermutation(format!("center cell {c} must stay fixed")));
        }
        Ok(Self { sigma })
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self { sigma: (0..grid.num_cells()).collect() }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn invert(&self) -> Self {
        let mut inv = vec![0; self.sigma.len()];
        for (p, &s) in self.sigma.iter().enumerate() {
            inv[s] = p;
        }
        Self { sigma: inv }
    }
}

pub fn invert(permutation: &Permutation) -> Permutation {
    permutation.invert()
}

/// Uniform over the `(N-1)!` permutations that keep the center fixed.
pub fn sample_permutation<R: Rng + ?Sized>(rng: &mut R, grid: GridSpec) -> Permutation {
    let center = grid.center_index();
    let mut sigma: Vec<usize> = (0..grid.num_cells()).collect();
    let movable: Vec<usize> = (0..grid.num_cells()).filter(|&p| p != center).collect();
    for i in (1..movable.len()).rev() {
        let j = rng.random_range(0..=i);
        sigma.swap(movable[i], movable[j]);
    }
    Permutation { sigma }
}

/// Center-crops to a multiple of `g` on both axes and splits into `g*g` patches, row-major.
pub fn divide<T: Copy>(image: &Planar<T>, grid: GridSpec) -> Result<Vec<Planar<T>>> {
    let g = grid.side();
    if image.height < g || image.width < g {
        return Err(Error::ImageTooSmall { height: image.height, width: image.width, side: g });
    }
    let (ph, pw) = (image.height / g, image.width / g);
    let top = (image.height - ph * g) / 2;
    let left = (image.width - pw * g) / 2;
    let mut patches = Vec::with_capacity(grid.num_cells());
    for r in 0..g {
        for c in 0..g {
            patches.push(image.crop(top + r * ph, left + c * pw, ph, pw)?);
        }
    }
    Ok(patches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PuzzleSample<T> {
    pub image: Planar<T>,
    /// `labels[p] = sigma[p]`, the original location of the patch at position `p`.
    pub labels: Vec<usize>,
    pub permutation: Permutation,
    pub cell_size: (usize, usize),
}

pub fn assemble<T: Copy>(
    patches: &[Planar<T>],
    permutation: &Permutation,
    grid: GridSpec,
) -> Result<PuzzleSample<T>> {
    let n = grid.num_cells();
    if patches.len() != n || permutation.len() != n {
        return Err(Error::InvalidPatches(format!(
            "{} patches and a permutation of {} for a grid of {n} cells",
            patches.len(),
            permutation.len()
        )));
    }
    let first = &patches[0];
    let (c, ph, pw) = (first.channels, first.height, first.width);
    if let Some(bad) = patches.iter().position(|p| (p.channels, p.height, p.width) != (c, ph, pw)) {
        return Err(Error::InvalidPatches(format!("patch {bad} differs in shape from patch 0")));
    }
    let g = grid.side();
    let mut image = Planar::filled(c, ph * g, pw * g, first.data[0]);
    for (p, &src) in permutation.as_slice().iter().enumerate() {
        image.paste(&patches[src], (p / g) * ph, (p % g) * pw);
    }
    Ok(PuzzleSample {
        image,
        labels: permutation.as_slice().to_vec(),
        permutation: permutation.clone(),
        cell_size: (ph, pw),
    })
}

/// Divides `image` and reassembles it under `permutation`.
pub fn shuffle<T: Copy>(image: &Planar<T>, permutation: &Permutation, grid: GridSpec) -> Result<PuzzleSample<T>> {
    assemble(&divide(image, grid)?, permutation, grid)
}

/// Sidecar text of a dumped puzzle: one `position:label` line per cell.
pub fn labels_to_text(labels: &[usize]) -> String {
    let mut out = String::new();
    for (p, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{p}:{l}");
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: &str| Error::InvalidPermutation(format!("label line {}: {message}", idx + 1));
        let (p, l) = line.trim().split_once(':').ok_or_else(|| bad("expected `position:label`"))?;
        let p: usize = p.trim().parse().map_err(|_| bad("position is not an integer"))?;
        let l: usize = l.trim().parse().map_err(|_| bad("label is not an integer"))?;
        if p != labels.len() {
            return Err(bad("positions must be listed in order from 0"));
        }
        labels.push(l);
    }
    Ok(labels)
}

/// Writes `<stem>.png` (values in [0,1] per channel) and `<stem>.txt`.
pub fn write_dump(dir: &Path, stem: &str, sample: &PuzzleSample<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    crate::dataio::save_rgb_png(&dir.join(format!("{stem}.png")), &sample.image)?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, labels_to_text(&sample.labels))
        .map_err(|e| Error::io(format!("writing {}", txt.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(g: usize) -> GridSpec {
        GridSpec::new(g).unwrap()
    }

    fn counting(c: usize, h: usize, w: usize) -> Planar<u32> {
        Planar::from_fn(c, h, w, |c, y, x| (c * h * w + y * w + x) as u32)
    }

    #[test]
    fn grid_rules() {
        assert!(GridSpec::new(4).is_err());
        assert!(GridSpec::new(0).is_err());
        assert_eq!(grid(3).center_index(), 4);
        assert_eq!(grid(5).center_index(), 12);
        assert_eq!(grid(5).center_index() * 2, grid(5).num_cells() - 1);
    }

    #[test]
    fn patch_sizes_for_576_crops() {
        let img = Planar::filled(1, 576, 576, 0u8);
        let nine = divide(&img, grid(3)).unwrap();
        assert_eq!(nine.len(), 9);
        assert!(nine.iter().all(|p| (p.height, p.width) == (192, 192)));
        let many = divide(&img, grid(5)).unwrap();
        assert_eq!(many.len(), 25);
        assert!(many.iter().all(|p| (p.height, p.width) == (115, 115)));
    }

    #[test]
    fn center_patch_is_center_block() {
        let img = counting(1, 6, 6);
        let patches = divide(&img, grid(3)).unwrap();
        assert_eq!(patches[4].data, vec![14, 15, 20, 21]);
    }

    #[test]
    fn crop_is_centered() {
        let img = counting(1, 7, 7);
        let patches = divide(&img, grid(3)).unwrap();
        // 7 -> 6 drops row/col 6 only (offset 0); 8 -> 6 would drop one on each side.
        assert_eq!(patches[0].data, vec![0, 1, 7, 8]);
        let img = counting(1, 8, 8);
        assert_eq!(divide(&img, grid(3)).unwrap()[0].data, vec![9, 10, 17, 18]);
    }

    #[test]
    fn too_small() {
        let img = Planar::filled(1, 2, 9, 0u8);
        assert!(matches!(divide(&img, grid(3)), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn identity_assembly() {
        let img = counting(2, 9, 9);
        let s = shuffle(&img, &Permutation::identity(grid(3)), grid(3)).unwrap();
        assert_eq!(s.image, img);
        assert_eq!(s.labels, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn swap_moves_blocks() {
        let img = counting(1, 6, 6);
        let perm = Permutation::new(vec![1, 0, 2, 3, 4, 5, 6, 7, 8], grid(3)).unwrap();
        let s = shuffle(&img, &perm, grid(3)).unwrap();
        assert_eq!(s.image.crop(0, 0, 2, 2).unwrap(), img.crop(0, 2, 2, 2).unwrap());
        assert_eq!(s.labels[0], 1);
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let img = counting(1, 6, 6);
        let mut patches = divide(&img, grid(3)).unwrap();
        patches.pop();
        let id = Permutation::identity(grid(3));
        assert!(matches!(assemble(&patches, &id, grid(3)), Err(Error::InvalidPatches(_))));
        let mut patches = divide(&img, grid(3)).unwrap();
        patches[3] = Planar::filled(1, 3, 2, 0);
        assert!(matches!(assemble(&patches, &id, grid(3)), Err(Error::InvalidPatches(_))));
    }

    #[test]
    fn inverse_of_cycle() {
        let perm = Permutation::new(vec![1, 2, 0, 3, 4, 5, 6, 7, 8], grid(3)).unwrap();
        assert_eq!(perm.invert().as_slice(), &[2, 0, 1, 3, 4, 5, 6, 7, 8]);
        let id = Permutation::identity(grid(3));
        assert_eq!(invert(&id), id);
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 1, 2, 3, 5, 4, 6, 7, 8], grid(3)).is_err());
        assert!(Permutation::new(vec![0, 0, 2, 3, 4, 5, 6, 7, 8], grid(3)).is_err());
        assert!(Permutation::new(vec![0, 1], grid(3)).is_err());
    }

    #[test]
    fn sampled_center_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [3, 5] {
            for _ in 0..20 {
                let p = sample_permutation(&mut rng, grid(g));
                let c = grid(g).center_index();
                assert_eq!(p.as_slice()[c], c);
                Permutation::new(p.as_slice().to_vec(), grid(g)).unwrap();
            }
        }
    }

    #[test]
    fn sampled_positions_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let mut freq = [[0usize; 9]; 9];
        for _ in 0..draws {
            let p = sample_permutation(&mut rng, grid(3));
            for (pos, &cell) in p.as_slice().iter().enumerate() {
                freq[cell][pos] += 1;
            }
        }
        for cell in (0..9).filter(|&c| c != 4) {
            for pos in (0..9).filter(|&p| p != 4) {
                let f = freq[cell][pos] as f64 / draws as f64;
                assert!((f - 0.125).abs() <= 0.01, "cell {cell} at {pos}: {f}");
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let a = sample_permutation(&mut ChaCha8Rng::seed_from_u64(3), grid(5));
        let b = sample_permutation(&mut ChaCha8Rng::seed_from_u64(3), grid(5));
        assert_eq!(a, b);
    }

    #[test]
    fn labels_text_round_trip() {
        let labels = vec![3, 1, 2, 0, 4, 5, 6, 7, 8];
        assert_eq!(parse_labels(&labels_to_text(&labels)).unwrap(), labels);
        assert!(parse_labels("1:0\n").is_err());
        assert!(parse_labels("0-1\n").is_err());
    }
}
