//! Layer-chain descriptions of convolutional networks and their receptive-field geometry.

mod parse;
mod presets;
mod rf;

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use parse::parse_arch;
pub use presets::{preset, preset_names, Preset};
pub use rf::{
    brute_force_rf, cell_assignment, compute_rf_profile, rf_center, BruteForceRf, CellAssignment,
    HalfPixel, RfCenter, RfProfile,
};

/// Number of resolution blocks every architecture is partitioned into.
pub const NUM_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    /// Max pooling. Carries no parameters and keeps the channel count.
    Pool,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Pool => "pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Output width of a convolution. Always `None` for pools.
    pub out_channels: Option<usize>,
}

impl LayerSpec {
    pub fn conv(name: &str, kernel: usize, stride: usize, padding: usize, out: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Conv,
            kernel,
            stride,
            padding,
            out_channels: Some(out),
        }
    }

    pub fn pool(name: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Pool,
            kernel,
            stride,
            padding,
            out_channels: None,
        }
    }

    /// Output length along one axis, or `None` if the input is shorter than the kernel.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArchitecture(format!("layer `{}`: {msg}", self.name)));
        if self.kernel == 0 {
            return bad("kernel must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        match (self.kind, self.out_channels) {
            (LayerKind::Pool, Some(_)) => bad("pool layers keep their input channels"),
            (LayerKind::Conv, Some(0)) => bad("out_channels must be >= 1"),
            _ => Ok(()),
        }
    }
}

/// Ordered layers split into [`NUM_BLOCKS`] resolution blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    layers: Vec<LayerSpec>,
    /// `block_starts[b]` is the first layer index of block `b + 1`; blocks may be empty.
    block_starts: [usize; NUM_BLOCKS],
    input_channels: usize,
}

impl ArchSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        block_starts: [usize; NUM_BLOCKS],
        input_channels: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        if input_channels == 0 {
            return Err(Error::InvalidArchitecture("input_channels must be >= 1".into()));
        }
        for layer in &layers {
            layer.validate()?;
        }
        for (i, a) in layers.iter().enumerate() {
            if layers[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidArchitecture(format!("duplicate layer name `{}`", a.name)));
            }
        }
        if block_starts[0] != 0 {
            return Err(Error::InvalidArchitecture("block 1 must start at the first layer".into()));
        }
        if block_starts.windows(2).any(|w| w[0] > w[1]) || block_starts[NUM_BLOCKS - 1] > layers.len() {
            return Err(Error::InvalidArchitecture(format!(
                "block boundaries {block_starts:?} are not non-decreasing within {} layers",
                layers.len()
            )));
        }
        let spec = Self { layers, block_starts, input_channels };
        for b in 2..=NUM_BLOCKS {
            let range = spec.block_range(b);
            if let Some(first) = spec.layers.get(range.start).filter(|_| !range.is_empty()) {
                if first.stride < 2 {
                    return Err(Error::InvalidArchitecture(format!(
                        "block {b} starts at `{}` whose stride is 1; blocks begin at a resolution change",
                        first.name
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// A plain chain with every layer in block 1.
    pub fn chain(layers: Vec<LayerSpec>, input_channels: usize) -> Result<Self> {
        let n = layers.len();
        Self::new(layers, [0, n, n, n, n], input_channels)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn block_starts(&self) -> [usize; NUM_BLOCKS] {
        self.block_starts
    }

    /// Layer indices of block `block` (1-based).
    pub fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        assert!((1..=NUM_BLOCKS).contains(&block), "block {block} out of range");
        let start = self.block_starts[block - 1];
        let end = if block == NUM_BLOCKS {
            self.layers.len()
        } else {
            self.block_starts[block]
        };
        start..end
    }

    /// 1-based block number of layer `index`.
    pub fn block_of(&self, index: usize) -> usize {
        (1..=NUM_BLOCKS)
            .find(|&b| self.block_range(b).contains(&index))
            .expect("layer index inside the architecture")
    }

    /// Channel count after each layer.
    pub fn channel_widths(&self) -> Result<Vec<usize>> {
        let mut c = self.input_channels;
        let mut widths = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.kind == LayerKind::Conv {
                c = layer.out_channels.ok_or_else(|| {
                    Error::InvalidArchitecture(format!("conv layer `{}` has no out_channels", layer.name))
                })?;
            }
            widths.push(c);
        }
        Ok(widths)
    }

    pub fn output_channels(&self) -> Result<usize> {
        Ok(*self.channel_widths()?.last().expect("non-empty"))
    }

    /// Spatial size after the whole chain, or `None` when some layer would produce nothing.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |len, l| l.output_len(len))
    }

    /// Canonical text form, parseable by [`parse_arch`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "input {}", self.input_channels);
        let directives = |out: &mut String, at: usize| {
            for _ in self.block_starts.iter().filter(|&&s| s == at) {
                out.push_str("block\n");
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            directives(&mut out, i);
            let _ = write!(
                out,
                "{} {} {} {} {}",
                layer.name,
                layer.kind.as_str(),
                layer.kernel,
                layer.stride,
                layer.padding
            );
            if let Some(c) = layer.out_channels {
                let _ = write!(out, " {c}");
            }
            out.push('\n');
        }
        directives(&mut out, self.layers.len());
        out
    }

    /// SHA-256 over the canonical text form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_puts_everything_in_block_one() {
        let arch = ArchSpec::chain(vec![LayerSpec::conv("a", 3, 1, 1, 4)], 3).unwrap();
        assert_eq!(arch.block_range(1), 0..1);
        assert!(arch.block_range(5).is_empty());
        assert_eq!(arch.block_of(0), 1);
    }

    #[test]
    fn block_must_start_with_stride() {
        let layers = vec![LayerSpec::conv("a", 3, 2, 1, 4), LayerSpec::conv("b", 3, 1, 1, 4)];
        let err = ArchSpec::new(layers, [0, 1, 2, 2, 2], 3).unwrap_err();
        assert!(err.to_string().contains("stride is 1"), "{err}");
    }

    #[test]
    fn rejects_bad_layers() {
        assert!(ArchSpec::chain(vec![], 3).is_err());
        assert!(ArchSpec::chain(vec![LayerSpec::conv("a", 0, 1, 0, 1)], 3).is_err());
        assert!(ArchSpec::chain(vec![LayerSpec::conv("a", 1, 0, 0, 1)], 3).is_err());
        let dup = vec![LayerSpec::pool("a", 2, 2, 0), LayerSpec::pool("a", 2, 2, 0)];
        assert!(ArchSpec::chain(dup, 3).is_err());
    }

    #[test]
    fn pool_keeps_channels() {
        let arch = ArchSpec::chain(
            vec![LayerSpec::conv("a", 3, 1, 1, 7), LayerSpec::pool("p", 2, 2, 0)],
            3,
        )
        .unwrap();
        assert_eq!(arch.channel_widths().unwrap(), vec![7, 7]);
    }

    #[test]
    fn text_round_trip_keeps_blocks() {
        for p in preset_names() {
            let arch = preset(p).unwrap().arch;
            let back = parse_arch(&arch.to_text()).unwrap();
            assert_eq!(arch, back, "preset {p}");
            assert_eq!(arch.fingerprint(), back.fingerprint());
        }
    }

    #[test]
    fn fingerprint_changes_with_geometry() {
        let a = ArchSpec::chain(vec![LayerSpec::conv("a", 3, 1, 1, 4)], 3).unwrap();
        let b = ArchSpec::chain(vec![LayerSpec::conv("a", 3, 1, 0, 4)], 3).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
