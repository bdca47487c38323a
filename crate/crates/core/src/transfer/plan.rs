use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::archspec::NUM_BLOCKS;
use crate::config::{KvFile, KvReader};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamStore, SegNet};
use crate::train::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitSource {
    Random,
    Checkpoint,
}

impl InitSource {
    pub fn as_str(self) -> &'static str {
        match self {
            InitSource::Random => "random",
            InitSource::Checkpoint => "checkpoint",
        }
    }
}

impl std::str::FromStr for InitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitSource::Random),
            "checkpoint" => Ok(InitSource::Checkpoint),
            other => Err(Error::InvalidPlan(format!("unknown init source `{other}` (use random or checkpoint)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub init: InitSource,
    pub trainable: bool,
}

/// Per-block initialization and freezing. The segmentation classifier is always fresh and trained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferPlan {
    pub blocks: [BlockPlan; NUM_BLOCKS],
    /// Allows freezing randomly initialized blocks.
    pub control: bool,
}

impl TransferPlan {
    pub fn all_random() -> Self {
        Self { blocks: [BlockPlan { init: InitSource::Random, trainable: true }; NUM_BLOCKS], control: false }
    }

    /// Blocks up to `frozen_through` copied and frozen, the rest copied and trained.
    pub fn freeze_through(frozen_through: usize) -> Self {
        let mut plan = Self::all_random();
        for (i, b) in plan.blocks.iter_mut().enumerate() {
            *b = BlockPlan { init: InitSource::Checkpoint, trainable: i + 1 > frozen_through };
        }
        plan
    }

    pub fn block(&self, b: usize) -> BlockPlan {
        self.blocks[b - 1]
    }

    pub fn needs_checkpoint(&self) -> bool {
        self.blocks.iter().any(|b| b.init == InitSource::Checkpoint)
    }

    pub fn validate(&self) -> Result<()> {
        if self.control {
            return Ok(());
        }
        match self.blocks.iter().position(|b| !b.trainable && b.init == InitSource::Random) {
            Some(i) => Err(Error::InvalidPlan(format!(
                "block{} is frozen with random values; set control = true for a control experiment",
                i + 1
            ))),
            None => Ok(()),
        }
    }

    /// Reads `blockN.init`, `blockN.trainable` and `control`; absent keys keep `all_random` values.
    pub fn read(r: &mut KvReader<'_>) -> Result<Self> {
        let mut plan = Self::all_random();
        for (i, b) in plan.blocks.iter_mut().enumerate() {
            let n = i + 1;
            b.init = r.with_or(&format!("block{n}.init"), b.init, str::parse)?;
            b.trainable = r.parse_or(&format!("block{n}.trainable"), b.trainable)?;
        }
        plan.control = r.parse_or("control", false)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let mut r = kv.reader();
        let plan = Self::read(&mut r)?;
        r.finish().map_err(unknown_block)?;
        Ok(plan)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "block{}.init = {}", i + 1, b.init.as_str());
            let _ = writeln!(s, "block{}.trainable = {}", i + 1, b.trainable);
        }
        let _ = writeln!(s, "control = {}", self.control);
        s
    }
}

/// Keys such as `block7.init` name blocks that do not exist.
pub(crate) fn unknown_block(e: Error) -> Error {
    match e {
        Error::UnknownKey(k) if k.starts_with("block") => {
            Error::InvalidPlan(format!("`{k}` does not name one of blocks 1 to {NUM_BLOCKS}"))
        }
        other => other,
    }
}

/// Initial segmentation parameters and the names that must not change.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferInit {
    pub params: ParamStore<f32>,
    pub frozen: BTreeSet<String>,
    /// Per backbone layer.
    pub trainable_layers: Vec<bool>,
}

/// Fresh draws happen for every tensor in spec order whether or not it is then replaced, so two
/// plans built from the same generator seed share their random tensors.
pub fn build_transfer<R: Rng + ?Sized>(
    plan: &TransferPlan,
    checkpoint: Option<&Checkpoint>,
    net: &SegNet,
    rng: &mut R,
) -> Result<TransferInit> {
    plan.validate()?;
    let source = match (plan.needs_checkpoint(), checkpoint) {
        (false, _) => None,
        (true, None) => return Err(Error::InvalidPlan("plan copies blocks but no checkpoint was given".into())),
        (true, Some(c)) => {
            let expected = net.backbone.arch().fingerprint();
            if c.arch_fingerprint != expected {
                return Err(Error::FingerprintMismatch { expected, found: c.arch_fingerprint.clone() });
            }
            Some(c)
        }
    };
    let mut params = ParamStore::new();
    let mut frozen = BTreeSet::new();
    for spec in net.param_specs() {
        let fresh = spec.sample(rng);
        let ParamGroup::Block(b) = spec.group else {
            params.insert(&spec.name, fresh);
            continue;
        };
        let bp = plan.block(b);
        let value = match (bp.init, source) {
            (InitSource::Checkpoint, Some(c)) => {
                let t = c
                    .params
                    .try_get(&spec.name)
                    .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{}`", spec.name)))?;
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "checkpoint `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                t.clone()
            }
            _ => fresh,
        };
        if !bp.trainable {
            frozen.insert(spec.name.clone());
        }
        params.insert(&spec.name, value);
    }
    let arch = net.backbone.arch();
    let trainable_layers = (0..arch.layers().len()).map(|i| plan.block(arch.block_of(i)).trainable).collect();
    Ok(TransferInit { params, frozen, trainable_layers })
}
