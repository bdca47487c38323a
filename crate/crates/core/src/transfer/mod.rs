//! Block-wise transfer from a pretraining checkpoint into a segmentation network.

mod metrics;
mod plan;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use metrics::{evaluate_seg, miou, puzzle_accuracy, puzzle_accuracy_with, IouCounts, MIoUReport, PuzzleScore};
pub use plan::{build_transfer, BlockPlan, InitSource, TransferInit, TransferPlan};

use crate::archspec::{parse_arch, ArchSpec};
use crate::config::{KvFile, KvReader};
use crate::dataio::{sample_training_crop, AugmentConfig, ImageSet};
use crate::error::{Error, Result};
use crate::model::layers::Act;
use crate::model::{pixel_cross_entropy, ForwardMode, ParamStore, SegNet};
use crate::train::{lr_at, sgd_step, Checkpoint, OptimizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Validation mIoU every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 500,
            optimizer: OptimizerConfig::segmentation(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl SegConfig {
    pub fn read(r: &mut KvReader<'_>) -> Result<Self> {
        let d = Self::default();
        let crop = r.parse_or("crop", d.augment.crop_size.0)?;
        let cfg = Self {
            batch_size: r.parse_or("batch", d.batch_size)?,
            steps: r.parse_or("steps", d.steps)?,
            optimizer: OptimizerConfig::new(
                r.parse_or("lr", d.optimizer.base_lr)?,
                r.parse_or("momentum", d.optimizer.momentum)?,
                r.with_or("schedule", d.optimizer.schedule, OptimizerConfig::parse_schedule)?,
            )?,
            augment: AugmentConfig::new(
                r.parse_or("mirror_prob", d.augment.mirror_prob)?,
                (r.parse_or("scale_min", d.augment.scale_range.0)?, r.parse_or("scale_max", d.augment.scale_range.1)?),
                (crop, crop),
            )?,
            seed: r.parse_or("seed", d.seed)?,
            eval_every: r.parse_or("eval_every", d.eval_every)?,
        };
        if cfg.batch_size == 0 {
            return Err(Error::InvalidValue { key: "batch".into(), message: "must be positive".into() });
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("batch", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", self.optimizer.base_lr.to_string());
        kv("momentum", self.optimizer.momentum.to_string());
        kv("schedule", self.optimizer.schedule_text());
        kv("crop", self.augment.crop_size.0.to_string());
        kv("mirror_prob", self.augment.mirror_prob.to_string());
        kv("scale_min", self.augment.scale_range.0.to_string());
        kv("scale_max", self.augment.scale_range.1.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }
}

/// A transfer plan file may also carry fine-tuning settings.
pub fn parse_transfer_file(text: &str) -> Result<(TransferPlan, SegConfig)> {
    let kv = KvFile::parse(text)?;
    let mut r = kv.reader();
    let plan = TransferPlan::read(&mut r)?;
    let cfg = SegConfig::read(&mut r)?;
    r.finish().map_err(plan::unknown_block)?;
    Ok((plan, cfg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
    /// Present on evaluation steps.
    pub val_miou: Option<f64>,
}

pub const SEG_METRICS_HEADER: &str = "step,lr,loss,val_miou";

impl SegMetrics {
    pub fn csv_row(&self) -> String {
        let m = self.val_miou.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{m}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub params: ParamStore<f32>,
    pub metrics: Vec<SegMetrics>,
    /// Validation report after the last step.
    pub report: MIoUReport,
}

/// Trains the segmentation network, leaving every tensor named in `init.frozen` untouched.
pub fn finetune_seg(net: &SegNet, init: TransferInit, cfg: &SegConfig, train: &ImageSet, val: &ImageSet) -> Result<FinetuneResult> {
    let train_masks = train.masks.as_ref().ok_or(Error::MissingMasks)?;
    let val_masks = val.masks.as_ref().ok_or(Error::MissingMasks)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if init.trainable_layers.len() != net.backbone.num_layers() {
        return Err(Error::Shape("frozen mask does not match the backbone".into()));
    }
    init.params.check(&net.param_specs())?;
    let TransferInit { mut params, frozen, trainable_layers } = init;
    let mode = ForwardMode { train: true, trainable: trainable_layers };
    let mut velocity = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(&cfg.optimizer, step);
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..train.len());
            let (img, mask) = sample_training_crop(&train.images[idx], Some(&train_masks[idx]), &cfg.augment, &mut rng);
            crops.push(img);
            masks.push(mask.expect("mask given"));
        }
        let input: Act<f32> = Act::from_images(&crops.iter().collect::<Vec<_>>())?;
        let pass = net.forward(&params, &input, &mode)?;
        let (loss, d_scores) = pixel_cross_entropy(&pass.scores, &masks.iter().collect::<Vec<_>>())?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1, detail: format!("segmentation loss is {loss} at lr {lr}") });
        }
        let mut grads = ParamStore::new();
        net.backward(&params, &pass, &d_scores, &mut grads);
        if let Some(name) = grads.names().find(|n| frozen.contains(*n)) {
            return Err(Error::Shape(format!("gradient reached frozen parameter `{name}`")));
        }
        sgd_step(&mut params, &grads, &mut velocity, lr as f32, cfg.optimizer.momentum as f32)?;
        net.backbone.update_running_stats(&mut params, pass.tape());
        let done = step + 1;
        let val_miou = (cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps)
            .then(|| evaluate_seg(net, &params, &val.images, val_masks).map(|r| r.mean_iou))
            .transpose()?;
        metrics.push(SegMetrics { step: done, lr, loss, val_miou });
    }
    let report = evaluate_seg(net, &params, &val.images, val_masks)?;
    if let Some(last) = metrics.last_mut() {
        last.val_miou = Some(report.mean_iou);
    }
    Ok(FinetuneResult { params, metrics, report })
}

/// Segmentation weights with enough metadata to rebuild the network.
pub fn seg_checkpoint(net: &SegNet, params: &ParamStore<f32>, step: usize) -> Checkpoint {
    let arch = net.backbone.arch();
    let meta = [
        ("task", "seg".to_string()),
        ("arch", arch.to_text()),
        ("batch_norm", net.backbone.batch_norm().to_string()),
        ("classes", net.head.classes.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Checkpoint {
        step,
        arch_fingerprint: arch.fingerprint(),
        meta,
        params: params.clone(),
        velocity: ParamStore::new(),
        rng: None,
    }
}

/// Backbone architecture and normalization setting recorded in any checkpoint.
pub fn backbone_from_meta(ckpt: &Checkpoint) -> Result<(ArchSpec, bool)> {
    let get = |k: &str| ckpt.meta.get(k).ok_or_else(|| Error::CorruptCheckpoint(format!("metadata key `{k}` missing")));
    let arch = parse_arch(get("arch")?)?;
    if arch.fingerprint() != ckpt.arch_fingerprint {
        return Err(Error::FingerprintMismatch { expected: arch.fingerprint(), found: ckpt.arch_fingerprint.clone() });
    }
    let batch_norm = get("batch_norm")?
        .parse()
        .map_err(|_| Error::CorruptCheckpoint("metadata key `batch_norm` is malformed".into()))?;
    Ok((arch, batch_norm))
}

/// Rebuilds a segmentation network saved by [`seg_checkpoint`].
pub fn seg_net_from_meta(ckpt: &Checkpoint) -> Result<SegNet> {
    if ckpt.meta.get("task").map(String::as_str) != Some("seg") {
        return Err(Error::InvalidValue { key: "ckpt".into(), message: "not a segmentation checkpoint".into() });
    }
    let (arch, batch_norm) = backbone_from_meta(ckpt)?;
    let classes = ckpt
        .meta
        .get("classes")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::CorruptCheckpoint("metadata key `classes` missing or malformed".into()))?;
    let net = SegNet::new(arch, batch_norm, classes)?;
    ckpt.params.check(&net.param_specs())?;
    Ok(net)
}
