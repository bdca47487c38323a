//! Jigsaw pretraining: loss, optimizer, checkpoints and the training loop.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use optim::{lr_at, sgd_step, OptimizerConfig};

use crate::archspec::{parse_arch, preset, ArchSpec};
use crate::config::{join_list, parse_list, KvFile};
use crate::dataio::{sample_training_crop, AugmentConfig, ImageSet};
use crate::error::{Error, Result};
use crate::model::layers::{argmax, softmax_cross_entropy, Act};
use crate::model::{ForwardMode, JigsawNet, ParamStore, HEAD_DIM};
use crate::puzzle::{sample_permutation, shuffle, GridSpec};
use crate::tensor::Real;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,loss,patch_acc";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.txt";

/// Mean cross-entropy over every row of `logits` (`labels.len() x cells`), center included.
pub fn jigsaw_loss<T: Real>(logits: &[T], labels: &[usize], cells: usize) -> Result<(T, Vec<T>)> {
    let labels: Vec<Option<usize>> = labels.iter().map(|l| Some(*l)).collect();
    softmax_cross_entropy(logits, cells, &labels)
}

/// Fraction of rows whose argmax equals the label.
pub fn row_accuracy<T: Real>(logits: &[T], labels: &[usize], cells: usize) -> f64 {
    let hits = logits.chunks(cells).zip(labels).filter(|(row, l)| argmax(row) == **l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// An architecture given either as a preset name or a file path.
pub fn resolve_arch(source: &str) -> Result<ArchSpec> {
    if let Ok(p) = preset(source) {
        return Ok(p.arch);
    }
    let path = Path::new(source);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading architecture {source}"), e))?;
    parse_arch(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Preset name or architecture file, as written in the config.
    pub arch_source: String,
    pub arch: ArchSpec,
    pub batch_norm: bool,
    pub grid: GridSpec,
    pub head_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub checkpoint_steps: Vec<usize>,
    /// Training manifest; used by the command line only.
    pub data: Option<PathBuf>,
    /// Checkpoint to resume from; used by the command line only.
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(arch_source: &str, grid: GridSpec, crop: usize) -> Result<Self> {
        Ok(Self {
            arch_source: arch_source.to_string(),
            arch: resolve_arch(arch_source)?,
            batch_norm: true,
            grid,
            head_dim: HEAD_DIM,
            batch_size: 8,
            steps: 1000,
            optimizer: OptimizerConfig::pretrain(),
            augment: AugmentConfig { crop_size: (crop, crop), ..AugmentConfig::default() },
            seed: 0,
            checkpoint_steps: Vec::new(),
            data: None,
            resume: None,
        })
    }

    pub fn net(&self) -> Result<JigsawNet> {
        JigsawNet::new(self.arch.clone(), self.batch_norm, self.grid, self.head_dim)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let mut r = kv.reader();
        let arch_source = r.parse_or("arch", "tinyfcn".to_string())?;
        let grid = GridSpec::new(r.parse_or("grid", 3usize)?)?;
        let crop = r.parse_or("crop", 96usize)?;
        let mut cfg = Self::new(&arch_source, grid, crop)?;
        cfg.batch_norm = r.parse_or("batch_norm", cfg.batch_norm)?;
        cfg.head_dim = r.parse_or("head_dim", cfg.head_dim)?;
        cfg.batch_size = r.parse_or("batch", cfg.batch_size)?;
        cfg.steps = r.parse_or("steps", cfg.steps)?;
        cfg.seed = r.parse_or("seed", cfg.seed)?;
        let default_opt = OptimizerConfig::pretrain();
        cfg.optimizer = OptimizerConfig::new(
            r.parse_or("lr", default_opt.base_lr)?,
            r.parse_or("momentum", default_opt.momentum)?,
            r.with_or("schedule", default_opt.schedule, OptimizerConfig::parse_schedule)?,
        )?;
        cfg.augment = AugmentConfig::new(
            r.parse_or("mirror_prob", cfg.augment.mirror_prob)?,
            (r.parse_or("scale_min", cfg.augment.scale_range.0)?, r.parse_or("scale_max", cfg.augment.scale_range.1)?),
            (crop, crop),
        )?;
        cfg.checkpoint_steps = r.with_or("checkpoints", Vec::new(), |v| parse_list("checkpoints", v))?;
        cfg.data = r.raw("data").map(PathBuf::from);
        cfg.resume = r.raw("resume").map(PathBuf::from);
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: &str| Err(Error::InvalidValue { key: key.into(), message: message.into() });
        if self.batch_size == 0 {
            return invalid("batch", "must be positive");
        }
        if self.head_dim == 0 {
            return invalid("head_dim", "must be positive");
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        let (h, w) = self.input_size();
        self.net()?.assignment(h, w)?;
        Ok(())
    }

    /// Puzzle size after cropping to a multiple of the grid side.
    pub fn input_size(&self) -> (usize, usize) {
        let g = self.grid.side();
        let (h, w) = self.augment.crop_size;
        (h / g * g, w / g * g)
    }

    /// Every effective setting, in the format [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("arch", self.arch_source.clone());
        kv("batch_norm", self.batch_norm.to_string());
        kv("grid", self.grid.side().to_string());
        kv("crop", self.augment.crop_size.0.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("batch", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", self.optimizer.base_lr.to_string());
        kv("momentum", self.optimizer.momentum.to_string());
        kv("schedule", self.optimizer.schedule_text());
        kv("mirror_prob", self.augment.mirror_prob.to_string());
        kv("scale_min", self.augment.scale_range.0.to_string());
        kv("scale_max", self.augment.scale_range.1.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoints", join_list(&self.checkpoint_steps));
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(r) = &self.resume {
            kv("resume", r.display().to_string());
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
    pub patch_acc: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.patch_acc)
    }
}

/// Training state: parameters, momentum and the data-sampling generator.
pub struct JigsawTrainer {
    pub net: JigsawNet,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub velocity: ParamStore<f32>,
    rng: ChaCha8Rng,
    step: usize,
}

impl JigsawTrainer {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.net()?;
        let params = ParamStore::init(&net.param_specs(), &mut init_rng(cfg.seed));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { net, cfg, params, velocity: ParamStore::new(), rng, step: 0 })
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.net()?;
        let expected = cfg.arch.fingerprint();
        if ckpt.arch_fingerprint != expected {
            return Err(Error::FingerprintMismatch { expected, found: ckpt.arch_fingerprint });
        }
        ckpt.params.check(&net.param_specs())?;
        let rng = ckpt
            .rng
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no generator state to resume from".into()))?
            .restore();
        Ok(Self { net, cfg, params: ckpt.params, velocity: ckpt.velocity, rng, step: ckpt.step })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Draws one batch of puzzles from `data` and applies one update.
    pub fn step(&mut self, data: &ImageSet) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = lr_at(&self.cfg.optimizer, self.step);
        let mut puzzles = Vec::with_capacity(self.cfg.batch_size);
        let mut labels = Vec::new();
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..data.len());
            let (crop, _) = sample_training_crop(&data.images[idx], None, &self.cfg.augment, &mut self.rng);
            let perm = sample_permutation(&mut self.rng, self.cfg.grid);
            let puzzle = shuffle(&crop, &perm, self.cfg.grid)?;
            labels.extend_from_slice(&puzzle.labels);
            puzzles.push(puzzle.image);
        }
        let input: Act<f32> = Act::from_images(&puzzles.iter().collect::<Vec<_>>())?;
        let mode = ForwardMode::train(self.net.backbone.num_layers());
        let pass = self.net.forward(&self.params, &input, &mode)?;
        let n = self.cfg.grid.num_cells();
        let (loss, d_logits) = jigsaw_loss(&pass.logits, &labels, n)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, detail: format!("loss is {loss} at lr {lr}") });
        }
        let patch_acc = row_accuracy(&pass.logits, &labels, n);
        let mut grads = ParamStore::new();
        self.net.backward(&self.params, &pass, &d_logits, &mut grads);
        sgd_step(&mut self.params, &grads, &mut self.velocity, lr as f32, self.cfg.optimizer.momentum as f32)?;
        self.net.backbone.update_running_stats(&mut self.params, pass.tape());
        self.step += 1;
        Ok(StepMetrics { step: self.step, lr, loss, patch_acc })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            arch_fingerprint: self.cfg.arch.fingerprint(),
            meta: jigsaw_meta(&self.cfg),
            params: self.params.clone(),
            velocity: self.velocity.clone(),
            rng: Some(RngState::capture(&self.rng)),
        }
    }
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn jigsaw_meta(cfg: &TrainConfig) -> std::collections::BTreeMap<String, String> {
    [
        ("task", "jigsaw".to_string()),
        ("arch", cfg.arch.to_text()),
        ("batch_norm", cfg.batch_norm.to_string()),
        ("grid", cfg.grid.side().to_string()),
        ("head_dim", cfg.head_dim.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Rebuilds the pretraining network stored in a checkpoint's metadata.
pub fn jigsaw_net_from_meta(ckpt: &Checkpoint) -> Result<JigsawNet> {
    if ckpt.meta.get("task").map(String::as_str) != Some("jigsaw") {
        return Err(Error::InvalidValue { key: "ckpt".into(), message: "not a pretraining checkpoint".into() });
    }
    let (arch, batch_norm) = crate::transfer::backbone_from_meta(ckpt)?;
    let field = |k: &str| -> Result<usize> {
        ckpt.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("metadata key `{k}` missing or malformed")))
    };
    let net = JigsawNet::new(arch, batch_norm, GridSpec::new(field("grid")?)?, field("head_dim")?)?;
    ckpt.params.check(&net.param_specs())?;
    Ok(net)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: usize,
}

/// Runs `cfg.steps` total steps, writing `metrics.csv`, `resolved-config.txt` and
/// `param-at-N.ckpt` files into `out`. With `resume`, continues from that checkpoint and
/// rewrites the metrics file to hold only rows up to the resumed step before appending.
pub fn train_jigsaw(cfg: &TrainConfig, data: &ImageSet, out: &Path, resume: Option<Checkpoint>) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_text())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = match resume {
        None => JigsawTrainer::new(cfg.clone())?,
        Some(c) => JigsawTrainer::from_checkpoint(cfg.clone(), c)?,
    };
    let start = trainer.step_count();
    let mut csv = if start == 0 {
        format!("{METRICS_HEADER}\n")
    } else {
        truncated_metrics(&metrics_path, start)?
    };
    let mut checkpoints = Vec::new();
    let mut save = |t: &JigsawTrainer| -> Result<()> {
        let p = out.join(Checkpoint::file_name(t.step_count()));
        save_checkpoint(&t.checkpoint(), &p)?;
        checkpoints.push(p);
        Ok(())
    };
    if start == 0 {
        save(&trainer)?;
    }
    let mut metrics = Vec::new();
    while trainer.step_count() < cfg.steps {
        let m = trainer.step(data)?;
        let _ = writeln!(csv, "{}", m.csv_row());
        metrics.push(m);
        if cfg.checkpoint_steps.contains(&m.step) || m.step == cfg.steps {
            save(&trainer)?;
        }
    }
    write_file(&metrics_path, &csv)?;
    Ok(TrainSummary { metrics, checkpoints, final_step: trainer.step_count() })
}

fn truncated_metrics(path: &Path, keep_through: usize) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidValue { key: METRICS_FILE.into(), message: format!("malformed row `{line}`") })?;
        if step <= keep_through {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
