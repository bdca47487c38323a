//! Command-line surface. Every subcommand writes to the given sink so tests can capture output.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archspec::{brute_force_rf, cell_assignment, compute_rf_profile, rf_center, ArchSpec, RfProfile};
use crate::dataio::{generate_synthetic_corpus, ImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{SegNet, IGNORE_LABEL};
use crate::puzzle::GridSpec;
use crate::report::render_report;
use crate::train::{
    jigsaw_net_from_meta, load_checkpoint, read_checkpoint, resolve_arch, save_checkpoint, train_jigsaw, TrainConfig,
    RESOLVED_CONFIG_FILE,
};
use crate::transfer::{
    build_transfer, evaluate_seg, finetune_seg, parse_transfer_file, puzzle_accuracy, seg_checkpoint, seg_net_from_meta,
    MIoUReport, SEG_METRICS_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "patchforge", version, about = "Jigsaw-puzzle pretraining for fully convolutional networks")]
pub struct Cli {
    /// Overrides the seed of whatever the subcommand runs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Receptive field, effective stride and effective padding of an architecture.
    Rf(RfArgs),
    /// Write a synthetic segmentation corpus.
    Synth(SynthArgs),
    /// Jigsaw pretraining from a config file.
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation network from a transfer plan.
    Transfer(TransferArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Render metrics CSV files into a markdown table and SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct RfArgs {
    /// Preset name or architecture file.
    #[arg(long)]
    pub arch: String,
    /// Input height and width for feature size and cell counts.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub input: Option<Vec<usize>>,
    /// Grid side for per-cell feature pixel counts; needs --input.
    #[arg(long, requires = "input")]
    pub grid: Option<usize>,
    /// Check the closed form against propagation through the layer chain.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub images: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Validation images; defaults to a fifth of the corpus.
    #[arg(long)]
    pub val: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to a directory named after the config, beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TransferArgs {
    /// Plan file: `blockN.init`, `blockN.trainable`, `control` plus fine-tuning settings.
    #[arg(long)]
    pub plan: PathBuf,
    /// Pretraining checkpoint; required when any block is copied.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory holding `train.tsv` and `val.tsv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to a directory named after the plan, beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to one more than the largest label in the masks.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    pub labeled: Option<usize>,
    /// Backbone when no checkpoint is given.
    #[arg(long, default_value = "tinyfcn")]
    pub arch: String,
    /// Batch normalization when no checkpoint is given.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Puzzle,
    Seg,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: EvalTask,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest file, or a directory whose `val.tsv` is used.
    #[arg(long)]
    pub data: PathBuf,
    /// Center crop for puzzles.
    #[arg(long, default_value_t = 96)]
    pub crop: usize,
    /// CSV destination; printed when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let text = match cli.command {
        Command::Rf(a) => run_rf(&a)?,
        Command::Synth(a) => run_synth(&a, cli.seed.unwrap_or(0))?,
        Command::Pretrain(a) => run_pretrain(&a, cli.seed)?,
        Command::Transfer(a) => run_transfer(&a, cli.seed)?,
        Command::Eval(a) => run_eval(&a, cli.seed.unwrap_or(0))?,
        Command::Report(a) => run_report(&a)?,
    };
    out.write_all(text.as_bytes()).map_err(|e| Error::io("writing output", e))
}

fn run_rf(a: &RfArgs) -> Result<String> {
    let arch = resolve_arch(&a.arch)?;
    let profile = compute_rf_profile(&arch)?;
    let mut s = String::from("rf S0 P0\n");
    let _ = writeln!(s, "{} {} {}", profile.rf, profile.effective_stride, profile.effective_padding);
    if let Some(hw) = &a.input {
        let (h, w) = (hw[0], hw[1]);
        let (fh, fw) = (arch.output_len(h), arch.output_len(w));
        match (fh, fw) {
            (Some(fh), Some(fw)) => {
                let _ = writeln!(s, "feature {fh} {fw}");
            }
            _ => {
                return Err(Error::InsufficientInput { size: h.min(w), message: "the network produces no output".into() })
            }
        }
        if let Some(g) = a.grid {
            let asg = cell_assignment(&profile, (h, w), GridSpec::new(g)?)?;
            s.push_str("cell row col pixels\n");
            for (c, n) in asg.counts.iter().enumerate() {
                let _ = writeln!(s, "{c} {} {} {n}", c / g, c % g);
            }
        }
    }
    if a.oracle {
        let size = a.input.as_ref().map(|v| v[0].max(v[1])).unwrap_or(0).max(oracle_size(&profile));
        let checked = check_oracle(&arch, &profile, size)?;
        let _ = writeln!(s, "oracle agrees on {checked} interior positions of a {size}-pixel input");
    }
    Ok(s)
}

/// Wide enough for several outputs whose receptive field avoids padding.
fn oracle_size(p: &RfProfile) -> usize {
    2 * (p.rf + p.effective_padding) + 4 * p.effective_stride
}

fn check_oracle(arch: &ArchSpec, profile: &RfProfile, size: usize) -> Result<usize> {
    let bf = brute_force_rf(arch, size)?;
    if bf.rf != profile.rf {
        return Err(Error::InvalidArchitecture(format!("closed-form rf {} but propagation measured {}", profile.rf, bf.rf)));
    }
    if Some(bf.output_len) != arch.output_len(size) {
        return Err(Error::InvalidArchitecture("output length disagrees with propagation".into()));
    }
    for (o, c) in &bf.centers {
        let expected = rf_center(profile, *o, 0).row;
        if expected != *c {
            return Err(Error::InvalidArchitecture(format!(
                "output {o}: closed-form center {expected} but propagation measured {c}"
            )));
        }
    }
    Ok(bf.centers.len())
}

fn run_synth(a: &SynthArgs, seed: u64) -> Result<String> {
    let mut spec = SyntheticSpec::new(a.images, a.classes, seed);
    spec.image_size = a.size;
    if let Some(v) = a.val {
        spec.val_count = v;
    }
    let corpus = generate_synthetic_corpus(&spec, &a.out)?;
    let resolved = format!(
        "images = {}\nclasses = {}\nseed = {}\nsize = {}\nval = {}\n",
        spec.num_images, spec.num_classes, spec.texture_seed, spec.image_size, spec.val_count
    );
    write(&a.out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    Ok(format!(
        "wrote {} images ({} train, {} val) to {}\n",
        spec.num_images,
        spec.num_images - spec.val_count,
        spec.val_count,
        corpus.dir.display()
    ))
}

fn run_pretrain(a: &PretrainArgs, seed: Option<u64>) -> Result<String> {
    let dir = parent_dir(&a.config);
    let mut cfg = TrainConfig::parse(&read(&a.config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = cfg
        .data
        .as_ref()
        .map(|d| manifest_path(&dir.join(d), "train.tsv"))
        .ok_or_else(|| Error::InvalidValue { key: "data".into(), message: "the config must name a training manifest".into() })?;
    cfg.data = Some(absolute(&data));
    let resume = match &cfg.resume {
        Some(r) => {
            let p = dir.join(r);
            cfg.resume = Some(absolute(&p));
            Some(load_checkpoint(&p, &cfg.arch)?)
        }
        None => None,
    };
    let out = a.out.clone().unwrap_or_else(|| dir.join(stem(&a.config)));
    let set = ImageSet::load_path(&data)?;
    let summary = train_jigsaw(&cfg, &set, &out, resume)?;
    let mut s = String::new();
    if let Some(m) = summary.metrics.last() {
        let _ = writeln!(s, "step {} lr {} loss {:.4} patch_acc {:.4}", m.step, m.lr, m.loss, m.patch_acc);
    }
    let _ = writeln!(s, "{} checkpoints in {}", summary.checkpoints.len(), out.display());
    Ok(s)
}

fn run_transfer(a: &TransferArgs, seed: Option<u64>) -> Result<String> {
    let (plan, mut cfg) = parse_transfer_file(&read(&a.plan)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if plan.needs_checkpoint() && a.ckpt.is_none() {
        return Err(Error::InvalidPlan("plan copies blocks but no --ckpt was given".into()));
    }
    let ckpt = a.ckpt.as_ref().map(|p| read_checkpoint(p)).transpose()?;
    let (arch, batch_norm) = match &ckpt {
        Some(c) => crate::transfer::backbone_from_meta(c)?,
        None => (resolve_arch(&a.arch)?, a.batch_norm),
    };
    let mut train = ImageSet::load_path(&a.data.join("train.tsv"))?;
    let val = ImageSet::load_path(&a.data.join("val.tsv"))?;
    if let Some(n) = a.labeled {
        if n == 0 || n > train.len() {
            return Err(Error::InvalidValue {
                key: "labeled".into(),
                message: format!("must be between 1 and {} training images", train.len()),
            });
        }
        train.images.truncate(n);
        if let Some(m) = train.masks.as_mut() {
            m.truncate(n);
        }
    }
    let classes = match a.classes {
        Some(k) => k,
        None => infer_classes(&[&train, &val])?,
    };
    let net = SegNet::new(arch, batch_norm, classes)?;
    let init = build_transfer(&plan, ckpt.as_ref(), &net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let result = finetune_seg(&net, init, &cfg, &train, &val)?;

    let out = a.out.clone().unwrap_or_else(|| parent_dir(&a.plan).join(stem(&a.plan)));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut resolved = String::new();
    let _ = writeln!(resolved, "# arch = {}", net.backbone.arch().fingerprint());
    let _ = writeln!(resolved, "# batch_norm = {batch_norm}");
    if let Some(p) = &a.ckpt {
        let _ = writeln!(resolved, "# ckpt = {}", absolute(p).display());
    }
    let _ = writeln!(resolved, "# data = {}", absolute(&a.data).display());
    let _ = writeln!(resolved, "# classes = {classes}");
    let _ = writeln!(resolved, "# labeled = {}", train.len());
    resolved.push_str(&plan.to_text());
    resolved.push_str(&cfg.to_text());
    write(&out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let mut csv = format!("{SEG_METRICS_HEADER}\n");
    for m in &result.metrics {
        let _ = writeln!(csv, "{}", m.csv_row());
    }
    write(&out.join("seg-metrics.csv"), &csv)?;
    write(&out.join("miou.csv"), &miou_csv(val.len(), &result.report))?;
    save_checkpoint(&seg_checkpoint(&net, &result.params, cfg.steps), &out.join("seg-final.ckpt"))?;
    Ok(format!("val mIoU {:.4} after {} steps, written to {}\n", result.report.mean_iou, cfg.steps, out.display()))
}

fn infer_classes(sets: &[&ImageSet]) -> Result<usize> {
    let mut max = None;
    for set in sets {
        for m in set.masks.as_ref().ok_or(Error::MissingMasks)? {
            for &v in m.data.iter().filter(|v| **v != IGNORE_LABEL) {
                max = max.max(Some(v as usize));
            }
        }
    }
    max.map(|m| (m + 1).max(2))
        .ok_or_else(|| Error::InvalidValue { key: "classes".into(), message: "masks hold no labeled pixel".into() })
}

fn miou_csv(images: usize, r: &MIoUReport) -> String {
    let header: Vec<String> = (0..r.per_class_iou.len()).map(|k| format!("iou_{k}")).collect();
    let cells: Vec<String> = r.per_class_iou.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
    format!("images,mean_iou,{}\n{images},{},{}\n", header.join(","), r.mean_iou, cells.join(","))
}

fn run_eval(a: &EvalArgs, seed: u64) -> Result<String> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    let set = ImageSet::load_path(&manifest_path(&a.data, "val.tsv"))?;
    let csv = match a.task {
        EvalTask::Puzzle => {
            let net = jigsaw_net_from_meta(&ckpt)?;
            let score = puzzle_accuracy(&net, &ckpt.params, &set.images, (a.crop, a.crop), seed)?;
            format!("images,cells,correct,accuracy\n{},{},{},{}\n", set.len(), score.total, score.correct, score.accuracy())
        }
        EvalTask::Seg => {
            let net = seg_net_from_meta(&ckpt)?;
            let masks = set.masks.as_ref().ok_or(Error::MissingMasks)?;
            miou_csv(set.len(), &evaluate_seg(&net, &ckpt.params, &set.images, masks)?)
        }
    };
    match &a.out {
        None => Ok(csv),
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
            }
            write(p, &csv)?;
            let task = match a.task {
                EvalTask::Puzzle => "puzzle",
                EvalTask::Seg => "seg",
            };
            let resolved = format!(
                "task = {task}\nckpt = {}\ndata = {}\ncrop = {}\nseed = {seed}\n",
                absolute(&a.ckpt).display(),
                absolute(&a.data).display(),
                a.crop
            );
            write(&p.with_extension("resolved-config.txt"), &resolved)?;
            Ok(format!("wrote {}\n", p.display()))
        }
    }
}

fn run_report(a: &ReportArgs) -> Result<String> {
    let written = render_report(&a.inputs, &a.out)?;
    let inputs: Vec<String> = a.inputs.iter().map(|p| absolute(p).display().to_string()).collect();
    write(&a.out.join(RESOLVED_CONFIG_FILE), &format!("inputs = {}\n", inputs.join(",")))?;
    let mut s = String::new();
    for p in written {
        let _ = writeln!(s, "{}", p.display());
    }
    Ok(s)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// A directory stands for the named manifest inside it.
fn manifest_path(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::preset;

    fn run_args(args: &[&str]) -> Result<String> {
        let cli = Cli::try_parse_from(std::iter::once("patchforge").chain(args.iter().copied())).expect("arguments parse");
        let mut out = Vec::new();
        run(cli, &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    #[test]
    fn rf_prints_profile_and_cells() {
        let s = run_args(&["rf", "--arch", "alexnet"]).unwrap();
        assert!(s.lines().nth(1).unwrap().starts_with("195 32 "), "{s}");
        let s = run_args(&["rf", "--arch", "tinyfcn", "--input", "96", "96", "--grid", "3", "--oracle"]).unwrap();
        assert!(s.contains("feature 3 3"), "{s}");
        assert_eq!(s.lines().filter(|l| l.ends_with(" 1") && l.split(' ').count() == 4).count(), 9, "{s}");
        assert!(s.contains("oracle agrees"), "{s}");
    }

    #[test]
    fn oracle_covers_every_preset() {
        for name in ["tinyfcn", "alexnet", "vgg16"] {
            let arch = preset(name).unwrap().arch;
            let p = compute_rf_profile(&arch).unwrap();
            assert!(check_oracle(&arch, &p, oracle_size(&p)).unwrap() > 0, "{name}");
        }
    }

    #[test]
    fn unknown_subcommand_and_flag_are_rejected() {
        assert!(Cli::try_parse_from(["patchforge", "train"]).is_err());
        assert!(Cli::try_parse_from(["patchforge", "rf", "--arch", "alexnet", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["patchforge", "rf", "--arch", "x", "--grid", "3"]).is_err());
    }
}
