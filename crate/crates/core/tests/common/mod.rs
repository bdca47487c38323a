//! Shared helpers: central-difference gradient checks in double precision.
#![allow(dead_code)]

use patchforge::archspec::parse_arch;
use patchforge::model::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, maxpool_backward, maxpool_forward,
    Window,
};
use patchforge::model::{
    pixel_cross_entropy, Act, CellFeatures, ForwardMode, JigsawHead, JigsawNet, ParamStore, SegHead, SegNet,
    IGNORE_LABEL,
};
use patchforge::planar::Planar;
use patchforge::puzzle::GridSpec;
use patchforge::train::jigsaw_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this in both estimates are compared absolutely. A convolution bias
/// followed by batch normalization has an exactly zero gradient, so its difference quotient is
/// pure rounding noise.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x0`, coordinate by coordinate.
pub fn check_vector(name: &str, x0: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    assert_eq!(x0.len(), analytic.len(), "{name}: gradient length");
    let mut x = x0.to_vec();
    let mut max_rel = 0f64;
    for i in 0..x.len() {
        x[i] = x0[i] + EPS;
        let up = f(&x);
        x[i] = x0[i] - EPS;
        let down = f(&x);
        x[i] = x0[i];
        max_rel = max_rel.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
    }
    GradCheck { name: name.to_string(), coords: x.len(), max_rel }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_act(rng: &mut ChaCha8Rng, c: usize, b: usize, h: usize, w: usize) -> Act<f64> {
    Act { c, b, h, w, data: randn(rng, c * b * h * w) }
}

fn with_data(a: &Act<f64>, data: &[f64]) -> Act<f64> {
    Act { data: data.to_vec(), ..a.clone() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Initial values plus a perturbation, so zero biases and unit scales do not hide mistakes.
fn jittered(specs: &[patchforge::model::ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = ParamStore::<f64>::init(specs, rng);
    for s in specs.iter().filter(|s| s.trainable) {
        for v in p.get_mut(&s.name).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

/// Checks every trainable tensor of a network loss.
fn check_params(
    prefix: &str,
    params: &ParamStore<f64>,
    grads: &ParamStore<f64>,
    names: &[String],
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
) -> Vec<GradCheck> {
    names
        .iter()
        .map(|name| {
            let analytic = grads.get(name).data().to_vec();
            check_vector(&format!("{prefix} {name}"), params.get(name).data(), &analytic, |x| {
                let mut p = params.clone();
                p.get_mut(name).data_mut().copy_from_slice(x);
                loss(&p)
            })
        })
        .collect()
}

pub fn conv_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let win = Window { kernel: 3, stride: 2, padding: 1 };
    let (cin, cout) = (2, 3);
    let x = rand_act(&mut rng, cin, 2, 6, 5);
    let w = randn(&mut rng, cout * cin * 9);
    let b = randn(&mut rng, cout);
    let out = conv_forward(&x, &w, &b, cout, win).unwrap();
    let r = randn(&mut rng, out.out.data.len());
    let d_out = with_data(&out.out, &r);
    let g = conv_backward(&d_out, &out.cols, &w, (x.c, x.b, x.h, x.w), win, true, true);
    let loss = |x: &Act<f64>, w: &[f64], b: &[f64]| dot(&conv_forward(x, w, b, cout, win).unwrap().out.data, &r);
    vec![
        check_vector("conv input", &x.data, &g.d_input.unwrap().data, |v| loss(&with_data(&x, v), &w, &b)),
        check_vector("conv weight", &w, &g.d_weight.unwrap(), |v| loss(&x, v, &b)),
        check_vector("conv bias", &b, &g.d_bias.unwrap(), |v| loss(&x, &w, v)),
    ]
}

pub fn pool_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let win = Window { kernel: 3, stride: 2, padding: 1 };
    let x = rand_act(&mut rng, 2, 2, 7, 6);
    let out = maxpool_forward(&x, win).unwrap();
    let r = randn(&mut rng, out.out.data.len());
    let d = maxpool_backward(&with_data(&out.out, &r), &out.argmax, (x.c, x.b, x.h, x.w));
    vec![check_vector("max pooling input", &x.data, &d.data, |v| {
        dot(&maxpool_forward(&with_data(&x, v), win).unwrap().out.data, &r)
    })]
}

pub fn bn_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_act(&mut rng, 3, 2, 4, 3);
    let gamma: Vec<f64> = randn(&mut rng, 3).iter().map(|v| 1.0 + 0.5 * v).collect();
    let beta = randn(&mut rng, 3);
    let r = randn(&mut rng, x.data.len());
    let mean = randn(&mut rng, 3);
    let var: Vec<f64> = randn(&mut rng, 3).iter().map(|v| 1.0 + 0.5 * v.abs()).collect();
    let mut checks = Vec::new();
    for batch_stats in [true, false] {
        let fwd = |x: &Act<f64>, g: &[f64], b: &[f64]| {
            let mut y = x.clone();
            let cache = if batch_stats {
                bn_forward_train(&mut y, g, b)
            } else {
                bn_forward_eval(&mut y, g, b, &mean, &var)
            };
            (y, cache)
        };
        let (y, cache) = fwd(&x, &gamma, &beta);
        let mut d = with_data(&y, &r);
        let (dg, db) = bn_backward(&mut d, &cache, &gamma);
        let loss = |x: &Act<f64>, g: &[f64], b: &[f64]| dot(&fwd(x, g, b).0.data, &r);
        let tag = if batch_stats { "batch norm (batch statistics)" } else { "batch norm (running statistics)" };
        checks.push(check_vector(&format!("{tag} input"), &x.data, &d.data, |v| loss(&with_data(&x, v), &gamma, &beta)));
        checks.push(check_vector(&format!("{tag} gamma"), &gamma, &dg, |v| loss(&x, v, &beta)));
        checks.push(check_vector(&format!("{tag} beta"), &beta, &db, |v| loss(&x, &gamma, v)));
    }
    checks
}

pub fn jigsaw_loss_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 9;
    let labels: Vec<usize> = (0..2 * n).map(|_| rng.random_range(0..n)).collect();
    let logits: Vec<f64> = randn(&mut rng, labels.len() * n).iter().map(|v| 3.0 * v).collect();
    let (_, d) = jigsaw_loss(&logits, &labels, n).unwrap();
    vec![check_vector("jigsaw loss logits", &logits, &d, |v| jigsaw_loss(v, &labels, n).unwrap().0)]
}

pub fn jigsaw_head_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (channels, hidden, cells, batch) = (3, 6, 9, 2);
    let head = JigsawHead::new(channels, hidden, cells).unwrap();
    let specs = head.param_specs();
    let params = jittered(&specs, &mut rng);
    let feats = CellFeatures { batch, cells, channels, data: randn(&mut rng, batch * cells * channels) };
    let labels: Vec<usize> = (0..batch * cells).map(|_| rng.random_range(0..cells)).collect();
    let loss = |p: &ParamStore<f64>, f: &CellFeatures<f64>| {
        let (logits, _) = head.forward(p, f).unwrap();
        jigsaw_loss(&logits, &labels, cells).unwrap().0
    };
    let (logits, cache) = head.forward(&params, &feats).unwrap();
    let (_, d_logits) = jigsaw_loss(&logits, &labels, cells).unwrap();
    let mut grads = ParamStore::new();
    let d_feats = head.backward(&params, &cache, &d_logits, &mut grads);
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let mut checks = check_params("jigsaw head", &params, &grads, &names, &|p| loss(p, &feats));
    checks.push(check_vector("jigsaw head cell features", &feats.data, &d_feats.data, |v| {
        loss(&params, &CellFeatures { data: v.to_vec(), ..feats.clone() })
    }));
    checks
}

/// Three nonempty blocks with a pooling layer, small enough to difference every coordinate.
pub const TINY_ARCH: &str = "input 3
block
c1 conv 3 1 1 4
block
p1 pool 2 2 0
c2 conv 3 1 1 4
block
c3 conv 3 2 1 4
c4 conv 1 1 0 4
";

fn masks(rng: &mut ChaCha8Rng, batch: usize, h: usize, w: usize, classes: usize) -> Vec<Planar<u8>> {
    (0..batch)
        .map(|_| {
            Planar::from_fn(1, h, w, |_, _, _| {
                if rng.random_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..classes as u8)
                }
            })
        })
        .collect()
}

pub fn seg_head_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = parse_arch(TINY_ARCH).unwrap();
    let profile = patchforge::archspec::compute_rf_profile(&arch).unwrap();
    let head = SegHead::new(4, 3, profile).unwrap();
    let specs = head.param_specs();
    let params = jittered(&specs, &mut rng);
    let fm = rand_act(&mut rng, 4, 2, 3, 3);
    let m = masks(&mut rng, 2, 12, 12, 3);
    let mrefs: Vec<&Planar<u8>> = m.iter().collect();
    let loss = |p: &ParamStore<f64>, f: &Act<f64>| {
        let (scores, _) = head.forward(p, f, (12, 12)).unwrap();
        pixel_cross_entropy(&scores, &mrefs).unwrap().0
    };
    let (scores, cache) = head.forward(&params, &fm, (12, 12)).unwrap();
    let (_, d_scores) = pixel_cross_entropy(&scores, &mrefs).unwrap();
    let mut grads = ParamStore::new();
    let d_fm = head.backward(&params, &cache, &d_scores, &mut grads, true).unwrap();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let mut checks = check_params("seg head", &params, &grads, &names, &|p| loss(p, &fm));
    checks.push(check_vector("seg head features", &fm.data, &d_fm.data, |v| loss(&params, &with_data(&fm, v))));
    checks
}

/// Backbone, cell pooling, head and loss together, batch statistics on.
pub fn jigsaw_net_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = JigsawNet::new(parse_arch(TINY_ARCH).unwrap(), true, GridSpec::new(3).unwrap(), 5).unwrap();
    let specs = net.param_specs();
    let params = jittered(&specs, &mut rng);
    let input = rand_act(&mut rng, 3, 2, 12, 12);
    let labels: Vec<usize> = (0..2 * 9).map(|_| rng.random_range(0..9)).collect();
    let mode = ForwardMode::train(net.backbone.num_layers());
    let loss = |p: &ParamStore<f64>| {
        let pass = net.forward(p, &input, &mode).unwrap();
        jigsaw_loss(&pass.logits, &labels, 9).unwrap().0
    };
    let pass = net.forward(&params, &input, &mode).unwrap();
    let (_, d) = jigsaw_loss(&pass.logits, &labels, 9).unwrap();
    let mut grads = ParamStore::new();
    net.backward(&params, &pass, &d, &mut grads);
    let names: Vec<String> = specs.iter().filter(|s| s.trainable).map(|s| s.name.clone()).collect();
    check_params("jigsaw network", &params, &grads, &names, &loss)
}

/// Segmentation network with block 1 frozen: frozen tensors must receive no gradient.
pub fn seg_net_checks() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = SegNet::new(parse_arch(TINY_ARCH).unwrap(), true, 3).unwrap();
    let specs = net.param_specs();
    let params = jittered(&specs, &mut rng);
    let input = rand_act(&mut rng, 3, 2, 12, 12);
    let m = masks(&mut rng, 2, 12, 12, 3);
    let mrefs: Vec<&Planar<u8>> = m.iter().collect();
    let mut mode = ForwardMode::train(net.backbone.num_layers());
    mode.trainable[0] = false;
    let loss = |p: &ParamStore<f64>| {
        let pass = net.forward(p, &input, &mode).unwrap();
        pixel_cross_entropy(&pass.scores, &mrefs).unwrap().0
    };
    let pass = net.forward(&params, &input, &mode).unwrap();
    let (_, d) = pixel_cross_entropy(&pass.scores, &mrefs).unwrap();
    let mut grads = ParamStore::new();
    net.backward(&params, &pass, &d, &mut grads);
    assert!(grads.names().all(|n| !n.starts_with("c1.")), "frozen layer received a gradient");
    let names: Vec<String> =
        specs.iter().filter(|s| s.trainable && !s.name.starts_with("c1.")).map(|s| s.name.clone()).collect();
    check_params("segmentation network", &params, &grads, &names, &loss)
}

pub fn all_checks() -> Vec<GradCheck> {
    [conv_checks, pool_checks, bn_checks, jigsaw_loss_checks, jigsaw_head_checks, seg_head_checks, jigsaw_net_checks, seg_net_checks]
        .iter()
        .flat_map(|f| f())
        .collect()
}

/// A plain chain from `(kernel, stride, padding, is_pool)` tuples.
pub fn chain_from(layers: &[(usize, usize, usize, bool)]) -> patchforge::archspec::ArchSpec {
    use patchforge::archspec::{ArchSpec, LayerSpec};
    let specs = layers
        .iter()
        .enumerate()
        .map(|(i, &(k, s, p, pool))| {
            if pool {
                LayerSpec::pool(&format!("l{i}"), k, s, p)
            } else {
                LayerSpec::conv(&format!("l{i}"), k, s, p, 2)
            }
        })
        .collect();
    ArchSpec::chain(specs, 1).unwrap()
}

/// Up to six layers with kernel at most 7, stride at most 3 and padding below the kernel.
pub fn random_chain(rng: &mut ChaCha8Rng) -> patchforge::archspec::ArchSpec {
    let n = rng.random_range(1..=6);
    let layers: Vec<_> = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=7);
            (k, rng.random_range(1..=3), rng.random_range(0..k), rng.random_bool(0.3))
        })
        .collect();
    chain_from(&layers)
}

/// Closed-form rf, output length and every interior center against dependency propagation.
/// Returns the number of centers compared.
pub fn oracle_agrees(arch: &patchforge::archspec::ArchSpec) -> Result<usize, String> {
    use patchforge::archspec::{brute_force_rf, compute_rf_profile, rf_center};
    let p = compute_rf_profile(arch).map_err(|e| e.to_string())?;
    let size = 2 * (p.rf + p.effective_padding) + 4 * p.effective_stride;
    let bf = brute_force_rf(arch, size).map_err(|e| e.to_string())?;
    if bf.rf != p.rf {
        return Err(format!("rf {} but measured {}", p.rf, bf.rf));
    }
    if Some(bf.output_len) != arch.output_len(size) {
        return Err(format!("output length {:?} but measured {}", arch.output_len(size), bf.output_len));
    }
    for (o, c) in &bf.centers {
        let expected = rf_center(&p, *o, *o).row;
        if expected != *c {
            return Err(format!("output {o}: center {expected} but measured {c}"));
        }
    }
    Ok(bf.centers.len())
}

/// Small corpus on disk: `n` images of `size` pixels, the last `val` of them for validation.
pub fn tiny_corpus(dir: &std::path::Path, n: usize, size: usize, val: usize) -> patchforge::dataio::SyntheticCorpus {
    use patchforge::dataio::{generate_synthetic_corpus, SyntheticSpec};
    let spec = SyntheticSpec { image_size: size, val_count: val, ..SyntheticSpec::new(n, 6, 11) };
    generate_synthetic_corpus(&spec, dir).unwrap()
}

/// Trains eight steps straight through, and again as four steps plus a resume from
/// `param-at-4.ckpt`; both metrics files and final checkpoints must match byte for byte.
pub fn resume_matches() -> Result<String, String> {
    use patchforge::dataio::ImageSet;
    use patchforge::train::{read_checkpoint, train_jigsaw, TrainConfig, METRICS_FILE};
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = tiny_corpus(&tmp.path().join("data"), 8, 96, 0);
    let data = ImageSet::load_path(&corpus.train_manifest).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::new("tinyfcn", GridSpec::new(3).unwrap(), 96).map_err(|e| e.to_string())?;
    cfg.batch_size = 2;
    cfg.steps = 8;
    cfg.seed = 3;
    cfg.checkpoint_steps = vec![4];
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    train_jigsaw(&cfg, &data, &full, None).map_err(|e| e.to_string())?;
    let first = TrainConfig { steps: 4, ..cfg.clone() };
    train_jigsaw(&first, &data, &split, None).map_err(|e| e.to_string())?;
    let ckpt = read_checkpoint(&split.join("param-at-4.ckpt")).map_err(|e| e.to_string())?;
    let decoded_again = patchforge::train::Checkpoint::decode(&ckpt.encode()).map_err(|e| e.to_string())?;
    if decoded_again.encode() != std::fs::read(split.join("param-at-4.ckpt")).map_err(|e| e.to_string())? {
        return Err("checkpoint does not survive a load and save unchanged".into());
    }
    train_jigsaw(&cfg, &data, &split, Some(ckpt)).map_err(|e| e.to_string())?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let (a, b) = (read(full.join(METRICS_FILE))?, read(split.join(METRICS_FILE))?);
    if a != b {
        return Err(format!(
            "metrics differ:\n{}\nvs\n{}",
            String::from_utf8_lossy(&a),
            String::from_utf8_lossy(&b)
        ));
    }
    if read(full.join("param-at-8.ckpt"))? != read(split.join("param-at-8.ckpt"))? {
        return Err("final checkpoints differ".into());
    }
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    Ok(format!("{rows} metric rows and the step-8 checkpoint identical after resuming at step 4"))
}

/// Fine-tunes with blocks 1 and 2 copied and frozen; frozen tensors, running statistics
/// included, must keep their exact bits and every other tensor must move.
pub fn freeze_holds() -> Result<String, String> {
    use patchforge::dataio::{AugmentConfig, ImageSet};
    use patchforge::model::ParamGroup;
    use patchforge::train::{JigsawTrainer, OptimizerConfig, TrainConfig};
    use patchforge::transfer::{build_transfer, finetune_seg, SegConfig, TransferPlan};
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = tiny_corpus(tmp.path(), 10, 96, 2);
    let train = ImageSet::load_path(&corpus.train_manifest).map_err(|e| e.to_string())?;
    let val = ImageSet::load_path(&corpus.val_manifest).map_err(|e| e.to_string())?;
    let mut pre = TrainConfig::new("tinyfcn", GridSpec::new(3).unwrap(), 96).map_err(|e| e.to_string())?;
    pre.batch_size = 2;
    let mut trainer = JigsawTrainer::new(pre).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        trainer.step(&train).map_err(|e| e.to_string())?;
    }
    let ckpt = trainer.checkpoint();
    let net = SegNet::new(trainer.cfg.arch.clone(), true, 6).map_err(|e| e.to_string())?;
    let plan = TransferPlan::freeze_through(2);
    let init = build_transfer(&plan, Some(&ckpt), &net, &mut ChaCha8Rng::seed_from_u64(9)).map_err(|e| e.to_string())?;
    let before = init.params.clone();
    let frozen = init.frozen.clone();
    let cfg = SegConfig {
        batch_size: 2,
        steps: 10,
        optimizer: OptimizerConfig::new(0.05, 0.9, vec![]).map_err(|e| e.to_string())?,
        augment: AugmentConfig::crop_only((96, 96)),
        ..SegConfig::default()
    };
    let after = finetune_seg(&net, init, &cfg, &train, &val).map_err(|e| e.to_string())?.params;
    let mut same = 0;
    let mut moved = 0;
    for spec in net.param_specs() {
        let (a, b) = (before.get(&spec.name).data(), after.get(&spec.name).data());
        let identical = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let expected_frozen = matches!(spec.group, ParamGroup::Block(1 | 2));
        if expected_frozen != frozen.contains(&spec.name) {
            return Err(format!("`{}` frozen status disagrees with the plan", spec.name));
        }
        if expected_frozen {
            if !identical {
                return Err(format!("frozen `{}` changed", spec.name));
            }
            same += 1;
        } else if spec.name.ends_with(".bias") && matches!(spec.group, ParamGroup::Block(_)) {
            // A convolution bias feeding batch normalization has zero gradient up to rounding.
        } else if identical {
            return Err(format!("trainable `{}` did not change", spec.name));
        } else {
            moved += 1;
        }
    }
    Ok(format!("{same} frozen tensors bit-identical, {moved} others changed"))
}
