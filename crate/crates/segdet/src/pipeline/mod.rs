//! End-to-end orchestration: dataset generation, the two training stages,
//! attention construction, inference, evaluation and the three-way
//! comparison. The `segdet` binary is a thin wrapper over these functions.
//!
//! Determinism: every stochastic choice at iteration `i` draws from a fresh
//! generator seeded by `(global seed, stream tag, i)`, so a run resumed
//! from a checkpoint at iteration `k` replays exactly the iterations an
//! uninterrupted run would have executed.

pub mod checkpoint;
pub mod config;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_from_gt_boxes, build_3d_mask, build_attention};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{comparison_table, evaluate, iou_metric, loss_curve_export, EvalReport, Method};
use crate::optim::{Adam, Sgd};
use crate::phantom::{derive_gt_boxes, gen_phantom, load_entry, make_dataset, read_manifest, Manifest, Split};
use crate::rpn::{extract_proposals, rpn_loss, sample_minibatch, slice_anchor_labels, RpnModel};
use crate::tensor::Tensor;
use crate::unet::{predict, seg_loss, UNet3D};
use crate::volume::{read_svol, write_svol, Volume};

pub use checkpoint::Checkpoint;
pub use config::PipelineConfig;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from the global seed, a stream tag
/// and an index (usually the iteration number).
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
    }
    splitmix(seed ^ splitmix(h.wrapping_add(splitmix(index))))
}

/// Stack image and optional attention/mask channel into `[1, C, D, H, W]`.
pub fn seg_input(image: &Volume, attention: Option<&Volume>) -> Result<Tensor> {
    let (d, h, w) = image.dims();
    match attention {
        None => Ok(image.as_tensor()),
        Some(att) => {
            if att.dims() != image.dims() {
                return Err(Error::Dim(format!(
                    "attention dims {:?} != image dims {:?}",
                    att.dims(),
                    image.dims()
                )));
            }
            let mut data = Vec::with_capacity(2 * image.numel());
            data.extend_from_slice(&image.data);
            data.extend_from_slice(&att.data);
            Tensor::new(vec![1, 2, d, h, w], data)
        }
    }
}

/// Outputs of one training run.
pub struct TrainOutput {
    pub final_ckpt: PathBuf,
    /// Best-by-validation-IoU checkpoint (segmentation stage only).
    pub best_ckpt: Option<PathBuf>,
    pub best_iter: Option<u64>,
    pub loss_log: Vec<(u64, f64)>,
}

pub fn cmd_gen_data(cfg: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    make_dataset(
        out_dir,
        cfg.data.n_train,
        cfg.data.n_test,
        cfg.seed,
        cfg.data.dims,
        &cfg.data.phantom,
    )
}

fn load_split_cases(manifest_path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(Volume, Volume)>> {
    manifest
        .split(split)
        .map(|e| load_entry(manifest_path, e))
        .collect()
}

fn finite_or_abort(loss: f32, what: &str, iteration: u64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "{what} loss became non-finite ({loss}) at iteration {iteration}; \
             lower the learning rate or change the seed"
        )));
    }
    Ok(f64::from(loss))
}

/// Train the detector on every slice (object-bearing and empty) of the
/// training volumes. Writes periodic checkpoints, a final checkpoint and
/// the loss curve into `out_dir`.
pub fn cmd_train_rpn(cfg: &PipelineConfig, manifest_path: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = read_manifest(manifest_path)?;
    let cases = load_split_cases(manifest_path, &manifest, Split::Train)?;
    if cases.is_empty() {
        return Err(Error::Input("manifest has no training volumes".into()));
    }
    let (_, h, w) = cases[0].0.dims();

    // anchor labels are a pure function of the ground truth; compute once
    let mut slice_pool = Vec::new(); // (volume, z)
    let mut labels_by_slice = Vec::new();
    for (vi, (vol, lab)) in cases.iter().enumerate() {
        let boxes = derive_gt_boxes(lab);
        let mut per_vol = Vec::with_capacity(vol.d);
        for z in 0..vol.d {
            let gt: Vec<_> = boxes[z].into_iter().collect();
            let labels = slice_anchor_labels(&cfg.rpn, h, w, &gt)?;
            let usable = !cfg.rpn.positives_only || labels.positives().next().is_some();
            if usable {
                slice_pool.push((vi, z));
            }
            per_vol.push(labels);
        }
        labels_by_slice.push(per_vol);
    }
    if slice_pool.is_empty() {
        return Err(Error::Input("no trainable slices in the training split".into()));
    }

    let model = RpnModel::new(cfg.rpn.clone(), derive_seed(cfg.seed, "rpn-init", 0));
    let mut opt = Sgd::new(cfg.rpn_lr, cfg.rpn_momentum, cfg.rpn_weight_decay);
    let params = model.params();
    let mut start_iter = 0u64;
    if let Some(path) = resume {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.kind != "rpn" {
            return Err(Error::Format(format!(
                "cannot resume rpn training from a '{}' checkpoint",
                ckpt.kind
            )));
        }
        checkpoint::restore_params(&ckpt, &params)?;
        checkpoint::restore_sgd(&ckpt, &params, &mut opt)?;
        start_iter = ckpt.iteration;
    }

    let mut loss_log = Vec::new();
    let final_path = out_dir.join("rpn.sgck");
    for it in start_iter + 1..=cfg.rpn_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rpn-iter", it));
        let (vi, z) = slice_pool[rng.random_range(0..slice_pool.len())];
        let labels = &labels_by_slice[vi][z];
        let sample = sample_minibatch(labels, cfg.rpn.batch_size, cfg.rpn.pos_fraction, cfg.rpn.positives_only, &mut rng)?;

        let mut g = Graph::new();
        let x = g.constant(cases[vi].0.slice_tensor(z));
        let (cls, reg) = model.forward(&mut g, x)?;
        let loss = rpn_loss(&mut g, cls, reg, labels, &sample)?;
        let loss_v = finite_or_abort(g.data(loss)[0], "rpn", it)?;
        model.zero_grad();
        g.backward(loss)?;
        opt.step(&params)?;

        if it % cfg.log_every == 0 || it == cfg.rpn_iters {
            loss_log.push((it, loss_v));
        }
        if it % cfg.checkpoint_every == 0 {
            checkpoint::snapshot_sgd("rpn", it, &params, &opt).write(&out_dir.join(format!("rpn_iter{it:06}.sgck")))?;
        }
    }
    checkpoint::snapshot_sgd("rpn", cfg.rpn_iters, &params, &opt).write(&final_path)?;
    loss_curve_export(&loss_log, &out_dir.join("loss_rpn.tsv"))?;
    Ok(TrainOutput { final_ckpt: final_path, best_ckpt: None, best_iter: None, loss_log })
}

pub fn load_rpn(cfg: &PipelineConfig, path: &Path) -> Result<RpnModel> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.kind != "rpn" {
        return Err(Error::Format(format!("expected an rpn checkpoint, found kind '{}'", ckpt.kind)));
    }
    let model = RpnModel::new(cfg.rpn.clone(), 0);
    checkpoint::restore_params(&ckpt, &model.params())?;
    Ok(model)
}

pub fn load_unet(cfg: &PipelineConfig, path: &Path) -> Result<(UNet3D, Method)> {
    let ckpt = Checkpoint::read(path)?;
    let Some(tag) = ckpt.kind.strip_prefix("seg.") else {
        return Err(Error::Format(format!(
            "expected a segmentation checkpoint, found kind '{}'",
            ckpt.kind
        )));
    };
    let method = Method::from_tag(tag)?;
    let model = UNet3D::new(cfg.seg.unet_config(in_channels(method)), 0);
    checkpoint::restore_params(&ckpt, &model.params())?;
    Ok((model, method))
}

fn in_channels(method: Method) -> usize {
    match method {
        Method::PlainUnet => 1,
        Method::Mask3d | Method::Attention => 2,
    }
}

fn kind_for(method: Method) -> String {
    format!("seg.{}", method.tag())
}

/// Build the second input channel for one volume under a given method.
/// `None` for the plain baseline.
pub fn attention_channel(
    cfg: &PipelineConfig,
    method: Method,
    rpn: Option<&RpnModel>,
    image: &Volume,
    labels: &Volume,
) -> Result<Option<Volume>> {
    match method {
        Method::PlainUnet => Ok(None),
        Method::Mask3d => Ok(Some(build_3d_mask(labels))),
        Method::Attention => {
            if cfg.seg.oracle_attention {
                let boxes = derive_gt_boxes(labels);
                return Ok(Some(attention_from_gt_boxes(&boxes, image.dims())?));
            }
            let Some(rpn) = rpn else {
                return Err(Error::Usage(
                    "attention mode needs an rpn checkpoint (or seg.oracle_attention = true)".into(),
                ));
            };
            let proposals = extract_proposals(rpn, image, &cfg.rpn)?;
            Ok(Some(build_attention(&proposals, image.dims())?))
        }
    }
}

/// Train the segmenter in one of the three comparison modes. The frozen
/// RPN (attention mode) runs once per volume up front; the per-volume
/// attention channel is then fixed for the whole run. Periodic checkpoints
/// are retained and the one with the best held-out-phantom IoU is recorded
/// as `seg_<tag>_best.sgck`.
pub fn cmd_train_seg(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    method: Method,
    rpn_ckpt: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = read_manifest(manifest_path)?;
    let cases = load_split_cases(manifest_path, &manifest, Split::Train)?;
    if cases.is_empty() {
        return Err(Error::Input("manifest has no training volumes".into()));
    }

    let needs_rpn = method == Method::Attention && !cfg.seg.oracle_attention;
    let rpn = if needs_rpn {
        let Some(path) = rpn_ckpt else {
            return Err(Error::Usage("attention mode requires --rpn CKPT".into()));
        };
        Some(load_rpn(cfg, path)?)
    } else {
        None
    };

    // the detector is frozen during this stage: build each volume's
    // attention channel once
    let inputs: Vec<Tensor> = cases
        .iter()
        .map(|(image, labels)| {
            let att = attention_channel(cfg, method, rpn.as_ref(), image, labels)?;
            seg_input(image, att.as_ref())
        })
        .collect::<Result<_>>()?;

    let tag = method.tag();
    let kind = kind_for(method);
    let model = UNet3D::new(cfg.seg.unet_config(in_channels(method)), derive_seed(cfg.seed, "seg-init", 0));
    let params = model.params();
    let mut opt = Adam::new(cfg.seg.lr, cfg.seg.beta1, cfg.seg.beta2);
    let mut start_iter = 0u64;
    if let Some(path) = resume {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.kind != kind {
            return Err(Error::Format(format!(
                "cannot resume '{kind}' training from a '{}' checkpoint",
                ckpt.kind
            )));
        }
        checkpoint::restore_params(&ckpt, &params)?;
        checkpoint::restore_adam(&ckpt, &params, &mut opt)?;
        start_iter = ckpt.iteration;
    }

    let mut loss_log = Vec::new();
    for it in start_iter + 1..=cfg.seg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "seg-iter", it));
        let vi = rng.random_range(0..cases.len());

        let mut g = Graph::new();
        let x = g.constant(inputs[vi].clone());
        let logits = model.forward(&mut g, x)?;
        let loss = seg_loss(&mut g, logits, &cases[vi].1)?;
        let loss_v = finite_or_abort(g.data(loss)[0], tag, it)?;
        model.zero_grad();
        g.backward(loss)?;
        opt.step(&params)?;

        loss_log.push((it, loss_v));
        if it % cfg.checkpoint_every == 0 {
            checkpoint::snapshot_adam(&kind, it, &params, &opt)
                .write(&out_dir.join(format!("seg_{tag}_iter{it:06}.sgck")))?;
        }
    }
    let final_path = out_dir.join(format!("seg_{tag}.sgck"));
    checkpoint::snapshot_adam(&kind, cfg.seg.iters, &params, &opt).write(&final_path)?;
    loss_curve_export(&loss_log, &out_dir.join(format!("loss_{tag}.tsv")))?;

    // model selection: held-out phantom IoU over the retained checkpoints
    let val = gen_phantom(derive_seed(cfg.seed, "seg-val", 0), cfg.data.dims, &cfg.data.phantom)?;
    let val_att = attention_channel(cfg, method, rpn.as_ref(), &val.volume, &val.labels)?;
    let val_input = seg_input(&val.volume, val_att.as_ref())?;

    let mut candidates: Vec<(u64, PathBuf)> = Vec::new();
    let prefix = format!("seg_{tag}_iter");
    let mut names: Vec<_> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with(&prefix) && n.ends_with(".sgck"))
        .collect();
    names.sort();
    for name in names {
        if let Ok(it) = name[prefix.len()..name.len() - 5].parse::<u64>() {
            candidates.push((it, out_dir.join(&name)));
        }
    }
    candidates.push((cfg.seg.iters, final_path.clone()));

    let mut best: Option<(f64, u64, PathBuf)> = None;
    for (it, path) in &candidates {
        let ckpt = Checkpoint::read(path)?;
        checkpoint::restore_params(&ckpt, &params)?;
        let pred = predict(&model, val_input.clone())?;
        let iou = iou_metric(&pred, &val.labels)?;
        let better = match &best {
            None => true,
            Some((b, _, _)) => iou > *b,
        };
        if better {
            best = Some((iou, *it, path.clone()));
        }
    }
    let (best_iou, best_iter, best_src) = best.expect("at least the final checkpoint is a candidate");
    let best_path = out_dir.join(format!("seg_{tag}_best.sgck"));
    std::fs::copy(&best_src, &best_path)?;
    std::fs::write(
        out_dir.join(format!("seg_{tag}_best.txt")),
        format!("iter\t{best_iter}\nvalidation_iou\t{best_iou}\n"),
    )?;
    // leave the in-memory model at the final weights
    let final_ckpt_data = Checkpoint::read(&final_path)?;
    checkpoint::restore_params(&final_ckpt_data, &params)?;

    Ok(TrainOutput {
        final_ckpt: final_path,
        best_ckpt: Some(best_path),
        best_iter: Some(best_iter),
        loss_log,
    })
}

/// Detector + segmenter on one volume file: writes the attention volume
/// (when the mode has one) and the predicted labels as SVOL files.
pub fn cmd_infer(
    cfg: &PipelineConfig,
    rpn_ckpt: Option<&Path>,
    seg_ckpt: &Path,
    volume_path: &Path,
    labels_path: Option<&Path>,
    out_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let image = read_svol(volume_path)?;
    let (model, method) = load_unet(cfg, seg_ckpt)?;

    let needs_labels = method == Method::Mask3d || (method == Method::Attention && cfg.seg.oracle_attention);
    let labels = match (needs_labels, labels_path) {
        (true, Some(p)) => Some(read_svol(p)?),
        (true, None) => {
            return Err(Error::Usage(format!(
                "a '{}' checkpoint derives its mask from the annotation; pass --labels FILE",
                method.tag()
            )))
        }
        (false, _) => None,
    };
    let rpn = match (method, cfg.seg.oracle_attention) {
        (Method::Attention, false) => {
            let Some(path) = rpn_ckpt else {
                return Err(Error::Usage("attention-mode inference requires --rpn CKPT".into()));
            };
            Some(load_rpn(cfg, path)?)
        }
        _ => None,
    };

    let placeholder = Volume::zeros(1, 1, 1);
    let att = attention_channel(cfg, method, rpn.as_ref(), &image, labels.as_ref().unwrap_or(&placeholder))?;

    let mut written = Vec::new();
    let stem = out_prefix.to_string_lossy();
    if let Some(att) = &att {
        let path = PathBuf::from(format!("{stem}.attention.svol"));
        write_svol(&path, att)?;
        written.push(path);
    }
    let pred = predict(&model, seg_input(&image, att.as_ref())?)?;
    let path = PathBuf::from(format!("{stem}.pred.svol"));
    write_svol(&path, &pred)?;
    written.push(path);
    Ok(written)
}

/// Evaluate one or more segmentation checkpoints over the test split and
/// write per-method reports (aligned text + key/value TSV). With several
/// checkpoints a combined comparison table is written too.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    rpn_ckpt: Option<&Path>,
    seg_ckpts: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<EvalReport>> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = read_manifest(manifest_path)?;
    let cases = load_split_cases(manifest_path, &manifest, Split::Test)?;
    if cases.is_empty() {
        return Err(Error::Input("manifest has no test volumes".into()));
    }

    let mut reports = Vec::new();
    for seg_ckpt in seg_ckpts {
        let (model, method) = load_unet(cfg, seg_ckpt)?;
        let rpn = match (method, cfg.seg.oracle_attention, rpn_ckpt) {
            (Method::Attention, false, Some(path)) => Some(load_rpn(cfg, path)?),
            (Method::Attention, false, None) => {
                return Err(Error::Usage("evaluating an attention checkpoint requires --rpn CKPT".into()))
            }
            _ => None,
        };
        let report = evaluate(method, &cases, |image, labels| {
            let att = attention_channel(cfg, method, rpn.as_ref(), image, labels)?;
            predict(&model, seg_input(image, att.as_ref())?)
        })?;
        std::fs::write(
            out_dir.join(format!("report_{}.txt", method.tag())),
            comparison_table(std::slice::from_ref(&report)),
        )?;
        std::fs::write(out_dir.join(format!("report_{}.tsv", method.tag())), report.to_tsv())?;
        reports.push(report);
    }
    if reports.len() > 1 {
        std::fs::write(out_dir.join("comparison.txt"), comparison_table(&reports))?;
    }
    Ok(reports)
}

/// Train all three systems from shared seeds and data, evaluate their
/// best checkpoints, and emit the comparison table plus one loss-curve
/// file per mode.
pub fn cmd_compare(cfg: &PipelineConfig, manifest_path: &Path, out_dir: &Path) -> Result<Vec<EvalReport>> {
    std::fs::create_dir_all(out_dir)?;
    let rpn_out = cmd_train_rpn(cfg, manifest_path, out_dir, None)?;

    let mut best_ckpts = Vec::new();
    for method in [Method::PlainUnet, Method::Mask3d, Method::Attention] {
        let rpn_arg = (method == Method::Attention).then(|| rpn_out.final_ckpt.as_path());
        let out = cmd_train_seg(cfg, manifest_path, method, rpn_arg, out_dir, None)?;
        best_ckpts.push(out.best_ckpt.expect("segmentation training records a best checkpoint"));
    }
    let reports = cmd_eval(cfg, manifest_path, Some(&rpn_out.final_ckpt), &best_ckpts, out_dir)?;
    std::fs::write(out_dir.join("comparison.txt"), comparison_table(&reports))?;
    Ok(reports)
}
