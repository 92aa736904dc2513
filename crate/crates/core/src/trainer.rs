//! Training loop, evaluation, single-sample inference and attention
//! visualization.
//!
//! All randomness flows from the config seed through derived streams, so a
//! fixed (config, dataset) pair reproduces bitwise-identical checkpoints.
//! Checkpoints are written at epoch boundaries; resuming restores
//! parameters, optimizer state and the iteration counter, and the
//! per-epoch shuffle is derived from (seed, epoch), so a resumed run
//! replays the interrupted schedule exactly.

use std::path::{Path, PathBuf};

use crate::cfsa::extract_clip;
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::Config;
use crate::data::{self, Manifest};
use crate::error::{Error, Result};
use crate::fusion::binarize;
use crate::graph::Var;
use crate::img_io;
use crate::lang::{tokenize, TokenSequence, Vocabulary, UNK};
use crate::metrics::{iou_counts, EvalReport, IouCounts};
use crate::model::{Model, Session};
use crate::optim::{poly_lr, AdamHyper, AdamState, ParamId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::Split;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5f7u64;

/// Compact in-memory sample: raw bytes plus pre-tokenized expression.
struct PreppedImage {
    rgb: Vec<u8>,
    mask: Vec<u8>,
    width: usize,
    height: usize,
    tokens: TokenSequence,
}

struct PreppedClip {
    frames: Vec<Vec<u8>>,
    masks: Vec<Vec<u8>>,
    width: usize,
    height: usize,
    tokens: TokenSequence,
}

fn prep_images(
    manifest: &Manifest,
    split: Split,
    vocab: &Vocabulary,
    cfg: &Config,
) -> Result<Vec<PreppedImage>> {
    manifest
        .split(split)
        .into_iter()
        .map(|entry| {
            let (w, h, rgb) = img_io::read_ppm(&entry.image)?;
            if w != cfg.image_size || h != cfg.image_size {
                return Err(Error::Data(format!(
                    "{}: image is {w}x{h}, config expects {size}x{size}",
                    entry.image.display(),
                    size = cfg.image_size
                )));
            }
            let (mw, mh, mask) = img_io::read_pgm(&entry.mask)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Data(format!(
                    "{}: mask size mismatch",
                    entry.mask.display()
                )));
            }
            let text = std::fs::read_to_string(&entry.expr)
                .map_err(|e| Error::io(entry.expr.display().to_string(), e))?;
            let tokens = tokenize(text.trim(), vocab, cfg.n_max)?;
            Ok(PreppedImage {
                rgb,
                mask,
                width: w,
                height: h,
                tokens,
            })
        })
        .collect()
}

fn prep_clips(
    manifest: &Manifest,
    split: Split,
    vocab: &Vocabulary,
    cfg: &Config,
) -> Result<Vec<PreppedClip>> {
    manifest
        .split(split)
        .into_iter()
        .map(|entry| {
            let clip = data::load_video_sample::<f32>(entry)?;
            // Re-read as raw bytes for compact storage.
            let frame_files = data::numbered_files(&entry.image)?;
            let mask_files = data::numbered_files(&entry.mask)?;
            let mut frames = Vec::new();
            let mut width = 0;
            let mut height = 0;
            for f in &frame_files {
                let (w, h, rgb) = img_io::read_ppm(f)?;
                width = w;
                height = h;
                frames.push(rgb);
            }
            let mut masks = Vec::new();
            for m in &mask_files {
                let (_, _, gray) = img_io::read_pgm(m)?;
                masks.push(gray);
            }
            if width != cfg.image_size {
                return Err(Error::Data(format!(
                    "{}: frames are {width}x{height}, config expects {size}x{size}",
                    entry.image.display(),
                    size = cfg.image_size
                )));
            }
            let tokens = tokenize(&clip.expression, vocab, cfg.n_max)?;
            Ok(PreppedClip {
                frames,
                masks,
                width,
                height,
                tokens,
            })
        })
        .collect()
}

fn image_tensor(rgb: &[u8], w: usize, h: usize) -> Tensor<f32> {
    img_io::rgb_to_tensor(rgb, w, h)
}

fn mask_tensor(gray: &[u8], w: usize, h: usize) -> Tensor<f32> {
    img_io::gray_to_mask_tensor(gray, w, h)
}

/// Per-epoch log row; mirrors one line of metrics.csv.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_overall_iou: f64,
    pub val_mean_iou: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Loss of the very first training step, before any update.
    pub first_loss: f64,
    pub best_epoch: usize,
    pub best_val_overall: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Train on the dataset under `data_dir`, writing checkpoints, the metrics
/// log and a vocabulary copy into `out_dir`.
pub fn train(
    config: &Config,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_progress(config, data_dir, out_dir, resume, |_| {})
}

/// As [`train`], invoking `on_epoch` after every epoch's validation pass.
pub fn train_with_progress(
    config: &Config,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let vocab = Vocabulary::load(&data_dir.join("vocab.txt"))?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    let manifest = Manifest::load(data_dir)?;

    let mut model: Model<f32> = Model::init(config, vocab.len())?;
    let mut adam = AdamState::new(&model.store);
    let hyper = AdamHyper {
        weight_decay: config.weight_decay,
        ..AdamHyper::default()
    };

    let (images_train, images_val, clips_train, clips_val);
    let n_train;
    if config.video_mode {
        clips_train = prep_clips(&manifest, Split::Train, &vocab, config)?;
        clips_val = prep_clips(&manifest, Split::Val, &vocab, config)?;
        images_train = Vec::new();
        images_val = Vec::new();
        n_train = clips_train.len();
    } else {
        images_train = prep_images(&manifest, Split::Train, &vocab, config)?;
        images_val = prep_images(&manifest, Split::Val, &vocab, config)?;
        clips_train = Vec::new();
        clips_val = Vec::new();
        n_train = images_train.len();
    }
    if n_train == 0 {
        return Err(Error::Data("train split is empty".into()));
    }

    let steps_per_epoch = n_train.div_ceil(config.batch_size);
    let max_iter = (config.epochs * steps_per_epoch) as u64;
    let mut iteration: u64 = 0;
    if let Some(ckpt) = resume {
        let meta = checkpoint::load(ckpt, &mut model.store, &mut adam)?;
        if meta.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "resume config hash {:#x} does not match current config {:#x}",
                meta.config_hash,
                config.hash()
            )));
        }
        iteration = meta.iteration;
    }
    let start_epoch = (iteration as usize) / steps_per_epoch;

    let mut logs: Vec<EpochLog> = Vec::new();
    let mut first_loss = f64::NAN;
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        Rng::derive(config.seed, SHUFFLE_TAG, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut epoch_steps = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.store.len()];
            let mut batch_loss = 0.0f64;
            for &sample_idx in batch {
                let loss = if config.video_mode {
                    let clip = &clips_train[sample_idx];
                    let target = (epoch + sample_idx) % clip.frames.len();
                    train_step_clip(&model, clip, target, &mut acc)?
                } else {
                    train_step_image(&model, &images_train[sample_idx], &mut acc)?
                };
                if !loss.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite loss {loss} at iteration {iteration} (epoch {epoch}); \
                         lower the learning rate or check the dataset"
                    )));
                }
                if first_loss.is_nan() && iteration == 0 {
                    first_loss = loss;
                }
                batch_loss += loss;
            }
            let scale = 1.0 / batch.len() as f32;
            for g in acc.iter_mut().flatten() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let lr = poly_lr(config.lr, iteration, max_iter, config.poly_power);
            let ids: Vec<ParamId> = model
                .store
                .ids()
                .filter(|id| acc[id.index()].is_some())
                .collect();
            adam.update(&mut model.store, &ids, &acc, lr, &hyper)?;
            model.apply_constraints();
            iteration += 1;
            epoch_loss += batch_loss / batch.len() as f64;
            epoch_steps += 1;
        }

        let report = if config.video_mode {
            evaluate_clips(&model, &clips_val, None)?
        } else {
            evaluate_images(&model, &images_val, None)?
        };
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_overall_iou: report.overall_iou,
            val_mean_iou: report.mean_iou,
            lr: poly_lr(config.lr, iteration.saturating_sub(1), max_iter, config.poly_power),
        };
        logs.push(log);

        let meta = CheckpointMeta {
            iteration,
            adam_step: adam.step_count(),
            config_hash: config.hash(),
        };
        checkpoint::save(&last_path, &model.store, &adam, &meta)?;
        if report.overall_iou > best_val {
            best_val = report.overall_iou;
            best_epoch = epoch + 1;
            checkpoint::save(&best_path, &model.store, &adam, &meta)?;
        }
        on_epoch(&log);
    }

    let metrics_csv = out_dir.join("metrics.csv");
    let mut csv = String::from("epoch,train_loss,val_overall_iou,val_mean_iou,lr\n");
    for l in &logs {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.8}\n",
            l.epoch, l.train_loss, l.val_overall_iou, l.val_mean_iou, l.lr
        ));
    }
    std::fs::write(&metrics_csv, csv)
        .map_err(|e| Error::io(metrics_csv.display().to_string(), e))?;

    Ok(TrainOutcome {
        epochs: logs,
        first_loss,
        best_epoch,
        best_val_overall: best_val,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        metrics_csv,
    })
}

fn train_step_image(
    model: &Model<f32>,
    sample: &PreppedImage,
    acc: &mut [Option<Vec<f32>>],
) -> Result<f64> {
    let mut sess = Session::new(model, true);
    let img = sess
        .graph
        .constant(image_tensor(&sample.rgb, sample.width, sample.height));
    let out = model.forward_image(&mut sess, img, &sample.tokens)?;
    let y = sess
        .graph
        .constant(mask_tensor(&sample.mask, sample.width, sample.height));
    let loss = sess.graph.bce_loss(out.prob, y)?;
    sess.graph.backward(loss)?;
    accumulate(acc, &sess);
    Ok(sess.graph.value(loss).item()?.as_f64())
}

fn train_step_clip(
    model: &Model<f32>,
    clip: &PreppedClip,
    target: usize,
    acc: &mut [Option<Vec<f32>>],
) -> Result<f64> {
    let mut sess = Session::new(model, true);
    let window = extract_clip(clip.frames.len(), target, model.config.tau)?;
    let frame_vars = clip_window_vars(clip, &window, &mut sess);
    let out = model.forward_clip(&mut sess, &frame_vars, model.config.tau.min(window.len() - 1), &clip.tokens)?;
    let y = sess
        .graph
        .constant(mask_tensor(&clip.masks[target], clip.width, clip.height));
    let loss = sess.graph.bce_loss(out.prob, y)?;
    sess.graph.backward(loss)?;
    accumulate(acc, &sess);
    Ok(sess.graph.value(loss).item()?.as_f64())
}

/// Build frame leaves for a clamped clip window, encoding each distinct
/// frame once and reusing its variable for replicated slots.
fn clip_window_vars(
    clip: &PreppedClip,
    window: &[usize],
    sess: &mut Session<f32>,
) -> Vec<Var> {
    let mut cache: Vec<Option<Var>> = vec![None; clip.frames.len()];
    window
        .iter()
        .map(|&fi| {
            *cache[fi].get_or_insert_with(|| {
                sess.graph
                    .constant(image_tensor(&clip.frames[fi], clip.width, clip.height))
            })
        })
        .collect()
}

fn accumulate(acc: &mut [Option<Vec<f32>>], sess: &Session<f32>) {
    for (slot, grad) in acc.iter_mut().zip(sess.grads()) {
        match (slot.as_mut(), grad) {
            (Some(a), Some(g)) => {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

fn evaluate_images(
    model: &Model<f32>,
    samples: &[PreppedImage],
    write_dir: Option<&Path>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation over an empty split".into()));
    }
    let mut counts = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let mut sess = Session::new(model, false);
        let img = sess
            .graph
            .constant(image_tensor(&sample.rgb, sample.width, sample.height));
        let out = model.forward_image(&mut sess, img, &sample.tokens)?;
        let prob = sess.graph.value(out.prob);
        let pred = binarize(prob, 0.5)?;
        let gt = mask_tensor(&sample.mask, sample.width, sample.height);
        counts.push(iou_counts(&pred, &gt)?);
        if let Some(dir) = write_dir {
            img_io::write_pgm(
                &dir.join(format!("pred_{i:05}.pgm")),
                sample.width,
                sample.height,
                &img_io::mask_to_gray(&pred),
            )?;
        }
    }
    EvalReport::from_counts(&counts)
}

fn evaluate_clips(
    model: &Model<f32>,
    clips: &[PreppedClip],
    write_dir: Option<&Path>,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Usage("evaluation over an empty split".into()));
    }
    let mut counts: Vec<IouCounts> = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        for target in 0..clip.frames.len() {
            let mut sess = Session::new(model, false);
            let window = extract_clip(clip.frames.len(), target, model.config.tau)?;
            let frame_vars = clip_window_vars(clip, &window, &mut sess);
            let out = model.forward_clip(
                &mut sess,
                &frame_vars,
                model.config.tau.min(window.len() - 1),
                &clip.tokens,
            )?;
            let pred = binarize(sess.graph.value(out.prob), 0.5)?;
            let gt = mask_tensor(&clip.masks[target], clip.width, clip.height);
            counts.push(iou_counts(&pred, &gt)?);
            if let Some(dir) = write_dir {
                img_io::write_pgm(
                    &dir.join(format!("pred_{ci:05}_{target:05}.pgm")),
                    clip.width,
                    clip.height,
                    &img_io::mask_to_gray(&pred),
                )?;
            }
        }
    }
    EvalReport::from_counts(&counts)
}

/// Evaluate a trained model over one split of a dataset; optionally writes
/// per-sample masks plus report.txt and per_sample.csv into `out_dir`.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocabulary,
    data_dir: &Path,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let manifest = Manifest::load(data_dir)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let report = if model.config.video_mode {
        let clips = prep_clips(&manifest, split, vocab, &model.config)?;
        evaluate_clips(model, &clips, out_dir)?
    } else {
        let images = prep_images(&manifest, split, vocab, &model.config)?;
        evaluate_images(model, &images, out_dir)?
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("report.txt"), report.to_text())
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("per_sample.csv"), report.per_sample_csv())
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    Ok(report)
}

fn tokenize_for_inference(
    expr: &str,
    vocab: &Vocabulary,
    n_max: usize,
) -> Result<TokenSequence> {
    let tokens = tokenize(expr, vocab, n_max)?;
    if tokens.valid().iter().all(|&t| t == UNK) {
        return Err(Error::Input(format!(
            "expression {expr:?} contains no known words"
        )));
    }
    Ok(tokens)
}

/// Run one image through the model; writes mask.pgm and optionally
/// prob.pgm under `out_dir`.
pub fn infer_image(
    model: &Model<f32>,
    vocab: &Vocabulary,
    image_path: &Path,
    expr: &str,
    out_dir: &Path,
    write_prob: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let (w, h, rgb) = img_io::read_ppm(image_path)?;
    let tokens = tokenize_for_inference(expr, vocab, model.config.n_max)?;
    let mut sess = Session::new(model, false);
    let img = sess.graph.constant(image_tensor(&rgb, w, h));
    let out = model.forward_image(&mut sess, img, &tokens)?;
    let prob = sess.graph.value(out.prob);
    let pred = binarize(prob, 0.5)?;
    img_io::write_pgm(&out_dir.join("mask.pgm"), w, h, &img_io::mask_to_gray(&pred))?;
    if write_prob {
        img_io::write_pgm(&out_dir.join("prob.pgm"), w, h, &img_io::prob_to_gray(prob))?;
    }
    Ok(())
}

/// Run every frame of a clip directory through the video pipeline; writes
/// mask_<frame>.pgm per frame (and prob_<frame>.pgm when requested).
pub fn infer_video(
    model: &Model<f32>,
    vocab: &Vocabulary,
    frames_dir: &Path,
    expr: &str,
    out_dir: &Path,
    write_prob: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let files = data::numbered_files(frames_dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!(
            "{}: no frames found",
            frames_dir.display()
        )));
    }
    let tokens = tokenize_for_inference(expr, vocab, model.config.n_max)?;
    let mut frames = Vec::new();
    let (mut w, mut h) = (0, 0);
    for f in &files {
        let (fw, fh, rgb) = img_io::read_ppm(f)?;
        w = fw;
        h = fh;
        frames.push(rgb);
    }
    for target in 0..frames.len() {
        let mut sess = Session::new(model, false);
        let window = extract_clip(frames.len(), target, model.config.tau)?;
        let mut cache: Vec<Option<Var>> = vec![None; frames.len()];
        let frame_vars: Vec<Var> = window
            .iter()
            .map(|&fi| {
                *cache[fi].get_or_insert_with(|| {
                    sess.graph.constant(image_tensor(&frames[fi], w, h))
                })
            })
            .collect();
        let out = model.forward_clip(
            &mut sess,
            &frame_vars,
            model.config.tau.min(window.len() - 1),
            &tokens,
        )?;
        let prob = sess.graph.value(out.prob);
        let pred = binarize(prob, 0.5)?;
        img_io::write_pgm(
            &out_dir.join(format!("mask_{target:05}.pgm")),
            w,
            h,
            &img_io::mask_to_gray(&pred),
        )?;
        if write_prob {
            img_io::write_pgm(
                &out_dir.join(format!("prob_{target:05}.pgm")),
                w,
                h,
                &img_io::prob_to_gray(prob),
            )?;
        }
    }
    Ok(())
}

/// Word-attention matrix (3 x N CSV) and spatial heatmap for one sample.
pub fn viz_attention(
    model: &Model<f32>,
    vocab: &Vocabulary,
    image_path: &Path,
    expr: &str,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let (w, h, rgb) = img_io::read_ppm(image_path)?;
    let tokens = tokenize_for_inference(expr, vocab, model.config.n_max)?;
    let mut sess = Session::new(model, false);
    let img = sess.graph.constant(image_tensor(&rgb, w, h));
    let out = model.forward_image(&mut sess, img, &tokens)?;

    let rows: [Vec<f32>; 3] = [
        sess.graph.value(out.word_attn[0]).data().to_vec(),
        sess.graph.value(out.word_attn[1]).data().to_vec(),
        sess.graph.value(out.word_attn[2]).data().to_vec(),
    ];
    let matrix = crate::cmsa::word_attention_matrix(&rows)?;
    std::fs::write(
        out_dir.join("word_attention.csv"),
        crate::cmsa::word_attention_csv(&matrix),
    )
    .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // Strongest activated channel of the final fused map, normalized and
    // upsampled to the input size.
    let fused = sess.graph.value(out.fused_sum).clone();
    let (c, fh, fw) = (fused.shape()[0], fused.shape()[1], fused.shape()[2]);
    let plane = fh * fw;
    let mut best_channel = 0;
    let mut best_peak = f32::NEG_INFINITY;
    for ch in 0..c {
        let peak = fused.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        if peak > best_peak {
            best_peak = peak;
            best_channel = ch;
        }
    }
    let channel = &fused.data()[best_channel * plane..(best_channel + 1) * plane];
    let lo = channel.iter().fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = channel.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let normalized: Vec<f32> = channel.iter().map(|&v| (v - lo) / span).collect();

    let mut g = crate::graph::Graph::<f32>::new();
    let nv = g.constant(Tensor::new(vec![1, fh, fw], normalized)?);
    let up = g.upsample_bilinear(nv, h, w)?;
    let up_map = g.value(up);
    // Rescale to the full byte range for display.
    let ulo = up_map.data().iter().fold(f32::INFINITY, |m, &v| m.min(v));
    let uhi = up_map
        .data()
        .iter()
        .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let uspan = if uhi > ulo { uhi - ulo } else { 1.0 };
    let bytes: Vec<u8> = up_map
        .data()
        .iter()
        .map(|&v| (((v - ulo) / uspan) * 255.0).round() as u8)
        .collect();
    img_io::write_pgm(&out_dir.join("heatmap.pgm"), w, h, &bytes)?;
    Ok(())
}

/// Build a model and load a checkpoint for it, verifying the config hash.
pub fn load_model(config: &Config, ckpt: &Path, vocab: &Vocabulary) -> Result<Model<f32>> {
    let mut model: Model<f32> = Model::init(config, vocab.len())?;
    let mut adam = AdamState::new(&model.store);
    let meta = checkpoint::load(ckpt, &mut model.store, &mut adam)?;
    if meta.config_hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint config hash {:#x} does not match the supplied config {:#x}",
            meta.config_hash,
            config.hash()
        )));
    }
    Ok(model)
}
