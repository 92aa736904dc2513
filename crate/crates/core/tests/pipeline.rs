//! Fast end-to-end pipeline checks on a tiny dataset and model: generate,
//! train, evaluate, infer, visualize, resume, and the determinism and
//! persistence contracts.

use std::path::{Path, PathBuf};

use cmsa_core::checkpoint::{self, CheckpointMeta};
use cmsa_core::config::Config;
use cmsa_core::lang::Vocabulary;
use cmsa_core::model::Model;
use cmsa_core::optim::AdamState;
use cmsa_core::synth::{gen_dataset, gen_video_dataset, Split};
use cmsa_core::trainer;

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cmsa-pipe-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    for (k, v) in [
        ("c_v1", "6"),
        ("c_v2", "8"),
        ("c_v3", "10"),
        ("c_l", "12"),
        ("d_k", "8"),
        ("d_f", "12"),
        ("epochs", "2"),
        ("lr", "0.002"),
        ("n_samples", "40"),
        ("split_train", "0.5"),
        ("split_val", "0.25"),
        ("split_test", "0.25"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.set("seed", &seed.to_string()).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn gen_tiny_data(dir: &Path, cfg: &Config) {
    gen_dataset(
        cfg.n_samples,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.seed,
        dir,
        &cfg.synth(),
    )
    .unwrap();
}

#[test]
fn train_eval_infer_viz_roundtrip() {
    let data = tmp("data");
    let cfg = tiny_config(3);
    gen_tiny_data(&data, &cfg);

    let run = tmp("run");
    let outcome = trainer::train(&cfg, &data, &run, None).unwrap();
    assert_eq!(outcome.epochs.len(), 2);
    assert!(outcome.first_loss.is_finite());
    assert!(run.join("last.ckpt").exists());
    assert!(run.join("best.ckpt").exists());
    assert!(run.join("vocab.txt").exists());
    let csv = std::fs::read_to_string(&outcome.metrics_csv).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_overall_iou,val_mean_iou,lr\n"));
    assert_eq!(csv.lines().count(), 3);

    // Evaluate the trained checkpoint over the val split with mask output.
    let vocab = Vocabulary::load(&run.join("vocab.txt")).unwrap();
    let model = trainer::load_model(&cfg, &run.join("best.ckpt"), &vocab).unwrap();
    let eval_dir = tmp("eval");
    let report =
        trainer::evaluate(&model, &vocab, &data, Split::Val, Some(&eval_dir)).unwrap();
    assert!(eval_dir.join("report.txt").exists());
    assert!(eval_dir.join("per_sample.csv").exists());
    assert!(eval_dir.join("pred_00000.pgm").exists());
    // prec@X monotone non-increasing.
    for pair in report.prec.windows(2) {
        assert!(pair[1].1 <= pair[0].1);
    }

    // Inference on one dataset image.
    let manifest = cmsa_core::data::Manifest::load(&data).unwrap();
    let entry = manifest.split(Split::Test)[0];
    let expr = std::fs::read_to_string(&entry.expr).unwrap();
    let infer_dir = tmp("infer");
    trainer::infer_image(&model, &vocab, &entry.image, expr.trim(), &infer_dir, true).unwrap();
    let (w, h, _) = cmsa_core::img_io::read_pgm(&infer_dir.join("mask.pgm")).unwrap();
    assert_eq!((w, h), (cfg.image_size, cfg.image_size));
    assert!(infer_dir.join("prob.pgm").exists());

    // Deterministic inference: run twice, byte-identical outputs.
    let infer_dir2 = tmp("infer2");
    trainer::infer_image(&model, &vocab, &entry.image, expr.trim(), &infer_dir2, true).unwrap();
    assert_eq!(
        std::fs::read(infer_dir.join("mask.pgm")).unwrap(),
        std::fs::read(infer_dir2.join("mask.pgm")).unwrap()
    );

    // Attention visualization.
    let viz_dir = tmp("viz");
    trainer::viz_attention(&model, &vocab, &entry.image, expr.trim(), &viz_dir).unwrap();
    let csv = std::fs::read_to_string(viz_dir.join("word_attention.csv")).unwrap();
    let n_words = expr.trim().split_whitespace().count();
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines() {
        let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row.len(), n_words);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 2e-5, "row sum {sum}");
    }
    let (hw, hh, heat) = cmsa_core::img_io::read_pgm(&viz_dir.join("heatmap.pgm")).unwrap();
    assert_eq!((hw, hh), (cfg.image_size, cfg.image_size));
    assert_eq!(*heat.iter().min().unwrap(), 0);
    assert_eq!(*heat.iter().max().unwrap(), 255);

    // Unknown-only expression is an input error.
    assert!(trainer::infer_image(&model, &vocab, &entry.image, "zzzz qqqq", &infer_dir, false)
        .is_err());

    for d in [data, run, eval_dir, infer_dir, infer_dir2, viz_dir] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let data = tmp("det-data");
    let cfg = tiny_config(5);
    gen_tiny_data(&data, &cfg);

    let run_a = tmp("det-a");
    let run_b = tmp("det-b");
    trainer::train(&cfg, &data, &run_a, None).unwrap();
    trainer::train(&cfg, &data, &run_b, None).unwrap();
    assert_eq!(
        std::fs::read(run_a.join("last.ckpt")).unwrap(),
        std::fs::read(run_b.join("last.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(run_a.join("metrics.csv")).unwrap(),
        std::fs::read(run_b.join("metrics.csv")).unwrap()
    );
    for d in [data, run_a, run_b] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn checkpoint_roundtrip_via_files_is_bitwise_identical() {
    let cfg = tiny_config(7);
    let vocab = Vocabulary::from_tokens(cmsa_core::synth::template_vocabulary());
    let model: Model<f32> = Model::init(&cfg, vocab.len()).unwrap();
    let adam = AdamState::new(&model.store);
    let dir = tmp("ckpt");
    let meta = CheckpointMeta {
        iteration: 3,
        adam_step: 3,
        config_hash: cfg.hash(),
    };
    let path_a = dir.join("a.ckpt");
    checkpoint::save(&path_a, &model.store, &adam, &meta).unwrap();

    let mut model2: Model<f32> = Model::init(&tiny_config(99), vocab.len()).unwrap();
    let mut adam2 = AdamState::new(&model2.store);
    let loaded = checkpoint::load(&path_a, &mut model2.store, &mut adam2).unwrap();
    assert_eq!(loaded, meta);
    let path_b = dir.join("b.ckpt");
    checkpoint::save(&path_b, &model2.store, &adam2, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path_a).unwrap(),
        std::fs::read(&path_b).unwrap()
    );
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let data = tmp("resume-data");
    let cfg = tiny_config(9);
    gen_tiny_data(&data, &cfg);

    // Uninterrupted 2-epoch run.
    let full_run = tmp("resume-full");
    let full = trainer::train(&cfg, &data, &full_run, None).unwrap();

    // 1 epoch, then resume for the second.
    let mut cfg_short = cfg.clone();
    cfg_short.set("epochs", "1").unwrap();
    let part_run = tmp("resume-part");
    trainer::train(&cfg_short, &data, &part_run, None).unwrap();
    // Resuming must use the original epoch count (hash covers the config,
    // so the resumed run supplies the full config again).
    let resumed_run = tmp("resume-cont");
    let resumed = trainer::train(
        &cfg,
        &data,
        &resumed_run,
        Some(&part_run.join("last.ckpt")),
    );
    // The partial run trained with epochs=1, so its hash differs; build the
    // proper partial checkpoint by training the full config for one epoch
    // via the iteration counter instead.
    assert!(resumed.is_err(), "config-hash mismatch must be rejected");

    // Proper partial run: same config, interrupted by epoch boundary.
    // Train with the full config but stop after epoch 1 by training a
    // 1-epoch *copy* is a different config; instead replay: train full
    // config, read back last.ckpt of epoch 1 from the metrics of the full
    // run. Here we emulate interruption by resuming from the full run's
    // own epoch-1 state: retrain with epochs=2 but capture epoch-1
    // checkpoint through a callback-free second run is equivalent to the
    // full run by determinism, so resume equivalence is checked on the
    // epoch-2 logs of a run resumed from a mid-run checkpoint.
    let mid_run = tmp("resume-mid");
    let mut mid_ckpt: Option<PathBuf> = None;
    {
        let out_dir = mid_run.clone();
        let _ = trainer::train_with_progress(&cfg, &data, &out_dir, None, |log| {
            if log.epoch == 1 {
                // Snapshot the epoch-1 checkpoint while the run continues.
                let snap = out_dir.join("epoch1.ckpt");
                std::fs::copy(out_dir.join("last.ckpt"), &snap).ok();
                mid_ckpt = Some(snap);
            }
        })
        .unwrap();
    }
    let snap = mid_ckpt.expect("epoch-1 snapshot");
    let cont_run = tmp("resume-cont2");
    let cont = trainer::train(&cfg, &data, &cont_run, Some(&snap)).unwrap();
    assert_eq!(cont.epochs.len(), 1, "resume continues at epoch 2");
    let full_ep2 = full.epochs[1];
    let cont_ep2 = cont.epochs[0];
    assert_eq!(cont_ep2.epoch, 2);
    assert!(
        (full_ep2.train_loss - cont_ep2.train_loss).abs() < 1e-6,
        "resumed epoch-2 loss {} vs uninterrupted {}",
        cont_ep2.train_loss,
        full_ep2.train_loss
    );
    assert!((full_ep2.val_overall_iou - cont_ep2.val_overall_iou).abs() < 1e-6);
    // And the final checkpoints agree bitwise.
    assert_eq!(
        std::fs::read(full_run.join("last.ckpt")).unwrap(),
        std::fs::read(cont_run.join("last.ckpt")).unwrap()
    );

    for d in [data, full_run, part_run, resumed_run, mid_run, cont_run] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn video_pipeline_end_to_end_tiny() {
    let data = tmp("vid-data");
    let mut cfg = tiny_config(13);
    cfg.set("video_mode", "true").unwrap();
    cfg.set("n_clips", "6").unwrap();
    cfg.set("video_frames", "4").unwrap();
    cfg.set("tau", "1").unwrap();
    cfg.set("epochs", "1").unwrap();
    cfg.set("split_train", "0.5").unwrap();
    cfg.set("split_val", "0.5").unwrap();
    cfg.set("split_test", "0.0").unwrap();
    cfg.validate().unwrap();
    gen_video_dataset(
        cfg.n_clips,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.seed,
        &data,
        &cfg.synth(),
    )
    .unwrap();

    let run = tmp("vid-run");
    let outcome = trainer::train(&cfg, &data, &run, None).unwrap();
    assert!(outcome.epochs[0].train_loss.is_finite());

    // Video inference over a clip directory writes one mask per frame.
    let vocab = Vocabulary::load(&run.join("vocab.txt")).unwrap();
    let model = trainer::load_model(&cfg, &run.join("last.ckpt"), &vocab).unwrap();
    let manifest = cmsa_core::data::Manifest::load(&data).unwrap();
    let entry = manifest.split(Split::Val)[0];
    let expr = std::fs::read_to_string(&entry.expr).unwrap();
    let out = tmp("vid-infer");
    trainer::infer_video(&model, &vocab, &entry.image, expr.trim(), &out, false).unwrap();
    let masks: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .collect();
    assert_eq!(masks.len(), 4);

    for d in [data, run, out] {
        std::fs::remove_dir_all(d).ok();
    }
}
