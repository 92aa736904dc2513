// Sanity probe: the model must be able to memorize a small training set.
// Trains on n samples and evaluates on the same samples.

use cmsa_core::config::Config;
use cmsa_core::synth::{gen_dataset, Split};
use cmsa_core::trainer;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let mut cfg = Config::default();
    for (k, v) in [
        ("c_v1", "16"),
        ("c_v2", "24"),
        ("c_v3", "32"),
        ("c_l", "24"),
        ("d_k", "32"),
        ("d_f", "48"),
        ("batch_size", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.set("n_samples", &n.to_string()).unwrap();
    cfg.set("epochs", &epochs.to_string()).unwrap();
    cfg.set("lr", &lr.to_string()).unwrap();
    // All samples land in train; val reuses train files via a second pass.
    cfg.set("split_train", "0.5").unwrap();
    cfg.set("split_val", "0.5").unwrap();
    cfg.set("split_test", "0.0").unwrap();
    cfg.validate().unwrap();

    let data = std::env::temp_dir().join("cmsa-overfit-data");
    std::fs::remove_dir_all(&data).ok();
    std::fs::create_dir_all(&data).unwrap();
    gen_dataset(
        cfg.n_samples,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        99,
        &data,
        &cfg.synth(),
    )
    .unwrap();
    // Duplicate the train rows as val rows so the val metric measures
    // training-set fit.
    let manifest_path = data.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("train\t") {
            out.push_str(&format!("train\t{rest}\nval\t{rest}\n"));
        }
    }
    std::fs::write(&manifest_path, out).unwrap();

    let run = std::env::temp_dir().join("cmsa-overfit-run");
    std::fs::remove_dir_all(&run).ok();
    let outcome = trainer::train_with_progress(&cfg, &data, &run, None, |log| {
        println!(
            "epoch {:3} loss {:.5} train-fit IoU {:.4} lr {:.6}",
            log.epoch, log.train_loss, log.val_overall_iou, log.lr
        );
        let _ = std::io::Write::flush(&mut std::io::stdout());
    })
    .unwrap();
    println!("best train-fit IoU {:.4}", outcome.best_val_overall);
    let _ = Split::Train;
}
