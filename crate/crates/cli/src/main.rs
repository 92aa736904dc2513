//! Command-line entry points: gen-data, train, eval, infer, viz-attn.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cmsa_core::config::Config;
use cmsa_core::error::{Error, Result};
use cmsa_core::lang::Vocabulary;
use cmsa_core::synth::{gen_dataset, gen_video_dataset, Split};
use cmsa_core::trainer;

const USAGE: &str = "\
usage: cmsa <command> [options]

commands:
  gen-data   --out DIR [--config FILE] [--seed N] [--set key=value ...]
  train      --data DIR --out DIR [--config FILE] [--seed N] [--resume CKPT] [--set k=v ...]
  eval       --ckpt FILE --data DIR --out DIR [--split train|val|test] [--config FILE] [--set k=v ...]
  infer      --ckpt FILE (--image FILE | --frames DIR) --expr TEXT --out DIR [--prob] [--config FILE] [--set k=v ...]
  viz-attn   --ckpt FILE --image FILE --expr TEXT --out DIR [--config FILE] [--set k=v ...]

Configuration files are flat key=value text; --set overrides file values
and --seed overrides the seed key. eval/infer/viz-attn look for vocab.txt
next to the checkpoint unless --vocab is given.
";

struct Args {
    values: Vec<(String, Option<String>)>,
}

impl Args {
    fn parse(raw: &[String], with_value: &[&str], flags: &[&str]) -> Result<Args> {
        let mut values = Vec::new();
        let mut i = 0;
        while i < raw.len() {
            let key = raw[i].as_str();
            if flags.contains(&key) {
                values.push((key.to_string(), None));
                i += 1;
            } else if with_value.contains(&key) {
                let v = raw
                    .get(i + 1)
                    .ok_or_else(|| Error::Usage(format!("{key} needs a value")))?;
                values.push((key.to_string(), Some(v.clone())));
                i += 2;
            } else {
                return Err(Error::Usage(format!("unknown option '{key}'")));
            }
        }
        Ok(Args { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.as_deref())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Usage(format!("missing required option {key}")))
    }

    fn has(&self, key: &str) -> bool {
        self.values.iter().any(|(k, _)| k == key)
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.values
            .iter()
            .filter(move |(k, _)| k == key)
            .filter_map(|(_, v)| v.as_deref())
    }
}

/// Defaults, then config file, then --set pairs, then --seed.
fn build_config(args: &Args) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = args.get("--config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_string(), e))?;
        cfg.apply_text(&text)?;
    }
    for pair in args.all("--set") {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got '{pair}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.get("--seed") {
        cfg.set("seed", seed)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_vocab_for(args: &Args, ckpt: &Path) -> Result<Vocabulary> {
    let path = match args.get("--vocab") {
        Some(p) => PathBuf::from(p),
        None => ckpt
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    };
    if !path.exists() {
        return Err(Error::Input(format!(
            "vocabulary file {} not found; pass --vocab",
            path.display()
        )));
    }
    Vocabulary::load(&path)
}

fn cmd_gen_data(raw: &[String]) -> Result<()> {
    let args = Args::parse(raw, &["--out", "--config", "--seed", "--set"], &[])?;
    let cfg = build_config(&args)?;
    let out = PathBuf::from(args.require("--out")?);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let manifest = if cfg.video_mode {
        gen_video_dataset(
            cfg.n_clips,
            (cfg.split_train, cfg.split_val, cfg.split_test),
            cfg.seed,
            &out,
            &cfg.synth(),
        )?
    } else {
        gen_dataset(
            cfg.n_samples,
            (cfg.split_train, cfg.split_val, cfg.split_test),
            cfg.seed,
            &out,
            &cfg.synth(),
        )?
    };
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train(raw: &[String]) -> Result<()> {
    let args = Args::parse(
        raw,
        &["--data", "--out", "--config", "--seed", "--resume", "--set"],
        &[],
    )?;
    let cfg = build_config(&args)?;
    let data = PathBuf::from(args.require("--data")?);
    let out = PathBuf::from(args.require("--out")?);
    let resume = args.get("--resume").map(PathBuf::from);
    let outcome = trainer::train_with_progress(&cfg, &data, &out, resume.as_deref(), |log| {
        println!(
            "epoch {:3}  train_loss {:.5}  val_overall_iou {:.4}  val_mean_iou {:.4}  lr {:.6}",
            log.epoch, log.train_loss, log.val_overall_iou, log.val_mean_iou, log.lr
        );
        let _ = std::io::Write::flush(&mut std::io::stdout());
    })?;
    println!(
        "best val overall IoU {:.4} at epoch {}; checkpoints: {} / {}",
        outcome.best_val_overall,
        outcome.best_epoch,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(raw: &[String]) -> Result<()> {
    let args = Args::parse(
        raw,
        &[
            "--ckpt", "--data", "--out", "--split", "--config", "--seed", "--vocab", "--set",
        ],
        &[],
    )?;
    let cfg = build_config(&args)?;
    let ckpt = PathBuf::from(args.require("--ckpt")?);
    let data = PathBuf::from(args.require("--data")?);
    let out = PathBuf::from(args.require("--out")?);
    let split_name = args.get("--split").unwrap_or("val");
    let split = Split::parse(split_name)
        .ok_or_else(|| Error::Usage(format!("unknown split '{split_name}'")))?;
    let vocab = load_vocab_for(&args, &ckpt)?;
    let model = trainer::load_model(&cfg, &ckpt, &vocab)?;
    let report = trainer::evaluate(&model, &vocab, &data, split, Some(&out))?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_infer(raw: &[String]) -> Result<()> {
    let args = Args::parse(
        raw,
        &[
            "--ckpt", "--image", "--frames", "--expr", "--out", "--config", "--seed", "--vocab",
            "--set",
        ],
        &["--prob"],
    )?;
    let cfg = build_config(&args)?;
    let ckpt = PathBuf::from(args.require("--ckpt")?);
    let expr = args.require("--expr")?.to_string();
    let out = PathBuf::from(args.require("--out")?);
    let vocab = load_vocab_for(&args, &ckpt)?;
    let model = trainer::load_model(&cfg, &ckpt, &vocab)?;
    match (args.get("--image"), args.get("--frames")) {
        (Some(image), None) => {
            trainer::infer_image(
                &model,
                &vocab,
                Path::new(image),
                &expr,
                &out,
                args.has("--prob"),
            )?;
        }
        (None, Some(frames)) => {
            if !model.config.video_mode {
                return Err(Error::Usage(
                    "--frames requires a video-mode model (video_mode=true)".into(),
                ));
            }
            trainer::infer_video(
                &model,
                &vocab,
                Path::new(frames),
                &expr,
                &out,
                args.has("--prob"),
            )?;
        }
        _ => {
            return Err(Error::Usage(
                "exactly one of --image or --frames is required".into(),
            ))
        }
    }
    println!("wrote masks under {}", out.display());
    Ok(())
}

fn cmd_viz_attn(raw: &[String]) -> Result<()> {
    let args = Args::parse(
        raw,
        &[
            "--ckpt", "--image", "--expr", "--out", "--config", "--seed", "--vocab", "--set",
        ],
        &[],
    )?;
    let cfg = build_config(&args)?;
    let ckpt = PathBuf::from(args.require("--ckpt")?);
    let image = PathBuf::from(args.require("--image")?);
    let expr = args.require("--expr")?.to_string();
    let out = PathBuf::from(args.require("--out")?);
    let vocab = load_vocab_for(&args, &ckpt)?;
    let model = trainer::load_model(&cfg, &ckpt, &vocab)?;
    trainer::viz_attention(&model, &vocab, &image, &expr, &out)?;
    println!(
        "wrote {} and {}",
        out.join("word_attention.csv").display(),
        out.join("heatmap.pgm").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(1);
    };
    let rest = &argv[1..];
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "infer" => cmd_infer(rest),
        "viz-attn" => cmd_viz_attn(rest),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => Err(Error::Usage(format!("unknown command '{other}'"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
