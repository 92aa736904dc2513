// Diagnostic: compare prediction area/position vs ground truth per category.
use cmsa_core::config::Config;
use cmsa_core::data::{load_image_sample, Manifest};
use cmsa_core::fusion::binarize;
use cmsa_core::lang::{tokenize, Vocabulary};
use cmsa_core::metrics::iou;
use cmsa_core::model::Session;
use cmsa_core::synth::Split;
use cmsa_core::trainer::load_model;
use std::path::Path;

fn main() {
    let run = std::env::args().nth(1).unwrap();
    let data = std::env::args().nth(2).unwrap();
    let mut cfg = Config::default();
    let args: Vec<String> = std::env::args().collect();
    let sets = args.get(3).cloned().unwrap_or_default();
    for (k, v) in [("c_v1","16"),("c_v2","24"),("c_v3","32"),("c_l","24"),("d_k","32"),("d_f","48")] {
        cfg.set(k, v).unwrap();
    }
    cfg.set("seed", "1").unwrap();
    for pair in sets.split(',') { if let Some((k,v)) = pair.split_once('=') { cfg.set(k, v).unwrap(); } }
    cfg.validate().unwrap();
    let vocab = Vocabulary::load(Path::new(&run).join("vocab.txt").as_path()).unwrap();
    let model = load_model(&cfg, Path::new(&run).join("best.ckpt").as_path(), &vocab).unwrap();
    let manifest = Manifest::load(Path::new(&data)).unwrap();
    let mut by_kind: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for entry in manifest.split(Split::Val).iter().take(120) {
        let s = load_image_sample::<f32>(entry).unwrap();
        let tokens = tokenize(&s.expression, &vocab, cfg.n_max).unwrap();
        let mut sess = Session::new(&model, false);
        let img = sess.graph.constant(s.image.clone());
        let out = model.forward_image(&mut sess, img, &tokens).unwrap();
        let pred = binarize(sess.graph.value(out.prob), 0.5).unwrap();
        let v = iou(&pred, &s.mask).unwrap();
        let kind = if s.expression.contains("left of") { "left-of" }
            else if s.expression.contains("leftmost") { "leftmost" }
            else if s.expression.contains("right") { "on-right" }
            else if s.expression.contains("small") || s.expression.contains("large") { "size-attr" }
            else { "color-shape" };
        let e = by_kind.entry(kind.to_string()).or_insert((0.0, 0));
        e.0 += v; e.1 += 1;
        let pred_area: f64 = pred.data().iter().map(|&x| x as f64).sum();
        let gt_area: f64 = s.mask.data().iter().map(|&x| x as f64).sum();
        if e.1 <= 3 {
            println!("{kind:11} iou {v:.3} pred_area {pred_area:5.0} gt_area {gt_area:5.0}  '{}'", s.expression);
        }
    }
    println!("--- mean IoU by expression kind ---");
    for (k, (sum, n)) in by_kind {
        println!("{k:11} {:.3}  (n={n})", sum / n as f64);
    }
}
