// quick step-time breakdown
use cmsa_core::config::Config;
use cmsa_core::lang::{tokenize, Vocabulary};
use cmsa_core::model::{Model, Session};
use cmsa_core::rng::Rng;
use cmsa_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    for (k, v) in [("c_v1","16"),("c_v2","24"),("c_v3","32"),("c_l","24"),("d_k","32"),("d_f","48")] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let vocab = Vocabulary::from_tokens(cmsa_core::synth::template_vocabulary());
    let model: Model<f32> = Model::init(&cfg, vocab.len()).unwrap();
    let tokens = tokenize("red circle left of blue square", &vocab, cfg.n_max).unwrap();
    let mut rng = Rng::new(7);
    let img_t = Tensor::<f32>::rand_uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let mask_t = Tensor::<f32>::zeros(&[64, 64]);

    // forward only
    let t0 = Instant::now();
    let reps = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(50);
    for _ in 0..reps {
        let mut sess = Session::new(&model, false);
        let img = sess.graph.constant(img_t.clone());
        let out = model.forward_image(&mut sess, img, &tokens).unwrap();
        std::hint::black_box(sess.graph.value(out.prob).data()[0]);
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut sess = Session::new(&model, true);
        let img = sess.graph.constant(img_t.clone());
        let out = model.forward_image(&mut sess, img, &tokens).unwrap();
        let y = sess.graph.constant(mask_t.clone());
        let loss = sess.graph.bce_loss(out.prob, y).unwrap();
        sess.graph.backward(loss).unwrap();
        std::hint::black_box(sess.grads().len());
    }
    println!("fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // raw matmul throughput probe
    let a = Tensor::<f32>::rand_uniform(&[192, 192], -1.0, 1.0, &mut rng);
    let b = Tensor::<f32>::rand_uniform(&[192, 64], -1.0, 1.0, &mut rng);
    let t0 = Instant::now();
    let n = 50;
    for _ in 0..n {
        let mut g = cmsa_core::graph::Graph::<f32>::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        std::hint::black_box(g.value(c).data()[0]);
    }
    let macs = 192.0*192.0*64.0*n as f64;
    println!("matmul 192x192x64: {:.2} GMAC/s", macs/t0.elapsed().as_secs_f64()/1e9);
}
