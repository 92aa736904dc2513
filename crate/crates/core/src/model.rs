//! Full referring-segmentation model: encoder, embeddings, the per-level
//! attention blocks, the fusion head, and the video extension.

use crate::cfsa::{cfsa_forward, CfsaConfig, CfsaParams};
use crate::cmsa::{cmsa_forward, no_attention_forward, CmsaConfig, CmsaParams};
use crate::config::Config;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{
    compute_gates, fused_sum, gated_fuse, predict_mask_from_sum, FusionConfig, FusionParams,
};
use crate::graph::{Graph, Var};
use crate::lang::{spatial_coords, TokenSequence, WordEmbedding};
use crate::optim::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub embedding: WordEmbedding,
    pub cmsa: [CmsaParams; 3],
    pub cmsa_cfg: CmsaConfig,
    pub cfsa: CfsaParams,
    pub cfsa_cfg: CfsaConfig,
    pub fusion: FusionParams,
    pub config: Config,
}

impl<T: Scalar> Model<T> {
    /// Initialize all parameters from the config's seed.
    pub fn init(config: &Config, vocab_size: usize) -> Result<Model<T>> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0x0de1, 0);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(
            &mut store,
            EncoderConfig {
                in_channels: 3,
                channels: (config.c_v1, config.c_v2, config.c_v3),
            },
            &mut rng,
        );
        let embedding = WordEmbedding::init(&mut store, vocab_size, config.c_l, &mut rng);
        let channels = [config.c_v1, config.c_v2, config.c_v3];
        let cmsa_cfg = CmsaConfig {
            d_k: config.d_k,
            scaled: config.scaled_attention,
        };
        let cmsa = [0, 1, 2].map(|i| {
            CmsaParams::init(
                &mut store,
                &format!("cmsa{}", i + 1),
                channels[i] + config.c_l + 8,
                config.d_k,
                &mut rng,
            )
        });
        let cfsa_cfg = CfsaConfig {
            d_k: config.d_k,
            tau: config.tau,
            scaled: config.scaled_attention,
        };
        let cfsa = CfsaParams::init(&mut store, config.c_v3, config.d_k, &mut rng);
        let fusion = FusionParams::init(
            &mut store,
            channels.map(|c| c + config.c_l + 8),
            FusionConfig { d_f: config.d_f },
            &mut rng,
        );
        Ok(Model {
            store,
            encoder,
            embedding,
            cmsa,
            cmsa_cfg,
            cfsa,
            cfsa_cfg,
            fusion,
            config: config.clone(),
        })
    }

    /// Re-apply structural constraints after an optimizer step.
    pub fn apply_constraints(&mut self) {
        self.embedding.enforce_pad_row(&mut self.store);
    }
}

/// One forward/backward execution context over a model's parameters.
pub struct Session<T: Scalar> {
    pub graph: Graph<T>,
    pub params: Vec<Var>,
}

impl<T: Scalar> Session<T> {
    /// Register every parameter as a graph leaf; `train` enables gradient
    /// tracking.
    pub fn new(model: &Model<T>, train: bool) -> Session<T> {
        let mut graph = Graph::new();
        let params = model
            .store
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), train))
            .collect();
        Session { graph, params }
    }

    /// Collect per-parameter gradients after backward, aligned with the
    /// store's parameter order.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.params
            .iter()
            .map(|&v| self.graph.grad(v).map(|s| s.to_vec()))
            .collect()
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// Probability map [H_img, W_img].
    pub prob: Var,
    /// Per-level word attention over the valid words.
    pub word_attn: [Var; 3],
    /// Final fused feature map [d_f, H, W] before the mask head.
    pub fused_sum: Var,
}

impl<T: Scalar> Model<T> {
    /// Image pipeline from raw image tensor [3, H, W].
    pub fn forward_image(
        &self,
        sess: &mut Session<T>,
        img: Var,
        tokens: &TokenSequence,
    ) -> Result<ForwardOutput> {
        let Session { graph: g, params } = sess;
        let (v1, v2, v3) = self.encoder.encode(g, params, img)?;
        self.forward_from_levels(g, params, [v1, v2, v3], tokens)
    }

    /// Video pipeline: encode every clip frame, run cross-frame attention
    /// on the level-3 features, update the target frame residually, then
    /// run the image pipeline on the target frame's levels.
    pub fn forward_clip(
        &self,
        sess: &mut Session<T>,
        frames: &[Var],
        target_pos: usize,
        tokens: &TokenSequence,
    ) -> Result<ForwardOutput> {
        if frames.is_empty() {
            return Err(Error::Input("empty clip".into()));
        }
        if target_pos >= frames.len() {
            return Err(Error::Usage(format!(
                "target position {target_pos} outside clip of {} frames",
                frames.len()
            )));
        }
        let Session { graph: g, params } = sess;
        let mut level3 = Vec::with_capacity(frames.len());
        let mut target_levels = None;
        for (i, &frame) in frames.iter().enumerate() {
            let (v1, v2, v3) = self.encoder.encode(g, params, frame)?;
            if i == target_pos {
                target_levels = Some((v1, v2));
            }
            level3.push(v3);
        }
        let (v1, v2) = target_levels.expect("target inside clip");
        let v3_updated = cfsa_forward(g, &self.cfsa, &self.cfsa_cfg, params, &level3, target_pos)?;
        self.forward_from_levels(g, params, [v1, v2, v3_updated], tokens)
    }

    fn forward_from_levels(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        levels: [Var; 3],
        tokens: &TokenSequence,
    ) -> Result<ForwardOutput> {
        if tokens.n_real() == 0 {
            return Err(Error::Input("expression has no valid words".into()));
        }
        let shape = g.shape(levels[0]).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let n = tokens.n_real();
        // Only the valid words enter the pipeline; PAD slots would carry
        // zero embeddings and exactly-zero attention columns anyway.
        let e = g.gather_rows(params[self.embedding.table.index()], tokens.valid())?;
        let s = g.constant(spatial_coords::<T>(h, w));
        let word_mask = vec![true; n];

        let mut xs = Vec::with_capacity(3);
        let mut ms = Vec::with_capacity(3);
        let mut rs = Vec::with_capacity(3);
        let mut word_attn = Vec::with_capacity(3);
        for level in 0..3 {
            let (pooled, wa) = if self.config.no_attention {
                let pooled = no_attention_forward(g, levels[level], e, s)?;
                let uniform = g.constant(Tensor::full(&[n], T::from_f64(1.0 / n as f64)));
                (pooled, uniform)
            } else {
                let out = cmsa_forward(
                    g,
                    &self.cmsa[level],
                    &self.cmsa_cfg,
                    params,
                    levels[level],
                    e,
                    s,
                    &word_mask,
                )?;
                (out.pooled, out.word_attn)
            };
            let x = crate::fusion::project_level(g, params, &self.fusion, level, pooled)?;
            let (m, r) = compute_gates(g, params, &self.fusion, level, x)?;
            xs.push(x);
            ms.push(m);
            rs.push(r);
            word_attn.push(wa);
        }
        let gamma = self.fusion.gamma.map(|id| params[id.index()]);
        let fused = gated_fuse(
            g,
            [xs[0], xs[1], xs[2]],
            [ms[0], ms[1], ms[2]],
            [rs[0], rs[1], rs[2]],
            gamma,
        )?;
        let total = fused_sum(g, fused)?;
        let prob = predict_mask_from_sum(
            g,
            params,
            &self.fusion,
            total,
            self.config.image_size,
            self.config.image_size,
        )?;
        Ok(ForwardOutput {
            prob,
            word_attn: [word_attn[0], word_attn[1], word_attn[2]],
            fused_sum: total,
        })
    }
}
