//! Multi-level convolutional image encoder.
//!
//! A stem of three stride-2 3x3 convolutions brings the input to 1/8
//! resolution; three blocks of two 3x3 convolutions (dilation 1, 2 and 4)
//! then produce feature maps V1, V2, V3 that all share the same spatial
//! size. Each convolution is followed by a per-channel affine and ReLU.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ratio of input resolution to feature-map resolution.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel widths of the three feature levels (C_v1 <= C_v2 <= C_v3).
    pub channels: (usize, usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            channels: (32, 64, 96),
        }
    }
}

/// One conv + per-channel affine + ReLU.
pub struct ConvUnit {
    kernel: ParamId,
    scale: ParamId,
    bias: ParamId,
    stride: usize,
    dilation: usize,
}

impl ConvUnit {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = cin * 9;
        let kernel = store.add(
            &format!("{name}.kernel"),
            Tensor::kaiming_uniform(&[cout, cin, 3, 3], fan_in, rng),
        );
        let scale = store.add(
            &format!("{name}.scale"),
            Tensor::full(&[cout, 1, 1], T::one()),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout, 1, 1]));
        ConvUnit {
            kernel,
            scale,
            bias,
            stride,
            dilation,
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, pv[self.kernel.index()], self.stride, self.dilation)?;
        let y = g.mul(y, pv[self.scale.index()])?;
        let y = g.add(y, pv[self.bias.index()])?;
        g.relu(y)
    }
}

pub struct EncoderParams {
    stem: Vec<ConvUnit>,
    blocks: [Vec<ConvUnit>; 3],
    pub config: EncoderConfig,
}

impl EncoderParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig, rng: &mut Rng) -> Self {
        let (c1, c2, c3) = cfg.channels;
        let stem = vec![
            ConvUnit::init(store, rng, "enc.stem0", cfg.in_channels, c1, 2, 1),
            ConvUnit::init(store, rng, "enc.stem1", c1, c1, 2, 1),
            ConvUnit::init(store, rng, "enc.stem2", c1, c1, 2, 1),
        ];
        let block1 = vec![
            ConvUnit::init(store, rng, "enc.b1c0", c1, c1, 1, 1),
            ConvUnit::init(store, rng, "enc.b1c1", c1, c1, 1, 1),
        ];
        let block2 = vec![
            ConvUnit::init(store, rng, "enc.b2c0", c1, c2, 1, 2),
            ConvUnit::init(store, rng, "enc.b2c1", c2, c2, 1, 2),
        ];
        let block3 = vec![
            ConvUnit::init(store, rng, "enc.b3c0", c2, c3, 1, 4),
            ConvUnit::init(store, rng, "enc.b3c1", c3, c3, 1, 4),
        ];
        EncoderParams {
            stem,
            blocks: [block1, block2, block3],
            config: cfg,
        }
    }

    /// Encode an image [C_in, H, W] into (V1, V2, V3), each [C_vi, H/8, W/8].
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        img: Var,
    ) -> Result<(Var, Var, Var)> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::Input(format!(
                "encoder expects [{}, H, W], got {:?}",
                self.config.in_channels, s
            )));
        }
        if s[1] % OUTPUT_STRIDE != 0 || s[2] % OUTPUT_STRIDE != 0 {
            return Err(Error::Input(format!(
                "image dims {}x{} must be multiples of the output stride {}",
                s[1], s[2], OUTPUT_STRIDE
            )));
        }
        let mut x = img;
        for unit in &self.stem {
            x = unit.apply(g, pv, x)?;
        }
        let mut levels = Vec::with_capacity(3);
        for block in &self.blocks {
            for unit in block {
                x = unit.apply(g, pv, x)?;
            }
            levels.push(x);
        }
        Ok((levels[0], levels[1], levels[2]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session<T: Scalar>(store: &ParamStore<T>, g: &mut Graph<T>, train: bool) -> Vec<Var> {
        store
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), train))
            .collect()
    }

    #[test]
    fn levels_share_spatial_dims() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(1);
        let cfg = EncoderConfig {
            in_channels: 3,
            channels: (4, 6, 8),
        };
        let enc = EncoderParams::init(&mut store, cfg, &mut rng);
        let mut g = Graph::<f32>::new();
        let pv = session(&store, &mut g, false);
        let img = g.constant(Tensor::rand_uniform(&[3, 64, 64], 0.0, 1.0, &mut rng));
        let (v1, v2, v3) = enc.encode(&mut g, &pv, img).unwrap();
        assert_eq!(g.shape(v1), &[4, 8, 8]);
        assert_eq!(g.shape(v2), &[6, 8, 8]);
        assert_eq!(g.shape(v3), &[8, 8, 8]);
    }

    #[test]
    fn paper_resolution_gives_forty_by_forty() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(2);
        let cfg = EncoderConfig {
            in_channels: 3,
            channels: (2, 2, 2),
        };
        let enc = EncoderParams::init(&mut store, cfg, &mut rng);
        let mut g = Graph::<f32>::new();
        let pv = session(&store, &mut g, false);
        let img = g.constant(Tensor::zeros(&[3, 320, 320]));
        let (v1, _, v3) = enc.encode(&mut g, &pv, img).unwrap();
        assert_eq!(g.shape(v1), &[2, 40, 40]);
        assert_eq!(g.shape(v3), &[2, 40, 40]);
    }

    #[test]
    fn zero_image_stays_finite() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(3);
        let cfg = EncoderConfig {
            in_channels: 3,
            channels: (4, 4, 4),
        };
        let enc = EncoderParams::init(&mut store, cfg, &mut rng);
        let mut g = Graph::<f32>::new();
        let pv = session(&store, &mut g, false);
        let img = g.constant(Tensor::zeros(&[3, 16, 16]));
        let (v1, v2, v3) = enc.encode(&mut g, &pv, img).unwrap();
        for v in [v1, v2, v3] {
            g.value(v).check_finite("encoder output").unwrap();
        }
    }

    #[test]
    fn non_multiple_dims_are_input_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(4);
        let enc = EncoderParams::init(
            &mut store,
            EncoderConfig {
                in_channels: 3,
                channels: (2, 2, 2),
            },
            &mut rng,
        );
        let mut g = Graph::<f32>::new();
        let pv = session(&store, &mut g, false);
        let img = g.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(enc.encode(&mut g, &pv, img).is_err());
    }

    #[test]
    fn gradient_flows_from_every_level_to_the_image() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(5);
        let cfg = EncoderConfig {
            in_channels: 2,
            channels: (2, 3, 3),
        };
        let enc = EncoderParams::init(&mut store, cfg, &mut rng);
        let img = Tensor::<f64>::rand_uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
        let err = crate::gradcheck::check_gradients(&[img], 1e-5, |g, vars| {
            let pv: Vec<Var> = store
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), false))
                .collect();
            let (v1, v2, v3) = enc.encode(g, &pv, vars[0])?;
            let s1 = g.sum_all(v1)?;
            let s2 = g.sum_all(v2)?;
            let s3 = g.sum_all(v3)?;
            let t = g.add(s1, s2)?;
            g.add(t, s3)
        })
        .unwrap();
        assert!(err < 1e-3, "encoder fd error {err}");
    }
}
