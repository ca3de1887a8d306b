//! Shared 3-D convolutional feature generator.
//!
//! Each block is `conv3d -> bias -> relu`, with the downsampling folded into
//! the convolution stride. The pooled output of the last block is the video
//! feature `f`; the raw output of block `high_block` is the high-level map
//! `f_h` consumed by the correlation module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input extents `[C, T, H, W]`.
    pub input: [usize; 4],
    pub channels: Vec<usize>,
    /// Per-block `[t, h, w]` strides.
    pub strides: Vec<[usize; 3]>,
    pub kernel: usize,
    /// Zero-based index of the block whose output is `f_h`.
    pub high_block: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: [3, 8, 32, 32],
            channels: vec![16, 32, 64],
            strides: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2]],
            kernel: 3,
            high_block: 1,
        }
    }
}

impl EncoderConfig {
    fn geometry(&self, block: usize) -> ConvGeometry {
        ConvGeometry {
            stride: self.strides[block],
            padding: [self.kernel / 2; 3],
        }
    }

    /// Output extents `[C, T, H, W]` of every block.
    pub fn block_dims(&self) -> Result<Vec<[usize; 4]>> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::usage(format!(
                "encoder needs one stride per block: {} channels, {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::usage(format!(
                "encoder kernel must be odd, got {}",
                self.kernel
            )));
        }
        let mut ext = [self.input[1], self.input[2], self.input[3]];
        let mut out = Vec::with_capacity(self.channels.len());
        for (b, &c) in self.channels.iter().enumerate() {
            let geom = self.geometry(b);
            for axis in 0..3 {
                let span = ext[axis] + 2 * geom.padding[axis];
                if geom.stride[axis] == 0 || span < self.kernel {
                    return Err(Error::usage(format!(
                        "encoder block {b} has no output on axis {axis}"
                    )));
                }
                ext[axis] = (span - self.kernel) / geom.stride[axis] + 1;
            }
            out.push([c, ext[0], ext[1], ext[2]]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.block_dims()?;
        if self.high_block >= dims.len() {
            return Err(Error::usage(format!(
                "high_block {} out of range for {} blocks",
                self.high_block,
                dims.len()
            )));
        }
        let [_, t, h, w] = dims[self.high_block];
        if t < 2 || h < 2 || w < 2 {
            return Err(Error::usage(format!(
                "high-level map {t}x{h}x{w} is too small for a correlation matrix"
            )));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.channels.last().expect("validated encoder has blocks")
    }

    pub fn high_dims(&self) -> Result<[usize; 4]> {
        self.validate()?;
        Ok(self.block_dims()?[self.high_block])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
}

pub struct EncoderVars {
    pub blocks: Vec<(Var, Var)>,
}

pub struct Encoded {
    pub feature: Var,
    pub high: Var,
}

pub(crate) fn uniform_init(rng: &mut impl Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

/// Variance-preserving bound `sqrt(6 / fan_in)` for weights feeding a ReLU.
pub(crate) fn he_uniform_init(rng: &mut impl Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut in_c = config.input[0];
        let mut blocks = Vec::new();
        for &c in &config.channels {
            let fan_in = in_c * k * k * k;
            blocks.push(ConvBlock {
                weight: he_uniform_init(rng, &[c, in_c, k, k, k], fan_in),
                bias: uniform_init(rng, &[c], fan_in),
            });
            in_c = c;
        }
        Ok(Self { config, blocks })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight, &b.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                [
                    format!("encoder.block{i}.weight"),
                    format!("encoder.block{i}.bias"),
                ]
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (
                        g.leaf(b.weight.clone(), trainable),
                        g.leaf(b.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Inverse of [`EncoderVars::all`].
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || vars.len() % 2 != 0 {
            return Err(Error::usage(format!(
                "encoder needs weight/bias pairs, got {} vars",
                vars.len()
            )));
        }
        Ok(Self {
            blocks: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        })
    }
}

/// Runs the encoder on one `C×T×H×W` video already placed on the graph.
pub fn encode(
    g: &mut Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    video: Var,
) -> Result<Encoded> {
    if g.dims(video) != config.input {
        return Err(Error::shape(
            "encode",
            format!("expected input {:?}, got {:?}", config.input, g.dims(video)),
        ));
    }
    let mut x = video;
    let mut high = None;
    for (b, &(w, bias)) in vars.blocks.iter().enumerate() {
        let y = g.conv3d(x, w, config.geometry(b))?;
        let y = g.add_channel_bias(y, bias)?;
        x = g.relu(y)?;
        if b == config.high_block {
            high = Some(x);
        }
    }
    let feature = g.spatial_mean(x)?;
    Ok(Encoded {
        feature,
        high: high.ok_or_else(|| Error::usage("high_block beyond encoder depth"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let dims = cfg.block_dims().unwrap();
        assert_eq!(dims, vec![[16, 8, 16, 16], [32, 4, 8, 8], [64, 2, 4, 4]]);
        assert_eq!(cfg.high_dims().unwrap(), [32, 4, 8, 8]);

        let params = EncoderParams::init(cfg.clone(), &mut rng_for(1, "init", 0)).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let v = g.constant(Tensor::full(&[3, 8, 32, 32], 0.3));
        let out = encode(&mut g, &vars, &cfg, v).unwrap();
        assert_eq!(g.dims(out.feature), &[64]);
        assert_eq!(g.dims(out.high), &[32, 4, 8, 8]);
    }

    #[test]
    fn rejects_wrong_input_and_tiny_high_map() {
        let cfg = EncoderConfig::default();
        let params = EncoderParams::init(cfg.clone(), &mut rng_for(1, "init", 0)).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let v = g.constant(Tensor::zeros(&[3, 8, 16, 16]));
        assert!(matches!(
            encode(&mut g, &vars, &cfg, v),
            Err(Error::Shape { .. })
        ));

        let deeper = EncoderConfig {
            high_block: 2,
            ..EncoderConfig::default()
        };
        assert!(deeper.validate().is_ok());
        let worse = EncoderConfig {
            input: [3, 2, 8, 8],
            ..EncoderConfig::default()
        };
        assert!(worse.validate().is_err());
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let cfg = EncoderConfig::default();
        let params = EncoderParams::init(cfg.clone(), &mut rng_for(3, "init", 0)).unwrap();
        let video = Tensor::from_fn(&[3, 8, 32, 32], |i| ((i * 7919) % 101) as f64 / 101.0);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let a = g.constant(video.clone());
        let b = g.constant(video);
        let ea = encode(&mut g, &vars, &cfg, a).unwrap();
        let eb = encode(&mut g, &vars, &cfg, b).unwrap();
        assert_eq!(g.value(ea.feature), g.value(eb.feature));
        assert_eq!(g.value(ea.high), g.value(eb.high));
    }
}
