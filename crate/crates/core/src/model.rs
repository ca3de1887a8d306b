//! The full network: shared encoder, correlation module and heads, with a
//! flat parameter view for the optimizer and a directory dump format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_vector, pcm, CorrParams, CorrVars, PixelCorrelationMatrix};
use crate::data::tensor_io::{read_tensor, write_tensor};
use crate::data::DatasetStats;
use crate::encoder::{encode, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::heads::{classify, HeadParams, HeadVars};
use crate::seed::rng_for;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Width `C'` of the θ/φ/g projections; `None` means half of `C_h`.
    pub corr_latent: Option<usize>,
    pub disc_hidden: usize,
    /// Fixed per-channel standardization applied to every clip before the
    /// encoder.
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 6,
            corr_latent: None,
            disc_hidden: 64,
            input_norm: None,
        }
    }
}

/// `x ↦ (x − mean[c]) / std[c]` per input channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn from_stats(stats: &DatasetStats) -> Result<Self> {
        if stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::usage(format!(
                "cannot standardize channels with std {:?}",
                stats.std
            )));
        }
        Ok(Self {
            mean: stats.mean.clone(),
            std: stats.std.clone(),
        })
    }

    pub fn apply(&self, video: &Tensor) -> Result<Tensor> {
        let c = video.dims()[0];
        if c != self.mean.len() || c != self.std.len() {
            return Err(Error::shape(
                "input_norm",
                format!("{c} channels, norm covers {}", self.mean.len()),
            ));
        }
        let per = video.len() / c;
        let data = video
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i / per]) / self.std[i / per])
            .collect();
        Tensor::new(video.dims().to_vec(), data)
    }
}

impl ModelConfig {
    pub fn high_channels(&self) -> Result<usize> {
        Ok(self.encoder.high_dims()?[0])
    }

    pub fn latent(&self) -> Result<usize> {
        let ch = self.high_channels()?;
        Ok(self.corr_latent.unwrap_or((ch / 2).max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::usage(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.latent()? == 0 || self.disc_hidden == 0 {
            return Err(Error::usage(
                "correlation latent and discriminator hidden widths must be >= 1",
            ));
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != self.encoder.input[0]
                || n.std.len() != self.encoder.input[0]
                || n.std.iter().any(|&s| !(s > 0.0))
            {
                return Err(Error::usage(format!("invalid input standardization {n:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub corr: CorrParams,
    pub heads: HeadParams,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub corr: CorrVars,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Same order as [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.encoder.all();
        out.extend(self.corr.all());
        out.extend(self.heads.all());
        out
    }

    /// Regroups a flat list laid out like [`ModelVars::all`] for a network
    /// with `blocks` encoder blocks.
    pub fn from_slice(vars: &[Var], blocks: usize) -> Result<Self> {
        let e = 2 * blocks;
        if vars.len() != e + 13 {
            return Err(Error::usage(format!(
                "expected {} vars, got {}",
                e + 13,
                vars.len()
            )));
        }
        Ok(Self {
            encoder: EncoderVars::from_slice(&vars[..e])?,
            corr: CorrVars::from_slice(&vars[e..e + 3])?,
            heads: HeadVars::from_slice(&vars[e + 3..])?,
        })
    }
}

/// Forward products of one video.
#[derive(Clone, Copy, Debug)]
pub struct VideoForward {
    pub f: Var,
    pub f_h: Var,
    pub pcm: PixelCorrelationMatrix,
    pub f_c: Var,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(
            config.encoder.clone(),
            &mut rng_for(seed, "init/encoder", 0),
        )?;
        let latent = config.latent()?;
        let corr = CorrParams::init(
            config.high_channels()?,
            latent,
            &mut rng_for(seed, "init/correlation", 0),
        )?;
        let heads = HeadParams::init(
            config.encoder.feature_width(),
            latent,
            config.num_classes,
            config.disc_hidden,
            &mut rng_for(seed, "init/heads", 0),
        );
        Ok(Self {
            config,
            encoder,
            corr,
            heads,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.corr.tensors());
        out.extend(self.heads.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.corr.tensors_mut());
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = self.encoder.names();
        out.extend(self.corr.names());
        out.extend(self.heads.names());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The clip as the encoder sees it.
    pub fn prepare(&self, video: &Tensor) -> Result<Tensor> {
        match &self.config.input_norm {
            Some(n) => n.apply(video),
            None => Ok(video.clone()),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, trainable),
            corr: self.corr.bind(g, trainable),
            heads: self.heads.bind(g, trainable),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (name, t) in self.names().into_iter().zip(self.tensors()) {
            let file = format!("{name}.actn");
            write_tensor(dir.join(&file), t)?;
            files.push(ParamEntry { name, file });
        }
        let manifest = ParamManifest {
            config: self.config.clone(),
            tensors: files,
        };
        let path = dir.join(PARAM_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(PARAM_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            field: "params.json",
            detail: e.to_string(),
        })?;
        let mut params = Self::init(manifest.config, 0)?;
        let names = params.names();
        if names.len() != manifest.tensors.len() {
            return Err(Error::Parse {
                path,
                field: "tensors",
                detail: format!(
                    "expected {} tensors, manifest lists {}",
                    names.len(),
                    manifest.tensors.len()
                ),
            });
        }
        for ((slot, name), entry) in params
            .tensors_mut()
            .into_iter()
            .zip(&names)
            .zip(&manifest.tensors)
        {
            if &entry.name != name {
                return Err(Error::Parse {
                    path: path.clone(),
                    field: "tensors",
                    detail: format!("expected {name}, found {}", entry.name),
                });
            }
            let t = read_tensor(dir.join(&entry.file))?;
            if t.dims() != slot.dims() {
                return Err(Error::shape(
                    "load",
                    format!(
                        "{name}: file has {:?}, model needs {:?}",
                        t.dims(),
                        slot.dims()
                    ),
                ));
            }
            *slot = t;
        }
        Ok(params)
    }
}

pub const PARAM_MANIFEST: &str = "params.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamManifest {
    config: ModelConfig,
    tensors: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
}

pub fn forward_video(
    g: &mut Graph,
    vars: &ModelVars,
    config: &ModelConfig,
    video: Var,
) -> Result<VideoForward> {
    let enc = encode(g, &vars.encoder, &config.encoder, video)?;
    let m = pcm(g, enc.high, &vars.corr)?;
    let f_c = correlation_vector(g, enc.high, &m, &vars.corr)?;
    Ok(VideoForward {
        f: enc.feature,
        f_h: enc.high,
        pcm: m,
        f_c,
    })
}

/// Plain values of a single video's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub f: Tensor,
    pub f_c: Tensor,
    pub pcm: Tensor,
    pub probs: Tensor,
}

pub fn features(params: &ModelParams, video: &Tensor) -> Result<Features> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let v = g.constant(params.prepare(video)?);
    let fw = forward_video(&mut g, &vars, &params.config, v)?;
    let probs = classify(&mut g, &vars.heads, &[fw.f], &[fw.f_c])?;
    let n = params.config.num_classes;
    Ok(Features {
        f: g.value(fw.f).clone(),
        f_c: g.value(fw.f_c).clone(),
        pcm: g.value(fw.pcm.var).clone(),
        probs: g.value(probs).clone().reshape(&[n])?,
    })
}

/// Class probabilities for one video.
pub fn predict(params: &ModelParams, video: &Tensor) -> Result<Tensor> {
    Ok(features(params, video)?.probs)
}
