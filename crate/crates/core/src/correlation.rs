//! Correlation extraction: the pixel correlation matrix (PCM) over all
//! spatiotemporal positions of `f_h`, the pooled correlation feature vector,
//! and the Gram-matrix covariance diagnostic.

use rand::Rng;

use crate::encoder::uniform_init;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Bias-free `1×1×1` projections from `C_h` to `C'` channels, stored as
/// `C'×C_h` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrParams {
    pub theta: Tensor,
    pub phi: Tensor,
    pub g: Tensor,
}

pub struct CorrVars {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
}

/// Row-stochastic `N_M×N_M` matrix; row `p` distributes position `p`'s
/// attention over every position `q`.
#[derive(Clone, Copy, Debug)]
pub struct PixelCorrelationMatrix {
    pub var: Var,
    pub source_dims: [usize; 3],
}

impl PixelCorrelationMatrix {
    pub fn positions(&self) -> usize {
        self.source_dims.iter().product()
    }

    pub fn values<'g>(&self, g: &'g Graph) -> &'g Tensor {
        g.value(self.var)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GramMatrix {
    pub var: Var,
}

impl CorrParams {
    pub fn init(high_channels: usize, latent: usize, rng: &mut impl Rng) -> Result<Self> {
        if latent == 0 {
            return Err(Error::usage("correlation latent width must be >= 1"));
        }
        let dims = [latent, high_channels];
        Ok(Self {
            theta: uniform_init(rng, &dims, high_channels),
            phi: uniform_init(rng, &dims, high_channels),
            g: uniform_init(rng, &dims, high_channels),
        })
    }

    pub fn latent(&self) -> usize {
        self.theta.dims()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.theta, &self.phi, &self.g]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.theta, &mut self.phi, &mut self.g]
    }

    pub fn names(&self) -> Vec<String> {
        ["theta", "phi", "g"]
            .iter()
            .map(|n| format!("correlation.{n}"))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> CorrVars {
        CorrVars {
            theta: g.leaf(self.theta.clone(), trainable),
            phi: g.leaf(self.phi.clone(), trainable),
            g: g.leaf(self.g.clone(), trainable),
        }
    }
}

impl CorrVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.theta, self.phi, self.g]
    }

    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        match *vars {
            [theta, phi, g] => Ok(Self { theta, phi, g }),
            _ => Err(Error::usage(format!(
                "correlation module has 3 projections, got {} vars",
                vars.len()
            ))),
        }
    }
}

fn flatten_high(g: &mut Graph, f_h: Var) -> Result<(Var, [usize; 3])> {
    let dims = g.dims(f_h).to_vec();
    let [c, t, h, w] = <[usize; 4]>::try_from(dims.as_slice())
        .map_err(|_| Error::shape("pcm", format!("f_h must be C×T×H×W, got {dims:?}")))?;
    Ok((g.reshape(f_h, &[c, t * h * w])?, [t, h, w]))
}

pub fn pcm(g: &mut Graph, f_h: Var, p: &CorrVars) -> Result<PixelCorrelationMatrix> {
    let (flat, source_dims) = flatten_high(g, f_h)?;
    let theta = g.matmul(p.theta, flat)?;
    let phi = g.matmul(p.phi, flat)?;
    let theta_t = g.transpose(theta)?;
    let logits = g.matmul(theta_t, phi)?;
    let var = g.softmax_rows(logits)?;
    Ok(PixelCorrelationMatrix { var, source_dims })
}

/// `f_c`: every position's PCM-weighted mix of the `g`-projected features,
/// averaged over positions.
pub fn correlation_vector(
    g: &mut Graph,
    f_h: Var,
    m: &PixelCorrelationMatrix,
    p: &CorrVars,
) -> Result<Var> {
    let (flat, dims) = flatten_high(g, f_h)?;
    let n: usize = dims.iter().product();
    if dims != m.source_dims || g.dims(m.var) != [n, n] {
        return Err(Error::shape(
            "correlation_vector",
            format!(
                "PCM {:?} from {:?} does not match f_h positions {:?}",
                g.dims(m.var),
                m.source_dims,
                dims
            ),
        ));
    }
    let projected = g.matmul(p.g, flat)?;
    let m_t = g.transpose(m.var)?;
    let mixed = g.matmul(projected, m_t)?;
    g.spatial_mean(mixed)
}

pub fn gram(g: &mut Graph, m: &PixelCorrelationMatrix) -> Result<GramMatrix> {
    let m_t = g.transpose(m.var)?;
    Ok(GramMatrix {
        var: g.matmul(m_t, m.var)?,
    })
}

fn mean_of(g: &mut Graph, grams: &[GramMatrix]) -> Result<Var> {
    let mut acc = grams[0].var;
    for gm in &grams[1..] {
        acc = g.add(acc, gm.var)?;
    }
    g.scale(acc, 1.0 / grams.len() as f64)
}

/// Squared Frobenius distance between the mean source and mean target Gram
/// matrices.
pub fn video_covariance_loss(
    g: &mut Graph,
    grams_s: &[GramMatrix],
    grams_t: &[GramMatrix],
) -> Result<Var> {
    if grams_s.is_empty() || grams_t.is_empty() {
        return Err(Error::usage(
            "video covariance loss needs non-empty Gram lists",
        ));
    }
    let ms = mean_of(g, grams_s)?;
    let mt = mean_of(g, grams_t)?;
    let diff = g.sub(ms, mt)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}
