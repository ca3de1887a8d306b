//! Finite-difference verification of every differentiable operation and of
//! the assembled network.
//!
//! Each primitive is reduced to a scalar through a random fixed weighting so
//! that every output element contributes a distinct gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::correlation::{correlation_vector, gram, pcm, video_covariance_loss};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{classify, discriminate, Discriminator};
use crate::losses::{
    classification_loss, coral_loss, domain_loss, mmd_loss, norm_restriction_loss, one_hot, pcd,
    source_class_weights, target_class_weights, SigmaPolicy,
};
use crate::model::{forward_video, ModelConfig, ModelParams, ModelVars};
use crate::seed::derive_seed;
use crate::tensor::{finite_diff_check_many, ConvGeometry, Graph, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of perturbed scalars.
    pub inputs: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    tolerance: f64,
    body: Body,
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of `EPS`.
fn off_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `Σ r ⊙ y` with `r` fixed by `seed`.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(uniform(&mut rng, g.dims(y).to_vec().as_slice(), -1.0, 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn primitive(
    name: &'static str,
    inputs: Vec<Tensor>,
    body: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        tolerance: PRIMITIVE_TOLERANCE,
        body: Box::new(move |g, v| {
            let y = body(g, v)?;
            weighted_sum(g, y, 0xA11CE)
        }),
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/primitives", 0));
    let r = &mut rng;
    let conv_geom = ConvGeometry {
        stride: [1, 2, 2],
        padding: [1, 1, 1],
    };
    vec![
        primitive(
            "matmul",
            vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
            ],
            |g, v| g.matmul(v[0], v[1]),
        ),
        primitive("transpose", vec![uniform(r, &[3, 5], -1.0, 1.0)], |g, v| {
            g.transpose(v[0])
        }),
        primitive("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], |g, v| {
            g.reshape(v[0], &[3, 4])
        }),
        primitive(
            "conv3d",
            vec![
                uniform(r, &[2, 3, 5, 5], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3, 3], -0.5, 0.5),
            ],
            move |g, v| g.conv3d(v[0], v[1], conv_geom),
        ),
        primitive(
            "add_channel_bias",
            vec![
                uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |g, v| g.add_channel_bias(v[0], v[1]),
        ),
        primitive(
            "add_row_bias",
            vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |g, v| g.add_row_bias(v[0], v[1]),
        ),
        primitive(
            "linear",
            vec![
                uniform(r, &[4, 3], -1.0, 1.0),
                uniform(r, &[3, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        primitive(
            "add",
            vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            |g, v| g.add(v[0], v[1]),
        ),
        primitive(
            "sub",
            vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            |g, v| g.sub(v[0], v[1]),
        ),
        primitive(
            "mul",
            vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            |g, v| g.mul(v[0], v[1]),
        ),
        primitive("scale", vec![uniform(r, &[6], -1.0, 1.0)], |g, v| {
            g.scale(v[0], -2.5)
        }),
        primitive("add_scalar", vec![uniform(r, &[6], -1.0, 1.0)], |g, v| {
            g.add_scalar(v[0], 0.75)
        }),
        primitive("relu", vec![off_zero(r, &[12])], |g, v| g.relu(v[0])),
        primitive("exp", vec![uniform(r, &[6], -2.0, 2.0)], |g, v| g.exp(v[0])),
        primitive("ln_clamped", vec![uniform(r, &[6], 0.2, 3.0)], |g, v| {
            g.ln_clamped(v[0], 1e-12)
        }),
        primitive("sqrt", vec![uniform(r, &[6], 0.2, 3.0)], |g, v| {
            g.sqrt(v[0])
        }),
        primitive("square", vec![uniform(r, &[6], -2.0, 2.0)], |g, v| {
            g.square(v[0])
        }),
        primitive("sigmoid", vec![uniform(r, &[6], -3.0, 3.0)], |g, v| {
            g.sigmoid(v[0])
        }),
        primitive(
            "softmax_rows",
            vec![uniform(r, &[3, 5], -2.0, 2.0)],
            |g, v| g.softmax_rows(v[0]),
        ),
        primitive("sum", vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| {
            g.sum(v[0])
        }),
        primitive("mean", vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| {
            g.mean(v[0])
        }),
        primitive(
            "spatial_mean",
            vec![uniform(r, &[3, 2, 2, 3], -1.0, 1.0)],
            |g, v| g.spatial_mean(v[0]),
        ),
        primitive(
            "concat",
            vec![uniform(r, &[3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            |g, v| g.concat(v),
        ),
        primitive(
            "stack_rows",
            vec![uniform(r, &[2, 2], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, v| g.stack_rows(v),
        ),
        primitive(
            "sq_dist_matrix",
            vec![uniform(r, &[4, 3], -1.0, 1.0)],
            |g, v| g.sq_dist_matrix(v[0]),
        ),
    ]
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/losses", 0));
    let r = &mut rng;
    let scalar = |name, inputs, tolerance, body: Body| Case {
        name,
        inputs,
        tolerance,
        body,
    };
    let labels = one_hot(&[0, 2, 1, 2], 3).expect("valid labels");
    let probs: Vec<f64> = uniform(r, &[2, 3], 0.1, 1.0).data().to_vec();
    let pseudo = {
        let rows: Vec<f64> = probs
            .chunks(3)
            .flat_map(|c| {
                let s: f64 = c.iter().sum();
                c.iter().map(move |x| x / s).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![2, 3], rows).expect("2×3")
    };
    let pcm_inputs = |r: &mut ChaCha8Rng| -> Vec<Tensor> {
        (0..4)
            .map(|_| uniform(r, &[2, 1, 2, 2], -1.0, 1.0))
            .collect()
    };
    let proj = uniform(r, &[2, 2], -1.0, 1.0);
    // PCMs from random f_h through fixed projections, so rows stay stochastic
    let pcms_of = move |g: &mut Graph,
                        v: &[Var]|
          -> Result<Vec<crate::correlation::PixelCorrelationMatrix>> {
        let p = crate::correlation::CorrVars {
            theta: g.constant(proj.clone()),
            phi: g.constant(proj.transpose()?),
            g: g.constant(proj.clone()),
        };
        v.iter().map(|&x| pcm(g, x, &p)).collect()
    };
    let pcms_a = pcms_of.clone();
    let pcms_b = pcms_of.clone();
    let pcms_c = pcms_of;
    let labels_c = one_hot(&[0, 2], 3).expect("valid labels");
    vec![
        scalar(
            "classification_loss",
            vec![uniform(r, &[4, 3], -1.0, 1.0)],
            PRIMITIVE_TOLERANCE,
            Box::new(move |g, v| {
                let p = g.softmax_rows(v[0])?;
                classification_loss(g, p, &labels)
            }),
        ),
        scalar(
            "domain_loss",
            vec![uniform(r, &[3], 0.1, 0.9), uniform(r, &[2], 0.1, 0.9)],
            PRIMITIVE_TOLERANCE,
            Box::new(|g, v| domain_loss(g, v[0], v[1])),
        ),
        scalar(
            "pcd",
            pcm_inputs(r),
            PRIMITIVE_TOLERANCE,
            Box::new(move |g, v| {
                let m = pcms_a(g, v)?;
                let ws = source_class_weights(&labels_c)?;
                let wt = target_class_weights(&pseudo, 1e-3)?;
                Ok(pcd(g, &m[..2], &m[2..], &ws, &wt, SigmaPolicy::Fixed(0.7))?.value)
            }),
        ),
        scalar(
            "norm_restriction_loss",
            pcm_inputs(r),
            PRIMITIVE_TOLERANCE,
            Box::new(move |g, v| {
                let m = pcms_b(g, v)?;
                norm_restriction_loss(g, &m[..2], &m[2..], 3.0)
            }),
        ),
        scalar(
            "video_covariance_loss",
            pcm_inputs(r),
            PRIMITIVE_TOLERANCE,
            Box::new(move |g, v| {
                let m = pcms_c(g, v)?;
                let gr: Vec<_> = m.iter().map(|x| gram(g, x)).collect::<Result<_>>()?;
                video_covariance_loss(g, &gr[..2], &gr[2..])
            }),
        ),
        scalar(
            "mmd_loss",
            (0..5).map(|_| uniform(r, &[3], -1.0, 1.0)).collect(),
            PRIMITIVE_TOLERANCE,
            Box::new(|g, v| Ok(mmd_loss(g, &v[..2], &v[2..], SigmaPolicy::Fixed(0.9))?.value)),
        ),
        scalar(
            "coral_loss",
            (0..6).map(|_| uniform(r, &[3], -1.0, 1.0)).collect(),
            PRIMITIVE_TOLERANCE,
            Box::new(|g, v| coral_loss(g, &v[..3], &v[3..])),
        ),
    ]
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input: [3, 4, 8, 8],
            channels: vec![3, 4, 5],
            strides: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2]],
            kernel: 3,
            high_block: 1,
        },
        num_classes: 3,
        corr_latent: Some(2),
        disc_hidden: 4,
        input_norm: None,
    }
}

/// `L_y + PCD` on two source and two target clips, perturbing every
/// parameter the objective reaches.
fn composite_case(seed: u64) -> Result<Case> {
    let cfg = tiny_model();
    let params = ModelParams::init(cfg.clone(), derive_seed(seed, "gradsuite/composite", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/clips", 0));
    let clips: Vec<Tensor> = (0..4)
        .map(|_| uniform(&mut rng, &cfg.encoder.input, 0.0, 1.0))
        .collect();
    let labels = one_hot(&[0, 2], cfg.num_classes)?;

    // pseudo-labels and bandwidth are constants of the step
    let (pseudo, sigma) = {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let fw: Vec<_> = clips
            .iter()
            .map(|c| {
                let v = g.constant(c.clone());
                forward_video(&mut g, &vars, &cfg, v)
            })
            .collect::<Result<_>>()?;
        let ft: Vec<Var> = fw[2..].iter().map(|x| x.f).collect();
        let fct: Vec<Var> = fw[2..].iter().map(|x| x.f_c).collect();
        let p = classify(&mut g, &vars.heads, &ft, &fct)?;
        let pseudo = g.value(p).clone();
        let ws = source_class_weights(&labels)?;
        let wt = target_class_weights(&pseudo, 1e-3)?;
        let ms: Vec<_> = fw[..2].iter().map(|x| x.pcm).collect();
        let mt: Vec<_> = fw[2..].iter().map(|x| x.pcm).collect();
        let sigma = pcd(&mut g, &ms, &mt, &ws, &wt, SigmaPolicy::Median)?.sigma;
        (pseudo, sigma)
    };

    let blocks = cfg.encoder.channels.len();
    let heads = params.heads.clone();
    let body: Body = Box::new(move |g, v| {
        let e = 2 * blocks;
        let mut all = v.to_vec();
        all.extend(heads.bind(g, false).all().into_iter().skip(2));
        let vars = ModelVars::from_slice(&all, blocks)?;
        debug_assert_eq!(v.len(), e + 5);
        let fw: Vec<_> = clips
            .iter()
            .map(|c| {
                let x = g.constant(c.clone());
                forward_video(g, &vars, &cfg, x)
            })
            .collect::<Result<_>>()?;
        let f: Vec<Var> = fw.iter().map(|x| x.f).collect();
        let fc: Vec<Var> = fw.iter().map(|x| x.f_c).collect();
        let probs = classify(g, &vars.heads, &f[..2], &fc[..2])?;
        let l_y = classification_loss(g, probs, &labels)?;
        let ws = source_class_weights(&labels)?;
        let wt = target_class_weights(&pseudo, 1e-3)?;
        let ms: Vec<_> = fw[..2].iter().map(|x| x.pcm).collect();
        let mt: Vec<_> = fw[2..].iter().map(|x| x.pcm).collect();
        let d = pcd(g, &ms, &mt, &ws, &wt, SigmaPolicy::Fixed(sigma))?.value;
        g.add(l_y, d)
    });
    let e = 2 * blocks;
    Ok(Case {
        name: "composite: encoder→PCM→f_c→classify + PCD",
        // discriminator tensors are unreachable from this objective
        inputs: params.tensors().into_iter().take(e + 5).cloned().collect(),
        tolerance: COMPOSITE_TOLERANCE,
        body,
    })
}

/// Encoder alone, exercising strided convolutions, bias and ReLU together.
fn encoder_case(seed: u64) -> Result<Case> {
    let cfg = tiny_model();
    let params = ModelParams::init(cfg.clone(), derive_seed(seed, "gradsuite/encoder", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/encoder-clip", 0));
    let clip = uniform(&mut rng, &cfg.encoder.input, 0.0, 1.0);
    let enc = cfg.encoder.clone();
    Ok(Case {
        name: "encoder",
        inputs: params.encoder.tensors().into_iter().cloned().collect(),
        tolerance: COMPOSITE_TOLERANCE,
        body: Box::new(move |g, v| {
            let vars = crate::encoder::EncoderVars::from_slice(v)?;
            let x = g.constant(clip.clone());
            let out = encode(g, &vars, &enc, x)?;
            let a = weighted_sum(g, out.feature, 1)?;
            let b = weighted_sum(g, out.high, 2)?;
            g.add(a, b)
        }),
    })
}

/// PCM and `f_c` with respect to `f_h` and the three projections.
fn correlation_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/correlation", 0));
    let r = &mut rng;
    Case {
        name: "pcm + correlation_vector",
        inputs: vec![
            uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
        ],
        tolerance: PRIMITIVE_TOLERANCE,
        body: Box::new(|g, v| {
            let p = crate::correlation::CorrVars::from_slice(&v[1..])?;
            let m = pcm(g, v[0], &p)?;
            let fc = correlation_vector(g, v[0], &m, &p)?;
            let a = weighted_sum(g, m.var, 3)?;
            let b = weighted_sum(g, fc, 4)?;
            g.add(a, b)
        }),
    }
}

/// Both discriminators and the domain loss with respect to their own
/// parameters, fed constant features.
fn discriminator_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/discriminators", 0));
    let heads = crate::heads::HeadParams::init(4, 2, 3, 5, &mut rng);
    let feats: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[4], -1.0, 1.0)).collect();
    let corr: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[2], -1.0, 1.0)).collect();
    Ok(Case {
        name: "discriminators + domain_loss",
        inputs: heads.tensors().into_iter().cloned().collect(),
        tolerance: PRIMITIVE_TOLERANCE,
        body: Box::new(move |g, v| {
            let h = crate::heads::HeadVars::from_slice(v)?;
            let f: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
            let c: Vec<Var> = corr.iter().map(|t| g.constant(t.clone())).collect();
            let ds = discriminate(g, &h, &f[..2], 1.0, Discriminator::Video)?;
            let dt = discriminate(g, &h, &f[2..], 1.0, Discriminator::Video)?;
            let l_vd = domain_loss(g, ds, dt)?;
            let cs = discriminate(g, &h, &c[..2], 1.0, Discriminator::Correlation)?;
            let ct = discriminate(g, &h, &c[2..], 1.0, Discriminator::Correlation)?;
            let l_cd = domain_loss(g, cs, ct)?;
            let p = classify(g, &h, &f[..2], &c[..2])?;
            let y = one_hot(&[1, 0], 3)?;
            let l_y = classification_loss(g, p, &y)?;
            let a = g.add(l_vd, l_cd)?;
            g.add(a, l_y)
        }),
    })
}

/// Runs every check. The GRL is verified separately since central
/// differences cannot see a backward-only sign flip.
pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut cases = primitive_cases(seed);
    cases.extend(loss_cases(seed));
    cases.push(correlation_case(seed));
    cases.push(encoder_case(seed)?);
    cases.push(discriminator_case(seed)?);
    cases.push(composite_case(seed)?);
    let mut out = Vec::with_capacity(cases.len() + 1);
    for c in cases {
        let err = finite_diff_check_many(c.body.as_ref(), &c.inputs, EPS)?;
        out.push(OpCheck {
            name: c.name.to_string(),
            max_rel_err: err,
            tolerance: c.tolerance,
            inputs: c.inputs.iter().map(|t| t.len()).sum(),
        });
    }
    out.push(grad_reverse_check(seed)?);
    Ok(out)
}

/// Largest deviation of the GRL's backward pass from `−λ` times the plain
/// identity gradient, over several λ.
fn grad_reverse_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite/grl", 0));
    let x = uniform(&mut rng, &[7], -1.0, 1.0);
    let grad = |lambda: Option<f64>| -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = match lambda {
            Some(l) => g.grad_reverse(v, l)?,
            None => v,
        };
        let sq = g.square(y)?;
        let loss = weighted_sum(&mut g, sq, 5)?;
        g.backward(loss)?;
        g.grad(v)
            .cloned()
            .ok_or_else(|| Error::usage("no gradient reached the input"))
    };
    let plain = grad(None)?;
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.1, 0.5, 1.0, 2.0] {
        let rev = grad(Some(lambda))?;
        for (a, b) in rev.data().iter().zip(plain.data()) {
            let want = -lambda * b;
            worst = worst.max((a - want).abs() / want.abs().max(1e-8));
        }
    }
    Ok(OpCheck {
        name: "grad_reverse (backward = −λ·identity)".to_string(),
        max_rel_err: worst,
        tolerance: 0.0,
        inputs: x.len(),
    })
}
