//! Adversarial training, evaluation and the ablation matrix.
//!
//! One step pairs a labeled source batch with an unlabeled target batch,
//! runs both through the shared network, and steps downhill on the
//! variant's objective. Discriminators sit behind gradient reversal, so the
//! min-max game needs only this single descent direction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::correlation::{gram, video_covariance_loss, PixelCorrelationMatrix};
use crate::data::{dataset_stats, VideoSet};
use crate::error::{Error, Result};
use crate::heads::{argmax, classify, discriminate, Discriminator};
use crate::losses::{
    classification_loss, coral_loss, domain_loss, mmd_loss, norm_restriction_loss, one_hot,
    overall_loss, pcd, source_class_weights, target_class_weights, LossTerms, LossWeights,
    Objective, DEFAULT_ACTIVE_THRESHOLD,
};
use crate::model::{
    forward_video, predict, InputNorm, ModelConfig, ModelParams, ModelVars, VideoForward,
};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance for the per-step class-weight normalization check.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "source_only")]
    SourceOnly,
    #[serde(rename = "dann")]
    Dann,
    #[serde(rename = "acan_base")]
    AcanBase,
    #[serde(rename = "acan")]
    Acan,
    #[serde(rename = "acan_l2norm")]
    AcanL2Norm,
    #[serde(rename = "acan_minus_Lcd")]
    AcanMinusLcd,
    #[serde(rename = "acan_minus_Lvd")]
    AcanMinusLvd,
    #[serde(rename = "pcd_only")]
    PcdOnly,
    #[serde(rename = "mmd_baseline")]
    MmdBaseline,
    #[serde(rename = "coral_baseline")]
    CoralBaseline,
    #[serde(rename = "target_only")]
    TargetOnly,
}

/// Which discrepancy, if any, a variant adds on top of the domain losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    None,
    Pcd,
    NormRestriction,
    Mmd,
    Coral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub video_adversary: bool,
    pub corr_adversary: bool,
    pub alignment: Alignment,
    /// Train on labeled target data instead of source data.
    pub supervised_target: bool,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::SourceOnly,
        Variant::Dann,
        Variant::AcanBase,
        Variant::Acan,
        Variant::AcanL2Norm,
        Variant::AcanMinusLcd,
        Variant::AcanMinusLvd,
        Variant::PcdOnly,
        Variant::MmdBaseline,
        Variant::CoralBaseline,
        Variant::TargetOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Dann => "dann",
            Variant::AcanBase => "acan_base",
            Variant::Acan => "acan",
            Variant::AcanL2Norm => "acan_l2norm",
            Variant::AcanMinusLcd => "acan_minus_Lcd",
            Variant::AcanMinusLvd => "acan_minus_Lvd",
            Variant::PcdOnly => "pcd_only",
            Variant::MmdBaseline => "mmd_baseline",
            Variant::CoralBaseline => "coral_baseline",
            Variant::TargetOnly => "target_only",
        }
    }

    pub fn components(self) -> Components {
        let c = |video_adversary, corr_adversary, alignment| Components {
            video_adversary,
            corr_adversary,
            alignment,
            supervised_target: false,
        };
        match self {
            Variant::SourceOnly => c(false, false, Alignment::None),
            Variant::Dann => c(true, false, Alignment::None),
            Variant::AcanBase => c(true, true, Alignment::None),
            Variant::Acan => c(true, true, Alignment::Pcd),
            Variant::AcanL2Norm => c(true, true, Alignment::NormRestriction),
            Variant::AcanMinusLcd => c(true, false, Alignment::Pcd),
            Variant::AcanMinusLvd => c(false, true, Alignment::Pcd),
            Variant::PcdOnly => c(false, false, Alignment::Pcd),
            Variant::MmdBaseline => c(false, false, Alignment::Mmd),
            Variant::CoralBaseline => c(false, false, Alignment::Coral),
            Variant::TargetOnly => Components {
                supervised_target: true,
                ..c(false, false, Alignment::None)
            },
        }
    }

    /// Whether the target batch reaches the objective at all under `w`.
    pub fn uses_target(self, w: &LossWeights) -> bool {
        let c = self.components();
        !c.supervised_target
            && ((c.video_adversary && w.lambda_v > 0.0)
                || (c.corr_adversary && w.lambda_r > 0.0)
                || alignment_weight(c.alignment, w) > 0.0)
    }
}

fn alignment_weight(a: Alignment, w: &LossWeights) -> f64 {
    match a {
        Alignment::None => 0.0,
        Alignment::NormRestriction => w.lambda_dist,
        Alignment::Pcd | Alignment::Mmd | Alignment::Coral => w.lambda_d,
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::usage(format!(
                    "unknown variant {s:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Source-only epochs run before the variant's objective takes over.
    /// Every variant of a seed starts adaptation from the same warm-up.
    pub warmup_epochs: usize,
    pub warmup_learning_rate: f64,
    pub warmup_batch_size: usize,
    /// Adaptation epochs after the warm-up.
    pub epochs: usize,
    /// Clips per domain per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (zero-based) at whose start the learning rate is divided by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Pseudo-label mass below which a target class is treated as absent.
    pub active_threshold: f64,
    /// Backward scale of every gradient reversal layer.
    pub grl_lambda: f64,
    /// Standardize clips with the per-channel statistics of the source
    /// training split.
    pub normalize_input: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Acan,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            warmup_epochs: 14,
            warmup_learning_rate: 0.005,
            warmup_batch_size: 8,
            epochs: 40,
            batch_size: 8,
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![20, 35],
            lr_drop_factor: 10.0,
            active_threshold: DEFAULT_ACTIVE_THRESHOLD,
            grl_lambda: 0.1,
            normalize_input: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be >= 1"));
        }
        if self.batch_size < 2 || self.warmup_batch_size < 2 {
            return Err(Error::usage(format!(
                "batch sizes must be >= 2, got {} (warm-up {})",
                self.batch_size, self.warmup_batch_size
            )));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::usage(format!(
                "invalid optimizer settings: lr {}, momentum {}, weight decay {}",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(Error::usage(format!(
                "lr drop factor must be >= 1, got {}",
                self.lr_drop_factor
            )));
        }
        if !(self.active_threshold >= 0.0) {
            return Err(Error::usage("active threshold must be >= 0"));
        }
        if !(self.warmup_learning_rate > 0.0) {
            return Err(Error::usage(format!(
                "warm-up learning rate must be > 0, got {}",
                self.warmup_learning_rate
            )));
        }
        if !self.grl_lambda.is_finite() || self.grl_lambda < 0.0 {
            return Err(Error::usage(format!(
                "GRL coefficient must be finite and >= 0, got {}",
                self.grl_lambda
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate / self.lr_drop_factor.powi(drops as i32)
    }
}

/// `v = m·v + g + wd·p; p -= lr·v` over matching parameter, gradient and
/// velocity lists.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::usage(format!(
            "sgd_step got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, gr), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.dims() != gr.dims() || p.dims() != v.dims() {
            return Err(Error::usage(format!(
                "sgd_step shape mismatch at slot {i}: param {:?}, grad {:?}, velocity {:?}",
                p.dims(),
                gr.dims(),
                v.dims()
            )));
        }
    }
    for ((p, gr), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let pd = p.data_mut();
        for ((pj, &gj), vj) in pd.iter_mut().zip(gr.data()).zip(v.data_mut()) {
            *vj = momentum * *vj + gj + weight_decay * *pj;
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

/// Momentum SGD holding its own velocity buffers.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut slots = params.tensors_mut();
        sgd_step(
            &mut slots,
            grads,
            &mut self.velocity,
            lr,
            self.momentum,
            self.weight_decay,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Adapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    /// Zero-based within the stage.
    pub epoch: usize,
    pub learning_rate: f64,
    #[serde(rename = "L_y")]
    pub l_y: f64,
    #[serde(rename = "L_vd")]
    pub l_vd: Option<f64>,
    #[serde(rename = "L_cd")]
    pub l_cd: Option<f64>,
    /// Mean alignment term of the variant (PCD, norm restriction, MMD or
    /// CORAL).
    #[serde(rename = "d_M")]
    pub d_m: Option<f64>,
    /// Video covariance loss on the last batch of the epoch.
    #[serde(rename = "L_vs")]
    pub l_vs: Option<f64>,
    pub source_train_acc: f64,
    pub target_val_top1: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub final_target_top1: f64,
    #[serde(rename = "final_Ly")]
    pub final_ly: f64,
    #[serde(rename = "final_dM")]
    pub final_dm: Option<f64>,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str =
        "variant,seed,final_target_top1,final_Ly,final_dM,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.variant,
            self.seed,
            self.final_target_top1,
            self.final_ly,
            self.final_dm.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Warm-up epochs first, then adaptation epochs.
    pub metrics: Vec<EpochMetrics>,
    pub summary: RunSummary,
}

impl TrainOutcome {
    /// One JSON object per epoch, newline-terminated.
    pub fn metrics_jsonl(&self) -> Result<String> {
        metrics_jsonl(&self.metrics)
    }
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

/// Training inputs: labeled source, target train (labels used only by
/// `target_only`) and the labeled target split reported each epoch.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a VideoSet,
    pub target: &'a VideoSet,
    pub target_val: &'a VideoSet,
}

impl TrainData<'_> {
    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        let input = cfg.model.encoder.input;
        for (name, set) in [
            ("source", self.source),
            ("target", self.target),
            ("target_val", self.target_val),
        ] {
            if set.clip_dims() != input {
                return Err(Error::shape(
                    "train",
                    format!(
                        "{name} clips are {:?}, encoder expects {input:?}",
                        set.clip_dims()
                    ),
                ));
            }
            if set.num_classes != cfg.model.num_classes {
                return Err(Error::usage(format!(
                    "{name} has {} classes, model has {}",
                    set.num_classes, cfg.model.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Top-1 accuracy of `params` on a labeled set.
pub fn evaluate(params: &ModelParams, set: &VideoSet) -> Result<f64> {
    let mut correct = 0usize;
    for (v, &l) in set.videos.iter().zip(&set.labels) {
        if argmax(predict(params, v)?.data()) == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Per-step values of one optimizer step.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub l_y: f64,
    pub l_vd: Option<f64>,
    pub l_cd: Option<f64>,
    pub d_m: Option<f64>,
    pub l_vs: Option<f64>,
    pub correct: usize,
    pub seen: usize,
}

fn named(term: &'static str, r: Result<Var>) -> Result<Var> {
    r.map_err(|e| match e {
        Error::NonFinite(d) => Error::NonFinite(format!("{term} is non-finite: {d}")),
        other => other,
    })
}

fn forward_batch(
    g: &mut Graph,
    vars: &ModelVars,
    params: &ModelParams,
    set: &VideoSet,
    idx: &[usize],
) -> Result<Vec<VideoForward>> {
    idx.iter()
        .map(|&i| {
            let v = g.constant(params.prepare(&set.videos[i])?);
            forward_video(g, vars, &params.config, v)
        })
        .collect()
}

/// Builds the objective for one paired batch, backpropagates, and returns
/// the per-parameter gradients (zeros for parameters the objective does not
/// touch) with the step's loss values.
pub fn compute_gradients(
    cfg: &TrainConfig,
    params: &ModelParams,
    labeled: &VideoSet,
    labeled_idx: &[usize],
    unlabeled: Option<(&VideoSet, &[usize])>,
    with_diagnostics: bool,
) -> Result<(Vec<Tensor>, StepReport)> {
    let comps = cfg.variant.components();
    let w = &cfg.weights;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);

    let src = forward_batch(&mut g, &vars, params, labeled, labeled_idx)?;
    let fs: Vec<Var> = src.iter().map(|x| x.f).collect();
    let fcs: Vec<Var> = src.iter().map(|x| x.f_c).collect();
    let probs_s = classify(&mut g, &vars.heads, &fs, &fcs)?;
    let labels: Vec<usize> = labeled_idx.iter().map(|&i| labeled.labels[i]).collect();
    let y = one_hot(&labels, cfg.model.num_classes)?;
    let l_y = named("L_y", classification_loss(&mut g, probs_s, &y))?;

    let mut report = StepReport {
        seen: labels.len(),
        ..StepReport::default()
    };
    {
        let p = g.value(probs_s);
        let n = cfg.model.num_classes;
        report.correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&p.data()[i * n..(i + 1) * n]) == l)
            .count();
    }

    let mut terms = LossTerms {
        l_y,
        l_vd: None,
        l_cd: None,
        alignment: None,
    };
    let mut objective = Objective::Base;

    if let Some((tset, tidx)) = unlabeled {
        let tgt = forward_batch(&mut g, &vars, params, tset, tidx)?;
        let ft: Vec<Var> = tgt.iter().map(|x| x.f).collect();
        let fct: Vec<Var> = tgt.iter().map(|x| x.f_c).collect();

        if comps.video_adversary && w.lambda_v > 0.0 {
            let ds = discriminate(
                &mut g,
                &vars.heads,
                &fs,
                cfg.grl_lambda,
                Discriminator::Video,
            )?;
            let dt = discriminate(
                &mut g,
                &vars.heads,
                &ft,
                cfg.grl_lambda,
                Discriminator::Video,
            )?;
            terms.l_vd = Some(named("L_vd", domain_loss(&mut g, ds, dt))?);
        }
        if comps.corr_adversary && w.lambda_r > 0.0 {
            let ds = discriminate(
                &mut g,
                &vars.heads,
                &fcs,
                cfg.grl_lambda,
                Discriminator::Correlation,
            )?;
            let dt = discriminate(
                &mut g,
                &vars.heads,
                &fct,
                cfg.grl_lambda,
                Discriminator::Correlation,
            )?;
            terms.l_cd = Some(named("L_cd", domain_loss(&mut g, ds, dt))?);
        }
        let pcm_s: Vec<PixelCorrelationMatrix> = src.iter().map(|x| x.pcm).collect();
        let pcm_t: Vec<PixelCorrelationMatrix> = tgt.iter().map(|x| x.pcm).collect();
        if alignment_weight(comps.alignment, w) > 0.0 {
            objective = if comps.alignment == Alignment::NormRestriction {
                Objective::L2Norm
            } else {
                Objective::Pcd
            };
            let term = match comps.alignment {
                Alignment::Pcd => {
                    // pseudo-labels enter as constants
                    let probs_t = classify(&mut g, &vars.heads, &ft, &fct)?;
                    let pseudo = g.value(probs_t).clone();
                    let ws = source_class_weights(&y)?;
                    let wt = target_class_weights(&pseudo, cfg.active_threshold)?;
                    ws.check_normalized(WEIGHT_TOLERANCE)?;
                    wt.check_normalized(WEIGHT_TOLERANCE)?;
                    named(
                        "d_M",
                        pcd(&mut g, &pcm_s, &pcm_t, &ws, &wt, w.sigma).map(|d| d.value),
                    )?
                }
                Alignment::NormRestriction => named(
                    "d_M",
                    norm_restriction_loss(&mut g, &pcm_s, &pcm_t, w.radius),
                )?,
                Alignment::Mmd => {
                    named("d_M", mmd_loss(&mut g, &fs, &ft, w.sigma).map(|d| d.value))?
                }
                Alignment::Coral => named("d_M", coral_loss(&mut g, &fs, &ft))?,
                Alignment::None => unreachable!("zero alignment weight"),
            };
            terms.alignment = Some(term);
        }
        if with_diagnostics {
            let gs = pcm_s
                .iter()
                .map(|m| gram(&mut g, m))
                .collect::<Result<Vec<_>>>()?;
            let gt = pcm_t
                .iter()
                .map(|m| gram(&mut g, m))
                .collect::<Result<Vec<_>>>()?;
            let l_vs = named("L_vs", video_covariance_loss(&mut g, &gs, &gt))?;
            report.l_vs = Some(g.scalar_value(l_vs));
        }
    }

    let total = named("total loss", overall_loss(&mut g, &terms, w, objective))?;
    report.l_y = g.scalar_value(terms.l_y);
    report.l_vd = terms.l_vd.map(|v| g.scalar_value(v));
    report.l_cd = terms.l_cd.map(|v| g.scalar_value(v));
    report.d_m = terms.alignment.map(|v| g.scalar_value(v));
    g.backward(total)?;

    let grads = vars
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.dims()))
        })
        .collect::<Vec<_>>();
    if let Some(i) = grads.iter().position(|gr| !gr.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} is non-finite",
            params.names()[i]
        )));
    }
    Ok((grads, report))
}

fn batches(order: &[usize], steps: usize, batch: usize, limit: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = (0..steps)
        .map(|s| &order[s * batch..(s + 1) * batch])
        .collect();
    let rest = &order[steps * batch..limit];
    if rest.len() >= 2 {
        out.push(rest);
    }
    out
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Parameters after the source-only warm-up of one seed, shared by every
/// variant trained under that seed.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub seed: u64,
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub wall_seconds: f64,
}

struct Stretch<'a> {
    stage: Stage,
    epochs: usize,
    labeled: &'a VideoSet,
    /// Unlabeled partner batches, when the objective reads them.
    target: Option<&'a VideoSet>,
}

fn run_stretch(
    cfg: &TrainConfig,
    params: &mut ModelParams,
    stretch: Stretch<'_>,
    target_val: &VideoSet,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let start = Instant::now();
    let mut opt = Sgd::new(params, cfg.momentum, cfg.weight_decay);
    let labeled = stretch.labeled;
    let pair_len = match stretch.target {
        Some(t) => labeled.len().min(t.len()),
        None => labeled.len(),
    };
    let b = cfg.batch_size;
    let steps = pair_len / b;
    if steps == 0 && pair_len < 2 {
        return Err(Error::usage(format!(
            "{pair_len} paired clips cannot fill a batch of 2"
        )));
    }
    let tag = match stretch.stage {
        Stage::Warmup => "warmup",
        Stage::Adapt => "adapt",
    };

    let mut metrics = Vec::with_capacity(stretch.epochs);
    for epoch in 0..stretch.epochs {
        let lr = match stretch.stage {
            Stage::Warmup => cfg.warmup_learning_rate,
            Stage::Adapt => cfg.learning_rate_at(epoch),
        };
        let mut src_order: Vec<usize> = (0..labeled.len()).collect();
        src_order.shuffle(&mut rng_for(
            cfg.seed,
            &format!("shuffle/{tag}/labeled"),
            epoch as u64,
        ));
        let src_batches = batches(&src_order, steps, b, pair_len);
        let tgt_order: Vec<usize> = match stretch.target {
            Some(t) => {
                let mut o: Vec<usize> = (0..t.len()).collect();
                o.shuffle(&mut rng_for(
                    cfg.seed,
                    &format!("shuffle/{tag}/target"),
                    epoch as u64,
                ));
                o
            }
            None => Vec::new(),
        };
        let tgt_batches = if stretch.target.is_some() {
            batches(&tgt_order, steps, b, pair_len)
        } else {
            Vec::new()
        };

        let mut reports = Vec::with_capacity(src_batches.len());
        for (s, src_idx) in src_batches.iter().enumerate() {
            let last = s + 1 == src_batches.len();
            let unlabeled = stretch.target.map(|t| (t, tgt_batches[s]));
            let (grads, report) =
                compute_gradients(cfg, params, labeled, src_idx, unlabeled, last)?;
            opt.step(params, &grads, lr)?;
            reports.push(report);
        }

        let target_val_top1 = evaluate(params, target_val)?;
        let seen: usize = reports.iter().map(|r| r.seen).sum();
        let m = EpochMetrics {
            stage: stretch.stage,
            epoch,
            learning_rate: lr,
            l_y: reports.iter().map(|r| r.l_y).sum::<f64>() / reports.len() as f64,
            l_vd: mean_of(&reports.iter().map(|r| r.l_vd).collect::<Vec<_>>()),
            l_cd: mean_of(&reports.iter().map(|r| r.l_cd).collect::<Vec<_>>()),
            d_m: mean_of(&reports.iter().map(|r| r.d_m).collect::<Vec<_>>()),
            l_vs: reports.last().and_then(|r| r.l_vs),
            source_train_acc: reports.iter().map(|r| r.correct).sum::<usize>() as f64 / seen as f64,
            target_val_top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} seed {} {tag} epoch {}: L_y {:.4} target top-1 {:.4}",
            cfg.variant,
            cfg.seed,
            epoch,
            m.l_y,
            m.target_val_top1
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

fn check_data(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<()> {
    cfg.validate()?;
    data.check(cfg)
}

/// Initializes the network for `cfg.seed`, fits the input standardization on
/// the source split, and runs the source-only warm-up.
pub fn warm_start_with(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<WarmStart> {
    check_data(cfg, &data)?;
    let start = Instant::now();
    let mut model = cfg.model.clone();
    if cfg.normalize_input {
        model.input_norm = Some(InputNorm::from_stats(&dataset_stats(&data.source.videos)?)?);
    }
    let mut params = ModelParams::init(model, derive_seed(cfg.seed, "init", 0))?;
    let warm_cfg = TrainConfig {
        variant: Variant::SourceOnly,
        batch_size: cfg.warmup_batch_size,
        ..cfg.clone()
    };
    let metrics = if cfg.warmup_epochs > 0 {
        let stretch = Stretch {
            stage: Stage::Warmup,
            epochs: cfg.warmup_epochs,
            labeled: data.source,
            target: None,
        };
        run_stretch(&warm_cfg, &mut params, stretch, data.target_val, on_epoch)?
    } else {
        Vec::new()
    };
    Ok(WarmStart {
        seed: cfg.seed,
        params,
        metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn warm_start(cfg: &TrainConfig, data: TrainData<'_>) -> Result<WarmStart> {
    warm_start_with(cfg, data, |_| {})
}

/// Runs the variant's adaptation epochs from a warm start. The result equals
/// what [`train_with`] produces for the same config.
pub fn train_from(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    warm: &WarmStart,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    check_data(cfg, &data)?;
    if warm.seed != cfg.seed {
        return Err(Error::usage(format!(
            "warm start belongs to seed {}, config has seed {}",
            warm.seed, cfg.seed
        )));
    }
    let start = Instant::now();
    let comps = cfg.variant.components();
    let mut params = warm.params.clone();
    let labeled = if comps.supervised_target {
        data.target
    } else {
        data.source
    };
    let stretch = Stretch {
        stage: Stage::Adapt,
        epochs: cfg.epochs,
        labeled,
        target: cfg.variant.uses_target(&cfg.weights).then_some(data.target),
    };
    let adapt = run_stretch(cfg, &mut params, stretch, data.target_val, on_epoch)?;

    let last = adapt.last().expect("epochs >= 1");
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        final_target_top1: last.target_val_top1,
        final_ly: last.l_y,
        final_dm: last.d_m,
        wall_seconds: warm.wall_seconds + start.elapsed().as_secs_f64(),
    };
    let mut metrics = warm.metrics.clone();
    metrics.extend(adapt);
    Ok(TrainOutcome {
        params,
        metrics,
        summary,
    })
}

/// Warm-up followed by adaptation. `on_epoch` sees each epoch's metrics as
/// soon as they are computed.
pub fn train_with(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let warm = warm_start_with(cfg, data, &mut on_epoch)?;
    train_from(cfg, data, &warm, on_epoch)
}

pub fn train(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final target top-1 per seed, in seed order.
    pub finals: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

/// How often `a` finished above, below or level with `b` across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCount {
    pub a: Variant,
    pub b: Variant,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub pairwise: Vec<PairwiseCount>,
    pub runs: Vec<RunSummary>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn pair(&self, a: Variant, b: Variant) -> Option<&PairwiseCount> {
        self.pairwise.iter().find(|p| p.a == a && p.b == b)
    }

    /// Assembles rows and pairwise counts from per-run summaries.
    pub fn from_runs(variants: &[Variant], seeds: &[u64], runs: Vec<RunSummary>) -> Result<Self> {
        let finals = |v: Variant| -> Result<Vec<f64>> {
            seeds
                .iter()
                .map(|&s| {
                    runs.iter()
                        .find(|r| r.variant == v && r.seed == s)
                        .map(|r| r.final_target_top1)
                        .ok_or_else(|| Error::usage(format!("missing run {v} seed {s}")))
                })
                .collect()
        };
        let mut rows = Vec::new();
        for &v in variants {
            let f = finals(v)?;
            let n = f.len() as f64;
            let mean = f.iter().sum::<f64>() / n;
            let std = if f.len() > 1 {
                (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(AblationRow {
                variant: v,
                finals: f,
                mean,
                std,
            });
        }
        let mut pairwise = Vec::new();
        for (i, ra) in rows.iter().enumerate() {
            for rb in &rows[i + 1..] {
                let mut c = PairwiseCount {
                    a: ra.variant,
                    b: rb.variant,
                    a_wins: 0,
                    b_wins: 0,
                    ties: 0,
                };
                for (x, y) in ra.finals.iter().zip(&rb.finals) {
                    match x.total_cmp(y) {
                        std::cmp::Ordering::Greater => c.a_wins += 1,
                        std::cmp::Ordering::Less => c.b_wins += 1,
                        std::cmp::Ordering::Equal => c.ties += 1,
                    }
                }
                pairwise.push(c);
            }
        }
        Ok(Self {
            seeds: seeds.to_vec(),
            rows,
            pairwise,
            runs,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::from("variant            mean     std      finals\n");
        for r in &self.rows {
            let finals: Vec<String> = r.finals.iter().map(|f| format!("{f:.4}")).collect();
            out.push_str(&format!(
                "{:<18} {:.4}  {:.4}  [{}]\n",
                r.variant.name(),
                r.mean,
                r.std,
                finals.join(", ")
            ));
        }
        for p in &self.pairwise {
            out.push_str(&format!(
                "{} vs {}: {}-{} ({} ties)\n",
                p.a, p.b, p.a_wins, p.b_wins, p.ties
            ));
        }
        out
    }
}

/// Trains every variant under every seed, starting from `base` with only
/// `variant` and `seed` replaced. Each seed's warm-up runs once.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: TrainData<'_>,
) -> Result<AblationReport> {
    run_ablation_with(base, variants, seeds, data, |_| {})
}

/// As [`run_ablation`], reporting each finished run.
pub fn run_ablation_with(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: TrainData<'_>,
    mut on_run: impl FnMut(&RunSummary),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::usage(
            "ablation needs at least one variant and one seed",
        ));
    }
    let mut warm: HashMap<u64, WarmStart> = HashMap::new();
    let mut runs = Vec::new();
    for &s in seeds {
        for &v in variants {
            let cfg = TrainConfig {
                variant: v,
                seed: s,
                ..base.clone()
            };
            if !warm.contains_key(&s) {
                warm.insert(s, warm_start(&cfg, data)?);
            }
            let summary = train_from(&cfg, data, &warm[&s], |_| {})?.summary;
            on_run(&summary);
            runs.push(summary);
        }
    }
    AblationReport::from_runs(variants, seeds, runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(
                serde_json::to_string(&v).unwrap(),
                format!("\"{}\"", v.name())
            );
        }
        assert!("acan_plus".parse::<Variant>().unwrap_err().is_usage());
    }

    #[test]
    fn sgd_reductions() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, 0.25]);
        let mut v = vec![Tensor::zeros(&[2])];
        sgd_step(&mut [&mut p], &[g], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let mut q = Tensor::vector(vec![3.0]);
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut [&mut q], &[Tensor::zeros(&[1])], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(q.data(), &[3.0]);
    }

    #[test]
    fn sgd_hand_steps() {
        let (lr, m, wd) = (0.05, 0.9, 1e-4);
        let mut a = Tensor::vector(vec![0.7]);
        let mut b = Tensor::vector(vec![-1.3]);
        let mut vel = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let grads = [[0.2, -0.4], [0.1, 0.3]];
        let (mut pa, mut pb, mut va, mut vb) = (0.7f64, -1.3f64, 0.0f64, 0.0f64);
        for gs in grads {
            sgd_step(
                &mut [&mut a, &mut b],
                &[Tensor::vector(vec![gs[0]]), Tensor::vector(vec![gs[1]])],
                &mut vel,
                lr,
                m,
                wd,
            )
            .unwrap();
            va = m * va + gs[0] + wd * pa;
            pa -= lr * va;
            vb = m * vb + gs[1] + wd * pb;
            pb -= lr * vb;
        }
        assert!((a.data()[0] - pa).abs() <= 1e-15);
        assert!((b.data()[0] - pb).abs() <= 1e-15);
    }

    #[test]
    fn sgd_rejects_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut v = vec![Tensor::zeros(&[2])];
        let err =
            sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut v, 0.1, 0.0, 0.0).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn schedule_drops() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.005);
        assert_eq!(cfg.learning_rate_at(19), 0.005);
        assert!((cfg.learning_rate_at(20) - 0.0005).abs() < 1e-18);
        assert!((cfg.learning_rate_at(39) - 0.00005).abs() < 1e-18);
    }

    #[test]
    fn uses_target_follows_weights() {
        let mut w = LossWeights::default();
        assert!(!Variant::SourceOnly.uses_target(&w));
        assert!(!Variant::TargetOnly.uses_target(&w));
        assert!(Variant::Acan.uses_target(&w));
        w.lambda_v = 0.0;
        w.lambda_r = 0.0;
        w.lambda_d = 0.0;
        assert!(!Variant::Acan.uses_target(&w));
        assert!(Variant::AcanL2Norm.uses_target(&w));
    }

    #[test]
    fn report_means_and_counts() {
        let runs = vec![
            RunSummary {
                variant: Variant::Acan,
                seed: 1,
                final_target_top1: 0.5,
                final_ly: 0.0,
                final_dm: None,
                wall_seconds: 0.0,
            },
            RunSummary {
                variant: Variant::Acan,
                seed: 2,
                final_target_top1: 0.7,
                final_ly: 0.0,
                final_dm: None,
                wall_seconds: 0.0,
            },
            RunSummary {
                variant: Variant::Dann,
                seed: 1,
                final_target_top1: 0.5,
                final_ly: 0.0,
                final_dm: None,
                wall_seconds: 0.0,
            },
            RunSummary {
                variant: Variant::Dann,
                seed: 2,
                final_target_top1: 0.6,
                final_ly: 0.0,
                final_dm: None,
                wall_seconds: 0.0,
            },
        ];
        let r = AblationReport::from_runs(&[Variant::Acan, Variant::Dann], &[1, 2], runs).unwrap();
        assert!((r.row(Variant::Acan).unwrap().mean - 0.6).abs() < 1e-15);
        let p = r.pair(Variant::Acan, Variant::Dann).unwrap();
        assert_eq!((p.a_wins, p.b_wins, p.ties), (1, 0, 1));
    }
}
