//! Training objectives: classification and domain losses, the class-weighted
//! pixel correlation discrepancy (PCD), the PCM norm restriction, and the
//! global MMD and CORAL baselines.
//!
//! PCD compares source and target PCM distributions class by class through
//! kernel mean embeddings. With per-class weight vectors `w_s`, `w_t` and a
//! Gaussian kernel `k`, each class contributes
//!
//! ```text
//! Σᵢᵢ' w_s[i] w_s[i'] k(Msⁱ, Msⁱ') + Σⱼⱼ' w_t[j] w_t[j'] k(Mtʲ, Mtʲ') − 2 Σᵢⱼ w_s[i] w_t[j] k(Msⁱ, Mtʲ)
//! ```
//!
//! which is the quadratic form `vᵀ K v` for `v = [w_s; −w_t]` over the joint
//! kernel matrix of all PCMs. That is how it is evaluated here: one pairwise
//! distance node, one kernel map and a single weighted sum.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correlation::PixelCorrelationMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to every probability before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default mass below which a pseudo-labelled class counts as absent.
pub const DEFAULT_ACTIVE_THRESHOLD: f64 = 1e-3;

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::usage("one_hot of an empty label list"));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::usage(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean cross-entropy `-Σ y log p` over the rows of `probs`.
pub fn classification_loss(g: &mut Graph, probs: Var, labels: &Tensor) -> Result<Var> {
    if g.dims(probs) != labels.dims() {
        return Err(Error::shape(
            "classification_loss",
            format!("probs {:?} vs labels {:?}", g.dims(probs), labels.dims()),
        ));
    }
    let n = labels.dims()[0] as f64;
    let logp = g.ln_clamped(probs, PROB_FLOOR)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n)
}

/// Binary cross-entropy of a discriminator: mean over source samples with
/// label 0 plus mean over target samples with label 1.
pub fn domain_loss(g: &mut Graph, src_probs: Var, tgt_probs: Var) -> Result<Var> {
    let ns = g.value(src_probs).len() as f64;
    let nt = g.value(tgt_probs).len() as f64;
    let flipped = g.scale(src_probs, -1.0)?;
    let one_minus = g.add_scalar(flipped, 1.0)?;
    let ls = g.ln_clamped(one_minus, PROB_FLOOR)?;
    let ls = g.sum(ls)?;
    let ls = g.scale(ls, -1.0 / ns)?;
    let lt = g.ln_clamped(tgt_probs, PROB_FLOOR)?;
    let lt = g.sum(lt)?;
    let lt = g.scale(lt, -1.0 / nt)?;
    g.add(ls, lt)
}

/// Per-class sample weights; row `cl` of `weights` spans the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Tensor,
    pub active: Vec<bool>,
}

impl ClassWeights {
    pub fn classes(&self) -> usize {
        self.active.len()
    }

    pub fn samples(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let n = self.samples();
        &self.weights.data()[class * n..(class + 1) * n]
    }

    /// Checks that active rows sum to one and inactive rows are zero.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for c in 0..self.classes() {
            let row = self.row(c);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::NonFinite(format!("negative weight in class {c}")));
            }
            let s: f64 = row.iter().sum();
            let ok = if self.active[c] {
                (s - 1.0).abs() <= tol
            } else {
                s == 0.0
            };
            if !ok {
                return Err(Error::NonFinite(format!(
                    "class {c} weights sum to {s} (active: {})",
                    self.active[c]
                )));
            }
        }
        Ok(())
    }
}

fn column_normalized(mass: &Tensor, threshold: f64) -> ClassWeights {
    let (n, classes) = (mass.dims()[0], mass.dims()[1]);
    let mut weights = vec![0.0; classes * n];
    let mut active = vec![false; classes];
    for c in 0..classes {
        let total: f64 = (0..n).map(|i| mass.data()[i * classes + c]).sum();
        if total > 0.0 && total >= threshold {
            active[c] = true;
            for i in 0..n {
                weights[c * n + i] = mass.data()[i * classes + c] / total;
            }
        }
    }
    ClassWeights {
        weights: Tensor::new(vec![classes, n], weights).expect("classes×n buffer"),
        active,
    }
}

/// `W[cl, i] = y[i, cl] / Σ_k y[k, cl]` from one-hot labels `[N×Cl]`.
pub fn source_class_weights(labels: &Tensor) -> Result<ClassWeights> {
    if labels.ndim() != 2 {
        return Err(Error::shape(
            "source_class_weights",
            format!("labels must be N×Cl, got {:?}", labels.dims()),
        ));
    }
    Ok(column_normalized(labels, 0.0))
}

/// Target analog of [`source_class_weights`] from soft pseudo-labels; a class
/// whose total pseudo-label mass is below `active_threshold` is inactive.
pub fn target_class_weights(pseudo: &Tensor, active_threshold: f64) -> Result<ClassWeights> {
    if pseudo.ndim() != 2 {
        return Err(Error::shape(
            "target_class_weights",
            format!("pseudo-labels must be N×Cl, got {:?}", pseudo.dims()),
        ));
    }
    Ok(column_normalized(pseudo, active_threshold))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::usage(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// `exp(-‖a − b‖²_F / (2σ²))`.
pub fn gaussian_kernel(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((-a.sq_distance(b)? / (2.0 * sigma * sigma)).exp())
}

/// Bandwidth from pairwise squared distances: `σ² = median / 2`, or `σ = 1`
/// when the median is zero.
pub fn bandwidth_from_sq_distances(sq: &[f64]) -> Result<f64> {
    if sq.is_empty() {
        return Err(Error::usage("median bandwidth needs at least two samples"));
    }
    let mut sorted = sq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(if median > 0.0 {
        (median / 2.0).sqrt()
    } else {
        1.0
    })
}

/// Median heuristic over all pairs of the given matrices.
pub fn median_bandwidth(pcms: &[&Tensor]) -> Result<f64> {
    if pcms.len() < 2 {
        return Err(Error::usage(format!(
            "median bandwidth needs >= 2 matrices, got {}",
            pcms.len()
        )));
    }
    let mut sq = Vec::new();
    for i in 0..pcms.len() {
        for j in (i + 1)..pcms.len() {
            sq.push(pcms[i].sq_distance(pcms[j])?);
        }
    }
    bandwidth_from_sq_distances(&sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    Fixed(f64),
    Median,
}

/// Joint Gaussian kernel matrix over already-stacked rows, with bandwidth
/// resolved from `policy`.
fn kernel_matrix(g: &mut Graph, rows: Var, policy: SigmaPolicy) -> Result<(Var, f64)> {
    let sq = g.sq_dist_matrix(rows)?;
    let sigma = match policy {
        SigmaPolicy::Fixed(s) => {
            check_sigma(s)?;
            s
        }
        SigmaPolicy::Median => {
            let n = g.dims(sq)[0];
            if n < 2 {
                return Err(Error::usage("median bandwidth needs at least two samples"));
            }
            let d = g.value(sq).data();
            let upper: Vec<f64> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| d[i * n + j]))
                .collect();
            bandwidth_from_sq_distances(&upper)?
        }
    };
    let scaled = g.scale(sq, -1.0 / (2.0 * sigma * sigma))?;
    Ok((g.exp(scaled)?, sigma))
}

fn quadratic_form(g: &mut Graph, kernel: Var, coeffs: Tensor) -> Result<Var> {
    let c = g.constant(coeffs);
    let weighted = g.mul(kernel, c)?;
    g.sum(weighted)
}

fn stack_pcms(
    g: &mut Graph,
    pcms_s: &[PixelCorrelationMatrix],
    pcms_t: &[PixelCorrelationMatrix],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(pcms_s.len() + pcms_t.len());
    for m in pcms_s.iter().chain(pcms_t) {
        let n = g.value(m.var).len();
        rows.push(g.reshape(m.var, &[n])?);
    }
    g.stack_rows(&rows)
}

#[derive(Clone, Copy, Debug)]
pub struct Discrepancy {
    pub value: Var,
    pub sigma: f64,
    pub active_classes: usize,
}

/// Class-weighted PCD averaged over the classes active in both domains;
/// zero when no class is jointly active.
pub fn pcd(
    g: &mut Graph,
    pcms_s: &[PixelCorrelationMatrix],
    pcms_t: &[PixelCorrelationMatrix],
    w_s: &ClassWeights,
    w_t: &ClassWeights,
    sigma: SigmaPolicy,
) -> Result<Discrepancy> {
    if w_s.classes() != w_t.classes() {
        return Err(Error::usage(format!(
            "class counts differ: {} source vs {} target",
            w_s.classes(),
            w_t.classes()
        )));
    }
    let (ns, nt) = (pcms_s.len(), pcms_t.len());
    if w_s.samples() != ns || w_t.samples() != nt {
        return Err(Error::shape(
            "pcd",
            format!(
                "weights cover {}+{} samples, got {ns}+{nt} matrices",
                w_s.samples(),
                w_t.samples()
            ),
        ));
    }
    let joint: Vec<usize> = (0..w_s.classes())
        .filter(|&c| w_s.active[c] && w_t.active[c])
        .collect();
    if joint.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(Discrepancy {
            value: zero,
            sigma: f64::NAN,
            active_classes: 0,
        });
    }
    let n = ns + nt;
    let mut coeffs = vec![0.0; n * n];
    for &c in &joint {
        let v: Vec<f64> = w_s
            .row(c)
            .iter()
            .copied()
            .chain(w_t.row(c).iter().map(|w| -w))
            .collect();
        for i in 0..n {
            for j in 0..n {
                coeffs[i * n + j] += v[i] * v[j];
            }
        }
    }
    let scale = 1.0 / joint.len() as f64;
    coeffs.iter_mut().for_each(|c| *c *= scale);

    let rows = stack_pcms(g, pcms_s, pcms_t)?;
    let (kernel, sigma) = kernel_matrix(g, rows, sigma)?;
    let value = quadratic_form(g, kernel, Tensor::new(vec![n, n], coeffs)?)?;
    Ok(Discrepancy {
        value,
        sigma,
        active_classes: joint.len(),
    })
}

fn mean_norm(g: &mut Graph, pcms: &[PixelCorrelationMatrix]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for m in pcms {
        let sq = g.square(m.var)?;
        let s = g.sum(sq)?;
        let norm = g.sqrt(s)?;
        acc = Some(match acc {
            Some(a) => g.add(a, norm)?,
            None => norm,
        });
    }
    let total = acc.ok_or_else(|| Error::usage("norm restriction needs a non-empty batch"))?;
    g.scale(total, 1.0 / pcms.len() as f64)
}

/// `(mean ‖Ms‖_F − R)² + (mean ‖Mt‖_F − R)²`.
pub fn norm_restriction_loss(
    g: &mut Graph,
    pcms_s: &[PixelCorrelationMatrix],
    pcms_t: &[PixelCorrelationMatrix],
    radius: f64,
) -> Result<Var> {
    if !(radius > 0.0) {
        return Err(Error::usage(format!(
            "restrictive scalar R must be positive, got {radius}"
        )));
    }
    let mut terms = Vec::with_capacity(2);
    for side in [pcms_s, pcms_t] {
        let m = mean_norm(g, side)?;
        let d = g.add_scalar(m, -radius)?;
        terms.push(g.square(d)?);
    }
    g.add(terms[0], terms[1])
}

/// Biased MMD² between two feature batches under a Gaussian kernel.
pub fn mmd_loss(
    g: &mut Graph,
    feats_s: &[Var],
    feats_t: &[Var],
    sigma: SigmaPolicy,
) -> Result<Discrepancy> {
    if feats_s.is_empty() || feats_t.is_empty() {
        return Err(Error::usage("mmd needs non-empty batches"));
    }
    let (ns, nt) = (feats_s.len(), feats_t.len());
    let rows: Vec<Var> = feats_s.iter().chain(feats_t).copied().collect();
    let stacked = g.stack_rows(&rows)?;
    let (kernel, sigma) = kernel_matrix(g, stacked, sigma)?;
    let v: Vec<f64> = (0..ns)
        .map(|_| 1.0 / ns as f64)
        .chain((0..nt).map(|_| -1.0 / nt as f64))
        .collect();
    let n = ns + nt;
    let coeffs = Tensor::from_fn(&[n, n], |k| v[k / n] * v[k % n]);
    let value = quadratic_form(g, kernel, coeffs)?;
    Ok(Discrepancy {
        value,
        sigma,
        active_classes: 1,
    })
}

fn covariance(g: &mut Graph, feats: &[Var]) -> Result<Var> {
    let n = feats.len();
    let x = g.stack_rows(feats)?;
    let centering = Tensor::from_fn(&[n, n], |k| {
        let diag = if k / n == k % n { 1.0 } else { 0.0 };
        diag - 1.0 / n as f64
    });
    let h = g.constant(centering);
    let xc = g.matmul(h, x)?;
    let xct = g.transpose(xc)?;
    let cov = g.matmul(xct, xc)?;
    g.scale(cov, 1.0 / (n as f64 - 1.0))
}

/// `‖Cov_s − Cov_t‖²_F / (4d²)` over `d`-wide features.
pub fn coral_loss(g: &mut Graph, feats_s: &[Var], feats_t: &[Var]) -> Result<Var> {
    if feats_s.len() < 2 || feats_t.len() < 2 {
        return Err(Error::usage("coral needs at least two samples per domain"));
    }
    let d = g.value(feats_s[0]).len() as f64;
    let cs = covariance(g, feats_s)?;
    let ct = covariance(g, feats_t)?;
    let diff = g.sub(cs, ct)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (4.0 * d * d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_dist: f64,
    pub radius: f64,
    pub sigma: SigmaPolicy,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 0.5,
            lambda_r: 1.0,
            lambda_d: 1.0,
            lambda_dist: 0.001,
            radius: 25.0,
            sigma: SigmaPolicy::Median,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_v,
            self.lambda_r,
            self.lambda_d,
            self.lambda_dist,
        ];
        if all.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::usage(format!(
                "loss weights must be non-negative: {all:?}"
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::usage(format!(
                "R must be positive, got {}",
                self.radius
            )));
        }
        if let SigmaPolicy::Fixed(s) = self.sigma {
            check_sigma(s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Base,
    Pcd,
    L2Norm,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Objective::Base),
            "pcd" => Ok(Objective::Pcd),
            "l2norm" => Ok(Objective::L2Norm),
            other => Err(Error::usage(format!("unknown objective variant {other:?}"))),
        }
    }
}

/// Component losses of one step. Absent components contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_y: Var,
    pub l_vd: Option<Var>,
    pub l_cd: Option<Var>,
    /// PCD (or a baseline discrepancy) for [`Objective::Pcd`], the norm
    /// restriction term for [`Objective::L2Norm`].
    pub alignment: Option<Var>,
}

/// Scalar objective stepped downhill by the optimizer. Domain losses are
/// added; the adversarial sign lives in the gradient reversal layers.
pub fn overall_loss(
    g: &mut Graph,
    terms: &LossTerms,
    w: &LossWeights,
    objective: Objective,
) -> Result<Var> {
    let mut total = terms.l_y;
    let mut add = |g: &mut Graph, term: Option<Var>, weight: f64| -> Result<()> {
        if let Some(t) = term {
            let scaled = g.scale(t, weight)?;
            total = g.add(total, scaled)?;
        }
        Ok(())
    };
    add(g, terms.l_vd, w.lambda_v)?;
    add(g, terms.l_cd, w.lambda_r)?;
    match objective {
        Objective::Base => {}
        Objective::Pcd => add(g, terms.alignment, w.lambda_d)?,
        Objective::L2Norm => add(g, terms.alignment, w.lambda_dist)?,
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn classification_loss_cases() {
        let mut g = Graph::new();
        let labels = one_hot(&[0, 2], 3).unwrap();
        let perfect = g.constant(labels.clone());
        let l = classification_loss(&mut g, perfect, &labels).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let uniform = g.constant(Tensor::full(&[2, 3], 1.0 / 3.0));
        let l = classification_loss(&mut g, uniform, &labels).unwrap();
        assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-15);

        let probs =
            g.constant(Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 0.25, 0.25, 0.5]).unwrap());
        let l = classification_loss(&mut g, probs, &labels).unwrap();
        let expected = -(0.7f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);

        // zero probability at the labelled class is clamped, not infinite
        let zero = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l = classification_loss(&mut g, zero, &one_hot(&[0], 2).unwrap()).unwrap();
        assert!((g.scalar_value(l) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn domain_loss_cases() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[3], 0.5));
        let t = g.constant(Tensor::full(&[2], 0.5));
        let l = domain_loss(&mut g, s, t).unwrap();
        assert!((g.scalar_value(l) - 2.0 * 2f64.ln()).abs() < 1e-15);

        let s = g.constant(Tensor::full(&[3], 1e-9));
        let t = g.constant(Tensor::full(&[2], 1.0 - 1e-9));
        let l = domain_loss(&mut g, s, t).unwrap();
        assert!(g.scalar_value(l) < 1e-8);

        let sp = [0.2, 0.6, 0.9];
        let tp = [0.3, 0.8];
        let s = g.constant(Tensor::vector(sp.to_vec()));
        let t = g.constant(Tensor::vector(tp.to_vec()));
        let l = domain_loss(&mut g, s, t).unwrap();
        let expected =
            -(0.8f64.ln() + 0.4f64.ln() + 0.1f64.ln()) / 3.0 - (0.3f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn source_weights_cases() {
        let w = source_class_weights(&one_hot(&[0, 0, 1, 0], 3).unwrap()).unwrap();
        assert_eq!(w.row(0), &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
        assert_eq!(w.row(1), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(w.active, vec![true, true, false]);
        assert_eq!(w.row(2), &[0.0; 4]);

        let single = source_class_weights(&one_hot(&[1], 3).unwrap()).unwrap();
        assert_eq!(single.active, vec![false, true, false]);
        assert_eq!(single.row(1), &[1.0]);
        single.check_normalized(1e-9).unwrap();
    }

    #[test]
    fn target_weights_reduce_and_threshold() {
        let hard = one_hot(&[2, 0, 2], 3).unwrap();
        assert_eq!(
            target_class_weights(&hard, DEFAULT_ACTIVE_THRESHOLD).unwrap(),
            source_class_weights(&hard).unwrap()
        );
        let uniform = Tensor::full(&[2, 2], 0.5);
        let w = target_class_weights(&uniform, DEFAULT_ACTIVE_THRESHOLD).unwrap();
        assert!(w.weights.data().iter().all(|&v| v == 0.5));

        let faint = Tensor::new(vec![2, 2], vec![1.0 - 1e-4, 1e-4, 1.0 - 1e-4, 1e-4]).unwrap();
        let w = target_class_weights(&faint, DEFAULT_ACTIVE_THRESHOLD).unwrap();
        assert_eq!(w.active, vec![true, false]);
        w.check_normalized(1e-9).unwrap();
    }

    #[test]
    fn random_weights_are_normalized() {
        let mut rng = rng_for(3, "weights", 0);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let classes = rng.random_range(2..5);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            source_class_weights(&one_hot(&labels, classes).unwrap())
                .unwrap()
                .check_normalized(1e-9)
                .unwrap();
            let soft = Tensor::from_fn(&[n, classes], |_| rng.random_range(0.0..1.0));
            target_class_weights(&soft, DEFAULT_ACTIVE_THRESHOLD)
                .unwrap()
                .check_normalized(1e-9)
                .unwrap();
        }
    }

    #[test]
    fn kernel_cases() {
        let a = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(gaussian_kernel(&a, &a, 0.3).unwrap(), 1.0);
        let b = Tensor::new(vec![2, 2], vec![1.5, 0.5, 0.1, -0.1]).unwrap();
        // ‖a − b‖² = 1 + 1 = 2
        let k = gaussian_kernel(&a, &b, 1.0).unwrap();
        assert!((k - (-1f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
        assert_eq!(k, gaussian_kernel(&b, &a, 1.0).unwrap());
        assert!(gaussian_kernel(&a, &b, 0.0).is_err());
    }

    #[test]
    fn bandwidth_cases() {
        let a = Tensor::full(&[2, 2], 0.25);
        assert_eq!(median_bandwidth(&[&a, &a]).unwrap(), 1.0);
        assert!(median_bandwidth(&[&a]).is_err());
        let sigma = bandwidth_from_sq_distances(&[9.0, 1.0, 4.0]).unwrap();
        assert!((sigma * sigma - 2.0).abs() < 1e-15);

        let b = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.6, 0.4]).unwrap();
        let c = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.2, 0.8]).unwrap();
        let base = median_bandwidth(&[&a, &b, &c]).unwrap();
        let scaled: Vec<Tensor> = [&a, &b, &c].iter().map(|t| t.map(|v| -3.0 * v)).collect();
        let refs: Vec<&Tensor> = scaled.iter().collect();
        assert!((median_bandwidth(&refs).unwrap() - 3.0 * base).abs() < 1e-12);
    }

    fn pcm_const(g: &mut Graph, t: &Tensor) -> PixelCorrelationMatrix {
        let n = t.dims()[0];
        PixelCorrelationMatrix {
            var: g.constant(t.clone()),
            source_dims: [1, 1, n],
        }
    }

    #[test]
    fn pcd_two_point_and_empty() {
        let a = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.4, 0.6]).unwrap();
        let mut g = Graph::new();
        let ms = [pcm_const(&mut g, &a)];
        let mt = [pcm_const(&mut g, &b)];
        let w = source_class_weights(&one_hot(&[0], 1).unwrap()).unwrap();
        let d = pcd(&mut g, &ms, &mt, &w, &w, SigmaPolicy::Fixed(0.5)).unwrap();
        let k = gaussian_kernel(&a, &b, 0.5).unwrap();
        assert!((g.scalar_value(d.value) - (2.0 - 2.0 * k)).abs() < 1e-15);

        let ws = source_class_weights(&one_hot(&[0], 2).unwrap()).unwrap();
        let wt = source_class_weights(&one_hot(&[1], 2).unwrap()).unwrap();
        let d = pcd(&mut g, &ms, &mt, &ws, &wt, SigmaPolicy::Median).unwrap();
        assert_eq!(g.scalar_value(d.value), 0.0);
        assert_eq!(d.active_classes, 0);

        let w3 = source_class_weights(&one_hot(&[0], 3).unwrap()).unwrap();
        assert!(pcd(&mut g, &ms, &mt, &ws, &w3, SigmaPolicy::Median).is_err());
    }

    #[test]
    fn norm_restriction_cases() {
        // a 1x1 PCM has norm exactly 1; use scaled stand-ins to hit R±k
        let mut g = Graph::new();
        let r = 25.0;
        let at = |g: &mut Graph, v: f64| PixelCorrelationMatrix {
            var: g.constant(Tensor::new(vec![1, 1], vec![v]).unwrap()),
            source_dims: [1, 1, 1],
        };
        let s = [at(&mut g, r)];
        let t = [at(&mut g, r)];
        let l = norm_restriction_loss(&mut g, &s, &t, r).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        let s = [at(&mut g, r + 0.5), at(&mut g, r + 1.5)];
        let t = [at(&mut g, r - 2.0)];
        let l = norm_restriction_loss(&mut g, &s, &t, r).unwrap();
        assert!((g.scalar_value(l) - 5.0).abs() < 1e-12);
        assert!(norm_restriction_loss(&mut g, &[], &t, r).is_err());
        assert!(norm_restriction_loss(&mut g, &s, &t, 0.0).is_err());

        let mut rng = rng_for(4, "norm", 0);
        let ts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[3, 3], |_| rng.random_range(0.0..1.0)))
            .collect();
        let s: Vec<_> = ts[..2].iter().map(|t| pcm_const(&mut g, t)).collect();
        let t = [pcm_const(&mut g, &ts[2])];
        let l = norm_restriction_loss(&mut g, &s, &t, 2.0).unwrap();
        let ms = (ts[0].frobenius_norm() + ts[1].frobenius_norm()) / 2.0;
        let mt = ts[2].frobenius_norm();
        let expected = (ms - 2.0).powi(2) + (mt - 2.0).powi(2);
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn overall_loss_composition() {
        let mut g = Graph::new();
        let terms = LossTerms {
            l_y: scalar(&mut g, 1.25),
            l_vd: Some(scalar(&mut g, 1.3)),
            l_cd: Some(scalar(&mut g, 1.1)),
            alignment: Some(scalar(&mut g, 0.2)),
        };
        let w = LossWeights::default();
        assert_eq!((w.lambda_v, w.lambda_r, w.lambda_d), (0.5, 1.0, 1.0));
        let base = overall_loss(&mut g, &terms, &w, Objective::Base).unwrap();
        assert!((g.scalar_value(base) - (1.25 + 0.5 * 1.3 + 1.1)).abs() < 1e-15);
        let full = overall_loss(&mut g, &terms, &w, Objective::Pcd).unwrap();
        assert!((g.scalar_value(full) - (1.25 + 0.65 + 1.1 + 0.2)).abs() < 1e-15);
        let zero = LossWeights {
            lambda_v: 0.0,
            lambda_r: 0.0,
            lambda_d: 0.0,
            ..LossWeights::default()
        };
        let l = overall_loss(&mut g, &terms, &zero, Objective::Pcd).unwrap();
        assert_eq!(g.scalar_value(l), 1.25);
        assert!("bogus".parse::<Objective>().is_err());
        assert_eq!("l2norm".parse::<Objective>().unwrap(), Objective::L2Norm);
    }

    #[test]
    fn mmd_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let d = mmd_loss(&mut g, &[x], &[y], SigmaPolicy::Fixed(1.0)).unwrap();
        let k = (-0.5f64).exp();
        assert!((g.scalar_value(d.value) - (2.0 - 2.0 * k)).abs() < 1e-15);
        let same = mmd_loss(&mut g, &[x, y], &[x, y], SigmaPolicy::Median).unwrap();
        assert!(g.scalar_value(same.value).abs() < 1e-12);
        assert!(mmd_loss(&mut g, &[], &[y], SigmaPolicy::Median).is_err());
    }

    #[test]
    fn coral_cases() {
        let mut g = Graph::new();
        // variances 1 and 4 in one dimension
        let s: Vec<Var> = [-1.0, 1.0]
            .iter()
            .map(|&v| g.constant(Tensor::vector(vec![v])))
            .collect();
        let t: Vec<Var> = [-2.0, 2.0]
            .iter()
            .map(|&v| g.constant(Tensor::vector(vec![v])))
            .collect();
        // sample variance with n-1: (1+1)/1 = 2 and (4+4)/1 = 8 -> use spread giving 1 and 4
        let s2: Vec<Var> = [-(0.5f64).sqrt(), 0.5f64.sqrt()]
            .iter()
            .map(|&v| g.constant(Tensor::vector(vec![v])))
            .collect();
        let t2: Vec<Var> = [-(2.0f64).sqrt(), 2.0f64.sqrt()]
            .iter()
            .map(|&v| g.constant(Tensor::vector(vec![v])))
            .collect();
        let l = coral_loss(&mut g, &s2, &t2).unwrap();
        assert!((g.scalar_value(l) - 2.25).abs() < 1e-12);
        let a = coral_loss(&mut g, &s, &t).unwrap();
        let b = coral_loss(&mut g, &t, &s).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
        let z = coral_loss(&mut g, &s, &s).unwrap();
        assert_eq!(g.scalar_value(z), 0.0);
        assert!(coral_loss(&mut g, &s[..1], &t).is_err());
    }
}
