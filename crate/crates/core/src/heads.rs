//! Action classifier and the two adversarial domain discriminators.
//!
//! Discriminators see their input through a gradient reversal layer, so a
//! single downhill step on `L_y + λ·L_d` trains the discriminator to separate
//! domains while pushing the feature generators to confuse it.

use rand::Rng;

use crate::encoder::uniform_init;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Domain label of source samples; target samples carry `1`.
pub const SOURCE_DOMAIN: f64 = 0.0;
pub const TARGET_DOMAIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform_init(rng, &[input, hidden], input),
            b1: uniform_init(rng, &[hidden], input),
            w2: uniform_init(rng, &[hidden, 1], hidden),
            b2: uniform_init(rng, &[1], hidden),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub video_disc: Mlp,
    pub corr_disc: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct HeadVars {
    pub classifier_w: Var,
    pub classifier_b: Var,
    pub video_disc: MlpVars,
    pub corr_disc: MlpVars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discriminator {
    Video,
    Correlation,
}

impl HeadParams {
    pub fn init(
        video_width: usize,
        corr_width: usize,
        classes: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = video_width + corr_width;
        Self {
            classifier_w: uniform_init(rng, &[width, classes], width),
            classifier_b: uniform_init(rng, &[classes], width),
            video_disc: Mlp::init(video_width, hidden, rng),
            corr_disc: Mlp::init(corr_width, hidden, rng),
        }
    }

    pub fn zeros(video_width: usize, corr_width: usize, classes: usize, hidden: usize) -> Self {
        Self {
            classifier_w: Tensor::zeros(&[video_width + corr_width, classes]),
            classifier_b: Tensor::zeros(&[classes]),
            video_disc: Mlp::zeros(video_width, hidden),
            corr_disc: Mlp::zeros(corr_width, hidden),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier_b.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.classifier_w, &self.classifier_b];
        out.extend(self.video_disc.tensors());
        out.extend(self.corr_disc.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.classifier_w, &mut self.classifier_b];
        out.extend(self.video_disc.tensors_mut());
        out.extend(self.corr_disc.tensors_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "classifier.weight".to_string(),
            "classifier.bias".to_string(),
        ];
        for d in ["video_disc", "corr_disc"] {
            for p in ["w1", "b1", "w2", "b2"] {
                out.push(format!("{d}.{p}"));
            }
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        let mut mlp = |m: &Mlp| MlpVars {
            w1: g.leaf(m.w1.clone(), trainable),
            b1: g.leaf(m.b1.clone(), trainable),
            w2: g.leaf(m.w2.clone(), trainable),
            b2: g.leaf(m.b2.clone(), trainable),
        };
        let video_disc = mlp(&self.video_disc);
        let corr_disc = mlp(&self.corr_disc);
        HeadVars {
            classifier_w: g.leaf(self.classifier_w.clone(), trainable),
            classifier_b: g.leaf(self.classifier_b.clone(), trainable),
            video_disc,
            corr_disc,
        }
    }
}

impl HeadVars {
    /// Same order as [`HeadParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.classifier_w, self.classifier_b];
        for m in [self.video_disc, self.corr_disc] {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out
    }

    /// Inverse of [`HeadVars::all`].
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        match *vars {
            [classifier_w, classifier_b, a1, a2, a3, a4, c1, c2, c3, c4] => Ok(Self {
                classifier_w,
                classifier_b,
                video_disc: MlpVars {
                    w1: a1,
                    b1: a2,
                    w2: a3,
                    b2: a4,
                },
                corr_disc: MlpVars {
                    w1: c1,
                    b1: c2,
                    w2: c3,
                    b2: c4,
                },
            }),
            _ => Err(Error::usage(format!(
                "heads have 10 tensors, got {} vars",
                vars.len()
            ))),
        }
    }
}

/// Class probabilities `[N×Cl]` for `N` samples from `f ⊕ f_c`.
pub fn classify(
    g: &mut Graph,
    p: &HeadVars,
    features: &[Var],
    corr_features: &[Var],
) -> Result<Var> {
    if features.len() != corr_features.len() || features.is_empty() {
        return Err(Error::usage(format!(
            "classify needs matching non-empty batches, got {} and {}",
            features.len(),
            corr_features.len()
        )));
    }
    let width = g.dims(p.classifier_w)[0];
    let mut rows = Vec::with_capacity(features.len());
    for (&f, &fc) in features.iter().zip(corr_features) {
        let row = g.concat(&[f, fc])?;
        if g.dims(row)[0] != width {
            return Err(Error::shape(
                "classify",
                format!("classifier expects width {width}, got {}", g.dims(row)[0]),
            ));
        }
        rows.push(row);
    }
    let x = g.stack_rows(&rows)?;
    let logits = g.linear(x, p.classifier_w, p.classifier_b)?;
    g.softmax_rows(logits)
}

/// Domain probabilities `[N]` (probability of the target domain) behind a
/// gradient reversal layer of strength `lambda`.
pub fn discriminate(
    g: &mut Graph,
    p: &HeadVars,
    inputs: &[Var],
    lambda: f64,
    which: Discriminator,
) -> Result<Var> {
    let m = match which {
        Discriminator::Video => p.video_disc,
        Discriminator::Correlation => p.corr_disc,
    };
    let x = g.stack_rows(inputs)?;
    let width = g.dims(m.w1)[0];
    if g.dims(x)[1] != width {
        return Err(Error::shape(
            "discriminate",
            format!(
                "{which:?} discriminator expects width {width}, got {}",
                g.dims(x)[1]
            ),
        ));
    }
    let reversed = g.grad_reverse(x, lambda)?;
    let h = g.linear(reversed, m.w1, m.b1)?;
    let h = g.relu(h)?;
    let logit = g.linear(h, m.w2, m.b2)?;
    let prob = g.sigmoid(logit)?;
    g.reshape(prob, &[inputs.len()])
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn zero_weights_give_uniform_and_half() {
        let heads = HeadParams::zeros(3, 2, 4, 8);
        let mut g = Graph::new();
        let vars = heads.bind(&mut g, true);
        let f = vec_var(&mut g, &[1.0, -2.0, 0.5]);
        let fc = vec_var(&mut g, &[0.3, 0.1]);
        let probs = classify(&mut g, &vars, &[f], &[fc]).unwrap();
        assert_eq!(g.value(probs).data(), &[0.25; 4]);
        let d = discriminate(&mut g, &vars, &[f], 1.0, Discriminator::Video).unwrap();
        assert_eq!(g.value(d).data(), &[0.5]);
        let dc = discriminate(&mut g, &vars, &[fc], 1.0, Discriminator::Correlation).unwrap();
        assert_eq!(g.value(dc).data(), &[0.5]);
    }

    #[test]
    fn classifier_hand_case() {
        // logits (0, ln 3) from bias alone
        let mut heads = HeadParams::zeros(1, 1, 2, 4);
        heads.classifier_b = Tensor::vector(vec![0.0, 3f64.ln()]);
        let mut g = Graph::new();
        let vars = heads.bind(&mut g, false);
        let f = vec_var(&mut g, &[1.0]);
        let fc = vec_var(&mut g, &[1.0]);
        let probs = classify(&mut g, &vars, &[f], &[fc]).unwrap();
        let v = g.value(probs).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn probabilities_normalized_and_width_checked() {
        let heads = HeadParams::init(4, 2, 5, 8, &mut rng_for(1, "heads", 0));
        let mut g = Graph::new();
        let vars = heads.bind(&mut g, true);
        let f = vec_var(&mut g, &[1.0, -2.0, 0.5, 0.2]);
        let fc = vec_var(&mut g, &[0.3, 0.1]);
        let probs = classify(&mut g, &vars, &[f, f], &[fc, fc]).unwrap();
        for row in g.value(probs).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(classify(&mut g, &vars, &[fc], &[fc]).is_err());
        assert!(matches!(
            discriminate(&mut g, &vars, &[fc], 1.0, Discriminator::Video),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn discriminator_forward_ignores_lambda_and_backward_flips() {
        let heads = HeadParams::init(3, 2, 2, 8, &mut rng_for(2, "heads", 0));
        let x = Tensor::vector(vec![0.4, -0.3, 1.2]);
        let mut outputs = Vec::new();
        let mut grads = Vec::new();
        for lambda in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let vars = heads.bind(&mut g, false);
            let xv = g.param(x.clone());
            let d = discriminate(&mut g, &vars, &[xv], lambda, Discriminator::Video).unwrap();
            outputs.push(g.value(d).data()[0]);
            let s = g.sum(d).unwrap();
            g.backward(s).unwrap();
            grads.push(g.grad(xv).unwrap().clone());
        }
        assert!(outputs.iter().all(|&o| o.to_bits() == outputs[0].to_bits()));
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
        // plain (unreversed) path for comparison
        let mut g = Graph::new();
        let vars = heads.bind(&mut g, false);
        let xv = g.param(x);
        let m = vars.video_disc;
        let row = g.stack_rows(&[xv]).unwrap();
        let h = g.linear(row, m.w1, m.b1).unwrap();
        let h = g.relu(h).unwrap();
        let l = g.linear(h, m.w2, m.b2).unwrap();
        let p = g.sigmoid(l).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        for (rev, plain) in grads[2].data().iter().zip(g.grad(xv).unwrap().data()) {
            assert_eq!(*rev, -plain);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }
}
