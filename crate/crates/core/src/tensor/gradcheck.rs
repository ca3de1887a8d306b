use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the backward gradient of a scalar function of `x` with central
/// differences, returning the largest `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + ?Sized,
{
    finite_diff_check_many(
        &|g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// Multi-input form of [`finite_diff_check`]; every input is perturbed.
pub fn finite_diff_check_many<F>(f: &F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + ?Sized,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::usage(format!(
            "eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let first = g.scalar_value(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.dims()))
        })
        .collect();
    drop(g);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut inputs = xs.to_vec();
    let second = eval(&inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            inputs[which].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_is_exact() {
        let err =
            finite_diff_check(&|g: &mut Graph, x| g.sum(x), &random(&[3, 5], 1), 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let f = |g: &mut Graph, x| {
            let s = g.square(x)?;
            g.sum(s)
        };
        let err = finite_diff_check(&f, &random(&[4, 4], 2), 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn matmul_gradient() {
        let f = |g: &mut Graph, v: &[Var]| {
            let p = g.matmul(v[0], v[1])?;
            g.sum(p)
        };
        let err =
            finite_diff_check_many(&f, &[random(&[3, 4], 3), random(&[4, 2], 4)], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn reversed_path_has_negated_gradient() {
        let x = random(&[5], 5);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let r = g.grad_reverse(v, 1.0).unwrap();
        let sq = g.square(r).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        for (a, xv) in g.grad(v).unwrap().data().iter().zip(x.data()) {
            // numeric gradient of the identity path is 2x
            assert_eq!(*a, -2.0 * xv);
        }
        // and the checker sees the mismatch against central differences
        let f = |g: &mut Graph, v| {
            let r = g.grad_reverse(v, 1.0)?;
            let sq = g.square(r)?;
            g.sum(sq)
        };
        let err = finite_diff_check(&f, &x, 1e-5).unwrap();
        assert!((err - 2.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let f = |g: &mut Graph, v| {
            calls.set(calls.get() + 1.0);
            let s = g.sum(v)?;
            g.add_scalar(s, calls.get())
        };
        assert!(matches!(
            finite_diff_check(&f, &random(&[2], 6), 1e-4),
            Err(Error::Determinism { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let f = |g: &mut Graph, v| g.sum(v);
        assert!(finite_diff_check(&f, &random(&[2], 7), 1e-2).is_err());
    }
}
