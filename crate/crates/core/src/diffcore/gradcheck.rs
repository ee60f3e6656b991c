use super::{DiffError, Result, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over every
/// entry of every parameter tensor.
pub fn gradient_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_finite(loss.item())?;
        tape.backward(loss)?;
        vars.iter().map(|v| tape.grad(*v)).collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        check_finite(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        check_finite_all(grad)?;
        for e in 0..grad.len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Pins a closure to the higher-ranked signature `gradient_check` expects.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DiffError::NumericalFailure(format!("non-finite value {v}")))
    }
}

fn check_finite_all(t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NumericalFailure("non-finite gradient".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_matches_closed_form() {
        // f(x) = xᵀ A x; analytic gradient is (A + Aᵀ) x.
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.5, 3.0]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.3, -0.7]).unwrap();
        let f = objective(|tape, v| {
            let am = tape.constant(a.clone());
            let ax = am.matmul(&v[0])?;
            Ok(v[0].mul(&ax)?.sum())
        });
        let err = gradient_check(f, &[x], 1e-5).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[2, 4, 3]);
        let w = random(&mut rng, &[4, 2]);
        let f = objective(|_, v| {
            let ab = v[0].bmm(&v[1])?.softmax_row();
            let t = ab.transpose()?.tanh();
            let lin = v[0].matmul(&v[2])?.relu();
            let ls = lin.log_softmax_row();
            let cat = Var::concat(&[v[0].slice(2, 1, 3)?, ls], 2)?;
            let sel = cat.index_select(1, &[2, 0, 2])?;
            let norm = sel.sub(&sel.mean_last()?.reshape(&[2, 3, 1])?)?;
            let scaled = norm.div(&sel.std_last()?.reshape(&[2, 3, 1])?)?;
            let e = t.exp().add_scalar(1.0).log()?;
            scaled.square()?.mean().add(&e.sum().scale(0.1))?.add(&v[2].std())
        });
        let err = gradient_check(f, &[a, b, w], 1e-5).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }
}
