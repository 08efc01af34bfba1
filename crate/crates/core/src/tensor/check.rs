//! Central finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` must be pure and deterministic given the parameter values: it
/// registers each tensor of `params` (in order) on the tape and returns the
/// scalar loss. Returns the max over all parameter entries of
/// `|analytic − numeric| / max(|numeric|, 1e-8)`.
pub fn finite_diff_check<F>(build: &F, params: &[Tensor], eps: Real) -> Result<Real>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check loss".into()));
        }
        Ok(value)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite("finite_diff_check loss".into()));
    }
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel: Real = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for idx in 0..params[pi].numel() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: Real) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let params = vec![Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap()];
        let err = finite_diff_check(
            &|tape, vars| {
                let s = tape.sum_sq(vars[0]);
                Ok(tape.scale(s, 0.5))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn two_layer_sigmoid_net_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[4, 3], 1.0);
        let params = vec![
            random_tensor(&mut rng, &[5, 3], 0.8),
            random_tensor(&mut rng, &[5], 0.3),
            random_tensor(&mut rng, &[2, 5], 0.8),
            random_tensor(&mut rng, &[2], 0.3),
        ];
        let err = finite_diff_check(
            &|tape, vars| {
                let xv = tape.constant(x.clone());
                let z1 = tape.matmul_tb(xv, vars[0])?;
                let z1 = tape.add_bias(z1, vars[1])?;
                let h1 = tape.sigmoid(z1);
                let z2 = tape.matmul_tb(h1, vars[2])?;
                let z2 = tape.add_bias(z2, vars[3])?;
                Ok(tape.mean(z2))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn relu_net_away_from_kinks_checks_out() {
        // Seed chosen so no pre-activation magnitude falls below 1e-3; the
        // assertion below guards the probe condition itself.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[4, 3], 1.0);
        let w = random_tensor(&mut rng, &[4, 3], 0.9);
        let b = random_tensor(&mut rng, &[4], 0.5);
        {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let z = tape.matmul_tb(xv, wv).unwrap();
            let z = tape.add_bias(z, bv).unwrap();
            assert!(
                tape.value(z).data().iter().all(|v| v.abs() > 1e-3),
                "probe point too close to a relu kink"
            );
        }
        let err = finite_diff_check(
            &|tape, vars| {
                let xv = tape.constant(x.clone());
                let z = tape.matmul_tb(xv, vars[0])?;
                let z = tape.add_bias(z, vars[1])?;
                let h = tape.relu(z);
                Ok(tape.mean(h))
            },
            &[w.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let params = vec![Tensor::scalar(1.0)];
        let res = finite_diff_check(
            &|tape, vars| {
                let big = tape.scale(vars[0], Real::MAX);
                Ok(tape.sum_sq(big))
            },
            &params,
            1e-6,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
