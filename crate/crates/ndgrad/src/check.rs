use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{NdError, Result, Scalar};

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must be a deterministic map from the parameter list to a scalar; it is
/// evaluated once on tape-registered parameters for the analytic pass, twice
/// at the base point (to detect nondeterminism), and 2·numel times for the
/// differences. Returns the maximum over all parameter entries of
/// `|analytic − central| / max(1, |analytic|)`.
pub fn finite_diff_check<S, F>(f: F, params: &[Tensor<S>], epsilon: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
{
    if !(epsilon > S::zero() && epsilon <= S::from_f64(1e-2).unwrap()) {
        return Err(NdError::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {}",
            epsilon
        )));
    }

    let detached: Vec<Tensor<S>> = params.iter().map(Tensor::detach).collect();
    let base = f(&detached)?.item()?;
    let again = f(&detached)?.item()?;
    if base != again {
        return Err(NdError::NonDeterministic);
    }

    let tape = Tape::new();
    let traced: Vec<Tensor<S>> = detached.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&traced)?;
    let grads = loss.backward()?;

    let one = S::one();
    let two = S::from_f64(2.0).unwrap();
    let mut worst = S::zero();
    for (pi, p) in detached.iter().enumerate() {
        let analytic = grads
            .wrt(&traced[pi])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![S::zero(); p.numel()]);
        for j in 0..p.numel() {
            let eval = |delta: S| -> Result<S> {
                let mut ps = detached.clone();
                let mut data = p.data().to_vec();
                data[j] += delta;
                ps[pi] = Tensor::from_parts(p.shape().to_vec(), data);
                f(&ps)?.item()
            };
            let plus = eval(epsilon)?;
            let minus = eval(-epsilon)?;
            let numeric = (plus - minus) / (two * epsilon);
            let err = (analytic[j] - numeric).abs() / one.max(analytic[j].abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function() {
        let x = Tensor::<f64>::scalar(3.0);
        let err = finite_diff_check(
            |p| p[0].mul(&p[0])?.sum_all(),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {}", err);
    }

    #[test]
    fn exp_function() {
        let x = Tensor::<f64>::scalar(0.0);
        let err = finite_diff_check(|p| p[0].exp()?.sum_all(), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {}", err);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff_check(|p| p[0].sum_all(), &[x], 0.5).is_err());
    }
}
