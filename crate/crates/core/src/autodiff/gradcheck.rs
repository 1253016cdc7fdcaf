use super::{AutodiffError, Tape, Tensor};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a tape and the parameters bound to it and must return a
/// scalar. Returns the largest `|analytic - numeric| / max(1, |analytic|)`
/// over every parameter entry.
pub fn finite_difference_check<T, E, F>(f: F, params: &[Tensor<T>], h: T) -> Result<T, E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: Fn(&Tape<T>, &[Tensor<T>]) -> Result<Tensor<T>, E>,
{
    if h <= T::zero() {
        return Err(AutodiffError::InvalidShape {
            op: "finite_difference_check",
            shape: vec![],
            reason: "step must be positive".into(),
        }
        .into());
    }
    let tape = Tape::new();
    let bound: Vec<Tensor<T>> = params.iter().map(|p| tape.leaf(p)).collect();
    let root = f(&tape, &bound)?;
    if !root.item().is_finite() {
        return Err(AutodiffError::NonFinite { op: "finite_difference_check" }.into());
    }
    let analytic: Vec<Tensor<T>> = if root.node().is_some() {
        let grads = tape.backward(&root)?;
        bound.iter().map(|b| grads.get(b)).collect()
    } else {
        // constant function: nothing on the tape
        params
            .iter()
            .map(|p| Tensor::from_parts(p.shape().to_vec(), vec![T::zero(); p.len()]))
            .collect()
    };

    let eval = |probe: &[Tensor<T>]| -> Result<T, E> {
        let tape = Tape::inference();
        let v = f(&tape, probe)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite { op: "finite_difference_check" }.into())
        }
    };

    let mut probe: Vec<Tensor<T>> = params.iter().map(Tensor::detach).collect();
    let two_h = h + h;
    let mut worst = T::zero();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.len() {
            let base = param.data()[k];
            let mut shifted = param.to_vec();
            shifted[k] = base + h;
            probe[pi] = Tensor::from_parts(param.shape().to_vec(), shifted.clone());
            let up = eval(&probe)?;
            shifted[k] = base - h;
            probe[pi] = Tensor::from_parts(param.shape().to_vec(), shifted);
            let down = eval(&probe)?;
            probe[pi] = param.detach();

            let numeric = (up - down) / two_h;
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(T::one());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 4.0, 0.0, -1.0]).unwrap();
        let err = finite_difference_check::<f64, AutodiffError, _>(|t, p| t.sum(&p[0]), &[x], 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_difference_check::<f64, AutodiffError, _>(|_, _| Ok(Tensor::scalar(4.2)), &[x], 1e-5)
            .unwrap();
        assert!(err <= 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_difference_check::<f64, AutodiffError, _>(|t, p| t.sum(&p[0]), &[x], 0.0).is_err());
    }
}
